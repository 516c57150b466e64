#include "memoe/predict.hpp"

#include "memoe/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace memoe {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;

// P(a <= Z < e) for a standard normal, accurate in both tails.
double normal_mass(double a, double e) {
    if (a >= 0.0) return 0.5 * (std::erfc(a * kInvSqrt2) - std::erfc(e * kInvSqrt2));
    if (e <= 0.0) return 0.5 * (std::erfc(-e * kInvSqrt2) - std::erfc(-a * kInvSqrt2));
    return 1.0 - 0.5 * std::erfc(-a * kInvSqrt2) - 0.5 * std::erfc(e * kInvSqrt2);
}

double inverse_quadratic_form(const Mat& A, const Vec& v) {
    Eigen::LLT<Mat> llt(A);
    if (llt.info() == Eigen::Success) {
        const Vec s = llt.solve(v);
        if (s.allFinite()) return v.dot(s);
    }
    Mat Ar = A;
    Ar.diagonal().array() += 1e-10 * std::max(A.trace(), 1e-300) / static_cast<double>(A.rows());
    return v.dot(Eigen::LDLT<Mat>(Ar).solve(v));
}

int argmax_first(const Vec& v) {
    int best = 0;
    for (int k = 1; k < v.size(); ++k)
        if (v[k] > v[best]) best = k;
    return best;
}

}  // namespace

double PredictiveMixture::density(double y) const {
    double f = 0.0;
    for (Eigen::Index k = 0; k < pi_hat.size(); ++k) {
        const double b = std::sqrt(b2_hat[k]);
        const double t = (y - Gamma_hat[k]) / b;
        f += pi_hat[k] * std::exp(-0.5 * t * t) / (b * std::sqrt(2.0 * M_PI));
    }
    return f;
}

double PredictiveMixture::cdf(double y) const {
    double F = 0.0;
    for (Eigen::Index k = 0; k < pi_hat.size(); ++k)
        F += pi_hat[k] * normal_cdf((y - Gamma_hat[k]) / std::sqrt(b2_hat[k]));
    return F;
}

double PredictionSet::total_length() const {
    double len = 0.0;
    for (const Interval& iv : intervals) len += iv.length();
    return len;
}

bool PredictionSet::contains(double y) const {
    return std::any_of(intervals.begin(), intervals.end(),
                       [y](const Interval& iv) { return iv.contains(y); });
}

PredictiveMixture predictive_mixture(const NewPoint& pt, const ModelParams& params,
                                     const DatasetSums& sums) {
    const int K = params.K();
    if (pt.x.size() != params.p() || pt.z.size() != params.q() || pt.w.size() != params.d())
        throw std::invalid_argument("new covariates do not match the model dimensions");
    if (static_cast<int>(sums.expert_gram.size()) != K)
        throw std::invalid_argument("dataset sums do not match the expert count");
    PredictiveMixture mix;
    mix.pi_hat = gate_probs(gating_input(pt.x, pt.z, params.gating), params.alpha);
    mix.Gamma_hat.resize(K);
    mix.b2_hat.resize(K);
    const double re_mean = pt.z.dot(params.kappa * pt.w);
    const double re_var = pt.z.dot(params.Sigma * pt.z);
    // Var(z^T kappa_hat w) with Cov(vec kappa^T) = Sigma (x) (sum w w^T)^{-1}.
    const double v_kappa = re_var * inverse_quadratic_form(sums.w_gram, pt.w);
    for (int k = 0; k < K; ++k) {
        mix.Gamma_hat[k] = pt.x.dot(params.beta.row(k)) + re_mean;
        const double v_beta = inverse_quadratic_form(sums.expert_gram[k], pt.x);
        mix.b2_hat[k] = re_var + params.sigma2[k] + v_beta + v_kappa;
    }
    return mix;
}

PredictiveMixture predictive_mixture(const NewPoint& pt, const FittedModel& fitted) {
    return predictive_mixture(pt, fitted.params, fitted.sums);
}

double point_predict(const NewPoint& pt, const ModelParams& params) {
    return point_predict_given_mode(pt, params, params.kappa * pt.w);
}

double point_predict(const NewPoint& pt, const FittedModel& fitted) {
    return point_predict(pt, fitted.params);
}

double point_predict_given_mode(const NewPoint& pt, const ModelParams& params, const Vec& u_hat) {
    const Vec pi = gate_probs(gating_input(pt.x, pt.z, params.gating), params.alpha);
    const int k = argmax_first(pi);
    return pt.x.dot(params.beta.row(k)) + pt.z.dot(u_hat);
}

PredictionSet prediction_set(const PredictiveMixture& mix, double q, int cells) {
    if (!(q > 0.0 && q < 1.0)) throw std::invalid_argument("q must lie in (0, 1)");
    if (cells < 10) throw std::invalid_argument("grid needs at least 10 cells");
    const int K = static_cast<int>(mix.pi_hat.size());
    const Vec b = mix.b2_hat.cwiseSqrt();
    // Widened by a relative 1e-8 so that Q holds at least 1 - q after roundoff.
    const double c = normal_quantile(1.0 - q / 2.0) * (1.0 + 1e-8);
    double lo = std::numeric_limits<double>::infinity();
    double hi = -lo;
    for (int k = 0; k < K; ++k) {
        lo = std::min(lo, mix.Gamma_hat[k] - c * b[k]);
        hi = std::max(hi, mix.Gamma_hat[k] + c * b[k]);
    }
    const double delta = (hi - lo) / cells;
    auto edge = [&](int r) { return r == cells ? hi : lo + r * delta; };

    std::vector<double> mass(cells), height(cells);
    for (int r = 0; r < cells; ++r) {
        const double a = edge(r), e = edge(r + 1);
        double m = 0.0;
        for (int k = 0; k < K; ++k)
            m += mix.pi_hat[k] * normal_mass((a - mix.Gamma_hat[k]) / b[k],
                                             (e - mix.Gamma_hat[k]) / b[k]);
        mass[r] = m;
        height[r] = mix.density(0.5 * (a + e));
    }
    std::vector<int> order(cells);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b2) { return height[a] > height[b2]; });

    PredictionSet out;
    out.q = q;
    out.cells = cells;
    out.cell_width = delta;
    out.bounds = {lo, hi};
    double acc = 0.0;
    for (int r : order) {
        out.selected_cells.push_back(r);
        acc += mass[r];
        if (acc >= 1.0 - q) break;
    }
    out.achieved_mass = acc;

    std::vector<int> chosen = out.selected_cells;
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t i = 0; i < chosen.size();) {
        std::size_t j = i;
        while (j + 1 < chosen.size() && chosen[j + 1] == chosen[j] + 1) ++j;
        out.intervals.push_back({edge(chosen[i]), edge(chosen[j] + 1)});
        i = j + 1;
    }
    return out;
}

PredictionSet prediction_set(const NewPoint& pt, const FittedModel& fitted, double q, int cells) {
    return prediction_set(predictive_mixture(pt, fitted), q, cells);
}

CoverageResult coverage_eval(const std::vector<TestPoint>& test, const FittedModel& fitted,
                             double q, int cells, int threads) {
    if (test.empty()) throw std::invalid_argument("coverage_eval: empty test set");
    std::vector<double> hit(test.size()), len(test.size());
    parallel_for(
        test.size(),
        [&](std::size_t i) {
            const PredictionSet set = prediction_set(test[i].pt, fitted, q, cells);
            hit[i] = set.contains(test[i].y) ? 1.0 : 0.0;
            len[i] = set.total_length();
        },
        threads);
    CoverageResult res;
    res.n = test.size();
    res.coverage = std::accumulate(hit.begin(), hit.end(), 0.0) / static_cast<double>(res.n);
    res.mean_length = std::accumulate(len.begin(), len.end(), 0.0) / static_cast<double>(res.n);
    return res;
}

}  // namespace memoe
