#include "memoe/core_model.hpp"

#include <boost/math/distributions/normal.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace memoe {

std::string to_string(GatingFeatures g) {
    return g == GatingFeatures::x ? "x" : "xz";
}

GatingFeatures parse_gating_features(const std::string& s) {
    if (s == "x") return GatingFeatures::x;
    if (s == "xz" || s == "x_and_z") return GatingFeatures::x_and_z;
    throw std::invalid_argument("unknown gating feature policy '" + s + "'");
}

namespace {

bool all_finite(const Vec& v) { return v.allFinite(); }

}  // namespace

Dataset::Dataset(std::vector<Subject> subjects, GatingFeatures gating)
    : subjects_(std::move(subjects)), gating_(gating) {
    if (subjects_.empty()) throw std::invalid_argument("dataset has no subjects");
    const Subject& first = subjects_.front();
    if (first.obs.empty())
        throw std::invalid_argument("subject '" + first.id + "' has no observations");
    dims_ = Dims{static_cast<int>(first.obs.front().x.size()),
                 static_cast<int>(first.obs.front().z.size()),
                 static_cast<int>(first.w.size())};
    if (dims_.p < 1 || dims_.q < 1 || dims_.d < 1)
        throw std::invalid_argument("dataset dimensions p, q, d must all be >= 1");
    for (const Subject& s : subjects_) {
        if (s.obs.empty())
            throw std::invalid_argument("subject '" + s.id + "' has no observations");
        if (s.w.size() != dims_.d || !all_finite(s.w))
            throw std::invalid_argument("subject '" + s.id + "' has a malformed w vector");
        for (const Observation& o : s.obs) {
            if (o.x.size() != dims_.p || o.z.size() != dims_.q)
                throw std::invalid_argument("subject '" + s.id +
                                            "' has an observation with inconsistent dimensions");
            if (!std::isfinite(o.y) || !all_finite(o.x) || !all_finite(o.z))
                throw std::invalid_argument("subject '" + s.id + "' has a non-finite value");
        }
        total_obs_ += s.obs.size();
    }
}

int Dataset::gating_dim() const { return memoe::gating_dim(dims_, gating_); }

Dataset Dataset::select(std::span<const std::size_t> idx) const {
    std::vector<Subject> out;
    out.reserve(idx.size());
    for (std::size_t i : idx) out.push_back(subjects_.at(i));
    return Dataset(std::move(out), gating_);
}

Vec gating_input(const Vec& x, const Vec& z, GatingFeatures policy) {
    if (policy == GatingFeatures::x) return x;
    Vec v(x.size() + z.size());
    v << x, z;
    return v;
}

int gating_dim(Dims dims, GatingFeatures policy) {
    return policy == GatingFeatures::x ? dims.p : dims.p + dims.q;
}

void ModelParams::validate() const {
    const int k = K();
    if (k < 1) throw std::invalid_argument("model needs at least one expert");
    if (alpha.rows() != k || sigma2.size() != k)
        throw std::invalid_argument("alpha, beta and sigma2 disagree on the expert count");
    if (Sigma.rows() != Sigma.cols() || kappa.rows() != Sigma.rows())
        throw std::invalid_argument("kappa and Sigma dimensions disagree");
    if (!alpha.allFinite() || !beta.allFinite() || !sigma2.allFinite() ||
        !kappa.allFinite() || !Sigma.allFinite())
        throw std::invalid_argument("model parameters contain non-finite values");
    if ((sigma2.array() <= 0.0).any())
        throw std::invalid_argument("expert noise variances must be positive");
    if (alpha.row(k - 1).cwiseAbs().maxCoeff() != 0.0)
        throw std::invalid_argument("reference gating row must be identically zero");
    const double scale = std::max(1.0, Sigma.cwiseAbs().maxCoeff());
    if ((Sigma - Sigma.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale)
        throw std::invalid_argument("Sigma is not symmetric");
    Eigen::SelfAdjointEigenSolver<Mat> es(Sigma, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success || es.eigenvalues().minCoeff() <= 0.0)
        throw std::invalid_argument("Sigma is not positive definite");
}

void ModelParams::validate_against(Dims dims) const {
    validate();
    if (p() != dims.p || q() != dims.q || d() != dims.d ||
        g() != gating_dim(dims, gating))
        throw std::invalid_argument("model dimensions do not match the data");
}

double gaussian_logpdf(double y, double mean, double var) {
    if (!(var > 0.0)) throw std::domain_error("gaussian_logpdf: variance must be positive");
    const double r = y - mean;
    return -0.5 * (kLog2Pi + std::log(var)) - 0.5 * r * r / var;
}

double log_sum_exp(std::span<const double> a) {
    if (a.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(a.begin(), a.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : a) s += std::exp(v - m);
    return m + std::log(s);
}

Vec gate_log_probs(const Vec& v, const Mat& alpha) {
    Vec eta = alpha * v;
    const double m = eta.maxCoeff();
    const double lse = m + std::log((eta.array() - m).exp().sum());
    return eta.array() - lse;
}

Vec gate_probs(const Vec& v, const Mat& alpha) {
    Vec eta = alpha * v;
    eta.array() = (eta.array() - eta.maxCoeff()).exp();
    return eta / eta.sum();
}

double conditional_mixture_logpdf(const Observation& obs, const Vec& u,
                                  const ModelParams& params) {
    const Vec log_pi = gate_log_probs(gating_input(obs.x, obs.z, params.gating), params.alpha);
    const double zu = obs.z.dot(u);
    std::vector<double> terms(params.K());
    for (int k = 0; k < params.K(); ++k)
        terms[k] = log_pi[k] +
                   gaussian_logpdf(obs.y, obs.x.dot(params.beta.row(k)) + zu, params.sigma2[k]);
    return log_sum_exp(terms);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::domain_error("normal_quantile: p must be in (0,1)");
    return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

}  // namespace memoe
