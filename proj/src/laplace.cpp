#include "memoe/laplace.hpp"

#include "memoe/parallel.hpp"

#include <array>
#include <cmath>
#include <limits>

namespace memoe {

namespace {

constexpr double kEigenFloor = 1e-10;

struct SpdFactor {
    Mat inverse;
    double log_det = 0.0;
    bool floored = false;
};

SpdFactor factor_spd(const Mat& A) {
    SpdFactor out;
    Eigen::LLT<Mat> llt(A);
    if (llt.info() == Eigen::Success) {
        const auto& L = llt.matrixLLT();
        for (Eigen::Index i = 0; i < L.rows(); ++i) out.log_det += 2.0 * std::log(L(i, i));
        out.inverse = llt.solve(Mat::Identity(A.rows(), A.cols()));
        if (std::isfinite(out.log_det) && out.inverse.allFinite()) return out;
    }
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (A + A.transpose()));
    if (es.info() != Eigen::Success) throw DecompositionError("eigen-decomposition failed");
    Vec ev = es.eigenvalues().cwiseMax(kEigenFloor);
    out.log_det = ev.array().log().sum();
    out.inverse = es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
    out.floored = true;
    return out;
}

}  // namespace

PriorFactor factor_prior(const Mat& Sigma) {
    Eigen::LLT<Mat> llt(Sigma);
    if (llt.info() != Eigen::Success) throw DecompositionError("Sigma is not positive definite");
    PriorFactor out;
    const auto& L = llt.matrixLLT();
    for (Eigen::Index i = 0; i < L.rows(); ++i) out.log_det_Sigma += 2.0 * std::log(L(i, i));
    out.Sigma_inv = llt.solve(Mat::Identity(Sigma.rows(), Sigma.cols()));
    out.Sigma_inv = 0.5 * (out.Sigma_inv + out.Sigma_inv.transpose()).eval();
    if (!std::isfinite(out.log_det_Sigma) || !out.Sigma_inv.allFinite())
        throw DecompositionError("Sigma is numerically singular");
    return out;
}

SubjectProblem::SubjectProblem(const Subject& subject, const ModelParams& params,
                               const PriorFactor& prior)
    : subject_(subject), params_(params), prior_(prior), K_(params.K()), q_(params.q()) {
    if (K_ > kMaxExperts) throw std::invalid_argument("too many experts");
    prior_mean_ = params.kappa * subject.w;
    const std::size_t n = subject.obs.size();
    log_pi_.resize(n, K_);
    fixed_mean_.resize(n, K_);
    for (std::size_t j = 0; j < n; ++j) {
        const Observation& o = subject.obs[j];
        log_pi_.row(j) = gate_log_probs(gating_input(o.x, o.z, params.gating), params.alpha);
        fixed_mean_.row(j) = (params.beta * o.x).transpose();
    }
    inv_s2_ = params.sigma2.cwiseInverse();
    log_norm_ = -0.5 * (kLog2Pi + params.sigma2.array().log());
}

// log f(y_j | u); fills conditional responsibilities and residuals.
double SubjectProblem::obs_terms(std::size_t j, double zu, double* gamma, double* resid) const {
    const double y = subject_.obs[j].y;
    double m = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K_; ++k) {
        const double e = y - fixed_mean_(j, k) - zu;
        resid[k] = e;
        gamma[k] = log_pi_(j, k) + log_norm_[k] - 0.5 * e * e * inv_s2_[k];
        m = std::max(m, gamma[k]);
    }
    double s = 0.0;
    for (int k = 0; k < K_; ++k) {
        gamma[k] = std::exp(gamma[k] - m);
        s += gamma[k];
    }
    for (int k = 0; k < K_; ++k) gamma[k] /= s;
    return m + std::log(s);
}

double SubjectProblem::value(const Vec& u) const {
    const Vec dev = u - prior_mean_;
    double h = -0.5 * (q_ * kLog2Pi + prior_.log_det_Sigma + dev.dot(prior_.Sigma_inv * dev));
    std::array<double, kMaxExperts> gamma{}, resid{};
    for (std::size_t j = 0; j < subject_.obs.size(); ++j)
        h += obs_terms(j, subject_.obs[j].z.dot(u), gamma.data(), resid.data());
    return h;
}

double SubjectProblem::value_grad_fisher(const Vec& u, Vec& grad, Mat& fisher) const {
    const Vec dev = u - prior_mean_;
    grad.noalias() = -(prior_.Sigma_inv * dev);
    fisher = prior_.Sigma_inv;
    double h = -0.5 * (q_ * kLog2Pi + prior_.log_det_Sigma - dev.dot(grad));
    std::array<double, kMaxExperts> gamma{}, resid{};
    for (std::size_t j = 0; j < subject_.obs.size(); ++j) {
        const Vec& z = subject_.obs[j].z;
        h += obs_terms(j, z.dot(u), gamma.data(), resid.data());
        double score = 0.0, curv = 0.0;
        for (int k = 0; k < K_; ++k) {
            score += gamma[k] * resid[k] * inv_s2_[k];
            curv += gamma[k] * inv_s2_[k];
        }
        grad.noalias() += score * z;
        fisher.selfadjointView<Eigen::Lower>().rankUpdate(z, curv);
    }
    fisher.triangularView<Eigen::StrictlyUpper>() = fisher.transpose();
    return h;
}

Vec SubjectProblem::grad(const Vec& u) const {
    Vec g(q_);
    Mat f(q_, q_);
    value_grad_fisher(u, g, f);
    return g;
}

Mat SubjectProblem::hess_fisher(const Vec& u) const {
    Vec g(q_);
    Mat f(q_, q_);
    value_grad_fisher(u, g, f);
    return f;
}

Mat SubjectProblem::hess_exact(const Vec& u) const {
    Mat H = prior_.Sigma_inv;
    std::array<double, kMaxExperts> gamma{}, resid{};
    for (std::size_t j = 0; j < subject_.obs.size(); ++j) {
        const Vec& z = subject_.obs[j].z;
        obs_terms(j, z.dot(u), gamma.data(), resid.data());
        double curv = 0.0, score = 0.0;
        for (int k = 0; k < K_; ++k) {
            const double e_s2 = resid[k] * inv_s2_[k];
            curv += gamma[k] * (e_s2 * e_s2 - inv_s2_[k]);
            score += gamma[k] * e_s2;
        }
        H.noalias() += (score * score - curv) * (z * z.transpose());
    }
    return 0.5 * (H + H.transpose());
}

Mat SubjectProblem::responsibilities(const Vec& u) const {
    const std::size_t n = subject_.obs.size();
    Mat out(n, K_);
    std::array<double, kMaxExperts> gamma{}, resid{};
    for (std::size_t j = 0; j < n; ++j) {
        obs_terms(j, subject_.obs[j].z.dot(u), gamma.data(), resid.data());
        for (int k = 0; k < K_; ++k) out(j, k) = gamma[k];
    }
    return out;
}

SubjectPosterior SubjectProblem::posterior_at(const Vec& u) const {
    SubjectPosterior post;
    Vec g(q_);
    Mat f(q_, q_);
    post.u_hat = u;
    post.h_at_mode = value_grad_fisher(u, g, f);
    post.grad_norm = g.lpNorm<Eigen::Infinity>();
    SpdFactor fac = factor_spd(f);
    post.H = std::move(f);
    post.H_inv = std::move(fac.inverse);
    post.log_det_H = fac.log_det;
    post.floored = fac.floored;
    return post;
}

SubjectPosterior SubjectProblem::find_mode(const ModeConfig& cfg,
                                           const std::optional<Vec>& start) const {
    Vec u = start ? *start : prior_mean_;
    if (u.size() != q_) u = prior_mean_;
    Vec g(q_), step(q_), trial(q_);
    Mat f(q_, q_);
    double h = value_grad_fisher(u, g, f);
    int it = 0;
    bool converged = false;
    for (; it < cfg.max_iters; ++it) {
        if (g.lpNorm<Eigen::Infinity>() < cfg.tol) {
            converged = true;
            break;
        }
        Eigen::LLT<Mat> llt(f);
        step = llt.info() == Eigen::Success ? Vec(llt.solve(g)) : Vec(factor_spd(f).inverse * g);
        // Below this predicted ascent h cannot resolve progress; the gradient norm decides.
        const double resolvable = 1e-13 * (1.0 + std::abs(h));
        double t = 1.0;
        bool accepted = false;
        for (int halving = 0; halving <= cfg.max_halvings; ++halving, t *= 0.5) {
            trial = u + t * step;
            const double h_trial = value(trial);
            if (h_trial >= h) {
                accepted = true;
                u = trial;
                break;
            }
            if (t * g.dot(step) < resolvable) {
                Vec g_trial(q_);
                Mat f_trial(q_, q_);
                value_grad_fisher(trial, g_trial, f_trial);
                if (g_trial.lpNorm<Eigen::Infinity>() < g.lpNorm<Eigen::Infinity>()) {
                    accepted = true;
                    u = trial;
                    break;
                }
            }
        }
        if (!accepted) break;
        h = value_grad_fisher(u, g, f);
    }
    if (!converged) converged = g.lpNorm<Eigen::Infinity>() < cfg.tol;
    SubjectPosterior post = posterior_at(u);
    post.newton_iters = it;
    post.converged = converged;
    return post;
}

double h_value(const Subject& subject, const Vec& u, const ModelParams& params) {
    const PriorFactor prior = factor_prior(params.Sigma);
    return SubjectProblem(subject, params, prior).value(u);
}

Vec h_grad(const Subject& subject, const Vec& u, const ModelParams& params) {
    const PriorFactor prior = factor_prior(params.Sigma);
    return SubjectProblem(subject, params, prior).grad(u);
}

Mat h_hess_exact(const Subject& subject, const Vec& u, const ModelParams& params) {
    const PriorFactor prior = factor_prior(params.Sigma);
    return SubjectProblem(subject, params, prior).hess_exact(u);
}

Mat h_hess_fisher(const Subject& subject, const Vec& u, const ModelParams& params) {
    const PriorFactor prior = factor_prior(params.Sigma);
    return SubjectProblem(subject, params, prior).hess_fisher(u);
}

SubjectPosterior find_mode(const Subject& subject, const ModelParams& params,
                           const ModeConfig& cfg, const std::optional<Vec>& start) {
    const PriorFactor prior = factor_prior(params.Sigma);
    return SubjectProblem(subject, params, prior).find_mode(cfg, start);
}

double laplace_term(const SubjectPosterior& post) {
    const double q = static_cast<double>(post.u_hat.size());
    return post.h_at_mode + 0.5 * q * kLog2Pi - 0.5 * post.log_det_H;
}

double pairwise_sum(std::span<const double> v) {
    if (v.size() <= 8) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    }
    const std::size_t half = v.size() / 2;
    return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

LaplaceResult laplace_loglik(const Dataset& data, const ModelParams& params,
                             const ModeConfig& cfg, const std::vector<SubjectPosterior>* warm,
                             int threads) {
    const PriorFactor prior = factor_prior(params.Sigma);
    const std::size_t N = data.n_subjects();
    LaplaceResult out;
    out.posteriors.resize(N);
    out.per_subject.resize(N);
    parallel_for(
        N,
        [&](std::size_t i) {
            SubjectProblem problem(data.subject(i), params, prior);
            std::optional<Vec> start;
            if (warm && warm->size() == N) start = (*warm)[i].u_hat;
            out.posteriors[i] = problem.find_mode(cfg, start);
            out.per_subject[i] = laplace_term(out.posteriors[i]);
        },
        threads);
    for (const auto& p : out.posteriors) {
        out.unconverged += p.converged ? 0 : 1;
        out.floored += p.floored ? 1 : 0;
    }
    out.loglik = pairwise_sum(out.per_subject);
    return out;
}

}  // namespace memoe
