#pragma once

// Per-subject inner problem: h_i(u) = log N_q(u; kappa w_i, Sigma) + sum_j log f(y_ij | u),
// its derivatives, the damped Newton mode search and the Laplace log-likelihood.

#include "memoe/core_model.hpp"

#include <optional>
#include <stdexcept>
#include <vector>

namespace memoe {

/// Largest expert count the per-observation kernels support.
inline constexpr int kMaxExperts = 64;

struct DecompositionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModeConfig {
    double tol = 1e-8;      // on the infinity norm of the gradient
    int max_iters = 100;
    int max_halvings = 30;
};

struct SubjectPosterior {
    Vec u_hat;
    Mat H;       // fisher-form negative Hessian at the mode
    Mat H_inv;
    double log_det_H = 0.0;
    double h_at_mode = 0.0;
    int newton_iters = 0;
    double grad_norm = 0.0;
    bool converged = false;
    bool floored = false;  // eigenvalue floor was needed to factor H
};

/// Cholesky factor of Sigma with its inverse and log-determinant.
struct PriorFactor {
    Mat Sigma_inv;
    double log_det_Sigma = 0.0;
};

/// Throws DecompositionError when Sigma is not positive definite.
PriorFactor factor_prior(const Mat& Sigma);

/// h_i and its derivatives for one subject at fixed parameters. Gate
/// log-probabilities and fixed-effect means are cached on construction.
class SubjectProblem {
public:
    SubjectProblem(const Subject& subject, const ModelParams& params, const PriorFactor& prior);

    int q() const { return q_; }
    const Vec& prior_mean() const { return prior_mean_; }

    double value(const Vec& u) const;
    Vec grad(const Vec& u) const;
    Mat hess_exact(const Vec& u) const;
    Mat hess_fisher(const Vec& u) const;
    /// One pass computing h, its gradient and the fisher-form Hessian.
    double value_grad_fisher(const Vec& u, Vec& grad, Mat& fisher) const;
    /// Conditional responsibilities at u, n_i x K.
    Mat responsibilities(const Vec& u) const;

    SubjectPosterior find_mode(const ModeConfig& cfg, const std::optional<Vec>& start) const;
    /// Posterior quantities evaluated at a fixed u without searching.
    SubjectPosterior posterior_at(const Vec& u) const;

private:
    double obs_terms(std::size_t j, double zu, double* gamma, double* resid) const;

    const Subject& subject_;
    const ModelParams& params_;
    const PriorFactor& prior_;
    int K_;
    int q_;
    Vec prior_mean_;
    Mat log_pi_;      // n x K
    Mat fixed_mean_;  // n x K
    Vec inv_s2_;
    Vec log_norm_;
};

double h_value(const Subject& subject, const Vec& u, const ModelParams& params);
Vec h_grad(const Subject& subject, const Vec& u, const ModelParams& params);
Mat h_hess_exact(const Subject& subject, const Vec& u, const ModelParams& params);
Mat h_hess_fisher(const Subject& subject, const Vec& u, const ModelParams& params);

SubjectPosterior find_mode(const Subject& subject, const ModelParams& params,
                           const ModeConfig& cfg = {},
                           const std::optional<Vec>& start = std::nullopt);

struct LaplaceResult {
    double loglik = 0.0;
    std::vector<double> per_subject;
    std::vector<SubjectPosterior> posteriors;
    int unconverged = 0;
    int floored = 0;
};

/// Laplace-approximated log-likelihood sum_i [h_i(u_i) + q/2 log 2pi - 1/2 log|H_i|].
/// Modes are warm-started from `warm` when given.
LaplaceResult laplace_loglik(const Dataset& data, const ModelParams& params,
                             const ModeConfig& cfg = {},
                             const std::vector<SubjectPosterior>* warm = nullptr,
                             int threads = 1);

/// Per-subject Laplace term from a computed posterior.
double laplace_term(const SubjectPosterior& post);

/// Fixed-order pairwise summation; result is independent of worker count.
double pairwise_sum(std::span<const double> v);

}  // namespace memoe
