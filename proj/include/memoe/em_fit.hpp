#pragma once

// Laplace-EM fitting: E-step modes and responsibilities, the block M-step,
// the surrogate objective, multi-start driver and cross-validated choice of K.

#include "memoe/core_model.hpp"
#include "memoe/laplace.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace memoe {

/// Restricted variants of the model, used as comparison baselines.
enum class Restriction {
    none,   // full model
    remoe,  // kappa fixed at zero
    moe,    // no random effects: u == 0, kappa == 0, Sigma at its eigenvalue floor
};

std::string to_string(Restriction r);

struct FitConfig {
    int K = 2;
    int max_em_iters = 500;
    double em_rel_tol = 1e-6;
    int n_starts = 5;
    std::uint64_t seed = 1;
    double sigma2_floor = 1e-6;
    double sigma_eig_floor = 1e-8;
    double mode_tol = 1e-8;
    int mode_max_iters = 100;
    int gating_newton_iters = 50;
    Restriction restriction = Restriction::none;
    int threads = 1;

    ModeConfig mode() const { return {mode_tol, mode_max_iters, 30}; }
    /// Throws std::invalid_argument when a field is out of range.
    void validate() const;
};

/// gamma[i] is n_i x K; each row sums to one.
using Responsibilities = std::vector<Mat>;

/// Training-set sums frozen at fit time so prediction needs no data.
struct DatasetSums {
    std::vector<Mat> expert_gram;  // per expert: sum gamma x x^T / sigma_k^2
    Mat w_gram;                    // sum w w^T
};

struct FitDiagnostics {
    double max_rel_dip = 0.0;  // largest relative drop of the log-likelihood trace
    int dip_warnings = 0;      // drops beyond 1e-8 relative
    int unconverged_modes = 0;
    int floored_modes = 0;
    int ridge_warnings = 0;
    int gating_clamps = 0;
    std::vector<int> degenerate_experts;
};

struct FittedModel {
    ModelParams params;
    std::vector<SubjectPosterior> posteriors;
    Responsibilities gamma;
    std::vector<double> loglik_trace;
    bool converged = false;
    int em_iters = 0;
    int best_of = 0;                  // number of starts attempted
    int best_start = 0;
    std::vector<double> start_logliks;  // NaN for failed starts
    DatasetSums sums;
    FitDiagnostics diag;
    std::vector<std::string> subject_ids;
    Restriction restriction = Restriction::none;

    double loglik() const { return loglik_trace.empty() ? 0.0 : loglik_trace.back(); }
};

struct FitError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Counters shared by the M-step blocks.
struct MStepWarnings {
    int ridge = 0;
    int clamp = 0;
    std::vector<int> degenerate;
};

struct EStepResult {
    std::vector<SubjectPosterior> posteriors;
    Responsibilities gamma;
    double loglik = 0.0;
    int unconverged = 0;
    int floored = 0;
};

EStepResult e_step(const Dataset& data, const ModelParams& params, const FitConfig& cfg,
                   const std::vector<SubjectPosterior>* prev = nullptr);

/// Quantities from iteration t that the surrogate is built around.
struct SurrogateState {
    std::vector<SubjectPosterior> posteriors;
    Responsibilities gamma;
};

/// Q_LA(params | state) including the -1/2 sum tr(H_t^{-1} H_i(params)) term.
double q_surrogate(const Dataset& data, const ModelParams& params, const SurrogateState& state);

/// Gate inputs for every observation, flattened in subject-major order.
Mat stacked_gating_inputs(const Dataset& data, GatingFeatures policy);
/// Responsibilities stacked to match stacked_gating_inputs.
Mat stacked_gamma(const Responsibilities& gamma);

/// Weighted soft-target multinomial logistic objective sum gamma log pi.
double gating_objective(const Mat& inputs, const Mat& gamma, const Mat& alpha);

Mat m_step_alpha(const Mat& inputs, const Mat& gamma, const Mat& alpha_init,
                 const FitConfig& cfg, MStepWarnings* warn = nullptr,
                 std::vector<double>* objective_trace = nullptr);

Mat m_step_beta(const Dataset& data, const Responsibilities& gamma,
                const std::vector<SubjectPosterior>& posteriors, const Vec& sigma2,
                const Mat& beta_prev, MStepWarnings* warn = nullptr);

Vec m_step_sigma2(const Dataset& data, const Responsibilities& gamma,
                  const std::vector<SubjectPosterior>& posteriors, const Mat& beta_new,
                  const Vec& sigma2_prev, const FitConfig& cfg, MStepWarnings* warn = nullptr);

Mat m_step_kappa(const Dataset& data, const std::vector<SubjectPosterior>& posteriors,
                 MStepWarnings* warn = nullptr);

Mat m_step_Sigma(const Dataset& data, const std::vector<SubjectPosterior>& posteriors,
                 const Mat& kappa_new, const FitConfig& cfg);

/// One full M-step in the order alpha, beta, sigma2, kappa, Sigma.
ModelParams m_step(const Dataset& data, const ModelParams& current, const SurrogateState& state,
                   const FitConfig& cfg, MStepWarnings* warn = nullptr);

DatasetSums compute_sums(const Dataset& data, const Responsibilities& gamma, const Vec& sigma2);

/// Random sharpened responsibilities used to seed one start.
Responsibilities random_responsibilities(const Dataset& data, int K, std::uint64_t seed);

/// Runs EM from initial responsibilities (one start).
FittedModel fit_from(const Dataset& data, const FitConfig& cfg, const Responsibilities& init);

/// Multi-start fit; returns the start with the largest final log-likelihood.
FittedModel fit(const Dataset& data, const FitConfig& cfg);

struct SelectKResult {
    int best_K = 0;
    std::vector<int> ks;
    Mat rmse;                         // ks.size() x folds, NaN for failed cells
    std::vector<double> mean_rmse;    // NaN when the K is disqualified
    std::vector<std::vector<int>> folds;  // subject indices per fold
};

SelectKResult select_k(const Dataset& data, const std::vector<int>& k_range, int folds,
                       const FitConfig& cfg, std::uint64_t seed);

}  // namespace memoe
