#pragma once

// Robust sandwich variance J^{-1} K J^{-1} for the expert coefficients.

#include "memoe/em_fit.hpp"

#include <utility>
#include <vector>

namespace memoe {

struct ExpertSandwich {
    Mat J_hat;
    Mat K_hat;
    Mat V_hat;
    Vec se;
    std::vector<std::pair<double, double>> wald_95;
    double j_asymmetry = 0.0;  // relative, before symmetrization
    bool pseudo_inverse = false;
};

struct SandwichReport {
    std::vector<ExpertSandwich> experts;
    int n_subjects = 0;
};

struct SandwichError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Per-subject score of the Laplace log-likelihood in beta_k at the mode:
/// sum_j gamma_jk (y_j - x_j.beta_k - z_j.u) / sigma_k^2 x_j.
Vec score_beta(const Subject& subject, const SubjectPosterior& posterior,
               const ModelParams& params, int k);

/// K from outer products of per-subject scores; J from central differences
/// of the scores, re-solving every subject's mode at each perturbed beta.
SandwichReport sandwich(const FittedModel& fitted, const Dataset& data, int threads = 1);

}  // namespace memoe
