#include "memoe/inference.hpp"

#include "memoe/parallel.hpp"

#include <cmath>

namespace memoe {

namespace {

constexpr double kAsymmetryFail = 1e-2;
constexpr double kRelStep = 1e-5;

Vec score_with_problem(const Subject& subject, const SubjectProblem& problem, const Vec& u,
                       const ModelParams& params, int k) {
    const Mat gamma = problem.responsibilities(u);
    Vec s = Vec::Zero(params.p());
    for (std::size_t j = 0; j < subject.obs.size(); ++j) {
        const Observation& o = subject.obs[j];
        const double e = o.y - o.x.dot(params.beta.row(k)) - o.z.dot(u);
        s.noalias() += (gamma(j, k) * e / params.sigma2[k]) * o.x;
    }
    return s;
}

// Score at a possibly perturbed parameter set, re-solving the mode.
Vec resolved_score(const Subject& subject, const ModelParams& params, const PriorFactor& prior,
                   const Vec& warm, Restriction restriction, int k) {
    SubjectProblem problem(subject, params, prior);
    Vec u;
    if (restriction == Restriction::moe) {
        u = Vec::Zero(params.q());
    } else {
        ModeConfig cfg;
        cfg.tol = 1e-11;
        cfg.max_iters = 200;
        u = problem.find_mode(cfg, warm).u_hat;
    }
    return score_with_problem(subject, problem, u, params, k);
}

}  // namespace

Vec score_beta(const Subject& subject, const SubjectPosterior& posterior,
               const ModelParams& params, int k) {
    const PriorFactor prior = factor_prior(params.Sigma);
    const SubjectProblem problem(subject, params, prior);
    return score_with_problem(subject, problem, posterior.u_hat, params, k);
}

SandwichReport sandwich(const FittedModel& fitted, const Dataset& data, int threads) {
    const ModelParams& params = fitted.params;
    const int K = params.K();
    const int p = params.p();
    const std::size_t N = data.n_subjects();
    if (fitted.posteriors.size() != N)
        throw std::invalid_argument("fitted model does not belong to this dataset");
    const PriorFactor prior = factor_prior(params.Sigma);

    SandwichReport report;
    report.n_subjects = static_cast<int>(N);
    for (int k = 0; k < K; ++k) {
        ExpertSandwich ex;
        std::vector<Vec> scores(N);
        parallel_for(
            N,
            [&](std::size_t i) {
                scores[i] = resolved_score(data.subject(i), params, prior,
                                           fitted.posteriors[i].u_hat, fitted.restriction, k);
            },
            threads);
        ex.K_hat = Mat::Zero(p, p);
        for (const Vec& s : scores) ex.K_hat.noalias() += s * s.transpose();
        ex.K_hat /= static_cast<double>(N);

        ex.J_hat = Mat::Zero(p, p);
        for (int c = 0; c < p; ++c) {
            const double h = kRelStep * (1.0 + std::abs(params.beta(k, c)));
            ModelParams plus = params, minus = params;
            plus.beta(k, c) += h;
            minus.beta(k, c) -= h;
            std::vector<Vec> col(N);
            parallel_for(
                N,
                [&](std::size_t i) {
                    const Vec& warm = fitted.posteriors[i].u_hat;
                    const Vec sp = resolved_score(data.subject(i), plus, prior, warm,
                                                  fitted.restriction, k);
                    const Vec sm = resolved_score(data.subject(i), minus, prior, warm,
                                                  fitted.restriction, k);
                    col[i] = (sp - sm) / (2.0 * h);
                },
                threads);
            Vec acc = Vec::Zero(p);
            for (const Vec& v : col) acc += v;
            ex.J_hat.col(c) = -acc / static_cast<double>(N);
        }
        const double scale = std::max(ex.J_hat.cwiseAbs().maxCoeff(), 1e-300);
        ex.j_asymmetry = (ex.J_hat - ex.J_hat.transpose()).cwiseAbs().maxCoeff() / scale;
        if (ex.j_asymmetry > kAsymmetryFail)
            throw SandwichError("finite-difference J for expert " + std::to_string(k) +
                                " is asymmetric (relative " + std::to_string(ex.j_asymmetry) + ")");
        ex.J_hat = 0.5 * (ex.J_hat + ex.J_hat.transpose()).eval();

        Mat J_inv;
        Eigen::LLT<Mat> llt(ex.J_hat);
        if (llt.info() == Eigen::Success) {
            J_inv = llt.solve(Mat::Identity(p, p));
        } else {
            J_inv = Eigen::CompleteOrthogonalDecomposition<Mat>(ex.J_hat).pseudoInverse();
            ex.pseudo_inverse = true;
        }
        ex.V_hat = J_inv * ex.K_hat * J_inv;
        ex.V_hat = 0.5 * (ex.V_hat + ex.V_hat.transpose()).eval();
        ex.se = (ex.V_hat.diagonal().cwiseMax(0.0) / static_cast<double>(N)).cwiseSqrt();
        for (int c = 0; c < p; ++c)
            ex.wald_95.emplace_back(params.beta(k, c) - 1.96 * ex.se[c],
                                    params.beta(k, c) + 1.96 * ex.se[c]);
        report.experts.push_back(std::move(ex));
    }
    return report;
}

}  // namespace memoe
