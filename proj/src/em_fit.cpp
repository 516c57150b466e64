#include "memoe/em_fit.hpp"

#include "memoe/parallel.hpp"
#include "memoe/predict.hpp"
#include "memoe/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace memoe {

std::string to_string(Restriction r) {
    switch (r) {
        case Restriction::none: return "memoe";
        case Restriction::remoe: return "remoe";
        case Restriction::moe: return "moe";
    }
    return "unknown";
}

void FitConfig::validate() const {
    if (K < 1) throw std::invalid_argument("K must be >= 1");
    if (max_em_iters < 1 || n_starts < 1 || mode_max_iters < 1 || gating_newton_iters < 1)
        throw std::invalid_argument("iteration limits must be >= 1");
    if (!(em_rel_tol > 0) || !(sigma2_floor > 0) || !(sigma_eig_floor > 0) || !(mode_tol > 0))
        throw std::invalid_argument("tolerances and floors must be positive");
}

namespace {

constexpr double kDyingMass = 1e-8;
constexpr double kAlphaClamp = 50.0;
constexpr double kGatingGradTol = 1e-8;
constexpr double kGatingDecrementTol = 1e-13;
constexpr double kDipWarn = 1e-8;
constexpr double kDipAbort = 1e-4;

void add_degenerate(MStepWarnings* warn, int k) {
    if (!warn) return;
    if (std::find(warn->degenerate.begin(), warn->degenerate.end(), k) == warn->degenerate.end())
        warn->degenerate.push_back(k);
}

// Solves the SPD system A X = B, adding a small ridge when A is rank deficient.
Mat solve_spd_ridged(const Mat& A, const Mat& B, MStepWarnings* warn) {
    Eigen::LLT<Mat> llt(A);
    bool ok = llt.info() == Eigen::Success;
    if (ok) {
        const Vec diag = llt.matrixLLT().diagonal();
        ok = diag.minCoeff() * diag.minCoeff() > 1e-14 * diag.maxCoeff() * diag.maxCoeff();
    }
    if (ok) return llt.solve(B);
    if (warn) ++warn->ridge;
    const double ridge = 1e-10 * std::max(A.trace(), 1e-300) / static_cast<double>(A.rows());
    Mat Ar = A;
    Ar.diagonal().array() += ridge;
    Eigen::LDLT<Mat> ldlt(Ar);
    return ldlt.solve(B);
}

Mat floor_eigenvalues(const Mat& S, double floor) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (S + S.transpose()));
    const Vec ev = es.eigenvalues().cwiseMax(floor);
    Mat out = es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
    return 0.5 * (out + out.transpose());
}

}  // namespace

EStepResult e_step(const Dataset& data, const ModelParams& params, const FitConfig& cfg,
                   const std::vector<SubjectPosterior>* prev) {
    const PriorFactor prior = factor_prior(params.Sigma);
    const std::size_t N = data.n_subjects();
    const ModeConfig mcfg = cfg.mode();
    EStepResult out;
    out.posteriors.resize(N);
    out.gamma.resize(N);
    std::vector<double> terms(N);
    parallel_for(
        N,
        [&](std::size_t i) {
            SubjectProblem problem(data.subject(i), params, prior);
            SubjectPosterior post;
            if (cfg.restriction == Restriction::moe) {
                post = problem.posterior_at(Vec::Zero(params.q()));
                post.converged = true;
            } else {
                std::optional<Vec> start;
                if (prev && prev->size() == N) start = (*prev)[i].u_hat;
                post = problem.find_mode(mcfg, start);
            }
            out.gamma[i] = problem.responsibilities(post.u_hat);
            terms[i] = laplace_term(post);
            out.posteriors[i] = std::move(post);
        },
        cfg.threads);
    for (const auto& p : out.posteriors) {
        out.unconverged += p.converged ? 0 : 1;
        out.floored += p.floored ? 1 : 0;
    }
    out.loglik = pairwise_sum(terms);
    return out;
}

double q_surrogate(const Dataset& data, const ModelParams& params, const SurrogateState& state) {
    const PriorFactor prior = factor_prior(params.Sigma);
    const int K = params.K();
    const Vec inv_s2 = params.sigma2.cwiseInverse();
    std::vector<double> terms(data.n_subjects());
    for (std::size_t i = 0; i < data.n_subjects(); ++i) {
        const Subject& s = data.subject(i);
        const SubjectPosterior& post = state.posteriors[i];
        const Mat& g = state.gamma[i];
        const Vec dev = post.u_hat - params.kappa * s.w;
        double t = -0.5 * (params.q() * kLog2Pi + prior.log_det_Sigma +
                           dev.dot(prior.Sigma_inv * dev));
        // H_i(params) with responsibilities frozen at iteration t.
        Mat H = prior.Sigma_inv;
        for (std::size_t j = 0; j < s.obs.size(); ++j) {
            const Observation& o = s.obs[j];
            const Vec log_pi = gate_log_probs(gating_input(o.x, o.z, params.gating), params.alpha);
            const double zu = o.z.dot(post.u_hat);
            double curv = 0.0;
            for (int k = 0; k < K; ++k) {
                const double gk = g(j, k);
                curv += gk * inv_s2[k];
                if (gk <= 0.0) continue;
                t += gk * (log_pi[k] +
                           gaussian_logpdf(o.y, o.x.dot(params.beta.row(k)) + zu, params.sigma2[k]) -
                           std::log(gk));
            }
            H.noalias() += curv * (o.z * o.z.transpose());
        }
        t -= 0.5 * (post.H_inv * H).trace();
        terms[i] = t;
    }
    return pairwise_sum(terms);
}

Mat stacked_gating_inputs(const Dataset& data, GatingFeatures policy) {
    Mat V(data.total_obs(), gating_dim(data.dims(), policy));
    Eigen::Index r = 0;
    for (const Subject& s : data.subjects())
        for (const Observation& o : s.obs) V.row(r++) = gating_input(o.x, o.z, policy).transpose();
    return V;
}

Mat stacked_gamma(const Responsibilities& gamma) {
    Eigen::Index rows = 0;
    for (const Mat& g : gamma) rows += g.rows();
    Mat out(rows, gamma.empty() ? 0 : gamma.front().cols());
    Eigen::Index r = 0;
    for (const Mat& g : gamma) {
        out.middleRows(r, g.rows()) = g;
        r += g.rows();
    }
    return out;
}

double gating_objective(const Mat& inputs, const Mat& gamma, const Mat& alpha) {
    const Mat eta = inputs * alpha.transpose();  // n x K
    double total = 0.0;
    for (Eigen::Index n = 0; n < eta.rows(); ++n) {
        const double m = eta.row(n).maxCoeff();
        const double lse = m + std::log((eta.row(n).array() - m).exp().sum());
        for (Eigen::Index k = 0; k < eta.cols(); ++k)
            if (gamma(n, k) > 0.0) total += gamma(n, k) * (eta(n, k) - lse);
    }
    return total;
}

Mat m_step_alpha(const Mat& inputs, const Mat& gamma, const Mat& alpha_init,
                 const FitConfig& cfg, MStepWarnings* warn,
                 std::vector<double>* objective_trace) {
    const int K = static_cast<int>(gamma.cols());
    const int g = static_cast<int>(inputs.cols());
    Mat alpha = alpha_init;
    alpha.row(K - 1).setZero();
    if (K == 1) return alpha;
    const int P = (K - 1) * g;
    double obj = gating_objective(inputs, gamma, alpha);
    if (objective_trace) objective_trace->push_back(obj);

    Vec grad(P);
    Mat info(P, P);
    Mat fallback;
    double fallback_grad = std::numeric_limits<double>::infinity();
    for (int it = 0; it < cfg.gating_newton_iters; ++it) {
        const Mat eta = inputs * alpha.transpose();
        grad.setZero();
        info.setZero();
        Vec pi(K);
        for (Eigen::Index n = 0; n < inputs.rows(); ++n) {
            pi = (eta.row(n).array() - eta.row(n).maxCoeff()).exp().transpose();
            pi /= pi.sum();
            const auto v = inputs.row(n).transpose();
            for (int k = 0; k < K - 1; ++k) {
                grad.segment(k * g, g).noalias() += (gamma(n, k) - pi[k]) * v;
                for (int l = 0; l <= k; ++l) {
                    const double wkl = pi[k] * ((k == l ? 1.0 : 0.0) - pi[l]);
                    info.block(k * g, l * g, g, g).noalias() += wkl * (v * v.transpose());
                }
            }
        }
        const double grad_norm = grad.lpNorm<Eigen::Infinity>();
        if (fallback.size() > 0) {
            // An unsearched step is kept only if it shrank the gradient.
            if (grad_norm >= fallback_grad) {
                alpha = fallback;
                obj = gating_objective(inputs, gamma, alpha);
                if (objective_trace) objective_trace->back() = obj;
                break;
            }
            fallback.resize(0, 0);
        }
        if (grad_norm < kGatingGradTol) break;
        info = info.selfadjointView<Eigen::Lower>();
        Vec step;
        Eigen::LLT<Mat> llt(info);
        if (llt.info() == Eigen::Success) {
            step = llt.solve(grad);
        } else {
            Mat ridged = info;
            ridged.diagonal().array() += 1e-8 * std::max(1.0, info.trace() / P);
            step = Eigen::LDLT<Mat>(ridged).solve(grad);
        }
        // Newton decrement below the resolution of the objective: the line
        // search cannot rank the step, so the full step is taken unsearched.
        if (grad.dot(step) < kGatingDecrementTol * (1.0 + std::abs(obj))) {
            fallback = alpha;
            fallback_grad = grad_norm;
            for (int k = 0; k < K - 1; ++k) alpha.row(k) += step.segment(k * g, g).transpose();
            obj = gating_objective(inputs, gamma, alpha);
            if (objective_trace) objective_trace->push_back(obj);
            continue;
        }
        double t = 1.0;
        bool accepted = false;
        Mat trial = alpha;
        for (int halving = 0; halving <= 30; ++halving, t *= 0.5) {
            for (int k = 0; k < K - 1; ++k)
                trial.row(k) = alpha.row(k) + t * step.segment(k * g, g).transpose();
            const double obj_trial = gating_objective(inputs, gamma, trial);
            if (obj_trial >= obj) {
                accepted = true;
                alpha = trial;
                obj = obj_trial;
                break;
            }
        }
        if (!accepted) break;
        if (alpha.cwiseAbs().maxCoeff() > kAlphaClamp) {
            alpha = alpha.cwiseMax(-kAlphaClamp).cwiseMin(kAlphaClamp);
            obj = gating_objective(inputs, gamma, alpha);
            if (warn) ++warn->clamp;
            if (objective_trace) objective_trace->push_back(obj);
            break;
        }
        if (objective_trace) objective_trace->push_back(obj);
    }
    return alpha;
}

Mat m_step_beta(const Dataset& data, const Responsibilities& gamma,
                const std::vector<SubjectPosterior>& posteriors, const Vec& sigma2,
                const Mat& beta_prev, MStepWarnings* warn) {
    const int K = static_cast<int>(sigma2.size());
    const int p = data.dims().p;
    Mat beta = beta_prev;
    for (int k = 0; k < K; ++k) {
        Mat G = Mat::Zero(p, p);
        Vec r = Vec::Zero(p);
        double mass = 0.0;
        for (std::size_t i = 0; i < data.n_subjects(); ++i) {
            const Subject& s = data.subject(i);
            for (std::size_t j = 0; j < s.obs.size(); ++j) {
                const double wgt = gamma[i](j, k) / sigma2[k];
                if (wgt == 0.0) continue;
                const Observation& o = s.obs[j];
                mass += gamma[i](j, k);
                G.selfadjointView<Eigen::Lower>().rankUpdate(o.x, wgt);
                r.noalias() += wgt * (o.y - o.z.dot(posteriors[i].u_hat)) * o.x;
            }
        }
        if (mass < kDyingMass) {
            add_degenerate(warn, k);
            continue;
        }
        G.triangularView<Eigen::StrictlyUpper>() = G.transpose();
        beta.row(k) = solve_spd_ridged(G, r, warn).transpose();
    }
    return beta;
}

Vec m_step_sigma2(const Dataset& data, const Responsibilities& gamma,
                  const std::vector<SubjectPosterior>& posteriors, const Mat& beta_new,
                  const Vec& sigma2_prev, const FitConfig& cfg, MStepWarnings* warn) {
    const int K = static_cast<int>(sigma2_prev.size());
    Vec num = Vec::Zero(K), den = Vec::Zero(K);
    for (std::size_t i = 0; i < data.n_subjects(); ++i) {
        const Subject& s = data.subject(i);
        const SubjectPosterior& post = posteriors[i];
        for (std::size_t j = 0; j < s.obs.size(); ++j) {
            const Observation& o = s.obs[j];
            const double zu = o.z.dot(post.u_hat);
            const double corr = o.z.dot(post.H_inv * o.z);
            for (int k = 0; k < K; ++k) {
                const double gk = gamma[i](j, k);
                if (gk == 0.0) continue;
                const double e = o.y - o.x.dot(beta_new.row(k)) - zu;
                num[k] += gk * (e * e + corr);
                den[k] += gk;
            }
        }
    }
    Vec out(K);
    for (int k = 0; k < K; ++k) {
        if (den[k] < kDyingMass) {
            add_degenerate(warn, k);
            out[k] = sigma2_prev[k];
        } else {
            out[k] = std::max(num[k] / den[k], cfg.sigma2_floor);
        }
    }
    return out;
}

Mat m_step_kappa(const Dataset& data, const std::vector<SubjectPosterior>& posteriors,
                 MStepWarnings* warn) {
    const Dims dims = data.dims();
    Mat UW = Mat::Zero(dims.q, dims.d);
    Mat WW = Mat::Zero(dims.d, dims.d);
    for (std::size_t i = 0; i < data.n_subjects(); ++i) {
        const Vec& w = data.subject(i).w;
        UW.noalias() += posteriors[i].u_hat * w.transpose();
        WW.noalias() += w * w.transpose();
    }
    // kappa WW = UW  <=>  WW kappa^T = UW^T
    return solve_spd_ridged(WW, UW.transpose(), warn).transpose();
}

Mat m_step_Sigma(const Dataset& data, const std::vector<SubjectPosterior>& posteriors,
                 const Mat& kappa_new, const FitConfig& cfg) {
    const int q = data.dims().q;
    Mat S = Mat::Zero(q, q);
    for (std::size_t i = 0; i < data.n_subjects(); ++i) {
        const Vec dev = posteriors[i].u_hat - kappa_new * data.subject(i).w;
        S.noalias() += dev * dev.transpose() + posteriors[i].H_inv;
    }
    S /= static_cast<double>(data.n_subjects());
    return floor_eigenvalues(S, cfg.sigma_eig_floor);
}

ModelParams m_step(const Dataset& data, const ModelParams& current, const SurrogateState& state,
                   const FitConfig& cfg, MStepWarnings* warn) {
    ModelParams next = current;
    const Mat V = stacked_gating_inputs(data, current.gating);
    next.alpha = m_step_alpha(V, stacked_gamma(state.gamma), current.alpha, cfg, warn);
    next.beta = m_step_beta(data, state.gamma, state.posteriors, current.sigma2, current.beta, warn);
    next.sigma2 =
        m_step_sigma2(data, state.gamma, state.posteriors, next.beta, current.sigma2, cfg, warn);
    const Dims dims = data.dims();
    switch (cfg.restriction) {
        case Restriction::none:
            next.kappa = m_step_kappa(data, state.posteriors, warn);
            next.Sigma = m_step_Sigma(data, state.posteriors, next.kappa, cfg);
            break;
        case Restriction::remoe:
            next.kappa = Mat::Zero(dims.q, dims.d);
            next.Sigma = m_step_Sigma(data, state.posteriors, next.kappa, cfg);
            break;
        case Restriction::moe:
            next.kappa = Mat::Zero(dims.q, dims.d);
            next.Sigma = cfg.sigma_eig_floor * Mat::Identity(dims.q, dims.q);
            break;
    }
    return next;
}

DatasetSums compute_sums(const Dataset& data, const Responsibilities& gamma, const Vec& sigma2) {
    const Dims dims = data.dims();
    const int K = static_cast<int>(sigma2.size());
    DatasetSums sums;
    sums.expert_gram.assign(K, Mat::Zero(dims.p, dims.p));
    sums.w_gram = Mat::Zero(dims.d, dims.d);
    for (std::size_t i = 0; i < data.n_subjects(); ++i) {
        const Subject& s = data.subject(i);
        sums.w_gram.noalias() += s.w * s.w.transpose();
        for (std::size_t j = 0; j < s.obs.size(); ++j)
            for (int k = 0; k < K; ++k)
                sums.expert_gram[k].noalias() +=
                    (gamma[i](j, k) / sigma2[k]) * (s.obs[j].x * s.obs[j].x.transpose());
    }
    // exactly symmetric, so archives round-trip through the symmetry check
    for (Mat& G : sums.expert_gram) G.triangularView<Eigen::StrictlyLower>() = G.transpose();
    sums.w_gram.triangularView<Eigen::StrictlyLower>() = sums.w_gram.transpose();
    return sums;
}

Responsibilities random_responsibilities(const Dataset& data, int K, std::uint64_t seed) {
    const CounterRng root(seed);
    Responsibilities out(data.n_subjects());
    for (std::size_t i = 0; i < data.n_subjects(); ++i) {
        CounterRng rng = root.split(i);
        const std::size_t n = data.subject(i).obs.size();
        out[i].resize(n, K);
        for (std::size_t j = 0; j < n; ++j) {
            Vec r(K);
            for (int k = 0; k < K; ++k) r[k] = rng.uniform();
            r /= r.sum();
            r = r.cwiseAbs2();
            out[i].row(j) = (r / r.sum()).transpose();
        }
    }
    return out;
}

FittedModel fit_from(const Dataset& data, const FitConfig& cfg, const Responsibilities& init) {
    cfg.validate();
    const Dims dims = data.dims();
    const int K = cfg.K;
    if (init.size() != data.n_subjects()) throw std::invalid_argument("init size mismatch");

    ModelParams params;
    params.gating = data.gating();
    params.alpha = Mat::Zero(K, data.gating_dim());
    params.beta = Mat::Zero(K, dims.p);
    params.sigma2 = Vec::Ones(K);
    params.kappa = Mat::Zero(dims.q, dims.d);
    params.Sigma = cfg.restriction == Restriction::moe
                       ? Mat(cfg.sigma_eig_floor * Mat::Identity(dims.q, dims.q))
                       : Mat(Mat::Identity(dims.q, dims.q));

    // Initial M-step from the supplied responsibilities with u = 0.
    SurrogateState state;
    state.gamma = init;
    state.posteriors.resize(data.n_subjects());
    for (auto& post : state.posteriors) {
        post.u_hat = Vec::Zero(dims.q);
        post.H_inv = Mat::Zero(dims.q, dims.q);
    }
    MStepWarnings warn;
    params.alpha = m_step_alpha(stacked_gating_inputs(data, params.gating), stacked_gamma(init),
                                params.alpha, cfg, &warn);
    params.beta = m_step_beta(data, init, state.posteriors, params.sigma2, params.beta, &warn);
    params.sigma2 =
        m_step_sigma2(data, init, state.posteriors, params.beta, params.sigma2, cfg, &warn);

    FittedModel out;
    out.restriction = cfg.restriction;
    ModelParams prev_params;
    EStepResult prev_E;
    EStepResult E;
    for (int it = 0;; ++it) {
        E = e_step(data, params, cfg, it == 0 ? nullptr : &prev_E.posteriors);
        if (!std::isfinite(E.loglik)) throw FitError("non-finite Laplace log-likelihood");
        if (!out.loglik_trace.empty()) {
            const double last = out.loglik_trace.back();
            const double rel = (last - E.loglik) / (1.0 + std::abs(last));
            out.diag.max_rel_dip = std::max(out.diag.max_rel_dip, rel);
            if (rel > kDipAbort) {
                throw FitError("Laplace log-likelihood dropped by " + std::to_string(rel) +
                               " (relative) at iteration " + std::to_string(it));
            }
            if (rel > kDipWarn) {
                // The run ends at the last iterate before the drop.
                ++out.diag.dip_warnings;
                params = std::move(prev_params);
                E = std::move(prev_E);
                out.em_iters = it - 1;
                out.converged = rel < cfg.em_rel_tol;
                break;
            }
            out.loglik_trace.push_back(E.loglik);
            if (std::abs(E.loglik - last) / (1.0 + std::abs(last)) < cfg.em_rel_tol) {
                out.converged = true;
                break;
            }
        } else {
            out.loglik_trace.push_back(E.loglik);
        }
        if (it >= cfg.max_em_iters) break;
        state.posteriors = E.posteriors;
        state.gamma = E.gamma;
        prev_params = params;
        params = m_step(data, params, state, cfg, &warn);
        out.em_iters = it + 1;
        prev_E = std::move(E);
    }
    out.diag.unconverged_modes = E.unconverged;
    out.diag.floored_modes = E.floored;
    out.params = std::move(params);
    out.posteriors = std::move(E.posteriors);
    out.gamma = std::move(E.gamma);
    out.sums = compute_sums(data, out.gamma, out.params.sigma2);
    out.diag.ridge_warnings = warn.ridge;
    out.diag.gating_clamps = warn.clamp;
    out.diag.degenerate_experts = warn.degenerate;
    std::sort(out.diag.degenerate_experts.begin(), out.diag.degenerate_experts.end());
    out.subject_ids.reserve(data.n_subjects());
    for (const Subject& s : data.subjects()) out.subject_ids.push_back(s.id);
    out.best_of = 1;
    out.start_logliks = {out.loglik()};
    return out;
}

FittedModel fit(const Dataset& data, const FitConfig& cfg) {
    cfg.validate();
    const int starts = cfg.K == 1 ? 1 : cfg.n_starts;
    std::optional<FittedModel> best;
    std::vector<double> finals(starts, std::numeric_limits<double>::quiet_NaN());
    std::string last_error;
    for (int s = 0; s < starts; ++s) {
        const std::uint64_t start_seed = mix64(cfg.seed * 0x9E3779B97F4A7C15ULL + s);
        try {
            FittedModel m = fit_from(data, cfg, random_responsibilities(data, cfg.K, start_seed));
            finals[s] = m.loglik();
            if (!best || m.loglik() > best->loglik()) {
                best = std::move(m);
                best->best_start = s;
            }
        } catch (const std::runtime_error& e) {
            last_error = e.what();
        }
    }
    if (!best) throw FitError("all " + std::to_string(starts) + " starts failed: " + last_error);
    best->best_of = starts;
    best->start_logliks = std::move(finals);
    return std::move(*best);
}

SelectKResult select_k(const Dataset& data, const std::vector<int>& k_range, int folds,
                       const FitConfig& cfg, std::uint64_t seed) {
    const std::size_t N = data.n_subjects();
    if (folds < 2 || static_cast<std::size_t>(folds) > N)
        throw std::invalid_argument("fold count must be between 2 and the number of subjects");
    if (k_range.empty()) throw std::invalid_argument("empty K range");

    std::vector<std::size_t> order(N);
    std::iota(order.begin(), order.end(), 0);
    CounterRng rng(seed);
    for (std::size_t i = N - 1; i > 0; --i) {
        const std::size_t j = rng.next_u64() % (i + 1);
        std::swap(order[i], order[j]);
    }
    SelectKResult res;
    res.ks = k_range;
    res.folds.assign(folds, {});
    for (std::size_t r = 0; r < N; ++r) res.folds[r % folds].push_back(static_cast<int>(order[r]));
    for (auto& f : res.folds) std::sort(f.begin(), f.end());

    const double nan = std::numeric_limits<double>::quiet_NaN();
    res.rmse = Mat::Constant(static_cast<Eigen::Index>(k_range.size()), folds, nan);
    res.mean_rmse.assign(k_range.size(), nan);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t ki = 0; ki < k_range.size(); ++ki) {
        FitConfig c = cfg;
        c.K = k_range[ki];
        int failed = 0;
        for (int f = 0; f < folds; ++f) {
            std::vector<std::size_t> train;
            for (int g = 0; g < folds; ++g)
                if (g != f) train.insert(train.end(), res.folds[g].begin(), res.folds[g].end());
            std::sort(train.begin(), train.end());
            try {
                const FittedModel m = fit(data.select(train), c);
                if (!m.diag.degenerate_experts.empty()) {
                    ++failed;
                    continue;
                }
                double sse = 0.0;
                std::size_t n = 0;
                for (int i : res.folds[f]) {
                    const Subject& s = data.subject(i);
                    for (const Observation& o : s.obs) {
                        const double r = o.y - point_predict(NewPoint{o.x, o.z, s.w}, m.params);
                        sse += r * r;
                        ++n;
                    }
                }
                res.rmse(static_cast<Eigen::Index>(ki), f) = std::sqrt(sse / static_cast<double>(n));
            } catch (const std::runtime_error&) {
                ++failed;
            }
        }
        if (2 * failed > folds) continue;
        double sum = 0.0;
        int ok = 0;
        for (int f = 0; f < folds; ++f) {
            const double v = res.rmse(static_cast<Eigen::Index>(ki), f);
            if (std::isfinite(v)) {
                sum += v;
                ++ok;
            }
        }
        res.mean_rmse[ki] = sum / ok;
        if (res.mean_rmse[ki] < best) {
            best = res.mean_rmse[ki];
            res.best_K = k_range[ki];
        }
    }
    if (res.best_K == 0) throw FitError("every candidate K was disqualified");
    return res;
}

}  // namespace memoe
