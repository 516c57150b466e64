#pragma once

// Data and parameter types for the mixed-effects mixture-of-experts model,
// plus the elementary log-densities shared by every other module.

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace memoe {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

/// Which covariates feed the softmax gate for one observation.
enum class GatingFeatures { x, x_and_z };

std::string to_string(GatingFeatures g);
GatingFeatures parse_gating_features(const std::string& s);

struct Observation {
    double y = 0.0;
    Vec x;  // fixed-effect design, caller supplies the intercept
    Vec z;  // random-effect design
};

struct Subject {
    std::string id;
    Vec w;  // subject-level covariates for the random-effect mean
    std::vector<Observation> obs;
};

struct Dims {
    int p = 0;
    int q = 0;
    int d = 0;
    bool operator==(const Dims&) const = default;
};

/// Immutable collection of subjects sharing one set of design dimensions.
/// The constructor validates every invariant and throws std::invalid_argument.
class Dataset {
public:
    Dataset() = default;
    explicit Dataset(std::vector<Subject> subjects,
                     GatingFeatures gating = GatingFeatures::x);

    const std::vector<Subject>& subjects() const { return subjects_; }
    const Subject& subject(std::size_t i) const { return subjects_[i]; }
    Dims dims() const { return dims_; }
    std::size_t n_subjects() const { return subjects_.size(); }
    std::size_t total_obs() const { return total_obs_; }
    GatingFeatures gating() const { return gating_; }
    int gating_dim() const;

    /// Subset by subject index, preserving order.
    Dataset select(std::span<const std::size_t> idx) const;

private:
    std::vector<Subject> subjects_;
    Dims dims_;
    std::size_t total_obs_ = 0;
    GatingFeatures gating_ = GatingFeatures::x;
};

/// Builds the gate input v from an observation's covariates.
Vec gating_input(const Vec& x, const Vec& z, GatingFeatures policy);
int gating_dim(Dims dims, GatingFeatures policy);

/// Model parameters. Row K-1 of alpha is the reference class and stays zero.
struct ModelParams {
    Mat alpha;   // K x g
    Mat beta;    // K x p
    Vec sigma2;  // K
    Mat kappa;   // q x d
    Mat Sigma;   // q x q
    GatingFeatures gating = GatingFeatures::x;

    int K() const { return static_cast<int>(beta.rows()); }
    int p() const { return static_cast<int>(beta.cols()); }
    int q() const { return static_cast<int>(Sigma.rows()); }
    int d() const { return static_cast<int>(kappa.cols()); }
    int g() const { return static_cast<int>(alpha.cols()); }

    /// Throws std::invalid_argument on any violated invariant.
    void validate() const;
    void validate_against(Dims dims) const;
};

/// Log of the univariate normal density. Throws std::domain_error if var <= 0.
double gaussian_logpdf(double y, double mean, double var);

/// Numerically stable log(sum(exp(a))).
double log_sum_exp(std::span<const double> a);

/// Softmax gate probabilities pi_k = exp(v.alpha_k) / sum_l exp(v.alpha_l).
Vec gate_probs(const Vec& v, const Mat& alpha);
Vec gate_log_probs(const Vec& v, const Mat& alpha);

/// log sum_k pi_k(v) N(y; x.beta_k + z.u, sigma_k^2).
double conditional_mixture_logpdf(const Observation& obs, const Vec& u,
                                  const ModelParams& params);

/// Standard normal CDF and quantile.
double normal_cdf(double x);
double normal_quantile(double p);

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

}  // namespace memoe
