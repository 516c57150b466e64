#pragma once

// Point prediction, the predictive Gaussian mixture at a new covariate tuple
// and the grid-based highest-density prediction set.

#include "memoe/em_fit.hpp"

#include <utility>
#include <vector>

namespace memoe {

struct PredictiveMixture {
    Vec pi_hat;
    Vec Gamma_hat;  // component means
    Vec b2_hat;     // component variances

    double density(double y) const;
    double cdf(double y) const;
};

struct Interval {
    double lo = 0.0;
    double hi = 0.0;
    double length() const { return hi - lo; }
    bool contains(double y) const { return y >= lo && y < hi; }
};

struct PredictionSet {
    std::vector<Interval> intervals;  // sorted, disjoint, half-open
    double achieved_mass = 0.0;
    double q = 0.0;
    int cells = 0;
    double cell_width = 0.0;
    Interval bounds;
    std::vector<int> selected_cells;  // in selection order

    double total_length() const;
    bool contains(double y) const;
};

/// New covariate tuple.
struct NewPoint {
    Vec x;
    Vec z;
    Vec w;
};

/// Components use the parameters and sums frozen in a fitted model.
PredictiveMixture predictive_mixture(const NewPoint& pt, const ModelParams& params,
                                     const DatasetSums& sums);
PredictiveMixture predictive_mixture(const NewPoint& pt, const FittedModel& fitted);

/// x.beta_k + z.kappa w for the expert with the largest gate weight (lowest index on ties).
double point_predict(const NewPoint& pt, const ModelParams& params);
double point_predict(const NewPoint& pt, const FittedModel& fitted);
/// Same expert choice, with a known subject's posterior mode in place of kappa w.
double point_predict_given_mode(const NewPoint& pt, const ModelParams& params, const Vec& u_hat);

/// Grid highest-density set with predictive mass at least 1 - q.
PredictionSet prediction_set(const PredictiveMixture& mix, double q, int cells = 2000);
PredictionSet prediction_set(const NewPoint& pt, const FittedModel& fitted, double q,
                             int cells = 2000);

struct TestPoint {
    NewPoint pt;
    double y = 0.0;
};

struct CoverageResult {
    double coverage = 0.0;
    double mean_length = 0.0;
    std::size_t n = 0;
};

/// Throws std::invalid_argument on an empty test set.
CoverageResult coverage_eval(const std::vector<TestPoint>& test, const FittedModel& fitted,
                             double q, int cells = 2000, int threads = 1);

}  // namespace memoe
