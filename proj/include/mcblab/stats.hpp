#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "mcblab/metrics.hpp"

namespace mcb {

struct BootstrapResult {
    double delta_point = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double p_two_sided = 1.0;
    std::size_t b = 0;
    std::uint64_t seed = 0;
};

using MetricFn = std::function<double(const PredictionSet&)>;

// Paired bootstrap over samples: each replicate resamples the same row
// indices from both prediction sets, then takes metric(a) - metric(b).
// CI is the [2.5, 97.5] percentile interval with linear interpolation;
// p = 2 * min(Pr[delta <= 0], Pr[delta >= 0]) over replicates, capped at 1.
BootstrapResult paired_bootstrap(const MetricFn& metric, const PredictionSet& pred_a,
                                 const PredictionSet& pred_b, std::size_t b,
                                 std::uint64_t seed);

struct CiResult {
    double point = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
};

// Percentile bootstrap CI for a statistic over per-unit values.
CiResult bootstrap_ci(const std::vector<double>& values,
                      const std::function<double(const std::vector<double>&)>& statistic,
                      std::size_t b, std::uint64_t seed);

// Exact two-sided binomial sign test against p0 = 0.5, log-space tails.
double sign_test(std::size_t successes, std::size_t trials);

// Percentile with linear interpolation between order statistics.
// q in [0, 100]; input need not be sorted.
double percentile(std::vector<double> values, double q);

}  // namespace mcb
