#include "mcblab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mcblab/rng.hpp"

namespace mcb {

double percentile(std::vector<double> values, double q) {
    if (values.empty()) throw std::invalid_argument("percentile: empty input");
    if (q < 0.0 || q > 100.0) throw std::invalid_argument("percentile: q out of range");
    std::sort(values.begin(), values.end());
    double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
    double frac = pos - static_cast<double>(lo);
    return values[lo] + frac * (values[hi] - values[lo]);
}

namespace {

PredictionSet resample(const PredictionSet& p, const std::vector<std::size_t>& idx) {
    PredictionSet r;
    r.tau = p.tau;
    r.init(idx.size(), p.n_labels(), p.n_concepts());
    for (std::size_t r_i = 0; r_i < idx.size(); ++r_i) {
        std::size_t i = idx[r_i];
        r.ids[r_i] = p.ids[i];
        for (std::size_t j = 0; j < p.n_labels(); ++j) {
            r.scores.at(r_i, j) = p.scores.at(i, j);
            r.decisions.at(r_i, j) = p.decisions.at(i, j);
            r.labels.at(r_i, j) = p.labels.at(i, j);
        }
        for (std::size_t k = 0; k < p.n_concepts(); ++k) {
            r.chat.at(r_i, k) = p.chat.at(i, k);
            r.ctilde.at(r_i, k) = p.ctilde.at(i, k);
        }
    }
    return r;
}

}  // namespace

BootstrapResult paired_bootstrap(const MetricFn& metric, const PredictionSet& pred_a,
                                 const PredictionSet& pred_b, std::size_t b,
                                 std::uint64_t seed) {
    std::size_t n = pred_a.n_samples();
    if (n == 0) throw std::invalid_argument("paired_bootstrap: N = 0");
    if (pred_b.n_samples() != n || pred_b.n_labels() != pred_a.n_labels())
        throw std::invalid_argument("paired_bootstrap: prediction sets do not pair up");
    if (b < 1) throw std::invalid_argument("paired_bootstrap: B must be >= 1");

    BootstrapResult res;
    res.b = b;
    res.seed = seed;
    res.delta_point = metric(pred_a) - metric(pred_b);

    std::vector<double> deltas;
    deltas.reserve(b);
    std::size_t le = 0, ge = 0;
    for (std::size_t rep = 0; rep < b; ++rep) {
        Rng rng(mix_seed(seed, rep + 1));
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = rng.below(n);
        double d = metric(resample(pred_a, idx)) - metric(resample(pred_b, idx));
        deltas.push_back(d);
        if (d <= 0.0) ++le;
        if (d >= 0.0) ++ge;
    }
    res.ci_low = percentile(deltas, 2.5);
    res.ci_high = percentile(deltas, 97.5);
    double nb = static_cast<double>(b);
    res.p_two_sided = std::min(1.0, 2.0 * std::min(le / nb, ge / nb));
    return res;
}

CiResult bootstrap_ci(const std::vector<double>& values,
                      const std::function<double(const std::vector<double>&)>& statistic,
                      std::size_t b, std::uint64_t seed) {
    if (values.empty()) throw std::invalid_argument("bootstrap_ci: empty input");
    if (b < 1) throw std::invalid_argument("bootstrap_ci: B must be >= 1");
    CiResult res;
    res.point = statistic(values);
    std::vector<double> stats;
    stats.reserve(b);
    std::size_t n = values.size();
    for (std::size_t rep = 0; rep < b; ++rep) {
        Rng rng(mix_seed(seed, rep + 1));
        std::vector<double> sample(n);
        for (std::size_t i = 0; i < n; ++i) sample[i] = values[rng.below(n)];
        stats.push_back(statistic(sample));
    }
    res.ci_low = percentile(stats, 2.5);
    res.ci_high = percentile(stats, 97.5);
    return res;
}

namespace {

// log C(n, k) via lgamma.
double log_choose(double n, double k) {
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// log(exp(a) + exp(b)) without overflow.
double log_add(double a, double b) {
    if (a < b) std::swap(a, b);
    return a + std::log1p(std::exp(b - a));
}

}  // namespace

double sign_test(std::size_t successes, std::size_t trials) {
    if (trials == 0) throw std::invalid_argument("sign_test: n must be >= 1");
    if (successes > trials) throw std::invalid_argument("sign_test: k > n");
    double n = static_cast<double>(trials);
    double log_half_n = -n * std::log(2.0);  // log P of any single outcome pattern

    // log P[X <= k] and log P[X >= k] under Binomial(n, 1/2).
    double log_lower = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i <= successes; ++i)
        log_lower = log_add(log_lower, log_choose(n, static_cast<double>(i)) + log_half_n);
    double log_upper = -std::numeric_limits<double>::infinity();
    for (std::size_t i = successes; i <= trials; ++i)
        log_upper = log_add(log_upper, log_choose(n, static_cast<double>(i)) + log_half_n);

    double log_p = std::log(2.0) + std::min(log_lower, log_upper);
    return std::min(1.0, std::exp(log_p));
}

}  // namespace mcb
