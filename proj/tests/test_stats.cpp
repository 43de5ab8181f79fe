#include "doctest.h"

#include <cmath>
#include <numeric>

#include "mcblab/metrics.hpp"
#include "mcblab/rng.hpp"
#include "mcblab/stats.hpp"

using namespace mcb;

namespace {

PredictionSet constant_pred(std::size_t n, std::size_t l, bool correct, std::uint64_t seed) {
    Rng rng(seed);
    PredictionSet p;
    p.init(n, l, 1);
    for (std::size_t i = 0; i < n; ++i) {
        p.ids[i] = "n" + std::to_string(i);
        for (std::size_t j = 0; j < l; ++j) {
            bool y = rng.bernoulli(0.5);
            p.labels.at(i, j) = y ? 1.0 : 0.0;
            bool d = correct ? y : !y;
            p.scores.at(i, j) = d ? 0.9 : 0.1;
        }
    }
    p.threshold();
    return p;
}

double macro_f1(const PredictionSet& p) { return f1_scores(p).macro; }

}  // namespace

TEST_CASE("self-comparison bootstrap collapses to zero with p = 1") {
    PredictionSet p = constant_pred(60, 4, true, 11);
    BootstrapResult r = paired_bootstrap(macro_f1, p, p, 500, 7);
    CHECK(r.delta_point == 0.0);
    CHECK(r.ci_low == 0.0);
    CHECK(r.ci_high == 0.0);
    CHECK(r.p_two_sided == 1.0);
}

TEST_CASE("separable comparison drives p to the bootstrap floor") {
    PredictionSet good = constant_pred(200, 4, true, 3);
    PredictionSet bad = good;
    for (std::size_t i = 0; i < bad.scores.v.size(); ++i)
        bad.scores.v[i] = bad.labels.v[i] > 0.5 ? 0.1 : 0.9;
    bad.threshold();
    BootstrapResult r = paired_bootstrap(macro_f1, good, bad, 1000, 5);
    CHECK(r.delta_point > 0.5);
    CHECK(r.ci_low > 0.0);
    CHECK(r.p_two_sided <= 2.0 / 1000.0);
}

TEST_CASE("paired bootstrap is deterministic in the seed and antisymmetric in its arguments") {
    PredictionSet a = constant_pred(50, 3, true, 21);
    PredictionSet b = constant_pred(50, 3, true, 22);
    b.labels = a.labels;  // same truth, different decisions
    BootstrapResult r1 = paired_bootstrap(macro_f1, a, b, 300, 9);
    BootstrapResult r2 = paired_bootstrap(macro_f1, a, b, 300, 9);
    CHECK(r1.delta_point == r2.delta_point);
    CHECK(r1.ci_low == r2.ci_low);
    CHECK(r1.ci_high == r2.ci_high);
    CHECK(r1.p_two_sided == r2.p_two_sided);

    BootstrapResult rev = paired_bootstrap(macro_f1, b, a, 300, 9);
    CHECK(rev.delta_point == doctest::Approx(-r1.delta_point).epsilon(1e-15));
    CHECK(rev.ci_low == doctest::Approx(-r1.ci_high).epsilon(1e-15));
    CHECK(rev.ci_high == doctest::Approx(-r1.ci_low).epsilon(1e-15));
    CHECK(rev.p_two_sided == doctest::Approx(r1.p_two_sided));
}

TEST_CASE("bootstrap_ci on constant values collapses to the point") {
    std::vector<double> v(40, 0.25);
    auto mean = [](const std::vector<double>& x) {
        return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    };
    CiResult r = bootstrap_ci(v, mean, 400, 13);
    CHECK(r.point == doctest::Approx(0.25));
    CHECK(r.ci_low == doctest::Approx(0.25));
    CHECK(r.ci_high == doctest::Approx(0.25));
}

TEST_CASE("bootstrap_ci of a balanced 0/1 sample brackets the mean") {
    std::vector<double> v(1000);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = i % 2 ? 1.0 : 0.0;
    auto mean = [](const std::vector<double>& x) {
        return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    };
    CiResult r = bootstrap_ci(v, mean, 1000, 17);
    CHECK(r.point == doctest::Approx(0.5));
    CHECK(r.ci_low > 0.45);
    CHECK(r.ci_high < 0.55);
    CHECK(r.ci_low < 0.5);
    CHECK(r.ci_high > 0.5);

    CiResult again = bootstrap_ci(v, mean, 1000, 17);
    CHECK(r.ci_low == again.ci_low);
    CHECK(r.ci_high == again.ci_high);
}

TEST_CASE("sign test matches exact binomial tails") {
    CHECK(sign_test(5, 10) == doctest::Approx(1.0));
    // k = 0, n = 10: two-sided p = 2 / 2^10.
    CHECK(sign_test(0, 10) == doctest::Approx(2.0 / 1024.0).epsilon(1e-12));
    CHECK(sign_test(10, 10) == doctest::Approx(2.0 / 1024.0).epsilon(1e-12));
    // Large unbalanced case against a known reference value.
    double p = sign_test(631, 917);
    CHECK(p > 1.3e-30 / 2.0);
    CHECK(p < 1.3e-30 * 2.0);
    // Symmetry.
    CHECK(sign_test(631, 917) == doctest::Approx(sign_test(917 - 631, 917)).epsilon(1e-12));
    CHECK_THROWS(sign_test(5, 0));
    CHECK_THROWS(sign_test(11, 10));
}

TEST_CASE("percentile interpolates linearly between order statistics") {
    std::vector<double> v = {4.0, 1.0, 3.0, 2.0};
    CHECK(percentile(v, 0.0) == doctest::Approx(1.0));
    CHECK(percentile(v, 100.0) == doctest::Approx(4.0));
    CHECK(percentile(v, 50.0) == doctest::Approx(2.5));
    CHECK(percentile(v, 25.0) == doctest::Approx(1.75));
    CHECK(percentile({7.0}, 42.0) == doctest::Approx(7.0));
    CHECK_THROWS(percentile({}, 50.0));
    CHECK_THROWS(percentile(v, 101.0));
}
