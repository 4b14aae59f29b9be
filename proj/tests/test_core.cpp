#include "stir/core.hpp"
#include "stir/config.hpp"
#include "stir/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <random>

using namespace stir;

TEST_CASE("cosine basics") {
    LatentVector v{0.3, -1.2, 4.0};
    CHECK(cosine(v, v) == doctest::Approx(1.0).epsilon(1e-12));

    LatentVector e1{1.0, 0.0};
    LatentVector e2{0.0, 1.0};
    CHECK(cosine(e1, e2) == doctest::Approx(0.0));

    // hand evaluation: (1,1).(1,0) / (sqrt2 * 1)
    CHECK(cosine({1.0, 1.0}, {1.0, 0.0}) == doctest::Approx(0.70710678).epsilon(1e-9));
}

TEST_CASE("cosine degenerate and contract cases") {
    CHECK_THROWS_AS(cosine({1.0, 2.0}, {1.0, 2.0, 3.0}), contract_violation);
    // zero-norm input reads as unretrievable, not an error
    CHECK(cosine({0.0, 0.0}, {1.0, 2.0}) == 0.0);
    CHECK(cosine({1.0, 2.0}, {0.0, 0.0}) == 0.0);
}

TEST_CASE("cosine scale invariance under positive scaling") {
    auto rng = make_rng(7);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> scale(0.01, 100.0);
    for (int trial = 0; trial < 200; ++trial) {
        LatentVector a(8), b(8);
        for (double& x : a) x = gauss(rng);
        for (double& x : b) x = gauss(rng);
        double base = cosine(a, b);
        LatentVector a2 = a, b2 = b;
        double sa = scale(rng), sb = scale(rng);
        for (double& x : a2) x *= sa;
        for (double& x : b2) x *= sb;
        CHECK(cosine(a2, b2) == doctest::Approx(base).epsilon(1e-9));
    }
}

TEST_CASE("centroid basics") {
    LatentVector v{2.0, -1.0, 0.5};
    CHECK(centroid({v}) == v);

    LatentVector neg = v;
    for (double& x : neg) x = -x;
    LatentVector zero = centroid({v, neg});
    for (double x : zero) CHECK(x == doctest::Approx(0.0));

    LatentVector m = centroid({{1.0, 0.0}, {0.0, 1.0}, {2.0, 2.0}});
    CHECK(m[0] == doctest::Approx(1.0));
    CHECK(m[1] == doctest::Approx(1.0));

    CHECK_THROWS_AS(centroid({}), contract_violation);
    CHECK_THROWS_AS(centroid({{1.0}, {1.0, 2.0}}), contract_violation);
}

TEST_CASE("centroid is permutation-invariant and affine") {
    auto rng = make_rng(11);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<LatentVector> states(5, LatentVector(6));
        for (auto& s : states) {
            for (double& x : s) x = gauss(rng);
        }
        LatentVector base = centroid(states);

        std::shuffle(states.begin(), states.end(), rng);
        LatentVector shuffled = centroid(states);
        for (size_t i = 0; i < base.size(); ++i) {
            CHECK(shuffled[i] == doctest::Approx(base[i]).epsilon(1e-12));
        }

        double a = 2.5;
        LatentVector b(6);
        for (double& x : b) x = gauss(rng);
        std::vector<LatentVector> mapped = states;
        for (auto& s : mapped) {
            for (size_t i = 0; i < s.size(); ++i) s[i] = a * s[i] + b[i];
        }
        LatentVector lhs = centroid(mapped);
        for (size_t i = 0; i < base.size(); ++i) {
            CHECK(lhs[i] == doctest::Approx(a * shuffled[i] + b[i]).epsilon(1e-9));
        }
    }
}

TEST_CASE("config defaults match the standard operating point") {
    Config c;
    CHECK(c.K == 8);
    CHECK(c.k_pos == 2);
    CHECK(c.k_neg == 3);
    CHECK(c.eta == 0.01);
    CHECK(c.temperature == 0.7);
    CHECK(c.B == 256);
    CHECK(c.lambda == 0.5);
    CHECK(c.epsilon == 1e-4);
    CHECK(c.top_k == 8);
    CHECK(c.L == 4);
    CHECK(c.T_probe == 4);
    CHECK(c.beta == 2.0);
    CHECK(c.rho == 0.1);
    CHECK(c.layer_depth == 0.6);
    CHECK(c.k_scale == 1.0);
    CHECK(c.tau_null == 0.0);
    CHECK(c.alpha_max == 1.5);
    CHECK(c.contrastive_mining);
    CHECK(c.diversity_selection);
    CHECK(c.lookahead_probing);
    CHECK(c.anchor_gating);
    CHECK(c.adaptive_injection);
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation rejects bad values") {
    Config c;
    c.L = 12; // exceeds top_k = 8
    CHECK_THROWS_AS(c.validate(), contract_violation);
    c = Config{};
    c.layer_depth = 0.0;
    CHECK_THROWS_AS(c.validate(), contract_violation);
    c = Config{};
    c.layer_depth = 1.2;
    CHECK_THROWS_AS(c.validate(), contract_violation);
    c = Config{};
    c.beta = -1.0;
    CHECK_THROWS_AS(c.validate(), contract_violation);
}

TEST_CASE("config json round trip and partial overrides") {
    Config c;
    c.K = 64;
    c.tau_null = 0.25;
    c.anchor_gating = false;
    Config back = config_from_json_text(config_to_json_text(c));
    CHECK(back.K == 64);
    CHECK(back.tau_null == 0.25);
    CHECK_FALSE(back.anchor_gating);
    CHECK(back.B == 256);

    Config partial = config_from_json_text("{\"k_scale\": 0.75}");
    CHECK(partial.k_scale == 0.75);
    CHECK(partial.K == 8);

    CHECK_THROWS_AS(config_from_json_text("{nope"), parse_error);
    CHECK_THROWS_AS(config_from_json_text("{\"L\": 99}"), contract_violation);
}

TEST_CASE("capture layer from normalized depth") {
    Config c;
    c.layer_depth = 0.6;
    CHECK(c.capture_layer(10) == 6);
    c.layer_depth = 0.45;
    CHECK(c.capture_layer(10) == 5); // round half up
    c.layer_depth = 1.0;
    CHECK(c.capture_layer(24) == 24);
}
