#include <gtest/gtest.h>

#include "gradcheck.hpp"

using namespace mre;

TEST(Gradients, LogitGradientIsProbMinusOneHot) {
    auto c = test::make_gradcheck_case(1);
    const auto in = c.input();
    fusion::FusionCache<double> cache;
    auto out = fusion::forward(c.params, c.cfg, in, &cache);
    auto g = fusion::FusionParams<double>::zeros(c.cfg.dims);
    fusion::backward(c.params, c.cfg, cache, c.gold, g);
    // b2 enters the logits additively, so its gradient is dL/dlogits.
    for (std::size_t k = 0; k < out.probabilities.size(); ++k)
        EXPECT_NEAR(g.b2(0, k), out.probabilities[k] - (k == c.gold ? 1.0 : 0.0), 1e-15);
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<bool, bool>> {};

TEST_P(GradientCheck, EveryTensorMatchesCentralDifferences) {
    const auto [selection, consistency] = GetParam();
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        auto c = test::make_gradcheck_case(seed, selection, consistency);
        auto res = test::run_gradcheck(c);
        for (const auto& [name, rel] : res.rel_error) EXPECT_LT(rel, 1e-4) << name << " seed " << seed;
    }
}

INSTANTIATE_TEST_SUITE_P(Ablations, GradientCheck,
                         ::testing::Values(std::make_tuple(true, true), std::make_tuple(false, true),
                                           std::make_tuple(true, false), std::make_tuple(false, false)));

TEST(Gradients, ZeroEvidenceBranchGetsNoConsistencyGradient) {
    auto c = test::make_gradcheck_case(4, true, true, 0, 0);
    const auto in = c.input();
    fusion::FusionCache<double> cache;
    auto out = fusion::forward(c.params, c.cfg, in, &cache);
    EXPECT_TRUE(out.no_text_evidence);
    EXPECT_TRUE(out.no_visual_evidence);
    auto g = fusion::FusionParams<double>::zeros(c.cfg.dims);
    fusion::backward(c.params, c.cfg, cache, c.gold, g);
    for (const auto* m : {&g.w_t, &g.w_t_prime, &g.w_v, &g.w_v_prime})
        for (double v : m->data()) EXPECT_EQ(v, 0.0);
    auto res = test::run_gradcheck(c);
    EXPECT_LT(res.worst, 1e-4) << res.worst_name;
}
