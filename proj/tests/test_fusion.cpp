#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "csen/fusion.hpp"
#include "csen/grad_check.hpp"
#include "csen/rng.hpp"

using namespace csen;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

// Afem with parameters rigged so projected() is exactly the identity in eval
// mode: identity projection, zero bias, unit gamma, and running stats chosen
// so (var + eps) == 1.
struct RiggedAfem {
    Afem<double> afem;
    ParamSet<double> ps;

    RiggedAfem(std::int64_t d, std::int64_t groups, const std::vector<double>& w) : afem(d, d, groups) {
        auto eye = zeros<double>({d, d});
        for (std::int64_t i = 0; i < d; ++i) eye->data[i * d + i] = 1.0;
        ps.add("afem/proj_w", eye);
        ps.add("afem/proj_b", zeros<double>({d}));
        ps.add("afem/bn_g", full<double>({d}, 1.0));
        ps.add("afem/bn_b", zeros<double>({d}));
        ps.add("afem/w", make_tensor<double>({static_cast<std::int64_t>(w.size())}, w));
        for (auto& v : afem.bn_state().running_var) v = 1.0 - 1e-5;
    }
};

}  // namespace

TEST_CASE("fuse computes the scalar oracle with semantic columns first") {
    FusionHead<double> head(1, 1, 1);
    ParamSet<double> ps;
    ps.add("fuse/w", make_tensor<double>({2, 1}, {2.0, 3.0}));
    ps.add("fuse/b", make_tensor<double>({1}, {1.0}));
    auto t_s = make_tensor<double>({1, 1}, {1.0});
    auto t_a = make_tensor<double>({1, 1}, {1.0});
    auto t_u = head.fuse(ps, t_s, t_a);
    REQUIRE_THAT(t_u->data[0], WithinAbs(6.0, 1e-15));

    // asymmetric check: semantic weight 2 applies to t_s, appearance weight 3 to t_a
    auto t_u2 = head.fuse(ps, make_tensor<double>({1, 1}, {1.0}), make_tensor<double>({1, 1}, {0.0}));
    REQUIRE_THAT(t_u2->data[0], WithinAbs(3.0, 1e-15));
}

TEST_CASE("fuse maps zero inputs with zero bias to zero") {
    FusionHead<double> head(3, 4, 5);
    ParamSet<double> ps;
    Rng rng(1);
    head.init_params(ps, rng);
    ps.at("fuse/b")->data.assign(5, 0.0);
    auto t_u = head.fuse(ps, zeros<double>({2, 3}), zeros<double>({2, 4}));
    REQUIRE(t_u->shape == std::vector<std::int64_t>{2, 5});
    for (double v : t_u->data) REQUIRE(v == 0.0);
}

TEST_CASE("fuse validates input dimensions") {
    FusionHead<double> head(3, 4, 5);
    ParamSet<double> ps;
    Rng rng(2);
    head.init_params(ps, rng);
    REQUIRE_THROWS_WITH(head.fuse(ps, zeros<double>({2, 2}), zeros<double>({2, 4})),
                        ContainsSubstring("2x2"));
    REQUIRE_THROWS_AS(head.fuse(ps, zeros<double>({2, 3}), zeros<double>({3, 4})), shape_error);
}

TEST_CASE("afem with all weights zero reduces to the projected branch") {
    Afem<double> afem(6, 8, 4);
    ParamSet<double> ps;
    Rng rng(3);
    afem.init_params(ps, rng);
    ps.at("afem/w")->data.assign(5, 0.0);
    Rng data(4);
    auto t_s = randn<double>({3, 6}, data);
    auto out = afem.forward(ps, t_s, true);
    auto y = afem.projected(ps, t_s, true);
    REQUIRE(out->data == y->data);
}

TEST_CASE("afem with only the global weight set doubles the branch") {
    Afem<double> afem(6, 8, 4);
    ParamSet<double> ps;
    Rng rng(5);
    afem.init_params(ps, rng);
    auto w = ps.at("afem/w");
    w->data.assign(5, 0.0);
    w->data[0] = 1.0;
    Rng data(6);
    auto t_s = randn<double>({3, 6}, data);
    auto out = afem.forward(ps, t_s, true);
    auto y = afem.projected(ps, t_s, true);
    for (std::int64_t i = 0; i < out->numel(); ++i) REQUIRE(out->data[i] == 2.0 * y->data[i]);
}

TEST_CASE("afem per-channel gating oracle") {
    RiggedAfem rig(4, 2, {0.0, 0.5, -0.5});
    auto t_s = make_tensor<double>({1, 4}, {1.0, 2.0, 3.0, 4.0});
    auto out = rig.afem.forward(rig.ps, t_s, false);
    REQUIRE(out->data == std::vector<double>{1.5, 3.0, 1.5, 2.0});
}

TEST_CASE("afem with one group degenerates to a global gate") {
    RiggedAfem rig(4, 1, {0.25, -0.75});
    auto t_s = make_tensor<double>({2, 4}, {1, 2, 3, 4, 0.5, 0, 2, 8});
    auto out = rig.afem.forward(rig.ps, t_s, false);
    const double factor = 1.0 + 0.25 - 0.75;
    for (std::int64_t i = 0; i < out->numel(); ++i)
        REQUIRE(out->data[i] == factor * std::max(0.0, t_s->data[i]));
}

TEST_CASE("afem gate factors are positively homogeneous") {
    const double alpha = 2.5;
    std::vector<double> w = {0.3, -0.2, 0.7};
    std::vector<double> w_scaled = {alpha * (1.0 + w[0]) - 1.0, alpha * w[1], alpha * w[2]};
    RiggedAfem a(4, 2, w), b(4, 2, w_scaled);
    Rng data(7);
    auto t_s = randn<double>({3, 4}, data);
    auto out_a = a.afem.forward(a.ps, t_s, false);
    auto out_b = b.afem.forward(b.ps, t_s, false);
    for (std::int64_t i = 0; i < out_a->numel(); ++i)
        REQUIRE_THAT(out_b->data[i], WithinAbs(alpha * out_a->data[i], 1e-10));
}

TEST_CASE("afem group-weight gradients equal grouped sums of upstream times branch") {
    Afem<double> afem(5, 6, 3);
    ParamSet<double> ps;
    Rng rng(8);
    afem.init_params(ps, rng);
    Rng data(9);
    auto t_s = randn<double>({4, 5}, data);
    Rng wr(10);
    auto weights = randn<double>({4, 6}, wr);

    ps.zero_grad();
    auto out = afem.forward(ps, t_s, true);
    auto y = afem.projected(ps, t_s, true);  // same values; BN stats don't affect train output
    backward(ops::mean_all(ops::mul(out, weights)));

    auto wg = ps.at("afem/w")->grad;
    const double inv = 1.0 / 24.0;  // mean over 4x6 elements
    double expect_global = 0.0;
    std::vector<double> expect_group(3, 0.0);
    for (std::int64_t n = 0; n < 4; ++n)
        for (std::int64_t c = 0; c < 6; ++c) {
            const double g = weights->at(n, c) * inv * y->at(n, c);
            expect_global += g;
            expect_group[static_cast<std::size_t>(c * 3 / 6)] += g;
        }
    REQUIRE_THAT(wg[0], WithinAbs(expect_global, 1e-12));
    for (int i = 0; i < 3; ++i) REQUIRE_THAT(wg[1 + i], WithinAbs(expect_group[i], 1e-12));
}

TEST_CASE("afem gradients agree with finite differences") {
    Afem<double> afem(4, 6, 2);
    ParamSet<double> ps;
    Rng rng(11);
    afem.init_params(ps, rng);
    ps.add("x", randn<double>({3, 4}, rng, 1.0, true));
    auto rep = grad_check<double>(ps, [&] {
        auto out = afem.forward(ps, ps.at("x"), true);
        Rng w(12);
        auto weights = randn<double>(out->shape, w);
        return ops::mean_all(ops::mul(out, weights));
    });
    INFO("worst " << rep.worst_param << "[" << rep.worst_index << "]");
    REQUIRE(rep.max_rel_err <= 1e-5);
}

TEST_CASE("afem rejects invalid group counts") {
    REQUIRE_THROWS_WITH(Afem<double>(4, 6, 4), ContainsSubstring("divisible"));
    REQUIRE_THROWS_AS(Afem<double>(4, 6, 0), config_error);
}

TEST_CASE("final_feature sums the branches") {
    Rng rng(13);
    auto a = randn<double>({2, 3}, rng);
    auto b = randn<double>({2, 3}, rng);
    auto zero = zeros<double>({2, 3});
    auto t = final_feature(a, b, zero);
    for (std::int64_t i = 0; i < t->numel(); ++i)
        REQUIRE_THAT(t->data[i], WithinAbs(a->data[i] + b->data[i], 1e-15));

    auto t2 = final_feature(a, zero, zero);
    REQUIRE(t2->data == a->data);

    auto c = randn<double>({2, 3}, rng);
    auto lhs = final_feature(a, b, c);
    auto rhs = final_feature(c, a, b);
    for (std::int64_t i = 0; i < lhs->numel(); ++i)
        REQUIRE_THAT(lhs->data[i], WithinAbs(rhs->data[i], 1e-12));

    REQUIRE_THROWS_WITH(final_feature(a, b, zeros<double>({3, 2})),
                        ContainsSubstring("2x3") && ContainsSubstring("3x2"));
}
