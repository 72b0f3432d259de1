#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "csen/encoders.hpp"
#include "csen/grad_check.hpp"
#include "csen/rng.hpp"

using namespace csen;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

AppearanceConfig tiny_appearance() {
    AppearanceConfig cfg;
    cfg.stages = {{4, 3, 2}, {8, 3, 2}};
    cfg.input_h = 16;
    cfg.input_w = 16;
    return cfg;
}

SemanticConfig tiny_vit() {
    SemanticConfig cfg;
    cfg.mode = SemanticMode::mini_vit;
    cfg.d_s = 8;
    cfg.patch_size = 8;
    cfg.depth = 1;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    return cfg;
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path("/tmp/csen_test_" + name) {}
    ~TempFile() { std::remove(path.c_str()); }
};

}  // namespace

TEST_CASE("appearance encoder emits one row per image with d_a columns") {
    auto cfg = tiny_appearance();
    AppearanceEncoder<double> enc(cfg);
    ParamSet<double> ps;
    Rng rng(1);
    enc.init_params(ps, rng);
    Rng data(2);
    auto x = randn<double>({4, 3, 16, 16}, data);
    auto t_a = enc.forward(ps, x, true);
    REQUIRE(t_a->shape == std::vector<std::int64_t>{4, 8});
    REQUIRE(t_a->all_finite());
}

TEST_CASE("appearance encoder maps zero images to zero features") {
    AppearanceEncoder<double> enc(tiny_appearance());
    ParamSet<double> ps;
    Rng rng(3);
    enc.init_params(ps, rng);  // conv biases, bn betas zero-initialized
    auto x = zeros<double>({2, 3, 16, 16});
    auto t_a = enc.forward(ps, x, true);
    for (double v : t_a->data) REQUIRE(v == 0.0);
}

TEST_CASE("single identity 1x1 stage in eval mode returns the constant input") {
    AppearanceConfig cfg;
    cfg.stages = {{3, 1, 1}};
    cfg.input_h = 4;
    cfg.input_w = 4;
    AppearanceEncoder<double> enc(cfg);
    ParamSet<double> ps;
    // identity 1x1 conv over 3 channels
    auto w = zeros<double>({3, 3, 1, 1});
    for (int c = 0; c < 3; ++c) w->data[c * 3 + c] = 1.0;
    ps.add("app/stage0/conv_w", w);
    ps.add("app/stage0/conv_b", zeros<double>({3}));
    ps.add("app/stage0/bn_g", full<double>({3}, 1.0));
    ps.add("app/stage0/bn_b", zeros<double>({3}));
    // running stats tuned so eval-mode normalization is exactly the identity
    for (auto& v : enc.bn_states()[0].running_var) v = 1.0 - 1e-5;
    const double c = 0.625;
    auto x = full<double>({1, 3, 4, 4}, c);
    auto t_a = enc.forward(ps, x, false);
    for (int ch = 0; ch < 3; ++ch) REQUIRE_THAT(t_a->data[ch], WithinAbs(c, 1e-15));
}

TEST_CASE("appearance encoder rejects wrong spatial size") {
    AppearanceEncoder<double> enc(tiny_appearance());
    ParamSet<double> ps;
    Rng rng(4);
    enc.init_params(ps, rng);
    REQUIRE_THROWS_WITH(enc.forward(ps, zeros<double>({1, 3, 8, 8}), true), ContainsSubstring("1x3x8x8"));
}

TEST_CASE("appearance encoder is batch equivariant in eval mode") {
    AppearanceEncoder<double> enc(tiny_appearance());
    ParamSet<double> ps;
    Rng rng(5);
    enc.init_params(ps, rng);
    Rng stats(6);
    for (auto& st : enc.bn_states()) {
        for (auto& v : st.running_mean) v = 0.1 * stats.normal();
        for (auto& v : st.running_var) v = 0.5 + std::abs(stats.normal());
    }
    Rng data(7);
    auto batch = randn<double>({3, 3, 16, 16}, data);
    auto full_out = enc.forward(ps, batch, false);
    for (std::int64_t i = 0; i < 3; ++i) {
        auto one = zeros<double>({1, 3, 16, 16});
        std::copy_n(batch->data.data() + i * 3 * 16 * 16, 3 * 16 * 16, one->data.data());
        auto row = enc.forward(ps, one, false);
        for (std::int64_t j = 0; j < 8; ++j)
            REQUIRE_THAT(row->data[j], WithinAbs(full_out->at(i, j), 1e-6));
    }
}

TEST_CASE("mini vit output permutes with the batch") {
    SemanticEncoder<double> enc(tiny_vit(), 16, 16);
    ParamSet<double> ps;
    Rng rng(8);
    enc.init_params(ps, rng);
    Rng data(9);
    auto batch = randn<double>({3, 3, 16, 16}, data);
    auto out = enc.forward(ps, batch, {});

    const std::vector<std::int64_t> perm = {2, 0, 1};
    auto shuffled = zeros<double>({3, 3, 16, 16});
    for (std::int64_t i = 0; i < 3; ++i)
        std::copy_n(batch->data.data() + perm[i] * 3 * 16 * 16, 3 * 16 * 16,
                    shuffled->data.data() + i * 3 * 16 * 16);
    auto out2 = enc.forward(ps, shuffled, {});
    for (std::int64_t i = 0; i < 3; ++i)
        for (std::int64_t j = 0; j < 8; ++j) REQUIRE(out2->at(i, j) == out->at(perm[i], j));
}

TEST_CASE("mini vit row is unchanged when the batch is padded") {
    SemanticEncoder<double> enc(tiny_vit(), 16, 16);
    ParamSet<double> ps;
    Rng rng(10);
    enc.init_params(ps, rng);
    Rng data(11);
    auto one = randn<double>({1, 3, 16, 16}, data);
    auto pad = randn<double>({1, 3, 16, 16}, data);
    auto both = zeros<double>({2, 3, 16, 16});
    std::copy_n(one->data.data(), one->numel(), both->data.data());
    std::copy_n(pad->data.data(), pad->numel(), both->data.data() + one->numel());
    auto a = enc.forward(ps, one, {});
    auto b = enc.forward(ps, both, {});
    for (std::int64_t j = 0; j < 8; ++j) REQUIRE(a->at(0, j) == b->at(0, j));
}

TEST_CASE("mini vit gradients flow to every parameter") {
    SemanticEncoder<double> enc(tiny_vit(), 16, 16);
    ParamSet<double> ps;
    Rng rng(12);
    enc.init_params(ps, rng);
    Rng data(13);
    auto batch = randn<double>({2, 3, 16, 16}, data);
    auto rep = grad_check<double>(ps, [&] {
        auto out = enc.forward(ps, batch, {});
        Rng w(14);
        auto weights = randn<double>(out->shape, w);
        return ops::mean_all(ops::mul(out, weights));
    });
    INFO("worst " << rep.worst_param << "[" << rep.worst_index << "]");
    REQUIRE(rep.max_rel_err <= 1e-4);
}

TEST_CASE("random projection is frozen and deterministic") {
    SemanticConfig cfg;
    cfg.mode = SemanticMode::random_projection;
    cfg.d_s = 16;
    cfg.proj_grid = 4;
    cfg.proj_seed = 77;
    SemanticEncoder<double> enc(cfg, 16, 16);
    ParamSet<double> ps;
    Rng rng(15);
    enc.init_params(ps, rng);
    REQUIRE(ps.size() == 0);  // nothing learnable
    Rng data(16);
    auto x = randn<double>({2, 3, 16, 16}, data, 1.0, true);
    auto a = enc.forward(ps, x, {});
    auto b = enc.forward(ps, x, {});
    REQUIRE(a->data == b->data);
    REQUIRE_FALSE(a->requires_grad);

    SemanticEncoder<double> enc2(cfg, 16, 16);
    auto c = enc2.forward(ps, x, {});
    REQUIRE(c->data == a->data);

    cfg.proj_seed = 78;
    SemanticEncoder<double> enc3(cfg, 16, 16);
    auto d = enc3.forward(ps, x, {});
    REQUIRE(d->data != a->data);
}

TEST_CASE("manifest mode returns stored vectors and validates keys") {
    TempFile tf("sem_manifest.jsonl");
    {
        std::ofstream out(tf.path);
        out << R"({"key":"img_a","embedding":[1.0,2.0,3.0]})" << "\n";
        out << R"({"key":"img_b","embedding":[-1.5,0.0,4.25]})" << "\n";
    }
    SemanticConfig cfg;
    cfg.mode = SemanticMode::manifest;
    cfg.d_s = 3;
    cfg.manifest_path = tf.path;
    SemanticEncoder<double> enc(cfg, 16, 16);
    ParamSet<double> ps;
    auto x = zeros<double>({2, 3, 16, 16});
    auto out = enc.forward(ps, x, {"img_b", "img_a"});
    REQUIRE(out->data == std::vector<double>{-1.5, 0.0, 4.25, 1.0, 2.0, 3.0});
    REQUIRE_FALSE(out->requires_grad);
    REQUIRE_THROWS_WITH(enc.forward(ps, x, {"img_a", "missing"}), ContainsSubstring("missing"));
    REQUIRE_THROWS_AS(enc.forward(ps, x, {"img_a"}), shape_error);
}

TEST_CASE("embedding manifest loader rejects duplicates and bad dims") {
    TempFile tf("sem_manifest_bad.jsonl");
    {
        std::ofstream out(tf.path);
        out << R"({"key":"a","embedding":[1.0,2.0]})" << "\n";
        out << R"({"key":"a","embedding":[3.0,4.0]})" << "\n";
    }
    REQUIRE_THROWS_WITH(load_embedding_manifest<double>(tf.path, 2),
                        ContainsSubstring("duplicate") && ContainsSubstring("'a'"));
    {
        std::ofstream out(tf.path);
        out << R"({"key":"a","embedding":[1.0,2.0,3.0]})" << "\n";
    }
    REQUIRE_THROWS_WITH(load_embedding_manifest<double>(tf.path, 2), ContainsSubstring("dim"));
    {
        std::ofstream out(tf.path);
        out << "not json" << "\n";
    }
    REQUIRE_THROWS_WITH(load_embedding_manifest<double>(tf.path, 2), ContainsSubstring("line 1"));
    REQUIRE_THROWS_AS(load_embedding_manifest<double>("/nonexistent/path.jsonl", 2), io_error);
}

TEST_CASE("side info table starts silent and is shared by identical ids") {
    SideInfoConfig cfg;
    cfg.enabled = true;
    cfg.num_cameras = 3;
    cfg.num_viewpoints = 2;
    SideInfo<double> side(cfg);
    ParamSet<double> ps;
    side.init_params(ps, 4);
    auto out = side.embed(ps, {0, 2, 0}, {1, 0, 1}, 4);
    REQUIRE(out->shape == std::vector<std::int64_t>{3, 4});
    for (double v : out->data) REQUIRE(v == 0.0);
    for (std::int64_t j = 0; j < 4; ++j) REQUIRE(out->at(0, j) == out->at(2, j));
}

TEST_CASE("side info gradient lands only on looked-up rows") {
    SideInfoConfig cfg;
    cfg.enabled = true;
    cfg.num_cameras = 2;
    cfg.num_viewpoints = 2;
    SideInfo<double> side(cfg);
    ParamSet<double> ps;
    side.init_params(ps, 3);
    auto out = side.embed(ps, {1, 1}, {0, 0}, 3);  // both hit row 2
    backward(ops::sum_all(out));
    auto table = ps.at("side/table");
    for (std::int64_t r = 0; r < 4; ++r)
        for (std::int64_t j = 0; j < 3; ++j)
            REQUIRE(table->grad[r * 3 + j] == (r == 2 ? 2.0 : 0.0));

    ParamSet<double> ps2;
    side.init_params(ps2, 3);
    Rng rng(20);
    auto& table2 = *ps2.at("side/table");
    for (auto& v : table2.data) v = rng.normal();
    auto rep = grad_check<double>(ps2, [&] {
        auto e = side.embed(ps2, {0, 1}, {1, 0}, 3);
        Rng w(21);
        auto weights = randn<double>(e->shape, w);
        return ops::mean_all(ops::mul(e, weights));
    });
    REQUIRE(rep.max_rel_err <= 1e-6);
}

TEST_CASE("side info rejects out-of-range ids and mismatched lists") {
    SideInfoConfig cfg;
    cfg.enabled = true;
    SideInfo<double> side(cfg);
    ParamSet<double> ps;
    side.init_params(ps, 2);
    REQUIRE_THROWS_WITH(side.embed(ps, {4}, {0}, 2), ContainsSubstring("camera"));
    REQUIRE_THROWS_WITH(side.embed(ps, {0}, {2}, 2), ContainsSubstring("viewpoint"));
    REQUIRE_THROWS_AS(side.embed(ps, {0, 1}, {0}, 2), shape_error);
}

TEST_CASE("disabled side info yields zeros without parameters") {
    SideInfoConfig cfg;
    cfg.enabled = false;
    SideInfo<double> side(cfg);
    ParamSet<double> ps;
    side.init_params(ps, 4);
    REQUIRE(ps.size() == 0);
    auto out = side.embed(ps, {0, 1}, {0, 1}, 4);
    REQUIRE(out->shape == std::vector<std::int64_t>{2, 4});
    for (double v : out->data) REQUIRE(v == 0.0);
}

TEST_CASE("semantic config validation catches bad modes") {
    REQUIRE_THROWS_AS(semantic_mode_from_string("bogus"), config_error);
    SemanticConfig cfg = tiny_vit();
    cfg.d_s = 7;  // not divisible by heads
    REQUIRE_THROWS_AS(SemanticEncoder<double>(cfg, 16, 16), config_error);
    cfg = tiny_vit();
    cfg.patch_size = 5;  // does not divide 16
    REQUIRE_THROWS_AS(SemanticEncoder<double>(cfg, 16, 16), config_error);
    cfg = tiny_vit();
    cfg.mode = SemanticMode::manifest;
    cfg.manifest_path = "";
    REQUIRE_THROWS_AS(SemanticEncoder<double>(cfg, 16, 16), config_error);
}
