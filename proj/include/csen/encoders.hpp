#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csen/common.hpp"
#include "csen/ops.hpp"
#include "csen/rng.hpp"
#include "csen/tensor.hpp"

namespace csen {

// ---------------------------------------------------------------------------
// appearance encoder: conv stages (conv -> BN -> ReLU) then global average pool
// ---------------------------------------------------------------------------

struct ConvStage {
    std::int64_t out_channels = 0;
    std::int64_t kernel = 3;
    std::int64_t stride = 2;
};

struct AppearanceConfig {
    std::vector<ConvStage> stages{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}, {128, 3, 2}};
    std::int64_t in_channels = 3;
    std::int64_t input_h = 64;
    std::int64_t input_w = 64;

    std::int64_t d_a() const { return stages.back().out_channels; }

    void validate() const {
        if (stages.empty()) throw config_error("appearance encoder needs at least one conv stage");
        for (const auto& s : stages) {
            if (s.out_channels < 1) throw config_error("conv stage out_channels must be >= 1");
            if (s.kernel < 1 || s.stride < 1) throw config_error("conv stage kernel/stride must be >= 1");
        }
        if (input_h < 1 || input_w < 1) throw config_error("appearance input size must be positive");
    }
};

template <typename S>
class AppearanceEncoder {
public:
    explicit AppearanceEncoder(AppearanceConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        for (const auto& s : cfg_.stages) bn_.emplace_back(s.out_channels);
    }

    void init_params(ParamSet<S>& ps, Rng& rng) const {
        std::int64_t cin = cfg_.in_channels;
        for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
            const auto& st = cfg_.stages[i];
            const std::string p = cat("app/stage", i, "/");
            const S stddev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(cin * st.kernel * st.kernel)));
            ps.add(p + "conv_w", randn<S>({st.out_channels, cin, st.kernel, st.kernel}, rng, stddev));
            ps.add(p + "conv_b", zeros<S>({st.out_channels}));
            ps.add(p + "bn_g", full<S>({st.out_channels}, S(1)));
            ps.add(p + "bn_b", zeros<S>({st.out_channels}));
            cin = st.out_channels;
        }
    }

    TensorPtr<S> forward(const ParamSet<S>& ps, const TensorPtr<S>& images, bool train) {
        if (images->shape.size() != 4 || images->shape[1] != cfg_.in_channels ||
            images->shape[2] != cfg_.input_h || images->shape[3] != cfg_.input_w)
            throw shape_error(cat("appearance encoder expects Nx", cfg_.in_channels, "x", cfg_.input_h, "x",
                                  cfg_.input_w, ", got ", shape_str(images->shape)));
        auto x = images;
        for (std::size_t i = 0; i < cfg_.stages.size(); ++i) {
            const auto& st = cfg_.stages[i];
            const std::string p = cat("app/stage", i, "/");
            x = ops::conv2d(x, ps.at(p + "conv_w"), ps.at(p + "conv_b"), st.stride, st.kernel / 2);
            x = ops::batch_norm2d(x, ps.at(p + "bn_g"), ps.at(p + "bn_b"), bn_[i], train);
            x = ops::relu(x);
        }
        return ops::global_avg_pool(x);
    }

    const AppearanceConfig& config() const { return cfg_; }
    std::vector<ops::BNState<S>>& bn_states() { return bn_; }

private:
    AppearanceConfig cfg_;
    std::vector<ops::BNState<S>> bn_;
};

// ---------------------------------------------------------------------------
// semantic encoder: miniature ViT, frozen random projection, or manifest lookup
// ---------------------------------------------------------------------------

enum class SemanticMode { mini_vit, random_projection, manifest };

inline SemanticMode semantic_mode_from_string(const std::string& s) {
    if (s == "mini_vit") return SemanticMode::mini_vit;
    if (s == "random_projection") return SemanticMode::random_projection;
    if (s == "manifest") return SemanticMode::manifest;
    throw config_error(cat("unknown semantic encoder mode '", s, "'"));
}

inline std::string to_string(SemanticMode m) {
    switch (m) {
        case SemanticMode::mini_vit: return "mini_vit";
        case SemanticMode::random_projection: return "random_projection";
        case SemanticMode::manifest: return "manifest";
    }
    return "?";
}

struct SemanticConfig {
    SemanticMode mode = SemanticMode::mini_vit;
    std::int64_t d_s = 64;
    // mini_vit
    std::int64_t patch_size = 8;
    std::int64_t depth = 2;
    std::int64_t heads = 2;
    std::int64_t mlp_ratio = 2;
    // random_projection
    std::int64_t proj_grid = 8;
    std::uint64_t proj_seed = 7;
    // manifest
    std::string manifest_path;

    void validate() const {
        if (d_s < 1) throw config_error("semantic d_s must be >= 1");
        switch (mode) {
            case SemanticMode::mini_vit:
                if (patch_size < 1 || depth < 1 || heads < 1 || mlp_ratio < 1)
                    throw config_error("mini_vit needs positive patch_size/depth/heads/mlp_ratio");
                if (d_s % heads != 0)
                    throw config_error(cat("mini_vit d_s ", d_s, " not divisible by ", heads, " heads"));
                break;
            case SemanticMode::random_projection:
                if (proj_grid < 1) throw config_error("random_projection grid must be >= 1");
                break;
            case SemanticMode::manifest:
                if (manifest_path.empty()) throw config_error("manifest mode requires manifest_path");
                break;
        }
    }
};

// JSON-lines embedding store: {"key": string, "embedding": [reals]} per line.
template <typename S>
std::map<std::string, std::vector<S>> load_embedding_manifest(const std::string& path,
                                                              std::int64_t expect_dim) {
    std::ifstream in(path);
    if (!in) throw io_error(cat("cannot open embedding manifest '", path, "'"));
    std::map<std::string, std::vector<S>> store;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw data_error(cat("embedding manifest ", path, " line ", lineno, ": ", e.what()));
        }
        if (!j.contains("key") || !j.contains("embedding"))
            throw data_error(cat("embedding manifest ", path, " line ", lineno, ": missing key/embedding"));
        std::string key = j["key"].get<std::string>();
        std::vector<S> vec;
        for (const auto& v : j["embedding"]) vec.push_back(static_cast<S>(v.get<double>()));
        if (static_cast<std::int64_t>(vec.size()) != expect_dim)
            throw data_error(cat("embedding manifest ", path, " line ", lineno, ": key '", key, "' has dim ",
                                 vec.size(), ", expected ", expect_dim));
        if (!store.emplace(std::move(key), std::move(vec)).second)
            throw data_error(cat("embedding manifest ", path, " line ", lineno, ": duplicate key '",
                                 j["key"].get<std::string>(), "'"));
    }
    return store;
}

template <typename S>
class SemanticEncoder {
public:
    SemanticEncoder(SemanticConfig cfg, std::int64_t input_h, std::int64_t input_w)
        : cfg_(std::move(cfg)), input_h_(input_h), input_w_(input_w) {
        cfg_.validate();
        switch (cfg_.mode) {
            case SemanticMode::mini_vit: {
                if (input_h_ % cfg_.patch_size != 0 || input_w_ % cfg_.patch_size != 0)
                    throw config_error(cat("input ", input_h_, "x", input_w_, " not divisible by patch size ",
                                           cfg_.patch_size));
                tokens_ = (input_h_ / cfg_.patch_size) * (input_w_ / cfg_.patch_size);
                break;
            }
            case SemanticMode::random_projection: {
                if (input_h_ % cfg_.proj_grid != 0 || input_w_ % cfg_.proj_grid != 0)
                    throw config_error(cat("input ", input_h_, "x", input_w_, " not divisible by grid ",
                                           cfg_.proj_grid));
                const std::int64_t flat = 3 * cfg_.proj_grid * cfg_.proj_grid;
                Rng rng(cfg_.proj_seed);
                const S stddev = static_cast<S>(std::sqrt(1.0 / static_cast<double>(flat)));
                proj_w_ = randn<S>({flat, cfg_.d_s}, rng, stddev);
                break;
            }
            case SemanticMode::manifest:
                store_ = load_embedding_manifest<S>(cfg_.manifest_path, cfg_.d_s);
                break;
        }
    }

    void init_params(ParamSet<S>& ps, Rng& rng) const {
        if (cfg_.mode != SemanticMode::mini_vit) return;  // other modes are frozen
        const std::int64_t d = cfg_.d_s, pd = 3 * cfg_.patch_size * cfg_.patch_size;
        const S wstd = static_cast<S>(std::sqrt(2.0 / static_cast<double>(pd + d)));
        ps.add("sem/patch_w", randn<S>({pd, d}, rng, wstd));
        ps.add("sem/patch_b", zeros<S>({d}));
        ps.add("sem/cls_token", randn<S>({d}, rng, S(0.02)));
        ps.add("sem/pos", randn<S>({tokens_ + 1, d}, rng, S(0.02)));
        const S astd = static_cast<S>(std::sqrt(2.0 / static_cast<double>(2 * d)));
        for (std::int64_t l = 0; l < cfg_.depth; ++l) {
            const std::string p = cat("sem/block", l, "/");
            ps.add(p + "ln1_g", full<S>({d}, S(1)));
            ps.add(p + "ln1_b", zeros<S>({d}));
            for (const char* nm : {"wq", "wk", "wv", "wo"}) ps.add(p + nm, randn<S>({d, d}, rng, astd));
            // no key bias: a per-key constant shifts each query's logits
            // uniformly, so softmax cancels it exactly
            for (const char* nm : {"bq", "bv", "bo"}) ps.add(p + nm, zeros<S>({d}));
            ps.add(p + "ln2_g", full<S>({d}, S(1)));
            ps.add(p + "ln2_b", zeros<S>({d}));
            const std::int64_t hidden = d * cfg_.mlp_ratio;
            ps.add(p + "mlp_w1", randn<S>({d, hidden}, rng,
                                          static_cast<S>(std::sqrt(2.0 / static_cast<double>(d)))));
            ps.add(p + "mlp_b1", zeros<S>({hidden}));
            ps.add(p + "mlp_w2", randn<S>({hidden, d}, rng,
                                          static_cast<S>(std::sqrt(2.0 / static_cast<double>(hidden)))));
            ps.add(p + "mlp_b2", zeros<S>({d}));
        }
        ps.add("sem/ln_out_g", full<S>({d}, S(1)));
        ps.add("sem/ln_out_b", zeros<S>({d}));
    }

    TensorPtr<S> forward(const ParamSet<S>& ps, const TensorPtr<S>& images,
                         const std::vector<std::string>& keys) const {
        switch (cfg_.mode) {
            case SemanticMode::mini_vit: return forward_vit(ps, images);
            case SemanticMode::random_projection: return forward_proj(images);
            case SemanticMode::manifest: return forward_manifest(images, keys);
        }
        throw error("unreachable semantic mode");
    }

    const SemanticConfig& config() const { return cfg_; }

private:
    // linear over the last dim of an NxTxD tensor
    static TensorPtr<S> linear3d(const TensorPtr<S>& x, const TensorPtr<S>& w, const TensorPtr<S>& b) {
        const std::int64_t n = x->shape[0], t = x->shape[1], d = x->shape[2];
        auto flat = ops::reshape(x, {n * t, d});
        auto y = ops::linear(flat, w, b);
        return ops::reshape(y, {n, t, y->shape[1]});
    }

    TensorPtr<S> forward_vit(const ParamSet<S>& ps, const TensorPtr<S>& images) const {
        const std::int64_t d = cfg_.d_s;
        auto patches = ops::extract_patches(images, cfg_.patch_size);
        auto x = linear3d(patches, ps.at("sem/patch_w"), ps.at("sem/patch_b"));
        x = ops::prepend_token(ps.at("sem/cls_token"), x);
        x = ops::add_position(x, ps.at("sem/pos"));
        const std::int64_t n = x->shape[0], t = x->shape[1];
        const S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(d / cfg_.heads)));
        for (std::int64_t l = 0; l < cfg_.depth; ++l) {
            const std::string p = cat("sem/block", l, "/");
            auto flat = ops::reshape(x, {n * t, d});
            auto h = ops::layer_norm(flat, ps.at(p + "ln1_g"), ps.at(p + "ln1_b"));
            auto q = ops::split_heads(ops::reshape(ops::linear(h, ps.at(p + "wq"), ps.at(p + "bq")), {n, t, d}),
                                      cfg_.heads);
            auto k = ops::split_heads(ops::reshape(ops::matmul(h, ps.at(p + "wk")), {n, t, d}), cfg_.heads);
            auto v = ops::split_heads(ops::reshape(ops::linear(h, ps.at(p + "wv"), ps.at(p + "bv")), {n, t, d}),
                                      cfg_.heads);
            auto att = ops::softmax_lastdim(ops::scale(ops::bmm_nt(q, k), att_scale));
            auto mixed = ops::merge_heads(ops::bmm_nn(att, v), cfg_.heads);
            auto proj = linear3d(mixed, ps.at(p + "wo"), ps.at(p + "bo"));
            x = ops::add(x, proj);
            auto flat2 = ops::reshape(x, {n * t, d});
            auto h2 = ops::layer_norm(flat2, ps.at(p + "ln2_g"), ps.at(p + "ln2_b"));
            auto mid = ops::gelu(ops::linear(h2, ps.at(p + "mlp_w1"), ps.at(p + "mlp_b1")));
            auto mlp = ops::reshape(ops::linear(mid, ps.at(p + "mlp_w2"), ps.at(p + "mlp_b2")), {n, t, d});
            x = ops::add(x, mlp);
        }
        auto cls = ops::select_token(x, 0);
        return ops::layer_norm(cls, ps.at("sem/ln_out_g"), ps.at("sem/ln_out_b"));
    }

    TensorPtr<S> forward_proj(const TensorPtr<S>& images) const {
        NoGradGuard ng;
        const std::int64_t n = images->shape[0], g = cfg_.proj_grid;
        const std::int64_t h = images->shape[2], w = images->shape[3];
        const std::int64_t bh = h / g, bw = w / g;
        auto pooled = zeros<S>({n, 3 * g * g});
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t gy = 0; gy < g; ++gy)
                    for (std::int64_t gx = 0; gx < g; ++gx) {
                        S acc = S(0);
                        for (std::int64_t y = gy * bh; y < (gy + 1) * bh; ++y)
                            for (std::int64_t x = gx * bw; x < (gx + 1) * bw; ++x)
                                acc += images->data[((i * 3 + c) * h + y) * w + x];
                        pooled->data[i * 3 * g * g + (c * g + gy) * g + gx] =
                            acc / static_cast<S>(bh * bw);
                    }
        auto out = zeros<S>({n, cfg_.d_s});
        gemm_nn(n, cfg_.d_s, 3 * g * g, pooled->data.data(), proj_w_->data.data(), out->data.data());
        return out;
    }

    TensorPtr<S> forward_manifest(const TensorPtr<S>& images, const std::vector<std::string>& keys) const {
        const std::int64_t n = images->shape[0];
        if (static_cast<std::int64_t>(keys.size()) != n)
            throw shape_error(cat("manifest semantic encoder got ", keys.size(), " keys for ", n, " images"));
        auto out = zeros<S>({n, cfg_.d_s});
        for (std::int64_t i = 0; i < n; ++i) {
            auto it = store_.find(keys[i]);
            if (it == store_.end())
                throw data_error(cat("embedding manifest has no entry for key '", keys[i], "'"));
            std::copy(it->second.begin(), it->second.end(), out->data.begin() + i * cfg_.d_s);
        }
        return out;
    }

    SemanticConfig cfg_;
    std::int64_t input_h_;
    std::int64_t input_w_;
    std::int64_t tokens_ = 0;
    TensorPtr<S> proj_w_;                          // frozen, not in the ParamSet
    std::map<std::string, std::vector<S>> store_;  // manifest mode
};

// ---------------------------------------------------------------------------
// camera/viewpoint side information: one joint learnable table, zero at init
// ---------------------------------------------------------------------------

struct SideInfoConfig {
    bool enabled = false;
    std::int64_t num_cameras = 4;
    std::int64_t num_viewpoints = 2;

    void validate() const {
        if (num_cameras < 1 || num_viewpoints < 1)
            throw config_error("side info table needs positive camera/viewpoint counts");
    }
};

template <typename S>
class SideInfo {
public:
    explicit SideInfo(SideInfoConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    void init_params(ParamSet<S>& ps, std::int64_t d_f) const {
        if (!cfg_.enabled) return;
        ps.add("side/table", zeros<S>({cfg_.num_cameras * cfg_.num_viewpoints, d_f}));
    }

    // Row n = table[cam_n * num_viewpoints + view_n]; zero matrix when disabled.
    TensorPtr<S> embed(const ParamSet<S>& ps, const std::vector<std::int64_t>& camera_ids,
                       const std::vector<std::int64_t>& viewpoint_ids, std::int64_t d_f) const {
        if (camera_ids.size() != viewpoint_ids.size())
            throw shape_error(cat("side info: ", camera_ids.size(), " camera ids vs ", viewpoint_ids.size(),
                                  " viewpoint ids"));
        const auto n = static_cast<std::int64_t>(camera_ids.size());
        if (!cfg_.enabled) return zeros<S>({n, d_f});
        std::vector<std::int64_t> rows(camera_ids.size());
        for (std::size_t i = 0; i < camera_ids.size(); ++i) {
            if (camera_ids[i] < 0 || camera_ids[i] >= cfg_.num_cameras)
                throw error(cat("camera id ", camera_ids[i], " out of range [0,", cfg_.num_cameras, ")"));
            if (viewpoint_ids[i] < 0 || viewpoint_ids[i] >= cfg_.num_viewpoints)
                throw error(cat("viewpoint id ", viewpoint_ids[i], " out of range [0,", cfg_.num_viewpoints, ")"));
            rows[i] = camera_ids[i] * cfg_.num_viewpoints + viewpoint_ids[i];
        }
        return ops::embed_rows(ps.at("side/table"), rows);
    }

    const SideInfoConfig& config() const { return cfg_; }

private:
    SideInfoConfig cfg_;
};

// Free-function form of the side-information lookup.
template <typename S>
TensorPtr<S> side_info_embed(const ParamSet<S>& ps, const SideInfo<S>& side,
                             const std::vector<std::int64_t>& camera_ids,
                             const std::vector<std::int64_t>& viewpoint_ids, std::int64_t d_f) {
    return side.embed(ps, camera_ids, viewpoint_ids, d_f);
}

}  // namespace csen
