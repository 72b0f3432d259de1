#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "csen/common.hpp"
#include "csen/encoders.hpp"
#include "csen/fusion.hpp"
#include "csen/losses.hpp"
#include "csen/ops.hpp"
#include "csen/rng.hpp"
#include "csen/tensor.hpp"

namespace csen {

struct ModelConfig {
    AppearanceConfig appearance;
    SemanticConfig semantic;
    SideInfoConfig side;
    std::int64_t d_f = 256;
    std::int64_t groups = 32;
    std::int64_t num_ids = 2;
    bool use_sem = true;
    bool use_afem = true;

    void validate() const {
        appearance.validate();
        if (use_sem) semantic.validate();
        side.validate();
        if (d_f < 1) throw config_error("d_f must be >= 1");
        if (num_ids < 2) throw config_error(cat("num_ids must be >= 2, got ", num_ids));
        if (use_afem && !use_sem) throw config_error("adaptive enhancement requires the semantic branch");
        if (use_sem && use_afem && d_f % groups != 0)
            throw config_error(cat("d_f ", d_f, " not divisible by ", groups, " groups"));
    }
};

template <typename S>
struct BatchInput {
    TensorPtr<S> images;  // N x 3 x H x W
    std::vector<std::string> keys;
    std::vector<std::int64_t> labels;
    std::vector<std::int64_t> camera_ids;
    std::vector<std::int64_t> viewpoint_ids;
};

template <typename S>
struct FeatureBundle {
    TensorPtr<S> t_a;      // appearance
    TensorPtr<S> t_s;      // raw semantic (null when branch disabled)
    TensorPtr<S> t_u;      // fused
    TensorPtr<S> t_sp;     // enhanced semantic
    TensorPtr<S> t;        // final representation
    TensorPtr<S> logits;
};

template <typename S>
class Model {
public:
    explicit Model(ModelConfig cfg)
        : cfg_(std::move(cfg)),
          app_(cfg_.appearance),
          fusion_(cfg_.use_sem ? cfg_.semantic.d_s : 0, cfg_.appearance.d_a(), cfg_.d_f),
          side_(cfg_.side),
          cls_(cfg_.d_f, cfg_.num_ids) {
        cfg_.validate();
        if (cfg_.use_sem)
            sem_.emplace(cfg_.semantic, cfg_.appearance.input_h, cfg_.appearance.input_w);
        if (cfg_.use_sem && cfg_.use_afem) afem_.emplace(cfg_.semantic.d_s, cfg_.d_f, cfg_.groups);
    }

    // Parameter creation order is fixed so a seeded rng yields identical
    // initializations across runs.
    void init_params(ParamSet<S>& ps, Rng& rng) const {
        app_.init_params(ps, rng);
        if (sem_) sem_->init_params(ps, rng);
        fusion_.init_params(ps, rng);
        if (afem_) afem_->init_params(ps, rng);
        side_.init_params(ps, cfg_.d_f);
        cls_.init_params(ps, rng);
    }

    FeatureBundle<S> forward(const ParamSet<S>& ps, const BatchInput<S>& batch, bool train) {
        FeatureBundle<S> out;
        out.t_a = app_.forward(ps, batch.images, train);
        const std::int64_t n = out.t_a->shape[0];
        if (sem_) {
            out.t_s = sem_->forward(ps, batch.images, batch.keys);
            out.t_u = fusion_.fuse(ps, out.t_s, out.t_a);
        } else {
            out.t_u = ops::linear_forward(out.t_a, ps.at("fuse/w"), ps.at("fuse/b"));
        }
        if (afem_) {
            out.t_sp = afem_->forward(ps, out.t_s, train);
        } else {
            out.t_sp = zeros<S>({n, cfg_.d_f});
        }
        auto side = side_.embed(ps, batch.camera_ids, batch.viewpoint_ids, cfg_.d_f);
        out.t = final_feature(out.t_u, out.t_sp, side);
        out.logits = cls_.classify(ps, out.t);
        return out;
    }

    const ModelConfig& config() const { return cfg_; }

    // Named running statistics for checkpointing, in deterministic order.
    std::vector<std::pair<std::string, ops::BNState<S>*>> stats() {
        std::vector<std::pair<std::string, ops::BNState<S>*>> out;
        auto& app_bn = app_.bn_states();
        for (std::size_t i = 0; i < app_bn.size(); ++i)
            out.emplace_back(cat("app/stage", i, "/bn"), &app_bn[i]);
        if (afem_) out.emplace_back("afem/bn", &afem_->bn_state());
        return out;
    }

private:
    ModelConfig cfg_;
    AppearanceEncoder<S> app_;
    std::optional<SemanticEncoder<S>> sem_;
    FusionHead<S> fusion_;
    std::optional<Afem<S>> afem_;
    SideInfo<S> side_;
    Classifier<S> cls_;
};

}  // namespace csen
