#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csen/common.hpp"
#include "csen/data.hpp"
#include "csen/eval.hpp"
#include "csen/losses.hpp"
#include "csen/model.hpp"
#include "csen/train.hpp"

namespace csen {

namespace detail {

// Object reader that tracks which keys were consumed so leftovers can be
// rejected by their dotted path.
class FieldReader {
public:
    FieldReader(const nlohmann::json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
        if (!j_.is_object())
            throw config_error(cat("config node ", prefix_.empty() ? "<root>" : prefix_,
                                   " must be a JSON object"));
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        auto it = j_.find(key);
        if (it == j_.end()) return;
        try {
            it->get_to(out);
        } catch (const nlohmann::json::exception&) {
            throw config_error(cat("config field ", path(key), " has the wrong type"));
        }
    }

    // nullptr when absent; consumed either way
    const nlohmann::json* child(const char* key) {
        seen_.insert(key);
        auto it = j_.find(key);
        return it == j_.end() ? nullptr : &*it;
    }

    void finish() const {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k)) throw config_error(cat("unknown config field \"", path(k), "\""));
    }

    std::string path(const std::string& k) const { return prefix_.empty() ? k : cat(prefix_, ".", k); }

private:
    const nlohmann::json& j_;
    std::string prefix_;
    std::set<std::string> seen_;
};

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace detail

struct PathConfig {
    std::string data;
    std::string out;
};

// Whole-run configuration: one JSON document, every field defaulted, unknown
// fields rejected by dotted name.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    EvalProtocol eval;
    SynthConfig synth;
    PathConfig paths;

    // The shipped default is the full system; reduced variants come from
    // ablation flags or explicit config.
    RunConfig() { model.side.enabled = true; }

    void validate() const {
        model.validate();
        train.validate();
        loss.validate();
        eval.validate();
        synth.validate();
    }

    nlohmann::json to_json() const {
        nlohmann::json stages = nlohmann::json::array();
        for (const auto& s : model.appearance.stages)
            stages.push_back({{"channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride}});
        nlohmann::json j;
        j["model"] = {
            {"appearance",
             {{"stages", stages},
              {"in_channels", model.appearance.in_channels},
              {"input_h", model.appearance.input_h},
              {"input_w", model.appearance.input_w}}},
            {"semantic",
             {{"mode", to_string(model.semantic.mode)},
              {"d_s", model.semantic.d_s},
              {"patch_size", model.semantic.patch_size},
              {"depth", model.semantic.depth},
              {"heads", model.semantic.heads},
              {"mlp_ratio", model.semantic.mlp_ratio},
              {"proj_grid", model.semantic.proj_grid},
              {"proj_seed", model.semantic.proj_seed},
              {"manifest_path", model.semantic.manifest_path}}},
            {"side",
             {{"enabled", model.side.enabled},
              {"num_cameras", model.side.num_cameras},
              {"num_viewpoints", model.side.num_viewpoints}}},
            {"d_f", model.d_f},
            {"groups", model.groups},
            {"num_ids", model.num_ids},
            {"use_sem", model.use_sem},
            {"use_afem", model.use_afem}};
        j["train"] = {{"P", train.P},
                      {"K", train.K},
                      {"epochs", train.epochs},
                      {"lr", train.lr},
                      {"lr_min", train.lr_min},
                      {"scheduler", train.scheduler},
                      {"warmup_epochs", train.warmup_epochs},
                      {"milestones", train.milestones},
                      {"gamma", train.gamma},
                      {"seed", train.seed},
                      {"grad_clip", train.grad_clip},
                      {"precision", train.precision},
                      {"checkpoint_every", train.checkpoint_every},
                      {"aug",
                       {{"hflip", train.aug.hflip},
                        {"hflip_p", train.aug.hflip_p},
                        {"crop", train.aug.crop},
                        {"pad", train.aug.pad},
                        {"erase", train.aug.erase},
                        {"erase_p", train.aug.erase_p},
                        {"erase_min_area", train.aug.erase_min_area},
                        {"erase_max_area", train.aug.erase_max_area},
                        {"erase_random_fill", train.aug.erase_random_fill},
                        {"erase_fill", train.aug.erase_fill}}}};
        j["loss"] = {{"label_smoothing", loss.label_smoothing},
                     {"temperature", loss.temperature},
                     {"contrastive", loss.contrastive},
                     {"triplet_margin", loss.triplet_margin}};
        j["eval"] = {{"metric", eval.metric},
                     {"cross_camera_filter", eval.cross_camera_filter},
                     {"max_rank", eval.max_rank}};
        if (eval.rerank)
            j["eval"]["rerank"] = {{"k1", eval.rr.k1}, {"k2", eval.rr.k2}, {"lambda", eval.rr.lambda}};
        else
            j["eval"]["rerank"] = nullptr;
        j["synth"] = {{"num_ids", synth.num_ids},
                      {"images_per_id", synth.images_per_id},
                      {"image_size", synth.image_size},
                      {"num_cameras", synth.num_cameras},
                      {"num_viewpoints", synth.num_viewpoints},
                      {"palette_size", synth.palette_size},
                      {"motif_kinds", synth.motif_kinds},
                      {"noise_level", synth.noise_level},
                      {"seed", synth.seed}};
        j["paths"] = {{"data", paths.data}, {"out", paths.out}};
        return j;
    }

    static RunConfig from_json(const nlohmann::json& doc) {
        RunConfig rc;
        detail::FieldReader root(doc, "");

        if (const auto* m = root.child("model")) {
            detail::FieldReader rm(*m, "model");
            if (const auto* a = rm.child("appearance")) {
                detail::FieldReader ra(*a, "model.appearance");
                if (const auto* st = ra.child("stages")) {
                    if (!st->is_array())
                        throw config_error("config field model.appearance.stages must be an array");
                    rc.model.appearance.stages.clear();
                    std::size_t idx = 0;
                    for (const auto& e : *st) {
                        detail::FieldReader rs(e, cat("model.appearance.stages[", idx, "]"));
                        ConvStage cs;
                        rs.get("channels", cs.out_channels);
                        rs.get("kernel", cs.kernel);
                        rs.get("stride", cs.stride);
                        rs.finish();
                        rc.model.appearance.stages.push_back(cs);
                        ++idx;
                    }
                }
                ra.get("in_channels", rc.model.appearance.in_channels);
                ra.get("input_h", rc.model.appearance.input_h);
                ra.get("input_w", rc.model.appearance.input_w);
                ra.finish();
            }
            if (const auto* s = rm.child("semantic")) {
                detail::FieldReader rs(*s, "model.semantic");
                std::string mode = to_string(rc.model.semantic.mode);
                rs.get("mode", mode);
                rc.model.semantic.mode = semantic_mode_from_string(mode);
                rs.get("d_s", rc.model.semantic.d_s);
                rs.get("patch_size", rc.model.semantic.patch_size);
                rs.get("depth", rc.model.semantic.depth);
                rs.get("heads", rc.model.semantic.heads);
                rs.get("mlp_ratio", rc.model.semantic.mlp_ratio);
                rs.get("proj_grid", rc.model.semantic.proj_grid);
                rs.get("proj_seed", rc.model.semantic.proj_seed);
                rs.get("manifest_path", rc.model.semantic.manifest_path);
                rs.finish();
            }
            if (const auto* s = rm.child("side")) {
                detail::FieldReader rs(*s, "model.side");
                rs.get("enabled", rc.model.side.enabled);
                rs.get("num_cameras", rc.model.side.num_cameras);
                rs.get("num_viewpoints", rc.model.side.num_viewpoints);
                rs.finish();
            }
            rm.get("d_f", rc.model.d_f);
            rm.get("groups", rc.model.groups);
            rm.get("num_ids", rc.model.num_ids);
            rm.get("use_sem", rc.model.use_sem);
            rm.get("use_afem", rc.model.use_afem);
            rm.finish();
        }

        if (const auto* t = root.child("train")) {
            detail::FieldReader rt(*t, "train");
            rt.get("P", rc.train.P);
            rt.get("K", rc.train.K);
            rt.get("epochs", rc.train.epochs);
            rt.get("lr", rc.train.lr);
            rt.get("lr_min", rc.train.lr_min);
            rt.get("scheduler", rc.train.scheduler);
            rt.get("warmup_epochs", rc.train.warmup_epochs);
            rt.get("milestones", rc.train.milestones);
            rt.get("gamma", rc.train.gamma);
            rt.get("seed", rc.train.seed);
            rt.get("grad_clip", rc.train.grad_clip);
            rt.get("precision", rc.train.precision);
            rt.get("checkpoint_every", rc.train.checkpoint_every);
            if (const auto* a = rt.child("aug")) {
                detail::FieldReader ra(*a, "train.aug");
                ra.get("hflip", rc.train.aug.hflip);
                ra.get("hflip_p", rc.train.aug.hflip_p);
                ra.get("crop", rc.train.aug.crop);
                ra.get("pad", rc.train.aug.pad);
                ra.get("erase", rc.train.aug.erase);
                ra.get("erase_p", rc.train.aug.erase_p);
                ra.get("erase_min_area", rc.train.aug.erase_min_area);
                ra.get("erase_max_area", rc.train.aug.erase_max_area);
                ra.get("erase_random_fill", rc.train.aug.erase_random_fill);
                ra.get("erase_fill", rc.train.aug.erase_fill);
                ra.finish();
            }
            rt.finish();
        }

        if (const auto* l = root.child("loss")) {
            detail::FieldReader rl(*l, "loss");
            rl.get("label_smoothing", rc.loss.label_smoothing);
            rl.get("temperature", rc.loss.temperature);
            rl.get("contrastive", rc.loss.contrastive);
            rl.get("triplet_margin", rc.loss.triplet_margin);
            rl.finish();
        }

        if (const auto* e = root.child("eval")) {
            detail::FieldReader re(*e, "eval");
            re.get("metric", rc.eval.metric);
            re.get("cross_camera_filter", rc.eval.cross_camera_filter);
            re.get("max_rank", rc.eval.max_rank);
            if (const auto* r = re.child("rerank")) {
                if (r->is_null()) {
                    rc.eval.rerank = false;
                } else {
                    rc.eval.rerank = true;
                    detail::FieldReader rr(*r, "eval.rerank");
                    rr.get("k1", rc.eval.rr.k1);
                    rr.get("k2", rc.eval.rr.k2);
                    rr.get("lambda", rc.eval.rr.lambda);
                    rr.finish();
                }
            }
            re.finish();
        }

        if (const auto* s = root.child("synth")) {
            detail::FieldReader rs(*s, "synth");
            rs.get("num_ids", rc.synth.num_ids);
            rs.get("images_per_id", rc.synth.images_per_id);
            rs.get("image_size", rc.synth.image_size);
            rs.get("num_cameras", rc.synth.num_cameras);
            rs.get("num_viewpoints", rc.synth.num_viewpoints);
            rs.get("palette_size", rc.synth.palette_size);
            rs.get("motif_kinds", rc.synth.motif_kinds);
            rs.get("noise_level", rc.synth.noise_level);
            rs.get("seed", rc.synth.seed);
            rs.finish();
        }

        if (const auto* p = root.child("paths")) {
            detail::FieldReader rp(*p, "paths");
            rp.get("data", rc.paths.data);
            rp.get("out", rc.paths.out);
            rp.finish();
        }

        root.finish();
        return rc;
    }
};

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw io_error(cat("cannot open config file ", path));
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw config_error(cat("config file ", path, " is not valid JSON: ", e.what()));
    }
    return RunConfig::from_json(doc);
}

// Applies one "dotted.path=value" override to a config document. The value is
// parsed as JSON when possible and falls back to a plain string; setting a
// path under eval.rerank while it is null promotes it to the default object.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw config_error(cat("override \"", assignment, "\" must look like path.to.field=value"));
    const std::string dotted = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    std::vector<std::string> parts;
    std::stringstream ss(dotted);
    std::string part;
    while (std::getline(ss, part, '.')) {
        if (part.empty()) throw config_error(cat("override path \"", dotted, "\" has an empty segment"));
        parts.push_back(part);
    }

    nlohmann::json* node = &doc;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        node = &(*node)[parts[i]];
        if (!node->is_object()) {
            if (node->is_null())
                *node = nlohmann::json::object();
            else
                throw config_error(cat("override path \"", dotted, "\" descends into a non-object"));
        }
    }
    (*node)[parts.back()] = value;
}

// Resolution order: built-in defaults, then the config file, then --set
// overrides in argument order. Returns the validated config.
inline RunConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& overrides) {
    nlohmann::json doc = RunConfig{}.to_json();
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw io_error(cat("cannot open config file ", config_path));
        nlohmann::json user;
        try {
            user = nlohmann::json::parse(in);
        } catch (const nlohmann::json::exception& e) {
            throw config_error(cat("config file ", config_path, " is not valid JSON: ", e.what()));
        }
        doc.merge_patch(user);
    }
    for (const auto& o : overrides) apply_override(doc, o);
    auto rc = RunConfig::from_json(doc);
    rc.validate();
    return rc;
}

// Stable fingerprint of the resolved config (16 hex digits).
// The run's identity: everything that shapes results. Paths are environmental
// and excluded, so the same experiment hashes identically wherever it lands.
inline nlohmann::json config_identity(const RunConfig& rc) {
    auto j = rc.to_json();
    j.erase("paths");
    return j;
}

inline std::string config_hash(const RunConfig& rc) {
    const std::uint64_t h = detail::fnv1a64(config_identity(rc).dump());
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace csen
