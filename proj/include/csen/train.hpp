#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csen/common.hpp"
#include "csen/data.hpp"
#include "csen/losses.hpp"
#include "csen/model.hpp"
#include "csen/ops.hpp"
#include "csen/rng.hpp"
#include "csen/tensor.hpp"

namespace csen {

// ---------------------------------------------------------------------------
// PK identity sampler
// ---------------------------------------------------------------------------

// One epoch of batches. Each batch holds P*K dataset indices grouped by id;
// the id order is a fresh rng permutation, ids that do not fill a final batch
// are dropped, and ids with fewer than K images are sampled with replacement.
inline std::vector<std::vector<std::int64_t>> pk_sample(const Dataset& ds, std::int64_t P,
                                                        std::int64_t K, Rng& rng) {
    if (P < 1 || K < 1) throw config_error("pk_sample: P and K must be >= 1");
    std::map<std::int64_t, std::vector<std::int64_t>> by_id;
    for (std::size_t i = 0; i < ds.size(); ++i)
        by_id[ds[i].id].push_back(static_cast<std::int64_t>(i));

    const auto num_ids = static_cast<std::int64_t>(by_id.size());
    if (num_ids < P)
        throw data_error(cat("pk_sample needs at least ", P, " identities, dataset has ", num_ids));

    std::vector<std::int64_t> perm;
    perm.reserve(by_id.size());
    for (const auto& [id, _] : by_id) perm.push_back(id);
    rng.shuffle(perm);

    std::vector<std::vector<std::int64_t>> batches;
    for (std::int64_t b = 0; b + P <= num_ids; b += P) {
        std::vector<std::int64_t> batch;
        batch.reserve(static_cast<std::size_t>(P * K));
        for (std::int64_t p = 0; p < P; ++p) {
            const auto& pool = by_id.at(perm[static_cast<std::size_t>(b + p)]);
            if (static_cast<std::int64_t>(pool.size()) >= K) {
                std::vector<std::int64_t> picks = pool;
                rng.shuffle(picks);
                batch.insert(batch.end(), picks.begin(), picks.begin() + K);
            } else {
                for (std::int64_t k = 0; k < K; ++k)
                    batch.push_back(pool[static_cast<std::size_t>(
                        rng.uniform_int(static_cast<std::int64_t>(pool.size())))]);
            }
        }
        batches.push_back(std::move(batch));
    }
    return batches;
}

// ---------------------------------------------------------------------------
// augmentation
// ---------------------------------------------------------------------------

struct AugmentConfig {
    bool hflip = true;
    double hflip_p = 0.5;
    bool crop = true;
    std::int64_t pad = 10;
    bool erase = true;
    double erase_p = 0.5;
    double erase_min_area = 0.02;
    double erase_max_area = 0.40;
    bool erase_random_fill = true;  // uniform [0,1) per pixel; otherwise erase_fill
    double erase_fill = 0.5;

    bool any() const { return hflip || crop || erase; }

    void validate() const {
        if (hflip_p < 0 || hflip_p > 1 || erase_p < 0 || erase_p > 1)
            throw config_error("augment probabilities must be in [0,1]");
        if (pad < 0) throw config_error("augment pad must be >= 0");
        if (erase_min_area <= 0 || erase_max_area > 1 || erase_min_area > erase_max_area)
            throw config_error("augment erase area range must satisfy 0 < min <= max <= 1");
    }
};

// Applies, in order: horizontal flip, zero-pad-and-random-crop, random
// erasing. All randomness comes from the passed rng, so a seed fixes the
// output. Input is one 3xHxW image; the result is a fresh tensor.
template <typename S>
TensorPtr<S> augment(const TensorPtr<S>& image, Rng& rng, const AugmentConfig& cfg) {
    cfg.validate();
    if (image->shape.size() != 3 || image->shape[0] != 3)
        throw shape_error(cat("augment expects a 3xHxW image, got ", shape_str(image->shape)));
    const std::int64_t h = image->shape[1], w = image->shape[2];
    auto out = make_tensor<S>(image->shape, image->data);

    if (cfg.hflip && rng.uniform() < cfg.hflip_p) {
        for (std::int64_t c = 0; c < 3; ++c)
            for (std::int64_t y = 0; y < h; ++y) {
                S* row = out->data.data() + (c * h + y) * w;
                for (std::int64_t x = 0; x < w / 2; ++x) std::swap(row[x], row[w - 1 - x]);
            }
    }

    if (cfg.crop && cfg.pad > 0) {
        const std::int64_t dy = rng.uniform_int(2 * cfg.pad + 1) - cfg.pad;
        const std::int64_t dx = rng.uniform_int(2 * cfg.pad + 1) - cfg.pad;
        if (dy != 0 || dx != 0) {
            std::vector<S> shifted(out->data.size(), S(0));
            for (std::int64_t c = 0; c < 3; ++c)
                for (std::int64_t y = 0; y < h; ++y) {
                    const std::int64_t sy = y + dy;
                    if (sy < 0 || sy >= h) continue;
                    for (std::int64_t x = 0; x < w; ++x) {
                        const std::int64_t sx = x + dx;
                        if (sx < 0 || sx >= w) continue;
                        shifted[static_cast<std::size_t>((c * h + y) * w + x)] =
                            out->data[static_cast<std::size_t>((c * h + sy) * w + sx)];
                    }
                }
            out->data = std::move(shifted);
        }
    }

    if (cfg.erase && rng.uniform() < cfg.erase_p) {
        for (int attempt = 0; attempt < 10; ++attempt) {
            const double frac = rng.uniform(cfg.erase_min_area, cfg.erase_max_area);
            const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
            const double area = frac * static_cast<double>(h * w);
            const auto eh = static_cast<std::int64_t>(std::lround(std::sqrt(area * aspect)));
            const auto ew = static_cast<std::int64_t>(std::lround(std::sqrt(area / aspect)));
            if (eh < 1 || ew < 1 || eh > h || ew > w) continue;
            const std::int64_t y0 = rng.uniform_int(h - eh + 1);
            const std::int64_t x0 = rng.uniform_int(w - ew + 1);
            for (std::int64_t y = y0; y < y0 + eh; ++y)
                for (std::int64_t x = x0; x < x0 + ew; ++x)
                    for (std::int64_t c = 0; c < 3; ++c)
                        out->data[static_cast<std::size_t>((c * h + y) * w + x)] =
                            cfg.erase_random_fill ? static_cast<S>(rng.uniform())
                                                  : static_cast<S>(cfg.erase_fill);
            break;
        }
    }
    return out;
}

// In-place augmentation of every image in an NxCxHxW batch, in index order.
template <typename S>
void augment_batch(TensorPtr<S>& batch, Rng& rng, const AugmentConfig& cfg) {
    if (!cfg.any()) return;
    const std::int64_t n = batch->shape[0];
    const std::int64_t per = batch->shape[1] * batch->shape[2] * batch->shape[3];
    for (std::int64_t i = 0; i < n; ++i) {
        auto img = make_tensor<S>({batch->shape[1], batch->shape[2], batch->shape[3]},
                                  std::vector<S>(batch->data.begin() + i * per,
                                                 batch->data.begin() + (i + 1) * per));
        auto aug = augment(img, rng, cfg);
        std::copy(aug->data.begin(), aug->data.end(), batch->data.begin() + i * per);
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

template <typename S>
struct AdamState {
    S beta1 = static_cast<S>(0.9);
    S beta2 = static_cast<S>(0.999);
    S eps = static_cast<S>(1e-8);
    std::int64_t step = 0;
    std::map<std::string, std::vector<S>> m;
    std::map<std::string, std::vector<S>> v;
};

// Bias-corrected update. Gradients are validated before anything mutates, so
// a non-finite gradient aborts the step with parameters and state untouched.
template <typename S>
void adam_step(ParamSet<S>& ps, AdamState<S>& st, S lr) {
    for (const auto& [name, p] : ps) {
        if (p->grad.empty()) continue;
        for (S g : p->grad)
            if (!std::isfinite(static_cast<double>(g)))
                throw error(cat("non-finite gradient for parameter ", name, "; step aborted"));
    }

    ++st.step;
    const S bc1 = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta1), st.step));
    const S bc2 = S(1) - static_cast<S>(std::pow(static_cast<double>(st.beta2), st.step));
    for (auto& [name, p] : ps) {
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m.assign(p->data.size(), S(0));
        if (v.empty()) v.assign(p->data.size(), S(0));
        if (m.size() != p->data.size())
            throw shape_error(cat("optimizer state for ", name, " has ", m.size(),
                                  " entries, parameter has ", p->data.size()));
        for (std::size_t i = 0; i < p->data.size(); ++i) {
            const S g = p->grad.empty() ? S(0) : p->grad[i];
            m[i] = st.beta1 * m[i] + (S(1) - st.beta1) * g;
            v[i] = st.beta2 * v[i] + (S(1) - st.beta2) * g * g;
            const S mhat = m[i] / bc1;
            const S vhat = v[i] / bc2;
            p->data[i] -= lr * mhat / (static_cast<S>(std::sqrt(static_cast<double>(vhat))) + st.eps);
        }
    }
}

// Global-norm gradient clip; a safety valve, off unless configured.
template <typename S>
void clip_gradients(ParamSet<S>& ps, S max_norm) {
    double sq = 0.0;
    for (const auto& [name, p] : ps)
        for (S g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (norm <= static_cast<double>(max_norm)) return;
    const S scale = static_cast<S>(static_cast<double>(max_norm) / norm);
    for (auto& [name, p] : ps)
        for (S& g : p->grad) g *= scale;
}

// ---------------------------------------------------------------------------
// schedules
// ---------------------------------------------------------------------------

struct TrainConfig {
    std::int64_t P = 16;
    std::int64_t K = 8;
    std::int64_t epochs = 24;
    double lr = 5e-4;
    double lr_min = 1e-7;
    std::string scheduler = "cosine";  // cosine | warmup_multistep
    std::int64_t warmup_epochs = 10;
    std::vector<std::int64_t> milestones{40, 70};
    double gamma = 0.1;
    std::uint64_t seed = 3407;
    AugmentConfig aug;
    double grad_clip = 0.0;  // 0 disables; 5.0 is the recommended safety value
    std::string precision = "f32";
    std::int64_t checkpoint_every = 0;  // epochs between periodic checkpoints; 0 = final only

    void validate() const {
        if (P < 1) throw config_error("train P must be >= 1");
        if (K < 2) throw config_error(cat("train K must be >= 2 so every sample has a positive, got ", K));
        if (epochs < 0) throw config_error("train epochs must be >= 0");
        if (!(lr > 0)) throw config_error("train lr must be > 0");
        if (lr_min < 0 || lr_min > lr) throw config_error("train lr_min must be in [0, lr]");
        if (scheduler != "cosine" && scheduler != "warmup_multistep")
            throw config_error(cat("unknown scheduler \"", scheduler, "\""));
        if (scheduler == "warmup_multistep" && warmup_epochs < 1)
            throw config_error("warmup_multistep needs warmup_epochs >= 1");
        for (std::size_t i = 0; i < milestones.size(); ++i) {
            if (milestones[i] < 1) throw config_error("milestones must be positive");
            if (i && milestones[i] <= milestones[i - 1])
                throw config_error("milestones must be strictly increasing");
        }
        if (!(gamma > 0)) throw config_error("train gamma must be > 0");
        if (grad_clip < 0) throw config_error("train grad_clip must be >= 0");
        if (precision != "f32" && precision != "f64")
            throw config_error(cat("unknown precision \"", precision, "\""));
        if (checkpoint_every < 0) throw config_error("checkpoint_every must be >= 0");
        aug.validate();
    }
};

// Per-epoch learning rate. Cosine decays smoothly to lr_min over the horizon;
// warmup_multistep ramps linearly for warmup_epochs then multiplies by gamma
// at each milestone.
inline double lr_at(std::int64_t t, const TrainConfig& cfg) {
    if (cfg.scheduler == "cosine") {
        const auto T = static_cast<double>(std::max<std::int64_t>(1, cfg.epochs));
        const double x = std::min(static_cast<double>(t), T);
        return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + std::cos(3.141592653589793238462643383 * x / T));
    }
    if (t < cfg.warmup_epochs)
        return cfg.lr * static_cast<double>(t + 1) / static_cast<double>(cfg.warmup_epochs);
    double f = cfg.lr;
    for (std::int64_t m : cfg.milestones)
        if (t >= m) f *= cfg.gamma;
    return f;
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

inline std::uint32_t crc32(const unsigned char* data, std::size_t n) {
    static const std::array<std::uint32_t, 256> table = [] {
        std::array<std::uint32_t, 256> t{};
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

struct CheckpointMeta {
    std::string config;
    std::int64_t epoch = 0;
    std::uint64_t seed = 0;
};

template <typename S>
struct Checkpoint {
    std::map<std::string, TensorPtr<S>> tensors;
    CheckpointMeta meta;
};

namespace detail {

template <typename S>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<S, float>) return "f32";
    else return "f64";
}

inline void write_u32le(std::ostream& out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64le(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFFu);
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_uint_le(const unsigned char* p, int bytes) {
    std::uint64_t v = 0;
    for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}

}  // namespace detail

// File layout: "CSEN", u32 LE version, u64 LE header length, UTF-8 JSON
// header (tensor name -> {shape, dtype, offset, length}, plus a "meta" entry
// {config, epoch, seed, checksum}), then the little-endian payload. The
// header's key order and the payload's tensor order are both the sorted
// tensor names, so identical contents produce identical bytes.
template <typename S>
void checkpoint_save(const std::string& path, const Checkpoint<S>& ck) {
    if (ck.tensors.count("meta")) throw error("tensor name \"meta\" is reserved");
    std::vector<unsigned char> payload;
    nlohmann::json header = nlohmann::json::object();
    for (const auto& [name, t] : ck.tensors) {
        const std::size_t offset = payload.size();
        const std::size_t length = t->data.size() * sizeof(S);
        payload.resize(offset + length);
        std::memcpy(payload.data() + offset, t->data.data(), length);
        header[name] = {{"shape", t->shape},
                        {"dtype", detail::dtype_name<S>()},
                        {"offset", offset},
                        {"length", length}};
    }
    header["meta"] = {{"config", ck.meta.config},
                      {"epoch", ck.meta.epoch},
                      {"seed", ck.meta.seed},
                      {"checksum", crc32(payload.data(), payload.size())}};
    const std::string h = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(cat("cannot open ", path, " for writing"));
    out.write("CSEN", 4);
    detail::write_u32le(out, 1);
    detail::write_u64le(out, h.size());
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    out.write(reinterpret_cast<const char*>(payload.data()),
              static_cast<std::streamsize>(payload.size()));
    if (!out) throw io_error(cat("failed writing checkpoint ", path));
}

// Header-only read: the run metadata without touching the payload, so a
// caller can learn the stored precision before instantiating anything.
inline CheckpointMeta checkpoint_read_meta(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(cat("cannot open checkpoint ", path));
    std::vector<unsigned char> head(16);
    in.read(reinterpret_cast<char*>(head.data()), 16);
    if (in.gcount() != 16) throw data_error(cat(path, ": truncated checkpoint"));
    if (std::memcmp(head.data(), "CSEN", 4) != 0)
        throw data_error(cat(path, ": bad checkpoint magic"));
    const auto version = static_cast<std::uint32_t>(detail::read_uint_le(head.data() + 4, 4));
    if (version != 1) throw data_error(cat(path, ": unsupported checkpoint version ", version));
    const std::uint64_t hlen = detail::read_uint_le(head.data() + 8, 8);
    std::string hjson(hlen, '\0');
    in.read(hjson.data(), static_cast<std::streamsize>(hlen));
    if (in.gcount() != static_cast<std::streamsize>(hlen))
        throw data_error(cat(path, ": truncated checkpoint header"));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hjson);
    } catch (const nlohmann::json::exception& e) {
        throw data_error(cat(path, ": corrupt checkpoint header: ", e.what()));
    }
    if (!header.is_object() || !header.contains("meta"))
        throw data_error(cat(path, ": checkpoint header has no meta entry"));
    const auto& meta = header.at("meta");
    CheckpointMeta out;
    out.config = meta.value("config", std::string());
    out.epoch = meta.value("epoch", std::int64_t{0});
    out.seed = meta.value("seed", std::uint64_t{0});
    return out;
}

template <typename S>
Checkpoint<S> checkpoint_load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw io_error(cat("cannot open checkpoint ", path));
    std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in),
                                     std::istreambuf_iterator<char>()};
    if (bytes.size() < 16) throw data_error(cat(path, ": truncated checkpoint"));
    if (std::memcmp(bytes.data(), "CSEN", 4) != 0)
        throw data_error(cat(path, ": bad checkpoint magic"));
    const auto version = static_cast<std::uint32_t>(detail::read_uint_le(bytes.data() + 4, 4));
    if (version != 1) throw data_error(cat(path, ": unsupported checkpoint version ", version));
    const std::uint64_t hlen = detail::read_uint_le(bytes.data() + 8, 8);
    if (16 + hlen > bytes.size()) throw data_error(cat(path, ": truncated checkpoint header"));

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
    } catch (const nlohmann::json::exception& e) {
        throw data_error(cat(path, ": corrupt checkpoint header: ", e.what()));
    }
    if (!header.is_object() || !header.contains("meta"))
        throw data_error(cat(path, ": checkpoint header has no meta entry"));

    const unsigned char* payload = bytes.data() + 16 + hlen;
    const std::size_t payload_len = bytes.size() - 16 - hlen;

    Checkpoint<S> ck;
    const auto& meta = header.at("meta");
    ck.meta.config = meta.value("config", std::string());
    ck.meta.epoch = meta.value("epoch", std::int64_t{0});
    ck.meta.seed = meta.value("seed", std::uint64_t{0});
    const auto want_crc = meta.value("checksum", std::uint64_t{0});
    if (crc32(payload, payload_len) != want_crc)
        throw data_error(cat(path, ": checksum mismatch, checkpoint payload is corrupt"));

    for (const auto& [name, e] : header.items()) {
        if (name == "meta") continue;
        const std::vector<std::int64_t> shape = e.at("shape");
        const std::string dtype = e.at("dtype");
        if (dtype != detail::dtype_name<S>())
            throw data_error(cat(path, ": tensor ", name, " has dtype ", dtype, ", runtime expects ",
                                 detail::dtype_name<S>()));
        const std::uint64_t offset = e.at("offset");
        const std::uint64_t length = e.at("length");
        if (offset + length > payload_len)
            throw data_error(cat(path, ": tensor ", name, " extends past the payload"));
        std::int64_t numel = 1;
        for (std::int64_t d : shape) numel *= d;
        if (length != static_cast<std::uint64_t>(numel) * sizeof(S))
            throw data_error(cat(path, ": tensor ", name, " length does not match its shape"));
        std::vector<S> data(static_cast<std::size_t>(numel));
        std::memcpy(data.data(), payload + offset, length);
        ck.tensors.emplace(name, make_tensor<S>(shape, std::move(data)));
    }
    return ck;
}

// Snapshot of parameters, BN running statistics ("stats/..."), and optionally
// optimizer state ("optim/...") as one named-tensor bundle.
template <typename S>
Checkpoint<S> bundle_checkpoint(const ParamSet<S>& ps,
                                const std::vector<std::pair<std::string, ops::BNState<S>*>>& stats,
                                const AdamState<S>* opt, CheckpointMeta meta) {
    Checkpoint<S> ck;
    ck.meta = std::move(meta);
    for (const auto& [name, p] : ps) ck.tensors.emplace(name, make_tensor<S>(p->shape, p->data));
    for (const auto& [name, st] : stats) {
        const auto d = static_cast<std::int64_t>(st->running_mean.size());
        ck.tensors.emplace(cat("stats/", name, "/mean"), make_tensor<S>({d}, st->running_mean));
        ck.tensors.emplace(cat("stats/", name, "/var"), make_tensor<S>({d}, st->running_var));
    }
    if (opt) {
        for (const auto& [name, p] : ps) {
            auto mit = opt->m.find(name);
            auto vit = opt->v.find(name);
            ck.tensors.emplace(cat("optim/", name, "/m"),
                               mit != opt->m.end() ? make_tensor<S>(p->shape, mit->second)
                                                   : zeros<S>(p->shape));
            ck.tensors.emplace(cat("optim/", name, "/v"),
                               vit != opt->v.end() ? make_tensor<S>(p->shape, vit->second)
                                                   : zeros<S>(p->shape));
        }
        ck.tensors.emplace("optim/step", make_tensor<S>({1}, {static_cast<S>(opt->step)}));
    }
    return ck;
}

// Restores a bundle into an existing model's parameters and statistics.
// Shapes must agree exactly; unmatched tensors are an architecture mismatch.
// Optimizer tensors are ignored unless opt is non-null.
template <typename S>
void restore_checkpoint(ParamSet<S>& ps,
                        const std::vector<std::pair<std::string, ops::BNState<S>*>>& stats,
                        AdamState<S>* opt, const Checkpoint<S>& ck) {
    std::set<std::string> consumed;
    auto fetch = [&](const std::string& name, const std::vector<std::int64_t>& shape) {
        auto it = ck.tensors.find(name);
        if (it == ck.tensors.end())
            throw data_error(cat("checkpoint is missing tensor ", name));
        if (it->second->shape != shape)
            throw shape_error(cat("checkpoint tensor ", name, " has shape ",
                                  shape_str(it->second->shape), ", model expects ", shape_str(shape)));
        consumed.insert(name);
        return it->second;
    };

    for (auto& [name, p] : ps) p->data = fetch(name, p->shape)->data;
    for (auto& [name, st] : stats) {
        const auto d = static_cast<std::int64_t>(st->running_mean.size());
        st->running_mean = fetch(cat("stats/", name, "/mean"), {d})->data;
        st->running_var = fetch(cat("stats/", name, "/var"), {d})->data;
    }
    if (opt) {
        for (auto& [name, p] : ps) {
            opt->m[name] = fetch(cat("optim/", name, "/m"), p->shape)->data;
            opt->v[name] = fetch(cat("optim/", name, "/v"), p->shape)->data;
        }
        opt->step = static_cast<std::int64_t>(fetch("optim/step", {1})->data[0]);
    }
    for (const auto& [name, t] : ck.tensors) {
        if (consumed.count(name)) continue;
        if (!opt && name.rfind("optim/", 0) == 0) continue;
        throw data_error(cat("checkpoint tensor ", name, " does not match any model parameter"));
    }
}

// Convenience form matching the operation contract.
template <typename S>
void checkpoint_save(const ParamSet<S>& ps,
                     const std::vector<std::pair<std::string, ops::BNState<S>*>>& stats,
                     const CheckpointMeta& meta, const std::string& path,
                     const AdamState<S>* opt = nullptr) {
    checkpoint_save(path, bundle_checkpoint(ps, stats, opt, meta));
}

// ---------------------------------------------------------------------------
// fit loop
// ---------------------------------------------------------------------------

template <typename S>
struct FitResult {
    std::vector<S> loss_history;  // one entry per optimizer step
    std::vector<double> lr_history;  // one entry per epoch
};

// Maps raw dataset ids to contiguous class labels in ascending id order.
inline std::map<std::int64_t, std::int64_t> label_map(const Dataset& ds) {
    std::map<std::int64_t, std::int64_t> out;
    for (const auto& s : ds) out.emplace(s.id, 0);
    std::int64_t next = 0;
    for (auto& [id, label] : out) label = next++;
    return out;
}

// One training run: per epoch, a fresh identity permutation yields PK batches;
// each batch is decoded, augmented, pushed through the model, scored with the
// combined classification + contrastive objective, and applied via Adam. The
// schedule updates once per epoch. Deterministic for a fixed seed, and the
// per-epoch rng derivation makes a resumed run continue the exact stream a
// straight-through run would have used.
template <typename S>
FitResult<S> fit(Model<S>& model, ParamSet<S>& ps, const Dataset& train_set, const std::string& root,
                 const TrainConfig& cfg, const LossConfig& loss_cfg = {},
                 const std::string& checkpoint_dir = "", const std::string& config_json = "",
                 std::int64_t start_epoch = 0, AdamState<S>* opt_in = nullptr) {
    cfg.validate();
    loss_cfg.validate();
    if (train_set.empty()) throw data_error("fit: training set is empty");
    if (start_epoch < 0 || start_epoch > cfg.epochs)
        throw config_error(cat("fit: start_epoch ", start_epoch, " outside [0, ", cfg.epochs, "]"));

    const auto labels_of = label_map(train_set);
    if (static_cast<std::int64_t>(labels_of.size()) != model.config().num_ids)
        throw config_error(cat("model classifier has ", model.config().num_ids,
                               " classes but the training set has ", labels_of.size(), " identities"));
    const std::int64_t h = model.config().appearance.input_h;
    const std::int64_t w = model.config().appearance.input_w;

    AdamState<S> local_opt;
    AdamState<S>& opt = opt_in ? *opt_in : local_opt;
    auto stats = model.stats();
    FitResult<S> res;

    auto save = [&](const std::string& name, std::int64_t epoch) {
        if (checkpoint_dir.empty()) return;
        CheckpointMeta meta;
        meta.config = config_json;
        meta.epoch = epoch;
        meta.seed = cfg.seed;
        checkpoint_save((std::filesystem::path(checkpoint_dir) / name).string(),
                        bundle_checkpoint(ps, stats, &opt, meta));
    };

    const std::int64_t batches_per_epoch =
        static_cast<std::int64_t>(labels_of.size()) / cfg.P;
    std::int64_t step = start_epoch * batches_per_epoch;
    for (std::int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);
        Rng sample_rng(mix_seed(cfg.seed, 101, static_cast<std::uint64_t>(epoch)));
        Rng aug_rng(mix_seed(cfg.seed, 202, static_cast<std::uint64_t>(epoch)));
        for (const auto& batch : pk_sample(train_set, cfg.P, cfg.K, sample_rng)) {
            BatchInput<S> in;
            Dataset subset;
            subset.reserve(batch.size());
            for (std::int64_t idx : batch) {
                const Sample& s = train_set[static_cast<std::size_t>(idx)];
                subset.push_back(s);
                in.keys.push_back(s.key);
                in.labels.push_back(labels_of.at(s.id));
                in.camera_ids.push_back(s.camera);
                in.viewpoint_ids.push_back(s.viewpoint);
            }
            in.images = decode_batch<S>(root, subset, h, w);
            augment_batch(in.images, aug_rng, cfg.aug);

            ps.zero_grad();
            auto bundle = model.forward(ps, in, true);
            auto ce = smooth_ce(bundle.logits, in.labels, static_cast<S>(loss_cfg.label_smoothing));
            if (!std::isfinite(static_cast<double>(ce->value())))
                throw error(cat("non-finite classification loss at step ", step));
            auto loss = ce;
            if (loss_cfg.contrastive != "none") {
                auto sc = contrastive_loss(bundle.t, in.labels, loss_cfg);
                if (!std::isfinite(static_cast<double>(sc->value())))
                    throw error(cat("non-finite contrastive loss at step ", step));
                loss = ops::add(ce, sc);
            }

            backward(loss);
            if (cfg.grad_clip > 0) clip_gradients(ps, static_cast<S>(cfg.grad_clip));
            adam_step(ps, opt, static_cast<S>(lr));
            res.loss_history.push_back(loss->value());
            ++step;
        }
        res.lr_history.push_back(lr);
        if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 &&
            epoch + 1 < cfg.epochs)
            save(cat("checkpoint_epoch", detail::zero_pad(epoch + 1, 4), ".bin"), epoch + 1);
    }
    save("checkpoint_final.bin", cfg.epochs);
    return res;
}

}  // namespace csen
