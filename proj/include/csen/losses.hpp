#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csen/common.hpp"
#include "csen/ops.hpp"
#include "csen/rng.hpp"
#include "csen/tensor.hpp"

namespace csen {

struct LossConfig {
    double label_smoothing = 0.1;
    double temperature = 0.07;
    std::string contrastive = "supcon";  // supcon | triplet | none
    double triplet_margin = 0.3;

    void validate() const {
        if (label_smoothing < 0.0 || label_smoothing >= 1.0)
            throw config_error(cat("label_smoothing must be in [0,1), got ", label_smoothing));
        if (temperature <= 0.0) throw config_error(cat("temperature must be > 0, got ", temperature));
        if (contrastive != "supcon" && contrastive != "triplet" && contrastive != "none")
            throw config_error(cat("unknown contrastive loss \"", contrastive, "\""));
        if (triplet_margin < 0.0) throw config_error(cat("triplet_margin must be >= 0, got ", triplet_margin));
    }
};

// ---------------------------------------------------------------------------
// classifier head: bias-free linear map to identity logits
// ---------------------------------------------------------------------------

template <typename S>
class Classifier {
public:
    Classifier(std::int64_t d_f, std::int64_t num_ids) : d_f_(d_f), num_ids_(num_ids) {
        if (num_ids < 2) throw config_error(cat("classifier needs >= 2 identities, got ", num_ids));
    }

    void init_params(ParamSet<S>& ps, Rng& rng) const {
        const S stddev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(d_f_ + num_ids_)));
        ps.add("cls/w", randn<S>({d_f_, num_ids_}, rng, stddev));
    }

    TensorPtr<S> classify(const ParamSet<S>& ps, const TensorPtr<S>& features) const {
        return ops::matmul(features, ps.at("cls/w"));
    }

    std::int64_t num_ids() const { return num_ids_; }

private:
    std::int64_t d_f_;
    std::int64_t num_ids_;
};

template <typename S>
TensorPtr<S> classify(const ParamSet<S>& ps, const Classifier<S>& head, const TensorPtr<S>& features) {
    return head.classify(ps, features);
}

// ---------------------------------------------------------------------------
// label-smoothed cross entropy
// ---------------------------------------------------------------------------

// Mean over rows of -sum_k q_k * logsoftmax(logits)_k with q_y = 1-eps and
// q_{k != y} = eps/(C-1); stable via max-subtracted logsumexp.
template <typename S>
TensorPtr<S> smooth_ce(const TensorPtr<S>& logits, const std::vector<std::int64_t>& labels, S eps) {
    if (logits->shape.size() != 2)
        throw shape_error(cat("smooth_ce expects NxC logits, got ", shape_str(logits->shape)));
    const std::int64_t n = logits->shape[0], c = logits->shape[1];
    if (c < 2) throw shape_error(cat("smooth_ce needs >= 2 classes, got ", c));
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw shape_error(cat("smooth_ce: ", labels.size(), " labels for ", n, " rows"));
    if (eps < S(0) || eps >= S(1)) throw error(cat("smooth_ce: smoothing ", eps, " outside [0,1)"));
    for (std::int64_t i = 0; i < n; ++i)
        if (labels[i] < 0 || labels[i] >= c)
            throw error(cat("smooth_ce: label ", labels[i], " at row ", i, " outside [0,", c, ")"));

    const S off = eps / static_cast<S>(c - 1);
    const S on = S(1) - eps;
    std::vector<S> lse(static_cast<std::size_t>(n));
    S total = S(0);
    for (std::int64_t i = 0; i < n; ++i) {
        const S* row = logits->data.data() + i * c;
        S mx = row[0];
        for (std::int64_t k = 1; k < c; ++k) mx = std::max(mx, row[k]);
        S sum = S(0);
        for (std::int64_t k = 0; k < c; ++k) sum += static_cast<S>(std::exp(static_cast<double>(row[k] - mx)));
        const S l = mx + static_cast<S>(std::log(static_cast<double>(sum)));
        lse[static_cast<std::size_t>(i)] = l;
        S qdotx = S(0);
        for (std::int64_t k = 0; k < c; ++k) qdotx += (k == labels[i] ? on : off) * row[k];
        total += l - qdotx;
    }
    auto out = make_tensor<S>({1}, {total / static_cast<S>(n)});

    if (GradMode::enabled() && logits->requires_grad) {
        out->requires_grad = true;
        out->parents = {logits};
        out->backward_fn = [logits, labels, lse = std::move(lse), n, c, on, off](Tensor<S>& o) {
            logits->ensure_grad();
            const S go = o.grad[0] / static_cast<S>(n);
            for (std::int64_t i = 0; i < n; ++i) {
                const S* row = logits->data.data() + i * c;
                S* g = logits->grad.data() + i * c;
                const S l = lse[static_cast<std::size_t>(i)];
                for (std::int64_t k = 0; k < c; ++k) {
                    const S p = static_cast<S>(std::exp(static_cast<double>(row[k] - l)));
                    const S q = (k == labels[i]) ? on : off;
                    g[k] += go * (p - q);
                }
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// supervised contrastive loss
// ---------------------------------------------------------------------------

namespace detail {

// Loss over a precomputed cosine-similarity matrix. For anchor i and positive
// p: -log( exp(s_ip/tau) / (exp(s_ip/tau) + sum_{j: label_j != label_i} exp(s_ij/tau)) ),
// averaged over positives then anchors. Gradient flows into sim.
template <typename S>
TensorPtr<S> supcon_from_sim(const TensorPtr<S>& sim, const std::vector<std::int64_t>& labels, S tau) {
    const std::int64_t n = sim->shape[0];
    if (sim->shape.size() != 2 || sim->shape[1] != n)
        throw shape_error(cat("supcon: similarity matrix must be square, got ", shape_str(sim->shape)));
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw shape_error(cat("supcon: ", labels.size(), " labels for ", n, " rows"));

    std::vector<std::vector<std::int64_t>> pos(n), neg(n);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            (labels[j] == labels[i] ? pos[i] : neg[i]).push_back(j);
        }
    for (std::int64_t i = 0; i < n; ++i)
        if (pos[i].empty())
            throw error(cat("supcon: anchor ", i, " (label ", labels[i],
                            ") has no positive in the batch; sampler contract violated"));

    const S inv_tau = S(1) / tau;
    S total = S(0);
    for (std::int64_t i = 0; i < n; ++i) {
        S anchor = S(0);
        for (std::int64_t p : pos[i]) {
            S mx = sim->at(i, p) * inv_tau;
            for (std::int64_t j : neg[i]) mx = std::max(mx, sim->at(i, j) * inv_tau);
            S denom = static_cast<S>(std::exp(static_cast<double>(sim->at(i, p) * inv_tau - mx)));
            for (std::int64_t j : neg[i])
                denom += static_cast<S>(std::exp(static_cast<double>(sim->at(i, j) * inv_tau - mx)));
            const S logd = mx + static_cast<S>(std::log(static_cast<double>(denom)));
            anchor += logd - sim->at(i, p) * inv_tau;
        }
        total += anchor / static_cast<S>(pos[i].size());
    }
    auto out = make_tensor<S>({1}, {total / static_cast<S>(n)});

    if (GradMode::enabled() && sim->requires_grad) {
        out->requires_grad = true;
        out->parents = {sim};
        out->backward_fn = [sim, labels, pos = std::move(pos), neg = std::move(neg), n, inv_tau](Tensor<S>& o) {
            sim->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                const S coef = o.grad[0] / (static_cast<S>(n) * static_cast<S>(pos[i].size()));
                for (std::int64_t p : pos[i]) {
                    S mx = sim->at(i, p) * inv_tau;
                    for (std::int64_t j : neg[i]) mx = std::max(mx, sim->at(i, j) * inv_tau);
                    S denom = static_cast<S>(std::exp(static_cast<double>(sim->at(i, p) * inv_tau - mx)));
                    for (std::int64_t j : neg[i])
                        denom += static_cast<S>(std::exp(static_cast<double>(sim->at(i, j) * inv_tau - mx)));
                    const S logd = mx + static_cast<S>(std::log(static_cast<double>(denom)));
                    const S a = static_cast<S>(std::exp(static_cast<double>(sim->at(i, p) * inv_tau - logd)));
                    sim->grad[i * n + p] += coef * (a - S(1)) * inv_tau;
                    for (std::int64_t j : neg[i]) {
                        const S b = static_cast<S>(std::exp(static_cast<double>(sim->at(i, j) * inv_tau - logd)));
                        sim->grad[i * n + j] += coef * b * inv_tau;
                    }
                }
            }
        };
    }
    return out;
}

}  // namespace detail

template <typename S>
TensorPtr<S> supcon(const TensorPtr<S>& features, const std::vector<std::int64_t>& labels, S tau) {
    if (tau <= S(0)) throw error(cat("supcon: temperature must be > 0, got ", tau));
    auto z = ops::l2_normalize(features);
    auto sim = ops::matmul_nt(z, z);
    return detail::supcon_from_sim(sim, labels, tau);
}

// ---------------------------------------------------------------------------
// batch-hard triplet loss (reference implementation for the loss ablation)
// ---------------------------------------------------------------------------

// Per anchor: hardest positive distance minus hardest negative distance plus
// margin, hinged at zero; mean over anchors. Euclidean distances on raw rows.
template <typename S>
TensorPtr<S> triplet_batch_hard(const TensorPtr<S>& features, const std::vector<std::int64_t>& labels,
                                S margin) {
    if (features->shape.size() != 2)
        throw shape_error(cat("triplet: expected NxD features, got ", shape_str(features->shape)));
    const std::int64_t n = features->shape[0], d = features->shape[1];
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw shape_error(cat("triplet: ", labels.size(), " labels for ", n, " rows"));

    std::vector<S> dist(static_cast<std::size_t>(n * n), S(0));
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = i + 1; j < n; ++j) {
            S sq = S(0);
            for (std::int64_t k = 0; k < d; ++k) {
                const S dv = features->at(i, k) - features->at(j, k);
                sq += dv * dv;
            }
            const S dd = static_cast<S>(std::sqrt(static_cast<double>(sq) + 1e-12));
            dist[static_cast<std::size_t>(i * n + j)] = dd;
            dist[static_cast<std::size_t>(j * n + i)] = dd;
        }

    std::vector<std::int64_t> hard_pos(static_cast<std::size_t>(n), -1);
    std::vector<std::int64_t> hard_neg(static_cast<std::size_t>(n), -1);
    std::vector<S> hinge(static_cast<std::size_t>(n), S(0));
    S total = S(0);
    std::int64_t active = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        S dp = S(-1), dn = S(0);
        for (std::int64_t j = 0; j < n; ++j) {
            if (j == i) continue;
            const S dd = dist[static_cast<std::size_t>(i * n + j)];
            if (labels[j] == labels[i]) {
                if (dd > dp) {
                    dp = dd;
                    hard_pos[static_cast<std::size_t>(i)] = j;
                }
            } else if (hard_neg[static_cast<std::size_t>(i)] < 0 || dd < dn) {
                dn = dd;
                hard_neg[static_cast<std::size_t>(i)] = j;
            }
        }
        if (hard_pos[static_cast<std::size_t>(i)] < 0)
            throw error(cat("triplet: anchor ", i, " has no positive in the batch"));
        if (hard_neg[static_cast<std::size_t>(i)] < 0) continue;  // single-class batch row contributes 0
        const S h = margin + dp - dn;
        if (h > S(0)) {
            hinge[static_cast<std::size_t>(i)] = h;
            total += h;
            ++active;
        }
    }
    (void)active;
    auto out = make_tensor<S>({1}, {total / static_cast<S>(n)});

    if (GradMode::enabled() && features->requires_grad) {
        out->requires_grad = true;
        out->parents = {features};
        out->backward_fn = [features, dist = std::move(dist), hard_pos = std::move(hard_pos),
                            hard_neg = std::move(hard_neg), hinge = std::move(hinge), n, d](Tensor<S>& o) {
            features->ensure_grad();
            const S go = o.grad[0] / static_cast<S>(n);
            auto push = [&](std::int64_t i, std::int64_t j, S sign) {
                const S dd = dist[static_cast<std::size_t>(i * n + j)];
                for (std::int64_t k = 0; k < d; ++k) {
                    const S dv = (features->at(i, k) - features->at(j, k)) / dd;
                    features->grad[i * d + k] += sign * go * dv;
                    features->grad[j * d + k] -= sign * go * dv;
                }
            };
            for (std::int64_t i = 0; i < n; ++i) {
                if (hinge[static_cast<std::size_t>(i)] <= S(0)) continue;
                push(i, hard_pos[static_cast<std::size_t>(i)], S(1));
                push(i, hard_neg[static_cast<std::size_t>(i)], S(-1));
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// combined objective
// ---------------------------------------------------------------------------

// Classification term plus the configured metric-learning term.
template <typename S>
TensorPtr<S> contrastive_loss(const TensorPtr<S>& features, const std::vector<std::int64_t>& labels,
                              const LossConfig& cfg) {
    if (cfg.contrastive == "supcon") return supcon(features, labels, static_cast<S>(cfg.temperature));
    if (cfg.contrastive == "triplet")
        return triplet_batch_hard(features, labels, static_cast<S>(cfg.triplet_margin));
    throw config_error(cat("unknown contrastive loss \"", cfg.contrastive, "\""));
}

template <typename S>
TensorPtr<S> total_loss(const TensorPtr<S>& logits, const TensorPtr<S>& features,
                        const std::vector<std::int64_t>& labels, const LossConfig& cfg) {
    cfg.validate();
    auto ce = smooth_ce(logits, labels, static_cast<S>(cfg.label_smoothing));
    if (cfg.contrastive == "none") return ce;
    return ops::add(ce, contrastive_loss(features, labels, cfg));
}

}  // namespace csen
