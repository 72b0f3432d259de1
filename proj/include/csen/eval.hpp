#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "csen/common.hpp"
#include "csen/data.hpp"
#include "csen/model.hpp"
#include "csen/tensor.hpp"

namespace csen {

// ---------------------------------------------------------------------------
// protocol and report
// ---------------------------------------------------------------------------

struct RerankParams {
    std::int64_t k1 = 20;
    std::int64_t k2 = 6;
    double lambda = 0.3;
};

struct EvalProtocol {
    std::string metric = "euclidean_on_normalized";  // or cosine_distance
    bool cross_camera_filter = true;
    bool rerank = false;
    RerankParams rr;
    std::int64_t max_rank = 50;

    void validate() const {
        if (metric != "euclidean_on_normalized" && metric != "cosine_distance")
            throw config_error(cat("unknown distance metric \"", metric, "\""));
        if (max_rank < 1) throw config_error("eval max_rank must be >= 1");
        if (rerank) {
            if (rr.k2 < 1 || rr.k1 <= rr.k2)
                throw config_error(cat("re-rank needs k1 > k2 >= 1, got k1=", rr.k1, " k2=", rr.k2));
            if (rr.lambda < 0.0 || rr.lambda > 1.0)
                throw config_error(cat("re-rank lambda must be in [0,1], got ", rr.lambda));
        }
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"metric", metric}, {"cross_camera_filter", cross_camera_filter}};
        if (rerank)
            j["rerank"] = {{"k1", rr.k1}, {"k2", rr.k2}, {"lambda", rr.lambda}};
        else
            j["rerank"] = nullptr;
        return j;
    }
};

struct EvalReport {
    double map = 0.0;
    std::vector<double> cmc;            // rank 1 .. max_rank
    std::vector<double> per_query_ap;   // valid queries only, in query order
    std::int64_t num_valid_queries = 0;
};

inline nlohmann::json report_to_json(const EvalReport& rep, const EvalProtocol& proto) {
    return {{"mAP", rep.map},
            {"cmc", rep.cmc},
            {"num_query", rep.num_valid_queries},
            {"protocol", proto.to_json()}};
}

// ---------------------------------------------------------------------------
// features and distances
// ---------------------------------------------------------------------------

// Eval-mode forward over the dataset in chunks; row i is sample i's final
// representation. No augmentation, no gradient graph.
template <typename S>
TensorPtr<S> extract_features(Model<S>& model, const ParamSet<S>& ps, const Dataset& samples,
                              const std::string& root, std::int64_t batch_size = 64) {
    if (samples.empty()) throw data_error("extract_features: empty sample list");
    if (batch_size < 1) throw config_error("extract_features: batch_size must be >= 1");
    NoGradGuard ng;
    const std::int64_t m = static_cast<std::int64_t>(samples.size());
    const std::int64_t h = model.config().appearance.input_h;
    const std::int64_t w = model.config().appearance.input_w;
    const std::int64_t d = model.config().d_f;

    auto out = zeros<S>({m, d});
    for (std::int64_t lo = 0; lo < m; lo += batch_size) {
        const std::int64_t hi = std::min(m, lo + batch_size);
        Dataset chunk(samples.begin() + lo, samples.begin() + hi);
        BatchInput<S> in;
        in.images = decode_batch<S>(root, chunk, h, w);
        for (const auto& s : chunk) {
            in.keys.push_back(s.key);
            in.labels.push_back(0);
            in.camera_ids.push_back(s.camera);
            in.viewpoint_ids.push_back(s.viewpoint);
        }
        auto bundle = model.forward(ps, in, false);
        std::copy(bundle.t->data.begin(), bundle.t->data.end(), out->data.begin() + lo * d);
    }
    return out;
}

namespace detail {

template <typename S>
std::vector<S> l2_rows(const TensorPtr<S>& x) {
    const std::int64_t n = x->shape[0], d = x->shape[1];
    std::vector<S> out(x->data);
    for (std::int64_t i = 0; i < n; ++i) {
        double sq = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double v = static_cast<double>(x->data[static_cast<std::size_t>(i * d + j)]);
            sq += v * v;
        }
        const double r = std::max(std::sqrt(sq), 1e-12);
        for (std::int64_t j = 0; j < d; ++j)
            out[static_cast<std::size_t>(i * d + j)] = static_cast<S>(
                static_cast<double>(x->data[static_cast<std::size_t>(i * d + j)]) / r);
    }
    return out;
}

}  // namespace detail

// Pairwise q x g distances. euclidean_on_normalized: L2-normalize rows, then
// plain Euclidean distance; cosine_distance: 1 - cosine similarity. Both are
// nonnegative and zero for identical directions.
template <typename S>
TensorPtr<S> distance_matrix(const TensorPtr<S>& queries, const TensorPtr<S>& gallery,
                             const std::string& metric) {
    if (queries->shape.size() != 2 || gallery->shape.size() != 2)
        throw shape_error("distance_matrix expects 2-d feature matrices");
    if (queries->shape[1] != gallery->shape[1])
        throw shape_error(cat("distance_matrix: feature dims differ, ", queries->shape[1], " vs ",
                              gallery->shape[1]));
    if (metric != "euclidean_on_normalized" && metric != "cosine_distance")
        throw config_error(cat("unknown distance metric \"", metric, "\""));

    const std::int64_t q = queries->shape[0], g = gallery->shape[0], d = queries->shape[1];
    const auto qn = detail::l2_rows(queries);
    const auto gn = detail::l2_rows(gallery);
    auto out = zeros<S>({q, g});

    parallel_for(q, [&](std::int64_t i) {
        for (std::int64_t j = 0; j < g; ++j) {
            double dot = 0.0;
            for (std::int64_t k = 0; k < d; ++k)
                dot += static_cast<double>(qn[static_cast<std::size_t>(i * d + k)]) *
                       static_cast<double>(gn[static_cast<std::size_t>(j * d + k)]);
            double v;
            if (metric[0] == 'e') {
                v = std::sqrt(std::max(0.0, 2.0 - 2.0 * dot));
            } else {
                v = std::max(0.0, 1.0 - dot);
            }
            out->data[static_cast<std::size_t>(i * g + j)] = static_cast<S>(v);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// CMC / mAP
// ---------------------------------------------------------------------------

// Retrieval metrics with the deterministic protocol: gallery sorted by
// ascending distance with ties broken by ascending gallery index; with the
// cross-camera filter, gallery entries sharing both id and camera with the
// query are discarded; queries left without any relevant item are excluded
// from the averages but counted via num_valid_queries.
template <typename S>
EvalReport cmc_map(const TensorPtr<S>& dist, const std::vector<std::int64_t>& q_ids,
                   const std::vector<std::int64_t>& g_ids, const std::vector<std::int64_t>& q_cams,
                   const std::vector<std::int64_t>& g_cams, const EvalProtocol& proto) {
    proto.validate();
    if (dist->shape.size() != 2) throw shape_error("cmc_map expects a 2-d distance matrix");
    const std::int64_t q = dist->shape[0], g = dist->shape[1];
    if (static_cast<std::int64_t>(q_ids.size()) != q || static_cast<std::int64_t>(q_cams.size()) != q)
        throw shape_error(cat("cmc_map: query annotations (", q_ids.size(), ") do not match ", q, " rows"));
    if (static_cast<std::int64_t>(g_ids.size()) != g || static_cast<std::int64_t>(g_cams.size()) != g)
        throw shape_error(cat("cmc_map: gallery annotations (", g_ids.size(), ") do not match ", g, " columns"));

    EvalReport rep;
    rep.cmc.assign(static_cast<std::size_t>(proto.max_rank), 0.0);

    for (std::int64_t i = 0; i < q; ++i) {
        std::vector<std::int64_t> order(static_cast<std::size_t>(g));
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
            const S da = dist->data[static_cast<std::size_t>(i * g + a)];
            const S db = dist->data[static_cast<std::size_t>(i * g + b)];
            if (da != db) return da < db;
            return a < b;
        });

        double ap = 0.0;
        std::int64_t relevant = 0, kept = 0;
        std::int64_t first_hit = -1;
        for (std::int64_t j : order) {
            if (proto.cross_camera_filter && g_ids[static_cast<std::size_t>(j)] == q_ids[static_cast<std::size_t>(i)] &&
                g_cams[static_cast<std::size_t>(j)] == q_cams[static_cast<std::size_t>(i)])
                continue;
            ++kept;
            if (g_ids[static_cast<std::size_t>(j)] == q_ids[static_cast<std::size_t>(i)]) {
                ++relevant;
                ap += static_cast<double>(relevant) / static_cast<double>(kept);
                if (first_hit < 0) first_hit = kept;
            }
        }
        if (relevant == 0) continue;  // no valid relevant item for this query

        ++rep.num_valid_queries;
        rep.per_query_ap.push_back(ap / static_cast<double>(relevant));
        for (std::int64_t r = first_hit; r <= proto.max_rank; ++r)
            rep.cmc[static_cast<std::size_t>(r - 1)] += 1.0;
    }

    if (rep.num_valid_queries == 0)
        throw data_error("cmc_map: every query lacks a valid relevant gallery item");

    for (double& v : rep.cmc) v /= static_cast<double>(rep.num_valid_queries);
    rep.map = std::accumulate(rep.per_query_ap.begin(), rep.per_query_ap.end(), 0.0) /
              static_cast<double>(rep.num_valid_queries);
    return rep;
}

// ---------------------------------------------------------------------------
// k-reciprocal re-ranking
// ---------------------------------------------------------------------------

namespace detail {

// Indices of row i's nearest count+1 entries (self included), ascending
// distance, ties by index.
inline std::vector<std::int64_t> nearest(const std::vector<double>& dist, std::int64_t n,
                                         std::int64_t i, std::int64_t count) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    const std::int64_t take = std::min<std::int64_t>(n, count + 1);
    std::partial_sort(order.begin(), order.begin() + take, order.end(),
                      [&](std::int64_t a, std::int64_t b) {
                          const double da = dist[static_cast<std::size_t>(i * n + a)];
                          const double db = dist[static_cast<std::size_t>(i * n + b)];
                          if (da != db) return da < db;
                          return a < b;
                      });
    order.resize(static_cast<std::size_t>(take));
    return order;
}

}  // namespace detail

// Standard k-reciprocal re-ranking over the joint query+gallery set:
// reciprocal neighbor sets at k1 with half-size expansion, exp(-d) membership
// weights, local query expansion over the k2 nearest, Jaccard distance, then
// final = lambda * original + (1 - lambda) * jaccard.
template <typename S>
TensorPtr<S> k_reciprocal_rerank(const TensorPtr<S>& d_qg, const TensorPtr<S>& d_qq,
                                 const TensorPtr<S>& d_gg, std::int64_t k1, std::int64_t k2,
                                 double lambda) {
    if (d_qg->shape.size() != 2 || d_qq->shape.size() != 2 || d_gg->shape.size() != 2)
        throw shape_error("k_reciprocal_rerank expects 2-d distance matrices");
    const std::int64_t q = d_qg->shape[0], g = d_qg->shape[1];
    if (d_qq->shape[0] != q || d_qq->shape[1] != q)
        throw shape_error(cat("query-query matrix is ", shape_str(d_qq->shape), ", expected ", q, "x", q));
    if (d_gg->shape[0] != g || d_gg->shape[1] != g)
        throw shape_error(cat("gallery-gallery matrix is ", shape_str(d_gg->shape), ", expected ", g, "x", g));
    if (k2 < 1 || k1 <= k2) throw config_error(cat("re-rank needs k1 > k2 >= 1, got k1=", k1, " k2=", k2));
    if (lambda < 0.0 || lambda > 1.0) throw config_error(cat("re-rank lambda must be in [0,1], got ", lambda));
    if (k1 >= g) throw config_error(cat("re-rank k1=", k1, " must be smaller than the gallery size ", g));

    const std::int64_t n = q + g;
    std::vector<double> joint(static_cast<std::size_t>(n * n));
    auto at = [&](std::int64_t a, std::int64_t b) -> double& {
        return joint[static_cast<std::size_t>(a * n + b)];
    };
    for (std::int64_t i = 0; i < q; ++i) {
        for (std::int64_t j = 0; j < q; ++j) at(i, j) = static_cast<double>(d_qq->data[static_cast<std::size_t>(i * q + j)]);
        for (std::int64_t j = 0; j < g; ++j) {
            const double v = static_cast<double>(d_qg->data[static_cast<std::size_t>(i * g + j)]);
            at(i, q + j) = v;
            at(q + j, i) = v;
        }
    }
    for (std::int64_t i = 0; i < g; ++i)
        for (std::int64_t j = 0; j < g; ++j)
            at(q + i, q + j) = static_cast<double>(d_gg->data[static_cast<std::size_t>(i * g + j)]);

    // reciprocal neighborhoods with half-size expansion
    std::vector<std::vector<std::int64_t>> nn_k1(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) nn_k1[static_cast<std::size_t>(i)] = detail::nearest(joint, n, i, k1);
    auto reciprocal = [&](std::int64_t i, const std::vector<std::vector<std::int64_t>>& nn) {
        std::vector<std::int64_t> out;
        for (std::int64_t j : nn[static_cast<std::size_t>(i)]) {
            const auto& back = nn[static_cast<std::size_t>(j)];
            if (std::find(back.begin(), back.end(), i) != back.end()) out.push_back(j);
        }
        return out;
    };
    const std::int64_t half = k1 / 2;
    std::vector<std::vector<std::int64_t>> nn_half(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) nn_half[static_cast<std::size_t>(i)] = detail::nearest(joint, n, i, half);

    std::vector<std::map<std::int64_t, double>> V(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        auto r_i = reciprocal(i, nn_k1);
        const std::set<std::int64_t> base(r_i.begin(), r_i.end());
        std::set<std::int64_t> expanded = base;
        for (std::int64_t j : r_i) {
            auto r_half = reciprocal(j, nn_half);
            std::int64_t overlap = 0;
            for (std::int64_t x : r_half)
                if (base.count(x)) ++overlap;
            if (3 * overlap > 2 * static_cast<std::int64_t>(r_half.size()))
                expanded.insert(r_half.begin(), r_half.end());
        }
        double total = 0.0;
        auto& row = V[static_cast<std::size_t>(i)];
        for (std::int64_t j : expanded) {
            const double wgt = std::exp(-at(i, j));
            row[j] = wgt;
            total += wgt;
        }
        for (auto& [j, wgt] : row) wgt /= total;
    }

    // local query expansion: mean membership vector of the k2 nearest
    if (k2 > 1) {
        std::vector<std::map<std::int64_t, double>> Vq(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) {
            auto& acc = Vq[static_cast<std::size_t>(i)];
            const auto nn = detail::nearest(joint, n, i, k2 - 1);  // k2 entries, self first
            for (std::int64_t j : nn)
                for (const auto& [col, wgt] : V[static_cast<std::size_t>(j)])
                    acc[col] += wgt / static_cast<double>(nn.size());
        }
        V = std::move(Vq);
    }

    auto out = zeros<S>({q, g});
    for (std::int64_t i = 0; i < q; ++i) {
        const auto& vi = V[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < g; ++j) {
            const auto& vj = V[static_cast<std::size_t>(q + j)];
            double sum_min = 0.0, sum_max = 0.0;
            auto a = vi.begin();
            auto b = vj.begin();
            while (a != vi.end() || b != vj.end()) {
                if (b == vj.end() || (a != vi.end() && a->first < b->first)) {
                    sum_max += a->second;
                    ++a;
                } else if (a == vi.end() || b->first < a->first) {
                    sum_max += b->second;
                    ++b;
                } else {
                    sum_min += std::min(a->second, b->second);
                    sum_max += std::max(a->second, b->second);
                    ++a;
                    ++b;
                }
            }
            const double jaccard = sum_max > 0.0 ? 1.0 - sum_min / sum_max : 1.0;
            out->data[static_cast<std::size_t>(i * g + j)] = static_cast<S>(
                lambda * static_cast<double>(d_qg->data[static_cast<std::size_t>(i * g + j)]) +
                (1.0 - lambda) * jaccard);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding export
// ---------------------------------------------------------------------------

// JSON-lines {"key","id","camera","embedding"}; embedding values are written
// as shortest round-trip decimals of their f32 cast.
template <typename S>
void export_embeddings(const std::string& path, const Dataset& samples, const TensorPtr<S>& features) {
    if (features->shape.size() != 2)
        throw shape_error("export_embeddings expects an MxD feature matrix");
    if (features->shape[0] != static_cast<std::int64_t>(samples.size()))
        throw shape_error(cat("export_embeddings: ", samples.size(), " samples vs ",
                              features->shape[0], " feature rows"));
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error(cat("cannot open ", path, " for writing"));

    const std::int64_t d = features->shape[1];
    char buf[64];
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out << "{\"key\":" << nlohmann::json(samples[i].key).dump() << ",\"id\":" << samples[i].id
            << ",\"camera\":" << samples[i].camera << ",\"embedding\":[";
        for (std::int64_t j = 0; j < d; ++j) {
            const auto v = static_cast<float>(features->data[static_cast<std::size_t>(i) * d + j]);
            if (!std::isfinite(v))
                throw error(cat("non-finite embedding value for key \"", samples[i].key, "\""));
            const auto res = std::to_chars(buf, buf + sizeof(buf), v);
            if (j) out << ',';
            out.write(buf, res.ptr - buf);
        }
        out << "]}\n";
    }
    if (!out) throw io_error(cat("failed writing embeddings ", path));
}

// ---------------------------------------------------------------------------
// end-to-end evaluation
// ---------------------------------------------------------------------------

// Splits the dataset, extracts features, builds distances (re-ranked when the
// protocol says so), and scores.
template <typename S>
EvalReport evaluate(Model<S>& model, const ParamSet<S>& ps, const Dataset& ds,
                    const std::string& root, const EvalProtocol& proto) {
    proto.validate();
    auto [query, gallery] = split_query_gallery(ds);
    if (query.empty()) throw data_error("evaluate: dataset has no query samples");

    auto fq = extract_features(model, ps, query, root);
    auto fg = extract_features(model, ps, gallery, root);
    auto d = distance_matrix(fq, fg, proto.metric);
    if (proto.rerank) {
        auto dqq = distance_matrix(fq, fq, proto.metric);
        auto dgg = distance_matrix(fg, fg, proto.metric);
        d = k_reciprocal_rerank(d, dqq, dgg, proto.rr.k1, proto.rr.k2, proto.rr.lambda);
    }

    std::vector<std::int64_t> q_ids, g_ids, q_cams, g_cams;
    for (const auto& s : query) {
        q_ids.push_back(s.id);
        q_cams.push_back(s.camera);
    }
    for (const auto& s : gallery) {
        g_ids.push_back(s.id);
        g_cams.push_back(s.camera);
    }
    return cmc_map(d, q_ids, g_ids, q_cams, g_cams, proto);
}

}  // namespace csen
