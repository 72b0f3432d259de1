#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "csen/common.hpp"
#include "csen/ops.hpp"
#include "csen/rng.hpp"
#include "csen/tensor.hpp"

namespace csen {

// ---------------------------------------------------------------------------
// fusion: T_u = FC(T_s concat T_a)
// ---------------------------------------------------------------------------

template <typename S>
class FusionHead {
public:
    FusionHead(std::int64_t d_s, std::int64_t d_a, std::int64_t d_f) : d_s_(d_s), d_a_(d_a), d_f_(d_f) {
        if (d_s < 0 || d_a < 1 || d_f < 1) throw config_error("fusion dims must be positive");
    }

    void init_params(ParamSet<S>& ps, Rng& rng) const {
        const std::int64_t din = d_s_ + d_a_;
        const S stddev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(din + d_f_)));
        ps.add("fuse/w", randn<S>({din, d_f_}, rng, stddev));
        ps.add("fuse/b", zeros<S>({d_f_}));
    }

    // Semantic columns first, appearance columns second.
    TensorPtr<S> fuse(const ParamSet<S>& ps, const TensorPtr<S>& t_s, const TensorPtr<S>& t_a) const {
        if (t_s->shape.size() != 2 || t_s->shape[1] != d_s_)
            throw shape_error(cat("fuse: semantic input ", shape_str(t_s->shape), ", expected Nx", d_s_));
        if (t_a->shape.size() != 2 || t_a->shape[1] != d_a_)
            throw shape_error(cat("fuse: appearance input ", shape_str(t_a->shape), ", expected Nx", d_a_));
        return ops::linear_forward(ops::concat_last(t_s, t_a), ps.at("fuse/w"), ps.at("fuse/b"));
    }

    std::int64_t d_f() const { return d_f_; }

private:
    std::int64_t d_s_;
    std::int64_t d_a_;
    std::int64_t d_f_;
};

template <typename S>
TensorPtr<S> fuse(const ParamSet<S>& ps, const FusionHead<S>& head, const TensorPtr<S>& t_s,
                  const TensorPtr<S>& t_a) {
    return head.fuse(ps, t_s, t_a);
}

// ---------------------------------------------------------------------------
// adaptive fine-grained enhancement: shared projection, grouped channel gate
// ---------------------------------------------------------------------------

template <typename S>
class Afem {
public:
    Afem(std::int64_t d_s, std::int64_t d_f, std::int64_t groups)
        : d_s_(d_s), d_f_(d_f), groups_(groups), bn_(d_f) {
        if (groups < 1) throw config_error(cat("afem groups must be >= 1, got ", groups));
        if (d_f % groups != 0)
            throw config_error(cat("afem: feature dim ", d_f, " not divisible by ", groups, " groups"));
    }

    void init_params(ParamSet<S>& ps, Rng& rng) const {
        const S stddev = static_cast<S>(std::sqrt(2.0 / static_cast<double>(d_s_ + d_f_)));
        ps.add("afem/proj_w", randn<S>({d_s_, d_f_}, rng, stddev));
        ps.add("afem/proj_b", zeros<S>({d_f_}));
        ps.add("afem/bn_g", full<S>({d_f_}, S(1)));
        ps.add("afem/bn_b", zeros<S>({d_f_}));
        // global weight plus one per group, standard normal
        ps.add("afem/w", randn<S>({groups_ + 1}, rng, S(1)));
    }

    // y = relu(bn(proj(T_s))); out[n,c] = y[n,c] * (1 + w_0 + w_{1+group(c)}).
    TensorPtr<S> forward(const ParamSet<S>& ps, const TensorPtr<S>& t_s, bool train) {
        if (t_s->shape.size() != 2 || t_s->shape[1] != d_s_)
            throw shape_error(cat("afem: input ", shape_str(t_s->shape), ", expected Nx", d_s_));
        auto y = projected(ps, t_s, train);
        return ops::group_gate(y, ps.at("afem/w"), groups_);
    }

    // The ungated branch y, exposed for the zero-weight degenerate form.
    TensorPtr<S> projected(const ParamSet<S>& ps, const TensorPtr<S>& t_s, bool train) {
        auto z = ops::linear_forward(t_s, ps.at("afem/proj_w"), ps.at("afem/proj_b"));
        return ops::relu(ops::batch_norm(z, ps.at("afem/bn_g"), ps.at("afem/bn_b"), bn_, train));
    }

    std::int64_t groups() const { return groups_; }
    ops::BNState<S>& bn_state() { return bn_; }

private:
    std::int64_t d_s_;
    std::int64_t d_f_;
    std::int64_t groups_;
    ops::BNState<S> bn_;
};

template <typename S>
TensorPtr<S> afem_forward(const ParamSet<S>& ps, Afem<S>& afem, const TensorPtr<S>& t_s, bool train) {
    return afem.forward(ps, t_s, train);
}

// ---------------------------------------------------------------------------
// final representation: elementwise sum of the branches
// ---------------------------------------------------------------------------

template <typename S>
TensorPtr<S> final_feature(const TensorPtr<S>& t_u, const TensorPtr<S>& t_sp, const TensorPtr<S>& side) {
    if (t_u->shape != t_sp->shape || t_u->shape != side->shape)
        throw shape_error(cat("final_feature: mismatched branches ", shape_str(t_u->shape), ", ",
                              shape_str(t_sp->shape), ", ", shape_str(side->shape)));
    return ops::add_n<S>({t_u, t_sp, side});
}

}  // namespace csen
