#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "csen/common.hpp"
#include "csen/rng.hpp"

namespace csen {

template <typename S>
class Tensor;

template <typename S>
using TensorPtr = std::shared_ptr<Tensor<S>>;

// Thread-local switch for graph recording; eval paths run under NoGradGuard.
class GradMode {
public:
    static bool enabled() { return flag_(); }
    static void set(bool on) { flag_() = on; }

private:
    static bool& flag_() {
        thread_local bool enabled = true;
        return enabled;
    }
};

struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor with a gradient slot and reverse-mode graph links.
// Ops are free functions (ops.hpp) that fill in parents/backward_fn.
template <typename S>
class Tensor : public std::enable_shared_from_this<Tensor<S>> {
public:
    std::vector<std::int64_t> shape;
    std::vector<S> data;
    bool requires_grad = false;
    std::vector<S> grad;

    std::vector<TensorPtr<S>> parents;
    std::function<void(Tensor<S>&)> backward_fn;

    Tensor() = default;
    Tensor(std::vector<std::int64_t> shp, std::vector<S> values, bool req = false)
        : shape(std::move(shp)), data(std::move(values)), requires_grad(req) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw shape_error(cat("tensor data length ", data.size(),
                                  " does not match shape ", shape_str(shape)));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    std::int64_t dim(std::size_t i) const { return shape.at(i); }

    static std::int64_t numel_of(const std::vector<std::int64_t>& shp) {
        std::int64_t n = 1;
        for (auto d : shp) {
            if (d <= 0) throw shape_error(cat("non-positive dimension in shape ", shape_str(shp)));
            n *= d;
        }
        return n;
    }

    // 2-d accessors (row-major)
    S& at(std::int64_t i, std::int64_t j) { return data[i * shape[1] + j]; }
    const S& at(std::int64_t i, std::int64_t j) const { return data[i * shape[1] + j]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), S(0));
    }

    void zero_grad() {
        if (!grad.empty()) std::fill(grad.begin(), grad.end(), S(0));
    }

    bool all_finite() const {
        for (const S& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    S value() const {
        if (numel() != 1) throw shape_error(cat("value() on non-scalar tensor ", shape_str(shape)));
        return data[0];
    }
};

template <typename S>
TensorPtr<S> make_tensor(std::vector<std::int64_t> shape, std::vector<S> data, bool requires_grad = false) {
    return std::make_shared<Tensor<S>>(std::move(shape), std::move(data), requires_grad);
}

template <typename S>
TensorPtr<S> zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
    auto n = Tensor<S>::numel_of(shape);
    return make_tensor<S>(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), S(0)), requires_grad);
}

template <typename S>
TensorPtr<S> full(std::vector<std::int64_t> shape, S value, bool requires_grad = false) {
    auto n = Tensor<S>::numel_of(shape);
    return make_tensor<S>(std::move(shape), std::vector<S>(static_cast<std::size_t>(n), value), requires_grad);
}

template <typename S>
TensorPtr<S> scalar(S value) {
    return make_tensor<S>({1}, {value});
}

template <typename S>
TensorPtr<S> randn(std::vector<std::int64_t> shape, Rng& rng, S stddev = S(1), bool requires_grad = false) {
    auto n = Tensor<S>::numel_of(shape);
    std::vector<S> data(static_cast<std::size_t>(n));
    for (auto& v : data) v = static_cast<S>(rng.normal()) * stddev;
    return make_tensor<S>(std::move(shape), std::move(data), requires_grad);
}

namespace detail {

template <typename S>
void topo_sort(Tensor<S>* root, std::vector<Tensor<S>*>& order) {
    std::unordered_set<Tensor<S>*> seen;
    std::vector<std::pair<Tensor<S>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor<S>* p = node->parents[next++].get();
            if (p->backward_fn && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Reverse-mode backward from a scalar root. Frees graph links afterwards
// unless retain_graph is set.
template <typename S>
void backward(const TensorPtr<S>& root, bool retain_graph = false) {
    if (root->numel() != 1)
        throw shape_error(cat("backward() root must be scalar, got ", shape_str(root->shape)));
    std::vector<Tensor<S>*> order;
    detail::topo_sort(root.get(), order);
    root->ensure_grad();
    root->grad[0] = S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Tensor<S>* node = *it;
        if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
    }
    if (!retain_graph) {
        for (Tensor<S>* node : order) {
            node->backward_fn = nullptr;
            node->parents.clear();
        }
    }
}

// Named learnable parameters; std::map keeps iteration lexicographic.
template <typename S>
class ParamSet {
public:
    using Map = std::map<std::string, TensorPtr<S>>;

    void add(const std::string& name, TensorPtr<S> t) {
        t->requires_grad = true;
        auto [it, inserted] = params_.emplace(name, std::move(t));
        if (!inserted) throw error(cat("duplicate parameter name '", name, "'"));
    }

    TensorPtr<S> at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw error(cat("unknown parameter '", name, "'"));
        return it->second;
    }

    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    void zero_grad() {
        for (auto& [name, t] : params_) t->zero_grad();
    }

    std::int64_t total_size() const {
        std::int64_t n = 0;
        for (auto& [name, t] : params_) n += t->numel();
        return n;
    }

    typename Map::const_iterator begin() const { return params_.begin(); }
    typename Map::const_iterator end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

private:
    Map params_;
};

}  // namespace csen
