#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cdt/error.hpp"
#include "cdt/rng.hpp"

namespace cdt {

// All tensor storage is 64-byte aligned so SIMD peel/tail decisions inside
// vectorized kernels depend only on shapes, never on heap addresses. This is
// what makes reruns byte-identical.
template <typename T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::size_t kAlign = 64;

    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U>&) {}

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(kAlign)));
    }
    void deallocate(T* p, std::size_t n) {
        ::operator delete(p, n * sizeof(T), std::align_val_t(kAlign));
    }
    template <typename U>
    bool operator==(const AlignedAllocator<U>&) const { return true; }
    template <typename U>
    bool operator!=(const AlignedAllocator<U>&) const { return false; }
};

template <typename T>
using AlignedVec = std::vector<T, AlignedAllocator<T>>;

template <typename T>
struct TensorData {
    std::vector<std::size_t> shape;
    AlignedVec<T> v;  // row-major values
    bool requires_grad = false;
    AlignedVec<T> g;  // gradient buffer, allocated on demand
    std::string name;

    std::size_t numel() const { return v.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    void ensure_grad() {
        if (g.size() != v.size()) g.assign(v.size(), T(0));
    }
    void zero_grad() { std::fill(g.begin(), g.end(), T(0)); }
};

template <typename T>
using TensorPtr = std::shared_ptr<TensorData<T>>;

namespace detail {
inline std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (const std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}
}  // namespace detail

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::size_t> shape, AlignedVec<T> values,
                         bool requires_grad = false) {
    if (values.size() != detail::shape_numel(shape))
        throw ShapeError("tensor value count " + std::to_string(values.size()) +
                         " does not match shape " + detail::shape_str(shape));
    auto t = std::make_shared<TensorData<T>>();
    t->shape = std::move(shape);
    t->v = std::move(values);
    t->requires_grad = requires_grad;
    return t;
}

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::size_t> shape, const std::vector<T>& values,
                         bool requires_grad = false) {
    return make_tensor<T>(std::move(shape), AlignedVec<T>(values.begin(), values.end()),
                          requires_grad);
}

template <typename T>
TensorPtr<T> make_tensor(std::vector<std::size_t> shape, std::initializer_list<T> values,
                         bool requires_grad = false) {
    return make_tensor<T>(std::move(shape), AlignedVec<T>(values.begin(), values.end()),
                          requires_grad);
}

template <typename T>
TensorPtr<T> zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    return make_tensor<T>(std::move(shape), AlignedVec<T>(n, T(0)), requires_grad);
}

template <typename T>
TensorPtr<T> full(std::vector<std::size_t> shape, T value, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    return make_tensor<T>(std::move(shape), AlignedVec<T>(n, value), requires_grad);
}

template <typename T>
TensorPtr<T> randn(std::vector<std::size_t> shape, RngStream& rng, double mean = 0.0,
                   double sd = 1.0, bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    AlignedVec<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.normal(mean, sd));
    return make_tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
TensorPtr<T> uniform(std::vector<std::size_t> shape, RngStream& rng, double lo, double hi,
                     bool requires_grad = false) {
    const std::size_t n = detail::shape_numel(shape);
    AlignedVec<T> v(n);
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return make_tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
TensorPtr<T> clone_detached(const TensorPtr<T>& t) {
    auto c = std::make_shared<TensorData<T>>();
    c->shape = t->shape;
    c->v = t->v;
    c->requires_grad = false;
    c->name = t->name;
    return c;
}

// Records the forward graph in execution order; a reverse sweep visits each
// node exactly once, which is a valid topological order because every op's
// inputs were created before its output.
template <typename T>
class Tape {
  public:
    struct Node {
        const char* op;
        std::vector<TensorPtr<T>> inputs;
        TensorPtr<T> output;
        std::function<void()> pull;  // accumulates output->g into input grads
    };

    void record(const char* op, std::vector<TensorPtr<T>> inputs, TensorPtr<T> output,
                std::function<void()> pull) {
        nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(pull)});
    }

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }

    // Standard entry point: seeds d(loss)/d(loss)=1, populates gradients of
    // every requires_grad tensor reachable from the tape, then consumes the
    // tape.
    void backward(const TensorPtr<T>& loss) {
        if (!loss || loss->numel() != 1)
            throw ContractError("backward: loss must be a scalar tensor");
        backward_seeded(loss, std::vector<T>{T(1)});
        clear();
    }

    // Seeded variant used for Jacobian extraction: grads are zeroed, the seed
    // is written onto `out`, and one reverse sweep runs. The tape stays alive
    // so callers can re-seed and sweep again.
    void backward_seeded(const TensorPtr<T>& out, const std::vector<T>& seed) {
        if (!out) throw ContractError("backward: null output tensor");
        if (seed.size() != out->numel())
            throw ShapeError("backward seed size " + std::to_string(seed.size()) +
                             " does not match output numel " + std::to_string(out->numel()));
        bool found = false;
        for (const auto& n : nodes_) {
            if (n.output == out) {
                found = true;
                break;
            }
        }
        if (!found) throw ContractError("backward: tensor is not an output of this tape");
        for (auto& n : nodes_) {
            n.output->ensure_grad();
            n.output->zero_grad();
            for (auto& in : n.inputs) {
                if (in->requires_grad) {
                    in->ensure_grad();
                    in->zero_grad();
                }
            }
        }
        std::copy(seed.begin(), seed.end(), out->g.begin());
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->pull();
    }

  private:
    std::vector<Node> nodes_;
};

}  // namespace cdt
