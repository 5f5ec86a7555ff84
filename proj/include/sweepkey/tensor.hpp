#pragma once

// Dense row-major tensor with tape-based reverse-mode differentiation.
// Tensors are immutable values once created by an op; leaves expose mutable
// storage for the optimizer. Forward evaluation uses a fixed reduction order
// everywhere, so results are bit-reproducible across runs and thread counts.

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace sweepkey {

class TensorError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

template <class T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // reads this->grad, accumulates into parents
    const char* op = "leaf";

    std::size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

// When set, ops produce plain values without recording the tape. Used for
// inference and the finite-difference loops of the gradient checker.
inline thread_local int no_grad_depth = 0;

} // namespace detail

struct NoGradGuard {
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

template <class T>
class Tensor {
public:
    Tensor() = default;

    // Trainable leaf.
    static Tensor leaf(Shape shape, std::vector<T> data) {
        return make(std::move(shape), std::move(data), true, "leaf");
    }
    // Non-trainable input. Values are taken as given; ops validate their
    // own outputs.
    static Tensor constant(Shape shape, std::vector<T> data) {
        return make(std::move(shape), std::move(data), false, "constant");
    }
    static Tensor scalar(T v) { return constant({}, {v}); }
    static Tensor zeros(Shape shape) {
        std::size_t n = shape_numel(shape);
        return constant(std::move(shape), std::vector<T>(n, T(0)));
    }

    bool valid() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    std::size_t numel() const { return n_->value.size(); }
    const std::vector<T>& value() const { return n_->value; }
    bool requires_grad() const { return n_->requires_grad; }
    const char* op_name() const { return n_->op; }

    // Scalar convenience.
    T item() const {
        if (n_->value.size() != 1)
            throw TensorError("item(): tensor is not a scalar, shape " + shape_str(n_->shape));
        return n_->value[0];
    }

    // Mutable access for the optimizer / loaders. Only valid on leaves and
    // constants; graphs must be rebuilt after mutation.
    std::vector<T>& mutable_value() {
        if (!n_->parents.empty())
            throw TensorError("mutable_value(): only leaf tensors may be mutated");
        return n_->value;
    }

    const std::vector<T>& grad() const { return n_->grad; }

    std::shared_ptr<detail::Node<T>> node() const { return n_; }
    explicit Tensor(std::shared_ptr<detail::Node<T>> n) : n_(std::move(n)) {}

private:
    static Tensor make(Shape shape, std::vector<T> data, bool req, const char* op) {
        if (shape_numel(shape) != data.size())
            throw TensorError(std::string(op) + ": data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = req;
        n->op = op;
        return Tensor(std::move(n));
    }

    std::shared_ptr<detail::Node<T>> n_;
};

namespace detail {

template <class T>
void check_finite(const char* op, const std::vector<T>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i]))
            throw TensorError(std::string(op) + ": produced non-finite value at index " +
                              std::to_string(i));
    }
}

// Build an op node. `backprop` reads node.grad and accumulates into the
// grads of requires_grad parents (which are pre-allocated by backward()).
template <class T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(Node<T>&)> backprop) {
    check_finite(op, value);
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    bool req = false;
    if (grad_enabled()) {
        for (const auto& in : inputs) req = req || in.requires_grad();
    }
    n->requires_grad = req;
    if (req) {
        n->parents.reserve(inputs.size());
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backprop = std::move(backprop);
    }
    return Tensor<T>(std::move(n));
}

template <class T>
void topo_order(Node<T>* root, std::vector<Node<T>*>& order) {
    // Iterative post-order DFS; each node visited exactly once.
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    seen.insert(root);
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node<T>* p = node->parents[idx++].get();
            if (p->requires_grad && seen.insert(p).second)
                stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

} // namespace detail

// Reverse-mode gradients of a scalar loss with respect to params. Params that
// do not appear in the graph get zero gradients.
template <class T>
std::vector<std::vector<T>> grad(const Tensor<T>& loss,
                                 const std::vector<Tensor<T>>& params) {
    if (loss.numel() != 1)
        throw TensorError("grad: loss must be scalar, got shape " + shape_str(loss.shape()));
    auto* root = loss.node().get();
    std::vector<detail::Node<T>*> order;
    if (root->requires_grad) {
        detail::topo_order(root, order);
        for (auto* n : order) n->grad.assign(n->value.size(), T(0));
        root->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::Node<T>* n = *it;
            if (n->backprop) n->backprop(*n);
        }
    }
    std::vector<std::vector<T>> out;
    out.reserve(params.size());
    for (const auto& p : params) {
        auto* pn = p.node().get();
        if (pn->grad.size() == pn->value.size())
            out.push_back(pn->grad);
        else
            out.push_back(std::vector<T>(pn->numel(), T(0)));
    }
    // Drop accumulated grads so repeated calls never double-count.
    for (auto* n : order) n->grad.clear();
    return out;
}

} // namespace sweepkey
