#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "sarl/tensor.hpp"

namespace sarl::ad {

// Dynamic reverse-mode tape. Nodes are created in evaluation order, so the
// creation order is already a topological order and backward is a single
// reverse sweep. A Graph owns one step's computation; it is discarded after
// the gradients are read out.
template <class T>
class Graph;

template <class T>
struct Var {
    Graph<T>* g = nullptr;
    int idx = -1;

    bool valid() const { return g != nullptr; }
    const Tensor<T>& val() const;
};

template <class T>
class Graph {
public:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;  // allocated only when needs_grad
        std::function<void(Graph&, Node&)> back;
        bool needs_grad = false;
    };

    // Trainable input; gradient retrievable after backward().
    Var<T> leaf(const Tensor<T>& t) {
        Var<T> v = push(Tensor<T>(t), true, nullptr);
        return v;
    }

    // Stop-gradient input: participates in values only, never in gradients.
    Var<T> constant(Tensor<T> t) { return push(std::move(t), false, nullptr); }

    Var<T> make(Tensor<T> val, bool needs_grad, std::function<void(Graph&, Node&)> back) {
        return push(std::move(val), needs_grad, std::move(back));
    }

    Node& node(int i) { return *nodes_[i]; }
    const Node& node(int i) const { return *nodes_[i]; }

    const Tensor<T>& val(const Var<T>& v) const { return nodes_[v.idx]->val; }

    // Accumulate into a node's gradient buffer (no-op for stop-gradient nodes).
    Tensor<T>* grad_buf(int i) {
        Node& n = *nodes_[i];
        return n.needs_grad ? &n.grad : nullptr;
    }

    void backward(const Var<T>& loss) {
        Node& ln = node(loss.idx);
        if (ln.val.size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        if (!ln.needs_grad) return;  // loss independent of all leaves
        ln.grad[0] = T(1);
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = *nodes_[i];
            if (n.needs_grad && n.back) n.back(*this, n);
        }
    }

    const Tensor<T>& grad(const Var<T>& v) const {
        const Node& n = node(v.idx);
        if (!n.needs_grad) throw std::logic_error("grad: node does not carry gradients");
        return n.grad;
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    Var<T> push(Tensor<T> val, bool needs_grad, std::function<void(Graph&, Node&)> back) {
        auto n = std::make_unique<Node>();
        n->val = std::move(val);
        n->needs_grad = needs_grad;
        if (needs_grad) n->grad = Tensor<T>(n->val.shape);
        n->back = std::move(back);
        nodes_.push_back(std::move(n));
        return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
    }

    std::vector<std::unique_ptr<Node>> nodes_;
};

template <class T>
const Tensor<T>& Var<T>::val() const {
    return g->val(*this);
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (!av.same_shape(bv)) throw std::invalid_argument("add: shape mismatch");
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    bool ng = a.g->node(a.idx).needs_grad || b.g->node(b.idx).needs_grad;
    int ai = a.idx, bi = b.idx;
    return a.g->make(std::move(out), ng, [ai, bi](Graph<T>& g, typename Graph<T>::Node& n) {
        if (auto* ga = g.grad_buf(ai))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
        if (auto* gb = g.grad_buf(bi))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*gb)[i] += n.grad[i];
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (!av.same_shape(bv)) throw std::invalid_argument("sub: shape mismatch");
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    bool ng = a.g->node(a.idx).needs_grad || b.g->node(b.idx).needs_grad;
    int ai = a.idx, bi = b.idx;
    return a.g->make(std::move(out), ng, [ai, bi](Graph<T>& g, typename Graph<T>::Node& n) {
        if (auto* ga = g.grad_buf(ai))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
        if (auto* gb = g.grad_buf(bi))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*gb)[i] -= n.grad[i];
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    const auto& av = a.val();
    const auto& bv = b.val();
    if (!av.same_shape(bv)) throw std::invalid_argument("mul: shape mismatch");
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    bool ng = a.g->node(a.idx).needs_grad || b.g->node(b.idx).needs_grad;
    int ai = a.idx, bi = b.idx;
    return a.g->make(std::move(out), ng, [ai, bi](Graph<T>& g, typename Graph<T>::Node& n) {
        const auto& av2 = g.node(ai).val;
        const auto& bv2 = g.node(bi).val;
        if (auto* ga = g.grad_buf(ai))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i] * bv2[i];
        if (auto* gb = g.grad_buf(bi))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*gb)[i] += n.grad[i] * av2[i];
    });
}

template <class T>
Var<T> scale(Var<T> a, T c) {
    Tensor<T> out(a.val().shape);
    const auto& av = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
    int ai = a.idx;
    bool ng = a.g->node(a.idx).needs_grad;
    return a.g->make(std::move(out), ng, [ai, c](Graph<T>& g, typename Graph<T>::Node& n) {
        if (auto* ga = g.grad_buf(ai))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i] * c;
    });
}

template <class T>
Var<T> add_scalar(Var<T> a, T c) {
    Tensor<T> out(a.val().shape);
    const auto& av = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
    int ai = a.idx;
    bool ng = a.g->node(a.idx).needs_grad;
    return a.g->make(std::move(out), ng, [ai](Graph<T>& g, typename Graph<T>::Node& n) {
        if (auto* ga = g.grad_buf(ai))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
    });
}

template <class T>
Var<T> sub_const(Var<T> a, const Tensor<T>& c) {
    const auto& av = a.val();
    if (av.shape != c.shape) throw std::invalid_argument("sub_const: shape mismatch");
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] - c[i];
    int ai = a.idx;
    bool ng = a.g->node(a.idx).needs_grad;
    return a.g->make(std::move(out), ng, [ai](Graph<T>& g, typename Graph<T>::Node& n) {
        if (auto* ga = g.grad_buf(ai))
            for (int64_t i = 0; i < n.grad.size(); ++i) (*ga)[i] += n.grad[i];
    });
}

template <class T>
Var<T> square(Var<T> a) {
    return mul(a, a);
}

template <class T>
Var<T> sum(Var<T> a) {
    const auto& av = a.val();
    T s = 0;
    for (int64_t i = 0; i < av.size(); ++i) s += av[i];
    int ai = a.idx;
    bool ng = a.g->node(a.idx).needs_grad;
    return a.g->make(Tensor<T>::scalar(s), ng, [ai](Graph<T>& g, typename Graph<T>::Node& n) {
        if (auto* ga = g.grad_buf(ai)) {
            T up = n.grad[0];
            for (int64_t i = 0; i < ga->size(); ++i) (*ga)[i] += up;
        }
    });
}

template <class T>
Var<T> mean(Var<T> a) {
    return scale(sum(a), T(1) / static_cast<T>(a.val().size()));
}

template <class T>
Var<T> relu(Var<T> a) {
    const auto& av = a.val();
    Tensor<T> out(av.shape);
    for (int64_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
    int ai = a.idx;
    bool ng = a.g->node(a.idx).needs_grad;
    return a.g->make(std::move(out), ng, [ai](Graph<T>& g, typename Graph<T>::Node& n) {
        if (auto* ga = g.grad_buf(ai)) {
            const auto& av2 = g.node(ai).val;
            for (int64_t i = 0; i < n.grad.size(); ++i)
                if (av2[i] > T(0)) (*ga)[i] += n.grad[i];
        }
    });
}

// Gather a list of flat indices out of a tensor; backward scatters.
template <class T>
Var<T> gather(Var<T> a, std::vector<int64_t> idx) {
    const auto& av = a.val();
    Tensor<T> out({static_cast<int>(idx.size())});
    for (size_t k = 0; k < idx.size(); ++k) out[k] = av[idx[k]];
    int ai = a.idx;
    bool ng = a.g->node(a.idx).needs_grad;
    return a.g->make(std::move(out), ng,
                     [ai, idx = std::move(idx)](Graph<T>& g, typename Graph<T>::Node& n) {
                         if (auto* ga = g.grad_buf(ai))
                             for (size_t k = 0; k < idx.size(); ++k) (*ga)[idx[k]] += n.grad[k];
                     });
}

}  // namespace sarl::ad
