#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace msgr {

class Tensor;
using TensorPtr = std::shared_ptr<Tensor>;

// Dense row-major tensor of doubles with an optional reverse-mode tape.
// Data is immutable after construction except for the gradient accumulator;
// graph nodes own strong references to their inputs so a held output keeps
// its whole subgraph alive.
class Tensor : public std::enable_shared_from_this<Tensor> {
public:
    std::vector<int> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;

    // Inputs that require grad; used for the topological sweep.
    std::vector<TensorPtr> parents;
    std::function<void()> backward_fn;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<double> d, bool rg = false)
        : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
        if (requires_grad) grad.assign(data.size(), 0.0);
    }

    static TensorPtr create(std::vector<int> shape, bool requires_grad = false) {
        std::size_t n = count(shape);
        return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }
    static TensorPtr from_data(std::vector<int> shape, std::vector<double> d, bool requires_grad = false) {
        if (count(shape) != d.size()) throw std::invalid_argument("tensor: shape/data size mismatch");
        return std::make_shared<Tensor>(std::move(shape), std::move(d), requires_grad);
    }
    static TensorPtr scalar(double v) { return from_data({1}, {v}); }
    static TensorPtr full(std::vector<int> shape, double v, bool requires_grad = false) {
        std::size_t n = count(shape);
        return std::make_shared<Tensor>(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int e : s) {
            if (e <= 0) throw std::invalid_argument("tensor: nonpositive extent");
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    bool is_leaf() const { return !backward_fn; }

    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    double value() const {
        if (numel() != 1) throw std::logic_error("tensor: value() on non-scalar");
        return data[0];
    }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
        os << "]";
        return os.str();
    }
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline TensorPtr make_node(std::vector<int> shape, std::vector<TensorPtr> grad_parents) {
    auto out = Tensor::create(std::move(shape));
    for (const auto& p : grad_parents)
        if (p && p->requires_grad) {
            out->requires_grad = true;
            out->parents.push_back(p);
        }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Reverse-mode sweep. Gradients of leaf tensors accumulate across calls;
// interior scratch gradients are reset per sweep, so calling backward twice
// without a reset doubles every leaf gradient exactly.
// ---------------------------------------------------------------------------
inline void backward(const TensorPtr& loss) {
    if (!loss) throw std::invalid_argument("backward: null loss");
    if (loss->numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (!std::isfinite(loss->data[0])) throw std::runtime_error("backward: non-finite loss");

    std::vector<Tensor*> order;
    std::unordered_set<Tensor*> seen;
    std::vector<std::pair<Tensor*, std::size_t>> stack;
    stack.emplace_back(loss.get(), 0);
    seen.insert(loss.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Tensor* p = node->parents[next++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Tensor* t : order) {
        if (!t->requires_grad) continue;
        t->ensure_grad();
        if (!t->is_leaf()) t->zero_grad();
    }

    if (!loss->requires_grad) return;
    loss->ensure_grad();
    if (loss->is_leaf())
        loss->grad[0] += 1.0;
    else
        loss->grad[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------
inline TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
    detail::require(detail::same_shape(*a, *b), "add: shape mismatch " + a->shape_str() + " vs " + b->shape_str());
    auto out = detail::make_node(a->shape, {a, b});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb]() {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i) pa->grad[i] += o->grad[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i) pb->grad[i] += o->grad[i];
        };
    }
    return out;
}

inline TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
    detail::require(detail::same_shape(*a, *b), "sub: shape mismatch " + a->shape_str() + " vs " + b->shape_str());
    auto out = detail::make_node(a->shape, {a, b});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb]() {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i) pa->grad[i] += o->grad[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i) pb->grad[i] -= o->grad[i];
        };
    }
    return out;
}

inline TensorPtr mul(const TensorPtr& a, const TensorPtr& b) {
    detail::require(detail::same_shape(*a, *b), "mul: shape mismatch " + a->shape_str() + " vs " + b->shape_str());
    auto out = detail::make_node(a->shape, {a, b});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb]() {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i) pa->grad[i] += o->grad[i] * pb->data[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i) pb->grad[i] += o->grad[i] * pa->data[i];
        };
    }
    return out;
}

inline TensorPtr div(const TensorPtr& a, const TensorPtr& b) {
    detail::require(detail::same_shape(*a, *b), "div: shape mismatch " + a->shape_str() + " vs " + b->shape_str());
    auto out = detail::make_node(a->shape, {a, b});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] / b->data[i];
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb]() {
            if (pa->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i) pa->grad[i] += o->grad[i] / pb->data[i];
            if (pb->requires_grad)
                for (std::size_t i = 0; i < o->numel(); ++i)
                    pb->grad[i] -= o->grad[i] * pa->data[i] / (pb->data[i] * pb->data[i]);
        };
    }
    return out;
}

// k*x + c
inline TensorPtr affine(const TensorPtr& x, double k, double c) {
    auto out = detail::make_node(x->shape, {x});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = k * x->data[i] + c;
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, k]() {
            for (std::size_t i = 0; i < o->numel(); ++i) px->grad[i] += k * o->grad[i];
        };
    }
    return out;
}

inline TensorPtr neg(const TensorPtr& x) { return affine(x, -1.0, 0.0); }

// |x|; subgradient 0 at the kink
inline TensorPtr abs(const TensorPtr& x) {
    auto out = detail::make_node(x->shape, {x});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = std::fabs(x->data[i]);
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px]() {
            for (std::size_t i = 0; i < o->numel(); ++i) {
                double v = px->data[i];
                double s = (v > 0.0) ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
                px->grad[i] += s * o->grad[i];
            }
        };
    }
    return out;
}

inline TensorPtr square(const TensorPtr& x) { return mul(x, x); }

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------
inline TensorPtr sigmoid(const TensorPtr& x) {
    auto out = detail::make_node(x->shape, {x});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = 1.0 / (1.0 + std::exp(-x->data[i]));
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px]() {
            for (std::size_t i = 0; i < o->numel(); ++i) {
                double s = o->data[i];
                px->grad[i] += s * (1.0 - s) * o->grad[i];
            }
        };
    }
    return out;
}

inline TensorPtr relu(const TensorPtr& x) {
    auto out = detail::make_node(x->shape, {x});
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = x->data[i] > 0.0 ? x->data[i] : 0.0;
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px]() {
            for (std::size_t i = 0; i < o->numel(); ++i)
                if (px->data[i] > 0.0) px->grad[i] += o->grad[i];
        };
    }
    return out;
}

// Softmax along one axis, max-subtracted for stability. Slices along the axis
// sum to 1.
inline TensorPtr softmax(const TensorPtr& x, int axis) {
    int nd = static_cast<int>(x->shape.size());
    detail::require(axis >= 0 && axis < nd, "softmax: axis out of range");
    std::size_t axis_len = static_cast<std::size_t>(x->shape[static_cast<std::size_t>(axis)]);
    std::size_t inner = 1, outer = 1;
    for (int i = axis + 1; i < nd; ++i) inner *= static_cast<std::size_t>(x->shape[static_cast<std::size_t>(i)]);
    for (int i = 0; i < axis; ++i) outer *= static_cast<std::size_t>(x->shape[static_cast<std::size_t>(i)]);

    auto out = detail::make_node(x->shape, {x});
    for (std::size_t ou = 0; ou < outer; ++ou) {
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = ou * axis_len * inner + in;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < axis_len; ++k) m = std::max(m, x->data[base + k * inner]);
            double denom = 0.0;
            for (std::size_t k = 0; k < axis_len; ++k) {
                double e = std::exp(x->data[base + k * inner] - m);
                out->data[base + k * inner] = e;
                denom += e;
            }
            for (std::size_t k = 0; k < axis_len; ++k) out->data[base + k * inner] /= denom;
        }
    }
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, axis_len, inner, outer]() {
            for (std::size_t ou = 0; ou < outer; ++ou) {
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = ou * axis_len * inner + in;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < axis_len; ++k)
                        dot += o->grad[base + k * inner] * o->data[base + k * inner];
                    for (std::size_t k = 0; k < axis_len; ++k) {
                        std::size_t idx = base + k * inner;
                        px->grad[idx] += o->data[idx] * (o->grad[idx] - dot);
                    }
                }
            }
        };
    }
    return out;
}

enum class Activation { Sigmoid, Relu, Softmax };

inline TensorPtr activate(const TensorPtr& x, Activation fn, int axis = 0) {
    switch (fn) {
        case Activation::Sigmoid: return sigmoid(x);
        case Activation::Relu: return relu(x);
        case Activation::Softmax: return softmax(x, axis);
    }
    throw std::invalid_argument("activate: unknown function");
}

// ---------------------------------------------------------------------------
// Reductions and shape manipulation
// ---------------------------------------------------------------------------
inline TensorPtr sum(const TensorPtr& x) {
    auto out = detail::make_node({1}, {x});
    out->data[0] = std::accumulate(x->data.begin(), x->data.end(), 0.0);
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px]() {
            double g = o->grad[0];
            for (std::size_t i = 0; i < px->numel(); ++i) px->grad[i] += g;
        };
    }
    return out;
}

inline TensorPtr mean(const TensorPtr& x) {
    auto out = sum(x);
    return affine(out, 1.0 / static_cast<double>(x->numel()), 0.0);
}

inline TensorPtr reshape(const TensorPtr& x, std::vector<int> new_shape) {
    detail::require(Tensor::count(new_shape) == x->numel(), "reshape: element count mismatch");
    auto out = detail::make_node(std::move(new_shape), {x});
    out->data = x->data;
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px]() {
            for (std::size_t i = 0; i < o->numel(); ++i) px->grad[i] += o->grad[i];
        };
    }
    return out;
}

// [C,H,W] -> [1,H,W]
inline TensorPtr sum_channels(const TensorPtr& x) {
    detail::require(x->shape.size() == 3, "sum_channels: expects [C,H,W]");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    std::size_t hw = static_cast<std::size_t>(H) * W;
    auto out = detail::make_node({1, H, W}, {x});
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < hw; ++i) out->data[i] += x->data[static_cast<std::size_t>(c) * hw + i];
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, C, hw]() {
            for (int c = 0; c < C; ++c)
                for (std::size_t i = 0; i < hw; ++i) px->grad[static_cast<std::size_t>(c) * hw + i] += o->grad[i];
        };
    }
    return out;
}

// [1,H,W] -> [C,H,W]
inline TensorPtr broadcast_c(const TensorPtr& x, int C) {
    detail::require(x->shape.size() == 3 && x->shape[0] == 1, "broadcast_c: expects [1,H,W]");
    int H = x->shape[1], W = x->shape[2];
    std::size_t hw = static_cast<std::size_t>(H) * W;
    auto out = detail::make_node({C, H, W}, {x});
    for (int c = 0; c < C; ++c)
        std::copy(x->data.begin(), x->data.end(), out->data.begin() + static_cast<std::size_t>(c) * hw);
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, C, hw]() {
            for (int c = 0; c < C; ++c)
                for (std::size_t i = 0; i < hw; ++i) px->grad[i] += o->grad[static_cast<std::size_t>(c) * hw + i];
        };
    }
    return out;
}

// [C] or [C,1,1] -> [C,H,W]
inline TensorPtr broadcast_hw(const TensorPtr& x, int H, int W) {
    int C;
    if (x->shape.size() == 1)
        C = x->shape[0];
    else if (x->shape.size() == 3 && x->shape[1] == 1 && x->shape[2] == 1)
        C = x->shape[0];
    else
        throw std::invalid_argument("broadcast_hw: expects [C] or [C,1,1]");
    std::size_t hw = static_cast<std::size_t>(H) * W;
    auto out = detail::make_node({C, H, W}, {x});
    for (int c = 0; c < C; ++c)
        std::fill_n(out->data.begin() + static_cast<std::size_t>(c) * hw, hw, x->data[static_cast<std::size_t>(c)]);
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, C, hw]() {
            for (int c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t i = 0; i < hw; ++i) acc += o->grad[static_cast<std::size_t>(c) * hw + i];
                px->grad[static_cast<std::size_t>(c)] += acc;
            }
        };
    }
    return out;
}

inline TensorPtr concat_channels(const std::vector<TensorPtr>& parts) {
    detail::require(!parts.empty(), "concat_channels: empty input");
    int H = parts[0]->shape.at(1), W = parts[0]->shape.at(2);
    int C = 0;
    for (const auto& p : parts) {
        detail::require(p->shape.size() == 3 && p->shape[1] == H && p->shape[2] == W,
                        "concat_channels: spatial extent mismatch");
        C += p->shape[0];
    }
    auto out = detail::make_node({C, H, W}, parts);
    std::size_t off = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.begin() + static_cast<std::ptrdiff_t>(off));
        off += p->numel();
    }
    if (out->requires_grad) {
        Tensor* o = out.get();
        std::vector<TensorPtr> ps = parts;
        out->backward_fn = [o, ps]() {
            std::size_t off2 = 0;
            for (const auto& p : ps) {
                if (p->requires_grad)
                    for (std::size_t i = 0; i < p->numel(); ++i) p->grad[i] += o->grad[off2 + i];
                off2 += p->numel();
            }
        };
    }
    return out;
}

inline TensorPtr slice_channels(const TensorPtr& x, int c0, int c1) {
    detail::require(x->shape.size() == 3, "slice_channels: expects [C,H,W]");
    detail::require(0 <= c0 && c0 < c1 && c1 <= x->shape[0], "slice_channels: bad range");
    int H = x->shape[1], W = x->shape[2];
    std::size_t hw = static_cast<std::size_t>(H) * W;
    auto out = detail::make_node({c1 - c0, H, W}, {x});
    std::copy(x->data.begin() + static_cast<std::ptrdiff_t>(c0 * hw),
              x->data.begin() + static_cast<std::ptrdiff_t>(c1 * hw), out->data.begin());
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, c0, hw]() {
            std::size_t base = static_cast<std::size_t>(c0) * hw;
            for (std::size_t i = 0; i < o->numel(); ++i) px->grad[base + i] += o->grad[i];
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dense linear algebra
// ---------------------------------------------------------------------------
inline TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
    detail::require(a->shape.size() == 2 && b->shape.size() == 2, "matmul: expects 2-D operands");
    detail::require(a->shape[1] == b->shape[0], "matmul: inner extent mismatch");
    int M = a->shape[0], K = a->shape[1], N = b->shape[1];
    auto out = detail::make_node({M, N}, {a, b});
    for (int i = 0; i < M; ++i) {
        const double* arow = a->data.data() + static_cast<std::size_t>(i) * K;
        double* orow = out->data.data() + static_cast<std::size_t>(i) * N;
        for (int k = 0; k < K; ++k) {
            double av = arow[k];
            const double* brow = b->data.data() + static_cast<std::size_t>(k) * N;
            for (int j = 0; j < N; ++j) orow[j] += av * brow[j];
        }
    }
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a, pb = b;
        out->backward_fn = [o, pa, pb, M, K, N]() {
            if (pa->requires_grad) {
                for (int i = 0; i < M; ++i)
                    for (int k = 0; k < K; ++k) {
                        double acc = 0.0;
                        const double* grow = o->grad.data() + static_cast<std::size_t>(i) * N;
                        const double* brow = pb->data.data() + static_cast<std::size_t>(k) * N;
                        for (int j = 0; j < N; ++j) acc += grow[j] * brow[j];
                        pa->grad[static_cast<std::size_t>(i) * K + k] += acc;
                    }
            }
            if (pb->requires_grad) {
                for (int k = 0; k < K; ++k) {
                    double* brow = pb->grad.data() + static_cast<std::size_t>(k) * N;
                    for (int i = 0; i < M; ++i) {
                        double av = pa->data[static_cast<std::size_t>(i) * K + k];
                        const double* grow = o->grad.data() + static_cast<std::size_t>(i) * N;
                        for (int j = 0; j < N; ++j) brow[j] += av * grow[j];
                    }
                }
            }
        };
    }
    return out;
}

inline TensorPtr transpose(const TensorPtr& a) {
    detail::require(a->shape.size() == 2, "transpose: expects 2-D");
    int M = a->shape[0], N = a->shape[1];
    auto out = detail::make_node({N, M}, {a});
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j)
            out->data[static_cast<std::size_t>(j) * M + i] = a->data[static_cast<std::size_t>(i) * N + j];
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr pa = a;
        out->backward_fn = [o, pa, M, N]() {
            for (int i = 0; i < M; ++i)
                for (int j = 0; j < N; ++j)
                    pa->grad[static_cast<std::size_t>(i) * N + j] += o->grad[static_cast<std::size_t>(j) * M + i];
        };
    }
    return out;
}

// y = W x + b, x flat [D], W [O,D], b [O] (b may be null)
inline TensorPtr linear(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b) {
    detail::require(w->shape.size() == 2, "linear: W must be [O,D]");
    int O = w->shape[0], D = w->shape[1];
    detail::require(static_cast<std::size_t>(D) == x->numel(), "linear: input dimension mismatch");
    if (b) detail::require(b->shape.size() == 1 && b->shape[0] == O, "linear: bias extent mismatch");
    std::vector<TensorPtr> ps = {x, w};
    if (b) ps.push_back(b);
    auto out = detail::make_node({O}, ps);
    for (int o = 0; o < O; ++o) {
        double acc = b ? b->data[static_cast<std::size_t>(o)] : 0.0;
        const double* wrow = w->data.data() + static_cast<std::size_t>(o) * D;
        for (int d = 0; d < D; ++d) acc += wrow[d] * x->data[static_cast<std::size_t>(d)];
        out->data[static_cast<std::size_t>(o)] = acc;
    }
    if (out->requires_grad) {
        Tensor* on = out.get();
        TensorPtr px = x, pw = w, pb = b;
        out->backward_fn = [on, px, pw, pb, O, D]() {
            for (int o = 0; o < O; ++o) {
                double g = on->grad[static_cast<std::size_t>(o)];
                if (g == 0.0) continue;
                const double* wrow = pw->data.data() + static_cast<std::size_t>(o) * D;
                if (px->requires_grad)
                    for (int d = 0; d < D; ++d) px->grad[static_cast<std::size_t>(d)] += g * wrow[d];
                if (pw->requires_grad) {
                    double* gw = pw->grad.data() + static_cast<std::size_t>(o) * D;
                    for (int d = 0; d < D; ++d) gw[d] += g * px->data[static_cast<std::size_t>(d)];
                }
                if (pb && pb->requires_grad) pb->grad[static_cast<std::size_t>(o)] += g;
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip)
// ---------------------------------------------------------------------------
namespace detail {

struct ConvDims {
    int C, H, W, O, KH, KW, HO, WO;
};

inline ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int dilation, int pad_h, int pad_w) {
    require(x.shape.size() == 3, "conv2d: input must be [C,H,W]");
    require(w.shape.size() == 4, "conv2d: weight must be [O,C,kh,kw]");
    require(stride >= 1 && dilation >= 1 && pad_h >= 0 && pad_w >= 0, "conv2d: bad hyperparameters");
    require(x.shape[0] == w.shape[1],
            "conv2d: channel mismatch, input " + x.shape_str() + " weight " + w.shape_str());
    ConvDims d{};
    d.C = x.shape[0];
    d.H = x.shape[1];
    d.W = x.shape[2];
    d.O = w.shape[0];
    d.KH = w.shape[2];
    d.KW = w.shape[3];
    require(d.H + 2 * pad_h >= dilation * (d.KH - 1) + 1 && d.W + 2 * pad_w >= dilation * (d.KW - 1) + 1,
            "conv2d: kernel larger than padded input");
    d.HO = (d.H + 2 * pad_h - dilation * (d.KH - 1) - 1) / stride + 1;
    d.WO = (d.W + 2 * pad_w - dilation * (d.KW - 1) - 1) / stride + 1;
    require(d.HO >= 1 && d.WO >= 1, "conv2d: empty output");
    return d;
}

} // namespace detail

inline TensorPtr conv2d_asym(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride, int dilation,
                             int pad_h, int pad_w) {
    auto d = detail::conv_dims(*x, *w, stride, dilation, pad_h, pad_w);
    if (b) detail::require(b->shape.size() == 1 && b->shape[0] == d.O, "conv2d: bias extent mismatch");
    std::vector<TensorPtr> ps = {x, w};
    if (b) ps.push_back(b);
    auto out = detail::make_node({d.O, d.HO, d.WO}, ps);

    const std::size_t ihw = static_cast<std::size_t>(d.H) * d.W;
    const std::size_t ohw = static_cast<std::size_t>(d.HO) * d.WO;
    const bool unit = (stride == 1);
    for (int o = 0; o < d.O; ++o) {
        double* oplane = out->data.data() + static_cast<std::size_t>(o) * ohw;
        if (b) std::fill_n(oplane, ohw, b->data[static_cast<std::size_t>(o)]);
        for (int c = 0; c < d.C; ++c) {
            const double* xplane = x->data.data() + static_cast<std::size_t>(c) * ihw;
            const double* wblock =
                w->data.data() + (static_cast<std::size_t>(o) * d.C + c) * d.KH * d.KW;
            for (int ky = 0; ky < d.KH; ++ky) {
                for (int kx = 0; kx < d.KW; ++kx) {
                    double wv = wblock[ky * d.KW + kx];
                    if (wv == 0.0) continue;
                    if (unit) {
                        // Stride-1 fast path: hoist the bounds tests into loop limits so
                        // the inner loop is a contiguous multiply-accumulate stream.
                        int sy = ky * dilation - pad_h, sx = kx * dilation - pad_w;
                        int oy0 = std::max(0, -sy), oy1 = std::min(d.HO - 1, d.H - 1 - sy);
                        int ox0 = std::max(0, -sx), ox1 = std::min(d.WO - 1, d.W - 1 - sx);
                        for (int oy = oy0; oy <= oy1; ++oy) {
                            const double* __restrict xrow =
                                xplane + static_cast<std::size_t>(oy + sy) * d.W + sx;
                            double* __restrict orow = oplane + static_cast<std::size_t>(oy) * d.WO;
                            for (int ox = ox0; ox <= ox1; ++ox) orow[ox] += wv * xrow[ox];
                        }
                        continue;
                    }
                    for (int oy = 0; oy < d.HO; ++oy) {
                        int iy = oy * stride - pad_h + ky * dilation;
                        if (iy < 0 || iy >= d.H) continue;
                        const double* xrow = xplane + static_cast<std::size_t>(iy) * d.W;
                        double* orow = oplane + static_cast<std::size_t>(oy) * d.WO;
                        for (int ox = 0; ox < d.WO; ++ox) {
                            int ix = ox * stride - pad_w + kx * dilation;
                            if (ix < 0 || ix >= d.W) continue;
                            orow[ox] += wv * xrow[ix];
                        }
                    }
                }
            }
        }
    }

    if (out->requires_grad) {
        Tensor* on = out.get();
        TensorPtr px = x, pw = w, pb = b;
        out->backward_fn = [on, px, pw, pb, d, stride, dilation, pad_h, pad_w, ihw, ohw]() {
            for (int o = 0; o < d.O; ++o) {
                const double* gplane = on->grad.data() + static_cast<std::size_t>(o) * ohw;
                if (pb && pb->requires_grad) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < ohw; ++i) acc += gplane[i];
                    pb->grad[static_cast<std::size_t>(o)] += acc;
                }
                for (int c = 0; c < d.C; ++c) {
                    const double* xplane = px->data.data() + static_cast<std::size_t>(c) * ihw;
                    double* gxplane = px->requires_grad ? px->grad.data() + static_cast<std::size_t>(c) * ihw : nullptr;
                    const std::size_t wbase = (static_cast<std::size_t>(o) * d.C + c) * d.KH * d.KW;
                    for (int ky = 0; ky < d.KH; ++ky) {
                        for (int kx = 0; kx < d.KW; ++kx) {
                            double wv = pw->data[wbase + ky * d.KW + kx];
                            double wacc = 0.0;
                            if (stride == 1) {
                                int sy = ky * dilation - pad_h, sx = kx * dilation - pad_w;
                                int oy0 = std::max(0, -sy), oy1 = std::min(d.HO - 1, d.H - 1 - sy);
                                int ox0 = std::max(0, -sx), ox1 = std::min(d.WO - 1, d.W - 1 - sx);
                                for (int oy = oy0; oy <= oy1; ++oy) {
                                    const double* __restrict xrow =
                                        xplane + static_cast<std::size_t>(oy + sy) * d.W + sx;
                                    const double* __restrict grow =
                                        gplane + static_cast<std::size_t>(oy) * d.WO;
                                    if (gxplane) {
                                        double* __restrict gxrow =
                                            gxplane + static_cast<std::size_t>(oy + sy) * d.W + sx;
                                        for (int ox = ox0; ox <= ox1; ++ox) {
                                            double g = grow[ox];
                                            wacc += g * xrow[ox];
                                            gxrow[ox] += g * wv;
                                        }
                                    } else {
                                        for (int ox = ox0; ox <= ox1; ++ox) wacc += grow[ox] * xrow[ox];
                                    }
                                }
                            } else {
                                for (int oy = 0; oy < d.HO; ++oy) {
                                    int iy = oy * stride - pad_h + ky * dilation;
                                    if (iy < 0 || iy >= d.H) continue;
                                    const double* xrow = xplane + static_cast<std::size_t>(iy) * d.W;
                                    const double* grow = gplane + static_cast<std::size_t>(oy) * d.WO;
                                    double* gxrow = gxplane ? gxplane + static_cast<std::size_t>(iy) * d.W : nullptr;
                                    for (int ox = 0; ox < d.WO; ++ox) {
                                        int ix = ox * stride - pad_w + kx * dilation;
                                        if (ix < 0 || ix >= d.W) continue;
                                        double g = grow[ox];
                                        wacc += g * xrow[ix];
                                        if (gxrow) gxrow[ix] += g * wv;
                                    }
                                }
                            }
                            if (pw->requires_grad) pw->grad[wbase + ky * d.KW + kx] += wacc;
                        }
                    }
                }
            }
        };
    }
    return out;
}

inline TensorPtr conv2d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int stride = 1,
                        int dilation = 1, int padding = 0) {
    return conv2d_asym(x, w, b, stride, dilation, padding, padding);
}

// 1-D convolution over [C,L] via the 2-D kernel with H=1.
inline TensorPtr conv1d(const TensorPtr& x, const TensorPtr& w, const TensorPtr& b, int padding) {
    detail::require(x->shape.size() == 2, "conv1d: input must be [C,L]");
    detail::require(w->shape.size() == 3, "conv1d: weight must be [O,C,k]");
    int C = x->shape[0], L = x->shape[1];
    int O = w->shape[0], K = w->shape[2];
    auto x3 = reshape(x, {C, 1, L});
    auto w4 = reshape(w, {O, w->shape[1], 1, K});
    auto y = conv2d_asym(x3, w4, b, 1, 1, 0, padding);
    return reshape(y, {O, y->shape[2]});
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

// Non-overlapping k x k window average; edge cells average the truncated window.
inline TensorPtr avg_pool(const TensorPtr& x, int k) {
    detail::require(x->shape.size() == 3, "avg_pool: expects [C,H,W]");
    detail::require(k >= 1, "avg_pool: window must be >= 1");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    int HO = (H + k - 1) / k, WO = (W + k - 1) / k;
    auto out = detail::make_node({C, HO, WO}, {x});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < HO; ++oy)
            for (int ox = 0; ox < WO; ++ox) {
                int y0 = oy * k, y1 = std::min(H, y0 + k);
                int x0 = ox * k, x1 = std::min(W, x0 + k);
                double acc = 0.0;
                for (int iy = y0; iy < y1; ++iy)
                    for (int ix = x0; ix < x1; ++ix)
                        acc += x->data[(static_cast<std::size_t>(c) * H + iy) * W + ix];
                out->data[(static_cast<std::size_t>(c) * HO + oy) * WO + ox] =
                    acc / static_cast<double>((y1 - y0) * (x1 - x0));
            }
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, C, H, W, HO, WO, k]() {
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < HO; ++oy)
                    for (int ox = 0; ox < WO; ++ox) {
                        int y0 = oy * k, y1 = std::min(H, y0 + k);
                        int x0 = ox * k, x1 = std::min(W, x0 + k);
                        double g = o->grad[(static_cast<std::size_t>(c) * HO + oy) * WO + ox] /
                                   static_cast<double>((y1 - y0) * (x1 - x0));
                        for (int iy = y0; iy < y1; ++iy)
                            for (int ix = x0; ix < x1; ++ix)
                                px->grad[(static_cast<std::size_t>(c) * H + iy) * W + ix] += g;
                    }
        };
    }
    return out;
}

// Output cell (oy,ox) averages rows [floor(oy*H/HO), ceil((oy+1)*H/HO)) etc.
inline TensorPtr adaptive_avg_pool(const TensorPtr& x, int HO, int WO) {
    detail::require(x->shape.size() == 3, "adaptive_avg_pool: expects [C,H,W]");
    detail::require(HO >= 1 && WO >= 1, "adaptive_avg_pool: zero-sized target");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    auto lo = [](int o, int n, int on) { return (o * n) / on; };
    auto hi = [](int o, int n, int on) { return ((o + 1) * n + on - 1) / on; };
    auto out = detail::make_node({C, HO, WO}, {x});
    for (int c = 0; c < C; ++c)
        for (int oy = 0; oy < HO; ++oy)
            for (int ox = 0; ox < WO; ++ox) {
                int y0 = lo(oy, H, HO), y1 = hi(oy, H, HO);
                int x0 = lo(ox, W, WO), x1 = hi(ox, W, WO);
                double acc = 0.0;
                for (int iy = y0; iy < y1; ++iy)
                    for (int ix = x0; ix < x1; ++ix)
                        acc += x->data[(static_cast<std::size_t>(c) * H + iy) * W + ix];
                out->data[(static_cast<std::size_t>(c) * HO + oy) * WO + ox] =
                    acc / static_cast<double>((y1 - y0) * (x1 - x0));
            }
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, C, H, W, HO, WO, lo, hi]() {
            for (int c = 0; c < C; ++c)
                for (int oy = 0; oy < HO; ++oy)
                    for (int ox = 0; ox < WO; ++ox) {
                        int y0 = lo(oy, H, HO), y1 = hi(oy, H, HO);
                        int x0 = lo(ox, W, WO), x1 = hi(ox, W, WO);
                        double g = o->grad[(static_cast<std::size_t>(c) * HO + oy) * WO + ox] /
                                   static_cast<double>((y1 - y0) * (x1 - x0));
                        for (int iy = y0; iy < y1; ++iy)
                            for (int ix = x0; ix < x1; ++ix)
                                px->grad[(static_cast<std::size_t>(c) * H + iy) * W + ix] += g;
                    }
        };
    }
    return out;
}

inline TensorPtr global_avg_pool(const TensorPtr& x) { return adaptive_avg_pool(x, 1, 1); }

// align-corners=false convention with index clamping at the borders
inline TensorPtr bilinear_upsample(const TensorPtr& x, int HO, int WO) {
    detail::require(x->shape.size() == 3, "bilinear_upsample: expects [C,H,W]");
    detail::require(HO >= 1 && WO >= 1, "bilinear_upsample: zero-sized target");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    double sy = static_cast<double>(H) / HO, sx = static_cast<double>(W) / WO;

    struct Tap {
        int i0, i1;
        double w1; // weight of i1; i0 gets (1 - w1)
    };
    std::vector<Tap> ty(static_cast<std::size_t>(HO)), tx(static_cast<std::size_t>(WO));
    auto make_tap = [](int o, double s, int n) {
        double src = (o + 0.5) * s - 0.5;
        double f = std::floor(src);
        Tap t;
        t.w1 = src - f;
        t.i0 = std::clamp(static_cast<int>(f), 0, n - 1);
        t.i1 = std::clamp(static_cast<int>(f) + 1, 0, n - 1);
        return t;
    };
    for (int oy = 0; oy < HO; ++oy) ty[static_cast<std::size_t>(oy)] = make_tap(oy, sy, H);
    for (int ox = 0; ox < WO; ++ox) tx[static_cast<std::size_t>(ox)] = make_tap(ox, sx, W);

    auto out = detail::make_node({C, HO, WO}, {x});
    for (int c = 0; c < C; ++c) {
        const double* xp = x->data.data() + static_cast<std::size_t>(c) * H * W;
        double* op = out->data.data() + static_cast<std::size_t>(c) * HO * WO;
        for (int oy = 0; oy < HO; ++oy) {
            const Tap& a = ty[static_cast<std::size_t>(oy)];
            for (int ox = 0; ox < WO; ++ox) {
                const Tap& b = tx[static_cast<std::size_t>(ox)];
                double v00 = xp[a.i0 * W + b.i0], v01 = xp[a.i0 * W + b.i1];
                double v10 = xp[a.i1 * W + b.i0], v11 = xp[a.i1 * W + b.i1];
                op[oy * WO + ox] = (1 - a.w1) * ((1 - b.w1) * v00 + b.w1 * v01) + a.w1 * ((1 - b.w1) * v10 + b.w1 * v11);
            }
        }
    }
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x;
        out->backward_fn = [o, px, C, H, W, HO, WO, ty, tx]() {
            for (int c = 0; c < C; ++c) {
                double* gx = px->grad.data() + static_cast<std::size_t>(c) * H * W;
                const double* go = o->grad.data() + static_cast<std::size_t>(c) * HO * WO;
                for (int oy = 0; oy < HO; ++oy) {
                    const Tap& a = ty[static_cast<std::size_t>(oy)];
                    for (int ox = 0; ox < WO; ++ox) {
                        const Tap& b = tx[static_cast<std::size_t>(ox)];
                        double g = go[oy * WO + ox];
                        gx[a.i0 * W + b.i0] += (1 - a.w1) * (1 - b.w1) * g;
                        gx[a.i0 * W + b.i1] += (1 - a.w1) * b.w1 * g;
                        gx[a.i1 * W + b.i0] += a.w1 * (1 - b.w1) * g;
                        gx[a.i1 * W + b.i1] += a.w1 * b.w1 * g;
                    }
                }
            }
        };
    }
    return out;
}

struct ResampleSpec {
    enum class Mode { AvgPool, AdaptiveAvgPool, BilinearUpsample, GlobalAvgPool } mode;
    int k = 0; // AvgPool window
    int h = 0, w = 0;
};

inline TensorPtr resample(const TensorPtr& x, const ResampleSpec& spec) {
    using M = ResampleSpec::Mode;
    switch (spec.mode) {
        case M::AvgPool: return avg_pool(x, spec.k);
        case M::AdaptiveAvgPool: return adaptive_avg_pool(x, spec.h, spec.w);
        case M::BilinearUpsample: return bilinear_upsample(x, spec.h, spec.w);
        case M::GlobalAvgPool: return global_avg_pool(x);
    }
    throw std::invalid_argument("resample: unknown mode");
}

// ---------------------------------------------------------------------------
// Grid sampling
// ---------------------------------------------------------------------------

struct GridSampleResult {
    TensorPtr values;   // [C,H',W']
    TensorPtr validity; // [1,H',W'], constant (no grad), 1 where all 4 neighbors in bounds
};

// coords: [2,H',W'] of continuous source (u,v): plane 0 = u (column), plane 1 = v (row).
// Integer coordinates address pixel centers; a site is valid when it lies in
// [0,W-1] x [0,H-1] (borders included, so an identity grid reproduces the
// input exactly). Out-of-bounds sites return 0 and propagate no gradient.
inline GridSampleResult grid_sample(const TensorPtr& x, const TensorPtr& coords) {
    detail::require(x->shape.size() == 3, "grid_sample: input must be [C,H,W]");
    detail::require(coords->shape.size() == 3 && coords->shape[0] == 2, "grid_sample: coords must be [2,H',W']");
    int C = x->shape[0], H = x->shape[1], W = x->shape[2];
    int HO = coords->shape[1], WO = coords->shape[2];
    std::size_t n = static_cast<std::size_t>(HO) * WO;
    for (std::size_t i = 0; i < 2 * n; ++i)
        detail::require(std::isfinite(coords->data[i]), "grid_sample: non-finite coordinate");

    auto in_bounds = [W, H](double u, double v) {
        return W >= 2 && H >= 2 && u >= 0.0 && u <= W - 1.0 && v >= 0.0 && v <= H - 1.0;
    };
    auto base = [](double t, int nmax) { return std::min(static_cast<int>(std::floor(t)), nmax - 2); };

    auto out = detail::make_node({C, HO, WO}, {x, coords});
    auto validity = Tensor::create({1, HO, WO});
    for (std::size_t i = 0; i < n; ++i) {
        double u = coords->data[i];
        double v = coords->data[n + i];
        if (!in_bounds(u, v)) continue;
        validity->data[i] = 1.0;
        int u0 = base(u, W), v0 = base(v, H);
        double fu = u - u0, fv = v - v0;
        for (int c = 0; c < C; ++c) {
            const double* xp = x->data.data() + static_cast<std::size_t>(c) * H * W;
            double v00 = xp[v0 * W + u0], v01 = xp[v0 * W + u0 + 1];
            double v10 = xp[(v0 + 1) * W + u0], v11 = xp[(v0 + 1) * W + u0 + 1];
            out->data[static_cast<std::size_t>(c) * n + i] =
                (1 - fv) * ((1 - fu) * v00 + fu * v01) + fv * ((1 - fu) * v10 + fu * v11);
        }
    }
    if (out->requires_grad) {
        Tensor* o = out.get();
        TensorPtr px = x, pc = coords;
        out->backward_fn = [o, px, pc, C, H, W, n, in_bounds, base]() {
            for (std::size_t i = 0; i < n; ++i) {
                double u = pc->data[i];
                double v = pc->data[n + i];
                if (!in_bounds(u, v)) continue;
                int u0 = base(u, W), v0 = base(v, H);
                double fu = u - u0, fv = v - v0;
                double du = 0.0, dv = 0.0;
                for (int c = 0; c < C; ++c) {
                    double g = o->grad[static_cast<std::size_t>(c) * n + i];
                    if (g == 0.0) continue;
                    const double* xp = px->data.data() + static_cast<std::size_t>(c) * H * W;
                    double v00 = xp[v0 * W + u0], v01 = xp[v0 * W + u0 + 1];
                    double v10 = xp[(v0 + 1) * W + u0], v11 = xp[(v0 + 1) * W + u0 + 1];
                    if (px->requires_grad) {
                        double* gx = px->grad.data() + static_cast<std::size_t>(c) * H * W;
                        gx[v0 * W + u0] += g * (1 - fv) * (1 - fu);
                        gx[v0 * W + u0 + 1] += g * (1 - fv) * fu;
                        gx[(v0 + 1) * W + u0] += g * fv * (1 - fu);
                        gx[(v0 + 1) * W + u0 + 1] += g * fv * fu;
                    }
                    du += g * ((1 - fv) * (v01 - v00) + fv * (v11 - v10));
                    dv += g * ((1 - fu) * (v10 - v00) + fu * (v11 - v01));
                }
                if (pc->requires_grad) {
                    pc->grad[i] += du;
                    pc->grad[n + i] += dv;
                }
            }
        };
    }
    return {out, validity};
}

} // namespace msgr
