#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "styleseg/rng.hpp"
#include "styleseg/tensor.hpp"

// Tape-based reverse-mode autodiff over dense double tensors. Graphs are
// built eagerly; backward() walks reachable nodes in reverse creation
// order, so gradient accumulation is deterministic.
namespace styleseg::ag {

struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::int64_t id = 0;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Tensor& ensure_grad() {
        if (grad.data.empty()) grad = Tensor(value.shape);
        return grad;
    }
};

inline std::int64_t next_node_id() {
    static std::atomic<std::int64_t> counter{1};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

inline bool& grad_mode() {
    thread_local bool enabled = true;
    return enabled;
}

// Disables tape recording in scope; forward values are still computed.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev; }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        n->id = next_node_id();
        return Var(std::move(n));
    }

    const Tensor& value() const { return node_->value; }
    Tensor& value() { return node_->value; }
    const Tensor& grad() const { return node_->grad; }
    bool defined() const { return node_ != nullptr; }
    std::shared_ptr<Node> node() const { return node_; }

    void zero_grad() {
        if (node_ && !node_->grad.data.empty()) node_->grad.fill(0);
    }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_op(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->id = next_node_id();
    if (grad_mode()) {
        bool any = false;
        for (const auto& in : inputs)
            if (in.node()->requires_grad) any = true;
        if (any) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (auto& in : inputs) n->parents.push_back(in.node());
            n->backward_fn = std::move(backward);
        }
    }
    return Var(std::move(n));
}

} // namespace detail

// Seeds the root gradient with ones, so for non-scalar roots this computes
// gradients of the element sum.
inline void backward(const Var& loss) {
    Node* root = loss.node().get();
    if (!root->requires_grad)
        throw std::logic_error("backward: loss does not require grad");
    // Collect the reachable subgraph.
    std::vector<Node*> stack{root};
    std::unordered_set<Node*> seen{root};
    std::vector<Node*> nodes;
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        nodes.push_back(n);
        for (auto& p : n->parents) {
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
        }
    }
    std::sort(nodes.begin(), nodes.end(), [](Node* a, Node* b) { return a->id > b->id; });
    root->ensure_grad();
    root->grad.fill(1.0);
    for (Node* n : nodes) {
        if (n->backward_fn && !n->grad.data.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw std::invalid_argument("add: shape mismatch " + a.value().shape_str() + " vs " + b.value().shape_str());
    Tensor out = a.value();
    const auto& bd = b.value().data;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bd[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value())) throw std::invalid_argument("mul: shape mismatch");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= b.value().data[i];
    auto an = a.node(), bn = b.node();
    return detail::make_op(std::move(out), {a, b}, [an, bn](Node& n) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * bn->value.data[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * an->value.data[i];
        }
    });
}

inline Var scale(const Var& a, Real s) {
    Tensor out = a.value();
    for (auto& v : out.data) v *= s;
    auto an = a.node();
    return detail::make_op(std::move(out), {a}, [an, s](Node& n) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += s * n.grad.data[i];
    });
}

inline Var relu(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = v > 0 ? v : 0;
    auto an = a.node();
    return detail::make_op(std::move(out), {a}, [an](Node& n) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i)
            if (an->value.data[i] > 0) g.data[i] += n.grad.data[i];
    });
}

inline Var gelu(const Var& a) {
    static constexpr Real kInvSqrt2 = 0.70710678118654752440;
    static constexpr Real kInvSqrt2Pi = 0.39894228040143267794;
    Tensor out = a.value();
    for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    auto an = a.node();
    return detail::make_op(std::move(out), {a}, [an](Node& n) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const Real x = an->value.data[i];
            const Real cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const Real pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            g.data[i] += n.grad.data[i] * (cdf + x * pdf);
        }
    });
}

inline Var sigmoid(const Var& a) {
    Tensor out = a.value();
    for (auto& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    auto an = a.node();
    auto on = std::make_shared<Tensor>(out);
    return detail::make_op(std::move(out), {a}, [an, on](Node& n) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const Real s = on->data[i];
            g.data[i] += n.grad.data[i] * s * (1.0 - s);
        }
    });
}

// Inverted dropout; identity when rate == 0. Mask is drawn at call time,
// one uniform per element, so streams are reproducible.
inline Var dropout(const Var& a, Real rate, Rng& rng) {
    if (rate == 0.0) return a;
    if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
    const Real keep_scale = 1.0 / (1.0 - rate);
    auto mask = std::make_shared<std::vector<Real>>(a.value().data.size());
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.data.size(); ++i) {
        const Real m = rng.uniform() >= rate ? keep_scale : 0.0;
        (*mask)[i] = m;
        out.data[i] *= m;
    }
    auto an = a.node();
    return detail::make_op(std::move(out), {a}, [an, mask](Node& n) {
        auto& g = an->ensure_grad();
        for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += n.grad.data[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Convolution / pooling / resampling
// ---------------------------------------------------------------------------

inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = 1) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 4 || wv.rank() != 4) throw std::invalid_argument("conv2d: expects NCHW input and OIHW weight");
    const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
    if (wv.dim(1) != Ci) throw std::invalid_argument("conv2d: channel mismatch");
    if (b.value().size() != Co) throw std::invalid_argument("conv2d: bias size mismatch");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d: output would be empty");

    Tensor out({N, Co, Ho, Wo});
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            Real* optr = &out.at4(n, co, 0, 0);
            const Real bias = b.value().data[static_cast<std::size_t>(co)];
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) optr[i] = bias;
            for (int ci = 0; ci < Ci; ++ci) {
                const Real* xplane = &xv.at4(n, ci, 0, 0);
                for (int fh = 0; fh < kh; ++fh) {
                    for (int fw = 0; fw < kw; ++fw) {
                        const Real wgt = wv.data[((static_cast<std::size_t>(co) * Ci + ci) * kh + fh) * kw + fw];
                        if (wgt == 0.0) continue;
                        for (int ho = 0; ho < Ho; ++ho) {
                            const int ih = ho * stride + fh - pad;
                            if (ih < 0 || ih >= H) continue;
                            Real* orow = optr + static_cast<std::size_t>(ho) * Wo;
                            const Real* xrow = xplane + static_cast<std::size_t>(ih) * W;
                            int wo_lo = 0, wo_hi = Wo;
                            while (wo_lo < Wo && wo_lo * stride + fw - pad < 0) ++wo_lo;
                            while (wo_hi > wo_lo && (wo_hi - 1) * stride + fw - pad >= W) --wo_hi;
                            const Real* xoff = xrow + fw - pad;
                            if (stride == 1) {
                                for (int wo = wo_lo; wo < wo_hi; ++wo) orow[wo] += wgt * xoff[wo];
                            } else {
                                for (int wo = wo_lo; wo < wo_hi; ++wo) orow[wo] += wgt * xoff[wo * stride];
                            }
                        }
                    }
                }
            }
        }
    }

    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_op(std::move(out), {x, w, b}, [xn, wn, bn, N, Ci, H, W, Co, kh, kw, Ho, Wo, stride, pad](Node& n) {
        const Tensor& g = n.grad;
        if (bn->requires_grad) {
            auto& db = bn->ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int co = 0; co < Co; ++co) {
                    const Real* grow = &g.at4(nn, co, 0, 0);
                    Real acc = 0;
                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) acc += grow[i];
                    db.data[static_cast<std::size_t>(co)] += acc;
                }
        }
        if (wn->requires_grad) {
            auto& dw = wn->ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int co = 0; co < Co; ++co)
                    for (int ci = 0; ci < Ci; ++ci) {
                        const Real* xplane = &xn->value.at4(nn, ci, 0, 0);
                        const Real* gplane = &g.at4(nn, co, 0, 0);
                        for (int fh = 0; fh < kh; ++fh)
                            for (int fw = 0; fw < kw; ++fw) {
                                Real acc = 0;
                                for (int ho = 0; ho < Ho; ++ho) {
                                    const int ih = ho * stride + fh - pad;
                                    if (ih < 0 || ih >= H) continue;
                                    const Real* grow = gplane + static_cast<std::size_t>(ho) * Wo;
                                    const Real* xrow = xplane + static_cast<std::size_t>(ih) * W + fw - pad;
                                    int wo_lo = 0, wo_hi = Wo;
                                    while (wo_lo < Wo && wo_lo * stride + fw - pad < 0) ++wo_lo;
                                    while (wo_hi > wo_lo && (wo_hi - 1) * stride + fw - pad >= W) --wo_hi;
                                    if (stride == 1) {
                                        for (int wo = wo_lo; wo < wo_hi; ++wo) acc += grow[wo] * xrow[wo];
                                    } else {
                                        for (int wo = wo_lo; wo < wo_hi; ++wo) acc += grow[wo] * xrow[wo * stride];
                                    }
                                }
                                dw.data[((static_cast<std::size_t>(co) * Ci + ci) * kh + fh) * kw + fw] += acc;
                            }
                    }
        }
        if (xn->requires_grad) {
            auto& dx = xn->ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int co = 0; co < Co; ++co) {
                    const Real* gplane = &g.at4(nn, co, 0, 0);
                    for (int ci = 0; ci < Ci; ++ci) {
                        Real* dxplane = &dx.at4(nn, ci, 0, 0);
                        for (int fh = 0; fh < kh; ++fh)
                            for (int fw = 0; fw < kw; ++fw) {
                                const Real wgt = wn->value.data[((static_cast<std::size_t>(co) * Ci + ci) * kh + fh) * kw + fw];
                                if (wgt == 0.0) continue;
                                for (int ho = 0; ho < Ho; ++ho) {
                                    const int ih = ho * stride + fh - pad;
                                    if (ih < 0 || ih >= H) continue;
                                    const Real* grow = gplane + static_cast<std::size_t>(ho) * Wo;
                                    Real* dxrow = dxplane + static_cast<std::size_t>(ih) * W + fw - pad;
                                    int wo_lo = 0, wo_hi = Wo;
                                    while (wo_lo < Wo && wo_lo * stride + fw - pad < 0) ++wo_lo;
                                    while (wo_hi > wo_lo && (wo_hi - 1) * stride + fw - pad >= W) --wo_hi;
                                    if (stride == 1) {
                                        for (int wo = wo_lo; wo < wo_hi; ++wo) dxrow[wo] += wgt * grow[wo];
                                    } else {
                                        for (int wo = wo_lo; wo < wo_hi; ++wo) dxrow[wo * stride] += wgt * grow[wo];
                                    }
                                }
                            }
                    }
                }
        }
    });
}

// 2x2 max pooling, stride 2. Ties go to the first element in scan order.
inline Var maxpool2(const Var& x) {
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 || W % 2) throw std::invalid_argument("maxpool2: H and W must be even");
    const int Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    auto argmax = std::make_shared<std::vector<std::int32_t>>(out.data.size());
    std::size_t oi = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int ho = 0; ho < Ho; ++ho)
                for (int wo = 0; wo < Wo; ++wo, ++oi) {
                    Real best = -1e300;
                    int besti = 0;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const Real v = xv.at4(n, c, 2 * ho + dy, 2 * wo + dx);
                            const int idx = dy * 2 + dx;
                            if (v > best) {
                                best = v;
                                besti = idx;
                            }
                        }
                    out.data[oi] = best;
                    (*argmax)[oi] = besti;
                }
    auto xn = x.node();
    return detail::make_op(std::move(out), {x}, [xn, argmax, N, C, Ho, Wo](Node& n) {
        auto& dx = xn->ensure_grad();
        std::size_t oi = 0;
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c)
                for (int ho = 0; ho < Ho; ++ho)
                    for (int wo = 0; wo < Wo; ++wo, ++oi) {
                        const int a = (*argmax)[oi];
                        dx.at4(nn, c, 2 * ho + a / 2, 2 * wo + a % 2) += n.grad.data[oi];
                    }
    });
}

inline Var upsample_nearest2(const Var& x) {
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({N, C, H * 2, W * 2});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < 2 * H; ++h) {
                const Real* xrow = &xv.at4(n, c, h / 2, 0);
                Real* orow = &out.at4(n, c, h, 0);
                for (int w = 0; w < 2 * W; ++w) orow[w] = xrow[w / 2];
            }
    auto xn = x.node();
    return detail::make_op(std::move(out), {x}, [xn, N, C, H, W](Node& n) {
        auto& dx = xn->ensure_grad();
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c)
                for (int h = 0; h < 2 * H; ++h) {
                    Real* dxrow = &dx.at4(nn, c, h / 2, 0);
                    const Real* grow = &n.grad.at4(nn, c, h, 0);
                    for (int w = 0; w < 2 * W; ++w) dxrow[w / 2] += grow[w];
                }
    });
}

// Per-channel spatial shift with zero fill; used by the shifted token-MLP
// variant. shifts[c] = {dy, dx} moves channel c content by (dy, dx).
inline Var spatial_shift(const Var& x, const std::vector<std::pair<int, int>>& shifts) {
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (static_cast<int>(shifts.size()) != C) throw std::invalid_argument("spatial_shift: one shift per channel");
    Tensor out({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const auto [dy, dx] = shifts[static_cast<std::size_t>(c)];
            for (int h = 0; h < H; ++h) {
                const int sh = h - dy;
                if (sh < 0 || sh >= H) continue;
                for (int w = 0; w < W; ++w) {
                    const int sw = w - dx;
                    if (sw < 0 || sw >= W) continue;
                    out.at4(n, c, h, w) = xv.at4(n, c, sh, sw);
                }
            }
        }
    auto xn = x.node();
    auto sh_copy = std::make_shared<std::vector<std::pair<int, int>>>(shifts);
    return detail::make_op(std::move(out), {x}, [xn, sh_copy, N, C, H, W](Node& n) {
        auto& dx = xn->ensure_grad();
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c) {
                const auto [dy, dxs] = (*sh_copy)[static_cast<std::size_t>(c)];
                for (int h = 0; h < H; ++h) {
                    const int sh = h - dy;
                    if (sh < 0 || sh >= H) continue;
                    for (int w = 0; w < W; ++w) {
                        const int sw = w - dxs;
                        if (sw < 0 || sw >= W) continue;
                        dx.at4(nn, c, sh, sw) += n.grad.at4(nn, c, h, w);
                    }
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Linear maps
// ---------------------------------------------------------------------------

// Pointwise (1x1) linear over channels: x NCHW, w [Co x Ci], b [Co].
inline Var linear_tokens(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int Co = wv.dim(0);
    if (wv.dim(1) != Ci) throw std::invalid_argument("linear_tokens: channel mismatch");
    const std::int64_t S = static_cast<std::int64_t>(H) * W;
    Tensor out({N, Co, H, W});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            Real* oplane = &out.at4(n, co, 0, 0);
            const Real bias = b.value().data[static_cast<std::size_t>(co)];
            for (std::int64_t i = 0; i < S; ++i) oplane[i] = bias;
            for (int ci = 0; ci < Ci; ++ci) {
                const Real wgt = wv.data[static_cast<std::size_t>(co) * Ci + ci];
                const Real* xplane = &xv.at4(n, ci, 0, 0);
                for (std::int64_t i = 0; i < S; ++i) oplane[i] += wgt * xplane[i];
            }
        }
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_op(std::move(out), {x, w, b}, [xn, wn, bn, N, Ci, Co, S](Node& n) {
        if (bn->requires_grad) {
            auto& db = bn->ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int co = 0; co < Co; ++co) {
                    const Real* gplane = &n.grad.data[(static_cast<std::size_t>(nn) * Co + co) * S];
                    Real acc = 0;
                    for (std::int64_t i = 0; i < S; ++i) acc += gplane[i];
                    db.data[static_cast<std::size_t>(co)] += acc;
                }
        }
        if (wn->requires_grad) {
            auto& dw = wn->ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int co = 0; co < Co; ++co) {
                    const Real* gplane = &n.grad.data[(static_cast<std::size_t>(nn) * Co + co) * S];
                    for (int ci = 0; ci < Ci; ++ci) {
                        const Real* xplane = &xn->value.data[(static_cast<std::size_t>(nn) * Ci + ci) * S];
                        Real acc = 0;
                        for (std::int64_t i = 0; i < S; ++i) acc += gplane[i] * xplane[i];
                        dw.data[static_cast<std::size_t>(co) * Ci + ci] += acc;
                    }
                }
        }
        if (xn->requires_grad) {
            auto& dx = xn->ensure_grad();
            for (int nn = 0; nn < N; ++nn)
                for (int ci = 0; ci < Ci; ++ci) {
                    Real* dxplane = &dx.data[(static_cast<std::size_t>(nn) * Ci + ci) * S];
                    for (int co = 0; co < Co; ++co) {
                        const Real wgt = wn->value.data[static_cast<std::size_t>(co) * Ci + ci];
                        const Real* gplane = &n.grad.data[(static_cast<std::size_t>(nn) * Co + co) * S];
                        for (std::int64_t i = 0; i < S; ++i) dxplane[i] += wgt * gplane[i];
                    }
                }
        }
    });
}

// Dense layer on rank-2 input: x [N x Ci], w [Co x Ci], b [Co] -> [N x Co].
inline Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (xv.rank() != 2) throw std::invalid_argument("linear: expects rank-2 input");
    const int N = xv.dim(0), Ci = xv.dim(1), Co = wv.dim(0);
    if (wv.dim(1) != Ci) throw std::invalid_argument("linear: size mismatch");
    Tensor out({N, Co});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            const Real* xrow = &xv.data[static_cast<std::size_t>(n) * Ci];
            const Real* wrow = &wv.data[static_cast<std::size_t>(co) * Ci];
            Real acc = b.value().data[static_cast<std::size_t>(co)];
            for (int ci = 0; ci < Ci; ++ci) acc += xrow[ci] * wrow[ci];
            out.data[static_cast<std::size_t>(n) * Co + co] = acc;
        }
    auto xn = x.node(), wn = w.node(), bn = b.node();
    return detail::make_op(std::move(out), {x, w, b}, [xn, wn, bn, N, Ci, Co](Node& n) {
        for (int nn = 0; nn < N; ++nn) {
            const Real* grow = &n.grad.data[static_cast<std::size_t>(nn) * Co];
            if (bn->requires_grad) {
                auto& db = bn->ensure_grad();
                for (int co = 0; co < Co; ++co) db.data[static_cast<std::size_t>(co)] += grow[co];
            }
            if (wn->requires_grad) {
                auto& dw = wn->ensure_grad();
                const Real* xrow = &xn->value.data[static_cast<std::size_t>(nn) * Ci];
                for (int co = 0; co < Co; ++co)
                    for (int ci = 0; ci < Ci; ++ci)
                        dw.data[static_cast<std::size_t>(co) * Ci + ci] += grow[co] * xrow[ci];
            }
            if (xn->requires_grad) {
                auto& dx = xn->ensure_grad();
                Real* dxrow = &dx.data[static_cast<std::size_t>(nn) * Ci];
                for (int co = 0; co < Co; ++co) {
                    const Real* wrow = &wn->value.data[static_cast<std::size_t>(co) * Ci];
                    for (int ci = 0; ci < Ci; ++ci) dxrow[ci] += grow[co] * wrow[ci];
                }
            }
        }
    });
}

inline Var global_avg_pool(const Var& x) {
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::int64_t S = static_cast<std::int64_t>(H) * W;
    Tensor out({N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const Real* plane = &xv.at4(n, c, 0, 0);
            Real acc = 0;
            for (std::int64_t i = 0; i < S; ++i) acc += plane[i];
            out.data[static_cast<std::size_t>(n) * C + c] = acc / static_cast<Real>(S);
        }
    auto xn = x.node();
    return detail::make_op(std::move(out), {x}, [xn, N, C, S](Node& n) {
        auto& dx = xn->ensure_grad();
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c) {
                const Real g = n.grad.data[static_cast<std::size_t>(nn) * C + c] / static_cast<Real>(S);
                Real* plane = &dx.data[(static_cast<std::size_t>(nn) * C + c) * S];
                for (std::int64_t i = 0; i < S; ++i) plane[i] += g;
            }
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

// Shared backward for a normalization group of M elements.
// Given dy over the group, xc = x - mean, istd = 1/sqrt(var+eps):
//   dxhat_i = dy_i * gain
//   dx_i = istd * (dxhat_i - mean(dxhat) - xhat_i * mean(dxhat * xhat))
struct NormStats {
    Real mean, istd;
};

inline NormStats norm_stats(const Real* x, std::int64_t m, Real eps) {
    Real mean = 0;
    for (std::int64_t i = 0; i < m; ++i) mean += x[i];
    mean /= static_cast<Real>(m);
    Real var = 0;
    for (std::int64_t i = 0; i < m; ++i) {
        const Real d = x[i] - mean;
        var += d * d;
    }
    var /= static_cast<Real>(m);
    return {mean, Real(1) / std::sqrt(var + eps)};
}

} // namespace detail

// Instance norm with learned per-channel affine. Normalizes each (n, c)
// plane over its spatial extent.
inline Var instance_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-5) {
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (gamma.value().size() != C || beta.value().size() != C)
        throw std::invalid_argument("instance_norm: affine size mismatch");
    const std::int64_t S = static_cast<std::int64_t>(H) * W;
    Tensor out({N, C, H, W});
    auto stats = std::make_shared<std::vector<detail::NormStats>>(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const Real* plane = &xv.at4(n, c, 0, 0);
            auto st = detail::norm_stats(plane, S, eps);
            (*stats)[static_cast<std::size_t>(n) * C + c] = st;
            Real* oplane = &out.at4(n, c, 0, 0);
            const Real g = gamma.value().data[static_cast<std::size_t>(c)];
            const Real bv = beta.value().data[static_cast<std::size_t>(c)];
            for (std::int64_t i = 0; i < S; ++i) oplane[i] = g * (plane[i] - st.mean) * st.istd + bv;
        }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op(std::move(out), {x, gamma, beta}, [xn, gn, bn, stats, N, C, S](Node& n) {
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c) {
                const auto st = (*stats)[static_cast<std::size_t>(nn) * C + c];
                const Real g = gn->value.data[static_cast<std::size_t>(c)];
                const Real* xplane = &xn->value.data[(static_cast<std::size_t>(nn) * C + c) * S];
                const Real* gplane = &n.grad.data[(static_cast<std::size_t>(nn) * C + c) * S];
                Real sum_dy = 0, sum_dy_xhat = 0;
                for (std::int64_t i = 0; i < S; ++i) {
                    const Real xhat = (xplane[i] - st.mean) * st.istd;
                    sum_dy += gplane[i];
                    sum_dy_xhat += gplane[i] * xhat;
                }
                if (gn->requires_grad) gn->ensure_grad().data[static_cast<std::size_t>(c)] += sum_dy_xhat;
                if (bn->requires_grad) bn->ensure_grad().data[static_cast<std::size_t>(c)] += sum_dy;
                if (xn->requires_grad) {
                    auto& dx = xn->ensure_grad();
                    Real* dxplane = &dx.data[(static_cast<std::size_t>(nn) * C + c) * S];
                    const Real mean_dy = sum_dy / static_cast<Real>(S);
                    const Real mean_dy_xhat = sum_dy_xhat / static_cast<Real>(S);
                    for (std::int64_t i = 0; i < S; ++i) {
                        const Real xhat = (xplane[i] - st.mean) * st.istd;
                        dxplane[i] += g * st.istd * (gplane[i] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
            }
    });
}

// Conditional instance norm: per-(n,c) scale/shift supplied as rank-2 vars
// computed from a conditioning vector. Output = (1 + gain[n,c]) * xhat + bias[n,c].
inline Var cond_instance_norm(const Var& x, const Var& gain, const Var& bias, Real eps = 1e-5) {
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (gain.value().rank() != 2 || gain.value().dim(0) != N || gain.value().dim(1) != C)
        throw std::invalid_argument("cond_instance_norm: gain must be N x C");
    if (!gain.value().same_shape(bias.value()))
        throw std::invalid_argument("cond_instance_norm: gain/bias mismatch");
    const std::int64_t S = static_cast<std::int64_t>(H) * W;
    Tensor out({N, C, H, W});
    auto stats = std::make_shared<std::vector<detail::NormStats>>(static_cast<std::size_t>(N) * C);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const Real* plane = &xv.at4(n, c, 0, 0);
            auto st = detail::norm_stats(plane, S, eps);
            (*stats)[static_cast<std::size_t>(n) * C + c] = st;
            const Real g = 1.0 + gain.value().data[static_cast<std::size_t>(n) * C + c];
            const Real bv = bias.value().data[static_cast<std::size_t>(n) * C + c];
            Real* oplane = &out.at4(n, c, 0, 0);
            for (std::int64_t i = 0; i < S; ++i) oplane[i] = g * (plane[i] - st.mean) * st.istd + bv;
        }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_op(std::move(out), {x, gain, bias}, [xn, gn, bn, stats, N, C, S](Node& n) {
        for (int nn = 0; nn < N; ++nn)
            for (int c = 0; c < C; ++c) {
                const std::size_t nc = static_cast<std::size_t>(nn) * C + c;
                const auto st = (*stats)[nc];
                const Real g = 1.0 + gn->value.data[nc];
                const Real* xplane = &xn->value.data[nc * S];
                const Real* gplane = &n.grad.data[nc * S];
                Real sum_dy = 0, sum_dy_xhat = 0;
                for (std::int64_t i = 0; i < S; ++i) {
                    const Real xhat = (xplane[i] - st.mean) * st.istd;
                    sum_dy += gplane[i];
                    sum_dy_xhat += gplane[i] * xhat;
                }
                if (gn->requires_grad) gn->ensure_grad().data[nc] += sum_dy_xhat;
                if (bn->requires_grad) bn->ensure_grad().data[nc] += sum_dy;
                if (xn->requires_grad) {
                    auto& dx = xn->ensure_grad();
                    Real* dxplane = &dx.data[nc * S];
                    const Real mean_dy = sum_dy / static_cast<Real>(S);
                    const Real mean_dy_xhat = sum_dy_xhat / static_cast<Real>(S);
                    for (std::int64_t i = 0; i < S; ++i) {
                        const Real xhat = (xplane[i] - st.mean) * st.istd;
                        dxplane[i] += g * st.istd * (gplane[i] - mean_dy - xhat * mean_dy_xhat);
                    }
                }
            }
    });
}

// Layer norm across channels at each token (n, h, w); affine per channel.
inline Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, Real eps = 1e-5) {
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (gamma.value().size() != C || beta.value().size() != C)
        throw std::invalid_argument("layer_norm_channels: affine size mismatch");
    const std::int64_t S = static_cast<std::int64_t>(H) * W;
    Tensor out({N, C, H, W});
    auto stats = std::make_shared<std::vector<detail::NormStats>>(static_cast<std::size_t>(N) * S);
    std::vector<Real> buf(static_cast<std::size_t>(C));
    for (int n = 0; n < N; ++n)
        for (std::int64_t s = 0; s < S; ++s) {
            for (int c = 0; c < C; ++c) buf[static_cast<std::size_t>(c)] = xv.data[(static_cast<std::size_t>(n) * C + c) * S + s];
            auto st = detail::norm_stats(buf.data(), C, eps);
            (*stats)[static_cast<std::size_t>(n) * S + s] = st;
            for (int c = 0; c < C; ++c) {
                const Real xhat = (buf[static_cast<std::size_t>(c)] - st.mean) * st.istd;
                out.data[(static_cast<std::size_t>(n) * C + c) * S + s] =
                    gamma.value().data[static_cast<std::size_t>(c)] * xhat + beta.value().data[static_cast<std::size_t>(c)];
            }
        }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return detail::make_op(std::move(out), {x, gamma, beta}, [xn, gn, bn, stats, N, C, S](Node& n) {
        for (int nn = 0; nn < N; ++nn)
            for (std::int64_t s = 0; s < S; ++s) {
                const auto st = (*stats)[static_cast<std::size_t>(nn) * S + s];
                Real sum_dyg = 0, sum_dyg_xhat = 0;
                for (int c = 0; c < C; ++c) {
                    const std::size_t idx = (static_cast<std::size_t>(nn) * C + c) * S + s;
                    const Real xhat = (xn->value.data[idx] - st.mean) * st.istd;
                    const Real dyg = n.grad.data[idx] * gn->value.data[static_cast<std::size_t>(c)];
                    sum_dyg += dyg;
                    sum_dyg_xhat += dyg * xhat;
                    if (gn->requires_grad) gn->ensure_grad().data[static_cast<std::size_t>(c)] += n.grad.data[idx] * xhat;
                    if (bn->requires_grad) bn->ensure_grad().data[static_cast<std::size_t>(c)] += n.grad.data[idx];
                }
                if (xn->requires_grad) {
                    auto& dx = xn->ensure_grad();
                    const Real mean_dyg = sum_dyg / static_cast<Real>(C);
                    const Real mean_dyg_xhat = sum_dyg_xhat / static_cast<Real>(C);
                    for (int c = 0; c < C; ++c) {
                        const std::size_t idx = (static_cast<std::size_t>(nn) * C + c) * S + s;
                        const Real xhat = (xn->value.data[idx] - st.mean) * st.istd;
                        const Real dyg = n.grad.data[idx] * gn->value.data[static_cast<std::size_t>(c)];
                        dx.data[idx] += st.istd * (dyg - mean_dyg - xhat * mean_dyg_xhat);
                    }
                }
            }
    });
}

// ---------------------------------------------------------------------------
// Losses (fused scalar heads)
// ---------------------------------------------------------------------------

// Weighted binary-cross-entropy + soft-Dice on logits. Per-image Dice with
// +1 smoothing on numerator and denominator, both terms averaged over the
// batch: loss = bce_w * BCE + dice_w * (1 - (2*sum(p*m)+1)/(sum(p)+sum(m)+1)).
inline Var bce_dice_loss(const Var& logits, const Tensor& masks, Real bce_w, Real dice_w) {
    const Tensor& lv = logits.value();
    if (!lv.same_shape(masks))
        throw std::invalid_argument("bce_dice_loss: logits/mask shape mismatch");
    const int N = lv.dim(0);
    const std::int64_t S = lv.size() / N;
    auto probs = std::make_shared<Tensor>(lv.shape);
    Real loss = 0;
    std::vector<Real> s1(static_cast<std::size_t>(N)), s2(static_cast<std::size_t>(N));
    for (int n = 0; n < N; ++n) {
        const Real* l = &lv.data[static_cast<std::size_t>(n) * S];
        const Real* m = &masks.data[static_cast<std::size_t>(n) * S];
        Real* p = &probs->data[static_cast<std::size_t>(n) * S];
        Real bce = 0, sum_pm = 0, sum_p = 0, sum_m = 0;
        for (std::int64_t i = 0; i < S; ++i) {
            const Real x = l[i];
            p[i] = 1.0 / (1.0 + std::exp(-x));
            // softplus(x) - x*m, stable form
            bce += (x > 0 ? x : 0) + std::log1p(std::exp(-std::abs(x))) - x * m[i];
            sum_pm += p[i] * m[i];
            sum_p += p[i];
            sum_m += m[i];
        }
        s1[static_cast<std::size_t>(n)] = sum_pm;
        s2[static_cast<std::size_t>(n)] = sum_p + sum_m;
        const Real dice = (2 * sum_pm + 1) / (sum_p + sum_m + 1);
        loss += bce_w * bce / static_cast<Real>(S) + dice_w * (1 - dice);
    }
    loss /= static_cast<Real>(N);
    Tensor out({1});
    out.data[0] = loss;
    auto ln = logits.node();
    auto masks_copy = std::make_shared<Tensor>(masks);
    auto s1p = std::make_shared<std::vector<Real>>(std::move(s1));
    auto s2p = std::make_shared<std::vector<Real>>(std::move(s2));
    return detail::make_op(std::move(out), {logits}, [ln, probs, masks_copy, s1p, s2p, N, S, bce_w, dice_w](Node& n) {
        const Real gscale = n.grad.data[0] / static_cast<Real>(N);
        auto& dl = ln->ensure_grad();
        for (int nn = 0; nn < N; ++nn) {
            const Real* p = &probs->data[static_cast<std::size_t>(nn) * S];
            const Real* m = &masks_copy->data[static_cast<std::size_t>(nn) * S];
            Real* g = &dl.data[static_cast<std::size_t>(nn) * S];
            const Real num = 2 * (*s1p)[static_cast<std::size_t>(nn)] + 1;
            const Real den = (*s2p)[static_cast<std::size_t>(nn)] + 1;
            for (std::int64_t i = 0; i < S; ++i) {
                const Real dbce = (p[i] - m[i]) / static_cast<Real>(S);
                const Real ddice_dp = (2 * m[i] * den - num) / (den * den);
                const Real ddice = -ddice_dp * p[i] * (1 - p[i]);
                g[i] += gscale * (bce_w * dbce + dice_w * ddice);
            }
        }
    });
}

inline Var mse_loss(const Var& pred, const Tensor& target) {
    const Tensor& pv = pred.value();
    if (pv.shape != target.shape) throw std::invalid_argument("mse_loss: shape mismatch");
    const std::int64_t M = pv.size();
    Real loss = 0;
    for (std::int64_t i = 0; i < M; ++i) {
        const Real d = pv.data[static_cast<std::size_t>(i)] - target.data[static_cast<std::size_t>(i)];
        loss += d * d;
    }
    loss /= static_cast<Real>(M);
    Tensor out({1});
    out.data[0] = loss;
    auto pn = pred.node();
    auto tgt = std::make_shared<Tensor>(target);
    return detail::make_op(std::move(out), {pred}, [pn, tgt, M](Node& n) {
        auto& g = pn->ensure_grad();
        const Real s = 2.0 * n.grad.data[0] / static_cast<Real>(M);
        for (std::int64_t i = 0; i < M; ++i)
            g.data[static_cast<std::size_t>(i)] += s * (pn->value.data[static_cast<std::size_t>(i)] - tgt->data[static_cast<std::size_t>(i)]);
    });
}

} // namespace styleseg::ag
