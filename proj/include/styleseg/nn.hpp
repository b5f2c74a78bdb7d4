#pragma once

#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "styleseg/autograd.hpp"
#include "styleseg/rng.hpp"
#include "styleseg/tensor.hpp"

namespace styleseg::nn {

// Ordered named parameter set. Vars are handles sharing the underlying
// node, so copies handed to layers stay in sync with the store. Insertion
// order fixes the optimizer update order and the checkpoint layout.
class ParamStore {
public:
    ag::Var add(const std::string& name, Tensor init) {
        if (index_.count(name)) throw std::logic_error("ParamStore: duplicate parameter " + name);
        index_[name] = params_.size();
        names_.push_back(name);
        params_.push_back(ag::Var::leaf(std::move(init), /*requires_grad=*/true));
        return params_.back();
    }

    ag::Var get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::logic_error("ParamStore: unknown parameter " + name);
        return params_[it->second];
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t count() const { return params_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    ag::Var& param(std::size_t i) { return params_[i]; }
    const ag::Var& param(std::size_t i) const { return params_[i]; }

    std::int64_t total_elements() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p.value().size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    // FNV-1a over raw parameter bytes in insertion order.
    std::uint64_t content_hash() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& p : params_) {
            const auto& d = p.value().data;
            const auto* bytes = reinterpret_cast<const unsigned char*>(d.data());
            for (std::size_t i = 0; i < d.size() * sizeof(Real); ++i) {
                h ^= bytes[i];
                h *= 1099511628211ULL;
            }
        }
        return h;
    }

private:
    std::vector<ag::Var> params_;
    std::vector<std::string> names_;
    std::map<std::string, std::size_t> index_;
};

// Kaiming-uniform fan-in init, the usual default for conv/linear weights.
inline Tensor kaiming_uniform(const std::vector<int>& shape, int fan_in, Rng& rng) {
    Tensor t(shape);
    const Real bound = std::sqrt(6.0 / static_cast<Real>(fan_in));
    for (auto& v : t.data) v = rng.uniform(-bound, bound);
    return t;
}

inline Tensor constant_init(const std::vector<int>& shape, Real v) {
    Tensor t(shape);
    t.fill(v);
    return t;
}

struct Conv2d {
    ag::Var w, b;
    int stride = 1, pad = 1;

    static Conv2d make(ParamStore& ps, const std::string& prefix, int in_ch, int out_ch, int k, int stride, Rng& rng) {
        Conv2d c;
        c.stride = stride;
        c.pad = k / 2;
        c.w = ps.add(prefix + ".w", kaiming_uniform({out_ch, in_ch, k, k}, in_ch * k * k, rng));
        c.b = ps.add(prefix + ".b", constant_init({out_ch}, 0));
        return c;
    }

    ag::Var operator()(const ag::Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
};

struct Linear {
    ag::Var w, b;

    static Linear make(ParamStore& ps, const std::string& prefix, int in_dim, int out_dim, Rng& rng) {
        Linear l;
        l.w = ps.add(prefix + ".w", kaiming_uniform({out_dim, in_dim}, in_dim, rng));
        l.b = ps.add(prefix + ".b", constant_init({out_dim}, 0));
        return l;
    }

    ag::Var operator()(const ag::Var& x) const { return ag::linear(x, w, b); }
    ag::Var tokens(const ag::Var& x) const { return ag::linear_tokens(x, w, b); }
};

struct InstanceNorm {
    ag::Var gamma, beta;

    static InstanceNorm make(ParamStore& ps, const std::string& prefix, int ch) {
        InstanceNorm n;
        n.gamma = ps.add(prefix + ".gamma", constant_init({ch}, 1));
        n.beta = ps.add(prefix + ".beta", constant_init({ch}, 0));
        return n;
    }

    ag::Var operator()(const ag::Var& x) const { return ag::instance_norm(x, gamma, beta); }
};

struct LayerNorm {
    ag::Var gamma, beta;

    static LayerNorm make(ParamStore& ps, const std::string& prefix, int ch) {
        LayerNorm n;
        n.gamma = ps.add(prefix + ".gamma", constant_init({ch}, 1));
        n.beta = ps.add(prefix + ".beta", constant_init({ch}, 0));
        return n;
    }

    ag::Var operator()(const ag::Var& x) const { return ag::layer_norm_channels(x, gamma, beta); }
};

// Adam with bias correction; state tensors keyed by parameter index.
class AdamOptimizer {
public:
    AdamOptimizer(ParamStore& ps, Real lr, Real beta1 = 0.9, Real beta2 = 0.999, Real eps = 1e-8)
        : ps_(ps), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(ps.count());
        v_.resize(ps.count());
        for (std::size_t i = 0; i < ps.count(); ++i) {
            m_[i] = Tensor(ps.param(i).value().shape);
            v_[i] = Tensor(ps.param(i).value().shape);
        }
    }

    void step() {
        ++t_;
        const Real bc1 = 1.0 - std::pow(beta1_, static_cast<Real>(t_));
        const Real bc2 = 1.0 - std::pow(beta2_, static_cast<Real>(t_));
        for (std::size_t i = 0; i < ps_.count(); ++i) {
            auto& p = ps_.param(i);
            if (p.grad().data.empty()) continue;
            auto& val = p.value().data;
            const auto& g = p.grad().data;
            auto& m = m_[i].data;
            auto& v = v_[i].data;
            for (std::size_t j = 0; j < val.size(); ++j) {
                m[j] = beta1_ * m[j] + (1 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1 - beta2_) * g[j] * g[j];
                const Real mhat = m[j] / bc1;
                const Real vhat = v[j] / bc2;
                val[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() { ps_.zero_grad(); }

private:
    ParamStore& ps_;
    Real lr_, beta1_, beta2_, eps_;
    std::int64_t t_ = 0;
    std::vector<Tensor> m_, v_;
};

} // namespace styleseg::nn
