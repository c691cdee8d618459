#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "instid/autodiff.hpp"
#include "instid/errors.hpp"
#include "instid/rng.hpp"
#include "instid/tensor.hpp"

namespace instid {

// Named parameter container. Insertion order is kept so weight dumps and
// hashes are stable; lookups go through a map.
template <typename T>
class ParamStore {
  public:
    Tensor<T>& add(const std::string& name, Tensor<T> init) {
        auto [it, fresh] = params_.emplace(name, std::move(init));
        if (!fresh) throw ConfigError("duplicate parameter: " + name);
        order_.push_back(name);
        return it->second;
    }

    Tensor<T>& at(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw DependencyError("missing parameter: " + name);
        return it->second;
    }
    const Tensor<T>& at(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw DependencyError("missing parameter: " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }
    const std::vector<std::string>& order() const { return order_; }
    std::size_t size() const { return order_.size(); }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& n : order_)
            if (n.rfind(prefix, 0) == 0) out.push_back(n);
        return out;
    }

    std::int64_t numel_with_prefix(const std::string& prefix) const {
        std::int64_t n = 0;
        for (const auto& name : order_)
            if (name.rfind(prefix, 0) == 0) n += params_.at(name).numel();
        return n;
    }

  private:
    std::vector<std::string> order_;
    std::map<std::string, Tensor<T>> params_;
};

// Binds a tape to a parameter store for one forward pass. Each parameter
// becomes a tape leaf once; whether it gets gradients is decided by the
// trainable predicate, which is how a phase freezes everything else.
template <typename T>
struct Ctx {
    using Var = typename Tape<T>::Var;

    Ctx(Tape<T>& t, ParamStore<T>& p, std::function<bool(const std::string&)> pred = nullptr)
        : tape(t), ps(p), trainable(std::move(pred)) {}

    Tape<T>& tape;
    ParamStore<T>& ps;
    std::function<bool(const std::string&)> trainable;

    Var p(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        Var v = tape.leaf(ps.at(name), trainable && trainable(name));
        cache_.emplace(name, v);
        return v;
    }

    // name-sorted so float accumulation order is reproducible
    const std::map<std::string, Var>& bound() const { return cache_; }

  private:
    std::map<std::string, Var> cache_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

template <typename T>
void collect_grads(const Tape<T>& tape, const Ctx<T>& ctx, GradMap<T>& acc) {
    for (const auto& [name, var] : ctx.bound()) {
        if (!tape.needs_grad(var)) continue;
        const Tensor<T>& g = tape.grad(var);
        if (g.empty()) continue;
        auto it = acc.find(name);
        if (it == acc.end()) {
            acc.emplace(name, g);
        } else {
            Tensor<T>& dst = it->second;
            for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
        }
    }
}

template <typename T>
void scale_grads(GradMap<T>& g, T s) {
    for (auto& [k, v] : g)
        for (auto& x : v.data) x *= s;
}

template <typename T>
double grad_global_norm(const GradMap<T>& g) {
    double acc = 0.0;
    for (const auto& [k, v] : g)
        for (T x : v.data) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

template <typename T>
void clip_global_norm(GradMap<T>& g, double max_norm) {
    const double n = grad_global_norm(g);
    if (n > max_norm && n > 0.0) scale_grads(g, static_cast<T>(max_norm / n));
}

template <typename T>
class Adam {
  public:
    explicit Adam(T lr, T beta1 = T(0.9), T beta2 = T(0.999), T eps = T(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void set_lr(T lr) { lr_ = lr; }
    T lr() const { return lr_; }
    int step_count() const { return t_; }

    void step(ParamStore<T>& ps, const GradMap<T>& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(static_cast<double>(beta1_), t_);
        const double bc2 = 1.0 - std::pow(static_cast<double>(beta2_), t_);
        for (const auto& [name, g] : grads) {
            Tensor<T>& p = ps.at(name);
            if (p.shape != g.shape) throw ShapeError("adam: grad shape mismatch for " + name);
            auto& m = m_[name];
            auto& v = v_[name];
            if (m.empty()) m = Tensor<T>(p.shape);
            if (v.empty()) v = Tensor<T>(p.shape);
            for (std::int64_t i = 0; i < p.numel(); ++i) {
                m[i] = beta1_ * m[i] + (T(1) - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (T(1) - beta2_) * g[i] * g[i];
                const double mh = m[i] / bc1;
                const double vh = v[i] / bc2;
                p[i] -= static_cast<T>(lr_ * mh / (std::sqrt(vh) + eps_));
            }
        }
    }

  private:
    T lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::map<std::string, Tensor<T>> m_, v_;
};

// Half-cosine decay from base down to floor_frac * base across total steps.
inline double cosine_lr(int step, int total, double base, double floor_frac = 0.05) {
    if (total <= 1) return base;
    const double t = static_cast<double>(step) / static_cast<double>(total - 1);
    return base * (floor_frac + (1.0 - floor_frac) * 0.5 * (1.0 + std::cos(M_PI * t)));
}

// ---- parameter initializers ----

template <typename T>
void init_conv(ParamStore<T>& ps, const std::string& name, int co, int ci, int k, Rng& rng) {
    const T std = static_cast<T>(std::sqrt(2.0 / (static_cast<double>(ci) * k * k)));
    ps.add(name + ".w", Tensor<T>::randn(Shape{co, ci, k, k}, rng, std));
    ps.add(name + ".b", Tensor<T>(Shape{co}));
}

template <typename T>
void init_conv_zero(ParamStore<T>& ps, const std::string& name, int co, int ci, int k) {
    ps.add(name + ".w", Tensor<T>(Shape{co, ci, k, k}));
    ps.add(name + ".b", Tensor<T>(Shape{co}));
}

template <typename T>
void init_linear(ParamStore<T>& ps, const std::string& name, int out, int in, Rng& rng,
                 double gain = 1.0) {
    const T std = static_cast<T>(gain * std::sqrt(2.0 / static_cast<double>(in)));
    ps.add(name + ".w", Tensor<T>::randn(Shape{out, in}, rng, std));
    ps.add(name + ".b", Tensor<T>(Shape{out}));
}

template <typename T>
void init_linear_zero(ParamStore<T>& ps, const std::string& name, int out, int in) {
    ps.add(name + ".w", Tensor<T>(Shape{out, in}));
    ps.add(name + ".b", Tensor<T>(Shape{out}));
}

template <typename T>
void init_gn(ParamStore<T>& ps, const std::string& name, int c) {
    ps.add(name + ".g", Tensor<T>(Shape{c}, T(1)));
    ps.add(name + ".b", Tensor<T>(Shape{c}));
}

// ---- forward helpers over Ctx ----

template <typename T>
typename Tape<T>::Var conv(Ctx<T>& c, const std::string& name, typename Tape<T>::Var x, int stride,
                           int pad) {
    return c.tape.conv2d(x, c.p(name + ".w"), c.p(name + ".b"), stride, pad);
}

template <typename T>
typename Tape<T>::Var lin(Ctx<T>& c, const std::string& name, typename Tape<T>::Var x) {
    return c.tape.linear(x, c.p(name + ".w"), c.p(name + ".b"));
}

template <typename T>
typename Tape<T>::Var gn(Ctx<T>& c, const std::string& name, typename Tape<T>::Var x, int groups) {
    return c.tape.group_norm(x, c.p(name + ".g"), c.p(name + ".b"), groups);
}

}  // namespace instid
