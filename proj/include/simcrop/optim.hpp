#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "simcrop/error.hpp"
#include "simcrop/model.hpp"

namespace simcrop {

struct AdamWOptions {
    double lr = 1e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

/// AdamW with decoupled weight decay: p ← p(1 − lr·wd), then the
/// bias-corrected Adam step p ← p − lr · m̂ / (√v̂ + eps).
template <class T>
class AdamW {
public:
    struct Moments {
        std::vector<T> m, v;
    };

    AdamW() = default;
    explicit AdamW(AdamWOptions opts) : opts_(opts) {}

    const AdamWOptions& options() const { return opts_; }
    AdamWOptions& options() { return opts_; }
    std::uint64_t step_count() const { return t_; }
    void set_step_count(std::uint64_t t) { t_ = t; }
    std::map<std::string, Moments>& moments() { return state_; }
    const std::map<std::string, Moments>& moments() const { return state_; }

    /// One update over `names` (all parameters when empty) using their accumulated grads.
    void step(ModelParams<T>& params, const std::set<std::string>& names = {}, double lr_override = -1.0) {
        const double lr = lr_override >= 0.0 ? lr_override : opts_.lr;
        for (auto& [name, t] : params.tensors) {
            if (!names.empty() && !names.count(name)) continue;
            for (T g : t.grad())
                if (!std::isfinite(g)) throw NumericError("adamw: non-finite gradient in " + name);
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        const T decay = static_cast<T>(1.0 - lr * opts_.weight_decay);
        for (auto& [name, t] : params.tensors) {
            if (!names.empty() && !names.count(name)) continue;
            auto& st = state_[name];
            if (st.m.size() != t.size()) {
                st.m.assign(t.size(), T(0));
                st.v.assign(t.size(), T(0));
            }
            auto p = t.mutable_data();
            auto g = t.grad();
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] = p[i] * decay;
                const double gi = static_cast<double>(g[i]);
                const double m = opts_.beta1 * static_cast<double>(st.m[i]) + (1.0 - opts_.beta1) * gi;
                const double v = opts_.beta2 * static_cast<double>(st.v[i]) + (1.0 - opts_.beta2) * gi * gi;
                st.m[i] = static_cast<T>(m);
                st.v[i] = static_cast<T>(v);
                const double update = lr * (m / bc1) / (std::sqrt(v / bc2) + opts_.eps);
                p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
            }
        }
    }

private:
    AdamWOptions opts_;
    std::uint64_t t_ = 0;
    std::map<std::string, Moments> state_;
};

/// Scale gradients of `names` so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(ModelParams<T>& params, const std::set<std::string>& names, double max_norm) {
    double sq = 0.0;
    for (auto& [name, t] : params.tensors) {
        if (!names.empty() && !names.count(name)) continue;
        for (T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / (norm + 1e-12));
        for (auto& [name, t] : params.tensors) {
            if (!names.empty() && !names.count(name)) continue;
            for (auto& g : t.mutable_grad()) g *= s;
        }
    }
    return norm;
}

} // namespace simcrop
