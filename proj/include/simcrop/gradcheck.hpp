#pragma once

// Central finite differences against reverse-mode gradients of the full
// pre-training loss, in double precision.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

#include "simcrop/trainer.hpp"

namespace simcrop {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    double seconds = 0.0;
};

struct GradCheckOptions {
    std::uint64_t seed = 0;
    std::size_t min_sentences = 2;  ///< first sample (from seed up) with this many findings sentences
    double step = 1e-5;      ///< h = step · max(1, |x|)
    double rel_floor = 1e-3; ///< denominator floor for near-zero gradients
};

/// Loss of a fixed batch: every evaluation replays the same mask draws.
inline double fixed_batch_loss(const ModelParams<double>& params, const ModelConfig& model,
                               const ObjectiveOptions& obj, const Vocab& vocab,
                               const std::vector<PreparedSample>& batch, std::uint64_t seed, bool do_backward) {
    std::vector<SampleLosses<double>> losses;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        Rng rng(seed, 0x6c0ULL + i);
        losses.push_back(forward_sample(params, model, obj, vocab, batch[i], rng));
    }
    TotalLoss<double> loss = batch_loss(losses, obj, model.enable_sa);
    if (do_backward) backward(loss.total);
    return loss.total.item();
}

/// Compares every parameter entry's gradient with central differences.
inline GradCheckResult grad_check(const Config& cfg, const GradCheckOptions& opt = {}) {
    const auto t0 = std::chrono::steady_clock::now();
    const Vocab vocab = synthetic_vocab();
    const ModelConfig model = ModelConfig::from(cfg, vocab.size());
    const ObjectiveOptions obj = ObjectiveOptions::from(cfg);
    std::vector<PreparedSample> batch;
    for (std::uint64_t s = opt.seed; batch.empty(); ++s) {
        auto one = synthesize_corpus(cfg, s, 1);
        if (one[0].truth.size() >= opt.min_sentences) batch = std::move(one);
        if (s > opt.seed + 1000) throw ValueError("grad_check: no sample with enough sentences");
    }
    ModelParams<double> params = init_params<double>(model, opt.seed, cfg.init_std);

    params.zero_grad();
    fixed_batch_loss(params, model, obj, vocab, batch, opt.seed, true);
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, t] : params.tensors) analytic[name].assign(t.grad().begin(), t.grad().end());
    for (auto& [name, t] : params.tensors) t.set_requires_grad(false);

    GradCheckResult res;
    for (auto& [name, t] : params.tensors) {
        auto p = t.mutable_data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double x0 = p[i];
            const double h = opt.step * std::max(1.0, std::abs(x0));
            p[i] = x0 + h;
            const double fp = fixed_batch_loss(params, model, obj, vocab, batch, opt.seed, false);
            p[i] = x0 - h;
            const double fm = fixed_batch_loss(params, model, obj, vocab, batch, opt.seed, false);
            p[i] = x0;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = analytic[name][i];
            const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), opt.rel_floor});
            ++res.checked;
            if (rel >= res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = name;
                res.worst_index = i;
                res.worst_analytic = ana;
                res.worst_numeric = num;
            }
        }
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

} // namespace simcrop
