#pragma once

// End-to-end pre-training: corpus loading and preprocessing, the per-sample
// forward pass that assembles all three objectives, the training step with
// clipping and AdamW, and binary checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "simcrop/config.hpp"
#include "simcrop/error.hpp"
#include "simcrop/model.hpp"
#include "simcrop/objectives.hpp"
#include "simcrop/optim.hpp"
#include "simcrop/rng.hpp"
#include "simcrop/serialize.hpp"
#include "simcrop/synthetic.hpp"
#include "simcrop/text.hpp"
#include "simcrop/volume.hpp"

namespace simcrop {

/// A volume already normalized and cut into patches, with its report.
struct PreparedSample {
    std::string id;
    PatchGrid patches;
    std::string report;
    std::vector<std::vector<std::size_t>> truth;
    std::vector<std::uint8_t> labels;
};

inline PreparedSample prepare_sample(const Volume& raw_hu, const Spacing3& target_spacing,
                                     const Dims3& patch_dims, std::string report) {
    Volume v = raw_hu.spacing == target_spacing ? raw_hu : resample_trilinear(raw_hu, target_spacing);
    PreparedSample s;
    s.patches = patchify(normalize_hu(v), patch_dims);
    s.report = std::move(report);
    return s;
}

inline PreparedSample prepare_sample(const SyntheticSample& g, const Config& cfg) {
    PreparedSample s = prepare_sample(g.volume, {cfg.target_spacing_x, cfg.target_spacing_y, cfg.target_spacing_z},
                                      {cfg.patch_h, cfg.patch_w, cfg.patch_d}, g.report_text);
    s.id = "seed_" + std::to_string(g.seed);
    s.truth = g.sentence_truth;
    s.labels = g.labels;
    return s;
}

/// Load and preprocess every sample listed in dir/manifest.csv.
inline std::vector<PreparedSample> load_corpus(const std::string& dir, const Config& cfg) {
    namespace fs = std::filesystem;
    std::vector<PreparedSample> out;
    const Spacing3 target{cfg.target_spacing_x, cfg.target_spacing_y, cfg.target_spacing_z};
    const Dims3 patch{cfg.patch_h, cfg.patch_w, cfg.patch_d};
    for (const auto& e : read_manifest(dir)) {
        Volume v = read_svol((fs::path(dir) / e.volume_path).string());
        PreparedSample s = prepare_sample(v, target, patch, read_text_file((fs::path(dir) / e.report_path).string()));
        s.id = e.sample_id;
        s.truth = decode_truth(read_text_file((fs::path(dir) / e.truth_path).string()));
        s.labels = e.labels;
        out.push_back(std::move(s));
    }
    if (out.empty()) throw ValueError("load_corpus: " + dir + " has no samples");
    return out;
}

inline GenConfig gen_config_from(const Config& cfg) {
    GenConfig g;
    g.dims = {cfg.volume_h, cfg.volume_w, cfg.volume_d};
    g.spacing = {cfg.spacing_x, cfg.spacing_y, cfg.spacing_z};
    g.patch_dims = {cfg.patch_h, cfg.patch_w, cfg.patch_d};
    g.lesion_min = cfg.lesion_min;
    g.lesion_max = cfg.lesion_max;
    g.prevalence = cfg.prevalence;
    g.radius_scale = std::min(1.0, static_cast<double>(std::min(cfg.volume_h, cfg.volume_w)) / 32.0);
    return g;
}

/// Generate a corpus in memory (seeds seed .. seed+n-1) without touching disk.
inline std::vector<PreparedSample> synthesize_corpus(const Config& cfg, std::uint64_t seed, std::size_t n) {
    const GenConfig g = gen_config_from(cfg);
    std::vector<PreparedSample> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(prepare_sample(generate_sample(seed + i, g), cfg));
    return out;
}

template <class T>
Tensor<T> patch_rows(const PatchGrid& g, const std::vector<std::size_t>& idx) {
    std::vector<T> out;
    out.reserve(idx.size() * g.patch_voxels());
    for (std::size_t i : idx)
        for (float v : g.patch(i)) out.push_back(static_cast<T>(v));
    return Tensor<T>(Shape{idx.size(), g.patch_voxels()}, std::move(out));
}

template <class T>
Tensor<T> all_patch_rows(const PatchGrid& g) {
    std::vector<T> out(g.data.begin(), g.data.end());
    return Tensor<T>(Shape{g.count(), g.patch_voxels()}, std::move(out));
}

/// Knobs of the objectives that are not part of the model's shape.
struct ObjectiveOptions {
    double image_mask_ratio = 0.75;
    double report_mask_ratio = 0.75;
    MaskMode mask_mode = MaskMode::plain;
    std::size_t top_k = 4;
    double tau = 0.07;
    double lambda1 = 1.0;
    double lambda2 = 1.0;

    static ObjectiveOptions from(const Config& c) {
        return {c.image_mask_ratio, c.report_mask_ratio,
                c.mask_mode == "bert" ? MaskMode::bert : MaskMode::plain,
                c.top_k, c.tau, c.lambda1, c.lambda2};
    }
};

template <class T>
struct SampleLosses {
    Tensor<T> mim = Tensor<T>::scalar(T(0));
    Tensor<T> align = Tensor<T>::scalar(T(0));
    Tensor<T> mlm = Tensor<T>::scalar(T(0));
    std::size_t visible_patches = 0;
};

/// Forward pass of one sample through all enabled objectives. All
/// randomness (patch mask, token mask) is drawn from `rng`.
template <class T>
SampleLosses<T> forward_sample(const ModelParams<T>& params, const ModelConfig& cfg,
                               const ObjectiveOptions& opt, const Vocab& vocab,
                               const PreparedSample& sample, Rng& rng) {
    if (sample.patches.grid_dims != cfg.grid_dims() || sample.patches.patch_dims != cfg.patch_dims)
        throw ShapeError("forward_sample: sample " + sample.id + " grid " + dims_str(sample.patches.grid_dims) +
                         " does not match model grid " + dims_str(cfg.grid_dims()));
    SampleLosses<T> out;
    const std::size_t n_total = cfg.n_patches();
    const MaskPlan plan = sample_mask(n_total, opt.image_mask_ratio, rng);
    if (plan.unmasked_idx.empty()) throw ValueError("forward_sample: image mask leaves no visible patch");
    out.visible_patches = plan.unmasked_idx.size();

    const Tensor<T> full_pos = positional_embedding_3d<T>(cfg.grid_dims(), cfg.embed_dim);
    const Tensor<T> visible = patch_rows<T>(sample.patches, plan.unmasked_idx);
    const Tensor<T> f_v = encode_vision(visible, gather_rows(full_pos, plan.unmasked_idx), params, cfg);

    // masked image modeling
    const Tensor<T> recon = decode_vision(f_v, plan, full_pos, params, cfg);
    out.mim = mim_loss(recon, all_patch_rows<T>(sample.patches), plan, cfg.mim_scope);

    ReportBundle report = make_report_bundle(sample.report, vocab, opt.report_mask_ratio, rng, opt.mask_mode);

    // masked report modeling over fused instance + word-patch features
    if (cfg.enable_mlm && !report.masked.plan.masked_idx.empty()) {
        const Tensor<T> f_t = encode_text(report.masked.input_ids, params, cfg);
        std::optional<Tensor<T>> f_inst, f_word;
        if (cfg.enable_il) f_inst = instance_feature(f_v);
        if (cfg.enable_wl) f_word = cross_attention(f_t, f_v, params, cfg).out;
        const Tensor<T> logits = decode_text(f_t, f_inst, f_word, params, cfg);
        out.mlm = mlm_loss(logits, report.masked.target_ids, report.masked.plan);
    }

    // similarity-driven alignment of each findings sentence to its top-K patches
    if (cfg.enable_sa && report.sentences.size() >= 1) {
        std::vector<Tensor<T>> sent_rows;
        for (const auto& ids : report.sentences)
            sent_rows.push_back(pool_sentence(encode_text(ids, params, cfg), params, cfg.pooling));
        const Tensor<T> sentences = concat_rows(sent_rows);
        const Tensor<T> patches = project_patches(f_v, params);
        const Tensor<T> sim = sentence_patch_similarity(sentences, patches);
        std::vector<Tensor<T>> aligned_rows;
        for (std::size_t l = 0; l < sentences.rows(); ++l) {
            auto row = sim.data().subspan(l * sim.cols(), sim.cols());
            aligned_rows.push_back(aligned_feature(patches, top_k_select<T>(row, opt.top_k)));
        }
        out.align = align_loss(concat_rows(aligned_rows), sentences, static_cast<T>(opt.tau));
    }
    return out;
}

template <class T>
std::vector<Tensor<T>> reshape_all(const std::vector<Tensor<T>>& v) {
    std::vector<Tensor<T>> out;
    for (auto& t : v) out.push_back(reshape(t, Shape{1, 1}));
    return out;
}

/// Batch loss: each component averaged over the batch, then combined.
template <class T>
TotalLoss<T> batch_loss(const std::vector<SampleLosses<T>>& per_sample, const ObjectiveOptions& opt,
                        bool enable_sa) {
    if (per_sample.empty()) throw ValueError("batch_loss: empty batch");
    std::vector<Tensor<T>> mim, align, mlm;
    for (auto& s : per_sample) {
        mim.push_back(s.mim);
        align.push_back(s.align);
        mlm.push_back(s.mlm);
    }
    auto avg = [](const std::vector<Tensor<T>>& v) { return mean(concat_rows(reshape_all(v))); };
    return total_loss(avg(mim), avg(align), avg(mlm), static_cast<T>(opt.lambda1),
                      static_cast<T>(opt.lambda2), enable_sa);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class T>
struct Checkpoint {
    ModelConfig model;
    std::uint64_t step = 0;
    Rng::State rng;
    AdamW<T> optimizer;
    ModelParams<T> params;
};

/// "SCRP", u32 version, u64 fingerprint, config text, u64 step, rng state,
/// optimizer hyper-parameters and step count, named (param, m, v) tensors,
/// trailing FNV-1a checksum of everything before it.
template <class T>
std::string encode_checkpoint(const Checkpoint<T>& ck) {
    io::Writer w;
    w.put_bytes("SCRP");
    w.put(kCheckpointVersion);
    w.put(ck.model.fingerprint());
    w.put_string(ck.model.canonical());
    w.put(ck.step);
    w.put(ck.rng.state);
    w.put(ck.rng.inc);
    const auto& o = ck.optimizer.options();
    for (double v : {o.lr, o.weight_decay, o.beta1, o.beta2, o.eps}) w.put(v);
    w.put(ck.optimizer.step_count());
    w.put(static_cast<std::uint32_t>(ck.params.tensors.size()));
    for (const auto& [name, t] : ck.params.tensors) {
        w.put_string(name);
        io::write_tensor(w, t);
        auto it = ck.optimizer.moments().find(name);
        const bool has = it != ck.optimizer.moments().end() && it->second.m.size() == t.size();
        w.put(static_cast<std::uint8_t>(has));
        if (has) {
            io::write_tensor(w, Tensor<T>(t.shape(), it->second.m));
            io::write_tensor(w, Tensor<T>(t.shape(), it->second.v));
        }
    }
    std::string bytes = w.bytes();
    io::Writer tail;
    tail.put(io::fnv1a(bytes));
    return bytes + tail.bytes();
}

template <class T>
Checkpoint<T> decode_checkpoint(std::string bytes, const std::string& origin,
                                std::optional<std::uint64_t> expected_fingerprint = std::nullopt) {
    if (bytes.size() < 4 || bytes.compare(0, 4, "SCRP") != 0)
        throw FormatError(FormatErrc::bad_magic, origin);
    if (bytes.size() < 8 + 8)
        throw FormatError(FormatErrc::truncated, origin);
    {
        io::Reader head(bytes.substr(4, 4), origin);
        auto version = head.get<std::uint32_t>();
        if (version != kCheckpointVersion)
            throw FormatError(FormatErrc::bad_version, origin + ": checkpoint version " + std::to_string(version));
    }
    const std::string payload = bytes.substr(0, bytes.size() - 8);
    io::Reader trailer(bytes.substr(bytes.size() - 8), origin);
    const bool checksum_ok = trailer.get<std::uint64_t>() == io::fnv1a(payload);

    io::Reader r(payload, origin);
    Checkpoint<T> ck;
    std::uint64_t fp = 0;
    try {
        r.get_bytes(4);
        r.get<std::uint32_t>();
        fp = r.get<std::uint64_t>();
        ck.model = ModelConfig::parse_canonical(r.get_string());
        ck.step = r.get<std::uint64_t>();
        ck.rng.state = r.get<std::uint64_t>();
        ck.rng.inc = r.get<std::uint64_t>();
        AdamWOptions o;
        o.lr = r.get<double>();
        o.weight_decay = r.get<double>();
        o.beta1 = r.get<double>();
        o.beta2 = r.get<double>();
        o.eps = r.get<double>();
        ck.optimizer = AdamW<T>(o);
        ck.optimizer.set_step_count(r.get<std::uint64_t>());
        const auto count = r.get<std::uint32_t>();
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string name = r.get_string();
            Tensor<T> t = io::read_tensor<T>(r);
            t.set_requires_grad(true);
            if (r.get<std::uint8_t>()) {
                Tensor<T> m = io::read_tensor<T>(r);
                Tensor<T> v = io::read_tensor<T>(r);
                if (m.shape() != t.shape() || v.shape() != t.shape())
                    throw FormatError(FormatErrc::corrupt, origin + ": moment shape for " + name);
                ck.optimizer.moments()[name] = {std::vector<T>(m.data().begin(), m.data().end()),
                                                std::vector<T>(v.data().begin(), v.data().end())};
            }
            ck.params.tensors.emplace(std::move(name), std::move(t));
        }
        if (!r.at_end()) throw FormatError(FormatErrc::corrupt, origin + ": trailing bytes");
    } catch (const FormatError& e) {
        if (e.code() == FormatErrc::truncated) throw;
        throw FormatError(FormatErrc::corrupt, e.what());
    } catch (const std::exception& e) {
        throw FormatError(FormatErrc::corrupt, origin + ": " + e.what());
    }
    if (!checksum_ok) throw FormatError(FormatErrc::corrupt, origin + ": checksum mismatch");
    if (ck.model.fingerprint() != fp)
        throw FormatError(FormatErrc::corrupt, origin + ": stored fingerprint does not match config");
    if (expected_fingerprint && fp != *expected_fingerprint)
        throw FormatError(FormatErrc::fingerprint_mismatch,
                          origin + ": checkpoint was written for a different model config");
    // Every parameter the config implies must be present with the right shape.
    const ModelParams<T> expect = init_params<T>(ck.model, 0);
    if (expect.tensors.size() != ck.params.tensors.size())
        throw FormatError(FormatErrc::corrupt, origin + ": parameter set does not match config");
    for (const auto& [name, t] : expect.tensors)
        if (!ck.params.contains(name) || ck.params[name].shape() != t.shape())
            throw FormatError(FormatErrc::corrupt, origin + ": parameter " + name + " missing or misshapen");
    return ck;
}

template <class T>
void save_checkpoint(const std::string& path, const Checkpoint<T>& ck) {
    io::Writer w;
    w.put_bytes(encode_checkpoint(ck));
    w.write_file(path);
}

template <class T>
Checkpoint<T> load_checkpoint(const std::string& path,
                              std::optional<std::uint64_t> expected_fingerprint = std::nullopt) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(FormatErrc::io, "cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint<T>(std::move(bytes), path, expected_fingerprint);
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

template <class T>
class Trainer {
public:
    Trainer(const Config& cfg, const Vocab& vocab)
        : cfg_(cfg), vocab_(vocab), model_(ModelConfig::from(cfg, vocab.size())),
          objectives_(ObjectiveOptions::from(cfg)), root_(cfg.seed, 0) {
        params_ = init_params<T>(model_, cfg.seed, cfg.init_std);
        optimizer_ = AdamW<T>({cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps});
        refresh_trainable();
    }

    /// Resume from a checkpoint; the model config must match this run's.
    void restore(const Checkpoint<T>& ck) {
        if (ck.model.fingerprint() != model_.fingerprint())
            throw FormatError(FormatErrc::fingerprint_mismatch, "checkpoint model config differs from run config");
        params_ = ck.params.clone();
        optimizer_ = ck.optimizer;
        step_ = ck.step;
        root_.set_state(ck.rng);
    }

    Checkpoint<T> checkpoint() const {
        return Checkpoint<T>{model_, step_, root_.state(), optimizer_, params_.clone()};
    }

    /// Sample indices of the batch for `step`: a fresh seeded permutation per epoch.
    std::vector<std::size_t> batch_indices(std::uint64_t step, std::size_t corpus_size) const {
        std::vector<std::size_t> out;
        const std::size_t b = cfg_.batch_size;
        std::uint64_t cached_epoch = UINT64_MAX;
        std::vector<std::size_t> perm;
        for (std::size_t i = 0; i < b; ++i) {
            const std::uint64_t pos = step * b + i;
            const std::uint64_t epoch = pos / corpus_size;
            if (epoch != cached_epoch) {
                perm.resize(corpus_size);
                for (std::size_t k = 0; k < corpus_size; ++k) perm[k] = k;
                Rng r(root_.state().state, 0x100000ULL + epoch);
                shuffle(perm, r);
                cached_epoch = epoch;
            }
            out.push_back(perm[pos % corpus_size]);
        }
        return out;
    }

    double learning_rate(std::uint64_t step) const {
        double lr = cfg_.lr;
        if (cfg_.warmup_steps > 0 && step < cfg_.warmup_steps)
            lr *= static_cast<double>(step + 1) / static_cast<double>(cfg_.warmup_steps);
        if (cfg_.lr_schedule == "cosine" && cfg_.steps > 0)
            lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(std::min<std::uint64_t>(step, cfg_.steps)) /
                                        static_cast<double>(cfg_.steps)));
        return lr;
    }

    /// One optimization step on explicit samples; the step counter advances.
    LossReport train_step(const std::vector<const PreparedSample*>& batch) {
        if (batch.empty()) throw ValueError("train_step: empty batch");
        params_.zero_grad();
        std::vector<SampleLosses<T>> losses;
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Rng rng(root_.state().state, 1 + step_ * 65536ULL + i);
            try {
                losses.push_back(forward_sample(params_, model_, objectives_, vocab_, *batch[i], rng));
            } catch (const Error& e) {
                throw Error("train_step " + std::to_string(step_) + ", sample " + batch[i]->id + ": " + e.what());
            }
        }
        TotalLoss<T> loss = batch_loss(losses, objectives_, model_.enable_sa);
        backward(loss.total);
        last_grad_norm_ = clip_grad_norm(params_, trainable_, cfg_.grad_clip);
        optimizer_.step(params_, trainable_, learning_rate(step_));
        ++step_;
        return loss.report;
    }

    LossReport train_step(const std::vector<PreparedSample>& corpus) {
        std::vector<const PreparedSample*> batch;
        for (std::size_t i : batch_indices(step_, corpus.size())) batch.push_back(&corpus[i]);
        return train_step(batch);
    }

    const ModelParams<T>& params() const { return params_; }
    ModelParams<T>& params() { return params_; }
    const ModelConfig& model() const { return model_; }
    const ObjectiveOptions& objectives() const { return objectives_; }
    const Config& config() const { return cfg_; }
    const Vocab& vocab() const { return vocab_; }
    std::uint64_t step() const { return step_; }
    double last_grad_norm() const { return last_grad_norm_; }
    const std::set<std::string>& trainable() const { return trainable_; }

private:
    void refresh_trainable() {
        trainable_.clear();
        for (const auto& [name, _] : params_.tensors)
            if (!(model_.freeze_text_encoder && is_text_encoder_param(name))) trainable_.insert(name);
    }

    Config cfg_;
    Vocab vocab_;
    ModelConfig model_;
    ObjectiveOptions objectives_;
    Rng root_;
    ModelParams<T> params_;
    AdamW<T> optimizer_;
    std::set<std::string> trainable_;
    std::uint64_t step_ = 0;
    double last_grad_norm_ = 0.0;
};

/// Trains until trainer.step() == until. on_step(step, report) sees the
/// 1-based step number just completed.
template <class T>
std::vector<LossReport> train_until(Trainer<T>& trainer, const std::vector<PreparedSample>& corpus,
                                    std::uint64_t until,
                                    const std::function<void(std::uint64_t, const LossReport&)>& on_step = {}) {
    std::vector<LossReport> out;
    while (trainer.step() < until) {
        out.push_back(trainer.train_step(corpus));
        if (on_step) on_step(trainer.step(), out.back());
    }
    return out;
}

} // namespace simcrop
