#pragma once

// Downstream evaluation: frozen-encoder features, linear probe with AUC,
// and sentence-to-patch similarity heatmaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "simcrop/error.hpp"
#include "simcrop/model.hpp"
#include "simcrop/objectives.hpp"
#include "simcrop/rng.hpp"
#include "simcrop/serialize.hpp"
#include "simcrop/text.hpp"
#include "simcrop/trainer.hpp"
#include "simcrop/volume.hpp"

namespace simcrop {

template <class T>
struct FeatureSet {
    Tensor<T> features;              ///< n × d
    std::size_t patches_per_sample;  ///< rows seen by the encoder for each sample
};

/// Every patch (no masking) through the vision encoder, then global average pooling.
template <class T>
FeatureSet<T> extract_features(const ModelParams<T>& params, const ModelConfig& cfg,
                               const std::vector<PreparedSample>& corpus) {
    if (corpus.empty()) throw ValueError("extract_features: empty corpus");
    const Tensor<T> pos = positional_embedding_3d<T>(cfg.grid_dims(), cfg.embed_dim);
    std::vector<Tensor<T>> rows;
    std::size_t seen = 0;
    for (const auto& s : corpus) {
        if (s.patches.grid_dims != cfg.grid_dims() || s.patches.patch_dims != cfg.patch_dims)
            throw ShapeError("extract_features: sample " + s.id + " grid " + dims_str(s.patches.grid_dims) +
                             " does not match model grid " + dims_str(cfg.grid_dims()));
        const Tensor<T> f_v = encode_vision(all_patch_rows<T>(s.patches).detach(), pos, params, cfg);
        seen = f_v.rows();
        if (seen != cfg.n_patches()) throw Error("extract_features: encoder saw a partial patch set");
        rows.push_back(instance_feature(f_v).detach());
    }
    return {concat_rows(rows).detach(), seen};
}

/// Probability that a random positive outranks a random negative; ties count ½.
inline double auc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Mid-ranks over tie groups.
    double rank_sum_pos = 0.0;
    std::size_t n_pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double mid = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k)
            if (labels[order[k]]) {
                rank_sum_pos += mid;
                ++n_pos;
            }
        i = j;
    }
    const std::size_t n_neg = scores.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) throw ValueError("auc: both classes must be present");
    const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
    return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

struct ProbeOptions {
    double label_ratio = 1.0;
    std::uint64_t seed = 0;
    std::size_t iters = 1000;
    double lr = 0.1;
    double train_fraction = 0.7;
    bool standardize = true;  ///< z-score features with train-split statistics
};

struct ProbeResult {
    std::vector<double> per_label_auc;  ///< NaN where undefined
    double macro_auc = std::numeric_limits<double>::quiet_NaN();
    double accuracy = std::numeric_limits<double>::quiet_NaN();
    std::size_t train_size = 0;
    std::size_t test_size = 0;
    double label_ratio = 1.0;

    std::string to_csv(const std::vector<std::string>& label_names = {}) const {
        std::ostringstream os;
        os.precision(9);
        os << "metric,value\n";
        for (std::size_t i = 0; i < per_label_auc.size(); ++i) {
            os << "auc_" << (i < label_names.size() ? label_names[i] : std::to_string(i)) << ',';
            if (std::isnan(per_label_auc[i])) os << "undefined";
            else os << per_label_auc[i];
            os << '\n';
        }
        os << "macro_auc," << macro_auc << "\naccuracy," << accuracy << "\ntrain_size," << train_size
           << "\ntest_size," << test_size << "\nlabel_ratio," << label_ratio << '\n';
        return os.str();
    }
};

/// Per-label logistic regression by full-batch gradient descent on frozen features.
/// features: n × d row-major; labels: n rows of L binary labels.
inline ProbeResult linear_probe(const std::vector<double>& features, std::size_t d,
                                const std::vector<std::vector<std::uint8_t>>& labels, const ProbeOptions& opt) {
    const std::size_t n = labels.size();
    if (d == 0 || features.size() != n * d) throw ShapeError("linear_probe: feature matrix is not n x d");
    if (n < 2) throw ValueError("linear_probe: need at least 2 samples");
    if (!(opt.label_ratio > 0.0 && opt.label_ratio <= 1.0))
        throw ValueError("linear_probe: label_ratio must be in (0, 1]");
    const std::size_t n_labels = labels[0].size();
    for (const auto& l : labels)
        if (l.size() != n_labels) throw ShapeError("linear_probe: ragged label matrix");

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(opt.seed, 0x9806ULL);
    shuffle(perm, rng);
    const std::size_t n_train_full =
        std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(opt.train_fraction * static_cast<double>(n))),
                                1, n - 1);
    const std::size_t n_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::llround(opt.label_ratio * static_cast<double>(n_train_full))));
    std::vector<std::size_t> train(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
    std::vector<std::size_t> test(perm.begin() + static_cast<std::ptrdiff_t>(n_train_full), perm.end());

    std::vector<double> mu(d, 0.0), sd(d, 1.0);
    if (opt.standardize) {
        for (std::size_t i : train)
            for (std::size_t j = 0; j < d; ++j) mu[j] += features[i * d + j];
        for (auto& m : mu) m /= static_cast<double>(train.size());
        std::vector<double> var(d, 0.0);
        for (std::size_t i : train)
            for (std::size_t j = 0; j < d; ++j) {
                const double c = features[i * d + j] - mu[j];
                var[j] += c * c;
            }
        for (std::size_t j = 0; j < d; ++j) {
            const double s = std::sqrt(var[j] / static_cast<double>(train.size()));
            sd[j] = s > 1e-12 ? s : 1.0;
        }
    }
    auto x = [&](std::size_t i, std::size_t j) { return (features[i * d + j] - mu[j]) / sd[j]; };

    ProbeResult res;
    res.train_size = train.size();
    res.test_size = test.size();
    res.label_ratio = opt.label_ratio;
    res.per_label_auc.assign(n_labels, std::numeric_limits<double>::quiet_NaN());
    double auc_sum = 0.0, acc_sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t l = 0; l < n_labels; ++l) {
        std::size_t pos = 0;
        for (std::size_t i : train) pos += labels[i][l] ? 1 : 0;
        if (pos == 0 || pos == train.size()) continue;
        std::vector<double> w(d, 0.0), grad(d);
        double b = 0.0;
        for (std::size_t it = 0; it < opt.iters; ++it) {
            std::fill(grad.begin(), grad.end(), 0.0);
            double gb = 0.0;
            for (std::size_t i : train) {
                double z = b;
                for (std::size_t j = 0; j < d; ++j) z += w[j] * x(i, j);
                const double err = 1.0 / (1.0 + std::exp(-z)) - static_cast<double>(labels[i][l]);
                for (std::size_t j = 0; j < d; ++j) grad[j] += err * x(i, j);
                gb += err;
            }
            const double inv = 1.0 / static_cast<double>(train.size());
            for (std::size_t j = 0; j < d; ++j) w[j] -= opt.lr * grad[j] * inv;
            b -= opt.lr * gb * inv;
        }
        std::vector<double> scores;
        std::vector<std::uint8_t> truth;
        std::size_t correct = 0;
        for (std::size_t i : test) {
            double z = b;
            for (std::size_t j = 0; j < d; ++j) z += w[j] * x(i, j);
            scores.push_back(z);
            truth.push_back(labels[i][l]);
            correct += ((z > 0.0) == (labels[i][l] != 0)) ? 1 : 0;
        }
        const std::size_t test_pos = static_cast<std::size_t>(std::count(truth.begin(), truth.end(), 1));
        if (test_pos == 0 || test_pos == truth.size()) continue;
        res.per_label_auc[l] = auc(scores, truth);
        auc_sum += res.per_label_auc[l];
        acc_sum += static_cast<double>(correct) / static_cast<double>(test.size());
        ++defined;
    }
    if (defined > 0) {
        res.macro_auc = auc_sum / static_cast<double>(defined);
        res.accuracy = acc_sum / static_cast<double>(defined);
    }
    return res;
}

template <class T>
ProbeResult linear_probe(const Tensor<T>& features, const std::vector<std::vector<std::uint8_t>>& labels,
                         const ProbeOptions& opt) {
    std::vector<double> f(features.data().begin(), features.data().end());
    return linear_probe(f, features.cols(), labels, opt);
}

/// Features file: one tensor in the checkpoint tensor layout.
template <class T>
void write_features(const std::string& path, const Tensor<T>& features) {
    io::Writer w;
    io::write_tensor(w, features);
    w.write_file(path);
}

template <class T>
Tensor<T> read_features(const std::string& path) {
    auto r = io::Reader::from_file(path);
    Tensor<T> t = io::read_tensor<T>(r);
    if (!r.at_end()) throw FormatError(FormatErrc::corrupt, path + ": trailing bytes");
    return t;
}

struct Heatmap {
    Dims3 grid_dims{};
    Dims3 patch_dims{};
    std::vector<double> scores;       ///< one per patch, patch index order
    std::vector<std::uint8_t> pixels; ///< min-max scaled scores
    std::vector<std::size_t> topk;    ///< ascending
    std::string sentence;
};

/// Min-max scale to [0,255]; a constant input maps to all zeros.
inline std::vector<std::uint8_t> minmax_u8(const std::vector<double>& s) {
    std::vector<std::uint8_t> out(s.size(), 0);
    if (s.empty()) return out;
    const auto [lo, hi] = std::minmax_element(s.begin(), s.end());
    if (!(*hi > *lo)) return out;
    for (std::size_t i = 0; i < s.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(255.0 * (s[i] - *lo) / (*hi - *lo)));
    return out;
}

/// Heatmap from precomputed per-patch scores.
inline Heatmap make_heatmap(const Dims3& grid, const Dims3& patch, std::vector<double> scores, std::size_t k) {
    if (scores.size() != grid[0] * grid[1] * grid[2])
        throw ShapeError("make_heatmap: " + std::to_string(scores.size()) + " scores for grid " + dims_str(grid));
    Heatmap h;
    h.grid_dims = grid;
    h.patch_dims = patch;
    h.pixels = minmax_u8(scores);
    h.topk = top_k_select<double>(scores, k);
    h.scores = std::move(scores);
    return h;
}

/// Cosine similarity between one findings sentence and every patch of the
/// full (unmasked) volume, in the shared projection space.
template <class T>
Heatmap similarity_heatmap(const ModelParams<T>& params, const ModelConfig& cfg, const Vocab& vocab,
                           const PreparedSample& sample, std::size_t sentence_index, std::size_t k) {
    const auto sentences = split_sentences(split_report(sample.report).findings);
    if (sentence_index >= sentences.size())
        throw ValueError("similarity_heatmap: sentence index " + std::to_string(sentence_index) +
                         " out of range, report has " + std::to_string(sentences.size()) + " findings sentences");
    const Tensor<T> pos = positional_embedding_3d<T>(cfg.grid_dims(), cfg.embed_dim);
    const Tensor<T> f_v = encode_vision(all_patch_rows<T>(sample.patches), pos, params, cfg);
    const Tensor<T> patches = project_patches(f_v, params);
    const Tensor<T> sent =
        pool_sentence(encode_text(tokenize(sentences[sentence_index], vocab, true), params, cfg), params, cfg.pooling);
    const Tensor<T> sim = sentence_patch_similarity(sent, patches);
    Heatmap h = make_heatmap(cfg.grid_dims(), cfg.patch_dims,
                             std::vector<double>(sim.data().begin(), sim.data().end()), k);
    h.sentence = sentences[sentence_index];
    return h;
}

/// Binary PGM (P5) of depth slice z, each patch drawn as a patch_h × patch_w block.
inline std::string heatmap_pgm(const Heatmap& h, std::size_t z) {
    if (z >= h.grid_dims[2]) throw ValueError("heatmap_pgm: slice out of range");
    const std::size_t width = h.grid_dims[0] * h.patch_dims[0];
    const std::size_t height = h.grid_dims[1] * h.patch_dims[1];
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t gx = x / h.patch_dims[0], gy = y / h.patch_dims[1];
            out.push_back(static_cast<char>(h.pixels[gx + h.grid_dims[0] * (gy + h.grid_dims[1] * z)]));
        }
    return out;
}

/// Writes <stem>_z<i>.pgm per depth slice and <stem>_topk.txt. Returns the written paths.
inline std::vector<std::string> write_heatmap(const std::string& dir, const std::string& stem, const Heatmap& h) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::vector<std::string> paths;
    for (std::size_t z = 0; z < h.grid_dims[2]; ++z) {
        char name[64];
        std::snprintf(name, sizeof name, "_z%02zu.pgm", z);
        const std::string path = (fs::path(dir) / (stem + name)).string();
        std::ofstream f(path, std::ios::binary);
        if (!f) throw Error("cannot write " + path);
        f << heatmap_pgm(h, z);
        paths.push_back(path);
    }
    const std::string path = (fs::path(dir) / (stem + "_topk.txt")).string();
    std::ofstream f(path);
    if (!f) throw Error("cannot write " + path);
    for (std::size_t i = 0; i < h.topk.size(); ++i) f << (i ? " " : "") << h.topk[i];
    f << '\n';
    paths.push_back(path);
    return paths;
}

/// Expected |S ∩ truth| for a uniformly random k-subset S of n patches.
inline double hypergeometric_overlap(std::size_t n, std::size_t truth_size, std::size_t k) {
    return static_cast<double>(std::min(k, n)) * static_cast<double>(truth_size) / static_cast<double>(n);
}

inline std::size_t overlap_count(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
    std::vector<std::size_t> out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out.size();
}

} // namespace simcrop
