#pragma once

// Losses: masked image modeling (MSE), sentence-patch similarity with top-K
// selection and symmetric InfoNCE alignment, masked report modeling
// (cross-entropy) and their weighted sum.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "simcrop/error.hpp"
#include "simcrop/model.hpp"
#include "simcrop/tensor.hpp"
#include "simcrop/text.hpp"
#include "simcrop/volume.hpp"

namespace simcrop {

/// Mean squared error between reconstruction and target patches, over the
/// masked rows only (MimScope::masked) or over every row.
template <class T>
Tensor<T> mim_loss(const Tensor<T>& recon, const Tensor<T>& target, const MaskPlan& plan,
                   MimScope scope = MimScope::masked) {
    if (recon.shape() != target.shape()) shape_fail("mim_loss", recon.shape(), target.shape());
    if (scope == MimScope::full) return mean(square(sub(recon, target)));
    if (plan.masked_idx.empty()) throw ValueError("mim_loss: no masked patches for masked scope");
    if (plan.n_total != recon.rows())
        throw ShapeError("mim_loss: plan covers " + std::to_string(plan.n_total) + " rows, recon has " +
                         std::to_string(recon.rows()));
    return mean(square(sub(gather_rows(recon, plan.masked_idx), gather_rows(target, plan.masked_idx))));
}

/// Entry (l, s) is the dot product of sentence l and patch s (unit rows → cosine).
template <class T>
Tensor<T> sentence_patch_similarity(const Tensor<T>& sentence_embs, const Tensor<T>& patch_embs) {
    if (sentence_embs.cols() != patch_embs.cols())
        shape_fail("sentence_patch_similarity", sentence_embs.shape(), patch_embs.shape());
    return matmul(sentence_embs, transpose(patch_embs));
}

/// Indices of the min(k, N) largest entries; ties go to the smaller index.
/// Returned in ascending index order.
template <class T>
std::vector<std::size_t> top_k_select(std::span<const T> row, std::size_t k) {
    if (k < 1) throw ValueError("top_k_select: k must be >= 1");
    std::vector<std::size_t> idx(row.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t keff = std::min(k, row.size());
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keff), idx.end(),
                      [&](std::size_t a, std::size_t b) {
                          return row[a] > row[b] || (row[a] == row[b] && a < b);
                      });
    idx.resize(keff);
    std::sort(idx.begin(), idx.end());
    return idx;
}

/// Mean of the selected patch embeddings, re-normalized to unit length (1 × d_s).
template <class T>
Tensor<T> aligned_feature(const Tensor<T>& patch_embs, const std::vector<std::size_t>& topk_idx) {
    if (topk_idx.empty()) throw ValueError("aligned_feature: empty selection");
    return l2_normalize_rows(mean_rows(gather_rows(patch_embs, topk_idx)));
}

/// Symmetric InfoNCE over the sentences of one report:
/// -(1/n) Σ_i [log softmax_j(s^vt_ij/τ)_i + log softmax_j(s^tv_ij/τ)_i]
/// with s^vt = A Sᵀ and s^tv = S Aᵀ.
template <class T>
Tensor<T> align_loss(const Tensor<T>& aligned, const Tensor<T>& sentences, T tau) {
    if (aligned.dim() != 2 || aligned.shape() != sentences.shape())
        shape_fail("align_loss", aligned.shape(), sentences.shape());
    if (!(tau > T(0))) throw ValueError("align_loss: temperature must be positive");
    const std::size_t n = aligned.rows();
    std::vector<std::size_t> diag(n);
    for (std::size_t i = 0; i < n; ++i) diag[i] = i * n + i;
    const T inv_tau = T(1) / tau;
    Tensor<T> vt = log_softmax(scale(matmul(aligned, transpose(sentences)), inv_tau));
    Tensor<T> tv = log_softmax(scale(matmul(sentences, transpose(aligned)), inv_tau));
    Tensor<T> total = add(sum(take(vt, diag)), sum(take(tv, diag)));
    return scale(total, T(-1) / static_cast<T>(n));
}

/// Mean negative log-likelihood of the original ids at masked positions.
template <class T>
Tensor<T> mlm_loss(const Tensor<T>& logits, const std::vector<TokenId>& target_ids, const MaskPlan& plan) {
    if (plan.masked_idx.empty()) throw ValueError("mlm_loss: no masked tokens");
    detail::require_2d("mlm_loss", logits);
    const std::size_t vocab = logits.cols();
    if (target_ids.size() != logits.rows())
        throw ShapeError("mlm_loss: " + std::to_string(target_ids.size()) + " targets for " +
                         std::to_string(logits.rows()) + " logit rows");
    std::vector<std::size_t> flat;
    for (std::size_t pos : plan.masked_idx) {
        if (pos >= logits.rows() || target_ids[pos] >= vocab)
            throw ValueError("mlm_loss: masked position or target id out of range");
        flat.push_back(pos * vocab + target_ids[pos]);
    }
    return scale(mean(take(log_softmax(logits), std::move(flat))), T(-1));
}

struct LossReport {
    double l_mim = 0, l_align = 0, l_mlm = 0, l_total = 0;
    double lambda1 = 1, lambda2 = 1;

    std::string csv_row(std::size_t step) const {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g", step, l_mim, l_align, l_mlm, l_total);
        return buf;
    }
    static std::string csv_header() { return "step,l_mim,l_align,l_mlm,l_total"; }
};

template <class T>
struct TotalLoss {
    Tensor<T> total;
    LossReport report;
};

/// L = L_mim + λ1 L_align + λ2 L_mlm. l_align counts as zero when alignment is
/// disabled.
template <class T>
TotalLoss<T> total_loss(const Tensor<T>& l_mim, const Tensor<T>& l_align, const Tensor<T>& l_mlm,
                        T lambda1, T lambda2, bool enable_sa = true) {
    auto check = [](const char* name, const Tensor<T>& t) {
        if (t.size() != 1) throw ShapeError(std::string("total_loss: ") + name + " is not a scalar");
        if (!std::isfinite(t.item())) throw NumericError(std::string("total_loss: ") + name + " is not finite");
    };
    check("l_mim", l_mim);
    check("l_align", l_align);
    check("l_mlm", l_mlm);
    const Tensor<T> align = enable_sa ? l_align : Tensor<T>::scalar(T(0));
    TotalLoss<T> out{add(add(l_mim, scale(align, lambda1)), scale(l_mlm, lambda2)), {}};
    out.report.l_mim = static_cast<double>(l_mim.item());
    out.report.l_align = static_cast<double>(align.item());
    out.report.l_mlm = static_cast<double>(l_mlm.item());
    out.report.l_total = static_cast<double>(out.total.item());
    out.report.lambda1 = static_cast<double>(lambda1);
    out.report.lambda2 = static_cast<double>(lambda2);
    return out;
}

} // namespace simcrop
