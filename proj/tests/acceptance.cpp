// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "simcrop/simcrop.hpp"

using namespace simcrop;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
    std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

/// Runs one criterion; an escaping exception counts as a failure.
void criterion(int id, const char* name, const std::function<std::pair<bool, std::string>()>& body) {
    try {
        auto [ok, detail] = body();
        report(id, name, ok, detail);
    } catch (const std::exception& e) {
        report(id, name, false, std::string("exception: ") + e.what());
    }
}

std::string fmt(const char* f, double a = 0, double b = 0, double c = 0, double d = 0) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

TensorD randn(Shape s, Rng& rng) {
    std::vector<double> v(numel(s));
    for (auto& x : v) x = rng.normal();
    return TensorD(std::move(s), std::move(v));
}

// ---------------------------------------------------------------- oracles

double mim_oracle(const TensorD& a, const TensorD& b, const MaskPlan& p) {
    const std::size_t v = a.cols();
    double s = 0;
    for (auto r : p.masked_idx)
        for (std::size_t c = 0; c < v; ++c) s += (a.data()[r * v + c] - b.data()[r * v + c]) * (a.data()[r * v + c] - b.data()[r * v + c]);
    return s / static_cast<double>(p.masked_idx.size() * v);
}

double align_oracle(const TensorD& a, const TensorD& s, double tau) {
    const std::size_t n = a.rows(), d = a.cols();
    auto dot = [&](const TensorD& x, std::size_t i, const TensorD& y, std::size_t j) {
        double r = 0;
        for (std::size_t c = 0; c < d; ++c) r += x.data()[i * d + c] * y.data()[j * d + c];
        return r;
    };
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double zvt = 0, ztv = 0;
        for (std::size_t j = 0; j < n; ++j) {
            zvt += std::exp(dot(a, i, s, j) / tau);
            ztv += std::exp(dot(s, i, a, j) / tau);
        }
        total += dot(a, i, s, i) / tau - std::log(zvt) + dot(s, i, a, i) / tau - std::log(ztv);
    }
    return -total / static_cast<double>(n);
}

double mlm_oracle(const TensorD& logits, const std::vector<TokenId>& t, const MaskPlan& p) {
    const std::size_t v = logits.cols();
    double s = 0;
    for (auto r : p.masked_idx) {
        double z = 0;
        for (std::size_t c = 0; c < v; ++c) z += std::exp(logits.data()[r * v + c]);
        s += std::log(z) - logits.data()[r * v + t[r]];
    }
    return s / static_cast<double>(p.masked_idx.size());
}

double auc_oracle(const std::vector<double>& s, const std::vector<std::uint8_t>& y) {
    double num = 0, den = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j)
            if (y[i] && !y[j]) {
                den += 1;
                num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
            }
    return num / den;
}

std::vector<std::size_t> topk_oracle(const std::vector<double>& row, std::size_t k) {
    std::vector<std::size_t> idx(row.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
    idx.resize(std::min(k, row.size()));
    std::sort(idx.begin(), idx.end());
    return idx;
}

// ---------------------------------------------------------------- training helpers

struct Run {
    std::vector<LossReport> trace;
    std::string checkpoint;
    double seconds = 0;
};

Run train(const Config& cfg, const Vocab& vocab, const std::vector<PreparedSample>& corpus,
          std::uint64_t until, Trainer<float>* keep = nullptr) {
    Trainer<float> local(cfg, vocab);
    Trainer<float>& t = keep ? *keep : local;
    const auto t0 = std::chrono::steady_clock::now();
    Run r;
    r.trace = train_until(t, corpus, until);
    r.seconds = seconds_since(t0);
    r.checkpoint = encode_checkpoint(t.checkpoint());
    return r;
}

struct OverlapStats {
    double overlap = 0, expected = 0;
    std::size_t sentences = 0;
};

OverlapStats alignment_overlap(const ModelParams<float>& p, const ModelConfig& m, const Vocab& vocab,
                               const std::vector<PreparedSample>& held, std::size_t k, std::size_t min_sentences) {
    OverlapStats st;
    for (const auto& s : held) {
        for (std::size_t j = 0; j < s.truth.size(); ++j) {
            const Heatmap h = similarity_heatmap(p, m, vocab, s, j, k);
            st.overlap += static_cast<double>(overlap_count(h.topk, s.truth[j]));
            st.expected += hypergeometric_overlap(h.scores.size(), s.truth[j].size(), h.topk.size());
            ++st.sentences;
        }
        if (st.sentences >= min_sentences) break;
    }
    return st;
}

double probe_macro(const ModelParams<float>& p, const ModelConfig& m, const std::vector<PreparedSample>& held,
                   const Config& cfg) {
    const auto feats = extract_features(p, m, held);
    std::vector<std::vector<std::uint8_t>> labels;
    for (const auto& s : held) labels.push_back(s.labels);
    ProbeOptions opt;
    opt.seed = cfg.probe_seed;
    opt.iters = cfg.probe_iters;
    opt.lr = cfg.probe_lr;
    return linear_probe(feats.features, labels, opt).macro_auc;
}

} // namespace

int main(int argc, char** argv) {
    const auto t_all = std::chrono::steady_clock::now();
    Config desk;
    if (argc > 1) desk.load_file(argv[1]);
    desk.validate();
    const Vocab vocab = synthetic_vocab();

    // 1. gradient fidelity
    criterion(1, "gradient fidelity", [&] {
        Config tiny;
        tiny.apply_preset("tiny");
        const auto r = grad_check(tiny);
        const bool ok = r.max_rel_error < 1e-6 && r.seconds < 60.0;
        return std::pair{ok, fmt("max rel error %.3e over %.0f entries (d=16, 1 layer each, float64) in %.1f s (< 1e-6, < 60 s)",
                                 r.max_rel_error, static_cast<double>(r.checked), r.seconds) +
                                 " worst " + r.worst_param};
    });

    // 2. loss oracles
    criterion(2, "loss oracles", [&] {
        Rng rng(2, 2);
        double e_mim = 0, e_align = 0, e_mlm = 0, e_auc = 0;
        for (int t = 0; t < 100; ++t) {
            const std::size_t n = 4 + rng.below(12), v = 1 + rng.below(10);
            const auto a = randn({n, v}, rng), b = randn({n, v}, rng);
            MaskPlan p = sample_mask(n, 0.75, rng);
            e_mim = std::max(e_mim, std::abs(mim_loss(a, b, p).item() - mim_oracle(a, b, p)));

            const std::size_t ns = 1 + rng.below(6), d = 2 + rng.below(8);
            const double tau = 0.05 + rng.uniform();
            const auto fa = l2_normalize_rows(randn({ns, d}, rng)), fs = l2_normalize_rows(randn({ns, d}, rng));
            e_align = std::max(e_align, std::abs(align_loss(fa, fs, tau).item() - align_oracle(fa, fs, tau)));

            const std::size_t len = 3 + rng.below(10), vocab_n = 2 + rng.below(20);
            const auto logits = randn({len, vocab_n}, rng);
            std::vector<TokenId> target(len);
            for (auto& x : target) x = static_cast<TokenId>(rng.below(static_cast<std::uint32_t>(vocab_n)));
            const MaskPlan tp = sample_mask(len, 0.5, rng);
            if (!tp.masked_idx.empty())
                e_mlm = std::max(e_mlm, std::abs(mlm_loss(logits, target, tp).item() - mlm_oracle(logits, target, tp)));

            const std::size_t m = 10 + rng.below(30);
            std::vector<double> sc(m);
            std::vector<std::uint8_t> y(m);
            for (std::size_t i = 0; i < m; ++i) {
                sc[i] = static_cast<double>(rng.below(15));
                y[i] = static_cast<std::uint8_t>(i < 2 ? i : rng.below(2));
            }
            e_auc = std::max(e_auc, std::abs(auc(sc, y) - auc_oracle(sc, y)));
        }
        const TensorD one = l2_normalize_rows(randn({1, 5}, rng));
        const double single = 0.0 + align_loss(one, l2_normalize_rows(randn({1, 5}, rng)), 0.07).item();
        TensorD same({4, 2}, {0.6, 0.8, 0.6, 0.8, 0.6, 0.8, 0.6, 0.8});
        const double uniform_err = std::abs(align_loss(same, same, 0.07).item() - 2.0 * std::log(4.0));
        const double worst = std::max({e_mim, e_align, e_mlm, e_auc});
        const bool ok = worst < 1e-6 && single == 0.0 && uniform_err < 1e-6;
        return std::pair{ok, fmt("max |err| mim %.1e align %.1e mlm %.1e auc %.1e over 100 instances each", e_mim,
                                 e_align, e_mlm, e_auc) +
                                 fmt("; N_sent=1 -> %g, uniform N_sent=4 error %.1e", single, uniform_err)};
    });

    // 3. masking and geometry
    criterion(3, "masking/geometry exactness", [&] {
        Rng rng(3, 3);
        const MaskPlan p = sample_mask(2744, 0.75, rng);
        Config paper;
        paper.apply_preset("paper");
        const std::size_t grid = ModelConfig::from(paper, vocab.size()).n_patches();
        std::size_t exact = 0;
        for (int t = 0; t < 50; ++t) {
            const Dims3 pd{1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4)};
            const Dims3 dims{pd[0] * (1 + rng.below(5)), pd[1] * (1 + rng.below(5)), pd[2] * (1 + rng.below(5))};
            Volume v(dims, {1, 1, 1});
            for (auto& x : v.voxels) x = static_cast<float>(rng.normal());
            const Volume back = unpatchify(patchify(v, pd), v.spacing);
            exact += std::memcmp(back.voxels.data(), v.voxels.data(), v.voxels.size() * sizeof(float)) == 0 &&
                             back.dims == v.dims
                         ? 1
                         : 0;
        }
        const bool ok = grid == 2744 && p.unmasked_idx.size() == 686 && p.masked_idx.size() == 2058 && exact == 50;
        return std::pair{ok, fmt("224x224x112 grid of 16x16x8 patches: %.0f, ratio 0.75 keeps %.0f; %.0f/50 volumes round-trip bit-exactly",
                                 static_cast<double>(grid), static_cast<double>(p.unmasked_idx.size()),
                                 static_cast<double>(exact))};
    });

    // 4. top-K
    criterion(4, "top-K correctness", [&] {
        Rng rng(4, 4);
        std::size_t agree = 0, invariant = 0;
        for (int t = 0; t < 1000; ++t) {
            const std::size_t n = 1 + rng.below(100);
            std::vector<double> row(n);
            for (auto& x : row) x = static_cast<double>(rng.below(10)) / 5.0 - 1.0;
            const std::size_t k = 1 + rng.below(static_cast<std::uint32_t>(n + 4));
            const auto got = top_k_select<double>(row, k);
            agree += got == topk_oracle(row, k) ? 1 : 0;
            std::vector<double> mono(n);
            for (std::size_t i = 0; i < n; ++i) mono[i] = 3.0 * std::exp(row[i]) + 1.0;
            invariant += top_k_select<double>(mono, k) == got ? 1 : 0;
        }
        return std::pair{agree == 1000 && invariant == 1000,
                         fmt("%.0f/1000 rows match the stable-sort oracle (ties to the smaller index), %.0f/1000 invariant "
                             "under a positive monotone transform",
                             static_cast<double>(agree), static_cast<double>(invariant))};
    });

    // Shared desk run for criteria 5, 6, 7 and 9.
    const auto corpus = synthesize_corpus(desk, desk.seed, desk.n);
    const auto held = synthesize_corpus(desk, 1000000, 300);
    Trainer<float> main_trainer(desk, vocab);
    const ModelParams<float> random_init = main_trainer.params().clone();
    std::string ckpt_250;
    Run main_run;
    {
        const auto t0 = std::chrono::steady_clock::now();
        main_run.trace = train_until(main_trainer, corpus, desk.steps / 2);
        ckpt_250 = encode_checkpoint(main_trainer.checkpoint());
        auto rest = train_until(main_trainer, corpus, desk.steps);
        main_run.trace.insert(main_run.trace.end(), rest.begin(), rest.end());
        main_run.seconds = seconds_since(t0);
        main_run.checkpoint = encode_checkpoint(main_trainer.checkpoint());
    }

    // 5. training efficacy
    criterion(5, "training efficacy", [&] {
        const auto& tr = main_run.trace;
        const LossReport& first = tr.front();
        const LossReport& last = tr.back();
        auto tail = [&](double LossReport::*f) {
            double s = 0;
            const std::size_t n = std::min<std::size_t>(50, tr.size());
            for (std::size_t i = tr.size() - n; i < tr.size(); ++i) s += tr[i].*f;
            return s / static_cast<double>(n);
        };
        const bool total_ok = last.l_total <= 0.5 * first.l_total;
        const bool each_ok = last.l_mim < first.l_mim && last.l_align < first.l_align && last.l_mlm < first.l_mlm &&
                             tail(&LossReport::l_mim) < first.l_mim && tail(&LossReport::l_align) < first.l_align &&
                             tail(&LossReport::l_mlm) < first.l_mlm;
        return std::pair{total_ok && each_ok,
                         fmt("%.0f samples, batch %.0f, %.0f steps in %.0f s: ", static_cast<double>(desk.n),
                             static_cast<double>(desk.batch_size), static_cast<double>(tr.size()), main_run.seconds) +
                             fmt("l_total %.4f -> %.4f (ratio %.3f <= 0.5); ", first.l_total, last.l_total,
                                 last.l_total / first.l_total) +
                             fmt("mim %.4f -> %.4f, align %.4f -> %.4f, ", first.l_mim, last.l_mim, first.l_align,
                                 last.l_align) +
                             fmt("mlm %.4f -> %.4f (final step and last-50 mean both below step 1)", first.l_mlm,
                                 last.l_mlm)};
    });

    // 6. alignment emergence on held-out samples
    criterion(6, "alignment emergence", [&] {
        const auto trained = alignment_overlap(main_trainer.params(), main_trainer.model(), vocab, held,
                                               desk.heatmap_k, 100);
        const auto init = alignment_overlap(random_init, main_trainer.model(), vocab, held, desk.heatmap_k, 100);
        const double ratio = trained.overlap / trained.expected;
        const bool ok = trained.sentences >= 100 && ratio >= 2.0;
        return std::pair{ok, fmt("%.0f held-out sentences, K=%.0f: mean overlap %.3f vs random-subset expectation %.3f",
                                 static_cast<double>(trained.sentences), static_cast<double>(desk.heatmap_k),
                                 trained.overlap / static_cast<double>(trained.sentences),
                                 trained.expected / static_cast<double>(trained.sentences)) +
                                 fmt(" (ratio %.2f, need >= 2; random init ratio %.2f)", ratio,
                                     init.overlap / init.expected)};
    });

    // 7. representation transfer
    criterion(7, "representation transfer", [&] {
        const double pre = probe_macro(main_trainer.params(), main_trainer.model(), held, desk);
        const double rnd = probe_macro(random_init, main_trainer.model(), held, desk);
        return std::pair{pre - rnd >= 0.10,
                         fmt("linear-probe macro AUC on %.0f held-out samples: pre-trained %.4f vs random init %.4f "
                             "(gain %.4f, need >= 0.10)",
                             static_cast<double>(held.size()), pre, rnd, pre - rnd)};
    });

    // 8. ablation structure
    criterion(8, "ablation structure", [&] {
        struct Combo {
            bool sa, il, wl;
        };
        const std::vector<Combo> combos{{false, true, false}, {false, false, true}, {false, true, true},
                                        {true, true, false},  {true, false, true},  {true, true, true}};
        Config c = desk;
        c.steps = 20;
        std::vector<std::string> traces;
        bool sa_off_zero = true;
        std::string detail;
        for (const auto& k : combos) {
            c.enable_sa = k.sa;
            c.enable_il = k.il;
            c.enable_wl = k.wl;
            const Run r = train(c, vocab, corpus, c.steps);
            std::string csv;
            for (std::size_t i = 0; i < r.trace.size(); ++i) {
                csv += r.trace[i].csv_row(i + 1) + "\n";
                if (!k.sa && r.trace[i].l_align != 0.0) sa_off_zero = false;
            }
            traces.push_back(csv);
            detail += fmt(" SA%.0f/IL%.0f/WL%.0f:", k.sa, k.il, k.wl) + fmt("%.3f", r.trace.back().l_total);
        }
        const std::size_t distinct = std::set<std::string>(traces.begin(), traces.end()).size();
        return std::pair{distinct == 6 && sa_off_zero,
                         fmt("%.0f/6 distinct 20-step traces, l_align identically 0 with SA off: ", static_cast<double>(distinct)) +
                             (sa_off_zero ? "yes;" : "no;") + detail};
    });

    // 9. determinism and resumption
    criterion(9, "determinism & resumption", [&] {
        const Run again = train(desk, vocab, corpus, desk.steps);
        const fs::path path = fs::temp_directory_path() / "simcrop_acceptance_250.bin";
        {
            io::Writer w;
            w.put_bytes(ckpt_250);
            w.write_file(path.string());
        }
        Trainer<float> resumed(desk, vocab);
        resumed.restore(load_checkpoint<float>(path.string(), resumed.model().fingerprint()));
        train_until(resumed, corpus, desk.steps);
        const bool same_run = again.checkpoint == main_run.checkpoint;
        const bool same_split = encode_checkpoint(resumed.checkpoint()) == main_run.checkpoint;
        fs::remove(path);
        return std::pair{same_run && same_split,
                         fmt("repeat run checkpoint (%.0f bytes) ", static_cast<double>(main_run.checkpoint.size())) +
                             (same_run ? "byte-identical;" : "DIFFERS;") +
                             fmt(" resume from step %.0f to %.0f: ", static_cast<double>(desk.steps / 2),
                                 static_cast<double>(desk.steps)) +
                             (same_split ? "byte-identical" : "DIFFERS")};
    });

    std::printf("%d of 9 criteria failed; total %.0f s\n", failures, seconds_since(t_all));
    return failures == 0 ? 0 : 1;
}
