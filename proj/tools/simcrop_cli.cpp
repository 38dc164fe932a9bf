// simcrop command-line entry point: gen-data, pretrain, probe, visualize, grad-check.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "simcrop/simcrop.hpp"

namespace fs = std::filesystem;
using namespace simcrop;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Defaults, then the config file, then --key=value overrides in order.
Config build_config(const std::string& path, const std::vector<std::string>& extras, const char* preset = nullptr) {
    Config cfg;
    if (preset) cfg.apply_preset(preset);
    if (!path.empty()) cfg.load_file(path);
    for (const auto& arg : extras) {
        if (arg.rfind("--", 0) != 0 || arg.find('=') == std::string::npos)
            throw UsageError("unexpected argument '" + arg + "' (overrides are --key=value)");
        const auto eq = arg.find('=');
        const std::string key = arg.substr(2, eq - 2);
        if (!cfg.has_key(key)) throw UsageError("unknown config key '" + key + "'");
        cfg.set(key, arg.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
}

Vocab corpus_vocab(const std::string& data_dir) {
    const fs::path p = fs::path(data_dir) / "vocab.txt";
    return fs::exists(p) ? Vocab::load(p.string()) : synthetic_vocab();
}

std::string checkpoint_path(const Config& cfg) {
    return cfg.checkpoint.empty() ? (fs::path(cfg.out_dir) / "checkpoint.bin").string() : cfg.checkpoint;
}

/// Parameters from a checkpoint, or a fresh initialization when the path is "random".
ModelParams<float> load_params(const Config& cfg, const Vocab& vocab, ModelConfig& model) {
    if (cfg.checkpoint == "random") {
        model = ModelConfig::from(cfg, vocab.size());
        return init_params<float>(model, cfg.seed, cfg.init_std);
    }
    auto ck = load_checkpoint<float>(checkpoint_path(cfg));
    model = ck.model;
    if (model.vocab_size != vocab.size())
        throw ValueError("checkpoint vocabulary size " + std::to_string(model.vocab_size) +
                         " differs from corpus vocabulary " + std::to_string(vocab.size()));
    return std::move(ck.params);
}

int cmd_gen_data(const Config& cfg) {
    generate_corpus(cfg.data_dir, cfg.seed, cfg.n, gen_config_from(cfg));
    std::cout << "wrote " << cfg.n << " samples to " << cfg.data_dir << "\n";
    return 0;
}

int cmd_pretrain(Config cfg) {
    const Vocab vocab = corpus_vocab(cfg.data_dir);
    const auto corpus = load_corpus(cfg.data_dir, cfg);
    fs::create_directories(cfg.out_dir);
    Trainer<float> trainer(cfg, vocab);
    const bool resume = !cfg.checkpoint.empty();
    if (resume) {
        trainer.restore(load_checkpoint<float>(cfg.checkpoint, trainer.model().fingerprint()));
        std::cout << "resumed from " << cfg.checkpoint << " at step " << trainer.step() << "\n";
    }
    {
        std::ofstream f(fs::path(cfg.out_dir) / "config.txt");
        f << cfg.to_text();
    }
    const fs::path csv_path = fs::path(cfg.out_dir) / "losses.csv";
    std::ofstream csv(csv_path, resume && fs::exists(csv_path) ? std::ios::app : std::ios::trunc);
    if (!resume || fs::file_size(csv_path) == 0) csv << LossReport::csv_header() << '\n';
    train_until(trainer, corpus, cfg.steps, [&](std::uint64_t step, const LossReport& r) {
        csv << r.csv_row(step) << '\n';
        if (step == 1 || step % 50 == 0 || step == cfg.steps)
            std::cout << "step " << step << " total " << r.l_total << " mim " << r.l_mim << " align " << r.l_align
                      << " mlm " << r.l_mlm << std::endl;
        if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
            save_checkpoint((fs::path(cfg.out_dir) / ("checkpoint_step_" + std::to_string(step) + ".bin")).string(),
                            trainer.checkpoint());
    });
    const std::string out = (fs::path(cfg.out_dir) / "checkpoint.bin").string();
    save_checkpoint(out, trainer.checkpoint());
    std::cout << "saved " << out << "\n";
    return 0;
}

int cmd_probe(const Config& cfg) {
    const Vocab vocab = corpus_vocab(cfg.data_dir);
    ModelConfig model;
    const auto params = load_params(cfg, vocab, model);
    const auto corpus = load_corpus(cfg.data_dir, cfg);
    const auto feats = extract_features(params, model, corpus);
    std::vector<std::vector<std::uint8_t>> labels;
    for (const auto& s : corpus) labels.push_back(s.labels);
    ProbeOptions opt;
    opt.label_ratio = cfg.label_ratio;
    opt.seed = cfg.probe_seed;
    opt.iters = cfg.probe_iters;
    opt.lr = cfg.probe_lr;
    const ProbeResult res = linear_probe(feats.features, labels, opt);
    fs::create_directories(cfg.out_dir);
    write_features((fs::path(cfg.out_dir) / "features.bin").string(), feats.features);
    std::vector<std::string> names;
    for (const auto& t : lesion_types()) names.push_back(t.name);
    const std::string csv = res.to_csv(names);
    std::ofstream((fs::path(cfg.out_dir) / "probe.csv")) << csv;
    std::cout << csv;
    return 0;
}

int cmd_visualize(const Config& cfg) {
    const Vocab vocab = corpus_vocab(cfg.data_dir);
    ModelConfig model;
    const auto params = load_params(cfg, vocab, model);
    const auto corpus = load_corpus(cfg.data_dir, cfg);
    if (cfg.sample_index >= corpus.size())
        throw ValueError("sample_index " + std::to_string(cfg.sample_index) + " out of range, corpus has " +
                         std::to_string(corpus.size()) + " samples");
    const PreparedSample& s = corpus[cfg.sample_index];
    const Heatmap h = similarity_heatmap(params, model, vocab, s, cfg.sentence_index, cfg.heatmap_k);
    const std::string stem = s.id + "_s" + std::to_string(cfg.sentence_index);
    const auto paths = write_heatmap((fs::path(cfg.out_dir) / "heatmap").string(), stem, h);
    std::cout << "sentence: " << h.sentence << "\ntop-k:";
    for (auto i : h.topk) std::cout << ' ' << i;
    std::cout << '\n';
    if (cfg.sentence_index < s.truth.size()) {
        const auto& truth = s.truth[cfg.sentence_index];
        std::cout << "overlap with truth: " << overlap_count(h.topk, truth) << " (random expectation "
                  << hypergeometric_overlap(h.scores.size(), truth.size(), h.topk.size()) << ")\n";
    }
    std::cout << "wrote " << paths.size() << " files under " << (fs::path(cfg.out_dir) / "heatmap").string() << "\n";
    return 0;
}

int cmd_grad_check(const Config& cfg) {
    GradCheckOptions opt;
    opt.seed = cfg.seed;
    const GradCheckResult r = grad_check(cfg, opt);
    std::printf("checked %zu gradient entries in %.1f s\nmax relative error %.3e at %s[%zu] (analytic %.9g, numeric %.9g)\n",
                r.checked, r.seconds, r.max_rel_error, r.worst_param.c_str(), r.worst_index, r.worst_analytic,
                r.worst_numeric);
    const bool ok = r.max_rel_error < 1e-6;
    std::printf("%s\n", ok ? "PASS" : "FAIL");
    return ok ? 0 : kExitRuntime;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"simcrop: masked vision-language pre-training on synthetic CT volumes"};
    app.require_subcommand(1);
    std::string config_path;
    struct Sub {
        CLI::App* app;
        const char* preset;
    };
    std::vector<Sub> subs;
    auto add = [&](const char* name, const char* help, const char* preset = nullptr) {
        CLI::App* sub = app.add_subcommand(name, help);
        sub->add_option("--config", config_path, "key=value config file");
        sub->allow_extras();
        sub->footer("Any config key may be overridden with --key=value (see configs/desk.cfg).");
        subs.push_back({sub, preset});
        return sub;
    };
    add("gen-data", "Write a synthetic corpus (volumes, reports, truth, labels, manifest) to data_dir");
    add("pretrain", "Pre-train on data_dir; writes losses.csv and checkpoint.bin to out_dir");
    add("probe", "Linear probe on frozen features from checkpoint (or checkpoint=random)");
    add("visualize", "Sentence-to-patch similarity heatmap for sample_index / sentence_index");
    add("grad-check", "Finite-difference gradient check (starts from the tiny preset)", "tiny");

    if (argc <= 1) {
        std::cerr << app.help();
        return kExitUsage;
    }
    if (const std::string first = argv[1]; first.rfind("-", 0) != 0) {
        const bool known = std::any_of(subs.begin(), subs.end(), [&](const Sub& s) { return s.app->get_name() == first; });
        if (!known) {
            std::cerr << "error: unknown subcommand '" << first << "'\n\n" << app.help();
            return kExitUsage;
        }
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    for (const auto& sub : subs) {
        if (!sub.app->parsed()) continue;
        const std::string name = sub.app->get_name();
        Config cfg;
        try {
            cfg = build_config(config_path, sub.app->remaining(), sub.preset);
        } catch (const UsageError& e) {
            std::cerr << "error: " << e.what() << "\n\n" << sub.app->help();
            return kExitUsage;
        } catch (const ConfigError& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kExitUsage;
        }
        try {
            if (name == "gen-data") return cmd_gen_data(cfg);
            if (name == "pretrain") return cmd_pretrain(cfg);
            if (name == "probe") return cmd_probe(cfg);
            if (name == "visualize") return cmd_visualize(cfg);
            if (name == "grad-check") return cmd_grad_check(cfg);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return kExitRuntime;
        }
    }
    std::cerr << app.help();
    return kExitUsage;
}
