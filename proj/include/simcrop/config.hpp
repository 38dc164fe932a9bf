#pragma once

// Flat key=value run configuration shared by every CLI subcommand.
// Unknown keys are rejected; '#' starts a comment.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "simcrop/error.hpp"

namespace simcrop {

struct Config {
    // model geometry
    std::uint64_t volume_h = 32, volume_w = 32, volume_d = 16;
    std::uint64_t patch_h = 8, patch_w = 8, patch_d = 4;
    std::uint64_t embed_dim = 64;
    std::uint64_t shared_proj_dim = 32;
    std::uint64_t enc_layers_v = 2, dec_layers_v = 1;
    std::uint64_t enc_layers_t = 2, dec_layers_t = 1;
    std::uint64_t heads = 4;
    std::uint64_t mlp_ratio = 4;
    double init_std = 0.02;

    // objective toggles
    bool enable_sa = true;
    bool enable_il = true;
    bool enable_wl = true;
    bool enable_mlm = true;
    bool freeze_text_encoder = false;
    std::string mim_loss_scope = "masked";   // masked | full
    std::string sentence_pooling = "cls";    // cls | mean

    // synthetic data
    std::uint64_t seed = 0;
    std::uint64_t n = 256;
    std::uint64_t lesion_min = 1, lesion_max = 4;
    double prevalence = 0.5;
    double spacing_x = 1.5, spacing_y = 1.5, spacing_z = 3.0;

    // preprocessing
    double target_spacing_x = 1.5, target_spacing_y = 1.5, target_spacing_z = 3.0;

    // training
    std::uint64_t steps = 500;
    std::uint64_t batch_size = 8;
    double lr = 1e-3;
    double weight_decay = 0.05;
    double beta1 = 0.9, beta2 = 0.95, eps = 1e-8;
    std::string lr_schedule = "constant";  // constant | cosine
    std::uint64_t warmup_steps = 0;
    double grad_clip = 1.0;                 // <= 0 disables
    double image_mask_ratio = 0.75;
    double report_mask_ratio = 0.75;
    std::string mask_mode = "plain";        // plain | bert
    std::uint64_t top_k = 4;
    double tau = 0.07;
    double lambda1 = 1.0, lambda2 = 1.0;
    std::uint64_t checkpoint_every = 0;

    // evaluation
    double label_ratio = 1.0;
    std::uint64_t probe_iters = 1000;
    double probe_lr = 0.1;
    std::uint64_t probe_seed = 0;
    std::uint64_t heatmap_k = 4;
    std::uint64_t sample_index = 0;
    std::uint64_t sentence_index = 0;

    // paths
    std::string data_dir = "data";
    std::string out_dir = "run";
    std::string checkpoint;

    using Ref = std::variant<std::uint64_t*, double*, bool*, std::string*>;

    /// Every recognized key with a pointer to its field.
    std::vector<std::pair<std::string, Ref>> fields() {
        return {
            {"volume_h", &volume_h}, {"volume_w", &volume_w}, {"volume_d", &volume_d},
            {"patch_h", &patch_h}, {"patch_w", &patch_w}, {"patch_d", &patch_d},
            {"embed_dim", &embed_dim}, {"shared_proj_dim", &shared_proj_dim},
            {"enc_layers_v", &enc_layers_v}, {"dec_layers_v", &dec_layers_v},
            {"enc_layers_t", &enc_layers_t}, {"dec_layers_t", &dec_layers_t},
            {"heads", &heads}, {"mlp_ratio", &mlp_ratio}, {"init_std", &init_std},
            {"enable_sa", &enable_sa}, {"enable_il", &enable_il}, {"enable_wl", &enable_wl},
            {"enable_mlm", &enable_mlm}, {"freeze_text_encoder", &freeze_text_encoder},
            {"mim_loss_scope", &mim_loss_scope}, {"sentence_pooling", &sentence_pooling},
            {"seed", &seed}, {"n", &n}, {"lesion_min", &lesion_min}, {"lesion_max", &lesion_max},
            {"prevalence", &prevalence},
            {"spacing_x", &spacing_x}, {"spacing_y", &spacing_y}, {"spacing_z", &spacing_z},
            {"target_spacing_x", &target_spacing_x}, {"target_spacing_y", &target_spacing_y},
            {"target_spacing_z", &target_spacing_z},
            {"steps", &steps}, {"batch_size", &batch_size}, {"lr", &lr},
            {"weight_decay", &weight_decay}, {"beta1", &beta1}, {"beta2", &beta2}, {"eps", &eps},
            {"lr_schedule", &lr_schedule}, {"warmup_steps", &warmup_steps},
            {"grad_clip", &grad_clip}, {"image_mask_ratio", &image_mask_ratio},
            {"report_mask_ratio", &report_mask_ratio}, {"mask_mode", &mask_mode},
            {"top_k", &top_k}, {"tau", &tau}, {"lambda1", &lambda1}, {"lambda2", &lambda2},
            {"checkpoint_every", &checkpoint_every},
            {"label_ratio", &label_ratio}, {"probe_iters", &probe_iters}, {"probe_lr", &probe_lr},
            {"probe_seed", &probe_seed}, {"heatmap_k", &heatmap_k},
            {"sample_index", &sample_index}, {"sentence_index", &sentence_index},
            {"data_dir", &data_dir}, {"out_dir", &out_dir}, {"checkpoint", &checkpoint},
        };
    }

    bool has_key(std::string_view key) {
        for (auto& [k, _] : fields())
            if (k == key) return true;
        return key == "preset";
    }

    /// Set one key from its textual value. "preset" resets the whole config first.
    void set(std::string_view key, std::string_view value) {
        if (key == "preset") {
            apply_preset(value);
            return;
        }
        for (auto& [k, ref] : fields()) {
            if (k != key) continue;
            const std::string v(value);
            std::visit([&](auto* p) { parse_into(k, v, *p); }, ref);
            return;
        }
        throw ConfigError("unknown config key '" + std::string(key) + "'");
    }

    std::string get(std::string_view key) {
        for (auto& [k, ref] : fields()) {
            if (k != key) continue;
            return std::visit([](auto* p) { return format(*p); }, ref);
        }
        throw ConfigError("unknown config key '" + std::string(key) + "'");
    }

    /// Canonical key=value text, one line per key in declaration order.
    std::string to_text() {
        std::ostringstream os;
        for (auto& [k, ref] : fields()) os << k << '=' << std::visit([](auto* p) { return format(*p); }, ref) << '\n';
        return os.str();
    }

    void load_text(std::string_view text, const std::string& origin = "<config>") {
        std::istringstream is{std::string(text)};
        std::size_t lineno = 0;
        for (std::string line; std::getline(is, line);) {
            ++lineno;
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            auto t = trim(line);
            if (t.empty()) continue;
            auto eq = t.find('=');
            if (eq == std::string_view::npos)
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key=value");
            try {
                set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
            } catch (const ConfigError& e) {
                throw ConfigError(origin + ":" + std::to_string(lineno) + ": " + e.what());
            }
        }
    }

    void load_file(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot open config file " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        load_text(ss.str(), path);
    }

    /// Structural checks that span several keys.
    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError(m); };
        if (heads == 0) fail("heads must be >= 1");
        if (embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
        if (embed_dim < 6) fail("embed_dim must be >= 6");
        if (patch_h == 0 || patch_w == 0 || patch_d == 0 || volume_h % patch_h || volume_w % patch_w ||
            volume_d % patch_d)
            fail("volume dims must be divisible by patch dims");
        if (mim_loss_scope != "masked" && mim_loss_scope != "full") fail("mim_loss_scope must be masked|full");
        if (sentence_pooling != "cls" && sentence_pooling != "mean") fail("sentence_pooling must be cls|mean");
        if (lr_schedule != "constant" && lr_schedule != "cosine") fail("lr_schedule must be constant|cosine");
        if (mask_mode != "plain" && mask_mode != "bert") fail("mask_mode must be plain|bert");
        if (lesion_min < 1 || lesion_min > lesion_max) fail("need 1 <= lesion_min <= lesion_max");
        if (top_k < 1 || heatmap_k < 1) fail("top_k and heatmap_k must be >= 1");
        if (!(tau > 0)) fail("tau must be positive");
        if (!(image_mask_ratio >= 0 && image_mask_ratio <= 1)) fail("image_mask_ratio must lie in [0,1]");
        if (!(report_mask_ratio >= 0 && report_mask_ratio <= 1)) fail("report_mask_ratio must lie in [0,1]");
        if (!(label_ratio > 0 && label_ratio <= 1)) fail("label_ratio must lie in (0,1]");
        if (batch_size < 1) fail("batch_size must be >= 1");
    }

    void apply_preset(std::string_view name) {
        *this = Config{};
        if (name == "desk") return;
        if (name == "tiny") {
            // gradient-check scale
            volume_h = 16, volume_w = 16, volume_d = 8;
            patch_h = 4, patch_w = 4, patch_d = 2;
            embed_dim = 16, shared_proj_dim = 8, heads = 2, mlp_ratio = 2;
            enc_layers_v = dec_layers_v = enc_layers_t = dec_layers_t = 1;
            image_mask_ratio = 0.5;
            top_k = 2;
            heatmap_k = 2;
            init_std = 0.2;
            return;
        }
        if (name == "paper") {
            volume_h = 224, volume_w = 224, volume_d = 112;
            patch_h = 16, patch_w = 16, patch_d = 8;
            embed_dim = 768, shared_proj_dim = 128, heads = 12;
            enc_layers_v = 8, dec_layers_v = 4, enc_layers_t = 12, dec_layers_t = 6;
            batch_size = 48;
            lr = 1.5e-4;
            top_k = 64;
            heatmap_k = 64;
            steps = 140 * ((47149 + 47) / 48);  // 140 epochs over the training split
            return;
        }
        throw ConfigError("unknown preset '" + std::string(name) + "' (desk|tiny|paper)");
    }

private:
    static std::string_view trim(std::string_view s) {
        while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
        while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
        return s;
    }

    static void parse_into(const std::string& k, const std::string& v, std::uint64_t& out) {
        parse_uint(k, v, out);
    }
    template <class U>
    static void parse_uint(const std::string& k, const std::string& v, U& out) {
        std::size_t used = 0;
        unsigned long long x = 0;
        try {
            if (!v.empty() && v[0] == '-') throw std::invalid_argument("negative");
            x = std::stoull(v, &used);
        } catch (const std::exception&) {
            throw ConfigError("key '" + k + "': expected a non-negative integer, got '" + v + "'");
        }
        if (used != v.size()) throw ConfigError("key '" + k + "': trailing characters in '" + v + "'");
        out = static_cast<U>(x);
    }
    static void parse_into(const std::string& k, const std::string& v, double& out) {
        std::size_t used = 0;
        try {
            out = std::stod(v, &used);
        } catch (const std::exception&) {
            throw ConfigError("key '" + k + "': expected a number, got '" + v + "'");
        }
        if (used != v.size()) throw ConfigError("key '" + k + "': trailing characters in '" + v + "'");
    }
    static void parse_into(const std::string& k, const std::string& v, bool& out) {
        if (v == "1" || v == "true") out = true;
        else if (v == "0" || v == "false") out = false;
        else throw ConfigError("key '" + k + "': expected true|false, got '" + v + "'");
    }
    static void parse_into(const std::string&, const std::string& v, std::string& out) { out = v; }

    static std::string format(std::uint64_t v) { return std::to_string(v); }
    static std::string format(double v) {
        std::ostringstream os;
        os.precision(17);
        os << v;
        return os.str();
    }
    static std::string format(bool v) { return v ? "true" : "false"; }
    static std::string format(const std::string& v) { return v; }
};

} // namespace simcrop
