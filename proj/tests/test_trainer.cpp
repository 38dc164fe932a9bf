#include <catch_amalgamated.hpp>

#include <filesystem>

#include "simcrop/trainer.hpp"

using namespace simcrop;
namespace fs = std::filesystem;

namespace {

Config tiny(std::uint64_t n = 8) {
    Config c;
    c.apply_preset("tiny");
    c.n = n;
    c.batch_size = 2;
    c.init_std = 0.02;
    return c;
}

bool same_bytes(const ModelParams<float>& a, const ModelParams<float>& b) {
    if (a.tensors.size() != b.tensors.size()) return false;
    for (const auto& [name, t] : a.tensors) {
        const auto& u = b[name];
        if (t.size() != u.size() || std::memcmp(t.data().data(), u.data().data(), t.size() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

std::string encoded(const Trainer<float>& t) { return encode_checkpoint(t.checkpoint()); }

FormatErrc decode_code(const std::string& bytes, std::optional<std::uint64_t> fp = std::nullopt) {
    try {
        decode_checkpoint<float>(bytes, "mem", fp);
    } catch (const FormatError& e) {
        return e.code();
    }
    FAIL("decode succeeded unexpectedly");
    return FormatErrc::io;
}

} // namespace

TEST_CASE("MIM-only run reports zero alignment and report losses") {
    Config c = tiny();
    c.enable_sa = false;
    c.enable_mlm = false;
    const auto corpus = synthesize_corpus(c, 0, c.n);
    Trainer<float> t(c, synthetic_vocab());
    const auto r = t.train_step(corpus);
    CHECK(r.l_align == 0.0);
    CHECK(r.l_mlm == 0.0);
    CHECK(r.l_mim > 0.0);
    CHECK(r.l_total == r.l_mim);
}

TEST_CASE("disabling SA zeroes l_align while the other terms stay live") {
    Config c = tiny();
    c.enable_sa = false;
    const auto corpus = synthesize_corpus(c, 0, c.n);
    Trainer<float> t(c, synthetic_vocab());
    for (int i = 0; i < 3; ++i) {
        const auto r = t.train_step(corpus);
        CHECK(r.l_align == 0.0);
        CHECK(r.l_mlm > 0.0);
    }
}

TEST_CASE("identical seeds give bit-identical reports and parameters") {
    Config c = tiny();
    const auto corpus = synthesize_corpus(c, 0, c.n);
    Trainer<float> a(c, synthetic_vocab()), b(c, synthetic_vocab());
    for (int i = 0; i < 4; ++i) {
        const auto ra = a.train_step(corpus), rb = b.train_step(corpus);
        CHECK(ra.csv_row(i) == rb.csv_row(i));
    }
    CHECK(same_bytes(a.params(), b.params()));
    CHECK(encoded(a) == encoded(b));
}

TEST_CASE("batches: every epoch is a permutation of the corpus") {
    Config c = tiny(6);
    c.batch_size = 4;
    Trainer<float> t(c, synthetic_vocab());
    std::vector<std::size_t> seen;
    for (std::uint64_t s = 0; s < 3; ++s)
        for (auto i : t.batch_indices(s, 6)) seen.push_back(i);
    for (std::size_t e = 0; e < 2; ++e) {
        std::vector<std::size_t> epoch(seen.begin() + static_cast<long>(6 * e), seen.begin() + static_cast<long>(6 * e + 6));
        std::sort(epoch.begin(), epoch.end());
        CHECK(epoch == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});
    }
}

TEST_CASE("learning-rate schedule") {
    Config c = tiny();
    c.lr = 0.01;
    Trainer<float> flat(c, synthetic_vocab());
    CHECK(flat.learning_rate(0) == 0.01);
    CHECK(flat.learning_rate(400) == 0.01);
    c.lr_schedule = "cosine";
    c.warmup_steps = 10;
    c.steps = 100;
    Trainer<float> cos(c, synthetic_vocab());
    CHECK(cos.learning_rate(0) == Catch::Approx(0.001 * 0.5 * (1 + std::cos(0.0))));
    CHECK(cos.learning_rate(50) == Catch::Approx(0.005));
    CHECK(cos.learning_rate(100) == Catch::Approx(0.0).margin(1e-15));
}

TEST_CASE("freeze_text_encoder leaves text-encoder bytes unchanged") {
    Config c = tiny();
    c.freeze_text_encoder = true;
    const auto corpus = synthesize_corpus(c, 0, c.n);
    Trainer<float> t(c, synthetic_vocab());
    const auto before = t.params().clone();
    for (int i = 0; i < 3; ++i) t.train_step(corpus);
    std::size_t moved = 0;
    for (const auto& [name, p] : t.params().tensors) {
        const bool same = std::memcmp(p.data().data(), before[name].data().data(), p.size() * sizeof(float)) == 0;
        if (is_text_encoder_param(name)) CHECK(same);
        else moved += same ? 0 : 1;
    }
    CHECK(moved > 0);
    CHECK(t.trainable().count("text_encoder.token_embed.0.weight") == 0);
}

TEST_CASE("component errors carry the step and sample id") {
    Config c = tiny();
    auto corpus = synthesize_corpus(c, 0, 2);
    corpus[1].patches.grid_dims = {1, 1, 1};
    Trainer<float> t(c, synthetic_vocab());
    try {
        t.train_step(std::vector<const PreparedSample*>{&corpus[0], &corpus[1]});
        FAIL("expected an error");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("train_step 0") != std::string::npos);
        CHECK(msg.find(corpus[1].id) != std::string::npos);
    }
}

TEST_CASE("checkpoint round trip is bit-exact through a file") {
    Config c = tiny();
    const auto corpus = synthesize_corpus(c, 0, c.n);
    Trainer<float> t(c, synthetic_vocab());
    for (int i = 0; i < 2; ++i) t.train_step(corpus);
    const auto path = (fs::temp_directory_path() / "simcrop_test_ck.bin").string();
    save_checkpoint(path, t.checkpoint());
    const auto ck = load_checkpoint<float>(path, t.model().fingerprint());
    CHECK(ck.step == 2);
    CHECK(same_bytes(ck.params, t.params()));
    CHECK(encode_checkpoint(ck) == encoded(t));
    CHECK(ck.optimizer.step_count() == 2);
    fs::remove(path);
    CHECK_THROWS_AS(load_checkpoint<float>(path), FormatError);
}

TEST_CASE("checkpoint decoding failure codes") {
    Config c = tiny();
    Trainer<float> t(c, synthetic_vocab());
    const std::string good = encoded(t);
    REQUIRE_NOTHROW(decode_checkpoint<float>(good, "mem"));

    std::string magic = good;
    magic[0] = 'X';
    CHECK(decode_code(magic) == FormatErrc::bad_magic);

    std::string version = good;
    version[4] = 9;
    CHECK(decode_code(version) == FormatErrc::bad_version);

    CHECK(decode_code(good.substr(0, good.size() / 2)) == FormatErrc::truncated);
    CHECK(decode_code(good.substr(0, 10)) == FormatErrc::truncated);

    std::string flipped = good;
    flipped[good.size() / 2] ^= 0x10;
    CHECK(decode_code(flipped) == FormatErrc::corrupt);

    CHECK(decode_code(good + "x") == FormatErrc::corrupt);

    Config other = c;
    other.enable_wl = false;
    const auto fp = ModelConfig::from(other, synthetic_vocab().size()).fingerprint();
    CHECK(decode_code(good, fp) == FormatErrc::fingerprint_mismatch);

    Trainer<float> u(other, synthetic_vocab());
    CHECK_THROWS_AS(u.restore(decode_checkpoint<float>(good, "mem")), FormatError);
}

TEST_CASE("a split run resumed from a checkpoint matches the uninterrupted run") {
    Config c = tiny();
    const auto corpus = synthesize_corpus(c, 0, c.n);
    Trainer<float> whole(c, synthetic_vocab());
    train_until(whole, corpus, 6);

    Trainer<float> first(c, synthetic_vocab());
    train_until(first, corpus, 3);
    const std::string bytes = encoded(first);
    Trainer<float> second(c, synthetic_vocab());
    second.restore(decode_checkpoint<float>(bytes, "mem", second.model().fingerprint()));
    std::vector<std::uint64_t> steps;
    train_until(second, corpus, 6, [&](std::uint64_t s, const LossReport&) { steps.push_back(s); });
    CHECK(steps == std::vector<std::uint64_t>{4, 5, 6});
    CHECK(same_bytes(second.params(), whole.params()));
    CHECK(encoded(second) == encoded(whole));
}

TEST_CASE("prepare_sample resamples foreign spacing before patchifying") {
    Config c = tiny();
    GenConfig g = gen_config_from(c);
    g.spacing = {1.5, 1.5, 1.5};
    g.dims = {16, 16, 16};
    const auto s = generate_sample(0, g);
    const auto p = prepare_sample(s.volume, {1.5, 1.5, 3.0}, {4, 4, 2}, s.report_text);
    CHECK(p.patches.grid_dims == Dims3{4, 4, 4});
    for (float v : p.patches.data) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
}
