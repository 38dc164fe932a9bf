#include <catch_amalgamated.hpp>

#include <set>

#include "simcrop/synthetic.hpp"
#include "simcrop/trainer.hpp"
#include "test_util.hpp"

using namespace simcrop;
using testutil::random_tensor;

namespace {

ModelConfig small_model(std::size_t vocab = 60) {
    ModelConfig m;
    m.volume_dims = {8, 8, 4};
    m.patch_dims = {4, 4, 2};
    m.embed_dim = 8;
    m.proj_dim = 6;
    m.heads = 2;
    m.mlp_ratio = 2;
    m.enc_layers_v = m.dec_layers_v = m.enc_layers_t = m.dec_layers_t = 1;
    m.vocab_size = vocab;
    return m;
}

double max_abs_diff(const TensorD& a, const TensorD& b) {
    REQUIRE(a.shape() == b.shape());
    double w = 0;
    for (std::size_t i = 0; i < a.size(); ++i) w = std::max(w, std::abs(a.data()[i] - b.data()[i]));
    return w;
}

TensorD row(const TensorD& t, std::size_t r) { return gather_rows(t, {r}); }

} // namespace

TEST_CASE("parameter names follow module.block.index.tensor and are stable") {
    const auto m = small_model();
    const auto p = init_params<double>(m, 3);
    for (const auto& [name, t] : p.tensors) {
        std::vector<std::string> parts;
        std::string cur;
        for (char c : name) {
            if (c == '.') parts.push_back(cur), cur.clear();
            else cur.push_back(c);
        }
        parts.push_back(cur);
        INFO(name);
        CHECK(parts.size() >= 4);
        CHECK(std::all_of(parts[2].begin(), parts[2].end(), ::isdigit));
    }
    const auto q = init_params<double>(m, 3);
    for (const auto& [name, t] : p.tensors) {
        REQUIRE(q.contains(name));
        CHECK(max_abs_diff(t, q[name]) == 0.0);
    }
    CHECK(p.contains("text_encoder.token_embed.0.weight"));
    CHECK(p.contains("vision_decoder.mask_token.0.value"));
    CHECK(p.contains("fusion.cross_attn.0.wq"));
}

TEST_CASE("model config canonical text round-trips and drives the fingerprint") {
    auto m = small_model();
    const auto back = ModelConfig::parse_canonical(m.canonical());
    CHECK(back.canonical() == m.canonical());
    CHECK(back.fingerprint() == m.fingerprint());
    auto other = m;
    other.enable_wl = false;
    CHECK(other.fingerprint() != m.fingerprint());
    CHECK_THROWS_AS(ModelConfig::parse_canonical("d=8"), FormatError);
    auto bad = m;
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("encode_vision: shapes, identity config, permutation equivariance, row mismatch") {
    auto m = small_model();
    Rng rng(1, 1);
    const auto p = init_params<double>(m, 0, 0.3);
    const auto pos = positional_embedding_3d<double>(m.grid_dims(), m.embed_dim);
    for (std::size_t n : {1u, 3u, 8u}) {
        auto x = random_tensor({n, m.patch_voxels()}, rng, 1.0, false);
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        CHECK(encode_vision(x, gather_rows(pos, idx), p, m).shape() == Shape{n, m.embed_dim});
    }

    auto x = random_tensor({8, m.patch_voxels()}, rng, 1.0, false);
    auto m0 = m;
    m0.enc_layers_v = 0;
    const auto p0 = init_params<double>(m0, 0, 0.3);
    const auto expect = add(linear(x, p0, "vision_encoder.patch_proj.0"), pos);
    CHECK(max_abs_diff(encode_vision(x, pos, p0, m0), expect) == 0.0);

    const std::vector<std::size_t> perm{5, 2, 7, 0, 3, 6, 1, 4};
    const auto y = encode_vision(x, pos, p, m);
    const auto yp = encode_vision(gather_rows(x, perm), gather_rows(pos, perm), p, m);
    CHECK(max_abs_diff(yp, gather_rows(y, perm)) < 1e-5);

    CHECK_THROWS_AS(encode_vision(x, gather_rows(pos, {0, 1}), p, m), ShapeError);
}

TEST_CASE("decode_vision: shape, ratio 0 and mask-token gradient") {
    auto m = small_model();
    Rng rng(2, 2);
    auto p = init_params<double>(m, 0, 0.3);
    const auto pos = positional_embedding_3d<double>(m.grid_dims(), m.embed_dim);
    const std::size_t n = m.n_patches();
    auto x = random_tensor({n, m.patch_voxels()}, rng, 1.0, false);

    const MaskPlan none = sample_mask(n, 0.0, rng);
    REQUIRE(none.masked_idx.empty());
    const auto f_all = encode_vision(x, pos, p, m);
    const auto r0 = decode_vision(f_all, none, pos, p, m);
    CHECK(r0.shape() == Shape{n, m.patch_voxels()});

    const MaskPlan plan = sample_mask(n, 0.5, rng);
    p.zero_grad();
    const auto f_v = encode_vision(gather_rows(x, plan.unmasked_idx), gather_rows(pos, plan.unmasked_idx), p, m);
    const auto r = decode_vision(f_v, plan, pos, p, m);
    CHECK(r.shape() == Shape{n, m.patch_voxels()});
    backward(testutil::probe_sum(r));
    double g = 0;
    for (double v : p["vision_decoder.mask_token.0.value"].grad()) g += std::abs(v);
    CHECK(g > 0.0);

    MaskPlan wrong = plan;
    wrong.n_total = n + 1;
    CHECK_THROWS_AS(decode_vision(f_v, wrong, pos, p, m), ShapeError);
}

TEST_CASE("encode_text: shape, purity, out-of-range id, one shared parameter set") {
    auto m = small_model();
    auto p = init_params<double>(m, 0, 0.3);
    const std::vector<TokenId> cls_sep{kCls, kSep};
    CHECK(encode_text(cls_sep, p, m).shape() == Shape{2, m.embed_dim});
    const std::vector<TokenId> ids{kCls, 10, 11, 12, kSep};
    CHECK(max_abs_diff(encode_text(ids, p, m), encode_text(ids, p, m)) == 0.0);
    CHECK_THROWS_AS(encode_text(std::vector<TokenId>{kCls, 60}, p, m), ValueError);

    // The sentence path and the report path touch exactly the same encoder tensors.
    auto touched = [&](auto&& f) {
        p.zero_grad();
        backward(f());
        std::set<std::string> names;
        for (const auto& [name, t] : p.tensors)
            for (double v : t.grad())
                if (v != 0.0) {
                    if (is_text_encoder_param(name)) names.insert(name);
                    break;
                }
        return names;
    };
    const auto via_sentence = touched([&] { return sum(pool_sentence(encode_text(ids, p, m), p)); });
    const auto via_report = touched([&] { return testutil::probe_sum(encode_text(ids, p, m)); });
    CHECK(via_sentence == via_report);
    CHECK(!via_sentence.empty());
}

TEST_CASE("pool_sentence: unit norm, zero vector error, projection gradient") {
    auto m = small_model();
    Rng rng(4, 4);
    auto p = init_params<double>(m, 0, 0.3);
    for (int t = 0; t < 20; ++t) {
        auto f = random_tensor({5, m.embed_dim}, rng, 1.0, false);
        for (auto pool : {SentencePooling::cls, SentencePooling::mean}) {
            const auto s = pool_sentence(f, p, pool);
            CHECK(s.shape() == Shape{1, m.proj_dim});
            double n2 = 0;
            for (double v : s.data()) n2 += v * v;
            CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-6);
        }
    }
    TensorD zero({3, m.embed_dim}, std::vector<double>(3 * m.embed_dim, 0.0));
    CHECK_THROWS_AS(pool_sentence(zero, p), NumericError);

    auto f = random_tensor({4, m.embed_dim}, rng, 1.0, false);
    const double err = testutil::grad_error(
        [&](std::vector<TensorD>& in) {
            ModelParams<double> q;
            q.tensors.emplace("align.text_proj.0.weight", in[0]);
            q.tensors.emplace("align.text_proj.0.bias", in[1]);
            return testutil::probe_sum(pool_sentence(f, q));
        },
        {p["align.text_proj.0.weight"], p["align.text_proj.0.bias"]});
    CHECK(err < 1e-6);
}

TEST_CASE("project_patches: unit rows and loop oracle") {
    auto m = small_model();
    Rng rng(5, 5);
    const auto p = init_params<double>(m, 0, 0.3);
    auto f = random_tensor({7, m.embed_dim}, rng, 1.0, false);
    const auto out = project_patches(f, p);
    REQUIRE(out.shape() == Shape{7, m.proj_dim});
    const auto& w = p["align.vision_proj.0.weight"];
    const auto& b = p["align.vision_proj.0.bias"];
    for (std::size_t r = 0; r < 7; ++r) {
        std::vector<double> y(m.proj_dim);
        double n2 = 0;
        for (std::size_t c = 0; c < m.proj_dim; ++c) {
            y[c] = b.data()[c];
            for (std::size_t k = 0; k < m.embed_dim; ++k)
                y[c] += f.data()[r * m.embed_dim + k] * w.data()[k * m.proj_dim + c];
            n2 += y[c] * y[c];
        }
        double on = 0;
        for (std::size_t c = 0; c < m.proj_dim; ++c) {
            CHECK(std::abs(out.data()[r * m.proj_dim + c] - y[c] / std::sqrt(n2)) < 1e-6);
            on += out.data()[r * m.proj_dim + c] * out.data()[r * m.proj_dim + c];
        }
        CHECK(std::abs(on - 1.0) < 1e-6);
    }
    CHECK(project_patches(row(f, 0), p).shape() == Shape{1, m.proj_dim});
}

TEST_CASE("instance_feature is the patch-axis mean") {
    TensorD c({3, 2}, {4, 5, 4, 5, 4, 5});
    CHECK(instance_feature(c).data()[0] == 4.0);
    CHECK(instance_feature(c).data()[1] == 5.0);
    TensorD two({2, 2}, {1, 0, 3, 0});
    CHECK(instance_feature(two).data()[0] == 2.0);
    Rng rng(6, 6);
    auto f = random_tensor({9, 5}, rng, 1.0, false);
    const auto g = instance_feature(f);
    for (std::size_t c = 0; c < 5; ++c) {
        double s = 0;
        for (std::size_t r = 0; r < 9; ++r) s += f.data()[r * 5 + c];
        CHECK(std::abs(g.data()[c] - s / 9) < 1e-6);
    }
    CHECK_THROWS_AS(instance_feature(TensorD(Shape{0, 5}, std::vector<double>{})), ShapeError);
}

TEST_CASE("cross_attention: singleton keys, row sums and uniform logits") {
    auto m = small_model();
    Rng rng(7, 7);
    auto p = init_params<double>(m, 0, 0.3);
    auto f_t = random_tensor({5, m.embed_dim}, rng, 1.0, false);
    auto f_v1 = random_tensor({1, m.embed_dim}, rng, 1.0, false);
    const auto single = cross_attention(f_t, f_v1, p, m);
    const auto v = matmul(f_v1, p["fusion.cross_attn.0.wv"]);
    for (std::size_t r = 0; r < 5; ++r) CHECK(max_abs_diff(row(single.context, r), v) < 1e-12);

    auto f_v = random_tensor({6, m.embed_dim}, rng, 1.0, false);
    const auto a = cross_attention(f_t, f_v, p, m);
    CHECK(a.out.shape() == Shape{5, m.embed_dim});
    for (const auto& probs : a.probs)
        for (std::size_t r = 0; r < probs.rows(); ++r) {
            double s = 0;
            for (std::size_t c = 0; c < probs.cols(); ++c) s += probs.data()[r * probs.cols() + c];
            CHECK(std::abs(s - 1.0) < 1e-6);
        }

    for (auto& x : p["fusion.cross_attn.0.wq"].mutable_data()) x = 0.0;
    const auto u = cross_attention(f_t, f_v, p, m);
    const auto mean_v = mean_rows(matmul(f_v, p["fusion.cross_attn.0.wv"]));
    for (std::size_t r = 0; r < 5; ++r) CHECK(max_abs_diff(row(u.context, r), mean_v) < 1e-12);

    CHECK_THROWS_AS(cross_attention(f_t, random_tensor({2, 3}, rng, 1.0, false), p, m), ShapeError);
}

TEST_CASE("decode_text fusion switches") {
    auto m = small_model();
    Rng rng(8, 8);
    const auto p = init_params<double>(m, 0, 0.3);
    auto f_t = random_tensor({4, m.embed_dim}, rng, 1.0, false);
    auto f_w = random_tensor({4, m.embed_dim}, rng, 1.0, false);
    TensorD zero_inst({1, m.embed_dim}, std::vector<double>(m.embed_dim, 0.0));

    auto text_only = m;
    text_only.enable_il = text_only.enable_wl = false;
    const auto base = decode_text<double>(f_t, std::nullopt, std::nullopt, p, text_only);
    CHECK(base.shape() == Shape{4, m.vocab_size});

    auto il_only = m;
    il_only.enable_wl = false;
    CHECK(max_abs_diff(decode_text<double>(f_t, zero_inst, std::nullopt, p, il_only), base) == 0.0);

    auto wl_off = m;
    wl_off.enable_wl = false;
    const auto with_wl = decode_text<double>(f_t, zero_inst, f_w, p, m);
    const auto without_wl = decode_text<double>(f_t, zero_inst, f_w, p, wl_off);
    CHECK(max_abs_diff(with_wl, without_wl) > 1e-6);
}

TEST_CASE("every parameter receives gradient unless its branch is disabled") {
    Config cfg;
    cfg.apply_preset("tiny");
    const Vocab vocab = synthetic_vocab();
    std::vector<PreparedSample> corpus;
    for (std::uint64_t s = 0; corpus.size() < 3; ++s) {
        auto prepared = prepare_sample(generate_sample(s, gen_config_from(cfg)), cfg);
        if (prepared.truth.size() >= 2) corpus.push_back(std::move(prepared));
    }
    auto dead_params = [&](Config c) {
        const auto m = ModelConfig::from(c, vocab.size());
        auto p = init_params<double>(m, 0, c.init_std);
        const auto opt = ObjectiveOptions::from(c);
        std::vector<SampleLosses<double>> losses;
        for (std::size_t i = 0; i < corpus.size(); ++i) {
            Rng rng(11, i);
            losses.push_back(forward_sample(p, m, opt, vocab, corpus[i], rng));
        }
        backward(batch_loss(losses, opt, m.enable_sa).total);
        std::set<std::string> dead;
        for (const auto& [name, t] : p.tensors)
            if (std::all_of(t.grad().begin(), t.grad().end(), [](double g) { return g == 0.0; })) dead.insert(name);
        return dead;
    };
    CHECK(dead_params(cfg).empty());

    Config no_wl = cfg;
    no_wl.enable_wl = false;
    for (const auto& name : dead_params(no_wl)) CHECK(name.rfind("fusion.", 0) == 0);
    CHECK(dead_params(no_wl).size() == 4);

    Config no_sa = cfg;
    no_sa.enable_sa = false;
    const auto dead = dead_params(no_sa);
    CHECK(dead == std::set<std::string>{"align.text_proj.0.bias", "align.text_proj.0.weight",
                                        "align.vision_proj.0.bias", "align.vision_proj.0.weight"});
}
