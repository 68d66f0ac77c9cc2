#include <doctest.h>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "voxalign/config.hpp"
#include "voxalign/errors.hpp"
#include "voxalign/model.hpp"
#include "voxalign/textkit.hpp"

using namespace voxalign;
using ad::Mat;
using ad::Tape;
using ad::Var;
using config::Config;

namespace {

struct Setup {
    Config cfg;
    textkit::Vocab vocab;
};

Setup make_setup(config::PeftKind kind = config::PeftKind::Prompt) {
    Config cfg = config::tiny_config();
    cfg.peft.kind = kind;
    std::vector<std::string> corpus;
    auto profile = cohort::default_profile();
    int i = 0;
    for (auto d : {cohort::Diagnosis::NC, cohort::Diagnosis::MCI, cohort::Diagnosis::AD})
        corpus.push_back(textkit::render_report(cohort::gen_subject(100 + i++, d, profile)));
    corpus.push_back("0 1 2 3 4 5 6 7 8 9");
    Setup s{cfg, textkit::build_vocab(corpus)};
    s.cfg.text.vocab_size = static_cast<int>(s.vocab.tokens.size());
    return s;
}

params::ParamStore make_store(const Config& cfg, uint64_t seed = 5) {
    params::ParamStore store(params::enumerate_params(cfg));
    store.init(seed);
    return store;
}

cohort::Volume3D vol_for(uint64_t seed, cohort::Diagnosis d, const cohort::Dims& dims) {
    return cohort::render_volume(cohort::gen_subject(seed, d, cohort::default_profile()), dims);
}

double max_abs_diff(const Mat& a, const Mat& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Full training objective for a small batch; optionally harvests gradients for
// every trainable parameter that was bound.
double model_loss(const Config& cfg, params::ParamStore& store,
                  const std::vector<cohort::Volume3D>& vols,
                  const std::vector<std::vector<int>>& seqs, const std::vector<double>& targets,
                  std::map<std::string, Mat>* grads = nullptr) {
    Tape t;
    model::Bound b(t, store);
    std::vector<model::EncodedImage> imgs;
    std::vector<model::EncodedText> txts;
    for (const auto& v : vols) imgs.push_back(model::encode_and_project_image(b, cfg, v));
    for (const auto& s : seqs) txts.push_back(model::encode_and_project_text(b, cfg, s));
    Var S = model::similarity_matrix(b, cfg, imgs, txts);
    Var cl = model::contrastive_loss(b, cfg, S, b("tau"));
    Var loss = cl;
    if (cfg.mmse_enabled()) {
        std::vector<Var> preds;
        for (const auto& im : imgs) preds.push_back(im.mmse_pred);
        loss = model::total_loss(t, cl, model::mmse_loss(t, preds, targets), cfg.align.lambda);
    }
    double out = loss.scalar();
    if (grads) {
        t.backward(loss);
        for (const auto& [name, var] : b.all())
            if (store.info(name).trainable) (*grads)[name] = t.grad(var);
    }
    return out;
}

double fd_gap(double numeric, double analytic) {
    return std::abs(numeric - analytic) / std::max(std::abs(numeric) + std::abs(analytic), 1e-6);
}

}  // namespace

TEST_CASE("encodings have the right shapes and unit norms") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    auto vol = vol_for(11, cohort::Diagnosis::AD, s.cfg.vision.dims);
    auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::AD), s.vocab,
                                 s.cfg.text.max_tokens);

    Tape t;
    model::Bound b(t, store);
    auto img = model::encode_and_project_image(b, s.cfg, vol);
    auto txt = model::encode_and_project_text(b, s.cfg, seq);

    CHECK(img.v.rows() == 1);
    CHECK(img.v.cols() == 16);
    CHECK(img.v.val().norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(img.patch_feats.rows() == 8);
    for (int r = 0; r < 8; ++r)
        CHECK(img.patch_feats.val().row(r).norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(img.mmse_pred.rows() == 1);
    CHECK(img.mmse_pred.cols() == 1);
    CHECK(std::isfinite(img.mmse_pred.scalar()));

    CHECK(txt.w.val().norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(txt.raw.n_real == 5);  // "a photo of ad ."
    CHECK(txt.token_feats.rows() == 5);
    CHECK(txt.raw.token_out.rows() == 8);
}

TEST_CASE("repeated builds are bit identical") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    auto vol = vol_for(12, cohort::Diagnosis::NC, s.cfg.vision.dims);
    auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::NC), s.vocab, 8);

    Mat v1, v2, w1, w2;
    for (int pass = 0; pass < 2; ++pass) {
        Tape t;
        model::Bound b(t, store);
        auto img = model::encode_and_project_image(b, s.cfg, vol);
        auto txt = model::encode_and_project_text(b, s.cfg, seq);
        (pass == 0 ? v1 : v2) = img.v.val();
        (pass == 0 ? w1 : w2) = txt.w.val();
    }
    CHECK(max_abs_diff(v1, v2) == 0.0);
    CHECK(max_abs_diff(w1, w2) == 0.0);
}

TEST_CASE("discarded prompt outputs cannot influence any result") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    auto vol = vol_for(13, cohort::Diagnosis::MCI, s.cfg.vision.dims);

    Mat v_clean, p_clean, m_clean;
    {
        Tape t;
        model::Bound b(t, store);
        auto img = model::encode_and_project_image(b, s.cfg, vol);
        v_clean = img.v.val();
        p_clean = img.patch_feats.val();
        m_clean = img.mmse_pred.val();
    }

    std::vector<Mat> noise;
    for (int l = 0; l < s.cfg.vision.layers; ++l) {
        Mat n(s.cfg.effective_lp(), s.cfg.vision.embed_dim);
        n.setConstant(3.5 + l);
        noise.push_back(n);
    }
    model::ImageEncodeOptions opts;
    opts.prompt_output_noise = &noise;
    {
        Tape t;
        model::Bound b(t, store);
        auto img = model::encode_and_project_image(b, s.cfg, vol, opts);
        CHECK(max_abs_diff(img.v.val(), v_clean) == 0.0);
        CHECK(max_abs_diff(img.patch_feats.val(), p_clean) == 0.0);
        CHECK(max_abs_diff(img.mmse_pred.val(), m_clean) == 0.0);
    }

    SUBCASE("rejected outside deep prompt mode") {
        Config shallow = s.cfg;
        shallow.prompt_mode = config::PromptMode::Shallow;
        Tape t;
        model::Bound b(t, store);
        CHECK_THROWS_AS(model::encode_image(b, shallow, vol, opts), InvalidArgument);

        Config lora = s.cfg;
        lora.peft.kind = config::PeftKind::Lora;  // no prompts at all
        Tape t2;
        model::Bound b2(t2, store);
        CHECK_THROWS_AS(model::encode_image(b2, lora, vol, opts), InvalidArgument);
    }

    SUBCASE("wrong layer count rejected") {
        std::vector<Mat> short_noise(1, noise[0]);
        model::ImageEncodeOptions bad;
        bad.prompt_output_noise = &short_noise;
        Tape t;
        model::Bound b(t, store);
        CHECK_THROWS_AS(model::encode_image(b, s.cfg, vol, bad), InvalidArgument);
    }
}

TEST_CASE("pooled refinement reading degenerates to similarity one") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    Tape t;
    model::Bound b(t, store);
    Mat v0(1, 16), w0(1, 16);
    for (int i = 0; i < 16; ++i) {
        v0(0, i) = std::sin(0.3 * i + 0.1);
        w0(0, i) = std::cos(0.5 * i - 0.2);
    }
    v0.normalize();
    w0.normalize();
    Var sii = model::pooled_similarity_diagnostic(b, t.constant(v0), t.constant(w0));
    CHECK(sii.scalar() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("masked padding rows are inert") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::NC), s.vocab, 8);
    REQUIRE(seq.back() == textkit::Vocab::kPad);

    Mat base(8, 16);
    const Mat& table = store.value("txt.embed");
    for (int i = 0; i < 8; ++i) base.row(i) = table.row(seq[static_cast<size_t>(i)]);

    Mat pooled_ref, tokens_ref;
    {
        Tape t;
        model::Bound b(t, store);
        auto txt = model::encode_and_project_text(b, s.cfg, seq);
        pooled_ref = txt.w.val();
        tokens_ref = txt.token_feats.val();
    }

    Mat tampered = base;
    for (int i = 5; i < 8; ++i) tampered.row(i).setConstant(42.0);  // pad tail only
    model::TextEncodeOptions opts;
    opts.embeddings_override = &tampered;
    {
        Tape t;
        model::Bound b(t, store);
        auto txt = model::encode_and_project_text(b, s.cfg, seq, opts);
        CHECK(max_abs_diff(txt.w.val(), pooled_ref) == 0.0);
        CHECK(max_abs_diff(txt.token_feats.val(), tokens_ref) == 0.0);
    }
}

TEST_CASE("encoder input validation") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    Tape t;
    model::Bound b(t, store);

    std::vector<int> short_seq(4, textkit::Vocab::kUnk);
    CHECK_THROWS_AS(model::encode_text(b, s.cfg, short_seq), InvalidArgument);

    std::vector<int> bad_id(8, 0);
    bad_id[0] = s.cfg.text.vocab_size + 7;
    CHECK_THROWS_AS(model::encode_text(b, s.cfg, bad_id), InvalidArgument);

    std::vector<int> mid_pad = {3, 4, textkit::Vocab::kPad, 5, 6, textkit::Vocab::kPad,
                                textkit::Vocab::kPad, textkit::Vocab::kPad};
    CHECK_THROWS_AS(model::encode_text(b, s.cfg, mid_pad), InvalidArgument);

    cohort::Volume3D wrong;
    wrong.dims = {4, 4, 4};
    wrong.voxels.assign(64, 0.5f);
    CHECK_THROWS_AS(model::encode_image(b, s.cfg, wrong), InvalidArgument);
}

TEST_CASE("single key attention reduces to value plus query") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    Mat q0(1, 16), k0(1, 16);
    for (int i = 0; i < 16; ++i) {
        q0(0, i) = 0.1 * i - 0.7;
        k0(0, i) = 0.05 * i + 0.2;
    }
    for (int heads : {1, 2}) {
        Tape t;
        model::Bound b(t, store);
        Var out = model::cross_attend(b, "xa.i2t", heads, t.constant(q0), t.constant(k0));
        Mat expect = k0 * store.value("xa.i2t.wv") + q0;
        CHECK(max_abs_diff(out.val(), expect) < 1e-12);
    }

    Tape t;
    model::Bound b(t, store);
    CHECK_THROWS_AS(model::cross_attend(b, "xa.i2t", 1, t.constant(q0), Var{}), InvalidArgument);
}

TEST_CASE("similarity matrix is laid out images by texts") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    std::vector<cohort::Volume3D> vols = {vol_for(21, cohort::Diagnosis::NC, s.cfg.vision.dims),
                                          vol_for(22, cohort::Diagnosis::AD, s.cfg.vision.dims)};
    std::vector<std::vector<int>> seqs = {
        textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::NC), s.vocab, 8),
        textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::AD), s.vocab, 8)};

    Tape t;
    model::Bound b(t, store);
    std::vector<model::EncodedImage> imgs;
    std::vector<model::EncodedText> txts;
    for (const auto& v : vols) imgs.push_back(model::encode_and_project_image(b, s.cfg, v));
    for (const auto& q : seqs) txts.push_back(model::encode_and_project_text(b, s.cfg, q));
    Var S = model::similarity_matrix(b, s.cfg, imgs, txts);
    REQUIRE(S.rows() == 2);
    REQUIRE(S.cols() == 2);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            Var sij = model::pair_similarity(b, s.cfg, imgs[static_cast<size_t>(i)],
                                             txts[static_cast<size_t>(j)]);
            CHECK(S.val()(i, j) == doctest::Approx(sij.scalar()).epsilon(1e-12));
            CHECK(std::abs(S.val()(i, j)) <= 1.0 + 1e-9);  // cosine range
        }
}

TEST_CASE("contrastive loss identities") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);

    SUBCASE("singleton batch is exactly zero") {
        Tape t;
        model::Bound b(t, store);
        Var S = t.constant(Mat::Constant(1, 1, 0.73));
        Var loss = model::contrastive_loss(b, s.cfg, S, t.constant(Mat::Constant(1, 1, 3.0)));
        CHECK(std::abs(loss.scalar()) <= 1e-15);
    }

    SUBCASE("uniform similarities give twice log n") {
        for (auto mode : {config::TempMode::Divide, config::TempMode::Multiply}) {
            Config cfg = s.cfg;
            cfg.align.temp_mode = mode;
            Tape t;
            model::Bound b(t, store);
            Var S = t.constant(Mat::Constant(3, 3, 0.5));
            Var loss = model::contrastive_loss(b, cfg, S, t.constant(Mat::Constant(1, 1, 2.0)));
            CHECK(loss.scalar() == doctest::Approx(2.0 * std::log(3.0)).epsilon(1e-9));
        }
    }

    SUBCASE("two by two hand value") {
        Tape t;
        model::Bound b(t, store);
        Mat S0(2, 2);
        S0 << 1.0, -1.0, -1.0, 1.0;
        Var loss =
            model::contrastive_loss(b, s.cfg, t.constant(S0), t.constant(Mat::Constant(1, 1, 1.0)));
        CHECK(loss.scalar() == doctest::Approx(0.2539).epsilon(1e-3));
        CHECK(loss.scalar() == doctest::Approx(2.0 * std::log(1.0 + std::exp(-2.0))).epsilon(1e-12));
    }

    SUBCASE("temperature semantics differ between modes") {
        Mat S0(2, 2);
        S0 << 0.9, 0.1, -0.2, 0.8;
        double vals[2];
        int k = 0;
        for (auto mode : {config::TempMode::Divide, config::TempMode::Multiply}) {
            Config cfg = s.cfg;
            cfg.align.temp_mode = mode;
            Tape t;
            model::Bound b(t, store);
            vals[k++] = model::contrastive_loss(b, cfg, t.constant(S0),
                                                t.constant(Mat::Constant(1, 1, 2.0)))
                            .scalar();
        }
        CHECK(std::abs(vals[0] - vals[1]) > 1e-3);
    }

    SUBCASE("direction parts sum to the total") {
        Tape t;
        model::Bound b(t, store);
        Mat S0(2, 2);
        S0 << 0.4, -0.3, 0.2, 0.6;
        Var i2t, t2i;
        Var loss = model::contrastive_loss_with_parts(b, s.cfg, t.constant(S0),
                                                      t.constant(Mat::Constant(1, 1, 1.5)), &i2t,
                                                      &t2i);
        CHECK(loss.scalar() == doctest::Approx(i2t.scalar() + t2i.scalar()).epsilon(1e-12));
    }

    SUBCASE("invalid inputs rejected") {
        Tape t;
        model::Bound b(t, store);
        CHECK_THROWS_AS(model::contrastive_loss(b, s.cfg, t.constant(Mat::Zero(2, 3)),
                                                t.constant(Mat::Constant(1, 1, 1.0))),
                        InvalidArgument);
        CHECK_THROWS_AS(model::contrastive_loss(b, s.cfg, t.constant(Mat::Zero(2, 2)),
                                                t.constant(Mat::Constant(1, 1, -1.0))),
                        InvalidArgument);
    }
}

TEST_CASE("score regression loss is plain mean squared error") {
    Tape t;
    std::vector<Var> preds = {t.constant(Mat::Constant(1, 1, 0.5)),
                              t.constant(Mat::Constant(1, 1, 0.9))};
    std::vector<double> targets = {0.4, 1.0};
    Var mse = model::mmse_loss(t, preds, targets);
    CHECK(mse.scalar() == doctest::Approx(0.01).epsilon(1e-12));

    std::vector<double> bad = {0.4};
    CHECK_THROWS_AS(model::mmse_loss(t, preds, bad), InvalidArgument);

    CHECK(model::normalize_mmse(24) == doctest::Approx(0.8));
    CHECK(model::denormalize_mmse(0.8) == doctest::Approx(24.0));
}

TEST_CASE("zero initialized strategies start as exact identities") {
    Setup sl = make_setup(config::PeftKind::Lora);
    Setup sa = make_setup(config::PeftKind::Adapter);
    auto store_l = make_store(sl.cfg, 5);
    auto store_a = make_store(sa.cfg, 5);
    auto vol = vol_for(31, cohort::Diagnosis::NC, sl.cfg.vision.dims);
    auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::NC), sl.vocab, 8);

    Mat vl, va, wl, wa;
    {
        Tape t;
        model::Bound b(t, store_l);
        vl = model::encode_and_project_image(b, sl.cfg, vol).v.val();
        wl = model::encode_and_project_text(b, sl.cfg, seq).w.val();
    }
    {
        Tape t;
        model::Bound b(t, store_a);
        va = model::encode_and_project_image(b, sa.cfg, vol).v.val();
        wa = model::encode_and_project_text(b, sa.cfg, seq).w.val();
    }
    // Identical frozen backbones plus exactly-zero low-rank and bottleneck
    // contributions: the two strategies must agree bit for bit at init.
    CHECK(max_abs_diff(vl, va) == 0.0);
    CHECK(max_abs_diff(wl, wa) == 0.0);

    // With the zero factor in place the nonzero factor must be unreachable.
    auto store_l2 = make_store(sl.cfg, 5);
    for (const auto& p : store_l2.infos())
        if (p.name.find(".lora.a") != std::string::npos) store_l2.value(p.name).setConstant(0.37);
    {
        Tape t;
        model::Bound b(t, store_l2);
        CHECK(max_abs_diff(model::encode_and_project_image(b, sl.cfg, vol).v.val(), vl) == 0.0);
    }
}

TEST_CASE("full objective gradients match finite differences") {
    for (auto kind :
         {config::PeftKind::Prompt, config::PeftKind::Lora, config::PeftKind::Adapter}) {
        CAPTURE(config::to_string(kind));
        Setup s = make_setup(kind);
        auto store = make_store(s.cfg, 9);
        std::vector<cohort::Volume3D> vols = {vol_for(41, cohort::Diagnosis::NC, s.cfg.vision.dims),
                                              vol_for(42, cohort::Diagnosis::AD, s.cfg.vision.dims)};
        std::vector<std::vector<int>> seqs = {
            textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::NC), s.vocab, 8),
            textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::AD), s.vocab, 8)};
        std::vector<double> targets = {model::normalize_mmse(29), model::normalize_mmse(15)};

        std::map<std::string, Mat> grads;
        double base = model_loss(s.cfg, store, vols, seqs, targets, &grads);
        CHECK(std::isfinite(base));
        CHECK_FALSE(grads.empty());
        CHECK(grads.count("tau"));

        const double h = 1e-5;
        for (const auto& p : store.infos()) {
            if (!p.trainable) continue;
            REQUIRE_MESSAGE(grads.count(p.name) == 1, p.name);
            const Mat& g = grads.at(p.name);
            REQUIRE(g.rows() == p.rows);
            REQUIRE(g.cols() == p.cols);
            std::vector<std::pair<long, long>> picks = {{0, 0}};
            if (p.count() > 1) {
                picks.push_back({p.rows - 1, p.cols - 1});
                picks.push_back({p.rows / 2, p.cols / 2});
            }
            Mat& val = store.value(p.name);
            for (auto [i, j] : picks) {
                double keep = val(i, j);
                val(i, j) = keep + h;
                double fp = model_loss(s.cfg, store, vols, seqs, targets);
                val(i, j) = keep - h;
                double fm = model_loss(s.cfg, store, vols, seqs, targets);
                val(i, j) = keep;
                double numeric = (fp - fm) / (2.0 * h);
                CAPTURE(p.name);
                CAPTURE(i);
                CAPTURE(j);
                CHECK(fd_gap(numeric, g(i, j)) < 1e-4);
            }
        }
    }
}

TEST_CASE("frozen parameters receive no gradient") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    auto vol = vol_for(51, cohort::Diagnosis::MCI, s.cfg.vision.dims);
    auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::MCI), s.vocab, 8);

    Tape t;
    model::Bound b(t, store);
    Var tau_v = b("tau");  // bound up front, left out of this graph
    Var embed_v = b("txt.embed");
    auto img = model::encode_and_project_image(b, s.cfg, vol);
    auto txt = model::encode_and_project_text(b, s.cfg, seq);
    Var sim = model::pair_similarity(b, s.cfg, img, txt);
    Var wq = b("vis.layer0.attn.wq");
    Var prompt0 = b("vis.prompt0");
    Var proj = b("vis.proj.w");
    Var xav = b("xa.t2i.wv");
    t.backward(sim);

    CHECK_FALSE(t.has_grad(tau_v));
    CHECK_FALSE(t.has_grad(wq));    // frozen: never tracked
    CHECK_FALSE(t.has_grad(embed_v));
    CHECK(t.has_grad(prompt0));
    CHECK(t.has_grad(proj));
    CHECK(t.has_grad(xav));
}

TEST_CASE("embedding gradients support attribution") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    auto vol = vol_for(61, cohort::Diagnosis::AD, s.cfg.vision.dims);
    auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::AD), s.vocab, 8);

    Mat base(8, 16);
    const Mat& table = store.value("txt.embed");
    for (int i = 0; i < 8; ++i) base.row(i) = table.row(seq[static_cast<size_t>(i)]);

    auto score = [&](const Mat& emb, Mat* grad) {
        Tape t;
        model::Bound b(t, store);
        model::TextEncodeOptions topts;
        topts.embeddings_override = &emb;
        topts.want_embedding_grad = grad != nullptr;
        auto img = model::encode_and_project_image(b, s.cfg, vol);
        auto txt = model::encode_and_project_text(b, s.cfg, seq, topts);
        Var sim = model::pair_similarity(b, s.cfg, img, txt);
        double out = sim.scalar();
        if (grad) {
            t.backward(sim);
            *grad = t.grad(txt.raw.embeddings);
        }
        return out;
    };

    Mat g;
    score(base, &g);
    REQUIRE(g.rows() == 8);
    REQUIRE(g.cols() == 16);

    const double h = 1e-5;
    for (auto [i, j] : std::vector<std::pair<int, int>>{{0, 3}, {2, 7}, {4, 15}}) {
        Mat e = base;
        e(i, j) += h;
        double fp = score(e, nullptr);
        e(i, j) = base(i, j) - h;
        double fm = score(e, nullptr);
        double numeric = (fp - fm) / (2.0 * h);
        CHECK(fd_gap(numeric, g(i, j)) < 1e-4);
    }
    // Pad rows sit behind the attention mask: exactly zero signal.
    for (int i = 5; i < 8; ++i) CHECK(g.row(i).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("patch gradients are exposed for saliency") {
    Setup s = make_setup();
    auto store = make_store(s.cfg);
    auto vol = vol_for(71, cohort::Diagnosis::NC, s.cfg.vision.dims);
    auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::NC), s.vocab, 8);

    Tape t;
    model::Bound b(t, store);
    model::ImageEncodeOptions opts;
    opts.want_patch_grad = true;
    opts.want_input_patch_grad = true;
    auto img = model::encode_and_project_image(b, s.cfg, vol, opts);
    auto txt = model::encode_and_project_text(b, s.cfg, seq);
    Var sim = model::pair_similarity(b, s.cfg, img, txt);
    t.backward(sim);

    REQUIRE(t.has_grad(img.raw.patches));
    REQUIRE(t.has_grad(img.raw.patches_in));
    Mat gp = t.grad(img.raw.patches);
    Mat gi = t.grad(img.raw.patches_in);
    CHECK(gp.rows() == 8);
    CHECK(gp.cols() == 16);
    CHECK(gi.rows() == 8);
    CHECK(gi.cols() == 16);
    CHECK(gp.cwiseAbs().maxCoeff() > 0.0);
    CHECK(gi.cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("component switches change the wiring") {
    Setup s = make_setup();

    SUBCASE("without cross attention similarity is plain cosine") {
        Config cfg = s.cfg;
        cfg.flags.cross_attention = false;
        cfg.text.vocab_size = s.cfg.text.vocab_size;
        auto store = make_store(cfg);
        auto vol = vol_for(81, cohort::Diagnosis::NC, cfg.vision.dims);
        auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::NC), s.vocab, 8);
        Tape t;
        model::Bound b(t, store);
        auto img = model::encode_and_project_image(b, cfg, vol);
        auto txt = model::encode_and_project_text(b, cfg, seq);
        CHECK_FALSE(img.patch_feats.valid());
        CHECK_FALSE(txt.token_feats.valid());
        Var sim = model::pair_similarity(b, cfg, img, txt);
        double manual = (img.v.val() * txt.w.val().transpose())(0, 0);
        CHECK(sim.scalar() == doctest::Approx(manual).epsilon(1e-12));
    }

    SUBCASE("without the score token there is no regression head") {
        Config cfg = s.cfg;
        cfg.flags.mmse_token = false;
        auto store = make_store(cfg);
        auto vol = vol_for(82, cohort::Diagnosis::AD, cfg.vision.dims);
        Tape t;
        model::Bound b(t, store);
        auto img = model::encode_and_project_image(b, cfg, vol);
        CHECK_FALSE(img.mmse_pred.valid());
        CHECK_FALSE(img.raw.mmse.valid());
        CHECK(img.v.val().norm() == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("text prompts change the pooled feature") {
        auto store = make_store(s.cfg);
        auto seq = textkit::tokenize(textkit::class_prompt(cohort::Diagnosis::AD), s.vocab, 8);
        Mat w_ref;
        {
            Tape t;
            model::Bound b(t, store);
            w_ref = model::encode_and_project_text(b, s.cfg, seq).w.val();
        }
        auto store2 = make_store(s.cfg);
        // Not a uniform shift: per-row layer norm would cancel that exactly.
        store2.value("txt.prompt")(0, 3) += 0.25;
        store2.value("txt.prompt")(1, 9) -= 0.4;
        {
            Tape t;
            model::Bound b(t, store2);
            CHECK(max_abs_diff(model::encode_and_project_text(b, s.cfg, seq).w.val(), w_ref) >
                  1e-9);
        }
    }
}
