#include "voxalign/model.hpp"

#include <cmath>

#include "voxalign/errors.hpp"
#include "voxalign/textkit.hpp"

namespace voxalign::model {

using config::Config;
using config::PeftKind;
using config::PromptMode;

Var Bound::operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const params::ParamInfo& info = store_->info(name);
    Var v = tape_->leaf(store_->value(name), info.trainable);
    vars_.emplace(name, v);
    return v;
}

namespace {

// Affine map with optional low-rank delta on the named base matrix.
Var projected(Bound& b, const Config& cfg, const std::string& layer_prefix, const char* which,
              Var x) {
    std::string base = layer_prefix + ".attn." + which;
    Var y = b.tape().add_rowvec(b.tape().matmul(x, b(base)), b(layer_prefix + ".attn.b" + (which + 1)));
    bool lora_target = which[1] == 'q' || which[1] == 'v';
    if (cfg.peft.kind == PeftKind::Lora && lora_target) {
        Var a = b(base + ".lora.a");
        Var bb = b(base + ".lora.b");
        double s = cfg.peft.lora_alpha / cfg.peft.lora_rank;
        y = b.tape().add(y, b.tape().scale(b.tape().matmul(b.tape().matmul(x, a), bb), s));
    }
    return y;
}

// One pre-norm transformer layer: x + MHSA(LN1(x)), then + MLP(LN2(·)), with
// an optional bottleneck adapter closing the block.
Var encoder_layer(Bound& b, const Config& cfg, const std::string& prefix, Var x, int heads,
                  const KeyMask* mask) {
    Tape& t = b.tape();
    const int d = static_cast<int>(x.cols());
    const int dk = d / heads;

    Var h = t.layer_norm(x, b(prefix + ".ln1.g"), b(prefix + ".ln1.b"));
    Var q = projected(b, cfg, prefix, "wq", h);
    Var k = projected(b, cfg, prefix, "wk", h);
    Var v = projected(b, cfg, prefix, "wv", h);

    std::vector<Var> head_out;
    head_out.reserve(static_cast<size_t>(heads));
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int i = 0; i < heads; ++i) {
        Var qi = t.slice_cols(q, i * dk, dk);
        Var ki = t.slice_cols(k, i * dk, dk);
        Var vi = t.slice_cols(v, i * dk, dk);
        Var scores = t.scale(t.matmul(qi, t.transpose(ki)), inv_sqrt_dk);
        Var attn = t.row_softmax(scores, mask);
        head_out.push_back(t.matmul(attn, vi));
    }
    Var concat = heads == 1 ? head_out[0] : t.concat_cols(head_out);
    Var attn_out = t.add_rowvec(t.matmul(concat, b(prefix + ".attn.wo")), b(prefix + ".attn.bo"));
    Var x1 = t.add(x, attn_out);

    Var h2 = t.layer_norm(x1, b(prefix + ".ln2.g"), b(prefix + ".ln2.b"));
    Var z = t.gelu(t.add_rowvec(t.matmul(h2, b(prefix + ".mlp.w1")), b(prefix + ".mlp.b1")));
    Var mlp_out = t.add_rowvec(t.matmul(z, b(prefix + ".mlp.w2")), b(prefix + ".mlp.b2"));
    Var x2 = t.add(x1, mlp_out);

    if (cfg.peft.kind == PeftKind::Adapter) {
        Var a = t.gelu(t.add_rowvec(t.matmul(x2, b(prefix + ".adapter.down.w")),
                                    b(prefix + ".adapter.down.b")));
        Var up = t.add_rowvec(t.matmul(a, b(prefix + ".adapter.up.w")), b(prefix + ".adapter.up.b"));
        x2 = t.add(x2, up);
    }
    return x2;
}

// (m × patch_voxels) matrix of flattened non-overlapping patches, patch index
// and intra-patch voxels both in (z, y, x) row-major order.
Mat patch_matrix(const Config& cfg, const cohort::Volume3D& vol) {
    const auto& vc = cfg.vision;
    if (!(vol.dims == vc.dims))
        throw InvalidArgument("encode_image: volume dims do not match the configured input size");
    const int gd = vc.dims.d / vc.patch.d, gh = vc.dims.h / vc.patch.h, gw = vc.dims.w / vc.patch.w;
    Mat x(vc.num_patches(), vc.patch_voxels());
    int n = 0;
    for (int pz = 0; pz < gd; ++pz)
        for (int py = 0; py < gh; ++py)
            for (int px = 0; px < gw; ++px, ++n) {
                int col = 0;
                for (int z = 0; z < vc.patch.d; ++z)
                    for (int y = 0; y < vc.patch.h; ++y)
                        for (int xx = 0; xx < vc.patch.w; ++xx, ++col)
                            x(n, col) = vol.at(pz * vc.patch.d + z, py * vc.patch.h + y,
                                               px * vc.patch.w + xx);
            }
    return x;
}

}  // namespace

ImageEncoding encode_image(Bound& b, const Config& cfg, const cohort::Volume3D& volume,
                           const ImageEncodeOptions& opts) {
    Tape& t = b.tape();
    const int lp = cfg.effective_lp();
    const bool mmse = cfg.mmse_enabled();
    const int lead = mmse ? 2 : 1;  // pooling token (+ auxiliary score token)
    const int m = cfg.vision.num_patches();

    if (opts.prompt_output_noise != nullptr) {
        if (lp == 0 || cfg.prompt_mode != PromptMode::Deep)
            throw InvalidArgument("prompt_output_noise requires deep prompt mode with prompts enabled");
        if (opts.prompt_output_noise->size() != static_cast<size_t>(cfg.vision.layers))
            throw InvalidArgument("prompt_output_noise must supply one matrix per layer");
    }

    Var x_patches = t.constant(patch_matrix(cfg, volume));
    Var e0 = t.add(t.add_rowvec(t.matmul(x_patches, b("vis.patch_proj.w")), b("vis.patch_proj.b")),
                   b("vis.pos"));
    if (opts.want_input_patch_grad) t.want_grad(e0);

    Var cls = b("vis.cls");
    Var mm = mmse ? b("vis.mmse_token") : Var{};
    Var e = e0;

    auto leading = [&](Var cls_v, Var mm_v) {
        std::vector<Var> parts;
        parts.push_back(cls_v);
        if (mmse) parts.push_back(mm_v);
        return parts;
    };

    if (cfg.prompt_mode == PromptMode::Deep || lp == 0) {
        for (int l = 0; l < cfg.vision.layers; ++l) {
            std::vector<Var> parts = leading(cls, mm);
            if (lp > 0) parts.push_back(b("vis.prompt" + std::to_string(l)));
            parts.push_back(e);
            Var x = t.concat_rows(parts);
            Var y = encoder_layer(b, cfg, "vis.layer" + std::to_string(l), x, cfg.vision.heads, nullptr);
            if (lp > 0 && opts.prompt_output_noise != nullptr) {
                // Perturb the to-be-discarded prompt output rows, then rebuild
                // the sequence from the perturbed matrix; the splits below must
                // make this a no-op.
                const Mat& noise = opts.prompt_output_noise->at(static_cast<size_t>(l));
                std::vector<Var> rebuilt = {
                    t.slice_rows(y, 0, lead),
                    t.add(t.slice_rows(y, lead, lp), t.constant(noise)),
                    t.slice_rows(y, lead + lp, m),
                };
                y = t.concat_rows(rebuilt);
            }
            cls = t.slice_rows(y, 0, 1);
            if (mmse) mm = t.slice_rows(y, 1, 1);
            e = t.slice_rows(y, lead + lp, m);
        }
    } else {  // shallow: one prompt block enters at the input and propagates
        std::vector<Var> parts = leading(cls, mm);
        parts.push_back(b("vis.prompt0"));
        parts.push_back(e);
        Var x = t.concat_rows(parts);
        for (int l = 0; l < cfg.vision.layers; ++l)
            x = encoder_layer(b, cfg, "vis.layer" + std::to_string(l), x, cfg.vision.heads, nullptr);
        cls = t.slice_rows(x, 0, 1);
        if (mmse) mm = t.slice_rows(x, 1, 1);
        e = t.slice_rows(x, lead + lp, m);
    }

    if (opts.want_patch_grad) t.want_grad(e);
    ImageEncoding out;
    out.cls = cls;
    out.mmse = mm;
    out.patches = e;
    out.patches_in = e0;
    return out;
}

TextEncoding encode_text(Bound& b, const Config& cfg, const std::vector<int>& token_ids,
                         const TextEncodeOptions& opts) {
    Tape& t = b.tape();
    const int lr = cfg.effective_lr();
    const int max_tokens = cfg.text.max_tokens;
    if (static_cast<int>(token_ids.size()) != max_tokens)
        throw InvalidArgument("encode_text: sequence length must equal text.max_tokens");

    const Mat& table = b.store().value("txt.embed");
    int n_real = 0;
    Mat gathered(max_tokens, cfg.text.embed_dim);
    for (int i = 0; i < max_tokens; ++i) {
        int id = token_ids[static_cast<size_t>(i)];
        if (id < 0 || id >= static_cast<int>(table.rows()))
            throw InvalidArgument("encode_text: token id out of vocabulary range");
        gathered.row(i) = table.row(id);
        if (id != textkit::Vocab::kPad) {
            if (i != n_real) throw InvalidArgument("encode_text: padding must be a trailing suffix");
            n_real++;
        }
    }
    if (opts.embeddings_override != nullptr) {
        if (opts.embeddings_override->rows() != max_tokens ||
            opts.embeddings_override->cols() != cfg.text.embed_dim)
            throw InvalidArgument("encode_text: embedding override has wrong shape");
        gathered = *opts.embeddings_override;
    }
    Var emb = t.leaf(std::move(gathered), opts.want_embedding_grad);

    std::vector<Var> parts;
    parts.push_back(b("txt.cls"));
    if (lr > 0) parts.push_back(b("txt.prompt"));
    parts.push_back(emb);
    Var x = t.add(t.concat_rows(parts), b("txt.pos"));

    KeyMask mask(static_cast<size_t>(1 + lr + max_tokens), 1);
    for (int i = n_real; i < max_tokens; ++i) mask[static_cast<size_t>(1 + lr + i)] = 0;

    for (int l = 0; l < cfg.text.layers; ++l)
        x = encoder_layer(b, cfg, "txt.layer" + std::to_string(l), x, cfg.text.heads, &mask);

    TextEncoding out;
    out.pooled = t.slice_rows(x, 0, 1);
    out.token_out = t.slice_rows(x, 1 + lr, max_tokens);
    out.embeddings = emb;
    out.n_real = n_real;
    return out;
}

Var project_image(Bound& b, Var cls) {
    return b.tape().normalize_rows(b.tape().matmul(cls, b("vis.proj.w")));
}
Var project_image_tokens(Bound& b, Var patches) {
    return b.tape().normalize_rows(b.tape().matmul(patches, b("vis.proj.w")));
}
Var project_text(Bound& b, Var pooled) {
    return b.tape().normalize_rows(b.tape().matmul(pooled, b("txt.proj.w")));
}
Var project_text_tokens(Bound& b, Var token_out_real) {
    return b.tape().normalize_rows(b.tape().matmul(token_out_real, b("txt.proj.w")));
}

Var predict_mmse(Bound& b, Var mmse_out) {
    Tape& t = b.tape();
    Var h = t.gelu(t.add_rowvec(t.matmul(mmse_out, b("vis.mmse_head.w1")), b("vis.mmse_head.b1")));
    return t.add_rowvec(t.matmul(h, b("vis.mmse_head.w2")), b("vis.mmse_head.b2"));
}

EncodedImage encode_and_project_image(Bound& b, const Config& cfg, const cohort::Volume3D& volume,
                                      const ImageEncodeOptions& opts) {
    EncodedImage out;
    out.raw = encode_image(b, cfg, volume, opts);
    out.v = project_image(b, out.raw.cls);
    if (cfg.cross_attention_enabled()) out.patch_feats = project_image_tokens(b, out.raw.patches);
    if (cfg.mmse_enabled()) out.mmse_pred = predict_mmse(b, out.raw.mmse);
    return out;
}

EncodedText encode_and_project_text(Bound& b, const Config& cfg, const std::vector<int>& token_ids,
                                    const TextEncodeOptions& opts) {
    EncodedText out;
    out.raw = encode_text(b, cfg, token_ids, opts);
    out.w = project_text(b, out.raw.pooled);
    if (cfg.cross_attention_enabled() && out.raw.n_real > 0) {
        Var real = b.tape().slice_rows(out.raw.token_out, 0, out.raw.n_real);
        out.token_feats = project_text_tokens(b, real);
    }
    return out;
}

namespace {

// softmax(q·kᵀ/√d_k)·v per head slice, heads concatenated back.
Var heads_attend(Tape& t, int heads, Var q, Var k, Var v) {
    const int d = static_cast<int>(q.cols());
    const int dk = d / heads;
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<Var> head_out;
    head_out.reserve(static_cast<size_t>(heads));
    for (int i = 0; i < heads; ++i) {
        Var qi = t.slice_cols(q, i * dk, dk);
        Var ki = t.slice_cols(k, i * dk, dk);
        Var vi = t.slice_cols(v, i * dk, dk);
        Var attn = t.row_softmax(t.scale(t.matmul(qi, t.transpose(ki)), inv_sqrt_dk));
        head_out.push_back(t.matmul(attn, vi));
    }
    return heads == 1 ? head_out[0] : t.concat_cols(head_out);
}

}  // namespace

Var cross_attend(Bound& b, const std::string& prefix, int heads, Var query, Var keys) {
    Tape& t = b.tape();
    if (!keys.valid() || keys.rows() < 1)
        throw InvalidArgument("cross_attend: no key positions (all-pad input)");
    Var q = t.matmul(query, b(prefix + ".wq"));
    Var k = t.matmul(keys, b(prefix + ".wk"));
    Var v = t.matmul(keys, b(prefix + ".wv"));
    return t.add(heads_attend(t, heads, q, k, v), query);
}

Var pair_similarity(Bound& b, const Config& cfg, const EncodedImage& img, const EncodedText& txt) {
    Tape& t = b.tape();
    if (!cfg.cross_attention_enabled())
        return t.dot(img.v, txt.w);  // both already unit vectors
    if (!txt.token_feats.valid())
        throw InvalidArgument("pair_similarity: text has no non-pad tokens to attend over");
    Var v_hat = cross_attend(b, "xa.i2t", cfg.align.heads, img.v, txt.token_feats);
    Var w_hat = cross_attend(b, "xa.t2i", cfg.align.heads, txt.w, img.patch_feats);
    return t.dot(t.normalize_rows(v_hat), t.normalize_rows(w_hat));
}

Var similarity_matrix(Bound& b, const Config& cfg, std::span<const EncodedImage> images,
                      std::span<const EncodedText> texts) {
    Tape& t = b.tape();
    if (images.empty() || texts.empty()) throw InvalidArgument("similarity_matrix: empty batch");
    std::vector<Var> entries;
    entries.reserve(images.size() * texts.size());
    if (!cfg.cross_attention_enabled()) {
        for (const EncodedImage& img : images)
            for (const EncodedText& txt : texts) entries.push_back(t.dot(img.v, txt.w));
        return t.stack_scalars(static_cast<int>(images.size()), static_cast<int>(texts.size()),
                               entries);
    }

    // Key/value/query projections depend on one side only; compute each once
    // instead of once per pair.
    const int heads = cfg.align.heads;
    std::vector<Var> kt, vt, qw, ki, vi, qv;
    for (const EncodedText& txt : texts) {
        if (!txt.token_feats.valid())
            throw InvalidArgument("similarity_matrix: text has no non-pad tokens to attend over");
        kt.push_back(t.matmul(txt.token_feats, b("xa.i2t.wk")));
        vt.push_back(t.matmul(txt.token_feats, b("xa.i2t.wv")));
        qw.push_back(t.matmul(txt.w, b("xa.t2i.wq")));
    }
    for (const EncodedImage& img : images) {
        ki.push_back(t.matmul(img.patch_feats, b("xa.t2i.wk")));
        vi.push_back(t.matmul(img.patch_feats, b("xa.t2i.wv")));
        qv.push_back(t.matmul(img.v, b("xa.i2t.wq")));
    }
    for (size_t i = 0; i < images.size(); ++i)
        for (size_t j = 0; j < texts.size(); ++j) {
            Var v_hat = t.add(heads_attend(t, heads, qv[i], kt[j], vt[j]), images[i].v);
            Var w_hat = t.add(heads_attend(t, heads, qw[j], ki[i], vi[i]), texts[j].w);
            entries.push_back(t.dot(t.normalize_rows(v_hat), t.normalize_rows(w_hat)));
        }
    return t.stack_scalars(static_cast<int>(images.size()), static_cast<int>(texts.size()), entries);
}

Var pooled_similarity_diagnostic(Bound& b, Var v, Var w) {
    Tape& t = b.tape();
    // With a single pooled key the attention weight is softmax of one logit,
    // i.e. exactly 1, so both refinements collapse to v + w.
    Var refined = t.add(t.mul_scalar(w, t.row_softmax(t.dot(v, w))), v);
    Var u = t.normalize_rows(refined);
    return t.dot(u, u);
}

Var contrastive_loss(Bound& b, const Config& cfg, Var S, Var tau) {
    return contrastive_loss_with_parts(b, cfg, S, tau, nullptr, nullptr);
}

Var contrastive_loss_with_parts(Bound& b, const Config& cfg, Var S, Var tau, Var* i2t_out,
                                Var* t2i_out) {
    Tape& t = b.tape();
    if (S.rows() != S.cols()) throw InvalidArgument("contrastive_loss: similarity matrix must be square");
    if (!(tau.val()(0, 0) > 0)) throw InvalidArgument("contrastive_loss: temperature must be positive");
    const int n = static_cast<int>(S.rows());
    auto direction = [&](Var logits) {
        Var diag = t.diag(logits);                 // n×1
        Var lse = t.logsumexp_rows(logits);        // n×1
        return t.scale(t.sum(t.sub(diag, lse)), -1.0 / n);
    };
    Var logits = cfg.align.temp_mode == config::TempMode::Divide ? t.div_scalar(S, tau)
                                                                 : t.mul_scalar(S, tau);
    Var i2t = direction(logits);
    Var t2i = direction(t.transpose(logits));
    if (i2t_out) *i2t_out = i2t;
    if (t2i_out) *t2i_out = t2i;
    return t.add(i2t, t2i);
}

Var mmse_loss(Tape& t, std::span<const Var> preds, std::span<const double> targets_normalized) {
    if (preds.size() != targets_normalized.size())
        throw InvalidArgument("mmse_loss: prediction/target length mismatch");
    if (preds.empty()) throw InvalidArgument("mmse_loss: empty batch");
    std::vector<Var> stacked(preds.begin(), preds.end());
    Var p = t.stack_scalars(static_cast<int>(preds.size()), 1, stacked);
    Mat y(static_cast<Eigen::Index>(targets_normalized.size()), 1);
    for (size_t i = 0; i < targets_normalized.size(); ++i)
        y(static_cast<Eigen::Index>(i), 0) = targets_normalized[i];
    return t.mean_all(t.square(t.sub(p, t.constant(y))));
}

Var total_loss(Tape& t, Var cl, Var mmse, double lambda) {
    if (!mmse.valid()) return cl;
    return t.add(cl, t.scale(mmse, lambda));
}

double normalize_mmse(int raw) { return raw / 30.0; }
double denormalize_mmse(double y) { return y * 30.0; }

}  // namespace voxalign::model
