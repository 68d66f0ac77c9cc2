#pragma once

#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxalign/config.hpp"
#include "voxalign/params.hpp"
#include "voxalign/tensor.hpp"

namespace voxalign::model {

using ad::KeyMask;
using ad::Mat;
using ad::Tape;
using ad::Var;

// Lazily binds store tensors onto one tape; trainable parameters become
// gradient-tracked leaves. One Bound per tape per step.
class Bound {
public:
    Bound(Tape& tape, params::ParamStore& store) : tape_(&tape), store_(&store) {}

    Var operator()(const std::string& name);
    bool bound(const std::string& name) const { return vars_.count(name) != 0; }
    const std::unordered_map<std::string, Var>& all() const { return vars_; }
    Tape& tape() { return *tape_; }
    params::ParamStore& store() { return *store_; }

private:
    Tape* tape_;
    params::ParamStore* store_;
    std::unordered_map<std::string, Var> vars_;
};

struct ImageEncodeOptions {
    // Replaces the discarded per-layer prompt outputs with (output + noise[l])
    // before the next layer consumes the sequence; the encoder contract is
    // that downstream results cannot change.
    const std::vector<Mat>* prompt_output_noise = nullptr;
    bool want_patch_grad = false;        // final-layer patch rows (heatmaps)
    bool want_input_patch_grad = false;  // post-projection input embeddings
};

struct ImageEncoding {
    Var cls;      // 1×d
    Var mmse;     // 1×d; invalid when the auxiliary token is disabled
    Var patches;  // m×d
    Var patches_in;  // m×d input embeddings (E_0)
};

struct TextEncodeOptions {
    // Overrides the gathered token embeddings (rows = max_tokens); used by
    // attribution paths that interpolate in embedding space.
    const Mat* embeddings_override = nullptr;
    bool want_embedding_grad = false;
};

struct TextEncoding {
    Var pooled;     // 1×d output at the leading pooling token
    Var token_out;  // max_tokens×d outputs at token positions
    Var embeddings; // the gathered (possibly overridden) input embedding leaf
    int n_real = 0; // non-pad prefix length
};

ImageEncoding encode_image(Bound& b, const config::Config& cfg, const cohort::Volume3D& volume,
                           const ImageEncodeOptions& opts = {});
TextEncoding encode_text(Bound& b, const config::Config& cfg, const std::vector<int>& token_ids,
                         const TextEncodeOptions& opts = {});

// Projections into the shared space; rows come out unit-norm.
Var project_image(Bound& b, Var cls);                    // 1×d
Var project_image_tokens(Bound& b, Var patches);         // m×d, rowwise
Var project_text(Bound& b, Var pooled);                  // 1×d
Var project_text_tokens(Bound& b, Var token_out_real);   // L×d, rowwise
Var predict_mmse(Bound& b, Var mmse_out);                // 1×1, normalized score space

// Fully encoded + projected sides, ready for pairwise alignment.
struct EncodedImage {
    Var v;            // unit 1×d
    Var patch_feats;  // m×d unit rows
    Var mmse_pred;    // 1×1; invalid when disabled
    ImageEncoding raw;
};
struct EncodedText {
    Var w;            // unit 1×d
    Var token_feats;  // n_real×d unit rows
    TextEncoding raw;
};

EncodedImage encode_and_project_image(Bound& b, const config::Config& cfg,
                                      const cohort::Volume3D& volume,
                                      const ImageEncodeOptions& opts = {});
EncodedText encode_and_project_text(Bound& b, const config::Config& cfg,
                                    const std::vector<int>& token_ids,
                                    const TextEncodeOptions& opts = {});

// Residual single-query attention over the other modality's token features:
// softmax(q·Kᵀ/√d_k)·V + query. `prefix` selects the i2t or t2i projections.
Var cross_attend(Bound& b, const std::string& prefix, int heads, Var query, Var keys);

// Refined cosine similarity for one (image, text) pair; plain cosine when
// cross-attention is disabled.
Var pair_similarity(Bound& b, const config::Config& cfg, const EncodedImage& img,
                    const EncodedText& txt);

// All-pairs similarity: rows = images, cols = texts.
Var similarity_matrix(Bound& b, const config::Config& cfg, std::span<const EncodedImage> images,
                      std::span<const EncodedText> texts);

// The degenerate pooled-operand reading of the refinement equations, kept as
// an explicit diagnostic: both refined vectors collapse to v+w, so the
// similarity is identically 1.
Var pooled_similarity_diagnostic(Bound& b, Var v, Var w);

// Symmetric InfoNCE over S with temperature handling per config; N=1 gives
// exactly zero.
Var contrastive_loss(Bound& b, const config::Config& cfg, Var S, Var tau);
Var contrastive_loss_with_parts(Bound& b, const config::Config& cfg, Var S, Var tau, Var* i2t,
                                Var* t2i);

Var mmse_loss(Tape& t, std::span<const Var> preds, std::span<const double> targets_normalized);
Var total_loss(Tape& t, Var cl, Var mmse, double lambda);

double normalize_mmse(int raw);     // y/30
double denormalize_mmse(double y);  // ×30

}  // namespace voxalign::model
