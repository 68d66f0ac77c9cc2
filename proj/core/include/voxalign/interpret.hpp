#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "voxalign/cohort.hpp"
#include "voxalign/config.hpp"
#include "voxalign/params.hpp"
#include "voxalign/textkit.hpp"

namespace voxalign::interpret {

using Mat = Eigen::MatrixXd;

// Scalar target for attribution: returns the score at x and, when `grad` is
// non-null, writes ∂score/∂x into it. Must be deterministic.
using ScoreFn = std::function<double(const Mat& x, Mat* grad)>;

struct IGCore {
    std::vector<double> per_row;  // attribution per row of x (embedding axis summed)
    double s_input = 0, s_baseline = 0;
    double residual = 0;  // |Σ attributions − (s_input − s_baseline)| / max(|Δ|, 1e-12)
};

// Right-endpoint Riemann integrated gradients over rows of x. Exact for
// linear targets at any step count because the averaged gradient is constant.
IGCore ig_core(const Mat& x, const Mat& baseline, int steps, const ScoreFn& f);

struct AttributionResult {
    std::vector<int> token_ids;       // the attributed (padded) sequence
    std::vector<std::string> tokens;  // display strings aligned to token_ids
    std::vector<double> scores;       // IG per position; pad positions are 0
    double completeness_residual = 0; // relative
    double s_input = 0, s_baseline = 0;
};

// Attribution of the refined image-text similarity to the text tokens,
// integrated in token-embedding space from an all-[PAD] baseline. The image
// side is encoded once and frozen across interpolation steps.
AttributionResult integrated_gradients(const config::Config& cfg, params::ParamStore& store,
                                       const textkit::Vocab& vocab,
                                       const std::vector<int>& token_ids,
                                       const cohort::Volume3D& volume, int steps);

struct RankedToken {
    int position = 0;
    std::string token;
    double score = 0;
};

// Descending by score; exact ties break toward the earlier position.
std::vector<RankedToken> top_k_tokens(const AttributionResult& attr, int k);

nlohmann::json attribution_to_json(const AttributionResult& attr, int top_k);

// Replaces the five non-kept biomarker clauses of a rendered report with
// same-length runs of "[UNK]" placeholders, so the masked report tokenizes to
// the same positions with the kept clause intact. Idempotent.
std::string mask_biomarkers(const std::string& report, const std::string& keep);

enum class HeatmapLayer { Final, Input };

struct Heatmap {
    cohort::Dims grid;          // patch-grid shape (D/P_D, H/P_H, W/P_W)
    std::vector<float> values;  // row-major (gz, gy, gx), all ≥ 0
    std::string biomarker;      // conditioning label ("" = unconditioned)

    float at(int gz, int gy, int gx) const {
        return values[static_cast<size_t>((gz * grid.h + gy) * grid.w + gx)];
    }
};

// Rectified gradient×activation channel sum at the patch positions:
// h_n = max(0, Σ_d ∂s/∂E_n,d · E_n,d), taken at the final encoder layer by
// default or at the input patch embeddings.
Heatmap patch_heatmap(const config::Config& cfg, params::ParamStore& store,
                      const std::vector<int>& token_ids, const cohort::Volume3D& volume,
                      HeatmapLayer layer = HeatmapLayer::Final,
                      const std::string& biomarker = "");

// stem.json sidecar {dims, biomarker, formula} + stem.f32 raw grid.
void save_heatmap(const Heatmap& hm, const std::filesystem::path& dir, const std::string& stem);
Heatmap load_heatmap(const std::filesystem::path& dir, const std::string& stem);

// ASCII PGM of one axial slice, heat scaled so the grid maximum is white.
void write_pgm_slice(const Heatmap& hm, int gz, const std::filesystem::path& file);

}  // namespace voxalign::interpret
