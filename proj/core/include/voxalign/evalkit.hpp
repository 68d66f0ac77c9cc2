#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxalign/cohort.hpp"
#include "voxalign/config.hpp"
#include "voxalign/params.hpp"
#include "voxalign/textkit.hpp"
#include "voxalign/trainer.hpp"

namespace voxalign::evalkit {

using Mat = Eigen::MatrixXd;

// Text-side encodings of each class's "A photo of X." prompt, frozen to plain
// matrices so evaluation re-encodes the prompts once per model state rather
// than once per scan.
struct PromptBank {
    std::vector<cohort::Diagnosis> classes;
    std::vector<Mat> w;            // unit 1×d rows
    std::vector<Mat> token_feats;  // unit rows; empty when cross-attention is off
};

PromptBank encode_prompts(const config::Config& cfg, params::ParamStore& store,
                          const textkit::Vocab& vocab,
                          const std::vector<cohort::Diagnosis>& classes);

struct ClassScores {
    int predicted = 0;           // index into the class list
    std::vector<double> scores;  // similarity per class
    double mmse_raw = 0;         // denormalized prediction; valid when head enabled
    bool has_mmse = false;
};

// Argmax of refined similarity against each class prompt; exact ties resolve
// to the lowest class index.
ClassScores classify(const config::Config& cfg, params::ParamStore& store, const PromptBank& bank,
                     const cohort::Volume3D& volume);

ClassScores zero_shot_classify(const config::Config& cfg, params::ParamStore& store,
                               const textkit::Vocab& vocab, const cohort::Volume3D& volume,
                               const std::vector<cohort::Diagnosis>& classes);

struct EvalReport {
    int n = 0;
    double accuracy = 0;
    std::vector<long> class_counts;            // aligned to classes
    std::vector<double> per_class_recall;      // aligned to classes
    std::vector<std::vector<long>> confusion;  // [true][predicted]
    double mmse_mae = 0, mmse_rmse = 0;        // raw score units
    bool has_mmse = false;

    nlohmann::json to_json(const std::vector<cohort::Diagnosis>& classes) const;
};

// Scan-level metrics over the subset of `set` whose diagnosis is in `classes`
// (so a binary NC-vs-AD evaluation just restricts the class list). Pure: no
// randomness, identical results on repeated calls.
EvalReport evaluate(const config::Config& cfg, params::ParamStore& store,
                    const textkit::Vocab& vocab, const trainer::SampleSet& set,
                    const std::vector<cohort::Diagnosis>& classes);

struct SweepRow {
    int n = 0;
    double accuracy = 0;
};

// Trains one fresh model per sample size on a seeded-shuffle prefix of the
// train split (sizes share one shuffle, so smaller samples nest in larger
// ones) and evaluates each on the same test split.
std::vector<SweepRow> sweep(const config::Config& cfg, const cohort::CohortManifest& manifest,
                            const std::filesystem::path& manifest_dir,
                            const std::vector<int>& sizes, const std::filesystem::path& out_dir);
std::string sweep_csv(const std::vector<SweepRow>& rows);

struct AblateRow {
    std::string label;  // a, b1..b3, c1..c3, d, e
    config::AblationFlags flags;
    double accuracy = 0;
};

// The component grid: row (a) is the untrained zero-shot baseline, rows (b*)
// image-side components, (c*) text-side components, (d) everything but
// cross-attention, (e) the full method.
std::vector<std::pair<std::string, config::AblationFlags>> ablation_rows();

std::vector<AblateRow> ablate(const config::Config& cfg, const cohort::CohortManifest& manifest,
                              const std::filesystem::path& manifest_dir,
                              const std::filesystem::path& out_dir);
std::string ablate_csv(const std::vector<AblateRow>& rows);

}  // namespace voxalign::evalkit
