#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "voxalign/cohort.hpp"

namespace voxalign::config {

enum class PeftKind { Prompt, Lora, Adapter };
enum class PromptMode { Deep, Shallow };
enum class TempMode { Divide, Multiply };

std::string to_string(PeftKind k);
std::string to_string(PromptMode m);
std::string to_string(TempMode m);
PeftKind peft_from_string(const std::string& s);
PromptMode prompt_mode_from_string(const std::string& s);
TempMode temp_mode_from_string(const std::string& s);

struct VisionConfig {
    cohort::Dims dims{32, 32, 32};
    cohort::Dims patch{4, 8, 8};
    int embed_dim = 64;
    int layers = 4;
    int heads = 4;
    int prompt_len = 8;  // l_p
    int mlp_ratio = 4;

    int num_patches() const { return (dims.d / patch.d) * (dims.h / patch.h) * (dims.w / patch.w); }
    int patch_voxels() const { return patch.d * patch.h * patch.w; }
};

struct TextConfig {
    int vocab_size = 0;  // resolved from the built vocabulary, not hand-set
    int embed_dim = 64;
    int layers = 4;
    int heads = 4;
    int max_tokens = 128;
    int prompt_len = 8;  // l_r
    int mlp_ratio = 4;
};

struct AlignConfig {
    int heads = 1;
    double lambda = 0.5;
    double tau_init = 10.0;
    double tau_min = 0.01;
    double tau_max = 100.0;
    TempMode temp_mode = TempMode::Divide;
};

struct PeftConfig {
    PeftKind kind = PeftKind::Prompt;
    int lora_rank = 4;
    double lora_alpha = 4.0;
    int adapter_dim = 8;
};

// Component switches for the ablation harness. Off switches remove the
// corresponding parameters and loss terms entirely.
struct AblationFlags {
    bool visual_prompts = true;
    bool mmse_token = true;
    bool text_prompts = true;
    bool report_supervision = true;
    bool cross_attention = true;

    bool operator==(const AblationFlags&) const = default;
};

struct TrainConfig {
    int batch_size = 8;
    int epochs = 20;
    double lr = 1e-3;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 1.0;
    int plateau_patience = 5;
    double plateau_factor = 0.1;
    double plateau_min_delta = 1e-4;
    uint64_t seed = 1;
    std::string data_dir;
    std::vector<cohort::Diagnosis> classes = {cohort::Diagnosis::NC, cohort::Diagnosis::MCI,
                                              cohort::Diagnosis::AD};
};

struct CohortGenConfig {
    std::array<int, 3> subjects_per_class = {267, 267, 267};
    int scans_per_subject = 1;
    std::array<double, 3> split_fractions = {200.0 / 267, 17.0 / 267, 50.0 / 267};
    bool use_plan = false;
    std::array<cohort::ClassPlan, 3> plan{};
    bool write_volumes = true;

    cohort::CohortConfig to_cohort_config(cohort::Dims dims, uint64_t seed,
                                          const std::filesystem::path& out_dir) const;
};

struct Config {
    VisionConfig vision;
    TextConfig text;
    AlignConfig align;
    PeftConfig peft;
    PromptMode prompt_mode = PromptMode::Deep;
    AblationFlags flags;
    TrainConfig train;
    CohortGenConfig cohort_gen;

    // Prompt parameters exist only under the prompt strategy with the
    // component switched on; other strategies run promptless encoders.
    int effective_lp() const {
        return (peft.kind == PeftKind::Prompt && flags.visual_prompts) ? vision.prompt_len : 0;
    }
    int effective_lr() const {
        return (peft.kind == PeftKind::Prompt && flags.text_prompts) ? text.prompt_len : 0;
    }
    bool mmse_enabled() const { return flags.mmse_token; }
    bool cross_attention_enabled() const { return flags.cross_attention; }

    void validate() const;  // throws ConfigError
};

// Presets: "desk" fits a single core; "paper" mirrors the published scale;
// "tiny" exists for exhaustive finite-difference checking.
Config desk_config();
Config paper_config();
Config tiny_config();
Config preset(const std::string& name);

nlohmann::json to_json(const Config& c);
// Strict: unknown keys anywhere are a ConfigError. Values not present keep
// the defaults from `base`.
Config from_json(const nlohmann::json& j, const Config& base = Config{});

// FNV-1a over the canonical serialized form; stable across runs.
uint64_t config_hash(const Config& c);

}  // namespace voxalign::config
