#pragma once

#include <filesystem>
#include <functional>
#include <vector>

#include "voxalign/cohort.hpp"
#include "voxalign/config.hpp"
#include "voxalign/params.hpp"
#include "voxalign/textkit.hpp"

namespace voxalign::trainer {

// One split, materialized: volumes resident in memory, supervision text
// tokenized according to the active component switches (full reports, or bare
// class prompts when report supervision is off).
struct SampleSet {
    std::vector<cohort::ScanEntry> entries;
    std::vector<cohort::Volume3D> volumes;
    std::vector<std::vector<int>> tokens;
    std::vector<double> mmse_norm;  // targets in normalized score space

    size_t size() const { return entries.size(); }
    SampleSet subset(const std::vector<size_t>& idx) const;
};

// Vocabulary comes from the training split's full reports, so one vocabulary
// serves every component configuration over the same cohort.
textkit::Vocab vocab_from_manifest(const cohort::CohortManifest& manifest);

SampleSet load_split(const config::Config& cfg, const cohort::CohortManifest& manifest,
                     const std::filesystem::path& manifest_dir, cohort::Split split,
                     const textkit::Vocab& vocab);

struct EpochStats {
    int epoch = 0;  // 1-based
    double train_loss = 0, cl_loss = 0, mmse_loss = 0;
    double val_acc = 0;
    double val_mmse_mae = 0;  // raw score units; informational
    double lr = 0;            // rate used during this epoch
};

struct TrainOptions {
    std::filesystem::path out_dir;  // metrics.jsonl + checkpoint/; empty = no artifacts
    bool save_best_checkpoint = true;
    // Early stop, checked after each epoch's validation pass.
    std::function<bool(const EpochStats&)> stop_when;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_val_acc = 0;
    int best_epoch = 0;
    int lr_cuts = 0;
    long steps = 0;  // optimizer steps taken
    std::filesystem::path checkpoint_dir;  // empty when nothing was saved
};

// Deterministic fine-tuning loop: seeded epoch shuffles, gradient clipping,
// decoupled-weight-decay Adam over trainable parameters, plateau LR schedule
// on validation zero-shot accuracy, best-checkpoint saving. Falls back to the
// train split for validation when `val_set` is empty.
TrainResult train(const config::Config& cfg, params::ParamStore& store,
                  const textkit::Vocab& vocab, const SampleSet& train_set,
                  const SampleSet& val_set, const TrainOptions& opts = {});

void save_checkpoint(const config::Config& cfg, const params::ParamStore& store,
                     const textkit::Vocab& vocab, const std::filesystem::path& dir, int epoch,
                     const EpochStats& stats);

struct LoadedCheckpoint {
    config::Config cfg;
    params::ParamStore store;
    textkit::Vocab vocab;
    int epoch = 0;
};

// Verifies shape/count agreement and per-tensor content hashes against the
// manifest; any mismatch is a CorruptCheckpoint error.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace voxalign::trainer
