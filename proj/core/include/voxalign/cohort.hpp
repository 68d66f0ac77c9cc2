#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace voxalign::cohort {

enum class Diagnosis { NC = 0, MCI = 1, AD = 2 };
enum class Sex { M, F };
enum class Split { Train = 0, Val = 1, Test = 2 };

constexpr std::array<Diagnosis, 3> kAllDiagnoses = {Diagnosis::NC, Diagnosis::MCI, Diagnosis::AD};

std::string to_string(Diagnosis d);
Diagnosis diagnosis_from_string(const std::string& s);
std::string to_string(Split s);
std::string to_string(Sex s);

// Six regional volumes in mm³, canonical report order.
constexpr int kNumBiomarkers = 6;
constexpr std::array<const char*, kNumBiomarkers> kBiomarkerKeys = {
    "hippocampal", "ventricular", "whole_brain", "entorhinal", "fusiform", "mid_temporal"};
constexpr int kVentricularIdx = 1;
constexpr int kHippocampalIdx = 0;

using Biomarkers = std::array<double, kNumBiomarkers>;

struct SubjectRecord {
    std::string subject_id;
    double age = 0.0;
    Sex sex = Sex::M;
    Diagnosis diagnosis = Diagnosis::NC;
    int mmse = 30;
    Biomarkers biomarkers{};
    uint64_t seed = 0;
};

// Class-conditional sampling profile. Atrophy-sensitive means shrink with
// disease severity, ventricular grows; std is a fixed fraction of each mean.
struct DistributionProfile {
    std::array<Biomarkers, 3> means;      // indexed by Diagnosis
    double std_frac = 0.08;
    std::array<std::array<int, 2>, 3> mmse_range;  // inclusive [lo, hi] per class
    double age_lo = 54.4, age_hi = 90.9;
};

DistributionProfile default_profile();

struct Dims {
    int d = 0, h = 0, w = 0;
    long total() const { return static_cast<long>(d) * h * w; }
    bool operator==(const Dims&) const = default;
};

struct Volume3D {
    Dims dims;
    std::vector<float> voxels;  // C row-major (d, h, w)

    float& at(int z, int y, int x) { return voxels[static_cast<size_t>((z * dims.h + y) * dims.w + x)]; }
    float at(int z, int y, int x) const { return voxels[static_cast<size_t>((z * dims.h + y) * dims.w + x)]; }
};

// Noise-free anatomical regions used by the renderer and by geometric checks.
struct VolumeGeometry {
    Dims dims;
    std::vector<uint8_t> brain, ventricle, hippocampus;  // 1 = inside region
};

SubjectRecord gen_subject(uint64_t seed, Diagnosis diagnosis, const DistributionProfile& profile);
VolumeGeometry volume_geometry(const SubjectRecord& record, Dims dims);
Volume3D render_volume(const SubjectRecord& record, Dims dims);

// Per-class explicit layout: subjects and scans for each split. Scans are
// spread over a split's subjects as evenly as possible (earlier subjects take
// the remainder). Used when per-class totals cannot come from one shared
// fraction vector.
struct ClassPlan {
    std::array<int, 3> subjects{};  // train/val/test
    std::array<int, 3> scans{};
};

struct CohortConfig {
    std::array<int, 3> subjects_per_class = {8, 8, 8};
    int scans_per_subject = 1;
    Dims dims{32, 32, 32};
    std::array<double, 3> split_fractions = {0.75, 0.125, 0.125};  // train/val/test
    bool use_plan = false;  // when set, `plan` overrides the three fields above
    std::array<ClassPlan, 3> plan{};
    uint64_t master_seed = 1;
    std::filesystem::path out_dir;
    bool write_volumes = true;  // paper-scale plans skip the ~12 GB of voxel data
};

struct ScanEntry {
    SubjectRecord record;  // seed is the per-scan render seed
    std::string scan_id;
    std::string volume_path;  // relative to the manifest directory; empty if not written
    std::string report_path;
    Split split = Split::Train;
};

struct CohortManifest {
    std::vector<ScanEntry> scans;
    Dims dims;
    uint64_t master_seed = 0;

    std::vector<const ScanEntry*> split(Split s) const;
};

// Splits `n` items by fractions using largest-remainder rounding; fractions
// must sum to 1 within 1e-9.
std::array<int, 3> apportion(int n, const std::array<double, 3>& fractions);

CohortManifest gen_cohort(const CohortConfig& config);

nlohmann::json record_to_json(const SubjectRecord& r);
SubjectRecord record_from_json(const nlohmann::json& j);
nlohmann::json manifest_to_json(const CohortManifest& m);
CohortManifest manifest_from_json(const nlohmann::json& j);

// Loads a manifest written by gen_cohort. load_volume reads the stored grid,
// or re-renders it deterministically when the cohort was generated plan-only.
CohortManifest load_manifest(const std::filesystem::path& manifest_path);
Volume3D load_volume(const std::filesystem::path& manifest_dir, const ScanEntry& scan, Dims dims);

}  // namespace voxalign::cohort
