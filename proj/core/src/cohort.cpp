#include "voxalign/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "voxalign/errors.hpp"
#include "voxalign/io.hpp"
#include "voxalign/rng.hpp"
#include "voxalign/textkit.hpp"

namespace voxalign::cohort {

using rng::Stream;

std::string to_string(Diagnosis d) {
    switch (d) {
        case Diagnosis::NC: return "NC";
        case Diagnosis::MCI: return "MCI";
        case Diagnosis::AD: return "AD";
    }
    throw InvalidArgument("unknown diagnosis value");
}

Diagnosis diagnosis_from_string(const std::string& s) {
    if (s == "NC") return Diagnosis::NC;
    if (s == "MCI") return Diagnosis::MCI;
    if (s == "AD") return Diagnosis::AD;
    throw InvalidArgument("unknown diagnosis: " + s);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    throw InvalidArgument("unknown split value");
}

std::string to_string(Sex s) { return s == Sex::M ? "M" : "F"; }

DistributionProfile default_profile() {
    DistributionProfile p;
    // NC means follow the canonical example report; AD shrinks atrophy-sensitive
    // volumes to 70% and enlarges ventricles to 160%; MCI sits midway.
    const Biomarkers nc = {7323.0, 43767.0, 968731.0, 4056.0, 18775.0, 17048.0};
    Biomarkers mci{}, ad{};
    for (size_t k = 0; k < kNumBiomarkers; ++k) {
        if (k == kVentricularIdx) {
            ad[k] = nc[k] * 1.60;
            mci[k] = nc[k] * 1.30;
        } else {
            ad[k] = nc[k] * 0.70;
            mci[k] = nc[k] * 0.85;
        }
    }
    p.means = {nc, mci, ad};
    p.std_frac = 0.08;
    p.mmse_range = {{{27, 30}, {20, 27}, {2, 20}}};
    return p;
}

SubjectRecord gen_subject(uint64_t seed, Diagnosis diagnosis, const DistributionProfile& profile) {
    int c = static_cast<int>(diagnosis);
    if (c < 0 || c > 2) throw InvalidArgument("gen_subject: unknown diagnosis");
    SubjectRecord r;
    r.seed = seed;
    r.diagnosis = diagnosis;
    char buf[20];
    std::snprintf(buf, sizeof(buf), "S%016llX",
                  static_cast<unsigned long long>(rng::mix(seed, rng::fnv1a("subject_id"))));
    r.subject_id = buf;

    Stream s(rng::mix(seed, static_cast<uint64_t>(c) + 1));
    r.age = s.uniform(profile.age_lo, profile.age_hi);
    r.sex = s.next_double() < 0.5 ? Sex::M : Sex::F;
    r.mmse = s.uniform_int(profile.mmse_range[static_cast<size_t>(c)][0],
                           profile.mmse_range[static_cast<size_t>(c)][1]);
    for (int k = 0; k < kNumBiomarkers; ++k) {
        double mean = profile.means[static_cast<size_t>(c)][static_cast<size_t>(k)];
        double sd = profile.std_frac * mean;
        double v;
        do {
            v = s.normal(mean, sd);
        } while (!(v > 0.0));  // means sit many sigmas above zero; loop is a safety net
        r.biomarkers[static_cast<size_t>(k)] = v;
    }
    return r;
}

namespace {

// Reference means anchoring the affine voxel-count maps.
constexpr double kVentRefVolume = 43767.0;
constexpr double kHippoRefVolume = 7323.0;
constexpr double kVentFillFrac = 0.015;   // fraction of total voxels at the reference mean
constexpr double kHippoFillFrac = 0.012;

struct Ellipsoid {
    double cz, cy, cx;
    double rz, ry, rx;
    bool contains(int z, int y, int x) const {
        double a = (z - cz) / rz, b = (y - cy) / ry, c = (x - cx) / rx;
        return a * a + b * b + c * c <= 1.0;
    }
};

}  // namespace

VolumeGeometry volume_geometry(const SubjectRecord& record, Dims dims) {
    if (dims.d <= 0 || dims.h <= 0 || dims.w <= 0) throw InvalidArgument("volume_geometry: dims must be positive");
    VolumeGeometry g;
    g.dims = dims;
    size_t n = static_cast<size_t>(dims.total());
    g.brain.assign(n, 0);
    g.ventricle.assign(n, 0);
    g.hippocampus.assign(n, 0);

    double cz = (dims.d - 1) / 2.0, cy = (dims.h - 1) / 2.0, cx = (dims.w - 1) / 2.0;
    Ellipsoid brain{cz, cy, cx, 0.40 * dims.d, 0.44 * dims.h, 0.44 * dims.w};

    // Central dark cavity: voxel count scales linearly with the ventricular
    // volume; anisotropic aspect (z, y, x) = (1, 1.25, 0.8).
    double vent_target = kVentFillFrac * static_cast<double>(dims.total()) *
                         (record.biomarkers[kVentricularIdx] / kVentRefVolume);
    const double az = 1.0, ay = 1.25, ax = 0.8;
    double vr = std::cbrt(3.0 * vent_target / (4.0 * M_PI * az * ay * ax));
    Ellipsoid vent{cz, cy, cx, vr * az, ay * vr, ax * vr};

    // Bilateral bright blobs; combined voxel count scales with hippocampal volume.
    double hippo_target = kHippoFillFrac * static_cast<double>(dims.total()) *
                          (record.biomarkers[kHippocampalIdx] / kHippoRefVolume);
    double hr = std::cbrt(3.0 * (hippo_target / 2.0) / (4.0 * M_PI));
    double hy = 0.6 * (dims.h - 1);
    Ellipsoid left{cz, hy, 0.35 * (dims.w - 1), hr, hr, hr};
    Ellipsoid right{cz, hy, 0.65 * (dims.w - 1), hr, hr, hr};

    size_t i = 0;
    for (int z = 0; z < dims.d; ++z)
        for (int y = 0; y < dims.h; ++y)
            for (int x = 0; x < dims.w; ++x, ++i) {
                if (!brain.contains(z, y, x)) continue;
                g.brain[i] = 1;
                if (left.contains(z, y, x) || right.contains(z, y, x))
                    g.hippocampus[i] = 1;
                else if (vent.contains(z, y, x))
                    g.ventricle[i] = 1;
            }
    return g;
}

Volume3D render_volume(const SubjectRecord& record, Dims dims) {
    VolumeGeometry g = volume_geometry(record, dims);
    Volume3D v;
    v.dims = dims;
    size_t n = static_cast<size_t>(dims.total());
    v.voxels.resize(n);
    Stream noise(rng::mix(record.seed, rng::fnv1a("render")));
    for (size_t i = 0; i < n; ++i) {
        double base = 0.0;
        if (g.hippocampus[i]) base = 0.8;
        else if (g.ventricle[i]) base = 0.1;
        else if (g.brain[i]) base = 0.6;
        double out = base + noise.normal(0.0, 0.05);
        v.voxels[i] = static_cast<float>(std::clamp(out, 0.0, 1.0));
    }
    return v;
}

std::array<int, 3> apportion(int n, const std::array<double, 3>& fractions) {
    double total = fractions[0] + fractions[1] + fractions[2];
    if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("split fractions must sum to 1");
    for (double f : fractions)
        if (f < 0.0) throw InvalidArgument("split fractions must be non-negative");
    std::array<int, 3> out{};
    std::array<double, 3> rem{};
    int assigned = 0;
    for (int i = 0; i < 3; ++i) {
        double exact = n * fractions[static_cast<size_t>(i)];
        out[static_cast<size_t>(i)] = static_cast<int>(std::floor(exact + 1e-9));
        rem[static_cast<size_t>(i)] = exact - out[static_cast<size_t>(i)];
        assigned += out[static_cast<size_t>(i)];
    }
    while (assigned < n) {
        int best = 0;
        for (int i = 1; i < 3; ++i)
            if (rem[static_cast<size_t>(i)] > rem[static_cast<size_t>(best)] + 1e-12) best = i;
        out[static_cast<size_t>(best)]++;
        rem[static_cast<size_t>(best)] = -1.0;
        assigned++;
    }
    return out;
}

std::vector<const ScanEntry*> CohortManifest::split(Split s) const {
    std::vector<const ScanEntry*> out;
    for (const ScanEntry& e : scans)
        if (e.split == s) out.push_back(&e);
    return out;
}

CohortManifest gen_cohort(const CohortConfig& config) {
    if (config.scans_per_subject < 1) throw InvalidArgument("gen_cohort: scans_per_subject must be >= 1");
    if (config.dims.d <= 0 || config.dims.h <= 0 || config.dims.w <= 0)
        throw InvalidArgument("gen_cohort: dims must be positive");
    for (int c : config.subjects_per_class)
        if (c < 0) throw InvalidArgument("gen_cohort: negative subject count");

    DistributionProfile profile = default_profile();
    CohortManifest manifest;
    manifest.dims = config.dims;
    manifest.master_seed = config.master_seed;

    bool to_disk = !config.out_dir.empty();
    if (to_disk) {
        io::ensure_dir(config.out_dir);
        if (config.write_volumes) io::ensure_dir(config.out_dir / "volumes");
        io::ensure_dir(config.out_dir / "reports");
    }

    for (int c = 0; c < 3; ++c) {
        // Resolve this class into per-subject (split, scan count) assignments.
        std::array<int, 3> subj_counts;
        std::array<int, 3> scan_totals;
        if (config.use_plan) {
            subj_counts = config.plan[static_cast<size_t>(c)].subjects;
            scan_totals = config.plan[static_cast<size_t>(c)].scans;
            for (int s = 0; s < 3; ++s) {
                if (subj_counts[static_cast<size_t>(s)] < 0 || scan_totals[static_cast<size_t>(s)] < 0)
                    throw InvalidArgument("gen_cohort: negative plan entry");
                if (subj_counts[static_cast<size_t>(s)] == 0 && scan_totals[static_cast<size_t>(s)] > 0)
                    throw InvalidArgument("gen_cohort: plan assigns scans to an empty split");
            }
        } else {
            int n_subj = config.subjects_per_class[static_cast<size_t>(c)];
            subj_counts = apportion(n_subj, config.split_fractions);
            for (int s = 0; s < 3; ++s)
                scan_totals[static_cast<size_t>(s)] =
                    subj_counts[static_cast<size_t>(s)] * config.scans_per_subject;
        }
        int n_subj = subj_counts[0] + subj_counts[1] + subj_counts[2];
        for (int k = 0; k < n_subj; ++k) {
            uint64_t subject_seed = rng::mix(config.master_seed, static_cast<uint64_t>(c) + 1,
                                             static_cast<uint64_t>(k) + 1);
            SubjectRecord subject = gen_subject(subject_seed, static_cast<Diagnosis>(c), profile);
            Split split = k < subj_counts[0]                    ? Split::Train
                          : k < subj_counts[0] + subj_counts[1] ? Split::Val
                                                                : Split::Test;
            // Even spread of this split's scans across its subjects: earlier
            // subjects absorb the remainder.
            int split_idx = static_cast<int>(split);
            int in_split = k - (split_idx > 0 ? subj_counts[0] : 0) - (split_idx > 1 ? subj_counts[1] : 0);
            int ns = subj_counts[static_cast<size_t>(split_idx)];
            int total = scan_totals[static_cast<size_t>(split_idx)];
            int scans_here = ns == 0 ? 0 : total / ns + (in_split < total % ns ? 1 : 0);
            for (int s = 0; s < scans_here; ++s) {
                ScanEntry entry;
                entry.record = subject;
                entry.record.seed = rng::mix(subject_seed, static_cast<uint64_t>(s) + 1);
                entry.scan_id = subject.subject_id + "_s" + std::to_string(s);
                entry.split = split;
                entry.report_path = "reports/" + entry.scan_id + ".txt";
                if (config.write_volumes) entry.volume_path = "volumes/" + entry.scan_id + ".f32";
                if (to_disk) {
                    io::write_text(config.out_dir / entry.report_path, textkit::render_report(entry.record));
                    if (config.write_volumes) {
                        Volume3D vol = render_volume(entry.record, config.dims);
                        io::write_f32(config.out_dir / entry.volume_path, vol.voxels);
                        nlohmann::json sidecar = {
                            {"subject_id", subject.subject_id},
                            {"scan_id", entry.scan_id},
                            {"dims", {config.dims.d, config.dims.h, config.dims.w}},
                            {"dtype", "float32"},
                        };
                        io::save_json(config.out_dir / (entry.volume_path + ".json"), sidecar);
                    }
                }
                manifest.scans.push_back(std::move(entry));
            }
        }
    }

    if (to_disk) {
        std::string jsonl;
        for (const ScanEntry& e : manifest.scans) jsonl += record_to_json(e.record).dump() + "\n";
        io::write_text(config.out_dir / "metadata.jsonl", jsonl);
        io::save_json(config.out_dir / "manifest.json", manifest_to_json(manifest));
    }
    return manifest;
}

nlohmann::json record_to_json(const SubjectRecord& r) {
    nlohmann::json biomarkers;
    for (int k = 0; k < kNumBiomarkers; ++k)
        biomarkers[kBiomarkerKeys[static_cast<size_t>(k)]] = r.biomarkers[static_cast<size_t>(k)];
    return {
        {"subject_id", r.subject_id}, {"age", r.age},   {"sex", to_string(r.sex)},
        {"diagnosis", to_string(r.diagnosis)},          {"mmse", r.mmse},
        {"biomarkers", biomarkers},   {"seed", r.seed},
    };
}

SubjectRecord record_from_json(const nlohmann::json& j) {
    SubjectRecord r;
    r.subject_id = j.at("subject_id").get<std::string>();
    r.age = j.at("age").get<double>();
    r.sex = j.at("sex").get<std::string>() == "M" ? Sex::M : Sex::F;
    r.diagnosis = diagnosis_from_string(j.at("diagnosis").get<std::string>());
    r.mmse = j.at("mmse").get<int>();
    const auto& b = j.at("biomarkers");
    for (int k = 0; k < kNumBiomarkers; ++k)
        r.biomarkers[static_cast<size_t>(k)] = b.at(kBiomarkerKeys[static_cast<size_t>(k)]).get<double>();
    r.seed = j.at("seed").get<uint64_t>();
    return r;
}

nlohmann::json manifest_to_json(const CohortManifest& m) {
    nlohmann::json scans = nlohmann::json::array();
    nlohmann::json splits = {{"train", nlohmann::json::array()},
                             {"val", nlohmann::json::array()},
                             {"test", nlohmann::json::array()}};
    std::array<std::vector<std::string>, 3> split_subjects;
    for (const ScanEntry& e : m.scans) {
        scans.push_back({
            {"record", record_to_json(e.record)},
            {"scan_id", e.scan_id},
            {"volume", e.volume_path},
            {"report", e.report_path},
            {"split", to_string(e.split)},
        });
        auto& subs = split_subjects[static_cast<size_t>(e.split)];
        if (std::find(subs.begin(), subs.end(), e.record.subject_id) == subs.end())
            subs.push_back(e.record.subject_id);
    }
    splits["train"] = split_subjects[0];
    splits["val"] = split_subjects[1];
    splits["test"] = split_subjects[2];
    return {
        {"dims", {m.dims.d, m.dims.h, m.dims.w}},
        {"master_seed", m.master_seed},
        {"scans", scans},
        {"splits", splits},
    };
}

CohortManifest manifest_from_json(const nlohmann::json& j) {
    CohortManifest m;
    const auto& d = j.at("dims");
    m.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    m.master_seed = j.at("master_seed").get<uint64_t>();
    for (const auto& s : j.at("scans")) {
        ScanEntry e;
        e.record = record_from_json(s.at("record"));
        e.scan_id = s.at("scan_id").get<std::string>();
        e.volume_path = s.at("volume").get<std::string>();
        e.report_path = s.at("report").get<std::string>();
        std::string tag = s.at("split").get<std::string>();
        e.split = tag == "train" ? Split::Train : tag == "val" ? Split::Val : Split::Test;
        m.scans.push_back(std::move(e));
    }
    return m;
}

CohortManifest load_manifest(const std::filesystem::path& manifest_path) {
    return manifest_from_json(io::load_json(manifest_path));
}

Volume3D load_volume(const std::filesystem::path& manifest_dir, const ScanEntry& scan, Dims dims) {
    if (scan.volume_path.empty()) return render_volume(scan.record, dims);
    Volume3D v;
    v.voxels = io::read_f32(manifest_dir / scan.volume_path);
    nlohmann::json sidecar = io::load_json(manifest_dir / (scan.volume_path + ".json"));
    const auto& d = sidecar.at("dims");
    v.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    if (static_cast<long>(v.voxels.size()) != v.dims.total())
        throw IoError("volume size does not match sidecar dims: " + scan.volume_path);
    return v;
}

}  // namespace voxalign::cohort
