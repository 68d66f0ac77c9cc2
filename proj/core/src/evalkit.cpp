#include "voxalign/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "voxalign/errors.hpp"
#include "voxalign/io.hpp"
#include "voxalign/model.hpp"
#include "voxalign/rng.hpp"

namespace voxalign::evalkit {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_classes(const std::vector<cohort::Diagnosis>& classes) {
    if (classes.size() < 2)
        throw InvalidArgument("evalkit: classification needs at least 2 classes");
    for (size_t i = 0; i < classes.size(); ++i)
        for (size_t j = i + 1; j < classes.size(); ++j)
            if (classes[i] == classes[j])
                throw InvalidArgument("evalkit: duplicate class in class list");
}

// Defensive re-normalization: encoder outputs are unit rows already, but the
// decision must not depend on the caller's scaling.
Mat unit_rows(const Mat& m) {
    Mat out = m;
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
        const double n = out.row(r).norm();
        if (!(n > 1e-12)) throw DegenerateVector("evalkit: zero-norm feature row");
        out.row(r) /= n;
    }
    return out;
}

int index_of(const std::vector<cohort::Diagnosis>& classes, cohort::Diagnosis d) {
    for (size_t i = 0; i < classes.size(); ++i)
        if (classes[i] == d) return static_cast<int>(i);
    return -1;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

}  // namespace

PromptBank encode_prompts(const config::Config& cfg, params::ParamStore& store,
                          const textkit::Vocab& vocab,
                          const std::vector<cohort::Diagnosis>& classes) {
    check_classes(classes);
    PromptBank bank;
    bank.classes = classes;
    for (cohort::Diagnosis d : classes) {
        const std::vector<int> ids =
            textkit::tokenize(textkit::class_prompt(d), vocab, cfg.text.max_tokens);
        ad::Tape tape;
        model::Bound b(tape, store);
        model::EncodedText enc = model::encode_and_project_text(b, cfg, ids);
        bank.w.push_back(enc.w.val());
        bank.token_feats.push_back(cfg.cross_attention_enabled() ? enc.token_feats.val() : Mat());
    }
    return bank;
}

ClassScores classify(const config::Config& cfg, params::ParamStore& store, const PromptBank& bank,
                     const cohort::Volume3D& volume) {
    check_classes(bank.classes);
    ad::Tape tape;
    model::Bound b(tape, store);
    model::EncodedImage img = model::encode_and_project_image(b, cfg, volume);

    ClassScores out;
    out.has_mmse = img.mmse_pred.valid();
    if (out.has_mmse) out.mmse_raw = model::denormalize_mmse(img.mmse_pred.scalar());

    const bool cross = cfg.cross_attention_enabled();
    const Mat v = unit_rows(img.v.val());
    for (size_t c = 0; c < bank.classes.size(); ++c) {
        double s;
        if (cross) {
            model::EncodedText et;
            et.w = tape.constant(unit_rows(bank.w[c]));
            et.token_feats = tape.constant(unit_rows(bank.token_feats[c]));
            s = model::pair_similarity(b, cfg, img, et).scalar();
        } else {
            s = (v * unit_rows(bank.w[c]).transpose())(0, 0);
        }
        out.scores.push_back(s);
    }
    out.predicted = 0;
    for (size_t c = 1; c < out.scores.size(); ++c)
        if (out.scores[c] > out.scores[static_cast<size_t>(out.predicted)])
            out.predicted = static_cast<int>(c);
    return out;
}

ClassScores zero_shot_classify(const config::Config& cfg, params::ParamStore& store,
                               const textkit::Vocab& vocab, const cohort::Volume3D& volume,
                               const std::vector<cohort::Diagnosis>& classes) {
    const PromptBank bank = encode_prompts(cfg, store, vocab, classes);
    return classify(cfg, store, bank, volume);
}

json EvalReport::to_json(const std::vector<cohort::Diagnosis>& classes) const {
    json j;
    j["n"] = n;
    j["accuracy"] = accuracy;
    json names = json::array();
    for (cohort::Diagnosis d : classes) names.push_back(cohort::to_string(d));
    j["classes"] = names;
    j["class_counts"] = class_counts;
    j["per_class_recall"] = per_class_recall;
    j["confusion"] = confusion;
    if (has_mmse) {
        j["mmse_mae"] = mmse_mae;
        j["mmse_rmse"] = mmse_rmse;
    }
    return j;
}

EvalReport evaluate(const config::Config& cfg, params::ParamStore& store,
                    const textkit::Vocab& vocab, const trainer::SampleSet& set,
                    const std::vector<cohort::Diagnosis>& classes) {
    const PromptBank bank = encode_prompts(cfg, store, vocab, classes);
    const size_t k = classes.size();

    EvalReport rep;
    rep.class_counts.assign(k, 0);
    rep.per_class_recall.assign(k, 0.0);
    rep.confusion.assign(k, std::vector<long>(k, 0));

    double abs_sum = 0, sq_sum = 0;
    long correct = 0, mmse_n = 0;
    for (size_t i = 0; i < set.size(); ++i) {
        const int t = index_of(classes, set.entries[i].record.diagnosis);
        if (t < 0) continue;  // outside the evaluated class list
        const ClassScores cs = classify(cfg, store, bank, set.volumes[i]);
        ++rep.n;
        ++rep.class_counts[static_cast<size_t>(t)];
        ++rep.confusion[static_cast<size_t>(t)][static_cast<size_t>(cs.predicted)];
        if (cs.predicted == t) ++correct;
        if (cs.has_mmse) {
            const double err = cs.mmse_raw - static_cast<double>(set.entries[i].record.mmse);
            abs_sum += std::abs(err);
            sq_sum += err * err;
            ++mmse_n;
        }
    }
    if (rep.n == 0) throw InvalidArgument("evaluate: no samples match the class list");
    rep.accuracy = static_cast<double>(correct) / static_cast<double>(rep.n);
    for (size_t c = 0; c < k; ++c)
        if (rep.class_counts[c] > 0)
            rep.per_class_recall[c] = static_cast<double>(rep.confusion[c][c]) /
                                      static_cast<double>(rep.class_counts[c]);
    if (mmse_n > 0) {
        rep.has_mmse = true;
        rep.mmse_mae = abs_sum / static_cast<double>(mmse_n);
        rep.mmse_rmse = std::sqrt(sq_sum / static_cast<double>(mmse_n));
    }
    return rep;
}

std::vector<SweepRow> sweep(const config::Config& cfg, const cohort::CohortManifest& manifest,
                            const std::filesystem::path& manifest_dir,
                            const std::vector<int>& sizes, const std::filesystem::path& out_dir) {
    if (sizes.empty()) throw InvalidArgument("sweep: no sample sizes given");

    textkit::Vocab vocab = trainer::vocab_from_manifest(manifest);
    config::Config c = cfg;
    c.text.vocab_size = vocab.size();
    c.validate();

    const trainer::SampleSet train_full = trainer::load_split(c, manifest, manifest_dir,
                                                              cohort::Split::Train, vocab);
    const trainer::SampleSet val = trainer::load_split(c, manifest, manifest_dir,
                                                       cohort::Split::Val, vocab);
    const trainer::SampleSet test = trainer::load_split(c, manifest, manifest_dir,
                                                        cohort::Split::Test, vocab);
    if (test.size() == 0) throw InvalidArgument("sweep: manifest has no test scans");
    for (int n : sizes)
        if (n < 1 || static_cast<size_t>(n) > train_full.size())
            throw InvalidArgument("sweep: sample size " + std::to_string(n) +
                                  " outside the train split (" + std::to_string(train_full.size()) + ")");

    // One shuffle shared across sizes, so smaller samples nest in larger ones.
    std::vector<size_t> order(train_full.size());
    std::iota(order.begin(), order.end(), 0);
    rng::Stream shuf(rng::mix(c.train.seed, rng::fnv1a("sweep-subsample")));
    shuf.shuffle(order);

    std::vector<SweepRow> rows;
    for (int n : sizes) {
        const std::vector<size_t> prefix(order.begin(), order.begin() + n);
        const trainer::SampleSet part = train_full.subset(prefix);
        params::ParamStore store(params::enumerate_params(c));
        store.init(c.train.seed);
        trainer::TrainOptions topts;
        if (!out_dir.empty()) topts.out_dir = out_dir / ("n" + std::to_string(n));
        trainer::train(c, store, vocab, part, val, topts);
        SweepRow row;
        row.n = n;
        row.accuracy = evaluate(c, store, vocab, test, c.train.classes).accuracy;
        rows.push_back(row);
    }
    if (!out_dir.empty()) {
        io::ensure_dir(out_dir);
        io::write_text(out_dir / "sweep.csv", sweep_csv(rows));
    }
    return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "n,accuracy\n";
    for (const SweepRow& r : rows) os << r.n << "," << fmt(r.accuracy) << "\n";
    return os.str();
}

std::vector<std::pair<std::string, config::AblationFlags>> ablation_rows() {
    using F = config::AblationFlags;
    return {
        {"a", F{false, false, false, false, false}},
        {"b1", F{true, false, false, false, false}},
        {"b2", F{false, true, false, false, false}},
        {"b3", F{true, true, false, false, false}},
        {"c1", F{false, false, true, false, false}},
        {"c2", F{false, false, false, true, false}},
        {"c3", F{false, false, true, true, false}},
        {"d", F{true, true, true, true, false}},
        {"e", F{true, true, true, true, true}},
    };
}

std::vector<AblateRow> ablate(const config::Config& cfg, const cohort::CohortManifest& manifest,
                              const std::filesystem::path& manifest_dir,
                              const std::filesystem::path& out_dir) {
    textkit::Vocab vocab = trainer::vocab_from_manifest(manifest);

    // evaluate never reads supervision tokens, so one test load serves all rows.
    config::Config base = cfg;
    base.text.vocab_size = vocab.size();
    const trainer::SampleSet test =
        trainer::load_split(base, manifest, manifest_dir, cohort::Split::Test, vocab);
    if (test.size() == 0) throw InvalidArgument("ablate: manifest has no test scans");

    std::vector<AblateRow> rows;
    for (const auto& [label, flags] : ablation_rows()) {
        config::Config c = base;
        c.flags = flags;
        c.validate();

        params::ParamStore store(params::enumerate_params(c));
        store.init(c.train.seed);
        if (label != "a") {  // row (a) is the untrained zero-shot baseline
            const trainer::SampleSet train_set =
                trainer::load_split(c, manifest, manifest_dir, cohort::Split::Train, vocab);
            const trainer::SampleSet val =
                trainer::load_split(c, manifest, manifest_dir, cohort::Split::Val, vocab);
            trainer::TrainOptions topts;
            if (!out_dir.empty()) topts.out_dir = out_dir / ("row_" + label);
            trainer::train(c, store, vocab, train_set, val, topts);
        }

        AblateRow row;
        row.label = label;
        row.flags = flags;
        row.accuracy = evaluate(c, store, vocab, test, c.train.classes).accuracy;
        rows.push_back(row);
    }
    if (!out_dir.empty()) {
        io::ensure_dir(out_dir);
        io::write_text(out_dir / "ablate.csv", ablate_csv(rows));
        json j = json::array();
        for (const AblateRow& r : rows)
            j.push_back({{"row", r.label},
                         {"visual_prompts", r.flags.visual_prompts},
                         {"mmse_token", r.flags.mmse_token},
                         {"text_prompts", r.flags.text_prompts},
                         {"report_supervision", r.flags.report_supervision},
                         {"cross_attention", r.flags.cross_attention},
                         {"accuracy", r.accuracy}});
        io::save_json(out_dir / "ablate.json", j);
    }
    return rows;
}

std::string ablate_csv(const std::vector<AblateRow>& rows) {
    std::ostringstream os;
    os << "row,visual_prompts,mmse_token,text_prompts,report_supervision,cross_attention,accuracy\n";
    for (const AblateRow& r : rows) {
        os << r.label << "," << int(r.flags.visual_prompts) << "," << int(r.flags.mmse_token) << ","
           << int(r.flags.text_prompts) << "," << int(r.flags.report_supervision) << ","
           << int(r.flags.cross_attention) << "," << fmt(r.accuracy) << "\n";
    }
    return os.str();
}

}  // namespace voxalign::evalkit
