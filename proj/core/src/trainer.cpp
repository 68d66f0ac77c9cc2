#include "voxalign/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "voxalign/errors.hpp"
#include "voxalign/evalkit.hpp"
#include "voxalign/io.hpp"
#include "voxalign/model.hpp"
#include "voxalign/optim.hpp"
#include "voxalign/rng.hpp"

namespace voxalign::trainer {

namespace fs = std::filesystem;
using nlohmann::json;

SampleSet SampleSet::subset(const std::vector<size_t>& idx) const {
    SampleSet out;
    for (size_t i : idx) {
        out.entries.push_back(entries.at(i));
        out.volumes.push_back(volumes.at(i));
        out.tokens.push_back(tokens.at(i));
        out.mmse_norm.push_back(mmse_norm.at(i));
    }
    return out;
}

textkit::Vocab vocab_from_manifest(const cohort::CohortManifest& manifest) {
    std::vector<std::string> corpus;
    for (const cohort::ScanEntry* scan : manifest.split(cohort::Split::Train))
        corpus.push_back(textkit::render_report(scan->record));
    if (corpus.empty()) throw InvalidArgument("vocab_from_manifest: manifest has no train scans");
    return textkit::build_vocab(corpus);
}

SampleSet load_split(const config::Config& cfg, const cohort::CohortManifest& manifest,
                     const std::filesystem::path& manifest_dir, cohort::Split split,
                     const textkit::Vocab& vocab) {
    if (!(manifest.dims == cfg.vision.dims)) {
        std::ostringstream os;
        os << "load_split: cohort dims " << manifest.dims.d << "x" << manifest.dims.h << "x"
           << manifest.dims.w << " do not match vision.dims";
        throw InvalidArgument(os.str());
    }
    SampleSet set;
    for (const cohort::ScanEntry* scan : manifest.split(split)) {
        set.entries.push_back(*scan);
        set.volumes.push_back(cohort::load_volume(manifest_dir, *scan, manifest.dims));
        const std::string text = cfg.flags.report_supervision
                                     ? textkit::render_report(scan->record)
                                     : textkit::class_prompt(scan->record.diagnosis);
        set.tokens.push_back(textkit::tokenize(text, vocab, cfg.text.max_tokens));
        set.mmse_norm.push_back(model::normalize_mmse(scan->record.mmse));
    }
    return set;
}

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string num_str(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

struct BatchLoss {
    double total = 0, cl = 0, mmse = 0;
};

// Builds the batch graph, returns the loss values, and leaves trainable
// gradients in `grads` (sorted by name so downstream reductions have a fixed
// order).
BatchLoss batch_step(const config::Config& cfg, params::ParamStore& store, const SampleSet& data,
                     const std::vector<size_t>& order, size_t start, size_t end,
                     std::map<std::string, ad::Mat>& grads) {
    ad::Tape tape;
    model::Bound b(tape, store);
    std::vector<model::EncodedImage> imgs;
    std::vector<model::EncodedText> txts;
    std::vector<ad::Var> preds;
    std::vector<double> targets;
    imgs.reserve(end - start);
    txts.reserve(end - start);
    for (size_t k = start; k < end; ++k) {
        size_t i = order[k];
        imgs.push_back(model::encode_and_project_image(b, cfg, data.volumes[i]));
        txts.push_back(model::encode_and_project_text(b, cfg, data.tokens[i]));
        if (cfg.mmse_enabled()) {
            preds.push_back(imgs.back().mmse_pred);
            targets.push_back(data.mmse_norm[i]);
        }
    }
    ad::Var S = model::similarity_matrix(b, cfg, imgs, txts);
    ad::Var cl = model::contrastive_loss(b, cfg, S, b("tau"));
    ad::Var mmse;
    if (cfg.mmse_enabled()) mmse = model::mmse_loss(tape, preds, targets);
    ad::Var loss = model::total_loss(tape, cl, mmse, cfg.align.lambda);

    BatchLoss out;
    out.total = loss.scalar();
    out.cl = cl.scalar();
    out.mmse = mmse.valid() ? mmse.scalar() : 0.0;
    if (!std::isfinite(out.total)) return out;  // caller aborts; no backward

    tape.backward(loss);
    grads.clear();
    for (const params::ParamInfo& info : store.infos()) {
        if (!info.trainable || !b.bound(info.name)) continue;
        ad::Var v = b(info.name);
        if (tape.has_grad(v)) grads[info.name] = tape.grad(v);
    }
    return out;
}

void dump_divergence(const fs::path& out_dir, int epoch, size_t batch_index, long step,
                     double lr, const BatchLoss& bl, const params::ParamStore& store) {
    if (out_dir.empty()) return;
    json j;
    j["epoch"] = epoch;
    j["batch"] = batch_index;
    j["step"] = step;
    j["lr"] = lr;
    j["loss"] = num_str(bl.total);
    j["cl_loss"] = num_str(bl.cl);
    j["mmse_loss"] = num_str(bl.mmse);
    // Largest-magnitude entry per trainable tensor: enough to see which group blew up.
    json worst = json::object();
    for (const params::ParamInfo& info : store.infos()) {
        if (!info.trainable) continue;
        worst[info.name] = num_str(store.value(info.name).cwiseAbs().maxCoeff());
    }
    j["trainable_abs_max"] = worst;
    io::ensure_dir(out_dir);
    io::save_json(out_dir / "diverged.json", j);
}

}  // namespace

TrainResult train(const config::Config& cfg, params::ParamStore& store,
                  const textkit::Vocab& vocab, const SampleSet& train_set,
                  const SampleSet& val_set, const TrainOptions& opts) {
    cfg.validate();
    if (train_set.size() == 0) throw InvalidArgument("train: empty training set");
    // No validation split: metrics are reported on the train split, and the
    // plateau schedule watches training loss instead of accuracy — a handful
    // of samples gives accuracy too few distinct values to register the steady
    // progress that should keep the rate alive.
    const bool have_val = val_set.size() > 0;
    const SampleSet& val = have_val ? val_set : train_set;
    const config::TrainConfig& tc = cfg.train;

    optim::AdamW opt(tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    optim::PlateauScheduler sched(tc.lr, tc.plateau_patience, tc.plateau_factor,
                                  tc.plateau_min_delta);

    const bool artifacts = !opts.out_dir.empty();
    std::ofstream metrics;
    if (artifacts) {
        io::ensure_dir(opts.out_dir);
        metrics.open(opts.out_dir / "metrics.jsonl", std::ios::trunc);
        if (!metrics) throw IoError("train: cannot open metrics.jsonl under " + opts.out_dir.string());
    }

    TrainResult result;
    result.best_val_acc = -1.0;

    std::vector<size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::map<std::string, ad::Mat> grads;

    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        const double lr_used = sched.lr();
        rng::Stream shuf(rng::mix(tc.seed, rng::fnv1a("epoch-shuffle"), static_cast<uint64_t>(epoch)));
        shuf.shuffle(order);

        double sum_total = 0, sum_cl = 0, sum_mmse = 0;
        size_t batch_index = 0;
        for (size_t start = 0; start < order.size(); start += static_cast<size_t>(tc.batch_size)) {
            const size_t end = std::min(order.size(), start + static_cast<size_t>(tc.batch_size));
            BatchLoss bl = batch_step(cfg, store, train_set, order, start, end, grads);
            if (!std::isfinite(bl.total)) {
                dump_divergence(opts.out_dir, epoch, batch_index, result.steps, lr_used, bl, store);
                std::ostringstream os;
                os << "train: non-finite loss " << bl.total << " at epoch " << epoch << " batch "
                   << batch_index;
                if (artifacts) os << " (state dumped to " << (opts.out_dir / "diverged.json").string() << ")";
                throw TrainingDiverged(os.str());
            }
            const double n = static_cast<double>(end - start);
            sum_total += bl.total * n;
            sum_cl += bl.cl * n;
            sum_mmse += bl.mmse * n;
            optim::clip_global_norm(grads, tc.clip_norm);
            opt.step(store, grads, lr_used);
            ++result.steps;
            ++batch_index;
        }

        evalkit::EvalReport vr = evalkit::evaluate(cfg, store, vocab, val, tc.classes);

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = sum_total / static_cast<double>(order.size());
        stats.cl_loss = sum_cl / static_cast<double>(order.size());
        stats.mmse_loss = sum_mmse / static_cast<double>(order.size());
        stats.val_acc = vr.accuracy;
        stats.val_mmse_mae = vr.has_mmse ? vr.mmse_mae : 0.0;
        stats.lr = lr_used;
        result.history.push_back(stats);

        if (artifacts) {
            json line = {{"epoch", stats.epoch},         {"train_loss", stats.train_loss},
                         {"cl_loss", stats.cl_loss},     {"mmse_loss", stats.mmse_loss},
                         {"val_acc", stats.val_acc},     {"lr", stats.lr}};
            metrics << line.dump() << "\n";
            metrics.flush();
        }

        if (stats.val_acc > result.best_val_acc) {
            result.best_val_acc = stats.val_acc;
            result.best_epoch = epoch;
            if (artifacts && opts.save_best_checkpoint) {
                result.checkpoint_dir = opts.out_dir / "checkpoint";
                save_checkpoint(cfg, store, vocab, result.checkpoint_dir, epoch, stats);
            }
        }

        sched.observe(have_val ? stats.val_acc : -stats.train_loss);
        result.lr_cuts = sched.cuts();

        if (opts.stop_when && opts.stop_when(stats)) break;
    }
    return result;
}

void save_checkpoint(const config::Config& cfg, const params::ParamStore& store,
                     const textkit::Vocab& vocab, const std::filesystem::path& dir, int epoch,
                     const EpochStats& stats) {
    io::ensure_dir(dir);
    json manifest;
    manifest["format"] = "voxalign-checkpoint-v1";
    manifest["config"] = config::to_json(cfg);
    manifest["config_hash"] = hex64(config::config_hash(cfg));
    manifest["epoch"] = epoch;
    manifest["metrics"] = {{"train_loss", stats.train_loss}, {"cl_loss", stats.cl_loss},
                           {"mmse_loss", stats.mmse_loss},   {"val_acc", stats.val_acc},
                           {"lr", stats.lr}};
    manifest["vocab_file"] = "vocab.json";
    json entries = json::array();
    for (const params::ParamInfo& info : store.infos()) {
        const std::string fname = info.name + ".bin";
        io::write_matrix_f64(dir / fname, store.value(info.name));
        entries.push_back({{"name", info.name},
                           {"rows", info.rows},
                           {"cols", info.cols},
                           {"file", fname},
                           {"fnv64", hex64(io::fnv64_file(dir / fname))}});
    }
    manifest["params"] = entries;
    io::save_json(dir / "vocab.json", vocab.to_json());
    io::save_json(dir / "manifest.json", manifest);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir) {
    try {
        const json manifest = io::load_json(dir / "manifest.json");
        if (manifest.at("format").get<std::string>() != "voxalign-checkpoint-v1")
            throw CorruptCheckpoint("load_checkpoint: unrecognized format tag");
        config::Config cfg = config::from_json(manifest.at("config"));
        cfg.validate();
        if (hex64(config::config_hash(cfg)) != manifest.at("config_hash").get<std::string>())
            throw CorruptCheckpoint("load_checkpoint: config hash mismatch");

        textkit::Vocab vocab =
            textkit::Vocab::from_json(io::load_json(dir / manifest.at("vocab_file").get<std::string>()));
        if (vocab.size() != cfg.text.vocab_size)
            throw CorruptCheckpoint("load_checkpoint: vocabulary size disagrees with config");

        params::ParamStore store(params::enumerate_params(cfg));
        const json& entries = manifest.at("params");
        if (entries.size() != store.infos().size())
            throw CorruptCheckpoint("load_checkpoint: parameter count mismatch");
        std::map<std::string, const json*> by_name;
        for (const json& e : entries) by_name[e.at("name").get<std::string>()] = &e;
        if (by_name.size() != entries.size())
            throw CorruptCheckpoint("load_checkpoint: duplicate parameter entry");
        for (const params::ParamInfo& info : store.infos()) {
            auto it = by_name.find(info.name);
            if (it == by_name.end())
                throw CorruptCheckpoint("load_checkpoint: missing parameter " + info.name);
            const json& e = *it->second;
            if (e.at("rows").get<long>() != info.rows || e.at("cols").get<long>() != info.cols)
                throw CorruptCheckpoint("load_checkpoint: shape mismatch for " + info.name);
            const fs::path file = dir / e.at("file").get<std::string>();
            if (hex64(io::fnv64_file(file)) != e.at("fnv64").get<std::string>())
                throw CorruptCheckpoint("load_checkpoint: content hash mismatch for " + info.name);
            store.value(info.name) = io::read_matrix_f64(file, info.rows, info.cols);
        }
        const int epoch = manifest.at("epoch").get<int>();
        return LoadedCheckpoint{std::move(cfg), std::move(store), std::move(vocab), epoch};
    } catch (const CorruptCheckpoint&) {
        throw;
    } catch (const Error& e) {
        throw CorruptCheckpoint(std::string("load_checkpoint: ") + e.what());
    } catch (const json::exception& e) {
        throw CorruptCheckpoint(std::string("load_checkpoint: malformed manifest: ") + e.what());
    }
}

}  // namespace voxalign::trainer
