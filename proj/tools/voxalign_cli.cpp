// voxalign — command-line front end for the cohort/train/eval/attribution
// pipelines. One command per process; every command prints a single JSON
// line on success and a single JSON error line on stderr otherwise.
// Exit codes: 0 ok, 2 usage, 3 bad config, 1 runtime failure.
#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "voxalign/cohort.hpp"
#include "voxalign/config.hpp"
#include "voxalign/errors.hpp"
#include "voxalign/evalkit.hpp"
#include "voxalign/interpret.hpp"
#include "voxalign/io.hpp"
#include "voxalign/params.hpp"
#include "voxalign/textkit.hpp"
#include "voxalign/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace voxalign;

namespace {

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string one_line(std::string s) {
    for (char& c : s)
        if (c == '\n' || c == '\r') c = ' ';
    return s;
}

void emit(const json& j) { std::cout << j.dump() << "\n"; }

std::vector<cohort::Diagnosis> parse_classes(const std::string& spec) {
    std::vector<cohort::Diagnosis> out;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) throw ConfigError("--classes: empty entry in '" + spec + "'");
        out.push_back(cohort::diagnosis_from_string(cur));
        cur.clear();
    };
    for (char c : spec) {
        if (c == ',')
            flush();
        else
            cur += c;
    }
    flush();
    return out;
}

std::vector<int> parse_sizes(const std::string& spec) {
    std::vector<int> out;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) throw ConfigError("--sizes: empty entry in '" + spec + "'");
        out.push_back(std::stoi(cur));
        cur.clear();
    };
    for (char c : spec) {
        if (c == ',')
            flush();
        else
            cur += c;
    }
    flush();
    return out;
}

// Shared model/config flags. Resolution order: preset defaults, then the
// config file, then explicit flags.
struct ModelFlags {
    std::string config_path;
    std::string preset = "desk";
    std::string peft, prompt_mode, temp_mode, classes;
    uint64_t seed = 0;
    double lambda = 0.0;
    CLI::Option *o_seed = nullptr, *o_lambda = nullptr, *o_peft = nullptr, *o_prompt = nullptr,
                *o_temp = nullptr, *o_classes = nullptr;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file (strict schema)");
        cmd->add_option("--preset", preset, "Base preset before file/flag overrides")
            ->check(CLI::IsMember({"desk", "paper", "tiny"}))
            ->capture_default_str();
        o_seed = cmd->add_option("--seed", seed, "Master seed override");
        o_lambda = cmd->add_option("--lambda", lambda, "Contrastive/regression loss mix");
        o_peft = cmd->add_option("--peft", peft, "Tuning strategy")
                     ->check(CLI::IsMember({"prompt", "lora", "adapter"}));
        o_prompt = cmd->add_option("--prompt-mode", prompt_mode, "Prompt insertion depth")
                       ->check(CLI::IsMember({"deep", "shallow"}));
        o_temp = cmd->add_option("--temp-mode", temp_mode, "Temperature application")
                     ->check(CLI::IsMember({"divide", "multiply"}));
        o_classes = cmd->add_option("--classes", classes, "Comma list, e.g. NC,MCI,AD");
    }

    config::Config resolve() const {
        config::Config base = config::preset(preset);
        config::Config cfg = base;
        if (!config_path.empty()) {
            json j;
            try {
                j = io::load_json(config_path);
            } catch (const std::exception& e) {
                throw ConfigError(std::string("config file: ") + e.what());
            }
            cfg = config::from_json(j, base);
        }
        if (o_seed->count()) cfg.train.seed = seed;
        if (o_lambda->count()) cfg.align.lambda = lambda;
        if (o_peft->count()) cfg.peft.kind = config::peft_from_string(peft);
        if (o_prompt->count()) cfg.prompt_mode = config::prompt_mode_from_string(prompt_mode);
        if (o_temp->count()) cfg.align.temp_mode = config::temp_mode_from_string(temp_mode);
        if (o_classes->count()) cfg.train.classes = parse_classes(classes);
        return cfg;
    }
};

void write_resolved(const config::Config& cfg, const fs::path& out) {
    fs::create_directories(out);
    io::save_json(out / "config.json", config::to_json(cfg));
}

cohort::CohortManifest load_data(const fs::path& dir) {
    return cohort::load_manifest(dir / "manifest.json");
}

// Accepts either the checkpoint directory itself or a train --out directory
// that contains one.
fs::path find_checkpoint(const fs::path& given) {
    if (fs::exists(given / "manifest.json")) return given;
    if (fs::exists(given / "checkpoint" / "manifest.json")) return given / "checkpoint";
    throw IoError("no checkpoint manifest under " + given.string());
}

fs::path data_dir_for(const config::Config& cfg, const std::string& flag_value) {
    if (!flag_value.empty()) return flag_value;
    if (!cfg.train.data_dir.empty()) return cfg.train.data_dir;
    throw ConfigError("no data directory: pass --data or set train.data_dir");
}

const cohort::ScanEntry& find_scan(const cohort::CohortManifest& m, const std::string& id) {
    for (const auto& s : m.scans)
        if (s.scan_id == id) return s;
    throw InvalidArgument("scan '" + id + "' not found in manifest");
}

textkit::Vocab vocab_for(config::Config& cfg, const cohort::CohortManifest& manifest) {
    textkit::Vocab vocab = trainer::vocab_from_manifest(manifest);
    if (cfg.text.vocab_size == 0)
        cfg.text.vocab_size = vocab.size();
    else if (cfg.text.vocab_size != vocab.size())
        throw ConfigError("config vocab_size " + std::to_string(cfg.text.vocab_size) +
                          " != built vocabulary " + std::to_string(vocab.size()));
    return vocab;
}

int run_gen_data(const ModelFlags& mf, const std::string& out) {
    config::Config cfg = mf.resolve();
    auto cc = cfg.cohort_gen.to_cohort_config(cfg.vision.dims, cfg.train.seed, out);
    auto manifest = cohort::gen_cohort(cc);
    write_resolved(cfg, out);
    json counts;
    for (auto s : {cohort::Split::Train, cohort::Split::Val, cohort::Split::Test})
        counts[cohort::to_string(s)] = manifest.split(s).size();
    emit({{"command", "gen-data"},
          {"out", out},
          {"scans", manifest.scans.size()},
          {"splits", counts},
          {"volumes_written", cc.write_volumes}});
    return 0;
}

int run_train(const ModelFlags& mf, const std::string& data, const std::string& out) {
    config::Config cfg = mf.resolve();
    fs::path dir = data_dir_for(cfg, data);
    cfg.train.data_dir = dir.string();
    auto manifest = load_data(dir);
    auto vocab = vocab_for(cfg, manifest);
    cfg.validate();
    write_resolved(cfg, out);

    auto train_set = trainer::load_split(cfg, manifest, dir, cohort::Split::Train, vocab);
    auto val_set = trainer::load_split(cfg, manifest, dir, cohort::Split::Val, vocab);
    params::ParamStore store(params::enumerate_params(cfg));
    store.init(cfg.train.seed);
    auto counts = params::count_params(store.infos());

    trainer::TrainOptions opts;
    opts.out_dir = out;
    auto res = trainer::train(cfg, store, vocab, train_set, val_set, opts);
    emit({{"command", "train"},
          {"out", out},
          {"epochs", res.history.size()},
          {"steps", res.steps},
          {"best_epoch", res.best_epoch},
          {"best_val_acc", res.best_val_acc},
          {"lr_cuts", res.lr_cuts},
          {"params_total", counts.total},
          {"params_trainable", counts.trainable},
          {"checkpoint", res.checkpoint_dir.string()}});
    return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, const std::string& split,
             const std::string& classes, const std::string& out) {
    auto lc = trainer::load_checkpoint(find_checkpoint(ckpt));
    if (!classes.empty()) lc.cfg.train.classes = parse_classes(classes);
    fs::path dir = data_dir_for(lc.cfg, data);
    auto manifest = load_data(dir);
    cohort::Split sp = split == "train"  ? cohort::Split::Train
                       : split == "val" ? cohort::Split::Val
                                        : cohort::Split::Test;
    auto set = trainer::load_split(lc.cfg, manifest, dir, sp, lc.vocab);
    auto rep = evalkit::evaluate(lc.cfg, lc.store, lc.vocab, set, lc.cfg.train.classes);
    json j = rep.to_json(lc.cfg.train.classes);
    j["command"] = "eval";
    j["split"] = split;
    j["checkpoint_epoch"] = lc.epoch;
    if (!out.empty()) {
        write_resolved(lc.cfg, out);
        io::save_json(fs::path(out) / "eval.json", j);
    }
    emit(j);
    return 0;
}

int run_sweep(const ModelFlags& mf, const std::string& data, const std::string& sizes,
              const std::string& out) {
    config::Config cfg = mf.resolve();
    fs::path dir = data_dir_for(cfg, data);
    cfg.train.data_dir = dir.string();
    auto manifest = load_data(dir);
    auto rows = evalkit::sweep(cfg, manifest, dir, parse_sizes(sizes), out);
    write_resolved(cfg, out);
    json jr = json::array();
    for (const auto& r : rows) jr.push_back({{"n", r.n}, {"accuracy", r.accuracy}});
    emit({{"command", "sweep"}, {"out", out}, {"rows", jr}});
    return 0;
}

int run_ablate(const ModelFlags& mf, const std::string& data, const std::string& out) {
    config::Config cfg = mf.resolve();
    fs::path dir = data_dir_for(cfg, data);
    cfg.train.data_dir = dir.string();
    auto manifest = load_data(dir);
    auto rows = evalkit::ablate(cfg, manifest, dir, out);
    write_resolved(cfg, out);
    json jr = json::array();
    for (const auto& r : rows) jr.push_back({{"row", r.label}, {"accuracy", r.accuracy}});
    emit({{"command", "ablate"}, {"out", out}, {"rows", jr}});
    return 0;
}

int run_attribute(const std::string& ckpt, const std::string& data, const std::string& scan,
                  int steps, int top_k, const std::string& out) {
    auto lc = trainer::load_checkpoint(find_checkpoint(ckpt));
    fs::path dir = data_dir_for(lc.cfg, data);
    auto manifest = load_data(dir);
    const auto& entry = find_scan(manifest, scan);
    auto volume = cohort::load_volume(dir, entry, lc.cfg.vision.dims);
    std::string report = textkit::render_report(entry.record);
    auto ids = textkit::tokenize(report, lc.vocab, lc.cfg.text.max_tokens);
    auto attr = interpret::integrated_gradients(lc.cfg, lc.store, lc.vocab, ids, volume, steps);
    json j = interpret::attribution_to_json(attr, top_k);
    j["command"] = "attribute";
    j["scan"] = scan;
    j["steps"] = steps;
    if (!out.empty()) {
        write_resolved(lc.cfg, out);
        io::save_json(fs::path(out) / "attribution.json", j);
    }
    json brief = {{"command", "attribute"},
                  {"scan", scan},
                  {"steps", steps},
                  {"completeness_residual", attr.completeness_residual},
                  {"top_k", j["top_k"]}};
    emit(brief);
    return 0;
}

int run_heatmap(const std::string& ckpt, const std::string& data, const std::string& scan,
                const std::string& keep, const std::string& layer, int pgm_slice,
                const std::string& out) {
    auto lc = trainer::load_checkpoint(find_checkpoint(ckpt));
    fs::path dir = data_dir_for(lc.cfg, data);
    auto manifest = load_data(dir);
    const auto& entry = find_scan(manifest, scan);
    auto volume = cohort::load_volume(dir, entry, lc.cfg.vision.dims);
    std::string report = textkit::render_report(entry.record);
    if (!keep.empty()) report = interpret::mask_biomarkers(report, keep);
    auto ids = textkit::tokenize(report, lc.vocab, lc.cfg.text.max_tokens);
    auto hl = layer == "input" ? interpret::HeatmapLayer::Input : interpret::HeatmapLayer::Final;
    auto hm = interpret::patch_heatmap(lc.cfg, lc.store, ids, volume, hl, keep);
    interpret::save_heatmap(hm, out, "heatmap");
    write_resolved(lc.cfg, out);
    json j = {{"command", "heatmap"},
              {"out", out},
              {"scan", scan},
              {"layer", layer},
              {"grid", {hm.grid.d, hm.grid.h, hm.grid.w}},
              {"biomarker", keep}};
    if (pgm_slice >= 0) {
        fs::path pgm = fs::path(out) / ("heatmap_z" + std::to_string(pgm_slice) + ".pgm");
        interpret::write_pgm_slice(hm, pgm_slice, pgm);
        j["pgm"] = pgm.string();
    }
    emit(j);
    return 0;
}

int run_inspect(const std::string& path) {
    fs::path p = path;
    fs::path manifest = fs::is_directory(p) ? p / "manifest.json" : p;
    if (!fs::exists(manifest) && fs::is_directory(p) && fs::exists(p / "checkpoint/manifest.json"))
        manifest = p / "checkpoint/manifest.json";
    if (!fs::exists(manifest)) throw IoError("nothing to inspect at " + path);
    json j = io::load_json(manifest);

    if (j.contains("format")) {  // checkpoint
        auto cfg = config::from_json(j.at("config"));
        auto counts = params::count_params(params::enumerate_params(cfg));
        emit({{"type", "checkpoint"},
              {"format", j.at("format")},
              {"epoch", j.at("epoch")},
              {"config_hash", j.at("config_hash")},
              {"metrics", j.at("metrics")},
              {"params_total", counts.total},
              {"params_trainable", counts.trainable},
              {"trainable_fraction", counts.trainable_fraction()}});
        return 0;
    }
    if (j.contains("scans")) {  // cohort manifest
        auto m = cohort::manifest_from_json(j);
        json by_split, by_class;
        for (auto s : {cohort::Split::Train, cohort::Split::Val, cohort::Split::Test})
            by_split[cohort::to_string(s)] = m.split(s).size();
        for (auto d : cohort::kAllDiagnoses) {
            long n = 0;
            for (const auto& e : m.scans) n += e.record.diagnosis == d;
            by_class[cohort::to_string(d)] = n;
        }
        emit({{"type", "cohort"},
              {"scans", m.scans.size()},
              {"dims", {m.dims.d, m.dims.h, m.dims.w}},
              {"master_seed", m.master_seed},
              {"splits", by_split},
              {"classes", by_class}});
        return 0;
    }
    if (j.contains("formula")) {  // heatmap sidecar
        emit({{"type", "heatmap"},
              {"dims", j.at("dims")},
              {"biomarker", j.at("biomarker")},
              {"formula", j.at("formula")}});
        return 0;
    }
    // last resort: a bare config file
    auto cfg = config::from_json(j);
    emit({{"type", "config"}, {"config_hash", hex64(config::config_hash(cfg))}});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"3D scan / report alignment pipelines"};
    app.require_subcommand(1);

    ModelFlags gen_mf, train_mf, sweep_mf, ablate_mf;
    std::string out, data, ckpt, scan, split = "test", classes, keep, layer = "final", sizes;
    std::string inspect_path;
    int steps = 256, top_k = 3, pgm_slice = -1;

    auto* c_gen = app.add_subcommand("gen-data", "Generate a synthetic cohort");
    gen_mf.attach(c_gen);
    c_gen->add_option("--out", out, "Output directory")->required();
    c_gen->callback([&] { run_gen_data(gen_mf, out); });

    auto* c_train = app.add_subcommand("train", "Fit the alignment model");
    train_mf.attach(c_train);
    c_train->add_option("--data", data, "Cohort directory (overrides train.data_dir)");
    c_train->add_option("--out", out, "Output directory")->required();
    c_train->callback([&] { run_train(train_mf, data, out); });

    auto* c_eval = app.add_subcommand("eval", "Zero-shot metrics from a checkpoint");
    c_eval->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
    c_eval->add_option("--data", data, "Cohort directory (defaults to the recorded one)");
    c_eval->add_option("--split", split, "Evaluation split")
        ->check(CLI::IsMember({"train", "val", "test"}))
        ->capture_default_str();
    c_eval->add_option("--classes", classes, "Comma list, e.g. NC,AD");
    c_eval->add_option("--out", out, "Optional output directory for eval.json");
    c_eval->callback([&] { run_eval(ckpt, data, split, classes, out); });

    auto* c_sweep = app.add_subcommand("sweep", "Accuracy vs training-set size");
    sweep_mf.attach(c_sweep);
    c_sweep->add_option("--data", data, "Cohort directory (overrides train.data_dir)");
    c_sweep->add_option("--sizes", sizes, "Comma list of train subset sizes")->required();
    c_sweep->add_option("--out", out, "Output directory")->required();
    c_sweep->callback([&] { run_sweep(sweep_mf, data, sizes, out); });

    auto* c_ablate = app.add_subcommand("ablate", "Component on/off grid");
    ablate_mf.attach(c_ablate);
    c_ablate->add_option("--data", data, "Cohort directory (overrides train.data_dir)");
    c_ablate->add_option("--out", out, "Output directory")->required();
    c_ablate->callback([&] { run_ablate(ablate_mf, data, out); });

    auto* c_attr = app.add_subcommand("attribute", "Token attributions for one scan");
    c_attr->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
    c_attr->add_option("--data", data, "Cohort directory (defaults to the recorded one)");
    c_attr->add_option("--scan", scan, "Scan id from the manifest")->required();
    c_attr->add_option("--steps", steps, "Integration steps")->capture_default_str();
    c_attr->add_option("--top-k", top_k, "Tokens to rank")->capture_default_str();
    c_attr->add_option("--out", out, "Optional output directory for attribution.json");
    c_attr->callback([&] { run_attribute(ckpt, data, scan, steps, top_k, out); });

    auto* c_heat = app.add_subcommand("heatmap", "Patch-grid relevance for one scan");
    c_heat->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
    c_heat->add_option("--data", data, "Cohort directory (defaults to the recorded one)");
    c_heat->add_option("--scan", scan, "Scan id from the manifest")->required();
    c_heat->add_option("--keep", keep, "Biomarker clause to keep; others masked");
    c_heat->add_option("--layer", layer, "Gradient tap point")
        ->check(CLI::IsMember({"final", "input"}))
        ->capture_default_str();
    c_heat->add_option("--pgm-slice", pgm_slice, "Axial grid slice to export as PGM (-1 = none)")
        ->capture_default_str();
    c_heat->add_option("--out", out, "Output directory")->required();
    c_heat->callback([&] { run_heatmap(ckpt, data, scan, keep, layer, pgm_slice, out); });

    auto* c_inspect = app.add_subcommand("inspect", "Summarize an artifact directory or file");
    c_inspect->add_option("path", inspect_path, "Checkpoint, cohort, heatmap, or config")
        ->required();
    c_inspect->callback([&] { run_inspect(inspect_path); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << json({{"error", "usage"}, {"message", one_line(e.what())}}).dump() << "\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << json({{"error", "config"}, {"message", one_line(e.what())}}).dump() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << json({{"error", "runtime"}, {"message", one_line(e.what())}}).dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << json({{"error", "internal"}, {"message", one_line(e.what())}}).dump() << "\n";
        return 1;
    }
    return 0;
}
