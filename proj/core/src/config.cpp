#include "voxalign/config.hpp"

#include <cmath>

#include "voxalign/errors.hpp"
#include "voxalign/io.hpp"

namespace voxalign::config {

using nlohmann::json;

std::string to_string(PeftKind k) {
    switch (k) {
        case PeftKind::Prompt: return "prompt";
        case PeftKind::Lora: return "lora";
        case PeftKind::Adapter: return "adapter";
    }
    throw ConfigError("bad peft kind value");
}
std::string to_string(PromptMode m) { return m == PromptMode::Deep ? "deep" : "shallow"; }
std::string to_string(TempMode m) { return m == TempMode::Divide ? "divide" : "multiply"; }

PeftKind peft_from_string(const std::string& s) {
    if (s == "prompt") return PeftKind::Prompt;
    if (s == "lora") return PeftKind::Lora;
    if (s == "adapter") return PeftKind::Adapter;
    throw ConfigError("peft must be prompt|lora|adapter, got: " + s);
}
PromptMode prompt_mode_from_string(const std::string& s) {
    if (s == "deep") return PromptMode::Deep;
    if (s == "shallow") return PromptMode::Shallow;
    throw ConfigError("prompt-mode must be deep|shallow, got: " + s);
}
TempMode temp_mode_from_string(const std::string& s) {
    if (s == "divide") return TempMode::Divide;
    if (s == "multiply") return TempMode::Multiply;
    throw ConfigError("temp-mode must be divide|multiply, got: " + s);
}

namespace {

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (item.key() == a) {
                ok = true;
                break;
            }
        if (!ok) throw ConfigError("unknown config key: " + where + "." + item.key());
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for " + where + "." + key + ": " + e.what());
    }
}

void read_dims(const json& j, const char* key, cohort::Dims& out, const std::string& where) {
    if (!j.contains(key)) return;
    const json& a = j.at(key);
    if (!a.is_array() || a.size() != 3) throw ConfigError(where + "." + key + " must be [d, h, w]");
    try {
        out = {a.at(0).get<int>(), a.at(1).get<int>(), a.at(2).get<int>()};
    } catch (const json::exception& e) {
        throw ConfigError("bad value for " + where + "." + key + ": " + e.what());
    }
}

template <typename T, size_t N>
void read_array(const json& j, const char* key, std::array<T, N>& out, const std::string& where) {
    if (!j.contains(key)) return;
    const json& a = j.at(key);
    if (!a.is_array() || a.size() != N)
        throw ConfigError(where + "." + key + " must be an array of " + std::to_string(N));
    try {
        for (size_t i = 0; i < N; ++i) out[i] = a.at(i).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("bad value for " + where + "." + key + ": " + e.what());
    }
}

json dims_json(const cohort::Dims& d) { return json::array({d.d, d.h, d.w}); }

}  // namespace

void Config::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    const VisionConfig& v = vision;
    if (v.dims.d <= 0 || v.dims.h <= 0 || v.dims.w <= 0) fail("vision.dims must be positive");
    if (v.patch.d <= 0 || v.patch.h <= 0 || v.patch.w <= 0) fail("vision.patch must be positive");
    if (v.dims.d % v.patch.d || v.dims.h % v.patch.h || v.dims.w % v.patch.w)
        fail("vision.dims must be divisible by vision.patch");
    if (v.embed_dim <= 0 || v.layers <= 0 || v.heads <= 0) fail("vision sizes must be positive");
    if (v.embed_dim % v.heads) fail("vision.embed_dim must be divisible by vision.heads");
    if (v.prompt_len < 0) fail("vision.prompt_len must be >= 0");
    if (v.mlp_ratio < 1) fail("vision.mlp_ratio must be >= 1");

    if (text.embed_dim != v.embed_dim) fail("text.embed_dim must equal vision.embed_dim");
    if (text.layers <= 0 || text.heads <= 0) fail("text sizes must be positive");
    if (text.embed_dim % text.heads) fail("text.embed_dim must be divisible by text.heads");
    if (text.max_tokens < 1) fail("text.max_tokens must be >= 1");
    if (text.prompt_len < 0) fail("text.prompt_len must be >= 0");
    if (text.mlp_ratio < 1) fail("text.mlp_ratio must be >= 1");
    if (text.vocab_size < 0) fail("text.vocab_size must be >= 0");

    if (align.heads <= 0) fail("align.heads must be positive");
    if (v.embed_dim % align.heads) fail("embed_dim must be divisible by align.heads");
    if (align.lambda < 0) fail("align.lambda must be >= 0");
    if (!(align.tau_min > 0) || align.tau_min > align.tau_max) fail("align tau bounds invalid");
    if (align.tau_init < align.tau_min || align.tau_init > align.tau_max)
        fail("align.tau_init outside clamp bounds");

    if (peft.kind == PeftKind::Lora) {
        if (peft.lora_rank < 1 || peft.lora_rank > v.embed_dim) fail("peft.lora_rank out of range");
        if (!(peft.lora_alpha > 0)) fail("peft.lora_alpha must be > 0");
    }
    if (peft.kind == PeftKind::Adapter && (peft.adapter_dim < 1 || peft.adapter_dim > v.embed_dim))
        fail("peft.adapter_dim out of range");

    if (train.batch_size < 1) fail("train.batch_size must be >= 1");
    if (train.epochs < 0) fail("train.epochs must be >= 0");
    if (!(train.lr > 0)) fail("train.lr must be > 0");
    if (train.weight_decay < 0) fail("train.weight_decay must be >= 0");
    if (train.plateau_patience < 1) fail("train.plateau_patience must be >= 1");
    if (!(train.plateau_factor > 0) || train.plateau_factor >= 1)
        fail("train.plateau_factor must lie in (0, 1)");
    if (train.classes.size() < 2) fail("train.classes needs at least two classes");

    if (cohort_gen.scans_per_subject < 1) fail("cohort.scans_per_subject must be >= 1");
    for (int c : cohort_gen.subjects_per_class)
        if (c < 0) fail("cohort.subjects_per_class must be >= 0");
}

Config desk_config() {
    Config c;  // struct defaults are the desk preset
    c.train.epochs = 12;
    // With similarities in [-1, 1], dividing by τ = 10 squashes the logits to
    // ±0.1 and the loss sits at the uniform plateau indefinitely; the desk
    // preset multiplies so that training actually moves. The struct default
    // keeps the division reading.
    c.align.temp_mode = TempMode::Multiply;
    return c;
}

Config paper_config() {
    Config c;
    c.vision.dims = {128, 128, 128};
    c.vision.patch = {4, 16, 16};
    c.vision.embed_dim = 768;
    c.vision.layers = 12;
    c.vision.heads = 12;
    c.vision.prompt_len = 20;
    c.text.embed_dim = 768;
    c.text.layers = 12;
    c.text.heads = 12;
    c.text.prompt_len = 30;
    // Published-scale cohort layout: train subjects 107/134/166 carrying 1504
    // scans apportioned by subject share; eval 21/33/25 subjects with 268 scans.
    c.cohort_gen.write_volumes = false;  // 1504 × 8 MB of voxels: plan only
    c.cohort_gen.use_plan = true;
    c.cohort_gen.plan[0] = {{107, 0, 21}, {396, 0, 71}};
    c.cohort_gen.plan[1] = {{134, 0, 33}, {495, 0, 112}};
    c.cohort_gen.plan[2] = {{166, 0, 25}, {613, 0, 85}};
    return c;
}

cohort::CohortConfig CohortGenConfig::to_cohort_config(cohort::Dims dims, uint64_t seed,
                                                       const std::filesystem::path& out_dir) const {
    cohort::CohortConfig cc;
    cc.subjects_per_class = subjects_per_class;
    cc.scans_per_subject = scans_per_subject;
    cc.dims = dims;
    cc.split_fractions = split_fractions;
    cc.use_plan = use_plan;
    cc.plan = plan;
    cc.master_seed = seed;
    cc.out_dir = out_dir;
    cc.write_volumes = write_volumes;
    return cc;
}

Config tiny_config() {
    Config c;
    c.vision.dims = {8, 8, 8};
    c.vision.patch = {4, 4, 4};  // 2×2×2 = 8 patches
    c.vision.embed_dim = 16;
    c.vision.layers = 2;
    c.vision.heads = 2;
    c.vision.prompt_len = 2;
    c.vision.mlp_ratio = 2;
    c.text.embed_dim = 16;
    c.text.layers = 2;
    c.text.heads = 2;
    c.text.max_tokens = 8;
    c.text.prompt_len = 2;
    c.text.mlp_ratio = 2;
    c.train.batch_size = 2;
    return c;
}

Config preset(const std::string& name) {
    if (name == "desk") return desk_config();
    if (name == "paper") return paper_config();
    if (name == "tiny") return tiny_config();
    throw ConfigError("unknown preset: " + name + " (expected desk|paper|tiny)");
}

json to_json(const Config& c) {
    json classes = json::array();
    for (cohort::Diagnosis d : c.train.classes) classes.push_back(cohort::to_string(d));
    json plan = json::array();
    for (const cohort::ClassPlan& p : c.cohort_gen.plan)
        plan.push_back({{"subjects", p.subjects}, {"scans", p.scans}});
    return json{
        {"vision",
         {{"dims", dims_json(c.vision.dims)},
          {"patch", dims_json(c.vision.patch)},
          {"embed_dim", c.vision.embed_dim},
          {"layers", c.vision.layers},
          {"heads", c.vision.heads},
          {"prompt_len", c.vision.prompt_len},
          {"mlp_ratio", c.vision.mlp_ratio}}},
        {"text",
         {{"vocab_size", c.text.vocab_size},
          {"embed_dim", c.text.embed_dim},
          {"layers", c.text.layers},
          {"heads", c.text.heads},
          {"max_tokens", c.text.max_tokens},
          {"prompt_len", c.text.prompt_len},
          {"mlp_ratio", c.text.mlp_ratio}}},
        {"align",
         {{"heads", c.align.heads},
          {"lambda", c.align.lambda},
          {"tau_init", c.align.tau_init},
          {"tau_min", c.align.tau_min},
          {"tau_max", c.align.tau_max},
          {"temp_mode", to_string(c.align.temp_mode)}}},
        {"peft",
         {{"kind", to_string(c.peft.kind)},
          {"lora_rank", c.peft.lora_rank},
          {"lora_alpha", c.peft.lora_alpha},
          {"adapter_dim", c.peft.adapter_dim}}},
        {"prompt_mode", to_string(c.prompt_mode)},
        {"flags",
         {{"visual_prompts", c.flags.visual_prompts},
          {"mmse_token", c.flags.mmse_token},
          {"text_prompts", c.flags.text_prompts},
          {"report_supervision", c.flags.report_supervision},
          {"cross_attention", c.flags.cross_attention}}},
        {"train",
         {{"batch_size", c.train.batch_size},
          {"epochs", c.train.epochs},
          {"lr", c.train.lr},
          {"weight_decay", c.train.weight_decay},
          {"beta1", c.train.beta1},
          {"beta2", c.train.beta2},
          {"adam_eps", c.train.adam_eps},
          {"clip_norm", c.train.clip_norm},
          {"plateau_patience", c.train.plateau_patience},
          {"plateau_factor", c.train.plateau_factor},
          {"plateau_min_delta", c.train.plateau_min_delta},
          {"seed", c.train.seed},
          {"data_dir", c.train.data_dir},
          {"classes", classes}}},
        {"cohort",
         {{"subjects_per_class", c.cohort_gen.subjects_per_class},
          {"scans_per_subject", c.cohort_gen.scans_per_subject},
          {"split_fractions", c.cohort_gen.split_fractions},
          {"use_plan", c.cohort_gen.use_plan},
          {"plan", plan},
          {"write_volumes", c.cohort_gen.write_volumes}}},
    };
}

uint64_t config_hash(const Config& c) {
    std::string s = to_json(c).dump();
    return io::fnv64(s.data(), s.size());
}

Config from_json(const json& j, const Config& base) {
    Config c = base;
    check_keys(j, "config",
               {"vision", "text", "align", "peft", "prompt_mode", "flags", "train", "cohort"});

    if (j.contains("vision")) {
        const json& v = j.at("vision");
        check_keys(v, "vision", {"dims", "patch", "embed_dim", "layers", "heads", "prompt_len", "mlp_ratio"});
        read_dims(v, "dims", c.vision.dims, "vision");
        read_dims(v, "patch", c.vision.patch, "vision");
        read(v, "embed_dim", c.vision.embed_dim, "vision");
        read(v, "layers", c.vision.layers, "vision");
        read(v, "heads", c.vision.heads, "vision");
        read(v, "prompt_len", c.vision.prompt_len, "vision");
        read(v, "mlp_ratio", c.vision.mlp_ratio, "vision");
    }
    if (j.contains("text")) {
        const json& t = j.at("text");
        check_keys(t, "text",
                   {"vocab_size", "embed_dim", "layers", "heads", "max_tokens", "prompt_len", "mlp_ratio"});
        read(t, "vocab_size", c.text.vocab_size, "text");
        read(t, "embed_dim", c.text.embed_dim, "text");
        read(t, "layers", c.text.layers, "text");
        read(t, "heads", c.text.heads, "text");
        read(t, "max_tokens", c.text.max_tokens, "text");
        read(t, "prompt_len", c.text.prompt_len, "text");
        read(t, "mlp_ratio", c.text.mlp_ratio, "text");
    }
    if (j.contains("align")) {
        const json& a = j.at("align");
        check_keys(a, "align", {"heads", "lambda", "tau_init", "tau_min", "tau_max", "temp_mode"});
        read(a, "heads", c.align.heads, "align");
        read(a, "lambda", c.align.lambda, "align");
        read(a, "tau_init", c.align.tau_init, "align");
        read(a, "tau_min", c.align.tau_min, "align");
        read(a, "tau_max", c.align.tau_max, "align");
        if (a.contains("temp_mode")) c.align.temp_mode = temp_mode_from_string(a.at("temp_mode").get<std::string>());
    }
    if (j.contains("peft")) {
        const json& p = j.at("peft");
        check_keys(p, "peft", {"kind", "lora_rank", "lora_alpha", "adapter_dim"});
        if (p.contains("kind")) c.peft.kind = peft_from_string(p.at("kind").get<std::string>());
        read(p, "lora_rank", c.peft.lora_rank, "peft");
        read(p, "lora_alpha", c.peft.lora_alpha, "peft");
        read(p, "adapter_dim", c.peft.adapter_dim, "peft");
    }
    if (j.contains("prompt_mode"))
        c.prompt_mode = prompt_mode_from_string(j.at("prompt_mode").get<std::string>());
    if (j.contains("flags")) {
        const json& f = j.at("flags");
        check_keys(f, "flags",
                   {"visual_prompts", "mmse_token", "text_prompts", "report_supervision", "cross_attention"});
        read(f, "visual_prompts", c.flags.visual_prompts, "flags");
        read(f, "mmse_token", c.flags.mmse_token, "flags");
        read(f, "text_prompts", c.flags.text_prompts, "flags");
        read(f, "report_supervision", c.flags.report_supervision, "flags");
        read(f, "cross_attention", c.flags.cross_attention, "flags");
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        check_keys(t, "train",
                   {"batch_size", "epochs", "lr", "weight_decay", "beta1", "beta2", "adam_eps", "clip_norm",
                    "plateau_patience", "plateau_factor", "plateau_min_delta", "seed", "data_dir", "classes"});
        read(t, "batch_size", c.train.batch_size, "train");
        read(t, "epochs", c.train.epochs, "train");
        read(t, "lr", c.train.lr, "train");
        read(t, "weight_decay", c.train.weight_decay, "train");
        read(t, "beta1", c.train.beta1, "train");
        read(t, "beta2", c.train.beta2, "train");
        read(t, "adam_eps", c.train.adam_eps, "train");
        read(t, "clip_norm", c.train.clip_norm, "train");
        read(t, "plateau_patience", c.train.plateau_patience, "train");
        read(t, "plateau_factor", c.train.plateau_factor, "train");
        read(t, "plateau_min_delta", c.train.plateau_min_delta, "train");
        read(t, "seed", c.train.seed, "train");
        read(t, "data_dir", c.train.data_dir, "train");
        if (t.contains("classes")) {
            c.train.classes.clear();
            for (const auto& s : t.at("classes"))
                c.train.classes.push_back(cohort::diagnosis_from_string(s.get<std::string>()));
        }
    }
    if (j.contains("cohort")) {
        const json& g = j.at("cohort");
        check_keys(g, "cohort",
                   {"subjects_per_class", "scans_per_subject", "split_fractions", "use_plan", "plan",
                    "write_volumes"});
        read_array(g, "subjects_per_class", c.cohort_gen.subjects_per_class, "cohort");
        read(g, "scans_per_subject", c.cohort_gen.scans_per_subject, "cohort");
        read_array(g, "split_fractions", c.cohort_gen.split_fractions, "cohort");
        read(g, "use_plan", c.cohort_gen.use_plan, "cohort");
        if (g.contains("plan")) {
            const json& plan = g.at("plan");
            if (!plan.is_array() || plan.size() != 3)
                throw ConfigError("cohort.plan must list one entry per class");
            for (size_t i = 0; i < 3; ++i) {
                check_keys(plan.at(i), "cohort.plan[i]", {"subjects", "scans"});
                read_array(plan.at(i), "subjects", c.cohort_gen.plan[i].subjects, "cohort.plan[i]");
                read_array(plan.at(i), "scans", c.cohort_gen.plan[i].scans, "cohort.plan[i]");
            }
        }
        read(g, "write_volumes", c.cohort_gen.write_volumes, "cohort");
    }
    c.validate();
    return c;
}

}  // namespace voxalign::config
