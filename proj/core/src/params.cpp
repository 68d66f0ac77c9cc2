#include "voxalign/params.hpp"

#include "voxalign/errors.hpp"
#include "voxalign/rng.hpp"

namespace voxalign::params {

using config::Config;
using config::PeftKind;
using config::PromptMode;

namespace {

struct Builder {
    std::vector<ParamInfo> out;

    void add(std::string name, long rows, long cols, bool trainable, Init init,
             bool no_decay = false, double value = 0.0) {
        ParamInfo p;
        p.name = std::move(name);
        p.rows = rows;
        p.cols = cols;
        p.trainable = trainable;
        p.no_decay = no_decay;
        p.init = init;
        p.init_value = value;
        out.push_back(std::move(p));
    }

    // One pre-norm transformer layer's frozen weights.
    void encoder_layer(const std::string& prefix, long d, long mlp) {
        add(prefix + ".ln1.g", 1, d, false, Init::One, true);
        add(prefix + ".ln1.b", 1, d, false, Init::Zero, true);
        for (const char* m : {"wq", "wk", "wv", "wo"}) add(prefix + ".attn." + m, d, d, false, Init::TruncNormal);
        for (const char* m : {"bq", "bk", "bv", "bo"}) add(prefix + ".attn." + m, 1, d, false, Init::Zero, true);
        add(prefix + ".ln2.g", 1, d, false, Init::One, true);
        add(prefix + ".ln2.b", 1, d, false, Init::Zero, true);
        add(prefix + ".mlp.w1", d, mlp, false, Init::TruncNormal);
        add(prefix + ".mlp.b1", 1, mlp, false, Init::Zero, true);
        add(prefix + ".mlp.w2", mlp, d, false, Init::TruncNormal);
        add(prefix + ".mlp.b2", 1, d, false, Init::Zero, true);
    }

    void peft_layer_extras(const std::string& prefix, const Config& cfg, long d) {
        if (cfg.peft.kind == PeftKind::Lora) {
            long r = cfg.peft.lora_rank;
            for (const char* target : {"wq", "wv"}) {
                add(prefix + ".attn." + target + ".lora.a", d, r, true, Init::TruncNormal);
                add(prefix + ".attn." + target + ".lora.b", r, d, true, Init::Zero);
            }
        } else if (cfg.peft.kind == PeftKind::Adapter) {
            long b = cfg.peft.adapter_dim;
            add(prefix + ".adapter.down.w", d, b, true, Init::TruncNormal);
            add(prefix + ".adapter.down.b", 1, b, true, Init::Zero, true);
            add(prefix + ".adapter.up.w", b, d, true, Init::Zero);
            add(prefix + ".adapter.up.b", 1, d, true, Init::Zero, true);
        }
    }
};

}  // namespace

std::vector<ParamInfo> enumerate_params(const Config& cfg) {
    cfg.validate();
    Builder b;
    const long d = cfg.vision.embed_dim;
    const long m = cfg.vision.num_patches();
    const long lp = cfg.effective_lp();
    const long lr = cfg.effective_lr();

    b.add("vis.patch_proj.w", cfg.vision.patch_voxels(), d, false, Init::TruncNormal);
    b.add("vis.patch_proj.b", 1, d, false, Init::Zero, true);
    b.add("vis.pos", m, d, false, Init::TruncNormal, true);
    b.add("vis.cls", 1, d, false, Init::TruncNormal, true);
    if (cfg.mmse_enabled()) b.add("vis.mmse_token", 1, d, true, Init::TruncNormal, true);
    for (int l = 0; l < cfg.vision.layers; ++l) {
        std::string prefix = "vis.layer" + std::to_string(l);
        b.encoder_layer(prefix, d, d * cfg.vision.mlp_ratio);
        b.peft_layer_extras(prefix, cfg, d);
    }
    if (lp > 0) {
        int n_prompts = cfg.prompt_mode == PromptMode::Deep ? cfg.vision.layers : 1;
        for (int l = 0; l < n_prompts; ++l)
            b.add("vis.prompt" + std::to_string(l), lp, d, true, Init::TruncNormal, true);
    }
    b.add("vis.proj.w", d, d, true, Init::TruncNormal);
    if (cfg.mmse_enabled()) {
        b.add("vis.mmse_head.w1", d, d, true, Init::TruncNormal);
        b.add("vis.mmse_head.b1", 1, d, true, Init::Zero, true);
        b.add("vis.mmse_head.w2", d, 1, true, Init::TruncNormal);
        b.add("vis.mmse_head.b2", 1, 1, true, Init::Zero, true);
    }

    if (cfg.text.vocab_size < 3)
        throw ConfigError("text.vocab_size must be resolved (>= 3) before parameter enumeration");
    b.add("txt.embed", cfg.text.vocab_size, d, false, Init::TruncNormal, true);
    b.add("txt.pos", 1 + lr + cfg.text.max_tokens, d, false, Init::TruncNormal, true);
    b.add("txt.cls", 1, d, false, Init::TruncNormal, true);
    for (int l = 0; l < cfg.text.layers; ++l) {
        std::string prefix = "txt.layer" + std::to_string(l);
        b.encoder_layer(prefix, d, d * cfg.text.mlp_ratio);
        b.peft_layer_extras(prefix, cfg, d);
    }
    if (lr > 0) b.add("txt.prompt", lr, d, true, Init::TruncNormal, true);
    b.add("txt.proj.w", d, d, true, Init::TruncNormal);

    if (cfg.cross_attention_enabled()) {
        for (const char* dir : {"i2t", "t2i"})
            for (const char* m2 : {"wq", "wk", "wv"})
                b.add(std::string("xa.") + dir + "." + m2, d, d, true, Init::TruncNormal);
    }

    ParamInfo tau;
    tau.name = "tau";
    tau.rows = tau.cols = 1;
    tau.trainable = true;
    tau.no_decay = true;
    tau.init = Init::Value;
    tau.init_value = cfg.align.tau_init;
    tau.clamped = true;
    tau.clamp_lo = cfg.align.tau_min;
    tau.clamp_hi = cfg.align.tau_max;
    b.out.push_back(std::move(tau));

    return b.out;
}

CountReport count_params(const std::vector<ParamInfo>& infos) {
    CountReport r;
    for (const ParamInfo& p : infos) {
        r.total += p.count();
        if (p.trainable) r.trainable += p.count();
    }
    return r;
}

ParamStore::ParamStore(std::vector<ParamInfo> infos) : infos_(std::move(infos)) {
    values_.resize(infos_.size());
    for (size_t i = 0; i < infos_.size(); ++i) {
        if (!index_.emplace(infos_[i].name, i).second)
            throw InvalidArgument("duplicate parameter name: " + infos_[i].name);
    }
}

void ParamStore::init(uint64_t seed) {
    for (size_t i = 0; i < infos_.size(); ++i) {
        const ParamInfo& p = infos_[i];
        Mat& v = values_[i];
        v.resize(p.rows, p.cols);
        switch (p.init) {
            case Init::Zero: v.setZero(); break;
            case Init::One: v.setOnes(); break;
            case Init::Value: v.setConstant(p.init_value); break;
            case Init::TruncNormal: {
                rng::Stream s(rng::mix(seed, rng::fnv1a(p.name)));
                for (long r = 0; r < p.rows; ++r)
                    for (long c = 0; c < p.cols; ++c) v(r, c) = s.truncated_normal(0.0, 0.02);
                break;
            }
        }
    }
}

Mat& ParamStore::value(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
    return values_[it->second];
}

const Mat& ParamStore::value(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
    return values_[it->second];
}

const ParamInfo& ParamStore::info(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw InvalidArgument("unknown parameter: " + name);
    return infos_[it->second];
}

}  // namespace voxalign::params
