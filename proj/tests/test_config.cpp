#include <doctest.h>

#include "voxalign/config.hpp"
#include "voxalign/errors.hpp"

using namespace voxalign;
using config::Config;

TEST_CASE("presets validate and dispatch by name") {
    config::desk_config().validate();
    config::tiny_config().validate();
    config::paper_config().validate();
    CHECK(config::preset("desk").vision.embed_dim == 64);
    CHECK(config::preset("paper").vision.embed_dim == 768);
    CHECK(config::preset("tiny").vision.embed_dim == 16);
    CHECK_THROWS_AS(config::preset("huge"), ConfigError);
}

TEST_CASE("tiny preset geometry") {
    Config c = config::tiny_config();
    CHECK(c.vision.num_patches() == 8);
    CHECK(c.vision.patch_voxels() == 64);
    CHECK(c.text.max_tokens == 8);
    CHECK(c.vision.layers == 2);
}

TEST_CASE("paper preset cohort plan totals") {
    Config c = config::paper_config();
    CHECK(c.cohort_gen.use_plan);
    CHECK_FALSE(c.cohort_gen.write_volumes);
    int train_scans = 0, eval_scans = 0, train_subj = 0;
    for (const auto& p : c.cohort_gen.plan) {
        train_subj += p.subjects[0];
        train_scans += p.scans[0];
        eval_scans += p.scans[2];
    }
    CHECK(train_subj == 407);
    CHECK(train_scans == 1504);
    CHECK(eval_scans == 268);
}

TEST_CASE("prompt lengths gate on strategy and component switches") {
    Config c = config::desk_config();
    CHECK(c.effective_lp() == 8);
    CHECK(c.effective_lr() == 8);

    c.flags.visual_prompts = false;
    CHECK(c.effective_lp() == 0);
    CHECK(c.effective_lr() == 8);
    c.flags.visual_prompts = true;

    c.peft.kind = config::PeftKind::Lora;
    CHECK(c.effective_lp() == 0);
    CHECK(c.effective_lr() == 0);
}

TEST_CASE("enum string round trips") {
    for (auto k : {config::PeftKind::Prompt, config::PeftKind::Lora, config::PeftKind::Adapter})
        CHECK(config::peft_from_string(config::to_string(k)) == k);
    for (auto m : {config::PromptMode::Deep, config::PromptMode::Shallow})
        CHECK(config::prompt_mode_from_string(config::to_string(m)) == m);
    for (auto m : {config::TempMode::Divide, config::TempMode::Multiply})
        CHECK(config::temp_mode_from_string(config::to_string(m)) == m);
    CHECK_THROWS_AS(config::peft_from_string("none"), ConfigError);
    CHECK_THROWS_AS(config::prompt_mode_from_string(""), ConfigError);
    CHECK_THROWS_AS(config::temp_mode_from_string("mul"), ConfigError);
}

TEST_CASE("json round trip preserves every field") {
    for (const char* name : {"desk", "paper", "tiny"}) {
        Config a = config::preset(name);
        a.text.vocab_size = 123;  // exercise a runtime-resolved field too
        Config b = config::from_json(config::to_json(a));
        CHECK(config::to_json(a).dump() == config::to_json(b).dump());
        CHECK(config::config_hash(a) == config::config_hash(b));
    }
}

TEST_CASE("hash is sensitive to nested changes") {
    Config a = config::desk_config();
    Config b = a;
    b.align.lambda = 0.25;
    CHECK(config::config_hash(a) != config::config_hash(b));
    Config c = a;
    c.flags.cross_attention = false;
    CHECK(config::config_hash(a) != config::config_hash(c));
    Config d = config::paper_config();
    Config e = d;
    e.cohort_gen.plan[1].scans[0] += 1;
    CHECK(config::config_hash(d) != config::config_hash(e));
}

TEST_CASE("strict parsing rejects unknown keys with their path") {
    nlohmann::json j = {{"vision", {{"bogus", 1}}}};
    try {
        config::from_json(j);
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("vision.bogus") != std::string::npos);
    }
    CHECK_THROWS_AS(config::from_json({{"nonsense", 1}}), ConfigError);
}

TEST_CASE("partial json overrides keep base defaults") {
    nlohmann::json j = {{"train", {{"lr", 0.5}}}, {"peft", {{"kind", "lora"}}}};
    Config c = config::from_json(j, config::desk_config());
    CHECK(c.train.lr == 0.5);
    CHECK(c.peft.kind == config::PeftKind::Lora);
    CHECK(c.train.batch_size == 8);           // untouched
    CHECK(c.vision.embed_dim == 64);          // untouched
    CHECK(c.align.lambda == 0.5);             // untouched
}

TEST_CASE("validate rejects inconsistent settings") {
    auto broken = [](auto mutate) {
        Config c = config::desk_config();
        mutate(c);
        CHECK_THROWS_AS(c.validate(), ConfigError);
    };
    broken([](Config& c) { c.vision.heads = 5; });               // 64 % 5
    broken([](Config& c) { c.vision.patch = {5, 8, 8}; });       // 32 % 5
    broken([](Config& c) { c.text.embed_dim = 32; });            // shared space
    broken([](Config& c) { c.align.tau_init = 1000.0; });        // outside clamp
    broken([](Config& c) { c.align.tau_min = -1.0; });
    broken([](Config& c) { c.train.plateau_factor = 1.5; });
    broken([](Config& c) { c.train.batch_size = 0; });
    broken([](Config& c) { c.train.classes = {cohort::Diagnosis::NC}; });
    broken([](Config& c) {
        c.peft.kind = config::PeftKind::Lora;
        c.peft.lora_rank = 0;
    });
    broken([](Config& c) {
        c.peft.kind = config::PeftKind::Adapter;
        c.peft.adapter_dim = 9999;
    });
}
