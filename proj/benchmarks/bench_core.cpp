#include <benchmark/benchmark.h>

#include <vector>

#include "voxalign/cohort.hpp"
#include "voxalign/config.hpp"
#include "voxalign/evalkit.hpp"
#include "voxalign/model.hpp"
#include "voxalign/optim.hpp"
#include "voxalign/params.hpp"
#include "voxalign/textkit.hpp"

using namespace voxalign;

namespace {

// Shared desk-scale fixture: config, vocab, params, one rendered scan.
struct Fixture {
    config::Config cfg = config::desk_config();
    textkit::Vocab vocab;
    params::ParamStore store{std::vector<params::ParamInfo>{}};
    cohort::SubjectRecord record;
    cohort::Volume3D volume;
    std::vector<int> ids;

    Fixture() {
        auto profile = cohort::default_profile();
        std::vector<std::string> corpus;
        for (int i = 0; i < 3; ++i)
            for (auto d : cohort::kAllDiagnoses)
                corpus.push_back(
                    textkit::render_report(cohort::gen_subject(uint64_t(10 * i) + int(d), d, profile)));
        vocab = textkit::build_vocab(corpus);
        cfg.text.vocab_size = vocab.size();
        record = cohort::gen_subject(7, cohort::Diagnosis::AD, profile);
        volume = cohort::render_volume(record, cfg.vision.dims);
        ids = textkit::tokenize(textkit::render_report(record), vocab, cfg.text.max_tokens);
        store = params::ParamStore(params::enumerate_params(cfg));
        store.init(1);
    }
};

Fixture& fx() {
    static Fixture f;
    return f;
}

void BM_RenderVolume(benchmark::State& state) {
    auto& f = fx();
    for (auto _ : state) {
        auto v = cohort::render_volume(f.record, f.cfg.vision.dims);
        benchmark::DoNotOptimize(v.voxels.data());
    }
}
BENCHMARK(BM_RenderVolume)->Unit(benchmark::kMillisecond);

void BM_EncodeImageForward(benchmark::State& state) {
    auto& f = fx();
    for (auto _ : state) {
        ad::Tape tape;
        model::Bound b(tape, f.store);
        auto img = model::encode_and_project_image(b, f.cfg, f.volume);
        benchmark::DoNotOptimize(img.v.val().data());
    }
}
BENCHMARK(BM_EncodeImageForward)->Unit(benchmark::kMillisecond);

void BM_EncodeTextForward(benchmark::State& state) {
    auto& f = fx();
    for (auto _ : state) {
        ad::Tape tape;
        model::Bound b(tape, f.store);
        auto txt = model::encode_and_project_text(b, f.cfg, f.ids);
        benchmark::DoNotOptimize(txt.w.val().data());
    }
}
BENCHMARK(BM_EncodeTextForward)->Unit(benchmark::kMillisecond);

// One optimization step's worth of work at batch 2: encode both modalities,
// similarity matrix, contrastive + auxiliary loss, full backward sweep.
void BM_PairLossBackward(benchmark::State& state) {
    auto& f = fx();
    for (auto _ : state) {
        ad::Tape tape;
        model::Bound b(tape, f.store);
        std::vector<model::EncodedImage> imgs;
        std::vector<model::EncodedText> txts;
        for (int i = 0; i < 2; ++i) {
            imgs.push_back(model::encode_and_project_image(b, f.cfg, f.volume));
            txts.push_back(model::encode_and_project_text(b, f.cfg, f.ids));
        }
        auto S = model::similarity_matrix(b, f.cfg, imgs, txts);
        auto cl = model::contrastive_loss(b, f.cfg, S, b("tau"));
        tape.backward(cl);
        benchmark::DoNotOptimize(tape.grad(b("vis.proj.w")).data());
    }
}
BENCHMARK(BM_PairLossBackward)->Unit(benchmark::kMillisecond);

void BM_ZeroShotClassify(benchmark::State& state) {
    auto& f = fx();
    auto bank = evalkit::encode_prompts(f.cfg, f.store, f.vocab, f.cfg.train.classes);
    for (auto _ : state) {
        auto cs = evalkit::classify(f.cfg, f.store, bank, f.volume);
        benchmark::DoNotOptimize(cs.predicted);
    }
}
BENCHMARK(BM_ZeroShotClassify)->Unit(benchmark::kMillisecond);

void BM_AdamWStep(benchmark::State& state) {
    auto& f = fx();
    std::map<std::string, Eigen::MatrixXd> grads;
    for (const auto& info : f.store.infos())
        if (info.trainable)
            grads[info.name] = Eigen::MatrixXd::Constant(info.rows, info.cols, 1e-3);
    optim::AdamW opt(0.9, 0.999, 1e-8, 0.01);
    for (auto _ : state) {
        opt.step(f.store, grads, 1e-5);
        benchmark::DoNotOptimize(f.store.value("vis.proj.w").data());
    }
}
BENCHMARK(BM_AdamWStep)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
