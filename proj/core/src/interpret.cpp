#include "voxalign/interpret.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "voxalign/errors.hpp"
#include "voxalign/io.hpp"
#include "voxalign/model.hpp"

namespace voxalign::interpret {

namespace fs = std::filesystem;
using nlohmann::json;

IGCore ig_core(const Mat& x, const Mat& baseline, int steps, const ScoreFn& f) {
    if (steps < 1) throw InvalidArgument("integrated_gradients: steps must be >= 1");
    if (x.rows() != baseline.rows() || x.cols() != baseline.cols())
        throw InvalidArgument("integrated_gradients: baseline shape does not match input");

    const Mat diff = x - baseline;
    Mat avg = Mat::Zero(x.rows(), x.cols());
    Mat g;
    for (int t = 1; t <= steps; ++t) {
        const Mat xt = baseline + (static_cast<double>(t) / steps) * diff;
        f(xt, &g);
        if (g.rows() != x.rows() || g.cols() != x.cols())
            throw InvalidArgument("integrated_gradients: target returned a misshaped gradient");
        avg += g;
    }
    avg /= static_cast<double>(steps);

    IGCore out;
    Eigen::VectorXd rows = (diff.array() * avg.array()).rowwise().sum();
    out.per_row.assign(rows.data(), rows.data() + rows.size());
    out.s_input = f(x, nullptr);
    out.s_baseline = f(baseline, nullptr);
    const double total = std::accumulate(out.per_row.begin(), out.per_row.end(), 0.0);
    const double delta = out.s_input - out.s_baseline;
    out.residual = std::abs(total - delta) / std::max(std::abs(delta), 1e-12);
    return out;
}

AttributionResult integrated_gradients(const config::Config& cfg, params::ParamStore& store,
                                       const textkit::Vocab& vocab,
                                       const std::vector<int>& token_ids,
                                       const cohort::Volume3D& volume, int steps) {
    if (steps < 1) throw InvalidArgument("integrated_gradients: steps must be >= 1");
    if (token_ids.size() != static_cast<size_t>(cfg.text.max_tokens))
        throw InvalidArgument("integrated_gradients: token sequence length must be max_tokens");

    // Freeze the image side once; only the text tower reruns per step.
    Mat v_mat, patch_mat;
    {
        ad::Tape tape;
        model::Bound b(tape, store);
        auto img = model::encode_and_project_image(b, cfg, volume);
        v_mat = img.v.val();
        patch_mat = img.patch_feats.val();
    }

    const Mat& embed = store.value("txt.embed");
    Mat x(cfg.text.max_tokens, cfg.text.embed_dim);
    for (int i = 0; i < cfg.text.max_tokens; ++i) {
        const int id = token_ids[static_cast<size_t>(i)];
        if (id < 0 || id >= embed.rows())
            throw InvalidArgument("integrated_gradients: token id out of vocabulary range");
        x.row(i) = embed.row(id);
    }
    Mat baseline = embed.row(textkit::Vocab::kPad).replicate(cfg.text.max_tokens, 1);

    auto fn = [&](const Mat& xt, Mat* grad) -> double {
        ad::Tape tape;
        model::Bound b(tape, store);
        model::TextEncodeOptions topts;
        topts.embeddings_override = &xt;
        topts.want_embedding_grad = grad != nullptr;
        auto et = model::encode_and_project_text(b, cfg, token_ids, topts);
        model::EncodedImage img;
        img.v = tape.constant(v_mat);
        img.patch_feats = tape.constant(patch_mat);
        auto s = model::pair_similarity(b, cfg, img, et);
        const double val = s.scalar();
        if (grad) {
            tape.backward(s);
            *grad = tape.has_grad(et.raw.embeddings) ? tape.grad(et.raw.embeddings)
                                                     : Mat::Zero(xt.rows(), xt.cols());
        }
        return val;
    };

    IGCore core = ig_core(x, baseline, steps, fn);

    AttributionResult res;
    res.token_ids = token_ids;
    for (int id : token_ids) res.tokens.push_back(vocab.tokens[static_cast<size_t>(id)]);
    res.scores = std::move(core.per_row);
    res.completeness_residual = core.residual;
    res.s_input = core.s_input;
    res.s_baseline = core.s_baseline;
    return res;
}

std::vector<RankedToken> top_k_tokens(const AttributionResult& attr, int k) {
    const int n = static_cast<int>(attr.scores.size());
    if (k < 0 || k > n)
        throw InvalidArgument("top_k_tokens: k must lie in [0, token count]");
    std::vector<int> idx(attr.scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (attr.scores[static_cast<size_t>(a)] != attr.scores[static_cast<size_t>(b)])
            return attr.scores[static_cast<size_t>(a)] > attr.scores[static_cast<size_t>(b)];
        return a < b;
    });
    std::vector<RankedToken> out;
    for (int i = 0; i < k; ++i) {
        RankedToken r;
        r.position = idx[static_cast<size_t>(i)];
        r.token = attr.tokens[static_cast<size_t>(r.position)];
        r.score = attr.scores[static_cast<size_t>(r.position)];
        out.push_back(std::move(r));
    }
    return out;
}

json attribution_to_json(const AttributionResult& attr, int top_k) {
    json j;
    j["tokens"] = attr.tokens;
    j["scores"] = attr.scores;
    j["completeness_residual"] = attr.completeness_residual;
    j["s_input"] = attr.s_input;
    j["s_baseline"] = attr.s_baseline;
    json ranked = json::array();
    for (const RankedToken& r : top_k_tokens(attr, top_k))
        ranked.push_back({{"position", r.position}, {"token", r.token}, {"score", r.score}});
    j["top_k"] = ranked;
    return j;
}

std::string mask_biomarkers(const std::string& report, const std::string& keep) {
    int keep_idx = -1;
    for (int k = 0; k < cohort::kNumBiomarkers; ++k)
        if (keep == cohort::kBiomarkerKeys[static_cast<size_t>(k)]) keep_idx = k;
    if (keep_idx < 0)
        throw InvalidArgument("mask_biomarkers: unknown biomarker '" + keep + "'");

    static const std::string kAnchor = "biomarkers: ";
    const size_t at = report.find(kAnchor);
    if (at == std::string::npos)
        throw InvalidArgument("mask_biomarkers: text is not a rendered report");
    const std::string head = report.substr(0, at + kAnchor.size());
    std::string body = report.substr(at + kAnchor.size());
    if (body.empty() || body.back() != '.')
        throw InvalidArgument("mask_biomarkers: report body must end with a period");
    body.pop_back();

    std::vector<std::string> clauses;
    size_t pos = 0;
    while (true) {
        const size_t sep = body.find(", ", pos);
        if (sep == std::string::npos) {
            clauses.push_back(body.substr(pos));
            break;
        }
        clauses.push_back(body.substr(pos, sep - pos));
        pos = sep + 2;
    }
    if (clauses.size() != cohort::kNumBiomarkers)
        throw InvalidArgument("mask_biomarkers: expected " +
                              std::to_string(cohort::kNumBiomarkers) + " clauses, found " +
                              std::to_string(clauses.size()));

    std::string out = head;
    for (size_t k = 0; k < clauses.size(); ++k) {
        if (static_cast<int>(k) != keep_idx) {
            // Same word-token count as the original clause, so every position
            // of the masked report lines up with the unmasked one.
            const size_t n = textkit::word_tokens(clauses[k]).size();
            std::string masked;
            for (size_t i = 0; i < n; ++i) {
                if (i) masked += ' ';
                masked += "[UNK]";
            }
            out += masked;
        } else {
            out += clauses[k];
        }
        out += (k + 1 < clauses.size()) ? ", " : ".";
    }
    return out;
}

Heatmap patch_heatmap(const config::Config& cfg, params::ParamStore& store,
                      const std::vector<int>& token_ids, const cohort::Volume3D& volume,
                      HeatmapLayer layer, const std::string& biomarker) {
    ad::Tape tape;
    model::Bound b(tape, store);
    model::ImageEncodeOptions iopts;
    iopts.want_patch_grad = layer == HeatmapLayer::Final;
    iopts.want_input_patch_grad = layer == HeatmapLayer::Input;
    auto img = model::encode_and_project_image(b, cfg, volume, iopts);
    auto txt = model::encode_and_project_text(b, cfg, token_ids);
    auto s = model::pair_similarity(b, cfg, img, txt);
    tape.backward(s);

    const ad::Var target = layer == HeatmapLayer::Final ? img.raw.patches : img.raw.patches_in;
    const Mat E = target.val();
    const Mat G = tape.has_grad(target) ? tape.grad(target) : Mat::Zero(E.rows(), E.cols());

    Heatmap hm;
    hm.grid = {cfg.vision.dims.d / cfg.vision.patch.d, cfg.vision.dims.h / cfg.vision.patch.h,
               cfg.vision.dims.w / cfg.vision.patch.w};
    hm.biomarker = biomarker;
    hm.values.resize(static_cast<size_t>(E.rows()));
    for (Eigen::Index n = 0; n < E.rows(); ++n) {
        const double h = (G.row(n).array() * E.row(n).array()).sum();
        hm.values[static_cast<size_t>(n)] = static_cast<float>(std::max(0.0, h));
    }
    return hm;
}

void save_heatmap(const Heatmap& hm, const std::filesystem::path& dir, const std::string& stem) {
    io::ensure_dir(dir);
    json j;
    j["dims"] = {hm.grid.d, hm.grid.h, hm.grid.w};
    j["biomarker"] = hm.biomarker;
    j["formula"] = "grad-eclip-style";
    j["dtype"] = "float32";
    io::save_json(dir / (stem + ".json"), j);
    io::write_f32(dir / (stem + ".f32"), hm.values);
}

Heatmap load_heatmap(const std::filesystem::path& dir, const std::string& stem) {
    const json j = io::load_json(dir / (stem + ".json"));
    Heatmap hm;
    hm.grid = {j.at("dims")[0].get<int>(), j.at("dims")[1].get<int>(), j.at("dims")[2].get<int>()};
    hm.biomarker = j.at("biomarker").get<std::string>();
    hm.values = io::read_f32(dir / (stem + ".f32"));
    if (hm.values.size() != static_cast<size_t>(hm.grid.total()))
        throw IoError("heatmap grid file does not match its sidecar dims: " + stem);
    return hm;
}

void write_pgm_slice(const Heatmap& hm, int gz, const std::filesystem::path& file) {
    if (gz < 0 || gz >= hm.grid.d) throw InvalidArgument("write_pgm_slice: slice out of range");
    float peak = 0;
    for (float v : hm.values) peak = std::max(peak, v);
    std::ostringstream os;
    os << "P2\n" << hm.grid.w << " " << hm.grid.h << "\n255\n";
    for (int y = 0; y < hm.grid.h; ++y) {
        for (int x = 0; x < hm.grid.w; ++x) {
            const int level =
                peak > 0 ? static_cast<int>(std::lround(255.0 * hm.at(gz, y, x) / peak)) : 0;
            os << level << (x + 1 < hm.grid.w ? " " : "\n");
        }
    }
    io::write_text(file, os.str());
}

}  // namespace voxalign::interpret
