#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxalign/config.hpp"

namespace voxalign::params {

using Mat = Eigen::MatrixXd;

enum class Init { TruncNormal, Zero, One, Value };

struct ParamInfo {
    std::string name;
    long rows = 0, cols = 0;
    bool trainable = false;
    bool no_decay = false;        // exempt from decoupled weight decay
    Init init = Init::TruncNormal;
    double init_value = 0.0;      // Init::Value only
    double clamp_lo = 0.0, clamp_hi = 0.0;
    bool clamped = false;         // post-step clamp (temperature)

    long count() const { return rows * cols; }
};

// Single source of truth for the model's parameter set under a config:
// allocation, initialization, optimizer iteration, checkpoints, and the
// trainable/frozen accounting all derive from this list. Order is stable.
std::vector<ParamInfo> enumerate_params(const config::Config& cfg);

struct CountReport {
    long total = 0;
    long trainable = 0;
    double trainable_fraction() const { return total == 0 ? 0.0 : static_cast<double>(trainable) / total; }
};
CountReport count_params(const std::vector<ParamInfo>& infos);

class ParamStore {
public:
    explicit ParamStore(std::vector<ParamInfo> infos);

    // Deterministic: each tensor is drawn from a stream keyed by (seed, name),
    // independent of enumeration order.
    void init(uint64_t seed);

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Mat& value(const std::string& name);
    const Mat& value(const std::string& name) const;
    const ParamInfo& info(const std::string& name) const;

    const std::vector<ParamInfo>& infos() const { return infos_; }
    Mat& value_at(size_t i) { return values_[i]; }
    const Mat& value_at(size_t i) const { return values_[i]; }

private:
    std::vector<ParamInfo> infos_;
    std::vector<Mat> values_;
    std::unordered_map<std::string, size_t> index_;
};

}  // namespace voxalign::params
