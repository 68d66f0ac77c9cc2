#include "voxalign/optim.hpp"

#include <cmath>

#include "voxalign/errors.hpp"

namespace voxalign::optim {

double clip_global_norm(std::map<std::string, Mat>& grads, double max_norm) {
    if (!(max_norm > 0)) throw InvalidArgument("clip_global_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.squaredNorm();
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double s = max_norm / norm;
        for (auto& [name, g] : grads) g *= s;
    }
    return norm;
}

void AdamW::step(params::ParamStore& store, const std::map<std::string, Mat>& grads, double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& info : store.infos()) {
        if (!info.trainable) continue;
        auto it = grads.find(info.name);
        if (it == grads.end()) continue;
        const Mat& g = it->second;
        Mat& th = store.value(info.name);
        if (g.rows() != th.rows() || g.cols() != th.cols())
            throw InvalidArgument("AdamW: gradient shape mismatch for " + info.name);

        Mat& m = m_[info.name];
        Mat& v = v_[info.name];
        if (m.size() == 0) {
            m = Mat::Zero(th.rows(), th.cols());
            v = Mat::Zero(th.rows(), th.cols());
        }
        m = beta1_ * m + (1.0 - beta1_) * g;
        v = beta2_ * v + (1.0 - beta2_) * g.cwiseProduct(g);
        Mat mhat = m / bc1;
        Mat vhat = v / bc2;
        if (weight_decay_ > 0 && !info.no_decay) th *= 1.0 - lr * weight_decay_;
        th.array() -= lr * mhat.array() / (vhat.array().sqrt() + eps_);
        if (info.clamped)
            th = th.cwiseMax(info.clamp_lo).cwiseMin(info.clamp_hi);
    }
}

bool PlateauScheduler::observe(double metric) {
    if (metric > best_ + min_delta_) {
        best_ = metric;
        stagnant_ = 0;
        return false;
    }
    if (++stagnant_ >= patience_) {
        lr_ *= factor_;
        ++cuts_;
        stagnant_ = 0;
        return true;
    }
    return false;
}

}  // namespace voxalign::optim
