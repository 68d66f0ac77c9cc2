#pragma once

#include <map>
#include <string>
#include <vector>

#include "voxalign/params.hpp"

namespace voxalign::optim {

using params::Mat;

// Scales the whole gradient set so its global l2 norm is at most `max_norm`.
// Returns the pre-clip norm.
double clip_global_norm(std::map<std::string, Mat>& grads, double max_norm);

// Decoupled-weight-decay Adam over the trainable subset of a ParamStore.
// Decay skips no_decay parameters; clamped parameters are projected back into
// their bounds after every step.
class AdamW {
public:
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(params::ParamStore& store, const std::map<std::string, Mat>& grads, double lr);
    long steps_taken() const { return t_; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    long t_ = 0;
    std::map<std::string, Mat> m_, v_;
};

// Reduce-on-plateau over a maximized validation metric: after `patience`
// consecutive epochs without an improvement greater than `min_delta`, the
// learning rate is multiplied by `factor` once and the stagnation count
// restarts.
class PlateauScheduler {
public:
    PlateauScheduler(double base_lr, int patience, double factor, double min_delta)
        : lr_(base_lr), patience_(patience), factor_(factor), min_delta_(min_delta) {}

    // Feed one epoch's metric; true when this call reduced the rate.
    bool observe(double metric);

    double lr() const { return lr_; }
    int cuts() const { return cuts_; }
    double best() const { return best_; }

private:
    double lr_;
    int patience_;
    double factor_, min_delta_;
    double best_ = -1e300;
    int stagnant_ = 0;
    int cuts_ = 0;
};

}  // namespace voxalign::optim
