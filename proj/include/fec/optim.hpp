#pragma once

#include <cstdint>
#include <vector>

#include "fec/tensor.hpp"

namespace fec {

struct TrainConfig {
    int epochs = 5;
    int batch_size = 128;
    double base_lr = 1e-3;
    double weight_decay = 0.05;
    double warmup_epochs = 1.0;  // may be fractional; must stay below epochs
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 0.0;  // global-norm cap; 0 disables
    bool augment_hflip = false;
    std::uint64_t seed = 42;

    void validate() const;
};

// Linear warm-up into a cosine decay that lands exactly at zero when
// step == total_steps. The two pieces meet at base_lr, so the curve is
// continuous at the junction.
class LrSchedule {
  public:
    LrSchedule(double base_lr, std::int64_t warmup_steps, std::int64_t total_steps);
    double at(std::int64_t step) const;

  private:
    double base_lr_;
    std::int64_t warmup_;
    std::int64_t total_;
};

// Returns the pre-clip global L2 norm; scales every gradient in place when the
// norm exceeds max_norm.
template <typename T>
double clip_gradients(const std::vector<Param<T>*>& params, double max_norm);

// Adam with decoupled weight decay. Only parameters flagged weight_decay are
// decayed; moments follow the standard bias correction.
template <typename T>
class AdamW {
  public:
    AdamW(std::vector<Param<T>*> params, const TrainConfig& cfg);

    void step(double lr);
    void zero_grad();
    std::int64_t iterations() const { return t_; }

  private:
    std::vector<Param<T>*> params_;
    std::vector<Tensor<T>> m_, v_;
    double beta1_, beta2_, eps_, weight_decay_;
    std::int64_t t_ = 0;
};

}  // namespace fec
