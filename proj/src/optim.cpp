#include "fec/optim.hpp"

#include <cmath>

#include "fec/errors.hpp"

namespace fec {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train config: epochs must be positive");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be positive");
    if (base_lr <= 0.0) throw ConfigError("train config: base_lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("train config: weight_decay must be non-negative");
    if (warmup_epochs < 0.0) throw ConfigError("train config: warmup_epochs must be non-negative");
    if (warmup_epochs >= epochs)
        throw ConfigError("train config: warmup_epochs must stay below epochs");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
        throw ConfigError("train config: momentum parameters must lie in [0, 1)");
    if (adam_eps <= 0.0) throw ConfigError("train config: adam_eps must be positive");
    if (grad_clip < 0.0) throw ConfigError("train config: grad_clip must be non-negative");
}

LrSchedule::LrSchedule(double base_lr, std::int64_t warmup_steps, std::int64_t total_steps)
    : base_lr_(base_lr), warmup_(warmup_steps), total_(total_steps) {
    if (total_steps < 1) throw ArgumentError("lr schedule: total_steps must be positive");
    if (warmup_steps < 0 || warmup_steps >= total_steps)
        throw ArgumentError("lr schedule: warmup_steps must stay below total_steps");
}

double LrSchedule::at(std::int64_t step) const {
    if (step < 0) throw ArgumentError("lr schedule: negative step");
    if (step >= total_) return 0.0;
    if (step < warmup_)
        return base_lr_ * static_cast<double>(step + 1) / static_cast<double>(warmup_);
    const double progress =
        static_cast<double>(step - warmup_) / static_cast<double>(total_ - warmup_);
    return base_lr_ * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <typename T>
double clip_gradients(const std::vector<Param<T>*>& params, double max_norm) {
    double sq = 0.0;
    for (const Param<T>* p : params)
        for (T g : p->grad.data) sq += static_cast<double>(g) * static_cast<double>(g);
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T scale = static_cast<T>(max_norm / norm);
        for (Param<T>* p : params)
            for (T& g : p->grad.data) g *= scale;
    }
    return norm;
}

template <typename T>
AdamW<T>::AdamW(std::vector<Param<T>*> params, const TrainConfig& cfg)
    : params_(std::move(params)),
      beta1_(cfg.beta1),
      beta2_(cfg.beta2),
      eps_(cfg.adam_eps),
      weight_decay_(cfg.weight_decay) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Param<T>* p : params_) {
        m_.push_back(Tensor<T>::zeros(p->value.shape));
        v_.push_back(Tensor<T>::zeros(p->value.shape));
    }
}

template <typename T>
void AdamW<T>::step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param<T>& p = *params_[i];
        if (!p.trainable) continue;
        const double decay = p.weight_decay ? weight_decay_ : 0.0;
        for (std::size_t j = 0; j < p.value.data.size(); ++j) {
            const double g = static_cast<double>(p.grad.data[j]);
            // m_ and v_ hold T; the moment math runs in double for stability.
            double m = static_cast<double>(m_[i].data[j]);
            double v = static_cast<double>(v_[i].data[j]);
            m = beta1_ * m + (1.0 - beta1_) * g;
            v = beta2_ * v + (1.0 - beta2_) * g * g;
            m_[i].data[j] = static_cast<T>(m);
            v_[i].data[j] = static_cast<T>(v);
            const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) +
                                  decay * static_cast<double>(p.value.data[j]);
            p.value.data[j] -= static_cast<T>(lr * update);
        }
    }
}

template <typename T>
void AdamW<T>::zero_grad() {
    for (Param<T>* p : params_) p->zero_grad();
}

template double clip_gradients(const std::vector<Param<float>*>&, double);
template double clip_gradients(const std::vector<Param<double>*>&, double);
template class AdamW<float>;
template class AdamW<double>;

}  // namespace fec
