#include "ferrosnn/optimizer.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace ferrosnn::opt {

double cosine_lr(int epoch, const LrSchedule& s) {
    if (epoch < 0 || epoch > s.total_epochs)
        throw std::invalid_argument("cosine_lr: epoch " + std::to_string(epoch) +
                                    " outside [0, " + std::to_string(s.total_epochs) + "]");
    if (s.total_epochs == 0) return s.lr_initial;
    const double phase = std::numbers::pi * static_cast<double>(epoch) /
                         static_cast<double>(s.total_epochs);
    return s.lr_final + 0.5 * (s.lr_initial - s.lr_final) * (1.0 + std::cos(phase));
}

Adam::Adam(AdamConfig cfg) : cfg_(cfg) {}

std::size_t Adam::register_tensor(const std::string& name, std::size_t size) {
    slots_.push_back({name, std::vector<double>(size, 0.0), std::vector<double>(size, 0.0)});
    return slots_.size() - 1;
}

void Adam::begin_step() { ++t_; }

void Adam::step_tensor(std::size_t handle, std::span<const double> grad, double lr,
                       std::span<double> delta_out) {
    Slot& slot = slots_.at(handle);
    if (grad.size() != slot.m.size() || delta_out.size() != slot.m.size())
        throw std::invalid_argument("adam: size mismatch for tensor '" + slot.name + "'");
    if (t_ == 0) throw std::logic_error("adam: begin_step() must run before step_tensor()");

    const double b1 = cfg_.beta1;
    const double b2 = cfg_.beta2;
    const double bias1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double bias2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double g = grad[i];
        if (!std::isfinite(g))
            throw std::runtime_error("adam: non-finite gradient in tensor '" + slot.name + "'");
        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
        const double m_hat = slot.m[i] / bias1;
        const double v_hat = slot.v[i] / bias2;
        delta_out[i] = -lr * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
    }
}

void Adam::restore(std::size_t handle, std::span<const double> m, std::span<const double> v) {
    Slot& slot = slots_.at(handle);
    if (m.size() != slot.m.size() || v.size() != slot.v.size())
        throw std::invalid_argument("adam: restore size mismatch for tensor '" + slot.name + "'");
    std::copy(m.begin(), m.end(), slot.m.begin());
    std::copy(v.begin(), v.end(), slot.v.begin());
}

void apply_software(std::span<double> weights, std::span<const double> deltas,
                    const fabric::LayerBound& bound) {
    if (weights.size() != deltas.size())
        throw std::invalid_argument("apply_software: size mismatch");
    for (std::size_t i = 0; i < weights.size(); ++i)
        weights[i] = std::clamp(weights[i] + deltas[i], -bound.bound, bound.bound);
}

}  // namespace ferrosnn::opt
