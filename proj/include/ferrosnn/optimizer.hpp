#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ferrosnn/weight_fabric.hpp"

namespace ferrosnn::opt {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Cosine-annealed learning rate over epochs:
// lr(e) = lr_final + 0.5*(lr_initial - lr_final)*(1 + cos(pi*e/total)).
struct LrSchedule {
    double lr_initial = 1e-4;
    double lr_final = 1e-5;
    int total_epochs = 20;
};

double cosine_lr(int epoch, const LrSchedule& schedule);

// Adam with bias correction over a fixed set of named tensors. step_tensor
// returns the would-be weight delta without applying it; the caller either
// applies it in software or feeds it to a synapse-array accumulator.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {});

    // Returns the tensor handle used by step_tensor.
    std::size_t register_tensor(const std::string& name, std::size_t size);

    // Advance the shared step counter; call once per batch before step_tensor.
    void begin_step();

    // delta = -lr * m_hat / (sqrt(v_hat) + eps). Throws on non-finite
    // gradients, naming the offending tensor.
    void step_tensor(std::size_t handle, std::span<const double> grad, double lr,
                     std::span<double> delta_out);

    std::uint64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // checkpoint access
    std::span<const double> first_moment(std::size_t handle) const { return slots_[handle].m; }
    std::span<const double> second_moment(std::size_t handle) const { return slots_[handle].v; }
    void restore(std::size_t handle, std::span<const double> m, std::span<const double> v);
    void set_step_count(std::uint64_t t) { t_ = t; }

private:
    struct Slot {
        std::string name;
        std::vector<double> m;
        std::vector<double> v;
    };
    AdamConfig cfg_;
    std::vector<Slot> slots_;
    std::uint64_t t_ = 0;
};

// w <- clamp(w + delta, -bound, +bound), the software-precision update path.
void apply_software(std::span<double> weights, std::span<const double> deltas,
                    const fabric::LayerBound& bound);

}  // namespace ferrosnn::opt
