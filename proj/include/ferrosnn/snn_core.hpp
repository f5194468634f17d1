#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ferrosnn/rng.hpp"
#include "ferrosnn/weight_fabric.hpp"

namespace ferrosnn::snn {

// binary: spikes are H(v - v_th), the deployed dynamics.
// relaxed: spikes are the clipped-linear relaxation whose exact derivative is
// the rectangular surrogate; used by gradient checks, where backpropagation
// through the relaxed forward must equal finite differences.
enum class SpikeMode { binary, relaxed };

struct SurrogateParams {
    double amplitude = 1.0;  // pseudo-derivative inside the window
    double window = 0.25;    // half-width around v_th
};

// Rectangular pseudo-derivative: amplitude strictly inside |v - v_th| < window,
// 0 outside and exactly at the boundary.
double surrogate_grad(double v, const SurrogateParams& sp, double v_th);

struct LifParams {
    double beta = 0.8;   // current decay
    double gamma = 0.8;  // voltage decay
    double v_th = 0.3;
};

struct LifState {
    double i = 0.0;
    double v = 0.0;
    double s = 0.0;
};

// One LIF update: i' = beta*i + input; v' = gamma*v*(1-s) + i'; spike iff
// v' >= v_th. The (1-s) factor is the reset-by-gating of the previous step.
LifState lif_step(const LifState& state, double syn_input, const LifParams& p);

// Convolutional-recurrent spiking topology: CONV1-CONV2-AvgPool-CONV3 spatial
// feature stack, a 3-tap temporal convolution, a recurrent layer, two dense
// layers with a non-spiking readout, and learnable temporal output weights.
// The characterized 64/128/256-wide instance is `paper()`; width, kernel and
// grid are free so desk-scale and gradient-check instances use the same code.
struct NetworkSpec {
    int grid_h = 10, grid_w = 11;
    int conv1_filters = 64, conv1_k = 3;
    int conv2_filters = 128, conv2_k = 3;
    int pool = 2;
    int conv3_filters = 256, conv3_k = 3;
    int hidden = 256;
    int classes = 2;
    int timesteps = 160;
    int tc_taps = 3;
    double v_th = 0.5;
    SurrogateParams surrogate{1.0, 0.6};
    double decay_init = 0.35;

    static NetworkSpec paper(int timesteps = 160);
    static NetworkSpec scaled(int timesteps = 40, int width_divisor = 8);
    static NetworkSpec mini();  // every layer type at toy size, for gradient checks

    // valid-convolution geometry
    int conv1_h() const { return grid_h - conv1_k + 1; }
    int conv1_w() const { return grid_w - conv1_k + 1; }
    int conv2_h() const { return conv1_h() - conv2_k + 1; }
    int conv2_w() const { return conv1_w() - conv2_k + 1; }
    int pool_h() const { return conv2_h() / pool; }
    int pool_w() const { return conv2_w() / pool; }
    int conv3_h() const { return pool_h() - conv3_k + 1; }
    int conv3_w() const { return pool_w() - conv3_k + 1; }
    int conv3_flat() const { return conv3_filters * conv3_h() * conv3_w(); }

    int n_conv1() const { return conv1_filters * conv1_h() * conv1_w(); }
    int n_conv2() const { return conv2_filters * conv2_h() * conv2_w(); }
    int n_pool() const { return conv2_filters * pool_h() * pool_w(); }

    void validate() const;  // throws std::invalid_argument on bad geometry

    struct LayerInfo {
        std::string name;
        std::size_t synapses = 0;
        std::size_t neurons = 0;
        int fan_in = 0;
        double bound = 0.0;
    };
    // The seven weighted layers in forward order (conv1..fc2).
    std::vector<LayerInfo> layers() const;
    std::size_t synaptic_parameter_count() const;  // excludes temporal weights and decays
    std::size_t neuron_count() const;
};

// Indices into the per-layer decay vectors.
enum LifLayer : int {
    lif_conv1 = 0,
    lif_conv2,
    lif_conv3,
    lif_tc1,
    lif_r1,
    lif_fc1,
    lif_readout,
    lif_layer_count
};

struct NetworkParams {
    std::vector<double> conv1, conv2, conv3;  // [out][in][k][k]
    std::vector<double> tc1;                  // [hidden][conv3_flat][taps]
    std::vector<double> r1;                   // [hidden][hidden]
    std::vector<double> fc1;                  // [hidden][hidden]
    std::vector<double> fc2;                  // [classes][hidden]
    std::vector<double> w_ts;                 // [T]
    std::vector<double> beta;                 // [lif_layer_count]
    std::vector<double> gamma;                // [lif_layer_count]

    // Weights U(-bound, +bound) per layer, temporal weights 1/T, decays at
    // decay_init.
    static NetworkParams init(const NetworkSpec& spec, Rng& rng);
};

// Uniform view over the trainable tensors, used by the optimizer, the device
// fabric and checkpointing.
struct TensorRef {
    enum class Kind { synaptic, temporal, decay };
    std::string name;
    std::vector<double>* data = nullptr;
    Kind kind = Kind::synaptic;
    fabric::LayerBound bound;  // meaningful for synaptic tensors
};
std::vector<TensorRef> tensor_refs(NetworkParams& params, const NetworkSpec& spec);

struct NetworkGrads {
    std::vector<double> conv1, conv2, conv3, tc1, r1, fc1, fc2, w_ts, beta, gamma;

    static NetworkGrads zeros(const NetworkSpec& spec);
    void clear();
    void add_scaled(const NetworkGrads& other, double scale);
};

// Everything the backward pass replays: time-major (a, i, v, s) per LIF layer,
// pooled activity and the readout trace. Doubles as the spike record for
// diagnostics.
struct ForwardTrace {
    int T = 0;
    std::vector<double> a1, i1, v1, s1;
    std::vector<double> a2, i2, v2, s2;
    std::vector<double> pool;  // T * n_pool
    std::vector<double> a3, i3, v3, s3;
    std::vector<double> a4, i4, v4, s4;
    std::vector<double> a5, i5, v5, s5;
    std::vector<double> a6, i6, v6, s6;
    std::vector<double> a7, i7, v7;  // readout, no spikes
};

struct ForwardResult {
    std::vector<double> y;       // aggregated class scores
    std::vector<double> logits;  // T x classes
    int predicted = 0;           // argmax, ties to the lowest class index
    std::array<double, 6> spike_rate{};  // mean firing rate of the spiking layers
};

// y = sum_t w_ts(t) * o(t)
std::vector<double> temporal_aggregate(std::span<const double> logits, int classes,
                                       std::span<const double> w_ts);

// Softmax cross-entropy on the aggregated scores; writes d(loss)/d(y).
double cross_entropy(std::span<const double> y, int target, std::span<double> gy);

// Full unrolled forward. `input` is T*grid_h*grid_w, time-major. Analog input
// feeds conv1 directly; spike encoding happens at conv1's LIF neurons.
ForwardResult forward(const NetworkSpec& spec, const NetworkParams& params,
                      std::span<const float> input, SpikeMode mode, ForwardTrace* trace);

// Exact backpropagation through time over the recorded trace, with the spike
// derivative replaced by the rectangular surrogate. Accumulates (+=) into
// `grads` so a batch engine can sum trials in a fixed order.
double backward(const NetworkSpec& spec, const NetworkParams& params, const ForwardTrace& trace,
                std::span<const float> input, int target, NetworkGrads& grads);

// forward + backward, returns the trial loss.
double loss_and_gradients(const NetworkSpec& spec, const NetworkParams& params,
                          std::span<const float> input, int target, SpikeMode mode,
                          NetworkGrads& grads);

}  // namespace ferrosnn::snn
