#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "ferrosnn/device_model.hpp"
#include "ferrosnn/rng.hpp"

namespace ferrosnn::fabric {

// Fan-in-derived weight bound of a layer; trained weights live in
// [-bound, +bound] and the device mapping normalizes over that range.
struct LayerBound {
    int fan_in = 1;
    double bound = 1.0;

    static LayerBound from_fan_in(int fan_in);
};

// Thresholded programming rule. epsilon is a fraction of the full per-layer
// weight range (2*bound); the LTD threshold is scaled by epsilon_asym.
struct ProgrammingPolicy {
    double epsilon = 0.025;
    double epsilon_asym = 1.0;
    int max_events_per_batch_per_weight = 1;
    double write_noise_std = 0.0;  // conductance-domain Gaussian, 0 = ideal writes

    double ltp_threshold(const LayerBound& b) const { return epsilon * 2.0 * b.bound; }
    double ltd_threshold(const LayerBound& b) const {
        return epsilon * epsilon_asym * 2.0 * b.bound;
    }
};

// weight -> active-device conductance: w+ = 0.5*w/bound + 0.5, clamped input
double map_to_device(double w_snn, const LayerBound& b);
// conductance -> weight, the exact inverse on [0,1]
double map_from_device(double w_plus, const LayerBound& b);

struct ProgrammingEvent {
    std::size_t synapse = 0;
    device::Polarity polarity = device::Polarity::ltp;
};

// One layer's worth of modeled synapses: the active device conductances w+,
// the fixed 0.5 reference, and the per-synapse digital update accumulator.
class DifferentialSynapseArray {
public:
    static constexpr double w_minus_ref = 0.5;

    DifferentialSynapseArray(std::string name, LayerBound bound,
                             std::span<const double> initial_weights);

    const std::string& name() const { return name_; }
    const LayerBound& bound() const { return bound_; }
    std::size_t size() const { return w_plus_.size(); }

    // acc += delta, in network-weight units; touches no device state
    void accumulate(std::span<const double> weight_deltas);

    // Threshold check and at most one programming pulse per synapse; fired
    // synapses get their accumulator reset to exactly 0. Returns the events
    // in synapse-index order.
    std::vector<ProgrammingEvent> commit(const ProgrammingPolicy& policy,
                                         const device::FerroKernelParams& params, Rng& rng);

    // Reprogram conductances from a weight tensor (transfer), accumulators
    // untouched.
    void load_weights(std::span<const double> w_snn);
    // Map conductances back to network weights.
    void read_weights(std::span<double> out) const;

    const std::vector<double>& w_plus() const { return w_plus_; }
    const std::vector<double>& acc() const { return acc_; }

    std::uint64_t ltp_events() const { return ltp_events_; }
    std::uint64_t ltd_events() const { return ltd_events_; }
    void reset_event_counters();
    // checkpoint restoration; bypasses the weight mapping so conductances and
    // accumulators come back bit-identical
    void restore_state(std::span<const double> w_plus, std::span<const double> acc);
    void restore_event_counters(std::uint64_t ltp, std::uint64_t ltd);

private:
    std::string name_;
    LayerBound bound_;
    std::vector<double> w_plus_;
    std::vector<double> acc_;
    std::uint64_t ltp_events_ = 0;
    std::uint64_t ltd_events_ = 0;
};

// Snap weights onto `levels` uniformly spaced values over [-bound, +bound].
// Bin-midpoint ties round half away from zero (and to + when the candidates
// have equal magnitude), so 2-level grids stay sign-preserving.
void quantize(std::span<double> weights, int levels, const LayerBound& b);

// i.i.d. Gaussian programming noise with sigma = eta * mean(|distinct
// non-zero level values|), re-clamped to [-bound, +bound]. Throws
// std::invalid_argument on an all-zero tensor (the scale is undefined).
void add_program_noise(std::span<double> weights, double eta, const LayerBound& b, Rng& rng);

struct LayerEventCounts {
    std::string layer;
    std::uint64_t ltp = 0;
    std::uint64_t ltd = 0;
};

struct EventReport {
    std::vector<LayerEventCounts> layers;
    std::uint64_t total_ltp = 0;
    std::uint64_t total_ltd = 0;
    std::uint64_t total() const { return total_ltp + total_ltd; }
};

EventReport event_report(std::span<const DifferentialSynapseArray* const> arrays);
std::string event_report_json(const EventReport& report);

// Append-only CSV event log: epoch,batch,layer,ltp_events,ltd_events,cumulative_total.
// Reopening with append=true continues the cumulative counter from the last row.
class EventLogWriter {
public:
    explicit EventLogWriter(const std::filesystem::path& path, bool append = false);
    void row(int epoch, long batch, const std::string& layer, std::uint64_t ltp,
             std::uint64_t ltd);
    std::uint64_t cumulative_total() const { return cumulative_; }

private:
    std::ofstream out_;
    std::uint64_t cumulative_ = 0;
};

}  // namespace ferrosnn::fabric
