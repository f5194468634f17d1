#include "ferrosnn/weight_fabric.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ferrosnn::fabric {

LayerBound LayerBound::from_fan_in(int fan_in) {
    if (fan_in <= 0) throw std::invalid_argument("fan_in must be positive");
    return {fan_in, 1.0 / std::sqrt(static_cast<double>(fan_in))};
}

double map_to_device(double w_snn, const LayerBound& b) {
    const double w = std::clamp(w_snn, -b.bound, b.bound);
    return 0.5 * w / b.bound + 0.5;
}

double map_from_device(double w_plus, const LayerBound& b) {
    return (w_plus - 0.5) * 2.0 * b.bound;
}

DifferentialSynapseArray::DifferentialSynapseArray(std::string name, LayerBound bound,
                                                   std::span<const double> initial_weights)
    : name_(std::move(name)), bound_(bound) {
    w_plus_.resize(initial_weights.size());
    acc_.assign(initial_weights.size(), 0.0);
    for (std::size_t i = 0; i < initial_weights.size(); ++i)
        w_plus_[i] = map_to_device(initial_weights[i], bound_);
}

void DifferentialSynapseArray::accumulate(std::span<const double> weight_deltas) {
    if (weight_deltas.size() != acc_.size())
        throw std::invalid_argument("accumulate: delta size " +
                                    std::to_string(weight_deltas.size()) + " != synapse count " +
                                    std::to_string(acc_.size()) + " in layer " + name_);
    for (std::size_t i = 0; i < acc_.size(); ++i) acc_[i] += weight_deltas[i];
}

std::vector<ProgrammingEvent> DifferentialSynapseArray::commit(
    const ProgrammingPolicy& policy, const device::FerroKernelParams& params, Rng& rng) {
    const double eps_ltp = policy.ltp_threshold(bound_);
    const double eps_ltd = policy.ltd_threshold(bound_);
    std::vector<ProgrammingEvent> events;
    for (std::size_t i = 0; i < w_plus_.size(); ++i) {
        for (int e = 0; e < policy.max_events_per_batch_per_weight; ++e) {
            device::Polarity pol;
            if (acc_[i] >= eps_ltp)
                pol = device::Polarity::ltp;
            else if (acc_[i] <= -eps_ltd)
                pol = device::Polarity::ltd;
            else
                break;
            w_plus_[i] = device::apply_pulse(w_plus_[i], pol, params, policy.write_noise_std, rng);
            acc_[i] = 0.0;
            if (pol == device::Polarity::ltp)
                ++ltp_events_;
            else
                ++ltd_events_;
            events.push_back({i, pol});
        }
    }
    return events;
}

void DifferentialSynapseArray::load_weights(std::span<const double> w_snn) {
    if (w_snn.size() != w_plus_.size())
        throw std::invalid_argument("load_weights: size mismatch in layer " + name_);
    for (std::size_t i = 0; i < w_snn.size(); ++i) w_plus_[i] = map_to_device(w_snn[i], bound_);
}

void DifferentialSynapseArray::read_weights(std::span<double> out) const {
    if (out.size() != w_plus_.size())
        throw std::invalid_argument("read_weights: size mismatch in layer " + name_);
    for (std::size_t i = 0; i < w_plus_.size(); ++i) out[i] = map_from_device(w_plus_[i], bound_);
}

void DifferentialSynapseArray::reset_event_counters() {
    ltp_events_ = 0;
    ltd_events_ = 0;
}

void DifferentialSynapseArray::restore_state(std::span<const double> w_plus,
                                             std::span<const double> acc) {
    if (w_plus.size() != w_plus_.size() || acc.size() != acc_.size())
        throw std::invalid_argument("restore_state: size mismatch in layer " + name_);
    std::copy(w_plus.begin(), w_plus.end(), w_plus_.begin());
    std::copy(acc.begin(), acc.end(), acc_.begin());
}

void DifferentialSynapseArray::restore_event_counters(std::uint64_t ltp, std::uint64_t ltd) {
    ltp_events_ = ltp;
    ltd_events_ = ltd;
}

void quantize(std::span<double> weights, int levels, const LayerBound& b) {
    if (levels < 2) throw std::invalid_argument("quantize: need at least 2 levels");
    const double step = 2.0 * b.bound / static_cast<double>(levels - 1);
    for (double& w : weights) {
        const double x = std::clamp(w, -b.bound, b.bound);
        const double t = (x + b.bound) / step;
        int lo = static_cast<int>(std::floor(t));
        lo = std::clamp(lo, 0, levels - 1);
        const int hi = std::min(lo + 1, levels - 1);
        const double v_lo = -b.bound + lo * step;
        const double v_hi = -b.bound + hi * step;
        const double d_lo = x - v_lo;
        const double d_hi = v_hi - x;
        if (d_lo < d_hi) {
            w = v_lo;
        } else if (d_hi < d_lo) {
            w = v_hi;
        } else {
            // midpoint tie: away from zero, + when magnitudes match
            if (std::fabs(v_hi) > std::fabs(v_lo))
                w = v_hi;
            else if (std::fabs(v_lo) > std::fabs(v_hi))
                w = v_lo;
            else
                w = std::max(v_lo, v_hi);
        }
    }
}

void add_program_noise(std::span<double> weights, double eta, const LayerBound& b, Rng& rng) {
    if (eta < 0.0) throw std::invalid_argument("add_program_noise: eta must be >= 0");
    if (eta == 0.0) return;
    std::set<double> levels;
    for (double w : weights)
        if (w != 0.0) levels.insert(std::fabs(w));
    if (levels.empty())
        throw std::invalid_argument(
            "add_program_noise: all-zero weight tensor, noise scale undefined");
    double mean = 0.0;
    for (double v : levels) mean += v;
    mean /= static_cast<double>(levels.size());
    const double sigma = eta * mean;
    for (double& w : weights) w = std::clamp(w + rng.normal(0.0, sigma), -b.bound, b.bound);
}

EventReport event_report(std::span<const DifferentialSynapseArray* const> arrays) {
    EventReport report;
    for (const auto* arr : arrays) {
        report.layers.push_back({arr->name(), arr->ltp_events(), arr->ltd_events()});
        report.total_ltp += arr->ltp_events();
        report.total_ltd += arr->ltd_events();
    }
    return report;
}

std::string event_report_json(const EventReport& report) {
    nlohmann::json doc;
    doc["total_ltp"] = report.total_ltp;
    doc["total_ltd"] = report.total_ltd;
    doc["total"] = report.total();
    auto layers = nlohmann::json::array();
    for (const auto& l : report.layers)
        layers.push_back({{"layer", l.layer}, {"ltp", l.ltp}, {"ltd", l.ltd}});
    doc["layers"] = layers;
    return doc.dump(2);
}

EventLogWriter::EventLogWriter(const std::filesystem::path& path, bool append) {
    if (append && std::filesystem::exists(path) && std::filesystem::file_size(path) > 0) {
        // pick up the cumulative counter from the last complete row
        std::ifstream in(path);
        std::string line, last;
        std::getline(in, line);  // header
        while (std::getline(in, line))
            if (!line.empty()) last = line;
        if (const auto comma = last.rfind(','); comma != std::string::npos)
            cumulative_ = std::strtoull(last.c_str() + comma + 1, nullptr, 10);
        out_.open(path, std::ios::app);
        if (!out_) throw std::runtime_error("cannot reopen event log " + path.string());
        return;
    }
    out_.open(path, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot open event log " + path.string());
    out_ << "epoch,batch,layer,ltp_events,ltd_events,cumulative_total\n";
}

void EventLogWriter::row(int epoch, long batch, const std::string& layer, std::uint64_t ltp,
                         std::uint64_t ltd) {
    cumulative_ += ltp + ltd;
    out_ << epoch << ',' << batch << ',' << layer << ',' << ltp << ',' << ltd << ','
         << cumulative_ << '\n';
    out_.flush();
}

}  // namespace ferrosnn::fabric
