#pragma once

#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ferrosnn/rng.hpp"

namespace ferrosnn::device {

enum class Polarity { ltp, ltd };

const char* to_string(Polarity p);

// Six constants of the Beta-shaped conductance-update kernel:
//   dW_ltp(w) =  a_plus  * w^(alpha_plus-1)  * (1-w)^(beta_plus-1)
//   dW_ltd(w) = -a_minus * w^(alpha_minus-1) * (1-w)^(beta_minus-1)
// With alpha,beta > 1 the step vanishes at both conductance rails, which is
// what pins programmed weights inside [0,1] without explicit refresh.
struct FerroKernelParams {
    double a_plus = 0.0;
    double alpha_plus = 0.0;
    double beta_plus = 0.0;
    double a_minus = 0.0;
    double alpha_minus = 0.0;
    double beta_minus = 0.0;

    // Constants fitted to the characterized ferroelectric device; shipped as
    // the default device model.
    static FerroKernelParams characterized() {
        return {0.1761, 1.81, 2.12, 0.3300, 2.47, 1.79};
    }

    // Largest relative spread (std/mean) across the characterized device's
    // programmed conductance levels; the anchor for write-noise emulation.
    static constexpr double measured_write_noise_fraction = 0.0375;

    bool all_positive() const {
        return a_plus > 0 && alpha_plus > 0 && beta_plus > 0 && a_minus > 0 && alpha_minus > 0 &&
               beta_minus > 0;
    }
};

// One (initial weight, observed step) observation from a programming-pulse
// train. LTD samples carry delta_w <= 0 after sign normalization.
struct CharacterizationSample {
    double w_before = 0.0;
    double delta_w = 0.0;
    Polarity polarity = Polarity::ltp;
};

// Gaussian summary of the conductance reads programmed at one pulse amplitude.
struct LevelStatistics {
    double pulse_amplitude = 0.0;
    double mean_conductance = 0.0;
    std::optional<double> std_conductance;  // absent when fewer than 2 reads
    std::size_t sample_count = 0;
};

struct PolarityFit {
    double amplitude = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double residual_rms = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct KernelFitReport {
    FerroKernelParams params;
    PolarityFit ltp;
    PolarityFit ltd;
};

class CalibrationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Thrown when the local refinement exhausts its iteration budget; carries the
// best parameters found so far.
class FitError : public std::runtime_error {
public:
    FitError(const std::string& msg, KernelFitReport best)
        : std::runtime_error(msg), best_so_far(std::move(best)) {}
    KernelFitReport best_so_far;
};

// Signed normalized conductance step for one programming pulse at state w.
// Throws std::domain_error for w outside [0,1]: an out-of-range state means
// the weight mapping upstream is broken, not that the device saw a bad pulse.
double delta_w(double w, Polarity polarity, const FerroKernelParams& params);

// One programming pulse: kernel step plus optional Gaussian write noise,
// clamped back into [0,1]. Deterministic given the rng stream.
double apply_pulse(double w, Polarity polarity, const FerroKernelParams& params,
                   double write_noise_std, Rng& rng);

// Least-squares calibration of the kernel, fitted independently per polarity.
// Grid-initializes (alpha, beta) with the amplitude solved in closed form,
// then refines with damped Gauss-Newton. Requires >= 10 samples per polarity
// covering [0.1, 0.9] of the conductance range.
KernelFitReport fit_kernel(std::span<const CharacterizationSample> samples);

// Per-amplitude mean and unbiased standard deviation, ordered by amplitude.
std::vector<LevelStatistics> level_statistics(
    const std::vector<std::pair<double, std::vector<double>>>& grouped_reads);

// --- characterization log ingestion ---------------------------------------

// Row of the delimited pulse log: pulse_index, pulse_amplitude_V,
// pulse_width_us, read_conductance_S.
struct PulseLogRecord {
    long pulse_index = 0;
    double amplitude_v = 0.0;
    double width_us = 0.0;
    double conductance_s = 0.0;
};

class PulseLogError : public std::runtime_error {
public:
    PulseLogError(const std::string& msg, std::size_t line)
        : std::runtime_error(msg + " (line " + std::to_string(line) + ")"), line_number(line) {}
    std::size_t line_number;
};

std::vector<PulseLogRecord> read_pulse_log(std::istream& in);
std::vector<PulseLogRecord> read_pulse_log_file(const std::filesystem::path& path);

struct CharacterizationData {
    std::vector<CharacterizationSample> samples;
    std::vector<LevelStatistics> levels;
    double conductance_min = 0.0;  // normalization window used for w in [0,1]
    double conductance_max = 0.0;
    // max std/mean over levels with a defined std; the measured write-noise
    // anchor for emulation runs
    double max_relative_std = 0.0;
};

// Turns a raw pulse log into normalized (w_before, delta_w) samples and
// per-amplitude level statistics. Pulse polarity follows the measurement
// convention of the characterized stack: positive amplitudes depress (LTD),
// negative amplitudes potentiate (LTP). LTD deltas are sign-normalized to be
// non-positive in the mean regardless of how the log was exported.
// conductance_range fixes the [0,1] normalization window (the device's
// HRS/LRS limits); when absent the observed min/max of the log is used.
CharacterizationData derive_characterization(
    const std::vector<PulseLogRecord>& log,
    std::optional<std::pair<double, double>> conductance_range = std::nullopt);

// Fitted constants, residual RMS and fit metadata as a JSON document.
void save_kernel_report(const KernelFitReport& report, const std::filesystem::path& path);
FerroKernelParams load_kernel_params(const std::filesystem::path& path);

}  // namespace ferrosnn::device
