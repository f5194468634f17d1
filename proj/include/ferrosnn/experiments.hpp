#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ferrosnn/data_pipeline.hpp"
#include "ferrosnn/device_model.hpp"
#include "ferrosnn/optimizer.hpp"
#include "ferrosnn/snn_core.hpp"
#include "ferrosnn/weight_fabric.hpp"

namespace ferrosnn::exp {

inline constexpr const char* kVersion = "0.1.0";

enum class Regime {
    baseline_software,
    on_device,
    sstl,
    transfer_retune,
    fit_device,
    synth_bench,
};

Regime regime_from_string(const std::string& name);
const char* to_string(Regime regime);
const std::vector<std::string>& regime_names();

// Declarative description of one run. Flags and the JSON config file map
// one-to-one onto these fields; a config file overrides flag values.
struct ExperimentConfig {
    std::string regime = "synth_bench";

    // dataset
    std::string dataset = "synthetic";  // "synthetic" | "edf"
    std::string edf_dir;
    std::string layout_file;     // empty = built-in 64-channel mesh
    std::string cue_table_file;  // empty = built-in imagery-run cue codes
    std::string trial_cache;     // optional cache base path for parsed trials
    std::vector<int> exclude_subjects;
    std::optional<int> expected_subjects;  // 103 for the full corpus

    int synth_train_trials = 400;
    int synth_test_trials = 100;
    double synth_amplitude = 3.0;
    double synth_amplitude_spread = 0.6;
    double synth_noise_std = 0.5;
    double synth_freq_a = 6.0;
    double synth_freq_b = 30.0;
    int synth_subjects = 8;
    double synth_subject_freq_jitter = 0.0;
    double synth_subject_gain_jitter = 0.0;

    // network
    std::string net = "scaled";  // paper | scaled | mini
    int width_divisor = 8;
    int timesteps = 40;  // ignored for dataset=edf (the 1-s window fixes T)
    double v_th = 0.5;
    double surrogate_amplitude = 1.0;
    double surrogate_window = 0.6;
    double decay_init = 0.35;

    // training
    int epochs = 20;
    int batch_size = 16;
    double lr_initial = 4e-4;
    double lr_final = 4e-5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;

    // device-mode programming
    double epsilon = 0.025;
    double epsilon_asym = 1.0;
    double write_noise_std = 0.0;
    std::string kernel_params_file;  // empty = characterized constants

    // quantization / transfer
    int quant_levels = 3;
    double eta = 0.25;
    int retune_epochs = 4;

    // subject-specific transfer learning
    std::vector<std::string> layers_to_finetune{"fc1", "fc2"};
    double finetune_lr = 6e-4;
    int finetune_epochs = 5;
    int finetune_batch = 1;

    // folds
    int n_folds = 5;
    int fold = 0;  // -1 = every fold

    // device calibration inputs
    std::string device_log;       // pulse log to fit
    std::string synth_log_out;    // write a synthetic pulse log here first
    double synth_log_noise = 0.002;
    double device_g_min = 0.0;    // conductance normalization window, S;
    double device_g_max = 0.0;    // both 0 = use the observed log range

    // environment
    std::uint64_t seed = 42;
    int threads = 0;  // 0 = hardware concurrency
    std::string out_dir;
    std::string checkpoint;  // pretrained input for sstl / transfer_retune
    bool resume = false;

    std::string to_json_string() const;
    static ExperimentConfig from_json_string(const std::string& text);
    void apply_json_file(const std::filesystem::path& path);  // overrides set fields

    snn::NetworkSpec network_spec() const;
    opt::LrSchedule lr_schedule() const;
    fabric::ProgrammingPolicy programming_policy() const;
    device::FerroKernelParams kernel_params() const;
    int resolved_threads() const;
    void validate() const;  // regime-specific required fields
};

// --- data preparation -----------------------------------------------------------

struct DataBundle {
    std::vector<data::Trial> train, val, test;
    data::NormStats norm;          // computed on train only, applied to all
    std::string digest;            // content hash of the raw trials
    std::vector<int> test_subject_ids;
};

DataBundle prepare_synthetic(const ExperimentConfig& cfg);
// Parses (or loads from cache) the EDF corpus and assembles one fold.
DataBundle prepare_edf(const ExperimentConfig& cfg, int fold);
DataBundle prepare_data(const ExperimentConfig& cfg, int fold);

std::string fnv1a_digest(const std::vector<data::Trial>& trials);

// --- training engine --------------------------------------------------------------

struct EvalResult {
    double accuracy = 0.0;  // percent
    double loss = 0.0;
    int n = 0;
    std::vector<int> predictions;
};

struct EpochStats {
    double train_loss = 0.0;
    double train_accuracy = 0.0;  // percent, on the training batches as seen
    std::uint64_t events = 0;     // programming events fired this epoch
};

// Owns the network parameters, the Adam state and (in device mode) the
// per-layer synapse arrays. Gradients from batch workers are reduced in a
// fixed order, so a fixed (seed, threads) pair reproduces a run bit-exactly.
class Trainer {
public:
    enum class Mode { software, device };

    Trainer(const snn::NetworkSpec& spec, Mode mode, const device::FerroKernelParams& kernel,
            const fabric::ProgrammingPolicy& policy, const opt::AdamConfig& adam_cfg,
            std::uint64_t seed, int threads);

    const snn::NetworkSpec& spec() const { return spec_; }
    snn::NetworkParams& params() { return params_; }
    const snn::NetworkParams& params() const { return params_; }
    Mode mode() const { return mode_; }

    // empty set = all tensors trainable
    void set_trainable(const std::set<std::string>& names);

    EpochStats run_epoch(std::span<const data::Trial> train, int batch_size, double lr,
                         fabric::EventLogWriter* event_log = nullptr, int epoch_index = 0);
    EvalResult evaluate(std::span<const data::Trial> trials) const;

    // After mutating params() directly (quantization, noise injection,
    // checkpoint load), push the weights back into the synapse arrays.
    void reload_device_from_params();

    fabric::EventReport event_report() const;
    std::uint64_t total_events() const;

    void save_checkpoint(const std::filesystem::path& base, const data::NormStats* norm,
                         int epoch) const;
    // Returns the stored epoch index. Restores params, Adam state, device
    // conductances, accumulators and rng streams.
    int load_checkpoint(const std::filesystem::path& base, data::NormStats* norm = nullptr);

private:
    snn::NetworkSpec spec_;
    Mode mode_;
    device::FerroKernelParams kernel_;
    fabric::ProgrammingPolicy policy_;
    snn::NetworkParams params_;
    opt::Adam adam_;
    std::vector<std::size_t> adam_handles_;
    std::vector<fabric::DifferentialSynapseArray> arrays_;  // device mode, synaptic order
    std::set<std::string> trainable_;                       // empty = all
    Rng commit_rng_;
    int threads_ = 1;

    bool is_trainable(const std::string& name) const {
        return trainable_.empty() || trainable_.contains(name);
    }
};

// --- run drivers --------------------------------------------------------------------

struct FoldOutcome {
    int fold = 0;
    double test_accuracy = 0.0;
    double val_accuracy = 0.0;
    std::uint64_t events = 0;
};

struct RunSummary {
    std::vector<FoldOutcome> folds;
    double mean_test_accuracy = 0.0;
    double std_test_accuracy = 0.0;
    std::uint64_t total_events = 0;
    std::string details_json;  // regime-specific extras
};

RunSummary run_baseline(const ExperimentConfig& cfg);
RunSummary run_on_device(const ExperimentConfig& cfg);
RunSummary run_sstl(const ExperimentConfig& cfg);
RunSummary run_transfer_retune(const ExperimentConfig& cfg);
device::KernelFitReport run_fit_device(const ExperimentConfig& cfg);
RunSummary run_synth_bench(const ExperimentConfig& cfg);

// Simulates the characterization protocol with the given kernel and writes a
// pulse log (LTD then LTP amplitude ramps, repeated cycles).
void write_synthetic_pulse_log(const std::filesystem::path& path,
                               const device::FerroKernelParams& params, double noise_std,
                               std::uint64_t seed, int cycles = 10);

}  // namespace ferrosnn::exp
