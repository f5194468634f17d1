#include <cstdio>
#include <exception>
#include <iostream>

#include "CLI11.hpp"

#include "ferrosnn/experiments.hpp"

using namespace ferrosnn;

namespace {

// Flags shared by every training-style subcommand; mirrors ExperimentConfig.
void add_common_options(CLI::App* cmd, exp::ExperimentConfig& cfg, std::string& config_file) {
    cmd->add_option("--config", config_file,
                    "JSON config file; values in it override the flags");
    cmd->add_option("--dataset", cfg.dataset, "synthetic | edf");
    cmd->add_option("--edf-dir", cfg.edf_dir, "directory with S###R##.edf recordings");
    cmd->add_option("--layout", cfg.layout_file, "electrode grid layout JSON");
    cmd->add_option("--cue-table", cfg.cue_table_file, "cue code table JSON");
    cmd->add_option("--trial-cache", cfg.trial_cache, "trial cache base path");
    cmd->add_option("--exclude-subjects", cfg.exclude_subjects, "subject ids to drop");
    cmd->add_option("--expected-subjects",
                    [&cfg](const std::vector<std::string>& v) {
                        cfg.expected_subjects = std::stoi(v.back());
                        return true;
                    },
                    "fail unless exactly this many subjects are included (103 for the full corpus)");
    cmd->add_option("--synth-train-trials", cfg.synth_train_trials);
    cmd->add_option("--synth-test-trials", cfg.synth_test_trials);
    cmd->add_option("--synth-amplitude", cfg.synth_amplitude);
    cmd->add_option("--synth-amplitude-spread", cfg.synth_amplitude_spread);
    cmd->add_option("--synth-noise-std", cfg.synth_noise_std);
    cmd->add_option("--synth-subjects", cfg.synth_subjects);
    cmd->add_option("--synth-subject-freq-jitter", cfg.synth_subject_freq_jitter);
    cmd->add_option("--synth-subject-gain-jitter", cfg.synth_subject_gain_jitter);
    cmd->add_option("--net", cfg.net, "paper | scaled | mini");
    cmd->add_option("--width-divisor", cfg.width_divisor);
    cmd->add_option("--timesteps", cfg.timesteps);
    cmd->add_option("--v-th", cfg.v_th);
    cmd->add_option("--surrogate-amplitude", cfg.surrogate_amplitude);
    cmd->add_option("--surrogate-window", cfg.surrogate_window);
    cmd->add_option("--epochs", cfg.epochs);
    cmd->add_option("--batch-size", cfg.batch_size);
    cmd->add_option("--lr", cfg.lr_initial, "initial learning rate (cosine-annealed)");
    cmd->add_option("--lr-final", cfg.lr_final);
    cmd->add_option("--epsilon", cfg.epsilon, "update threshold, fraction of the weight range");
    cmd->add_option("--epsilon-asym", cfg.epsilon_asym, "LTD/LTP threshold ratio");
    cmd->add_option("--write-noise-std", cfg.write_noise_std);
    cmd->add_option("--kernel-params", cfg.kernel_params_file, "fitted device constants JSON");
    cmd->add_option("--quant-levels", cfg.quant_levels);
    cmd->add_option("--eta", cfg.eta, "programming-noise fraction of the mean non-zero level");
    cmd->add_option("--retune-epochs", cfg.retune_epochs);
    cmd->add_option("--layers-to-finetune", cfg.layers_to_finetune);
    cmd->add_option("--finetune-lr", cfg.finetune_lr);
    cmd->add_option("--finetune-epochs", cfg.finetune_epochs);
    cmd->add_option("--finetune-batch", cfg.finetune_batch);
    cmd->add_option("--n-folds", cfg.n_folds);
    cmd->add_option("--fold", cfg.fold, "fold index, -1 = all folds");
    cmd->add_option("--seed", cfg.seed);
    cmd->add_option("--threads", cfg.threads, "0 = hardware concurrency");
    cmd->add_option("--out", cfg.out_dir, "run directory for manifest/metrics/checkpoints");
    cmd->add_option("--checkpoint", cfg.checkpoint, "pretrained checkpoint base path");
    cmd->add_flag("--resume", cfg.resume, "continue from the latest checkpoint in --out");
}

void finalize_config(exp::ExperimentConfig& cfg, const std::string& config_file,
                     const char* regime) {
    cfg.regime = regime;
    if (!config_file.empty()) cfg.apply_json_file(config_file);
    cfg.validate();
}

void print_summary(const exp::RunSummary& summary) {
    std::printf("test accuracy: %.2f%%", summary.mean_test_accuracy);
    if (summary.folds.size() > 1) std::printf(" +- %.2f", summary.std_test_accuracy);
    if (summary.total_events > 0)
        std::printf("  programming events: %llu",
                    static_cast<unsigned long long>(summary.total_events));
    std::printf("\n");
    if (!summary.details_json.empty()) std::printf("%s\n", summary.details_json.c_str());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Device-aware spiking network training on modeled ferroelectric synapses"};
    app.require_subcommand(1);

    exp::ExperimentConfig cfg;
    std::string config_file;

    auto* fit = app.add_subcommand("fit-device",
                                   "Fit the conductance-update kernel to a programming-pulse log");
    fit->add_option("--log", cfg.device_log, "delimited pulse log to fit");
    fit->add_option("--synth-log", cfg.synth_log_out,
                    "write a synthetic pulse log here (and fit it unless --log is given)");
    fit->add_option("--synth-log-noise", cfg.synth_log_noise, "write noise for the synthetic log");
    fit->add_option("--g-min", cfg.device_g_min, "low end of the conductance window, S");
    fit->add_option("--g-max", cfg.device_g_max, "high end of the conductance window, S");
    fit->add_option("--seed", cfg.seed);
    fit->add_option("--out", cfg.out_dir, "directory for kernel_params.json and the fit report");
    fit->add_option("--config", config_file, "JSON config file");

    auto* baseline = app.add_subcommand("baseline", "Floating-point software training");
    add_common_options(baseline, cfg, config_file);
    auto* on_device = app.add_subcommand(
        "on-device", "Train with accumulator-thresholded device-model weight updates");
    add_common_options(on_device, cfg, config_file);
    auto* sstl = app.add_subcommand(
        "sstl", "Per-subject fine-tuning of selected layers on a pretrained checkpoint");
    add_common_options(sstl, cfg, config_file);
    auto* retune = app.add_subcommand(
        "transfer-retune", "Quantize + perturb a software checkpoint, then re-tune on-device");
    add_common_options(retune, cfg, config_file);
    auto* bench = app.add_subcommand("synth-bench",
                                     "Quick end-to-end benchmark on the synthetic dataset");
    add_common_options(bench, cfg, config_file);

    CLI11_PARSE(app, argc, argv);

    try {
        if (fit->parsed()) {
            finalize_config(cfg, config_file, "fit_device");
            const auto report = exp::run_fit_device(cfg);
            std::printf("ltp: A=%.6g alpha=%.6g beta=%.6g (rms %.3g, %d iters)\n",
                        report.ltp.amplitude, report.ltp.alpha, report.ltp.beta,
                        report.ltp.residual_rms, report.ltp.iterations);
            std::printf("ltd: A=%.6g alpha=%.6g beta=%.6g (rms %.3g, %d iters)\n",
                        report.ltd.amplitude, report.ltd.alpha, report.ltd.beta,
                        report.ltd.residual_rms, report.ltd.iterations);
        } else if (baseline->parsed()) {
            finalize_config(cfg, config_file, "baseline_software");
            print_summary(exp::run_baseline(cfg));
        } else if (on_device->parsed()) {
            finalize_config(cfg, config_file, "on_device");
            print_summary(exp::run_on_device(cfg));
        } else if (sstl->parsed()) {
            finalize_config(cfg, config_file, "sstl");
            print_summary(exp::run_sstl(cfg));
        } else if (retune->parsed()) {
            finalize_config(cfg, config_file, "transfer_retune");
            print_summary(exp::run_transfer_retune(cfg));
        } else if (bench->parsed()) {
            finalize_config(cfg, config_file, "synth_bench");
            print_summary(exp::run_synth_bench(cfg));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
