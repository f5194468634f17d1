#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "ferrosnn/experiments.hpp"

using namespace ferrosnn;
using namespace ferrosnn::exp;

namespace {

ExperimentConfig tiny_config() {
    ExperimentConfig cfg;
    cfg.dataset = "synthetic";
    cfg.net = "scaled";
    cfg.width_divisor = 16;
    cfg.timesteps = 12;
    cfg.synth_train_trials = 48;
    cfg.synth_test_trials = 16;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.threads = 2;
    cfg.seed = 99;
    return cfg;
}

std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("ferrosnn_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace

TEST_CASE("config json round-trip and file override") {
    ExperimentConfig cfg = tiny_config();
    cfg.epsilon = 0.075;
    cfg.layers_to_finetune = {"fc2"};
    const auto text = cfg.to_json_string();
    const auto back = ExperimentConfig::from_json_string(text);
    CHECK(back.epsilon == 0.075);
    CHECK(back.layers_to_finetune == std::vector<std::string>{"fc2"});
    CHECK(back.width_divisor == 16);

    const auto dir = temp_dir("config");
    const auto file = dir / "override.json";
    std::ofstream(file) << "{\"epochs\": 7, \"epsilon\": 0.05}\n";
    ExperimentConfig base = tiny_config();
    base.apply_json_file(file);
    CHECK(base.epochs == 7);         // overridden
    CHECK(base.epsilon == 0.05);     // overridden
    CHECK(base.batch_size == 8);     // untouched
    std::filesystem::remove_all(dir);
}

TEST_CASE("regime names cover the cli surface") {
    const auto& names = regime_names();
    REQUIRE(names.size() == 6);
    for (const char* expected : {"baseline_software", "on_device", "sstl", "transfer_retune",
                                 "fit_device", "synth_bench"})
        CHECK(std::find(names.begin(), names.end(), expected) != names.end());
    CHECK(regime_from_string("on_device") == Regime::on_device);
    CHECK_THROWS_AS(regime_from_string("nope"), std::invalid_argument);
}

TEST_CASE("synthetic data bundle keeps subjects disjoint and is seeded") {
    const auto cfg = tiny_config();
    const auto a = prepare_synthetic(cfg);
    const auto b = prepare_synthetic(cfg);
    CHECK(a.digest == b.digest);
    CHECK(a.train.size() + a.val.size() == 48);
    CHECK(a.test.size() == 16);

    std::set<int> train_subjects;
    for (const auto& t : a.train) train_subjects.insert(t.subject_id);
    for (const auto& t : a.test) CHECK_FALSE(train_subjects.contains(t.subject_id));
}

TEST_CASE("trainer runs are bit-reproducible for a fixed seed and thread count") {
    const auto cfg = tiny_config();
    auto bundle = prepare_synthetic(cfg);
    const auto spec = cfg.network_spec();
    const opt::AdamConfig adam{};

    auto run = [&]() {
        Trainer t(spec, Trainer::Mode::device, device::FerroKernelParams::characterized(),
                  cfg.programming_policy(), adam, 4242, 2);
        for (int e = 0; e < 2; ++e) t.run_epoch(bundle.train, 8, 1e-3, nullptr, e);
        return std::make_pair(t.params().fc1, t.total_events());
    };
    const auto [w1, e1] = run();
    const auto [w2, e2] = run();
    CHECK(w1 == w2);  // bit-identical weight trajectory
    CHECK(e1 == e2);
}

TEST_CASE("device-mode training only moves weights through the kernel steps") {
    const auto cfg = tiny_config();
    auto bundle = prepare_synthetic(cfg);
    auto spec = cfg.network_spec();
    fabric::ProgrammingPolicy policy;
    policy.epsilon = 0.025;
    Trainer t(spec, Trainer::Mode::device, device::FerroKernelParams::characterized(), policy,
              {}, 7, 2);
    t.run_epoch(bundle.train, 8, 2e-3, nullptr, 0);

    // every weight sits inside its layer bound (the mapping guarantees it)
    auto refs = snn::tensor_refs(t.params(), spec);
    for (const auto& ref : refs) {
        if (ref.kind != snn::TensorRef::Kind::synaptic) continue;
        for (double w : *ref.data) {
            CHECK(w <= ref.bound.bound + 1e-12);
            CHECK(w >= -ref.bound.bound - 1e-12);
        }
    }
}

TEST_CASE("checkpoints restore training exactly") {
    const auto cfg = tiny_config();
    auto bundle = prepare_synthetic(cfg);
    const auto spec = cfg.network_spec();
    const auto dir = temp_dir("ckpt");

    Trainer a(spec, Trainer::Mode::device, device::FerroKernelParams::characterized(),
              cfg.programming_policy(), {}, 31, 2);
    a.run_epoch(bundle.train, 8, 1e-3, nullptr, 0);
    a.save_checkpoint(dir / "snap", &bundle.norm, 0);
    a.run_epoch(bundle.train, 8, 9e-4, nullptr, 1);
    const auto final_fc1 = a.params().fc1;
    const auto final_events = a.total_events();

    Trainer b(spec, Trainer::Mode::device, device::FerroKernelParams::characterized(),
              cfg.programming_policy(), {}, 777 /* different init seed */, 2);
    data::NormStats norm;
    const int epoch = b.load_checkpoint(dir / "snap", &norm);
    CHECK(epoch == 0);
    CHECK(norm.mean == bundle.norm.mean);
    b.run_epoch(bundle.train, 8, 9e-4, nullptr, 1);
    CHECK(b.params().fc1 == final_fc1);
    CHECK(b.total_events() == final_events);
    std::filesystem::remove_all(dir);
}

TEST_CASE("frozen layers do not move during fine-tuning") {
    const auto cfg = tiny_config();
    auto bundle = prepare_synthetic(cfg);
    const auto spec = cfg.network_spec();
    Trainer t(spec, Trainer::Mode::device, device::FerroKernelParams::characterized(),
              cfg.programming_policy(), {}, 11, 2);
    const auto conv1_before = t.params().conv1;
    const auto wts_before = t.params().w_ts;
    const auto fc2_before = t.params().fc2;
    t.set_trainable({"fc1", "fc2"});
    for (int e = 0; e < 2; ++e) t.run_epoch(bundle.train, 4, 5e-3, nullptr, e);
    CHECK(t.params().conv1 == conv1_before);
    CHECK(t.params().w_ts == wts_before);
    CHECK(t.params().fc2 != fc2_before);
}

TEST_CASE("fit-device pipeline recovers the generator constants from a synthetic log") {
    const auto dir = temp_dir("fitdev");
    ExperimentConfig cfg;
    cfg.regime = "fit_device";
    cfg.synth_log_out = (dir / "pulses.csv").string();
    cfg.synth_log_noise = 0.001;
    cfg.device_g_min = 1e-8;
    cfg.device_g_max = 1e-7;
    cfg.out_dir = (dir / "run").string();
    cfg.seed = 5;

    const auto report = run_fit_device(cfg);
    const auto truth = device::FerroKernelParams::characterized();
    CHECK(std::fabs(report.params.a_plus - truth.a_plus) / truth.a_plus < 0.05);
    CHECK(std::fabs(report.params.alpha_plus - truth.alpha_plus) / truth.alpha_plus < 0.05);
    CHECK(std::fabs(report.params.beta_plus - truth.beta_plus) / truth.beta_plus < 0.05);
    CHECK(std::fabs(report.params.a_minus - truth.a_minus) / truth.a_minus < 0.05);
    CHECK(std::fabs(report.params.alpha_minus - truth.alpha_minus) / truth.alpha_minus < 0.05);
    CHECK(std::fabs(report.params.beta_minus - truth.beta_minus) / truth.beta_minus < 0.05);

    CHECK(std::filesystem::exists(dir / "run" / "kernel_params.json"));
    CHECK(std::filesystem::exists(dir / "run" / "characterization_report.json"));
    const auto loaded = device::load_kernel_params(dir / "run" / "kernel_params.json");
    CHECK(loaded.a_plus == report.params.a_plus);

    SUBCASE("empty log is a calibration error") {
        ExperimentConfig bad;
        bad.regime = "fit_device";
        const auto empty = dir / "empty.csv";
        std::ofstream(empty) << "";
        bad.device_log = empty.string();
        CHECK_THROWS_AS(run_fit_device(bad), device::CalibrationError);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("device-mode training converges for every threshold asymmetry") {
    ExperimentConfig cfg;
    cfg.dataset = "synthetic";
    cfg.timesteps = 28;
    cfg.synth_train_trials = 240;
    cfg.synth_test_trials = 80;
    cfg.epochs = 12;
    cfg.batch_size = 16;
    cfg.threads = 2;
    cfg.seed = 21;

    auto bundle = prepare_synthetic(cfg);
    const auto spec = cfg.network_spec();
    const opt::LrSchedule sched = cfg.lr_schedule();
    for (double asym : {0.5, 1.0, 2.0}) {
        auto policy = cfg.programming_policy();
        policy.epsilon_asym = asym;
        Trainer t(spec, Trainer::Mode::device, device::FerroKernelParams::characterized(),
                  policy, {}, cfg.seed, 2);
        for (int e = 0; e < cfg.epochs; ++e)
            t.run_epoch(bundle.train, cfg.batch_size, opt::cosine_lr(e, sched), nullptr, e);
        CAPTURE(asym);
        CHECK(t.evaluate(bundle.test).accuracy >= 85.0);
    }
}

TEST_CASE("sstl recovers planted subject shifts, classifier-only beats full retraining") {
    ExperimentConfig cfg;
    cfg.dataset = "synthetic";
    cfg.timesteps = 28;
    cfg.synth_train_trials = 240;
    cfg.synth_test_trials = 96;
    cfg.synth_subjects = 4;
    cfg.synth_subject_freq_jitter = 3.0;
    cfg.synth_subject_gain_jitter = 0.3;
    cfg.epochs = 10;
    cfg.batch_size = 16;
    cfg.threads = 2;
    cfg.seed = 33;

    const auto dir = temp_dir("sstl_shift");
    cfg.regime = "on_device";
    cfg.out_dir = (dir / "pre").string();
    run_on_device(cfg);

    cfg.regime = "sstl";
    cfg.checkpoint = (dir / "pre" / "checkpoint_fold0_final").string();
    cfg.out_dir.clear();
    cfg.finetune_lr = 6e-4;

    cfg.layers_to_finetune = {"fc1", "fc2"};
    const auto fc_only = nlohmann::json::parse(run_sstl(cfg).details_json);

    cfg.layers_to_finetune = {"conv1", "conv2", "conv3", "tc1",        "r1",
                              "fc1",   "fc2",   "w_ts",  "decay_beta", "decay_gamma"};
    const auto full = nlohmann::json::parse(run_sstl(cfg).details_json);

    const double before = fc_only["cumulative_before"].get<double>();
    const double fc_after = fc_only["cumulative_after"].get<double>();
    const double full_after = full["cumulative_after"].get<double>();
    CAPTURE(before);
    CAPTURE(fc_after);
    CAPTURE(full_after);
    CHECK(fc_after >= before + 10.0);       // adaptation recovers the shift
    CHECK(fc_after >= full_after - 1.0);    // scarce data favors classifier-only tuning
    std::filesystem::remove_all(dir);
}

TEST_CASE("run manifest and metrics land in the run directory") {
    auto cfg = tiny_config();
    const auto dir = temp_dir("manifest");
    cfg.out_dir = dir.string();
    cfg.regime = "baseline_software";
    const auto summary = run_baseline(cfg);
    CHECK(summary.folds.size() == 1);
    CHECK(std::filesystem::exists(dir / "manifest.json"));
    CHECK(std::filesystem::exists(dir / "metrics.jsonl"));
    CHECK(std::filesystem::exists(dir / "curves_fold0.csv"));
    CHECK(std::filesystem::exists(dir / "summary.json"));
    CHECK(std::filesystem::exists(dir / "checkpoint_fold0_final.json"));

    // manifest carries the full config and the dataset digest
    std::ifstream in(dir / "manifest.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.find("dataset_digest") != std::string::npos);
    CHECK(text.find("synth_train_trials") != std::string::npos);
    std::filesystem::remove_all(dir);
}

TEST_CASE("untrained network scores at chance on balanced synthetic data") {
    auto cfg = tiny_config();
    cfg.epochs = 0;
    cfg.synth_test_trials = 64;
    const auto summary = run_baseline(cfg);
    CHECK(summary.mean_test_accuracy >= 25.0);
    CHECK(summary.mean_test_accuracy <= 75.0);
}

TEST_CASE("transfer with no quantization and no noise is exactly a no-op") {
    auto cfg = tiny_config();
    const auto dir = temp_dir("noop_transfer");
    cfg.regime = "baseline_software";
    cfg.out_dir = (dir / "base").string();
    const auto base = run_baseline(cfg);

    cfg.regime = "transfer_retune";
    cfg.checkpoint = (dir / "base" / "checkpoint_fold0_final").string();
    cfg.out_dir.clear();
    cfg.quant_levels = 0;  // keep full precision
    cfg.eta = 0.0;
    cfg.retune_epochs = 0;
    const auto summary = run_transfer_retune(cfg);
    const auto details = nlohmann::json::parse(summary.details_json);
    CHECK(details["accuracy_clean"].get<double>() == base.mean_test_accuracy);
    CHECK(details["accuracy_quantized"].get<double>() == base.mean_test_accuracy);
    CHECK(details["accuracy_after_retune"].get<double>() == base.mean_test_accuracy);
    std::filesystem::remove_all(dir);
}

TEST_CASE("interrupted runs resume from the latest checkpoint") {
    auto cfg = tiny_config();
    cfg.epsilon = 0.002;  // tight threshold so programming events fire even here
    const auto dir = temp_dir("resume");
    cfg.regime = "on_device";
    cfg.out_dir = dir.string();

    cfg.epochs = 2;
    const auto partial = run_on_device(cfg);

    // continue the run for one more epoch from the saved state
    cfg.epochs = 3;
    cfg.resume = true;
    const auto resumed = run_on_device(cfg);
    CHECK(resumed.folds.size() == 1);
    CHECK(resumed.total_events >= partial.total_events);  // counters carried over

    // metrics were appended, not rewritten: 2 + 1 epoch records
    int epoch_rows = 0;
    std::ifstream metrics(dir / "metrics.jsonl");
    for (std::string line; std::getline(metrics, line);)
        epoch_rows += line.find("\"type\":\"epoch\"") != std::string::npos;
    CHECK(epoch_rows == 3);

    // restarting again with nothing left to do reproduces the result exactly
    const auto restat = run_on_device(cfg);
    CHECK(restat.mean_test_accuracy == resumed.mean_test_accuracy);
    CHECK(restat.total_events == resumed.total_events);

    // device-mode runs keep a per-batch programming-event log
    std::ifstream events(dir / "events_fold0.csv");
    REQUIRE(events.good());
    std::string header;
    std::getline(events, header);
    CHECK(header == "epoch,batch,layer,ltp_events,ltd_events,cumulative_total");
    std::string first_row;
    CHECK(static_cast<bool>(std::getline(events, first_row)));
    std::filesystem::remove_all(dir);
}

TEST_CASE("edf corpus path assembles fold bundles end to end") {
    const auto dir = temp_dir("edfcorpus");
    const auto layout = data::GridLayout::default_64();
    std::vector<std::string> labels;
    for (const auto& [label, cell] : layout.mapping) labels.push_back(label + ".");

    // six subjects, one imagery run each, cues planted every 6 seconds
    Rng rng(404);
    for (int subject = 1; subject <= 6; ++subject) {
        data::EdfRecording rec;
        rec.version = "0";
        rec.patient_id = "S" + std::to_string(subject);
        rec.recording_id = "Startdate 01-JAN-2009";
        rec.start_date = "01.01.09";
        rec.start_time = "00.00.00";
        rec.reserved = "EDF+C";
        rec.n_records = 30;
        rec.record_duration_s = 1.0;
        std::vector<data::EdfAnnotation> cues;
        for (int k = 0; k < 4; ++k) cues.push_back({4.0 + 6.0 * k, 4.1, k % 2 ? "T2" : "T1"});
        for (const auto& lab : labels) {
            data::EdfSignalHeader h;
            h.label = lab;
            h.physical_dim = "uV";
            h.physical_min = -1000;
            h.physical_max = 1000;
            h.digital_min = -32768;
            h.digital_max = 32767;
            h.samples_per_record = 160;
            rec.signals.push_back(h);
            std::vector<std::int16_t> s(30 * 160);
            for (auto& v : s) v = static_cast<std::int16_t>(rng.uniform(-500, 500));
            rec.samples.push_back(std::move(s));
        }
        data::EdfSignalHeader ann;
        ann.label = "EDF Annotations";
        ann.physical_min = -1;
        ann.physical_max = 1;
        ann.digital_min = -32768;
        ann.digital_max = 32767;
        ann.samples_per_record = 128;
        rec.signals.push_back(ann);
        rec.samples.push_back(data::encode_annotation_payload(cues, 30, 1.0, 128));
        char name[32];
        std::snprintf(name, sizeof(name), "S%03dR04.edf", subject);
        data::write_edf_file(rec, dir / name);
    }

    ExperimentConfig cfg;
    cfg.dataset = "edf";
    cfg.edf_dir = dir.string();
    cfg.trial_cache = (dir / "cache").string();
    cfg.n_folds = 3;
    cfg.expected_subjects = 6;
    cfg.seed = 5;

    const auto bundle = prepare_edf(cfg, 0);
    CHECK(bundle.test.size() == 8);                       // 2 test subjects x 4 cues
    CHECK(bundle.train.size() + bundle.val.size() == 16); // remaining 4 subjects
    CHECK(bundle.train.front().timesteps == 160);
    CHECK(bundle.train.front().rows == 10);
    CHECK(bundle.train.front().cols == 11);
    std::set<int> train_subjects;
    for (const auto& t : bundle.train) train_subjects.insert(t.subject_id);
    for (const auto& t : bundle.test) CHECK_FALSE(train_subjects.contains(t.subject_id));

    // second pass loads from the trial cache instead of re-parsing
    CHECK(std::filesystem::exists(dir / "cache.json"));
    const auto again = prepare_edf(cfg, 0);
    CHECK(again.digest == bundle.digest);
    std::filesystem::remove_all(dir);
}

TEST_CASE("fine-tuning with lr=0 is a no-op control") {
    auto cfg = tiny_config();
    cfg.synth_subject_freq_jitter = 1.0;
    cfg.synth_subjects = 2;       // few subjects, enough trials per subject
    cfg.synth_test_trials = 32;   // for the 4-way per-subject split
    const auto dir = temp_dir("sstl0");

    // pretrain briefly on-device, then sstl with lr=0
    cfg.regime = "on_device";
    cfg.out_dir = (dir / "pre").string();
    cfg.epochs = 1;
    run_on_device(cfg);

    cfg.regime = "sstl";
    cfg.checkpoint = (dir / "pre" / "checkpoint_fold0_final").string();
    cfg.out_dir.clear();
    cfg.finetune_lr = 0.0;
    cfg.finetune_epochs = 1;
    const auto summary = run_sstl(cfg);
    const auto details = nlohmann::json::parse(summary.details_json);
    CHECK(details["cumulative_before"] == details["cumulative_after"]);
    std::filesystem::remove_all(dir);
}
