#include "ferrosnn/experiments.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <regex>
#include <sstream>
#include <thread>

#include "json.hpp"

#include "ferrosnn/tensor_store.hpp"

namespace ferrosnn::exp {

using nlohmann::json;

// --- regimes ---------------------------------------------------------------------

static const std::vector<std::pair<Regime, std::string>> kRegimes = {
    {Regime::baseline_software, "baseline_software"},
    {Regime::on_device, "on_device"},
    {Regime::sstl, "sstl"},
    {Regime::transfer_retune, "transfer_retune"},
    {Regime::fit_device, "fit_device"},
    {Regime::synth_bench, "synth_bench"},
};

Regime regime_from_string(const std::string& name) {
    for (const auto& [r, n] : kRegimes)
        if (n == name) return r;
    throw std::invalid_argument("unknown regime '" + name + "'");
}

const char* to_string(Regime regime) {
    for (const auto& [r, n] : kRegimes)
        if (r == regime) return n.c_str();
    return "?";
}

const std::vector<std::string>& regime_names() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& [r, n] : kRegimes) out.push_back(n);
        return out;
    }();
    return names;
}

// --- config ----------------------------------------------------------------------

namespace {

template <typename T>
void maybe(const json& doc, const char* key, T& field) {
    if (doc.contains(key)) field = doc.at(key).get<T>();
}

json config_to_json(const ExperimentConfig& c) {
    json d;
    d["regime"] = c.regime;
    d["dataset"] = c.dataset;
    d["edf_dir"] = c.edf_dir;
    d["layout_file"] = c.layout_file;
    d["cue_table_file"] = c.cue_table_file;
    d["trial_cache"] = c.trial_cache;
    d["exclude_subjects"] = c.exclude_subjects;
    if (c.expected_subjects) d["expected_subjects"] = *c.expected_subjects;
    d["synth_train_trials"] = c.synth_train_trials;
    d["synth_test_trials"] = c.synth_test_trials;
    d["synth_amplitude"] = c.synth_amplitude;
    d["synth_amplitude_spread"] = c.synth_amplitude_spread;
    d["synth_noise_std"] = c.synth_noise_std;
    d["synth_freq_a"] = c.synth_freq_a;
    d["synth_freq_b"] = c.synth_freq_b;
    d["synth_subjects"] = c.synth_subjects;
    d["synth_subject_freq_jitter"] = c.synth_subject_freq_jitter;
    d["synth_subject_gain_jitter"] = c.synth_subject_gain_jitter;
    d["net"] = c.net;
    d["width_divisor"] = c.width_divisor;
    d["timesteps"] = c.timesteps;
    d["v_th"] = c.v_th;
    d["surrogate_amplitude"] = c.surrogate_amplitude;
    d["surrogate_window"] = c.surrogate_window;
    d["decay_init"] = c.decay_init;
    d["epochs"] = c.epochs;
    d["batch_size"] = c.batch_size;
    d["lr_initial"] = c.lr_initial;
    d["lr_final"] = c.lr_final;
    d["adam_beta1"] = c.adam_beta1;
    d["adam_beta2"] = c.adam_beta2;
    d["adam_epsilon"] = c.adam_epsilon;
    d["epsilon"] = c.epsilon;
    d["epsilon_asym"] = c.epsilon_asym;
    d["write_noise_std"] = c.write_noise_std;
    d["kernel_params_file"] = c.kernel_params_file;
    d["quant_levels"] = c.quant_levels;
    d["eta"] = c.eta;
    d["retune_epochs"] = c.retune_epochs;
    d["layers_to_finetune"] = c.layers_to_finetune;
    d["finetune_lr"] = c.finetune_lr;
    d["finetune_epochs"] = c.finetune_epochs;
    d["finetune_batch"] = c.finetune_batch;
    d["n_folds"] = c.n_folds;
    d["fold"] = c.fold;
    d["device_log"] = c.device_log;
    d["synth_log_out"] = c.synth_log_out;
    d["synth_log_noise"] = c.synth_log_noise;
    d["device_g_min"] = c.device_g_min;
    d["device_g_max"] = c.device_g_max;
    d["seed"] = c.seed;
    d["threads"] = c.threads;
    d["out_dir"] = c.out_dir;
    d["checkpoint"] = c.checkpoint;
    d["resume"] = c.resume;
    return d;
}

void config_apply_json(ExperimentConfig& c, const json& d) {
    maybe(d, "regime", c.regime);
    maybe(d, "dataset", c.dataset);
    maybe(d, "edf_dir", c.edf_dir);
    maybe(d, "layout_file", c.layout_file);
    maybe(d, "cue_table_file", c.cue_table_file);
    maybe(d, "trial_cache", c.trial_cache);
    maybe(d, "exclude_subjects", c.exclude_subjects);
    if (d.contains("expected_subjects") && !d.at("expected_subjects").is_null())
        c.expected_subjects = d.at("expected_subjects").get<int>();
    maybe(d, "synth_train_trials", c.synth_train_trials);
    maybe(d, "synth_test_trials", c.synth_test_trials);
    maybe(d, "synth_amplitude", c.synth_amplitude);
    maybe(d, "synth_amplitude_spread", c.synth_amplitude_spread);
    maybe(d, "synth_noise_std", c.synth_noise_std);
    maybe(d, "synth_freq_a", c.synth_freq_a);
    maybe(d, "synth_freq_b", c.synth_freq_b);
    maybe(d, "synth_subjects", c.synth_subjects);
    maybe(d, "synth_subject_freq_jitter", c.synth_subject_freq_jitter);
    maybe(d, "synth_subject_gain_jitter", c.synth_subject_gain_jitter);
    maybe(d, "net", c.net);
    maybe(d, "width_divisor", c.width_divisor);
    maybe(d, "timesteps", c.timesteps);
    maybe(d, "v_th", c.v_th);
    maybe(d, "surrogate_amplitude", c.surrogate_amplitude);
    maybe(d, "surrogate_window", c.surrogate_window);
    maybe(d, "decay_init", c.decay_init);
    maybe(d, "epochs", c.epochs);
    maybe(d, "batch_size", c.batch_size);
    maybe(d, "lr_initial", c.lr_initial);
    maybe(d, "lr_final", c.lr_final);
    maybe(d, "adam_beta1", c.adam_beta1);
    maybe(d, "adam_beta2", c.adam_beta2);
    maybe(d, "adam_epsilon", c.adam_epsilon);
    maybe(d, "epsilon", c.epsilon);
    maybe(d, "epsilon_asym", c.epsilon_asym);
    maybe(d, "write_noise_std", c.write_noise_std);
    maybe(d, "kernel_params_file", c.kernel_params_file);
    maybe(d, "quant_levels", c.quant_levels);
    maybe(d, "eta", c.eta);
    maybe(d, "retune_epochs", c.retune_epochs);
    maybe(d, "layers_to_finetune", c.layers_to_finetune);
    maybe(d, "finetune_lr", c.finetune_lr);
    maybe(d, "finetune_epochs", c.finetune_epochs);
    maybe(d, "finetune_batch", c.finetune_batch);
    maybe(d, "n_folds", c.n_folds);
    maybe(d, "fold", c.fold);
    maybe(d, "device_log", c.device_log);
    maybe(d, "synth_log_out", c.synth_log_out);
    maybe(d, "synth_log_noise", c.synth_log_noise);
    maybe(d, "device_g_min", c.device_g_min);
    maybe(d, "device_g_max", c.device_g_max);
    maybe(d, "seed", c.seed);
    maybe(d, "threads", c.threads);
    maybe(d, "out_dir", c.out_dir);
    maybe(d, "checkpoint", c.checkpoint);
    maybe(d, "resume", c.resume);
}

}  // namespace

std::string ExperimentConfig::to_json_string() const { return config_to_json(*this).dump(2); }

ExperimentConfig ExperimentConfig::from_json_string(const std::string& text) {
    ExperimentConfig c;
    config_apply_json(c, json::parse(text));
    return c;
}

void ExperimentConfig::apply_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file " + path.string());
    config_apply_json(*this, json::parse(in));
}

snn::NetworkSpec ExperimentConfig::network_spec() const {
    snn::NetworkSpec spec;
    if (net == "paper")
        spec = snn::NetworkSpec::paper(timesteps);
    else if (net == "scaled")
        spec = snn::NetworkSpec::scaled(timesteps, width_divisor);
    else if (net == "mini")
        spec = snn::NetworkSpec::mini();
    else
        throw std::invalid_argument("unknown net preset '" + net + "'");
    spec.v_th = v_th;
    spec.surrogate = {surrogate_amplitude, surrogate_window};
    spec.decay_init = decay_init;
    spec.validate();
    return spec;
}

opt::LrSchedule ExperimentConfig::lr_schedule() const { return {lr_initial, lr_final, epochs}; }

fabric::ProgrammingPolicy ExperimentConfig::programming_policy() const {
    fabric::ProgrammingPolicy p;
    p.epsilon = epsilon;
    p.epsilon_asym = epsilon_asym;
    p.write_noise_std = write_noise_std;
    return p;
}

device::FerroKernelParams ExperimentConfig::kernel_params() const {
    if (kernel_params_file.empty()) return device::FerroKernelParams::characterized();
    return device::load_kernel_params(kernel_params_file);
}

int ExperimentConfig::resolved_threads() const {
    if (threads > 0) return threads;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

void ExperimentConfig::validate() const {
    const Regime r = regime_from_string(regime);
    if (dataset != "synthetic" && dataset != "edf")
        throw std::invalid_argument("dataset must be 'synthetic' or 'edf'");
    if (dataset == "edf" && edf_dir.empty() && trial_cache.empty())
        throw std::invalid_argument("dataset 'edf' needs --edf-dir or --trial-cache");
    if (r == Regime::sstl) {
        if (checkpoint.empty()) throw std::invalid_argument("sstl needs a pretrained --checkpoint");
        if (layers_to_finetune.empty())
            throw std::invalid_argument("sstl needs --layers-to-finetune");
    }
    if (r == Regime::transfer_retune && checkpoint.empty())
        throw std::invalid_argument("transfer_retune needs a pretrained --checkpoint");
    if (r == Regime::fit_device && device_log.empty() && synth_log_out.empty())
        throw std::invalid_argument("fit_device needs --device-log (or --synth-log to generate one)");
    if (epochs < 0 || batch_size < 1) throw std::invalid_argument("bad epochs/batch_size");
    if (epsilon <= 0.0 || epsilon_asym <= 0.0)
        throw std::invalid_argument("epsilon and epsilon_asym must be positive");
}

// --- data preparation -----------------------------------------------------------

std::string fnv1a_digest(const std::vector<data::Trial>& trials) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& t : trials) {
        mix(&t.label, sizeof(t.label));
        mix(&t.subject_id, sizeof(t.subject_id));
        mix(t.input.data(), t.input.size() * sizeof(float));
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

void assert_subject_disjoint(const std::vector<data::Trial>& train,
                             const std::vector<data::Trial>& test) {
    std::set<int> train_subjects, test_subjects;
    for (const auto& t : train) train_subjects.insert(t.subject_id);
    for (const auto& t : test) test_subjects.insert(t.subject_id);
    for (int s : test_subjects)
        if (train_subjects.contains(s))
            throw std::logic_error("subject " + std::to_string(s) +
                                   " appears in both train and test trials");
}

// Seeded Fisher-Yates over trial indices.
std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i)
        std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
    return idx;
}

void split_train_val(std::vector<data::Trial> pool, double train_fraction, std::uint64_t seed,
                     std::vector<data::Trial>& train, std::vector<data::Trial>& val) {
    Rng rng(seed ^ 0x5f356495u);
    const auto idx = shuffled_indices(pool.size(), rng);
    const std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * pool.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) {
        auto& dst = k < n_train ? train : val;
        dst.push_back(std::move(pool[idx[k]]));
    }
}

data::SynthSpec synth_spec_from(const ExperimentConfig& cfg) {
    data::SynthSpec s;
    s.timesteps = cfg.timesteps;
    s.amplitude = cfg.synth_amplitude;
    s.amplitude_spread = cfg.synth_amplitude_spread;
    s.noise_std = cfg.synth_noise_std;
    s.freq_a = cfg.synth_freq_a;
    s.freq_b = cfg.synth_freq_b;
    s.n_subjects = cfg.synth_subjects;
    s.subject_freq_jitter_hz = cfg.synth_subject_freq_jitter;
    s.subject_gain_jitter = cfg.synth_subject_gain_jitter;
    return s;
}

}  // namespace

DataBundle prepare_synthetic(const ExperimentConfig& cfg) {
    const data::SynthSpec spec = synth_spec_from(cfg);
    auto pool = data::synth_dataset(spec, cfg.synth_train_trials, cfg.seed);
    auto test = data::synth_dataset(spec, cfg.synth_test_trials, cfg.seed + 1);
    for (auto& t : test) t.subject_id += spec.n_subjects;  // held-out "subjects"

    DataBundle bundle;
    {
        std::vector<data::Trial> all(pool.begin(), pool.end());
        all.insert(all.end(), test.begin(), test.end());
        bundle.digest = fnv1a_digest(all);
    }
    split_train_val(std::move(pool), 0.8, cfg.seed, bundle.train, bundle.val);
    bundle.test = std::move(test);
    assert_subject_disjoint(bundle.train, bundle.test);

    bundle.norm = data::compute_norm_stats(bundle.train);
    data::apply_norm(bundle.train, bundle.norm);
    data::apply_norm(bundle.val, bundle.norm);
    data::apply_norm(bundle.test, bundle.norm);
    std::set<int> subjects;
    for (const auto& t : bundle.test) subjects.insert(t.subject_id);
    bundle.test_subject_ids.assign(subjects.begin(), subjects.end());
    return bundle;
}

namespace {

std::vector<data::Trial> load_edf_corpus(const ExperimentConfig& cfg) {
    if (!cfg.trial_cache.empty() &&
        std::filesystem::exists(std::filesystem::path(cfg.trial_cache).replace_extension(".json")))
        return data::load_trials(cfg.trial_cache);

    if (cfg.edf_dir.empty())
        throw std::runtime_error("no EDF directory given and trial cache not found");

    const data::GridLayout layout = cfg.layout_file.empty()
                                        ? data::GridLayout::default_64()
                                        : data::GridLayout::load(cfg.layout_file);
    const data::CueTable cues = cfg.cue_table_file.empty() ? data::CueTable{}
                                                           : data::CueTable::load(cfg.cue_table_file);
    data::ExtractionOptions opts;

    const std::regex name_re(R"(S(\d+)R(\d+)\.edf)", std::regex::icase);
    std::vector<std::filesystem::path> files;
    for (const auto& entry : std::filesystem::recursive_directory_iterator(cfg.edf_dir))
        if (entry.is_regular_file() &&
            std::regex_match(entry.path().filename().string(), name_re))
            files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
        throw std::runtime_error("no S###R##.edf files under " + cfg.edf_dir);

    std::vector<data::Trial> trials;
    std::set<int> bad_subjects;
    for (const auto& path : files) {
        std::smatch m;
        const std::string name = path.filename().string();
        std::regex_match(name, m, name_re);
        const int subject = std::stoi(m[1]);
        const int run = std::stoi(m[2]);
        if (!cues.imagery_runs.contains(run)) continue;
        if (bad_subjects.contains(subject)) continue;

        const auto rec = data::read_edf_file(path);
        // default exclusion heuristic: off-rate recordings disqualify a subject
        bool rate_ok = true;
        for (std::size_t s = 0; s < rec.signals.size(); ++s)
            if (!rec.signals[s].is_annotation_channel() && rec.sampling_rate(s) != 160.0)
                rate_ok = false;
        if (!rate_ok) {
            bad_subjects.insert(subject);
            std::erase_if(trials, [subject](const data::Trial& t) {
                return t.subject_id == subject;
            });
            continue;
        }
        std::vector<std::string> skipped;
        auto batch = data::extract_trials(rec, layout, cues, subject, run, opts, &skipped);
        for (const auto& msg : skipped) std::cerr << name << ": " << msg << "\n";
        trials.insert(trials.end(), std::make_move_iterator(batch.begin()),
                      std::make_move_iterator(batch.end()));
    }
    for (int s : cfg.exclude_subjects)
        std::erase_if(trials, [s](const data::Trial& t) { return t.subject_id == s; });

    if (!cfg.trial_cache.empty())
        data::save_trials(trials, cfg.trial_cache, {{"source", cfg.edf_dir}});
    return trials;
}

}  // namespace

DataBundle prepare_edf(const ExperimentConfig& cfg, int fold) {
    auto trials = load_edf_corpus(cfg);
    if (trials.empty()) throw std::runtime_error("EDF corpus produced no trials");

    std::set<int> subject_set;
    for (const auto& t : trials) subject_set.insert(t.subject_id);
    std::vector<int> subjects(subject_set.begin(), subject_set.end());
    std::optional<std::size_t> expected;
    if (cfg.expected_subjects) expected = static_cast<std::size_t>(*cfg.expected_subjects);
    const auto plan = data::make_folds(subjects, cfg.n_folds, expected);

    if (fold < 0 || fold >= plan.n_folds())
        throw std::invalid_argument("fold index " + std::to_string(fold) + " out of range");
    const std::set<int> test_subjects(plan.test_subjects[fold].begin(),
                                      plan.test_subjects[fold].end());

    DataBundle bundle;
    bundle.digest = fnv1a_digest(trials);
    std::vector<data::Trial> pool;
    for (auto& t : trials) {
        if (test_subjects.contains(t.subject_id))
            bundle.test.push_back(std::move(t));
        else
            pool.push_back(std::move(t));
    }
    split_train_val(std::move(pool), plan.train_fraction, cfg.seed + fold, bundle.train,
                    bundle.val);
    assert_subject_disjoint(bundle.train, bundle.test);
    assert_subject_disjoint(bundle.val, bundle.test);

    bundle.norm = data::compute_norm_stats(bundle.train);
    data::apply_norm(bundle.train, bundle.norm);
    data::apply_norm(bundle.val, bundle.norm);
    data::apply_norm(bundle.test, bundle.norm);
    bundle.test_subject_ids.assign(test_subjects.begin(), test_subjects.end());
    return bundle;
}

DataBundle prepare_data(const ExperimentConfig& cfg, int fold) {
    return cfg.dataset == "synthetic" ? prepare_synthetic(cfg) : prepare_edf(cfg, fold);
}

// --- trainer ----------------------------------------------------------------------

namespace {

// Fixed contiguous partition; worker w handles [begin_w, end_w) in order, so
// the reduction below is independent of scheduling.
void run_workers(std::size_t n, int threads,
                 const std::function<void(int, std::size_t, std::size_t)>& fn) {
    const int t = std::max(1, std::min<int>(threads, static_cast<int>(n)));
    if (t == 1) {
        fn(0, 0, n);
        return;
    }
    const std::size_t chunk = (n + t - 1) / t;
    std::vector<std::thread> pool;
    for (int w = 0; w < t; ++w) {
        const std::size_t begin = std::min(n, static_cast<std::size_t>(w) * chunk);
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back(fn, w, begin, end);
    }
    for (auto& th : pool) th.join();
}

}  // namespace

Trainer::Trainer(const snn::NetworkSpec& spec, Mode mode, const device::FerroKernelParams& kernel,
                 const fabric::ProgrammingPolicy& policy, const opt::AdamConfig& adam_cfg,
                 std::uint64_t seed, int threads)
    : spec_(spec),
      mode_(mode),
      kernel_(kernel),
      policy_(policy),
      params_(),
      adam_(adam_cfg),
      commit_rng_(seed ^ 0xc0ffee11u),
      threads_(std::max(1, threads)) {
    Rng init_rng(seed);
    params_ = snn::NetworkParams::init(spec_, init_rng);
    auto refs = snn::tensor_refs(params_, spec_);
    for (const auto& ref : refs) {
        adam_handles_.push_back(adam_.register_tensor(ref.name, ref.data->size()));
        if (mode_ == Mode::device && ref.kind == snn::TensorRef::Kind::synaptic)
            arrays_.emplace_back(ref.name, ref.bound, *ref.data);
    }
}

void Trainer::set_trainable(const std::set<std::string>& names) { trainable_ = names; }

void Trainer::reload_device_from_params() {
    if (mode_ != Mode::device) return;
    auto refs = snn::tensor_refs(params_, spec_);
    std::size_t a = 0;
    for (const auto& ref : refs) {
        if (ref.kind != snn::TensorRef::Kind::synaptic) continue;
        arrays_[a].load_weights(*ref.data);
        // mapping clamps; mirror the device state back into the weights
        arrays_[a].read_weights(*ref.data);
        ++a;
    }
}

EpochStats Trainer::run_epoch(std::span<const data::Trial> train, int batch_size, double lr,
                              fabric::EventLogWriter* event_log, int epoch_index) {
    if (train.empty()) return {};
    Rng shuffle_rng(0x9e3779b9u ^ (static_cast<std::uint64_t>(epoch_index) << 32) ^
                    adam_.step_count());
    const auto order = shuffled_indices(train.size(), shuffle_rng);

    auto refs = snn::tensor_refs(params_, spec_);
    std::vector<snn::NetworkGrads> scratch(threads_, snn::NetworkGrads::zeros(spec_));
    std::vector<double> loss_by_worker(threads_);
    std::vector<int> correct_by_worker(threads_);
    snn::NetworkGrads batch_grads = snn::NetworkGrads::zeros(spec_);
    std::vector<double> delta;

    EpochStats stats;
    double loss_sum = 0.0;
    int correct = 0, seen = 0;
    const std::uint64_t events_before = total_events();

    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        const std::size_t n = end - start;

        for (int w = 0; w < threads_; ++w) {
            scratch[w].clear();
            loss_by_worker[w] = 0.0;
            correct_by_worker[w] = 0;
        }
        run_workers(n, threads_, [&](int w, std::size_t lo, std::size_t hi) {
            snn::ForwardTrace trace;
            for (std::size_t k = lo; k < hi; ++k) {
                const auto& trial = train[order[start + k]];
                const auto res =
                    snn::forward(spec_, params_, trial.input, snn::SpikeMode::binary, &trace);
                loss_by_worker[w] += snn::backward(spec_, params_, trace, trial.input,
                                                   trial.label, scratch[w]);
                if (res.predicted == trial.label) ++correct_by_worker[w];
            }
        });
        batch_grads.clear();
        for (int w = 0; w < threads_; ++w) {
            batch_grads.add_scaled(scratch[w], 1.0 / static_cast<double>(n));
            loss_sum += loss_by_worker[w];
            correct += correct_by_worker[w];
        }
        seen += static_cast<int>(n);

        adam_.begin_step();
        std::size_t a = 0;
        for (std::size_t r = 0; r < refs.size(); ++r) {
            const auto& ref = refs[r];
            const bool synaptic = ref.kind == snn::TensorRef::Kind::synaptic;
            if (!is_trainable(ref.name)) {
                if (synaptic && mode_ == Mode::device) ++a;
                continue;
            }
            const std::vector<double>* grad = nullptr;
            if (ref.name == "conv1") grad = &batch_grads.conv1;
            else if (ref.name == "conv2") grad = &batch_grads.conv2;
            else if (ref.name == "conv3") grad = &batch_grads.conv3;
            else if (ref.name == "tc1") grad = &batch_grads.tc1;
            else if (ref.name == "r1") grad = &batch_grads.r1;
            else if (ref.name == "fc1") grad = &batch_grads.fc1;
            else if (ref.name == "fc2") grad = &batch_grads.fc2;
            else if (ref.name == "w_ts") grad = &batch_grads.w_ts;
            else if (ref.name == "decay_beta") grad = &batch_grads.beta;
            else if (ref.name == "decay_gamma") grad = &batch_grads.gamma;
            if (!grad) throw std::logic_error("no gradient tensor for " + ref.name);

            delta.resize(grad->size());
            adam_.step_tensor(adam_handles_[r], *grad, lr, delta);

            if (synaptic && mode_ == Mode::device) {
                arrays_[a].accumulate(delta);
                const std::uint64_t ltp0 = arrays_[a].ltp_events();
                const std::uint64_t ltd0 = arrays_[a].ltd_events();
                arrays_[a].commit(policy_, kernel_, commit_rng_);
                arrays_[a].read_weights(*ref.data);
                if (event_log) {
                    const std::uint64_t ltp = arrays_[a].ltp_events() - ltp0;
                    const std::uint64_t ltd = arrays_[a].ltd_events() - ltd0;
                    if (ltp + ltd > 0)
                        event_log->row(epoch_index, static_cast<long>(start / batch_size),
                                       ref.name, ltp, ltd);
                }
                ++a;
            } else if (synaptic) {
                opt::apply_software(*ref.data, delta, ref.bound);
            } else if (ref.kind == snn::TensorRef::Kind::decay) {
                for (std::size_t i = 0; i < ref.data->size(); ++i)
                    (*ref.data)[i] = std::clamp((*ref.data)[i] + delta[i], 0.0, 1.0);
            } else {
                for (std::size_t i = 0; i < ref.data->size(); ++i) (*ref.data)[i] += delta[i];
            }
        }
    }

    stats.train_loss = seen > 0 ? loss_sum / seen : 0.0;
    stats.train_accuracy = seen > 0 ? 100.0 * correct / seen : 0.0;
    stats.events = total_events() - events_before;
    return stats;
}

EvalResult Trainer::evaluate(std::span<const data::Trial> trials) const {
    EvalResult result;
    result.n = static_cast<int>(trials.size());
    result.predictions.assign(trials.size(), -1);
    if (trials.empty()) return result;

    std::vector<double> loss_by_worker(threads_, 0.0);
    std::vector<int> correct_by_worker(threads_, 0);
    run_workers(trials.size(), threads_, [&](int w, std::size_t lo, std::size_t hi) {
        std::vector<double> gy(spec_.classes);
        for (std::size_t k = lo; k < hi; ++k) {
            const auto res = snn::forward(spec_, params_, trials[k].input,
                                          snn::SpikeMode::binary, nullptr);
            result.predictions[k] = res.predicted;
            loss_by_worker[w] += snn::cross_entropy(res.y, trials[k].label, gy);
            if (res.predicted == trials[k].label) ++correct_by_worker[w];
        }
    });
    double loss = 0.0;
    int correct = 0;
    for (int w = 0; w < threads_; ++w) {
        loss += loss_by_worker[w];
        correct += correct_by_worker[w];
    }
    result.loss = loss / result.n;
    result.accuracy = 100.0 * correct / result.n;
    return result;
}

fabric::EventReport Trainer::event_report() const {
    std::vector<const fabric::DifferentialSynapseArray*> ptrs;
    for (const auto& a : arrays_) ptrs.push_back(&a);
    return fabric::event_report(ptrs);
}

std::uint64_t Trainer::total_events() const {
    std::uint64_t total = 0;
    for (const auto& a : arrays_) total += a.ltp_events() + a.ltd_events();
    return total;
}

void Trainer::save_checkpoint(const std::filesystem::path& base, const data::NormStats* norm,
                              int epoch) const {
    TensorStore store;
    auto& self = const_cast<Trainer&>(*this);
    auto refs = snn::tensor_refs(self.params_, spec_);
    for (std::size_t r = 0; r < refs.size(); ++r) {
        const auto& ref = refs[r];
        store.put({ref.name, {ref.data->size()}, *ref.data, ref.bound.bound});
        const auto m = adam_.first_moment(adam_handles_[r]);
        const auto v = adam_.second_moment(adam_handles_[r]);
        store.put({"adam_m." + ref.name, {m.size()}, {m.begin(), m.end()}, 0.0});
        store.put({"adam_v." + ref.name, {v.size()}, {v.begin(), v.end()}, 0.0});
    }
    for (const auto& arr : arrays_) {
        store.put({"device_w_plus." + arr.name(), {arr.size()}, arr.w_plus(), 0.0});
        store.put({"device_acc." + arr.name(), {arr.size()}, arr.acc(), 0.0});
        store.meta["events_ltp." + arr.name()] = std::to_string(arr.ltp_events());
        store.meta["events_ltd." + arr.name()] = std::to_string(arr.ltd_events());
    }
    if (norm) {
        store.put({"norm_mean", {norm->mean.size()},
                   std::vector<double>(norm->mean.begin(), norm->mean.end()), 0.0});
        store.put({"norm_std", {norm->stdev.size()},
                   std::vector<double>(norm->stdev.begin(), norm->stdev.end()), 0.0});
        store.meta["norm_rows"] = std::to_string(norm->rows);
        store.meta["norm_cols"] = std::to_string(norm->cols);
    }
    store.meta["adam_t"] = std::to_string(adam_.step_count());
    store.meta["epoch"] = std::to_string(epoch);
    store.meta["mode"] = mode_ == Mode::device ? "device" : "software";
    const auto rng_state = commit_rng_.state();
    for (int i = 0; i < 4; ++i)
        store.meta["commit_rng." + std::to_string(i)] = std::to_string(rng_state[i]);
    store.save(base);
}

int Trainer::load_checkpoint(const std::filesystem::path& base, data::NormStats* norm) {
    TensorStore store = TensorStore::load(base);
    auto refs = snn::tensor_refs(params_, spec_);
    for (std::size_t r = 0; r < refs.size(); ++r) {
        const auto& ref = refs[r];
        const auto& t = store.get(ref.name);
        if (t.data.size() != ref.data->size())
            throw std::runtime_error("checkpoint tensor '" + ref.name +
                                     "' does not match the configured network");
        *ref.data = t.data;
        if (store.contains("adam_m." + ref.name))
            adam_.restore(adam_handles_[r], store.get("adam_m." + ref.name).data,
                          store.get("adam_v." + ref.name).data);
    }
    bool device_state = false;
    for (auto& arr : arrays_) {
        if (!store.contains("device_w_plus." + arr.name())) continue;
        device_state = true;
        const auto& wp = store.get("device_w_plus." + arr.name()).data;
        const auto& ac = store.get("device_acc." + arr.name()).data;
        arr.restore_state(wp, ac);
        const auto ltp_it = store.meta.find("events_ltp." + arr.name());
        const auto ltd_it = store.meta.find("events_ltd." + arr.name());
        if (ltp_it != store.meta.end() && ltd_it != store.meta.end())
            arr.restore_event_counters(std::stoull(ltp_it->second), std::stoull(ltd_it->second));
    }
    if (!device_state) reload_device_from_params();
    if (mode_ == Mode::device) {
        std::size_t a = 0;
        for (const auto& ref : refs) {
            if (ref.kind != snn::TensorRef::Kind::synaptic) continue;
            arrays_[a].read_weights(*ref.data);
            ++a;
        }
    }

    if (norm && store.contains("norm_mean")) {
        const auto& mean = store.get("norm_mean").data;
        const auto& sd = store.get("norm_std").data;
        norm->mean.assign(mean.begin(), mean.end());
        norm->stdev.assign(sd.begin(), sd.end());
        norm->rows = std::stoi(store.meta.at("norm_rows"));
        norm->cols = std::stoi(store.meta.at("norm_cols"));
    }
    adam_.set_step_count(std::stoull(store.meta.at("adam_t")));
    std::array<std::uint64_t, 4> rng_state{};
    bool have_rng = true;
    for (int i = 0; i < 4; ++i) {
        const auto it = store.meta.find("commit_rng." + std::to_string(i));
        if (it == store.meta.end()) {
            have_rng = false;
            break;
        }
        rng_state[i] = std::stoull(it->second);
    }
    if (have_rng) commit_rng_.set_state(rng_state);
    return std::stoi(store.meta.at("epoch"));
}

// --- run drivers -----------------------------------------------------------------------

namespace {

class MetricsWriter {
public:
    explicit MetricsWriter(const std::filesystem::path& path, bool append)
        : out_(path, append ? std::ios::app : std::ios::trunc) {
        if (!out_) throw std::runtime_error("cannot open metrics file " + path.string());
    }
    void write(const json& record) {
        out_ << record.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

json census_json(const snn::NetworkSpec& spec) {
    json layers = json::array();
    for (const auto& l : spec.layers())
        layers.push_back({{"name", l.name},
                          {"synapses", l.synapses},
                          {"neurons", l.neurons},
                          {"fan_in", l.fan_in},
                          {"bound", l.bound}});
    return {{"layers", layers},
            {"synaptic_parameters", spec.synaptic_parameter_count()},
            {"neurons", spec.neuron_count()}};
}

void write_manifest(const ExperimentConfig& cfg, const std::string& digest,
                    const json& extra) {
    if (cfg.out_dir.empty()) return;
    std::filesystem::create_directories(cfg.out_dir);
    json doc;
    doc["version"] = kVersion;
    doc["config"] = json::parse(cfg.to_json_string());
    doc["seed"] = cfg.seed;
    doc["threads"] = cfg.resolved_threads();
    doc["dataset_digest"] = digest;
    if (cfg.regime != "fit_device") doc["census"] = census_json(cfg.network_spec());
    doc["extra"] = extra;
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", std::gmtime(&t));
    doc["started_utc"] = buf;
    std::ofstream out(std::filesystem::path(cfg.out_dir) / "manifest.json", std::ios::trunc);
    out << doc.dump(2) << "\n";
}

struct FoldArtifacts {
    std::unique_ptr<MetricsWriter> metrics;
    std::unique_ptr<std::ofstream> curve;
    std::unique_ptr<fabric::EventLogWriter> events;
    std::filesystem::path checkpoint_latest;
    std::filesystem::path checkpoint_final;
};

std::pair<std::filesystem::path, std::filesystem::path> fold_checkpoint_paths(
    const ExperimentConfig& cfg, int fold) {
    const std::filesystem::path dir(cfg.out_dir);
    const std::string tag = "fold" + std::to_string(fold);
    return {dir / ("checkpoint_" + tag + "_latest"), dir / ("checkpoint_" + tag + "_final")};
}

FoldArtifacts open_fold_artifacts(const ExperimentConfig& cfg, int fold, bool device_mode,
                                  bool resuming) {
    FoldArtifacts art;
    if (cfg.out_dir.empty()) return art;
    const std::filesystem::path dir(cfg.out_dir);
    std::filesystem::create_directories(dir);
    // later folds append to the shared metrics stream; per-fold files restart
    // unless the run is being resumed
    art.metrics = std::make_unique<MetricsWriter>(dir / "metrics.jsonl", resuming || fold > 0);
    const std::string tag = "fold" + std::to_string(fold);
    auto curve = std::make_unique<std::ofstream>(dir / ("curves_" + tag + ".csv"),
                                                 resuming ? std::ios::app : std::ios::trunc);
    if (!resuming)
        *curve << "epoch,lr,train_loss,train_acc,val_loss,val_acc,cumulative_events\n";
    art.curve = std::move(curve);
    if (device_mode)
        art.events = std::make_unique<fabric::EventLogWriter>(dir / ("events_" + tag + ".csv"),
                                                              resuming);
    std::tie(art.checkpoint_latest, art.checkpoint_final) = fold_checkpoint_paths(cfg, fold);
    return art;
}

FoldOutcome train_fold(const ExperimentConfig& cfg, Trainer::Mode mode, int fold,
                       DataBundle& bundle) {
    snn::NetworkSpec spec = cfg.network_spec();
    if (!bundle.train.empty() && bundle.train.front().timesteps != spec.timesteps) {
        spec.timesteps = bundle.train.front().timesteps;
        spec.validate();
    }

    opt::AdamConfig adam_cfg{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon};
    Trainer trainer(spec, mode, cfg.kernel_params(), cfg.programming_policy(), adam_cfg,
                    cfg.seed + static_cast<std::uint64_t>(fold) * 7919u, cfg.resolved_threads());

    const bool device_mode = mode == Trainer::Mode::device;
    int start_epoch = 0;
    bool resuming = false;
    if (cfg.resume && !cfg.out_dir.empty()) {
        const auto latest = fold_checkpoint_paths(cfg, fold).first;
        if (std::filesystem::exists(latest.string() + ".json")) {
            start_epoch = trainer.load_checkpoint(latest) + 1;
            resuming = true;
        }
    }
    auto art = open_fold_artifacts(cfg, fold, device_mode, resuming);

    const opt::LrSchedule schedule = cfg.lr_schedule();
    for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = opt::cosine_lr(epoch, schedule);
        const auto stats =
            trainer.run_epoch(bundle.train, cfg.batch_size, lr, art.events.get(), epoch);
        const auto val = trainer.evaluate(bundle.val);
        if (art.metrics)
            art.metrics->write({{"type", "epoch"},
                                {"fold", fold},
                                {"epoch", epoch},
                                {"lr", lr},
                                {"train_loss", stats.train_loss},
                                {"train_acc", stats.train_accuracy},
                                {"val_loss", val.loss},
                                {"val_acc", val.accuracy},
                                {"events", stats.events},
                                {"cumulative_events", trainer.total_events()}});
        if (art.curve)
            *art.curve << epoch << ',' << lr << ',' << stats.train_loss << ','
                       << stats.train_accuracy << ',' << val.loss << ',' << val.accuracy << ','
                       << trainer.total_events() << "\n";
        if (!cfg.out_dir.empty())
            trainer.save_checkpoint(art.checkpoint_latest, &bundle.norm, epoch);
    }

    const auto val = trainer.evaluate(bundle.val);
    const auto test = trainer.evaluate(bundle.test);
    if (!cfg.out_dir.empty())
        trainer.save_checkpoint(art.checkpoint_final, &bundle.norm, cfg.epochs - 1);
    if (art.metrics)
        art.metrics->write({{"type", "fold_result"},
                            {"fold", fold},
                            {"test_acc", test.accuracy},
                            {"test_loss", test.loss},
                            {"val_acc", val.accuracy},
                            {"cumulative_events", trainer.total_events()}});

    FoldOutcome outcome;
    outcome.fold = fold;
    outcome.test_accuracy = test.accuracy;
    outcome.val_accuracy = val.accuracy;
    outcome.events = trainer.total_events();
    return outcome;
}

RunSummary summarize(std::vector<FoldOutcome> folds) {
    RunSummary s;
    s.folds = std::move(folds);
    if (s.folds.empty()) return s;
    double sum = 0.0;
    for (const auto& f : s.folds) {
        sum += f.test_accuracy;
        s.total_events += f.events;
    }
    s.mean_test_accuracy = sum / s.folds.size();
    double ss = 0.0;
    for (const auto& f : s.folds) {
        const double d = f.test_accuracy - s.mean_test_accuracy;
        ss += d * d;
    }
    s.std_test_accuracy = s.folds.size() > 1 ? std::sqrt(ss / (s.folds.size() - 1)) : 0.0;
    return s;
}

std::vector<int> folds_to_run(const ExperimentConfig& cfg) {
    if (cfg.dataset == "synthetic") return {0};
    if (cfg.fold >= 0) return {cfg.fold};
    std::vector<int> all(cfg.n_folds);
    std::iota(all.begin(), all.end(), 0);
    return all;
}

RunSummary run_training_regime(const ExperimentConfig& cfg, Trainer::Mode mode) {
    cfg.validate();
    std::vector<FoldOutcome> outcomes;
    std::string digest;
    for (int fold : folds_to_run(cfg)) {
        auto bundle = prepare_data(cfg, fold);
        digest = bundle.digest;
        if (outcomes.empty()) write_manifest(cfg, bundle.digest, {{"mode", to_string(regime_from_string(cfg.regime))}});
        outcomes.push_back(train_fold(cfg, mode, fold, bundle));
    }
    auto summary = summarize(std::move(outcomes));
    if (!cfg.out_dir.empty()) {
        json doc = {{"mean_test_accuracy", summary.mean_test_accuracy},
                    {"std_test_accuracy", summary.std_test_accuracy},
                    {"total_events", summary.total_events}};
        std::ofstream out(std::filesystem::path(cfg.out_dir) / "summary.json", std::ios::trunc);
        out << doc.dump(2) << "\n";
    }
    return summary;
}

}  // namespace

RunSummary run_baseline(const ExperimentConfig& cfg) {
    return run_training_regime(cfg, Trainer::Mode::software);
}

RunSummary run_on_device(const ExperimentConfig& cfg) {
    return run_training_regime(cfg, Trainer::Mode::device);
}

RunSummary run_synth_bench(const ExperimentConfig& cfg) {
    ExperimentConfig c = cfg;
    c.dataset = "synthetic";
    c.regime = "synth_bench";
    return run_training_regime(c, Trainer::Mode::software);
}

// --- subject-specific transfer learning ------------------------------------------------

RunSummary run_sstl(const ExperimentConfig& cfg) {
    cfg.validate();
    auto bundle = prepare_data(cfg, cfg.fold >= 0 ? cfg.fold : 0);

    snn::NetworkSpec spec = cfg.network_spec();
    if (!bundle.test.empty() && bundle.test.front().timesteps != spec.timesteps) {
        spec.timesteps = bundle.test.front().timesteps;
        spec.validate();
    }
    opt::AdamConfig adam_cfg{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon};
    const auto kernel = cfg.kernel_params();
    const auto policy = cfg.programming_policy();
    const std::set<std::string> finetune_set(cfg.layers_to_finetune.begin(),
                                             cfg.layers_to_finetune.end());

    write_manifest(cfg, bundle.digest, {{"mode", "sstl"}});
    std::unique_ptr<MetricsWriter> metrics;
    if (!cfg.out_dir.empty())
        metrics = std::make_unique<MetricsWriter>(
            std::filesystem::path(cfg.out_dir) / "metrics.jsonl", false);

    // group the held-out subjects' trials
    std::map<int, std::vector<data::Trial>> by_subject;
    for (auto& t : bundle.test) by_subject[t.subject_id].push_back(std::move(t));

    int before_correct = 0, after_correct = 0, total = 0;
    json per_subject = json::array();
    std::uint64_t total_events = 0;

    for (auto& [subject, trials] : by_subject) {
        if (trials.size() < 4) {
            std::cerr << "sstl: subject " << subject << " has only " << trials.size()
                      << " trials, too few for a 4-way split; skipped\n";
            continue;
        }
        std::sort(trials.begin(), trials.end(), [](const data::Trial& a, const data::Trial& b) {
            return a.run_id != b.run_id ? a.run_id < b.run_id : a.onset_s < b.onset_s;
        });
        // contiguous quarters
        std::array<std::pair<std::size_t, std::size_t>, 4> quarters;
        for (int q = 0; q < 4; ++q)
            quarters[q] = {trials.size() * q / 4, trials.size() * (q + 1) / 4};

        int sub_before = 0, sub_after = 0, sub_total = 0;
        for (int q = 0; q < 4; ++q) {
            const auto [lo, hi] = quarters[q];
            std::vector<data::Trial> heldout(trials.begin() + lo, trials.begin() + hi);
            std::vector<data::Trial> tune;
            for (int p = 0; p < 4; ++p) {
                if (p == q) continue;
                tune.insert(tune.end(), trials.begin() + quarters[p].first,
                            trials.begin() + quarters[p].second);
            }

            Trainer trainer(spec, Trainer::Mode::device, kernel, policy, adam_cfg,
                            cfg.seed + subject * 131, cfg.resolved_threads());
            trainer.load_checkpoint(cfg.checkpoint);
            const auto before = trainer.evaluate(heldout);

            trainer.set_trainable(finetune_set);
            const opt::LrSchedule schedule{cfg.finetune_lr, 0.1 * cfg.finetune_lr,
                                           cfg.finetune_epochs};
            for (int epoch = 0; epoch < cfg.finetune_epochs; ++epoch)
                trainer.run_epoch(tune, cfg.finetune_batch, opt::cosine_lr(epoch, schedule),
                                  nullptr, epoch);
            const auto after = trainer.evaluate(heldout);
            total_events += trainer.total_events();

            for (std::size_t k = 0; k < heldout.size(); ++k) {
                sub_before += before.predictions[k] == heldout[k].label;
                sub_after += after.predictions[k] == heldout[k].label;
                ++sub_total;
            }
        }
        before_correct += sub_before;
        after_correct += sub_after;
        total += sub_total;
        const double acc_before = 100.0 * sub_before / sub_total;
        const double acc_after = 100.0 * sub_after / sub_total;
        per_subject.push_back({{"subject", subject},
                               {"n_trials", sub_total},
                               {"accuracy_before", acc_before},
                               {"accuracy_after", acc_after},
                               {"delta", acc_after - acc_before}});
        if (metrics)
            metrics->write({{"type", "sstl_subject"},
                            {"subject", subject},
                            {"before", acc_before},
                            {"after", acc_after}});
    }
    if (total == 0) throw std::runtime_error("sstl: no subject had enough trials");

    RunSummary summary;
    const double cum_before = 100.0 * before_correct / total;
    const double cum_after = 100.0 * after_correct / total;
    summary.mean_test_accuracy = cum_after;
    summary.total_events = total_events;
    json details = {{"cumulative_before", cum_before},
                    {"cumulative_after", cum_after},
                    {"improvement", cum_after - cum_before},
                    {"per_subject", per_subject}};
    summary.details_json = details.dump(2);
    if (!cfg.out_dir.empty()) {
        std::ofstream out(std::filesystem::path(cfg.out_dir) / "summary.json", std::ios::trunc);
        out << summary.details_json << "\n";
    }
    return summary;
}

// --- weight transfer with re-tuning ------------------------------------------------------

RunSummary run_transfer_retune(const ExperimentConfig& cfg) {
    cfg.validate();
    const int fold = cfg.fold >= 0 ? cfg.fold : 0;
    auto bundle = prepare_data(cfg, fold);

    snn::NetworkSpec spec = cfg.network_spec();
    if (!bundle.train.empty() && bundle.train.front().timesteps != spec.timesteps) {
        spec.timesteps = bundle.train.front().timesteps;
        spec.validate();
    }
    opt::AdamConfig adam_cfg{cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon};
    Trainer trainer(spec, Trainer::Mode::device, cfg.kernel_params(), cfg.programming_policy(),
                    adam_cfg, cfg.seed, cfg.resolved_threads());
    trainer.load_checkpoint(cfg.checkpoint);

    write_manifest(cfg, bundle.digest, {{"mode", "transfer_retune"}});
    std::unique_ptr<MetricsWriter> metrics;
    if (!cfg.out_dir.empty())
        metrics = std::make_unique<MetricsWriter>(
            std::filesystem::path(cfg.out_dir) / "metrics.jsonl", false);

    const auto clean = trainer.evaluate(bundle.test);

    // quantize, then perturb, every synaptic tensor
    Rng noise_rng(cfg.seed ^ 0xfeedbeefu);
    auto refs = snn::tensor_refs(trainer.params(), spec);
    for (const auto& ref : refs) {
        if (ref.kind != snn::TensorRef::Kind::synaptic) continue;
        if (cfg.quant_levels >= 2) fabric::quantize(*ref.data, cfg.quant_levels, ref.bound);
    }
    trainer.reload_device_from_params();
    const auto quantized = trainer.evaluate(bundle.test);

    for (const auto& ref : refs) {
        if (ref.kind != snn::TensorRef::Kind::synaptic) continue;
        if (cfg.eta > 0.0) fabric::add_program_noise(*ref.data, cfg.eta, ref.bound, noise_rng);
    }
    trainer.reload_device_from_params();
    const auto degraded = trainer.evaluate(bundle.test);

    json curve = json::array();
    const opt::LrSchedule schedule{cfg.lr_initial, cfg.lr_final, std::max(1, cfg.retune_epochs)};
    std::vector<double> retuned_acc;
    for (int epoch = 0; epoch < cfg.retune_epochs; ++epoch) {
        trainer.run_epoch(bundle.train, cfg.batch_size, opt::cosine_lr(epoch, schedule), nullptr,
                          epoch);
        const auto val = trainer.evaluate(bundle.val);
        const auto test = trainer.evaluate(bundle.test);
        retuned_acc.push_back(test.accuracy);
        curve.push_back({{"epoch", epoch}, {"val_acc", val.accuracy}, {"test_acc", test.accuracy}});
        if (metrics)
            metrics->write({{"type", "retune_epoch"},
                            {"epoch", epoch},
                            {"val_acc", val.accuracy},
                            {"test_acc", test.accuracy}});
    }
    const double final_acc = retuned_acc.empty() ? degraded.accuracy : retuned_acc.back();

    RunSummary summary;
    FoldOutcome outcome;
    outcome.fold = fold;
    outcome.test_accuracy = final_acc;
    outcome.events = trainer.total_events();
    summary.folds.push_back(outcome);
    summary.mean_test_accuracy = final_acc;
    summary.total_events = trainer.total_events();
    json details = {{"accuracy_clean", clean.accuracy},
                    {"accuracy_quantized", quantized.accuracy},
                    {"accuracy_quantized_noisy", degraded.accuracy},
                    {"accuracy_after_retune", final_acc},
                    {"first_epoch_accuracy", retuned_acc.empty() ? degraded.accuracy : retuned_acc.front()},
                    {"quant_levels", cfg.quant_levels},
                    {"eta", cfg.eta},
                    {"curve", curve}};
    summary.details_json = details.dump(2);
    if (!cfg.out_dir.empty()) {
        std::ofstream out(std::filesystem::path(cfg.out_dir) / "summary.json", std::ios::trunc);
        out << summary.details_json << "\n";
    }
    return summary;
}

// --- device calibration --------------------------------------------------------------------

void write_synthetic_pulse_log(const std::filesystem::path& path,
                               const device::FerroKernelParams& params, double noise_std,
                               std::uint64_t seed, int cycles) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << "pulse_index,pulse_amplitude_V,pulse_width_us,read_conductance_S\n";

    // normalized weight mapped onto the measured 10-100 Mohm window
    const double g_lo = 1e-8, g_hi = 1e-7;
    auto conductance = [&](double w) { return g_lo + w * (g_hi - g_lo); };

    Rng rng(seed);
    double w = 0.95;
    long index = 0;
    out << index++ << ",0,0," << conductance(w) << "\n";  // initial read
    for (int cycle = 0; cycle < cycles; ++cycle) {
        // depression ramp: positive amplitudes step the conductance down
        for (int p = 0; p < 60; ++p) {
            const double amp = 0.05 + 0.05 * (p % 25);
            w = device::apply_pulse(w, device::Polarity::ltd, params, noise_std, rng);
            out << index++ << ',' << amp << ",50," << conductance(w) << "\n";
        }
        // potentiation ramp: negative amplitudes step it back up
        for (int p = 0; p < 60; ++p) {
            const double amp = -(0.05 + 0.05 * (p % 20));
            w = device::apply_pulse(w, device::Polarity::ltp, params, noise_std, rng);
            out << index++ << ',' << amp << ",50," << conductance(w) << "\n";
        }
    }
}

device::KernelFitReport run_fit_device(const ExperimentConfig& cfg) {
    cfg.validate();
    std::string log_path = cfg.device_log;
    if (!cfg.synth_log_out.empty()) {
        write_synthetic_pulse_log(cfg.synth_log_out, device::FerroKernelParams::characterized(),
                                  cfg.synth_log_noise, cfg.seed);
        if (log_path.empty()) log_path = cfg.synth_log_out;
    }

    const auto log = device::read_pulse_log_file(log_path);
    std::optional<std::pair<double, double>> range;
    if (cfg.device_g_max > cfg.device_g_min && cfg.device_g_max > 0.0)
        range = std::make_pair(cfg.device_g_min, cfg.device_g_max);
    const auto characterization = device::derive_characterization(log, range);
    const auto report = device::fit_kernel(characterization.samples);

    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        write_manifest(cfg, "", {{"device_log", log_path}});
        device::save_kernel_report(report,
                                   std::filesystem::path(cfg.out_dir) / "kernel_params.json");
        json levels = json::array();
        for (const auto& lv : characterization.levels)
            levels.push_back({{"amplitude_v", lv.pulse_amplitude},
                              {"mean_conductance", lv.mean_conductance},
                              {"std_conductance",
                               lv.std_conductance ? json(*lv.std_conductance) : json(nullptr)},
                              {"count", lv.sample_count}});
        json doc = {{"levels", levels},
                    {"max_relative_std", characterization.max_relative_std},
                    {"ltp_residual_rms", report.ltp.residual_rms},
                    {"ltd_residual_rms", report.ltd.residual_rms}};
        std::ofstream out(std::filesystem::path(cfg.out_dir) / "characterization_report.json",
                          std::ios::trunc);
        out << doc.dump(2) << "\n";
    }
    return report;
}

}  // namespace ferrosnn::exp
