#include "ferrosnn/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace ferrosnn::data {

using nlohmann::json;

// --- zero-phase Butterworth band-pass -----------------------------------------

namespace {

struct Biquad {
    double b0, b1, b2, a1, a2;  // a0 normalized to 1
};

enum class Edge { lowpass, highpass };

// RBJ cookbook biquad for one Butterworth section.
Biquad design_biquad(Edge edge, double fc, double fs, double q) {
    const double w0 = 2.0 * std::numbers::pi * fc / fs;
    const double cw = std::cos(w0), sw = std::sin(w0);
    const double alpha = sw / (2.0 * q);
    double b0, b1, b2;
    if (edge == Edge::lowpass) {
        b0 = (1.0 - cw) / 2.0;
        b1 = 1.0 - cw;
        b2 = (1.0 - cw) / 2.0;
    } else {
        b0 = (1.0 + cw) / 2.0;
        b1 = -(1.0 + cw);
        b2 = (1.0 + cw) / 2.0;
    }
    const double a0 = 1.0 + alpha;
    return {b0 / a0, b1 / a0, b2 / a0, -2.0 * cw / a0, (1.0 - alpha) / a0};
}

std::vector<Biquad> butterworth(Edge edge, double fc, double fs, int order) {
    if (order < 2 || order % 2 != 0)
        throw FilterError("Butterworth order must be a positive even number");
    std::vector<Biquad> sections;
    for (int k = 0; k < order / 2; ++k) {
        const double theta = std::numbers::pi * (2.0 * k + 1.0) / (2.0 * order);
        sections.push_back(design_biquad(edge, fc, fs, 1.0 / (2.0 * std::cos(theta))));
    }
    return sections;
}

// Single pass through the cascade with step-response initial conditions, so a
// constant input produces the cascade's DC gain immediately (no start-up
// transient). Direct form II transposed.
void cascade_filter(std::vector<double>& x, const std::vector<Biquad>& sections) {
    double level = x.empty() ? 0.0 : x.front();
    for (const auto& s : sections) {
        const double dc_gain = (s.b0 + s.b1 + s.b2) / (1.0 + s.a1 + s.a2);
        const double y0 = dc_gain * level;
        double z1 = y0 - s.b0 * level;
        double z2 = s.b2 * level - s.a2 * y0;
        for (double& v : x) {
            const double in = v;
            const double out = s.b0 * in + z1;
            z1 = s.b1 * in - s.a1 * out + z2;
            z2 = s.b2 * in - s.a2 * out;
            v = out;
        }
        level = y0;
    }
}

constexpr std::size_t kFilterWarmup = 64;  // minimum series length, samples

}  // namespace

std::vector<double> bandpass(std::span<const double> x, double fs, const BandpassSpec& spec) {
    if (fs <= 0.0) throw FilterError("sampling rate must be positive");
    if (spec.low_hz <= 0.0 || spec.low_hz >= fs / 2.0)
        throw FilterError("low edge must sit inside (0, fs/2)");
    if (x.size() < kFilterWarmup)
        throw FilterError("series of " + std::to_string(x.size()) +
                          " samples is shorter than the filter warm-up length (" +
                          std::to_string(kFilterWarmup) + ")");

    // An upper edge at or above Nyquist cannot be realized; fall back to an
    // anti-aliasing-style low-pass just under it (80 Hz at fs=160 becomes 79).
    const double nyquist = fs / 2.0;
    const double high = spec.high_hz >= nyquist ? 0.49375 * fs : spec.high_hz;

    auto sections = butterworth(Edge::highpass, spec.low_hz, fs, spec.order);
    for (const auto& s : butterworth(Edge::lowpass, high, fs, spec.order)) sections.push_back(s);

    const std::size_t n = x.size();
    const std::size_t pad = std::min<std::size_t>(n - 1, 3 * static_cast<std::size_t>(fs));

    // odd reflection padding on both ends
    std::vector<double> ext;
    ext.reserve(n + 2 * pad);
    for (std::size_t i = 0; i < pad; ++i) ext.push_back(2.0 * x[0] - x[pad - i]);
    ext.insert(ext.end(), x.begin(), x.end());
    for (std::size_t i = 0; i < pad; ++i) ext.push_back(2.0 * x[n - 1] - x[n - 2 - i]);

    cascade_filter(ext, sections);
    std::reverse(ext.begin(), ext.end());
    cascade_filter(ext, sections);
    std::reverse(ext.begin(), ext.end());

    return std::vector<double>(ext.begin() + pad, ext.begin() + pad + n);
}

// --- electrode grid --------------------------------------------------------------

std::string normalize_electrode_label(const std::string& raw) {
    std::string out;
    for (char c : raw) {
        if (c == '.' || c == ' ' || c == '\t') continue;
        out.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return out;
}

GridLayout GridLayout::default_64() {
    // 64-channel 10-10 montage embedded in the 10x11 mesh, front row first.
    static const std::vector<std::pair<int, std::vector<const char*>>> mesh = {
        {4, {"FP1", "FPZ", "FP2"}},
        {3, {"AF7", "AF3", "AFZ", "AF4", "AF8"}},
        {1, {"F7", "F5", "F3", "F1", "FZ", "F2", "F4", "F6", "F8"}},
        {1, {"FT7", "FC5", "FC3", "FC1", "FCZ", "FC2", "FC4", "FC6", "FT8"}},
        {0, {"T9", "T7", "C5", "C3", "C1", "CZ", "C2", "C4", "C6", "T8", "T10"}},
        {1, {"TP7", "CP5", "CP3", "CP1", "CPZ", "CP2", "CP4", "CP6", "TP8"}},
        {1, {"P7", "P5", "P3", "P1", "PZ", "P2", "P4", "P6", "P8"}},
        {3, {"PO7", "PO3", "POZ", "PO4", "PO8"}},
        {4, {"O1", "OZ", "O2"}},
        {5, {"IZ"}},
    };
    GridLayout layout;
    for (int row = 0; row < static_cast<int>(mesh.size()); ++row) {
        const auto& [start_col, labels] = mesh[row];
        for (int i = 0; i < static_cast<int>(labels.size()); ++i)
            layout.mapping.emplace_back(labels[i], std::make_pair(row, start_col + i));
    }
    layout.validate();
    return layout;
}

void GridLayout::validate() const {
    std::set<std::string> seen_labels;
    std::set<std::pair<int, int>> seen_cells;
    for (const auto& [label, cell] : mapping) {
        const std::string norm = normalize_electrode_label(label);
        if (norm.empty()) throw ConfigError("grid layout: empty electrode label");
        if (!seen_labels.insert(norm).second)
            throw ConfigError("grid layout: duplicate electrode label '" + label + "'");
        if (cell.first < 0 || cell.first >= rows || cell.second < 0 || cell.second >= cols)
            throw ConfigError("grid layout: cell out of range for '" + label + "'");
        if (!seen_cells.insert(cell).second)
            throw ConfigError("grid layout: duplicate cell assignment at (" +
                              std::to_string(cell.first) + "," + std::to_string(cell.second) + ")");
    }
}

GridLayout GridLayout::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open layout file " + path.string());
    json doc = json::parse(in);
    GridLayout layout;
    layout.rows = doc.at("rows").get<int>();
    layout.cols = doc.at("cols").get<int>();
    for (const auto& e : doc.at("electrodes"))
        layout.mapping.emplace_back(e.at("label").get<std::string>(),
                                    std::make_pair(e.at("row").get<int>(), e.at("col").get<int>()));
    layout.validate();
    return layout;
}

void GridLayout::save(const std::filesystem::path& path) const {
    json doc;
    doc["rows"] = rows;
    doc["cols"] = cols;
    auto arr = json::array();
    for (const auto& [label, cell] : mapping)
        arr.push_back({{"label", label}, {"row", cell.first}, {"col", cell.second}});
    doc["electrodes"] = arr;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
    out << doc.dump(2) << "\n";
}

std::vector<int> resolve_channel_cells(const std::vector<std::string>& channel_labels,
                                       const GridLayout& layout) {
    std::map<std::string, int> cell_of;
    for (const auto& [label, cell] : layout.mapping)
        cell_of[normalize_electrode_label(label)] = cell.first * layout.cols + cell.second;
    std::vector<int> cells;
    cells.reserve(channel_labels.size());
    for (const auto& raw : channel_labels) {
        const auto it = cell_of.find(normalize_electrode_label(raw));
        cells.push_back(it == cell_of.end() ? -1 : it->second);
    }
    return cells;
}

void project_grid(std::span<const double> channels, const std::vector<int>& cell_of_channel,
                  int rows, int cols, std::span<double> frame) {
    if (channels.size() != cell_of_channel.size())
        throw std::invalid_argument("project_grid: channel/cell count mismatch");
    if (frame.size() != static_cast<std::size_t>(rows) * cols)
        throw std::invalid_argument("project_grid: frame is not rows x cols");
    std::fill(frame.begin(), frame.end(), 0.0);
    for (std::size_t c = 0; c < channels.size(); ++c)
        if (cell_of_channel[c] >= 0) frame[cell_of_channel[c]] = channels[c];
}

// --- trials -----------------------------------------------------------------------

CueTable CueTable::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open cue table " + path.string());
    json doc = json::parse(in);
    CueTable t;
    t.imagery_runs.clear();
    for (int r : doc.at("imagery_runs")) t.imagery_runs.insert(r);
    t.label_for_code.clear();
    for (const auto& [code, label] : doc.at("labels").items())
        t.label_for_code[code] = label.get<int>();
    return t;
}

void CueTable::save(const std::filesystem::path& path) const {
    json doc;
    doc["imagery_runs"] = imagery_runs;
    doc["labels"] = label_for_code;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw ConfigError("cannot open " + path.string() + " for writing");
    out << doc.dump(2) << "\n";
}

std::vector<Trial> extract_trials(const EdfRecording& rec, const GridLayout& layout,
                                  const CueTable& cues, int subject_id, int run_id,
                                  const ExtractionOptions& opts,
                                  std::vector<std::string>* skipped) {
    if (!cues.imagery_runs.contains(run_id)) return {};

    std::vector<std::size_t> eeg_signals;
    std::vector<std::string> labels;
    for (std::size_t s = 0; s < rec.signals.size(); ++s) {
        if (rec.signals[s].is_annotation_channel()) continue;
        eeg_signals.push_back(s);
        labels.push_back(rec.signals[s].label);
    }
    if (eeg_signals.empty()) return {};
    const auto cells = resolve_channel_cells(labels, layout);

    const double fs = rec.sampling_rate(eeg_signals.front());
    for (auto s : eeg_signals)
        if (rec.sampling_rate(s) != fs)
            throw ConfigError("mixed sampling rates within one recording are not supported");

    const int T = static_cast<int>(std::lround(opts.window_s * fs));
    const std::size_t n_samples = rec.sample_count(eeg_signals.front());

    // physical conversion + per-run zero-phase filtering, before any epoching
    std::vector<std::vector<double>> series(eeg_signals.size());
    for (std::size_t c = 0; c < eeg_signals.size(); ++c) {
        const auto sig = eeg_signals[c];
        const auto& hdr = rec.signals[sig];
        std::vector<double> phys(rec.samples[sig].size());
        for (std::size_t k = 0; k < phys.size(); ++k) phys[k] = hdr.to_physical(rec.samples[sig][k]);
        series[c] = opts.apply_filter ? bandpass(phys, fs, opts.filter) : std::move(phys);
    }

    std::vector<Trial> trials;
    for (const auto& ann : rec.annotations) {
        const auto it = cues.label_for_code.find(ann.label);
        if (it == cues.label_for_code.end()) continue;
        const auto start = static_cast<std::size_t>(std::llround(ann.onset_s * fs));
        if (start + T > n_samples) {
            if (skipped)
                skipped->push_back("cue '" + ann.label + "' at " + std::to_string(ann.onset_s) +
                                   "s too close to the recording end, trial dropped");
            continue;
        }
        Trial trial;
        trial.label = it->second;
        trial.subject_id = subject_id;
        trial.run_id = run_id;
        trial.onset_s = ann.onset_s;
        trial.timesteps = T;
        trial.rows = layout.rows;
        trial.cols = layout.cols;
        trial.input.assign(static_cast<std::size_t>(T) * layout.rows * layout.cols, 0.0f);
        std::vector<double> channel_values(eeg_signals.size());
        std::vector<double> frame(static_cast<std::size_t>(layout.rows) * layout.cols);
        for (int t = 0; t < T; ++t) {
            for (std::size_t c = 0; c < eeg_signals.size(); ++c)
                channel_values[c] = series[c][start + t];
            project_grid(channel_values, cells, layout.rows, layout.cols, frame);
            for (std::size_t j = 0; j < frame.size(); ++j)
                trial.input[static_cast<std::size_t>(t) * frame.size() + j] =
                    static_cast<float>(frame[j]);
        }
        trials.push_back(std::move(trial));
    }
    return trials;
}

// --- normalization ----------------------------------------------------------------

NormStats compute_norm_stats(const std::vector<Trial>& training_trials) {
    if (training_trials.empty()) throw std::invalid_argument("compute_norm_stats: no trials");
    const int rows = training_trials.front().rows;
    const int cols = training_trials.front().cols;
    const std::size_t cells = static_cast<std::size_t>(rows) * cols;

    std::vector<double> sum(cells, 0.0), sq(cells, 0.0);
    std::size_t count = 0;
    for (const auto& tr : training_trials) {
        for (int t = 0; t < tr.timesteps; ++t)
            for (std::size_t j = 0; j < cells; ++j) {
                const double v = tr.input[static_cast<std::size_t>(t) * cells + j];
                sum[j] += v;
                sq[j] += v * v;
            }
        count += tr.timesteps;
    }

    NormStats st;
    st.rows = rows;
    st.cols = cols;
    st.mean.resize(cells);
    st.stdev.resize(cells);
    for (std::size_t j = 0; j < cells; ++j) {
        const double mean = sum[j] / static_cast<double>(count);
        const double var = std::max(sq[j] / static_cast<double>(count) - mean * mean, 0.0);
        const double sd = std::sqrt(var);
        st.mean[j] = static_cast<float>(mean);
        st.stdev[j] = sd > 1e-12 ? static_cast<float>(sd) : 1.0f;  // empty cells stay untouched
    }
    return st;
}

void apply_norm(std::vector<Trial>& trials, const NormStats& stats) {
    const std::size_t cells = stats.mean.size();
    for (auto& tr : trials) {
        if (static_cast<std::size_t>(tr.rows) * tr.cols != cells)
            throw std::invalid_argument("apply_norm: grid size mismatch");
        for (int t = 0; t < tr.timesteps; ++t)
            for (std::size_t j = 0; j < cells; ++j) {
                auto& v = tr.input[static_cast<std::size_t>(t) * cells + j];
                v = (v - stats.mean[j]) / stats.stdev[j];
            }
    }
}

// --- folds ------------------------------------------------------------------------

std::vector<int> FoldPlan::train_subjects(int fold) const {
    std::vector<int> out;
    for (int f = 0; f < n_folds(); ++f) {
        if (f == fold) continue;
        out.insert(out.end(), test_subjects[f].begin(), test_subjects[f].end());
    }
    std::sort(out.begin(), out.end());
    return out;
}

void FoldPlan::validate_partition() const {
    std::set<int> seen;
    for (const auto& fold : test_subjects)
        for (int s : fold)
            if (!seen.insert(s).second)
                throw ConfigError("fold plan: subject " + std::to_string(s) +
                                  " appears in more than one test fold");
}

FoldPlan make_folds(std::vector<int> subjects, int n_folds,
                    std::optional<std::size_t> expected_count, double train_fraction) {
    if (n_folds < 2) throw ConfigError("make_folds: need at least 2 folds");
    std::sort(subjects.begin(), subjects.end());
    subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
    if (expected_count && subjects.size() != *expected_count) {
        std::ostringstream msg;
        msg << "make_folds: expected " << *expected_count << " included subjects, got "
            << subjects.size() << "; ids present:";
        for (int s : subjects) msg << ' ' << s;
        throw ConfigError(msg.str());
    }
    if (subjects.size() < static_cast<std::size_t>(n_folds))
        throw ConfigError("make_folds: fewer subjects than folds");

    FoldPlan plan;
    plan.train_fraction = train_fraction;
    const std::size_t base = subjects.size() / n_folds;
    const std::size_t extra = subjects.size() % n_folds;
    std::size_t pos = 0;
    for (int f = 0; f < n_folds; ++f) {
        const std::size_t size = base + (static_cast<std::size_t>(f) < extra ? 1 : 0);
        plan.test_subjects.emplace_back(subjects.begin() + pos, subjects.begin() + pos + size);
        pos += size;
    }
    plan.validate_partition();
    return plan;
}

// --- synthetic dataset ---------------------------------------------------------------

std::vector<Trial> synth_dataset(const SynthSpec& spec, int n_trials, std::uint64_t seed) {
    Rng rng(seed);
    struct SubjectShift {
        double df_a, df_b, gain;
    };
    std::vector<SubjectShift> shifts;
    for (int s = 0; s < spec.n_subjects; ++s) {
        SubjectShift sh;
        sh.df_a = spec.subject_freq_jitter_hz > 0 ? rng.normal(0.0, spec.subject_freq_jitter_hz) : 0.0;
        sh.df_b = spec.subject_freq_jitter_hz > 0 ? rng.normal(0.0, spec.subject_freq_jitter_hz) : 0.0;
        sh.gain = std::max(0.1, 1.0 + (spec.subject_gain_jitter > 0
                                           ? rng.normal(0.0, spec.subject_gain_jitter)
                                           : 0.0));
        shifts.push_back(sh);
    }

    const std::size_t cells = static_cast<std::size_t>(spec.rows) * spec.cols;
    std::vector<Trial> trials;
    trials.reserve(n_trials);
    for (int i = 0; i < n_trials; ++i) {
        Trial tr;
        tr.label = i % 2;
        tr.subject_id = (i / 2) % spec.n_subjects;
        tr.run_id = i / std::max(1, n_trials / 3 + 1) + 1;  // a few nominal runs per subject
        tr.timesteps = spec.timesteps;
        tr.rows = spec.rows;
        tr.cols = spec.cols;
        tr.onset_s = i;
        tr.input.assign(static_cast<std::size_t>(spec.timesteps) * cells, 0.0f);

        const auto& sh = shifts[tr.subject_id];
        const double freq = tr.label == 0 ? spec.freq_a + sh.df_a : spec.freq_b + sh.df_b;
        const int* region = tr.label == 0 ? spec.region_a : spec.region_b;
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        // per-trial amplitude mixture: easy and hard trials, like real sessions
        const double spread = std::clamp(spec.amplitude_spread, 0.0, 1.0);
        const double amp = spec.amplitude * rng.uniform(1.0 - spread, 1.0 + spread);

        for (int t = 0; t < spec.timesteps; ++t) {
            const double osc =
                sh.gain * amp *
                std::sin(2.0 * std::numbers::pi * freq * static_cast<double>(t) / spec.fs + phase);
            for (int r = 0; r < spec.rows; ++r)
                for (int c = 0; c < spec.cols; ++c) {
                    double v = 0.0;
                    if (r >= region[0] && r < region[1] && c >= region[2] && c < region[3]) v = osc;
                    if (spec.noise_std > 0.0) v += rng.normal(0.0, spec.noise_std);
                    tr.input[(static_cast<std::size_t>(t) * spec.rows + r) * spec.cols + c] =
                        static_cast<float>(v);
                }
        }
        trials.push_back(std::move(tr));
    }
    return trials;
}

// --- trial cache -----------------------------------------------------------------------

void save_trials(const std::vector<Trial>& trials, const std::filesystem::path& base,
                 const std::map<std::string, std::string>& meta) {
    const auto bin_path = std::filesystem::path(base).replace_extension(".bin");
    const auto man_path = std::filesystem::path(base).replace_extension(".json");
    std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("cannot open " + bin_path.string() + " for writing");

    json entries = json::array();
    std::size_t offset = 0;
    for (const auto& tr : trials) {
        entries.push_back({{"subject", tr.subject_id},
                           {"run", tr.run_id},
                           {"label", tr.label},
                           {"onset_s", tr.onset_s},
                           {"timesteps", tr.timesteps},
                           {"rows", tr.rows},
                           {"cols", tr.cols},
                           {"offset", offset}});
        bin.write(reinterpret_cast<const char*>(tr.input.data()),
                  static_cast<std::streamsize>(tr.input.size() * sizeof(float)));
        offset += tr.input.size() * sizeof(float);
    }
    json doc;
    doc["format"] = "ferrosnn-trials-v1";
    doc["dtype"] = "f32";
    doc["byte_order"] = "little";
    doc["meta"] = meta;
    doc["trials"] = entries;
    std::ofstream man(man_path, std::ios::trunc);
    if (!man) throw std::runtime_error("cannot open " + man_path.string() + " for writing");
    man << doc.dump(2) << "\n";
}

std::vector<Trial> load_trials(const std::filesystem::path& base,
                               std::map<std::string, std::string>* meta) {
    const auto bin_path = std::filesystem::path(base).replace_extension(".bin");
    const auto man_path = std::filesystem::path(base).replace_extension(".json");
    std::ifstream man(man_path);
    if (!man) throw std::runtime_error("cannot open " + man_path.string());
    json doc = json::parse(man);
    if (doc.value("dtype", "") != "f32" || doc.value("byte_order", "") != "little")
        throw std::runtime_error("unsupported trial cache encoding in " + man_path.string());
    if (meta) *meta = doc.value("meta", std::map<std::string, std::string>{});

    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw std::runtime_error("cannot open " + bin_path.string());

    std::vector<Trial> trials;
    for (const auto& e : doc.at("trials")) {
        Trial tr;
        tr.subject_id = e.at("subject").get<int>();
        tr.run_id = e.at("run").get<int>();
        tr.label = e.at("label").get<int>();
        tr.onset_s = e.at("onset_s").get<double>();
        tr.timesteps = e.at("timesteps").get<int>();
        tr.rows = e.at("rows").get<int>();
        tr.cols = e.at("cols").get<int>();
        tr.input.resize(static_cast<std::size_t>(tr.timesteps) * tr.rows * tr.cols);
        bin.seekg(static_cast<std::streamoff>(e.at("offset").get<std::size_t>()));
        bin.read(reinterpret_cast<char*>(tr.input.data()),
                 static_cast<std::streamsize>(tr.input.size() * sizeof(float)));
        if (!bin) throw std::runtime_error("trial cache " + bin_path.string() + " truncated");
        trials.push_back(std::move(tr));
    }
    return trials;
}

}  // namespace ferrosnn::data
