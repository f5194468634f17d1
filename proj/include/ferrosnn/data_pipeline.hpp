#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ferrosnn/rng.hpp"

namespace ferrosnn::data {

// --- EDF / EDF+ container ---------------------------------------------------

struct EdfSignalHeader {
    std::string label;
    std::string transducer;
    std::string physical_dim;
    double physical_min = 0.0;
    double physical_max = 0.0;
    long digital_min = 0;
    long digital_max = 0;
    std::string prefiltering;
    int samples_per_record = 0;
    std::string reserved;

    bool is_annotation_channel() const { return label == "EDF Annotations"; }
    // physical = (digital - digital_min) * (pmax - pmin) / (dmax - dmin) + pmin
    double to_physical(std::int16_t digital) const;
};

struct EdfAnnotation {
    double onset_s = 0.0;
    double duration_s = 0.0;  // 0 when the TAL carried no duration
    std::string label;
};

struct EdfRecording {
    std::string version;  // "0" for EDF
    std::string patient_id;
    std::string recording_id;
    std::string start_date;  // dd.mm.yy
    std::string start_time;  // hh.mm.ss
    std::string reserved;    // "EDF+C" for continuous EDF+
    long n_records = 0;
    double record_duration_s = 1.0;
    std::vector<EdfSignalHeader> signals;
    // per signal, samples concatenated across records; annotation channels
    // keep their raw bytes packed into int16 little-endian pairs
    std::vector<std::vector<std::int16_t>> samples;
    std::vector<EdfAnnotation> annotations;  // decoded from all annotation channels
    std::vector<std::string> warnings;

    double sampling_rate(std::size_t signal) const {
        return signals.at(signal).samples_per_record / record_duration_s;
    }
    std::size_t sample_count(std::size_t signal) const { return samples.at(signal).size(); }
};

class EdfParseError : public std::runtime_error {
public:
    EdfParseError(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          byte_offset(offset) {}
    std::size_t byte_offset;
};

EdfRecording parse_edf(std::span<const std::uint8_t> bytes);
// Canonical serialization: write(parse(write(r))) is byte-identical and
// sample payloads always round-trip exactly.
std::vector<std::uint8_t> write_edf(const EdfRecording& rec);

// Pack annotations into the int16 payload of an "EDF Annotations" channel
// (record-onset TAL per record, event TALs in their records). Throws if
// samples_per_record is too small to hold a record's TALs.
std::vector<std::int16_t> encode_annotation_payload(const std::vector<EdfAnnotation>& annotations,
                                                    long n_records, double record_duration_s,
                                                    int samples_per_record);

EdfRecording read_edf_file(const std::filesystem::path& path);
void write_edf_file(const EdfRecording& rec, const std::filesystem::path& path);

// --- filtering ----------------------------------------------------------------

struct BandpassSpec {
    double low_hz = 0.1;
    double high_hz = 80.0;
    int order = 4;  // per edge, Butterworth
};

class FilterError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Zero-phase Butterworth band-pass (forward-backward biquad cascades). An
// upper edge at or above Nyquist is replaced by a 0.49375*fs low-pass, which
// realizes the 0.1-80 Hz band at fs=160 as 0.1-79.
std::vector<double> bandpass(std::span<const double> x, double fs, const BandpassSpec& spec = {});

// --- electrode grid -------------------------------------------------------------

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GridLayout {
    int rows = 10;
    int cols = 11;
    // electrode label -> (row, col); labels are matched case-insensitively
    // with trailing dots/whitespace stripped
    std::vector<std::pair<std::string, std::pair<int, int>>> mapping;

    static GridLayout default_64();  // the 64-channel 10-10 montage mesh
    static GridLayout load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    void validate() const;  // unique labels, unique in-range cells

    std::size_t size() const { return mapping.size(); }
};

std::string normalize_electrode_label(const std::string& raw);

// Embed per-channel values into the grid; cells without an electrode stay 0.
void project_grid(std::span<const double> channels, const std::vector<int>& cell_of_channel,
                  int rows, int cols, std::span<double> frame);

// Resolve each recording channel label to its flattened grid cell; -1 for
// channels absent from the layout (e.g. annotation channels).
std::vector<int> resolve_channel_cells(const std::vector<std::string>& channel_labels,
                                       const GridLayout& layout);

// --- trials ---------------------------------------------------------------------

struct Trial {
    std::vector<float> input;  // T * rows * cols, time-major
    int label = 0;             // 0 = left, 1 = right
    int subject_id = 0;
    int run_id = 0;
    double onset_s = 0.0;
    int timesteps = 0;
    int rows = 0;
    int cols = 0;
};

// Which annotation codes mean which class, per imagery run.
struct CueTable {
    std::set<int> imagery_runs{4, 8, 12};
    std::map<std::string, int> label_for_code{{"T1", 0}, {"T2", 1}};

    static CueTable load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

struct ExtractionOptions {
    double window_s = 1.0;  // cue-locked segment length
    BandpassSpec filter;
    bool apply_filter = true;
};

// Cue-locked segments from one recording: per matching annotation, window_s
// seconds of all mapped channels, filtered per run and projected to the grid.
// Cues too close to the end of the recording are dropped with a note in
// `skipped`, not an error.
std::vector<Trial> extract_trials(const EdfRecording& rec, const GridLayout& layout,
                                  const CueTable& cues, int subject_id, int run_id,
                                  const ExtractionOptions& opts,
                                  std::vector<std::string>* skipped = nullptr);

// --- normalization (training-fold statistics only) -------------------------------

struct NormStats {
    std::vector<float> mean;  // per grid cell
    std::vector<float> stdev; // per grid cell; 1 where a cell is always zero
    int rows = 0, cols = 0;
};

NormStats compute_norm_stats(const std::vector<Trial>& training_trials);
void apply_norm(std::vector<Trial>& trials, const NormStats& stats);

// --- folds ------------------------------------------------------------------------

struct FoldPlan {
    std::vector<std::vector<int>> test_subjects;  // one list per fold
    double train_fraction = 0.8;

    int n_folds() const { return static_cast<int>(test_subjects.size()); }
    std::vector<int> train_subjects(int fold) const;
    void validate_partition() const;  // disjoint + covering
};

// Deterministic identifier-ordered partition into n_folds subsets; the first
// (n mod n_folds) subsets take the extra subject. If expected_count is given
// and does not match, throws ConfigError naming the missing/extra ids.
FoldPlan make_folds(std::vector<int> subjects, int n_folds = 5,
                    std::optional<std::size_t> expected_count = std::nullopt,
                    double train_fraction = 0.8);

// --- synthetic desk-scale dataset ---------------------------------------------------

struct SynthSpec {
    int timesteps = 40;
    int rows = 10, cols = 11;
    double fs = 160.0;
    double freq_a = 12.0, freq_b = 30.0;       // class-specific oscillation, Hz
    int region_a[4] = {1, 5, 1, 10};           // row0, row1, col0, col1 (end-exclusive)
    int region_b[4] = {6, 10, 1, 10};
    double amplitude = 3.0;
    double amplitude_spread = 0.6;             // per-trial amplitude in amp*(1 +- spread)
    double noise_std = 0.5;                    // additive Gaussian everywhere
    int n_subjects = 10;
    double subject_freq_jitter_hz = 0.0;       // per-subject frequency shift
    double subject_gain_jitter = 0.0;          // per-subject amplitude scale spread
};

// Balanced two-class trials; classes differ by where and how fast the planted
// oscillation sits. Subject ids cycle 0..n_subjects-1 so fold plans work on
// synthetic data too.
std::vector<Trial> synth_dataset(const SynthSpec& spec, int n_trials, std::uint64_t seed);

// --- trial cache ---------------------------------------------------------------------

void save_trials(const std::vector<Trial>& trials, const std::filesystem::path& base,
                 const std::map<std::string, std::string>& meta = {});
std::vector<Trial> load_trials(const std::filesystem::path& base,
                               std::map<std::string, std::string>* meta = nullptr);

}  // namespace ferrosnn::data
