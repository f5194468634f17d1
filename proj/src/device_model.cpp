#include "ferrosnn/device_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "json.hpp"

namespace ferrosnn::device {

using nlohmann::json;

const char* to_string(Polarity p) { return p == Polarity::ltp ? "ltp" : "ltd"; }

// w^e evaluated as exp(e*ln(w)) with rail short-circuits so that ln(0) is
// never formed. 0^0 is taken as 1 (the alpha==1 limit).
static double pow_term(double base, double expo) {
    if (base <= 0.0) {
        if (expo > 0.0) return 0.0;
        if (expo == 0.0) return 1.0;
        return std::numeric_limits<double>::infinity();
    }
    return std::exp(expo * std::log(base));
}

static double kernel_shape(double w, double alpha, double beta) {
    return pow_term(w, alpha - 1.0) * pow_term(1.0 - w, beta - 1.0);
}

double delta_w(double w, Polarity polarity, const FerroKernelParams& p) {
    if (!(w >= 0.0 && w <= 1.0))
        throw std::domain_error("delta_w: normalized conductance " + std::to_string(w) +
                                " outside [0,1]; weight mapping upstream is broken");
    if (polarity == Polarity::ltp) return p.a_plus * kernel_shape(w, p.alpha_plus, p.beta_plus);
    return -p.a_minus * kernel_shape(w, p.alpha_minus, p.beta_minus);
}

double apply_pulse(double w, Polarity polarity, const FerroKernelParams& params,
                   double write_noise_std, Rng& rng) {
    double next = w + delta_w(w, polarity, params);
    if (write_noise_std > 0.0) next += rng.normal(0.0, write_noise_std);
    return std::clamp(next, 0.0, 1.0);
}

std::vector<LevelStatistics> level_statistics(
    const std::vector<std::pair<double, std::vector<double>>>& grouped_reads) {
    std::vector<LevelStatistics> out;
    out.reserve(grouped_reads.size());
    for (const auto& [amplitude, reads] : grouped_reads) {
        if (reads.empty())
            throw std::invalid_argument("level_statistics: empty read group at amplitude " +
                                        std::to_string(amplitude));
        LevelStatistics ls;
        ls.pulse_amplitude = amplitude;
        ls.sample_count = reads.size();
        double sum = 0.0;
        for (double r : reads) sum += r;
        ls.mean_conductance = sum / static_cast<double>(reads.size());
        if (reads.size() >= 2) {
            double ss = 0.0;
            for (double r : reads) {
                const double d = r - ls.mean_conductance;
                ss += d * d;
            }
            ls.std_conductance = std::sqrt(ss / static_cast<double>(reads.size() - 1));
        }
        out.push_back(ls);
    }
    std::sort(out.begin(), out.end(), [](const LevelStatistics& a, const LevelStatistics& b) {
        return a.pulse_amplitude < b.pulse_amplitude;
    });
    return out;
}

// --- kernel fitting ---------------------------------------------------------

namespace {

struct XY {
    std::vector<double> w;
    std::vector<double> y;  // target step, positive for both polarities
};

double sse_for(const XY& d, double a, double alpha, double beta) {
    double sse = 0.0;
    for (std::size_t i = 0; i < d.w.size(); ++i) {
        const double r = a * kernel_shape(d.w[i], alpha, beta) - d.y[i];
        sse += r * r;
    }
    return sse;
}

// Closed-form amplitude for fixed shape exponents (model is linear in A).
double solve_amplitude(const XY& d, double alpha, double beta) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < d.w.size(); ++i) {
        const double phi = kernel_shape(d.w[i], alpha, beta);
        num += d.y[i] * phi;
        den += phi * phi;
    }
    if (den <= 0.0) return 1e-12;
    return std::max(num / den, 1e-12);
}

// Solve the 3x3 system M x = b in place; returns false if singular.
bool solve3(double m[3][3], double b[3], double x[3]) {
    int idx[3] = {0, 1, 2};
    for (int col = 0; col < 3; ++col) {
        int piv = col;
        for (int r = col + 1; r < 3; ++r)
            if (std::fabs(m[idx[r]][col]) > std::fabs(m[idx[piv]][col])) piv = r;
        std::swap(idx[col], idx[piv]);
        const double diag = m[idx[col]][col];
        if (std::fabs(diag) < 1e-300) return false;
        for (int r = col + 1; r < 3; ++r) {
            const double f = m[idx[r]][col] / diag;
            for (int c = col; c < 3; ++c) m[idx[r]][c] -= f * m[idx[col]][c];
            b[idx[r]] -= f * b[idx[col]];
        }
    }
    for (int row = 2; row >= 0; --row) {
        double s = b[idx[row]];
        for (int c = row + 1; c < 3; ++c) s -= m[idx[row]][c] * x[c];
        x[row] = s / m[idx[row]][row];
    }
    return true;
}

constexpr double kAlphaFloor = 1.0 + 1e-9;
constexpr double kAlphaCeil = 64.0;
constexpr int kMaxIterations = 200;

// Levenberg-damped Gauss-Newton on (A, alpha, beta) from a grid-searched
// start. The residual surface of Beta kernels is shallow and multi-modal in
// (alpha, beta), so the coarse grid with closed-form A does the global part
// and the local solver only polishes.
PolarityFit fit_polarity(const XY& d) {
    constexpr int kGrid = 25;
    double best_a = 1e-3, best_alpha = 2.0, best_beta = 2.0;
    double best_sse = std::numeric_limits<double>::infinity();
    for (int ia = 0; ia < kGrid; ++ia) {
        const double alpha = 1.05 + (4.0 - 1.05) * ia / (kGrid - 1);
        for (int ib = 0; ib < kGrid; ++ib) {
            const double beta = 1.05 + (4.0 - 1.05) * ib / (kGrid - 1);
            const double a = solve_amplitude(d, alpha, beta);
            const double sse = sse_for(d, a, alpha, beta);
            if (sse < best_sse) {
                best_sse = sse;
                best_a = a;
                best_alpha = alpha;
                best_beta = beta;
            }
        }
    }

    double a = best_a, alpha = best_alpha, beta = best_beta, sse = best_sse;
    double lambda = 1e-3;
    bool converged = false;
    int iter = 0;
    const std::size_t n = d.w.size();
    for (; iter < kMaxIterations; ++iter) {
        // J^T J and J^T r with J columns (dA, dalpha, dbeta)
        double jtj[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
        double jtr[3] = {0, 0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            const double w = d.w[i];
            const double phi = kernel_shape(w, alpha, beta);
            const double r = a * phi - d.y[i];
            double j[3] = {phi, 0.0, 0.0};
            if (w > 0.0 && w < 1.0 && phi > 0.0) {
                j[1] = a * std::log(w) * phi;
                j[2] = a * std::log(1.0 - w) * phi;
            }
            for (int p = 0; p < 3; ++p) {
                jtr[p] += j[p] * r;
                for (int q = 0; q < 3; ++q) jtj[p][q] += j[p] * j[q];
            }
        }

        const double grad_norm = std::sqrt(jtr[0] * jtr[0] + jtr[1] * jtr[1] + jtr[2] * jtr[2]);
        if (grad_norm < 1e-14 * (1.0 + sse)) {
            converged = true;
            break;
        }

        bool stepped = false;
        for (int attempt = 0; attempt < 40; ++attempt) {
            double m[3][3];
            double b[3] = {-jtr[0], -jtr[1], -jtr[2]};
            for (int p = 0; p < 3; ++p)
                for (int q = 0; q < 3; ++q)
                    m[p][q] = jtj[p][q] + (p == q ? lambda * (jtj[p][p] + 1e-12) : 0.0);
            double step[3];
            if (!solve3(m, b, step)) {
                lambda *= 4.0;
                continue;
            }
            const double a2 = std::max(a + step[0], 1e-12);
            const double alpha2 = std::clamp(alpha + step[1], kAlphaFloor, kAlphaCeil);
            const double beta2 = std::clamp(beta + step[2], kAlphaFloor, kAlphaCeil);
            const double sse2 = sse_for(d, a2, alpha2, beta2);
            if (sse2 <= sse) {
                const double rel_step =
                    std::max({std::fabs(a2 - a) / std::max(a, 1e-12),
                              std::fabs(alpha2 - alpha) / alpha, std::fabs(beta2 - beta) / beta});
                const double improvement = sse - sse2;
                a = a2;
                alpha = alpha2;
                beta = beta2;
                sse = sse2;
                lambda = std::max(lambda / 3.0, 1e-12);
                stepped = true;
                if (rel_step < 1e-13 || improvement <= 1e-17 * (1.0 + sse)) converged = true;
                break;
            }
            lambda *= 4.0;
        }
        if (converged) break;
        if (!stepped) {
            // damping exhausted without improvement: local minimum reached
            converged = true;
            break;
        }
    }

    PolarityFit fit;
    fit.amplitude = a;
    fit.alpha = alpha;
    fit.beta = beta;
    fit.residual_rms = std::sqrt(sse / static_cast<double>(n));
    fit.iterations = iter;
    fit.converged = converged;
    return fit;
}

void check_coverage(const XY& d, Polarity pol) {
    if (d.w.size() < 10)
        throw CalibrationError(std::string("fit_kernel: need at least 10 ") + to_string(pol) +
                               " samples, got " + std::to_string(d.w.size()));
    const auto [mn, mx] = std::minmax_element(d.w.begin(), d.w.end());
    if (*mn > 0.1 || *mx < 0.9)
        throw CalibrationError(std::string("fit_kernel: ") + to_string(pol) +
                               " samples must span [0.1, 0.9] of the conductance range, got [" +
                               std::to_string(*mn) + ", " + std::to_string(*mx) + "]");
}

}  // namespace

KernelFitReport fit_kernel(std::span<const CharacterizationSample> samples) {
    XY ltp, ltd;
    for (const auto& s : samples) {
        if (!(s.w_before >= 0.0 && s.w_before <= 1.0))
            throw CalibrationError("fit_kernel: sample w_before outside [0,1]");
        if (s.polarity == Polarity::ltp) {
            ltp.w.push_back(s.w_before);
            ltp.y.push_back(s.delta_w);
        } else {
            ltd.w.push_back(s.w_before);
            ltd.y.push_back(-s.delta_w);  // fit the magnitude; sign is fixed by the model
        }
    }
    check_coverage(ltp, Polarity::ltp);
    check_coverage(ltd, Polarity::ltd);

    KernelFitReport report;
    report.ltp = fit_polarity(ltp);
    report.ltd = fit_polarity(ltd);
    report.params = {report.ltp.amplitude, report.ltp.alpha, report.ltp.beta,
                     report.ltd.amplitude, report.ltd.alpha, report.ltd.beta};
    if (!report.params.all_positive())
        throw CalibrationError("fit_kernel: fitted parameters violate positivity");
    if (!report.ltp.converged || !report.ltd.converged)
        throw FitError("fit_kernel: refinement did not converge within budget", report);
    return report;
}

// --- pulse log ingestion -----------------------------------------------------

std::vector<PulseLogRecord> read_pulse_log(std::istream& in) {
    std::vector<PulseLogRecord> records;
    std::string line;
    std::size_t line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        // normalize delimiters to spaces
        std::string norm = line;
        for (char& c : norm)
            if (c == ',' || c == ';' || c == '\t') c = ' ';
        std::istringstream ss(norm);
        std::vector<std::string> tok;
        std::string t;
        while (ss >> t) tok.push_back(t);
        if (tok.empty() || tok[0].starts_with("#")) continue;

        auto numeric = [](const std::string& s) {
            char* end = nullptr;
            std::strtod(s.c_str(), &end);
            return end != s.c_str() && *end == '\0';
        };
        if (!numeric(tok[0])) {
            // column header row is allowed once, before any data
            if (!saw_header && records.empty()) {
                saw_header = true;
                continue;
            }
            throw PulseLogError("unexpected non-numeric row in pulse log", line_no);
        }
        if (tok.size() != 4)
            throw PulseLogError("expected 4 columns (pulse_index, pulse_amplitude_V, "
                                "pulse_width_us, read_conductance_S), got " +
                                    std::to_string(tok.size()),
                                line_no);
        for (const auto& s : tok)
            if (!numeric(s)) throw PulseLogError("non-numeric field '" + s + "'", line_no);
        PulseLogRecord r;
        r.pulse_index = std::strtol(tok[0].c_str(), nullptr, 10);
        r.amplitude_v = std::strtod(tok[1].c_str(), nullptr);
        r.width_us = std::strtod(tok[2].c_str(), nullptr);
        r.conductance_s = std::strtod(tok[3].c_str(), nullptr);
        records.push_back(r);
    }
    return records;
}

std::vector<PulseLogRecord> read_pulse_log_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw CalibrationError("cannot open pulse log " + path.string());
    return read_pulse_log(in);
}

CharacterizationData derive_characterization(
    const std::vector<PulseLogRecord>& log,
    std::optional<std::pair<double, double>> conductance_range) {
    if (log.size() < 2) throw CalibrationError("pulse log too short to derive samples");

    CharacterizationData data;
    double gmin, gmax;
    if (conductance_range) {
        gmin = conductance_range->first;
        gmax = conductance_range->second;
    } else {
        gmin = std::numeric_limits<double>::infinity();
        gmax = -std::numeric_limits<double>::infinity();
        for (const auto& r : log) {
            gmin = std::min(gmin, r.conductance_s);
            gmax = std::max(gmax, r.conductance_s);
        }
    }
    if (!(gmax > gmin)) throw CalibrationError("pulse log has a degenerate conductance range");
    data.conductance_min = gmin;
    data.conductance_max = gmax;

    auto normalize = [&](double g) {
        return std::clamp((g - gmin) / (gmax - gmin), 0.0, 1.0);
    };

    // (w_before, delta) pairs from consecutive reads; rows are time-ordered
    for (std::size_t i = 1; i < log.size(); ++i) {
        const double amp = log[i].amplitude_v;
        if (amp == 0.0) continue;  // read-only row
        CharacterizationSample s;
        s.w_before = normalize(log[i - 1].conductance_s);
        s.delta_w = normalize(log[i].conductance_s) - normalize(log[i - 1].conductance_s);
        s.polarity = amp > 0.0 ? Polarity::ltd : Polarity::ltp;
        data.samples.push_back(s);
    }

    // sign normalization per polarity, robust to magnitude-export conventions
    for (Polarity pol : {Polarity::ltp, Polarity::ltd}) {
        double mean = 0.0;
        std::size_t n = 0;
        for (const auto& s : data.samples)
            if (s.polarity == pol) {
                mean += s.delta_w;
                ++n;
            }
        if (n == 0) continue;
        mean /= static_cast<double>(n);
        const bool wrong_sign = pol == Polarity::ltd ? mean > 0.0 : mean < 0.0;
        if (wrong_sign)
            for (auto& s : data.samples)
                if (s.polarity == pol) s.delta_w = -s.delta_w;
    }

    std::map<double, std::vector<double>> groups;
    for (const auto& r : log) groups[r.amplitude_v].push_back(r.conductance_s);
    std::vector<std::pair<double, std::vector<double>>> grouped(groups.begin(), groups.end());
    data.levels = level_statistics(grouped);

    for (const auto& lv : data.levels)
        if (lv.std_conductance && lv.mean_conductance != 0.0)
            data.max_relative_std =
                std::max(data.max_relative_std, *lv.std_conductance / std::fabs(lv.mean_conductance));
    return data;
}

// --- parameter files ---------------------------------------------------------

static json fit_to_json(const PolarityFit& f) {
    return json{{"amplitude", f.amplitude},
                {"alpha", f.alpha},
                {"beta", f.beta},
                {"residual_rms", f.residual_rms},
                {"iterations", f.iterations},
                {"converged", f.converged}};
}

void save_kernel_report(const KernelFitReport& report, const std::filesystem::path& path) {
    json doc;
    doc["model"] = "beta-kernel";
    doc["a_plus"] = report.params.a_plus;
    doc["alpha_plus"] = report.params.alpha_plus;
    doc["beta_plus"] = report.params.beta_plus;
    doc["a_minus"] = report.params.a_minus;
    doc["alpha_minus"] = report.params.alpha_minus;
    doc["beta_minus"] = report.params.beta_minus;
    doc["fit"] = {{"ltp", fit_to_json(report.ltp)}, {"ltd", fit_to_json(report.ltd)}};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << doc.dump(2) << "\n";
}

FerroKernelParams load_kernel_params(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open kernel parameter file " + path.string());
    json doc = json::parse(in);
    FerroKernelParams p;
    p.a_plus = doc.at("a_plus").get<double>();
    p.alpha_plus = doc.at("alpha_plus").get<double>();
    p.beta_plus = doc.at("beta_plus").get<double>();
    p.a_minus = doc.at("a_minus").get<double>();
    p.alpha_minus = doc.at("alpha_minus").get<double>();
    p.beta_minus = doc.at("beta_minus").get<double>();
    if (!p.all_positive())
        throw CalibrationError("kernel parameter file " + path.string() +
                               " violates positivity");
    return p;
}

}  // namespace ferrosnn::device
