#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>

#include "ferrosnn/data_pipeline.hpp"

namespace ferrosnn::data {

double EdfSignalHeader::to_physical(std::int16_t digital) const {
    const double dig_range = static_cast<double>(digital_max) - static_cast<double>(digital_min);
    if (dig_range == 0.0) return physical_min;
    return (static_cast<double>(digital) - static_cast<double>(digital_min)) *
               (physical_max - physical_min) / dig_range +
           physical_min;
}

namespace {

constexpr std::size_t kFixedHeader = 256;
constexpr std::size_t kPerSignalHeader = 256;

std::string trim(std::string_view field) {
    std::size_t begin = 0, end = field.size();
    while (begin < end && (field[begin] == ' ' || field[begin] == '\0')) ++begin;
    while (end > begin && (field[end - 1] == ' ' || field[end - 1] == '\0')) --end;
    return std::string(field.substr(begin, end - begin));
}

std::string_view raw_field(std::span<const std::uint8_t> bytes, std::size_t offset,
                           std::size_t len) {
    return std::string_view(reinterpret_cast<const char*>(bytes.data()) + offset, len);
}

double parse_double(const std::string& text, const char* what, std::size_t offset) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (end == text.c_str() || *end != '\0')
        throw EdfParseError(std::string("cannot parse ") + what + " field '" + text + "'", offset);
    return v;
}

long parse_long(const std::string& text, const char* what, std::size_t offset) {
    char* end = nullptr;
    const long v = std::strtol(text.c_str(), &end, 10);
    if (end == text.c_str() || *end != '\0')
        throw EdfParseError(std::string("cannot parse ") + what + " field '" + text + "'", offset);
    return v;
}

// Minimal decimal representation that still parses back to the same double
// for the short numbers EDF headers carry.
std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.8g", v);
    return buf;
}

void put_field(std::string& out, const std::string& value, std::size_t width, const char* what) {
    if (value.size() > width)
        throw std::invalid_argument(std::string("EDF field ") + what + " value '" + value +
                                    "' exceeds " + std::to_string(width) + " chars");
    out.append(value);
    out.append(width - value.size(), ' ');
}

// TAL streams: "+onset[\x15duration]\x14label\x14...\x14\x00". The first TAL
// of each record is the record timestamp and carries an empty label.
void decode_tal_chunk(std::span<const std::uint8_t> chunk, std::vector<EdfAnnotation>& out,
                      std::vector<std::string>& warnings) {
    std::size_t pos = 0;
    while (pos < chunk.size() && chunk[pos] != 0) {
        // onset (and optional duration) up to the first \x14
        std::size_t head_end = pos;
        while (head_end < chunk.size() && chunk[head_end] != 0x14 && chunk[head_end] != 0)
            ++head_end;
        if (head_end >= chunk.size() || chunk[head_end] != 0x14) {
            warnings.push_back("unterminated annotation header, raw bytes kept: '" +
                               std::string(chunk.begin() + pos, chunk.begin() + head_end) + "'");
            return;
        }
        const std::string head(chunk.begin() + pos, chunk.begin() + head_end);
        const std::size_t dur_sep = head.find('\x15');
        const std::string onset_text = dur_sep == std::string::npos ? head : head.substr(0, dur_sep);
        const std::string dur_text = dur_sep == std::string::npos ? "" : head.substr(dur_sep + 1);

        double onset = 0.0, duration = 0.0;
        bool ok = !onset_text.empty() && (onset_text[0] == '+' || onset_text[0] == '-');
        if (ok) {
            char* end = nullptr;
            onset = std::strtod(onset_text.c_str(), &end);
            ok = end != onset_text.c_str() && *end == '\0';
        }
        if (ok && !dur_text.empty()) {
            char* end = nullptr;
            duration = std::strtod(dur_text.c_str(), &end);
            ok = end != dur_text.c_str();
        }
        if (!ok) {
            warnings.push_back("undecodable annotation timestamp, raw bytes kept: '" + head + "'");
            // skip to TAL terminator
            while (pos < chunk.size() && chunk[pos] != 0) ++pos;
            ++pos;
            continue;
        }

        pos = head_end + 1;
        // zero or more \x14-terminated labels until the \x00 TAL terminator
        while (pos < chunk.size() && chunk[pos] != 0) {
            std::size_t label_end = pos;
            while (label_end < chunk.size() && chunk[label_end] != 0x14 && chunk[label_end] != 0)
                ++label_end;
            if (label_end >= chunk.size() || chunk[label_end] != 0x14) {
                warnings.push_back("unterminated annotation label, raw bytes kept");
                return;
            }
            if (label_end > pos)
                out.push_back({onset, duration, std::string(chunk.begin() + pos,
                                                            chunk.begin() + label_end)});
            pos = label_end + 1;
        }
        ++pos;  // 0x00 TAL terminator
    }
}

}  // namespace

EdfRecording parse_edf(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kFixedHeader)
        throw EdfParseError("file shorter than the 256-byte EDF header", bytes.size());

    EdfRecording rec;
    rec.version = trim(raw_field(bytes, 0, 8));
    rec.patient_id = trim(raw_field(bytes, 8, 80));
    rec.recording_id = trim(raw_field(bytes, 88, 80));
    rec.start_date = trim(raw_field(bytes, 168, 8));
    rec.start_time = trim(raw_field(bytes, 176, 8));
    const long header_bytes = parse_long(trim(raw_field(bytes, 184, 8)), "header byte count", 184);
    rec.reserved = trim(raw_field(bytes, 192, 44));
    rec.n_records = parse_long(trim(raw_field(bytes, 236, 8)), "record count", 236);
    rec.record_duration_s = parse_double(trim(raw_field(bytes, 244, 8)), "record duration", 244);
    const long ns = parse_long(trim(raw_field(bytes, 252, 4)), "signal count", 252);
    if (ns < 1) throw EdfParseError("signal count must be >= 1", 252);

    const std::size_t expect_header = kFixedHeader + static_cast<std::size_t>(ns) * kPerSignalHeader;
    if (header_bytes != static_cast<long>(expect_header))
        throw EdfParseError("malformed header length: field says " + std::to_string(header_bytes) +
                                ", " + std::to_string(ns) + " signals imply " +
                                std::to_string(expect_header),
                            184);
    if (bytes.size() < expect_header)
        throw EdfParseError("file truncated inside signal headers", bytes.size());

    rec.signals.resize(ns);
    std::size_t off = kFixedHeader;
    auto column = [&](std::size_t width, auto&& assign) {
        for (long s = 0; s < ns; ++s)
            assign(rec.signals[s], trim(raw_field(bytes, off + s * width, width)), off + s * width);
        off += width * ns;
    };
    column(16, [](EdfSignalHeader& h, std::string v, std::size_t) { h.label = std::move(v); });
    column(80, [](EdfSignalHeader& h, std::string v, std::size_t) { h.transducer = std::move(v); });
    column(8, [](EdfSignalHeader& h, std::string v, std::size_t) { h.physical_dim = std::move(v); });
    column(8, [](EdfSignalHeader& h, std::string v, std::size_t o) {
        h.physical_min = parse_double(v, "physical minimum", o);
    });
    column(8, [](EdfSignalHeader& h, std::string v, std::size_t o) {
        h.physical_max = parse_double(v, "physical maximum", o);
    });
    column(8, [](EdfSignalHeader& h, std::string v, std::size_t o) {
        h.digital_min = parse_long(v, "digital minimum", o);
    });
    column(8, [](EdfSignalHeader& h, std::string v, std::size_t o) {
        h.digital_max = parse_long(v, "digital maximum", o);
    });
    column(80, [](EdfSignalHeader& h, std::string v, std::size_t) { h.prefiltering = std::move(v); });
    column(8, [](EdfSignalHeader& h, std::string v, std::size_t o) {
        h.samples_per_record = static_cast<int>(parse_long(v, "samples per record", o));
        if (h.samples_per_record < 1) throw EdfParseError("samples per record must be >= 1", o);
    });
    column(32, [](EdfSignalHeader& h, std::string v, std::size_t) { h.reserved = std::move(v); });

    std::size_t record_size = 0;
    for (const auto& s : rec.signals) record_size += static_cast<std::size_t>(s.samples_per_record) * 2;

    const std::size_t payload = bytes.size() - expect_header;
    long n_records = rec.n_records;
    if (n_records < 0) {  // unknown record count: infer from the payload
        if (payload % record_size != 0)
            throw EdfParseError("truncated data record (payload is not a whole number of records)",
                                bytes.size());
        n_records = static_cast<long>(payload / record_size);
        rec.n_records = n_records;
        rec.warnings.push_back("record count was -1; inferred " + std::to_string(n_records));
    } else if (payload != static_cast<std::size_t>(n_records) * record_size) {
        const std::size_t expected_size = expect_header + static_cast<std::size_t>(n_records) * record_size;
        throw EdfParseError("record-count mismatch: header promises " + std::to_string(n_records) +
                                " records (" + std::to_string(expected_size) + " bytes), file has " +
                                std::to_string(bytes.size()),
                            std::min(bytes.size(), expected_size));
    }

    rec.samples.assign(ns, {});
    for (long s = 0; s < ns; ++s)
        rec.samples[s].reserve(static_cast<std::size_t>(n_records) * rec.signals[s].samples_per_record);

    for (long r = 0; r < n_records; ++r) {
        for (long s = 0; s < ns; ++s) {
            const int spr = rec.signals[s].samples_per_record;
            for (int k = 0; k < spr; ++k) {
                const std::uint8_t lo = bytes[off];
                const std::uint8_t hi = bytes[off + 1];
                rec.samples[s].push_back(
                    static_cast<std::int16_t>(static_cast<std::uint16_t>(lo) |
                                              (static_cast<std::uint16_t>(hi) << 8)));
                off += 2;
            }
        }
    }

    for (long s = 0; s < ns; ++s) {
        if (!rec.signals[s].is_annotation_channel()) continue;
        const int spr = rec.signals[s].samples_per_record;
        std::vector<std::uint8_t> raw(static_cast<std::size_t>(spr) * 2);
        for (long r = 0; r < n_records; ++r) {
            for (int k = 0; k < spr; ++k) {
                const std::uint16_t u =
                    static_cast<std::uint16_t>(rec.samples[s][static_cast<std::size_t>(r) * spr + k]);
                raw[static_cast<std::size_t>(k) * 2] = static_cast<std::uint8_t>(u & 0xff);
                raw[static_cast<std::size_t>(k) * 2 + 1] = static_cast<std::uint8_t>(u >> 8);
            }
            decode_tal_chunk(raw, rec.annotations, rec.warnings);
        }
    }
    return rec;
}

std::vector<std::uint8_t> write_edf(const EdfRecording& rec) {
    const long ns = static_cast<long>(rec.signals.size());
    if (ns < 1) throw std::invalid_argument("write_edf: recording has no signals");
    for (long s = 0; s < ns; ++s) {
        const auto expected = static_cast<std::size_t>(rec.n_records) *
                              static_cast<std::size_t>(rec.signals[s].samples_per_record);
        if (rec.samples.at(s).size() != expected)
            throw std::invalid_argument("write_edf: signal '" + rec.signals[s].label +
                                        "' has " + std::to_string(rec.samples.at(s).size()) +
                                        " samples, header implies " + std::to_string(expected));
    }

    std::string header;
    header.reserve(kFixedHeader + ns * kPerSignalHeader);
    put_field(header, rec.version.empty() ? "0" : rec.version, 8, "version");
    put_field(header, rec.patient_id, 80, "patient id");
    put_field(header, rec.recording_id, 80, "recording id");
    put_field(header, rec.start_date, 8, "start date");
    put_field(header, rec.start_time, 8, "start time");
    put_field(header, std::to_string(kFixedHeader + ns * kPerSignalHeader), 8, "header bytes");
    put_field(header, rec.reserved, 44, "reserved");
    put_field(header, std::to_string(rec.n_records), 8, "record count");
    put_field(header, format_number(rec.record_duration_s), 8, "record duration");
    put_field(header, std::to_string(ns), 4, "signal count");

    auto column = [&](std::size_t width, auto&& value_of, const char* what) {
        for (long s = 0; s < ns; ++s) put_field(header, value_of(rec.signals[s]), width, what);
    };
    column(16, [](const EdfSignalHeader& h) { return h.label; }, "label");
    column(80, [](const EdfSignalHeader& h) { return h.transducer; }, "transducer");
    column(8, [](const EdfSignalHeader& h) { return h.physical_dim; }, "physical dim");
    column(8, [](const EdfSignalHeader& h) { return format_number(h.physical_min); }, "phys min");
    column(8, [](const EdfSignalHeader& h) { return format_number(h.physical_max); }, "phys max");
    column(8, [](const EdfSignalHeader& h) { return std::to_string(h.digital_min); }, "dig min");
    column(8, [](const EdfSignalHeader& h) { return std::to_string(h.digital_max); }, "dig max");
    column(80, [](const EdfSignalHeader& h) { return h.prefiltering; }, "prefiltering");
    column(8, [](const EdfSignalHeader& h) { return std::to_string(h.samples_per_record); },
           "samples per record");
    column(32, [](const EdfSignalHeader& h) { return h.reserved; }, "signal reserved");

    std::vector<std::uint8_t> out(header.begin(), header.end());
    std::size_t record_size = 0;
    for (const auto& s : rec.signals) record_size += static_cast<std::size_t>(s.samples_per_record) * 2;
    out.reserve(out.size() + static_cast<std::size_t>(rec.n_records) * record_size);

    for (long r = 0; r < rec.n_records; ++r) {
        for (long s = 0; s < ns; ++s) {
            const int spr = rec.signals[s].samples_per_record;
            const auto* src = &rec.samples[s][static_cast<std::size_t>(r) * spr];
            for (int k = 0; k < spr; ++k) {
                const std::uint16_t u = static_cast<std::uint16_t>(src[k]);
                out.push_back(static_cast<std::uint8_t>(u & 0xff));
                out.push_back(static_cast<std::uint8_t>(u >> 8));
            }
        }
    }
    return out;
}

std::vector<std::int16_t> encode_annotation_payload(const std::vector<EdfAnnotation>& annotations,
                                                    long n_records, double record_duration_s,
                                                    int samples_per_record) {
    std::vector<std::int16_t> payload;
    payload.reserve(static_cast<std::size_t>(n_records) * samples_per_record);
    for (long r = 0; r < n_records; ++r) {
        const double rec_start = r * record_duration_s;
        const double rec_end = rec_start + record_duration_s;
        std::string chunk = "+" + format_number(rec_start);
        chunk.push_back('\x14');
        chunk.push_back('\x14');
        chunk.push_back('\0');
        for (const auto& a : annotations) {
            const bool in_record = a.onset_s >= rec_start &&
                                   (a.onset_s < rec_end || r == n_records - 1);
            if (!in_record) continue;
            chunk += "+" + format_number(a.onset_s);
            if (a.duration_s > 0.0) {
                chunk.push_back('\x15');
                chunk += format_number(a.duration_s);
            }
            chunk.push_back('\x14');
            chunk += a.label;
            chunk.push_back('\x14');
            chunk.push_back('\0');
        }
        const std::size_t capacity = static_cast<std::size_t>(samples_per_record) * 2;
        if (chunk.size() > capacity)
            throw std::invalid_argument(
                "annotation payload needs " + std::to_string(chunk.size()) +
                " bytes in record " + std::to_string(r) + " but samples_per_record only holds " +
                std::to_string(capacity));
        chunk.resize(capacity, '\0');
        for (std::size_t k = 0; k < capacity; k += 2) {
            const std::uint16_t u = static_cast<std::uint8_t>(chunk[k]) |
                                    (static_cast<std::uint16_t>(static_cast<std::uint8_t>(chunk[k + 1]))
                                     << 8);
            payload.push_back(static_cast<std::int16_t>(u));
        }
    }
    return payload;
}

EdfRecording read_edf_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open EDF file " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return parse_edf(bytes);
}

void write_edf_file(const EdfRecording& rec, const std::filesystem::path& path) {
    const auto bytes = write_edf(rec);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace ferrosnn::data
