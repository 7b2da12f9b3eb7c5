#pragma once

// Patient data: BFNF patch-feature files, clinical and gene-expression CSVs,
// clinical binarisation, stratified folds and cohort directories.

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "biofusion/errors.hpp"
#include "biofusion/rng.hpp"
#include "biofusion/survival.hpp"
#include "json.hpp"

namespace biofusion {

namespace fs = std::filesystem;

/// Row-major float32 matrix, one row per patch.
struct FeatureMatrix {
    std::uint32_t rows = 0;
    std::uint32_t cols = 0;
    std::vector<float> values;

    float operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
    bool operator==(const FeatureMatrix&) const = default;
};

// ---------------------------------------------------------------------------
// BFNF: "BFNF" | u32 version=1 | u32 rows | u32 cols | rows*cols f32, all little-endian.

inline constexpr char kBfnfMagic[4] = {'B', 'F', 'N', 'F'};
inline constexpr std::uint32_t kBfnfVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) | (std::uint32_t(p[3]) << 24);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::string read_file_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file_bytes(const fs::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("write failed for " + path.string());
}

}  // namespace detail

inline std::string encode_feature_file(const FeatureMatrix& m) {
    if (m.values.size() != std::size_t(m.rows) * m.cols) throw ShapeError("feature matrix size mismatch");
    std::string out(kBfnfMagic, 4);
    detail::put_u32(out, kBfnfVersion);
    detail::put_u32(out, m.rows);
    detail::put_u32(out, m.cols);
    out.reserve(out.size() + 4 * m.values.size());
    for (float f : m.values) detail::put_f32(out, f);
    return out;
}

inline FeatureMatrix decode_feature_file(std::string_view bytes, const std::string& what = "feature file") {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16) throw FormatError(what + ": truncated header at byte offset " + std::to_string(bytes.size()));
    if (std::memcmp(p, kBfnfMagic, 4) != 0) throw FormatError(what + ": bad magic at byte offset 0");
    const auto version = detail::get_u32(p + 4);
    if (version != kBfnfVersion)
        throw FormatError(what + ": unsupported version " + std::to_string(version) + " at byte offset 4");
    FeatureMatrix m;
    m.rows = detail::get_u32(p + 8);
    m.cols = detail::get_u32(p + 12);
    if (m.rows == 0 || m.cols == 0) throw FormatError(what + ": zero dimension at byte offset 8");
    const std::uint64_t expected = 16 + 4ULL * m.rows * m.cols;
    if (bytes.size() != expected)
        throw FormatError(what + ": payload length mismatch, header declares " + std::to_string(m.rows) + "x" +
                          std::to_string(m.cols) + " but data ends at byte offset " + std::to_string(bytes.size()) +
                          " (expected " + std::to_string(expected) + ")");
    m.values.resize(std::size_t(m.rows) * m.cols);
    for (std::size_t i = 0; i < m.values.size(); ++i) {
        const float f = detail::get_f32(p + 16 + 4 * i);
        if (!std::isfinite(f)) throw FormatError(what + ": non-finite value at byte offset " + std::to_string(16 + 4 * i));
        m.values[i] = f;
    }
    return m;
}

inline void write_feature_file(const fs::path& path, const FeatureMatrix& m) {
    detail::write_file_bytes(path, encode_feature_file(m));
}

inline FeatureMatrix read_feature_file(const fs::path& path) {
    return decode_feature_file(detail::read_file_bytes(path), path.string());
}

// ---------------------------------------------------------------------------
// Clinical variables

enum class LnStatus { negative, positive, missing };

struct RawClinical {
    int grade = 1;
    double size_mm = 10;
    double age_years = 50;
    LnStatus ln = LnStatus::negative;
};

inline constexpr std::size_t kClinicalDim = 4;
inline constexpr double kLnMissingCoxValue = 2.0;

/// Binarised clinical vector in the order grade3, size>20mm, age>55, LN positive.
struct ClinicalFeatures {
    std::vector<double> network;         // LN missing -> 0 with flag set
    std::vector<std::uint8_t> missing;   // per-field missingness flags
    std::vector<double> cox;             // LN missing -> fixed value 2
};

inline ClinicalFeatures binarize_clinical(const RawClinical& raw) {
    if (raw.grade < 1 || raw.grade > 3) throw ValidationError("tumour grade must be 1, 2 or 3, got " + std::to_string(raw.grade));
    if (!(raw.size_mm > 0)) throw ValidationError("tumour size must be positive");
    if (!(raw.age_years > 0)) throw ValidationError("age must be positive");
    ClinicalFeatures f;
    const double grade3 = raw.grade == 3 ? 1 : 0;
    const double big = raw.size_mm > 20 ? 1 : 0;
    const double old = raw.age_years > 55 ? 1 : 0;
    const double ln = raw.ln == LnStatus::positive ? 1 : 0;
    f.network = {grade3, big, old, ln};
    f.missing = {0, 0, 0, static_cast<std::uint8_t>(raw.ln == LnStatus::missing)};
    f.cox = {grade3, big, old, raw.ln == LnStatus::missing ? kLnMissingCoxValue : ln};
    return f;
}

inline std::string to_string(LnStatus s) {
    switch (s) {
        case LnStatus::positive: return "pos";
        case LnStatus::negative: return "neg";
        default: return "missing";
    }
}

inline LnStatus ln_status_from_string(std::string_view s) {
    if (s == "pos" || s == "positive" || s == "1") return LnStatus::positive;
    if (s == "neg" || s == "negative" || s == "0") return LnStatus::negative;
    if (s.empty() || s == "missing" || s == "NA" || s == "na") return LnStatus::missing;
    throw ValidationError("unrecognised ln_status '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// CSV helpers: comma-separated, header row, '.' decimal, no quoting.

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.emplace_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline double parse_double(std::string_view s, const std::string& where) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    double v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty() || !std::isfinite(v))
        throw FormatError("cannot parse '" + std::string(s) + "' as a number at " + where);
    return v;
}

inline std::string format_double(double v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name, const std::string& file) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) throw FormatError(file + ": missing column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    }
};

inline CsvTable read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file, header row required");
    t.header = split_csv_line(line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r") continue;
        auto cells = split_csv_line(line);
        if (cells.size() != t.header.size())
            throw FormatError(path.string() + ": row " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                              " cells, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(cells));
    }
    return t;
}

}  // namespace detail

struct ClinicalRow {
    std::string id;
    RawClinical raw;
    SurvivalRecord record;
};

inline void write_clinical_csv(const fs::path& path, std::span<const ClinicalRow> rows) {
    std::ostringstream os;
    os << "patient_id,grade,size_mm,age_years,ln_status,time_months,event\n";
    for (const auto& r : rows)
        os << r.id << ',' << r.raw.grade << ',' << detail::format_double(r.raw.size_mm) << ','
           << detail::format_double(r.raw.age_years) << ',' << to_string(r.raw.ln) << ','
           << detail::format_double(r.record.time) << ',' << r.record.event << '\n';
    detail::write_file_bytes(path, os.str());
}

inline std::vector<ClinicalRow> read_clinical_csv(const fs::path& path) {
    const auto t = detail::read_csv(path);
    const std::string file = path.string();
    const auto c_id = t.column("patient_id", file), c_grade = t.column("grade", file),
               c_size = t.column("size_mm", file), c_age = t.column("age_years", file),
               c_ln = t.column("ln_status", file), c_time = t.column("time_months", file),
               c_event = t.column("event", file);
    std::vector<ClinicalRow> rows;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& cells = t.rows[i];
        const auto where = [&](std::size_t c) { return file + " row " + std::to_string(i + 2) + " col " + std::to_string(c + 1); };
        ClinicalRow r;
        r.id = cells[c_id];
        if (!seen.insert(r.id).second) throw ValidationError(file + ": duplicated patient_id '" + r.id + "'");
        const double grade = detail::parse_double(cells[c_grade], where(c_grade));
        if (grade != std::floor(grade)) throw ValidationError(where(c_grade) + ": grade must be an integer");
        r.raw.grade = static_cast<int>(grade);
        r.raw.size_mm = detail::parse_double(cells[c_size], where(c_size));
        r.raw.age_years = detail::parse_double(cells[c_age], where(c_age));
        r.raw.ln = ln_status_from_string(cells[c_ln]);
        r.record.time = detail::parse_double(cells[c_time], where(c_time));
        const double ev = detail::parse_double(cells[c_event], where(c_event));
        if (ev != 0 && ev != 1) throw ValidationError(where(c_event) + ": event must be 0 or 1");
        r.record.event = static_cast<int>(ev);
        validate(r.record);
        binarize_clinical(r.raw);  // validates ranges
        rows.push_back(std::move(r));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Gene expression

struct GeneMatrix {
    std::vector<std::string> patient_ids;
    std::vector<std::string> genes;
    std::vector<double> values;  // patients x genes, row-major

    std::span<const double> row(std::size_t i) const { return {values.data() + i * genes.size(), genes.size()}; }
};

/// Gene names in file order (every column except patient_id).
inline std::vector<std::string> read_gene_panel(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path.string() + ": empty file, header row required");
    auto header = detail::split_csv_line(line);
    std::vector<std::string> panel;
    for (auto& h : header)
        if (h != "patient_id") panel.push_back(h);
    return panel;
}

/// Values pass through unchanged; rows keep file order.
inline GeneMatrix load_gene_matrix(const fs::path& path, const std::vector<std::string>& panel) {
    const auto t = detail::read_csv(path);
    const std::string file = path.string();
    const auto c_id = t.column("patient_id", file);
    std::vector<std::size_t> cols;
    std::vector<std::string> missing;
    for (const auto& g : panel) {
        auto it = std::find(t.header.begin(), t.header.end(), g);
        if (it == t.header.end())
            missing.push_back(g);
        else
            cols.push_back(static_cast<std::size_t>(it - t.header.begin()));
    }
    if (!missing.empty()) {
        std::string names;
        for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
        throw FormatError(file + ": missing gene column(s): " + names);
    }
    GeneMatrix gm;
    gm.genes = panel;
    std::set<std::string> seen;
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
        const auto& cells = t.rows[i];
        if (!seen.insert(cells[c_id]).second) throw ValidationError(file + ": duplicated patient_id '" + cells[c_id] + "'");
        gm.patient_ids.push_back(cells[c_id]);
        for (auto c : cols)
            gm.values.push_back(detail::parse_double(
                cells[c], file + " row " + std::to_string(i + 2) + " col " + std::to_string(c + 1)));
    }
    return gm;
}

inline void write_gene_csv(const fs::path& path, const GeneMatrix& gm) {
    std::ostringstream os;
    os << "patient_id";
    for (const auto& g : gm.genes) os << ',' << g;
    os << '\n';
    for (std::size_t i = 0; i < gm.patient_ids.size(); ++i) {
        os << gm.patient_ids[i];
        for (double v : gm.row(i)) os << ',' << detail::format_double(v);
        os << '\n';
    }
    detail::write_file_bytes(path, os.str());
}

// ---------------------------------------------------------------------------
// Patient bundles

struct PatientBundle {
    std::string id;
    FeatureMatrix patches;                    // P x concat_dim
    std::vector<double> genes;                // gene_dim
    std::vector<double> clinical;             // binarised, network encoding
    std::vector<std::uint8_t> clinical_missing;
    RawClinical raw_clinical;
    SurvivalRecord record;
};

inline std::vector<SurvivalRecord> records_of(std::span<const PatientBundle> bundles) {
    std::vector<SurvivalRecord> r;
    r.reserve(bundles.size());
    for (const auto& b : bundles) r.push_back(b.record);
    return r;
}

/// Brings a patch matrix to exactly `p` rows: rows are drawn with replacement
/// when there are fewer, and a random subset is kept when there are more.
inline FeatureMatrix resample_patches(const FeatureMatrix& m, std::uint32_t p, Rng& rng) {
    if (m.rows == p) return m;
    std::vector<std::size_t> pick;
    if (m.rows < p) {
        for (std::size_t r = 0; r < m.rows; ++r) pick.push_back(r);
        while (pick.size() < p) pick.push_back(static_cast<std::size_t>(rng.below(m.rows)));
    } else {
        std::vector<std::size_t> all(m.rows);
        for (std::size_t r = 0; r < m.rows; ++r) all[r] = r;
        rng.shuffle(all);
        pick.assign(all.begin(), all.begin() + p);
        std::sort(pick.begin(), pick.end());
    }
    FeatureMatrix out;
    out.rows = p;
    out.cols = m.cols;
    out.values.reserve(std::size_t(p) * m.cols);
    for (auto r : pick) out.values.insert(out.values.end(), m.values.begin() + r * m.cols, m.values.begin() + (r + 1) * m.cols);
    return out;
}

// ---------------------------------------------------------------------------
// Folds

struct FoldSplit {
    int fold = 1;  // 1-based
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
};

/// Event-stratified k-fold split. Event and censored indices are shuffled
/// separately and dealt round-robin (events first), so validation sizes differ
/// by at most one and event counts by at most one.
inline std::vector<FoldSplit> make_folds(std::span<const SurvivalRecord> records, int k, std::uint64_t seed) {
    if (k < 2) throw ValidationError("make_folds: need at least 2 folds");
    if (records.size() < std::size_t(k)) throw ValidationError("make_folds: fewer patients than folds");
    std::vector<std::size_t> events, censored;
    for (std::size_t i = 0; i < records.size(); ++i) (records[i].event ? events : censored).push_back(i);
    if (events.size() < std::size_t(k))
        throw ValidationError("make_folds: " + std::to_string(events.size()) + " events cannot be stratified over " +
                              std::to_string(k) + " folds");
    Rng rng(seed);
    rng.shuffle(events);
    rng.shuffle(censored);
    std::vector<FoldSplit> folds(static_cast<std::size_t>(k));
    std::vector<int> assignment(records.size());
    std::size_t slot = 0;
    for (auto i : events) assignment[i] = int(slot++ % k);
    for (auto i : censored) assignment[i] = int(slot++ % k);
    for (int f = 0; f < k; ++f) {
        folds[f].fold = f + 1;
        for (std::size_t i = 0; i < records.size(); ++i) (assignment[i] == f ? folds[f].val : folds[f].train).push_back(i);
    }
    return folds;
}

/// {"1": {"train": [ids], "val": [ids]}, ...}
inline nlohmann::json folds_to_json(std::span<const FoldSplit> folds, std::span<const std::string> ids) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : folds) {
        nlohmann::json entry;
        entry["train"] = nlohmann::json::array();
        entry["val"] = nlohmann::json::array();
        for (auto i : f.train) entry["train"].push_back(ids[i]);
        for (auto i : f.val) entry["val"].push_back(ids[i]);
        j[std::to_string(f.fold)] = entry;
    }
    return j;
}

inline std::vector<FoldSplit> folds_from_json(const nlohmann::json& j, std::span<const std::string> ids) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < ids.size(); ++i) index[ids[i]] = i;
    std::vector<FoldSplit> folds;
    for (const auto& [key, entry] : j.items()) {
        FoldSplit f;
        try {
            f.fold = std::stoi(key);
        } catch (const std::exception&) {
            throw FormatError("folds: fold key '" + key + "' is not an integer");
        }
        for (const char* part : {"train", "val"}) {
            if (!entry.contains(part)) throw FormatError("folds: fold " + key + " lacks '" + part + "'");
            for (const auto& id : entry[part]) {
                auto it = index.find(id.get<std::string>());
                if (it == index.end()) throw ValidationError("folds: unknown patient id '" + id.get<std::string>() + "'");
                (std::string(part) == "train" ? f.train : f.val).push_back(it->second);
            }
        }
        folds.push_back(std::move(f));
    }
    std::sort(folds.begin(), folds.end(), [](const auto& a, const auto& b) { return a.fold < b.fold; });
    return folds;
}

inline void write_json(const fs::path& path, const nlohmann::json& j) {
    detail::write_file_bytes(path, j.dump(2) + "\n");
}

inline nlohmann::json read_json(const fs::path& path) {
    const auto bytes = detail::read_file_bytes(path);
    try {
        return nlohmann::json::parse(bytes);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Cohort directories: clinical.csv, genes.csv, patches/<id>.bfnf

inline void write_cohort_dir(const fs::path& dir, std::span<const PatientBundle> bundles,
                             const std::vector<std::string>& gene_names) {
    fs::create_directories(dir / "patches");
    std::vector<ClinicalRow> clinical;
    GeneMatrix gm;
    gm.genes = gene_names;
    for (const auto& b : bundles) {
        clinical.push_back({b.id, b.raw_clinical, b.record});
        gm.patient_ids.push_back(b.id);
        if (b.genes.size() != gene_names.size()) throw ShapeError("gene vector length differs from panel");
        gm.values.insert(gm.values.end(), b.genes.begin(), b.genes.end());
        write_feature_file(dir / "patches" / (b.id + ".bfnf"), b.patches);
    }
    write_clinical_csv(dir / "clinical.csv", clinical);
    write_gene_csv(dir / "genes.csv", gm);
}

/// Loads every patient listed in clinical.csv. Patch matrices are resampled
/// to `patches_per_patient` rows with a generator seeded by `seed`.
inline std::vector<PatientBundle> read_cohort_dir(const fs::path& dir, std::uint32_t patches_per_patient,
                                                  std::uint64_t seed, std::vector<std::string> panel = {}) {
    const auto clinical = read_clinical_csv(dir / "clinical.csv");
    if (panel.empty()) panel = read_gene_panel(dir / "genes.csv");
    const auto gm = load_gene_matrix(dir / "genes.csv", panel);
    std::map<std::string, std::size_t> gene_row;
    for (std::size_t i = 0; i < gm.patient_ids.size(); ++i) gene_row[gm.patient_ids[i]] = i;
    Rng rng(seed);
    std::vector<PatientBundle> out;
    for (const auto& c : clinical) {
        auto it = gene_row.find(c.id);
        if (it == gene_row.end()) throw ValidationError("patient '" + c.id + "' has no gene expression row");
        PatientBundle b;
        b.id = c.id;
        b.raw_clinical = c.raw;
        b.record = c.record;
        const auto f = binarize_clinical(c.raw);
        b.clinical = f.network;
        b.clinical_missing = f.missing;
        const auto g = gm.row(it->second);
        b.genes.assign(g.begin(), g.end());
        auto patch_rng = rng.fork();
        b.patches = resample_patches(read_feature_file(dir / "patches" / (c.id + ".bfnf")), patches_per_patient, patch_rng);
        out.push_back(std::move(b));
    }
    return out;
}

}  // namespace biofusion
