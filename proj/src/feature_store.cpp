#include "hsprobe/feature_store.hpp"

#include "binary_io.hpp"
#include "hsprobe/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

namespace hsprobe {

namespace detail {

std::vector<char> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        fail(ErrorKind::io, "cannot open " + path.string());
    }
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::size_t>(in.tellg());
    in.seekg(0, std::ios::beg);
    std::vector<char> bytes(size);
    if (size > 0 && !in.read(bytes.data(), static_cast<std::streamsize>(size))) {
        fail(ErrorKind::io, "cannot read " + path.string());
    }
    return bytes;
}

void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            fail(ErrorKind::io, "cannot write " + path.string());
        }
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            fail(ErrorKind::io, "write failed for " + path.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        fail(ErrorKind::io, "cannot move file into place: " + path.string());
    }
}

}  // namespace detail

namespace {

constexpr std::string_view kMagic = "HSDS";

bool all_finite(std::span<const float> values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

}  // namespace

std::string_view to_string(SegmentMode mode) noexcept {
    return mode == SegmentMode::question_only ? "question_only" : "question_and_answer";
}

SegmentMode parse_segment_mode(std::string_view text) {
    if (text == "question_only") {
        return SegmentMode::question_only;
    }
    if (text == "question_and_answer") {
        return SegmentMode::question_and_answer;
    }
    fail(ErrorKind::invalid_argument, "unknown segment mode '" + std::string(text) + "'");
}

void write_dataset(std::span<const HiddenStateRecord> records, const DatasetHeader& header,
                   const std::filesystem::path& path) {
    require(header.hidden_dim >= 1, ErrorKind::invalid_argument, "hidden_dim must be >= 1");
    require(header.layer_index >= 0, ErrorKind::invalid_argument, "layer_index must be >= 0");

    nlohmann::json meta = {
        {"model_name", header.model_name},
        {"layer_index", header.layer_index},
        {"hidden_dim", header.hidden_dim},
        {"record_count", records.size()},
    };
    const std::string meta_text = meta.dump();

    detail::ByteWriter w;
    w.raw(kMagic);
    w.u32(kHsdsVersion);
    w.u32(static_cast<std::uint32_t>(meta_text.size()));
    w.raw(meta_text);

    for (const auto& rec : records) {
        if (rec.states.cols() != header.hidden_dim) {
            fail(ErrorKind::dimension_mismatch,
                 "record '" + rec.id + "' has hidden_dim " + std::to_string(rec.states.cols()) +
                     ", header says " + std::to_string(header.hidden_dim));
        }
        require(rec.states.rows() == std::size_t{rec.n_question} + rec.n_answer, ErrorKind::shape_mismatch,
                "record '" + rec.id + "' row count differs from n_question + n_answer");
        require(rec.id.size() <= std::numeric_limits<std::uint16_t>::max(), ErrorKind::invalid_argument,
                "record id longer than 65535 bytes");
        require(rec.label <= 1, ErrorKind::invalid_argument, "record '" + rec.id + "' label is not 0/1");
        require(all_finite(rec.states.values()), ErrorKind::non_finite,
                "record '" + rec.id + "' contains NaN or Inf");

        w.u16(static_cast<std::uint16_t>(rec.id.size()));
        w.raw(rec.id);
        w.u8(rec.label);
        w.u32(rec.n_question);
        w.u32(rec.n_answer);
        for (float v : rec.states.values()) {
            w.f32(v);
        }
    }
    detail::write_file(path, w.bytes());
}

Dataset read_dataset(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    detail::ByteReader r(bytes, path.string());

    if (bytes.size() < kMagic.size()) {
        fail(ErrorKind::truncated, path.string() + ": file shorter than the magic bytes");
    }
    if (r.raw(kMagic.size()) != kMagic) {
        fail(ErrorKind::bad_magic, path.string() + ": not an HSDS file (bad magic)");
    }
    const auto version = r.u32();
    if (version != kHsdsVersion) {
        fail(ErrorKind::version_mismatch, path.string() + ": HSDS version " + std::to_string(version) +
                                              " unsupported (expected " + std::to_string(kHsdsVersion) + ")");
    }
    const auto header_len = r.u32();
    const auto header_text = r.raw(header_len);

    Dataset ds;
    try {
        const auto meta = nlohmann::json::parse(header_text);
        ds.header.format_version = version;
        ds.header.model_name = meta.at("model_name").get<std::string>();
        ds.header.layer_index = meta.at("layer_index").get<std::int64_t>();
        ds.header.hidden_dim = meta.at("hidden_dim").get<std::uint32_t>();
        ds.header.record_count = meta.at("record_count").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::corrupt, path.string() + ": malformed header: " + e.what());
    }
    require(ds.header.hidden_dim >= 1 && ds.header.layer_index >= 0, ErrorKind::corrupt,
            path.string() + ": header has invalid hidden_dim or layer_index");

    const std::size_t dim = ds.header.hidden_dim;
    ds.records.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(ds.header.record_count, 1u << 20)));
    for (std::uint64_t i = 0; i < ds.header.record_count; ++i) {
        HiddenStateRecord rec;
        const auto id_len = r.u16();
        rec.id = std::string(r.raw(id_len));
        rec.label = r.u8();
        rec.n_question = r.u32();
        rec.n_answer = r.u32();
        require(rec.label <= 1, ErrorKind::corrupt, path.string() + ": record '" + rec.id + "' label is not 0/1");

        const std::size_t rows = std::size_t{rec.n_question} + rec.n_answer;
        if (dim != 0 && rows > r.remaining() / (4 * dim)) {
            fail(ErrorKind::truncated, path.string() + ": record '" + rec.id + "' payload truncated");
        }
        std::vector<float> values(rows * dim);
        for (auto& v : values) {
            v = r.f32();
            if (!std::isfinite(v)) {
                fail(ErrorKind::non_finite, path.string() + ": record '" + rec.id + "' contains NaN or Inf");
            }
        }
        rec.states = Matrix<float>(rows, dim, std::move(values));
        ds.records.push_back(std::move(rec));
    }
    if (r.remaining() != 0) {
        fail(ErrorKind::corrupt, path.string() + ": " + std::to_string(r.remaining()) +
                                     " trailing bytes after the declared records");
    }
    return ds;
}

ValidationReport validate(std::span<const HiddenStateRecord> records) {
    ValidationReport report;
    report.total = records.size();
    std::unordered_set<std::string_view> seen;
    for (const auto& rec : records) {
        if (!seen.insert(rec.id).second) {
            report.duplicate_ids.push_back(rec.id);
        }
        if (rec.label == 1) {
            ++report.positives;
        } else if (rec.label == 0) {
            ++report.negatives;
        } else {
            report.bad_label_ids.push_back(rec.id);
        }
        if (!all_finite(rec.states.values())) {
            report.non_finite_ids.push_back(rec.id);
        }
        if (rec.n_question == 0) {
            report.empty_question_ids.push_back(rec.id);
        }
        if (rec.states.rows() != std::size_t{rec.n_question} + rec.n_answer) {
            report.row_count_ids.push_back(rec.id);
        }
    }
    report.accuracy = report.total == 0 ? 0.0
                                        : static_cast<double>(report.positives) / static_cast<double>(report.total);
    return report;
}

namespace {

// Largest-remainder apportionment of `total` items by `weights` (which sum to
// `total` up to rounding). Ties in the remainder go to the earlier part.
std::array<std::size_t, 3> apportion(std::size_t total, const std::array<double, 3>& quotas) {
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> remainders{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const double q = std::max(0.0, quotas[i]);
        counts[i] = static_cast<std::size_t>(std::floor(q + 1e-9));
        remainders[i] = q - static_cast<double>(counts[i]);
        assigned += counts[i];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainders[a] > remainders[b] + 1e-12; });
    for (std::size_t k = 0; assigned < total; k = (k + 1) % 3) {
        ++counts[order[k]];
        ++assigned;
    }
    while (assigned > total) {
        for (std::size_t k = 3; k-- > 0 && assigned > total;) {
            if (counts[order[k]] > 0) {
                --counts[order[k]];
                --assigned;
            }
        }
    }
    return counts;
}

}  // namespace

SplitIndices split_indices(std::span<const std::uint8_t> labels, const SplitSpec& spec) {
    const std::array<double, 3> fractions{spec.train, spec.val, spec.test};
    for (double f : fractions) {
        require(std::isfinite(f) && f >= 0.0 && f <= 1.0, ErrorKind::invalid_argument,
                "split fractions must lie in [0, 1]");
    }
    require(std::abs(spec.train + spec.val + spec.test - 1.0) <= 1e-9, ErrorKind::invalid_argument,
            "split fractions must sum to 1");

    const std::size_t n = labels.size();
    std::array<double, 3> size_quota{};
    for (std::size_t i = 0; i < 3; ++i) {
        size_quota[i] = fractions[i] * static_cast<double>(n);
    }
    const auto sizes = apportion(n, size_quota);

    std::vector<std::size_t> pos;
    std::vector<std::size_t> neg;
    for (std::size_t i = 0; i < n; ++i) {
        (labels[i] == 1 ? pos : neg).push_back(i);
    }
    std::array<double, 3> pos_quota{};
    for (std::size_t i = 0; i < 3; ++i) {
        pos_quota[i] = n == 0 ? 0.0
                              : static_cast<double>(sizes[i]) * static_cast<double>(pos.size()) /
                                    static_cast<double>(n);
    }
    const auto pos_counts = apportion(pos.size(), pos_quota);

    std::mt19937_64 rng(spec.seed);
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);

    SplitIndices out;
    std::array<std::vector<std::size_t>*, 3> parts{&out.train, &out.val, &out.test};
    std::size_t p_at = 0;
    std::size_t n_at = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        const std::size_t np = pos_counts[i];
        const std::size_t nn = sizes[i] - np;
        parts[i]->insert(parts[i]->end(), pos.begin() + static_cast<std::ptrdiff_t>(p_at),
                         pos.begin() + static_cast<std::ptrdiff_t>(p_at + np));
        parts[i]->insert(parts[i]->end(), neg.begin() + static_cast<std::ptrdiff_t>(n_at),
                         neg.begin() + static_cast<std::ptrdiff_t>(n_at + nn));
        p_at += np;
        n_at += nn;
        std::sort(parts[i]->begin(), parts[i]->end());
    }
    return out;
}

Splits split(std::span<const HiddenStateRecord> records, const SplitSpec& spec) {
    {
        std::vector<std::string_view> ids;
        ids.reserve(records.size());
        for (const auto& r : records) {
            ids.push_back(r.id);
        }
        std::sort(ids.begin(), ids.end());
        require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), ErrorKind::invalid_argument,
                "record ids must be unique to split");
    }
    const auto labels = labels_of(records);
    const auto idx = split_indices(labels, spec);
    auto gather = [&](const std::vector<std::size_t>& which) {
        std::vector<HiddenStateRecord> out;
        out.reserve(which.size());
        for (auto i : which) {
            out.push_back(records[i]);
        }
        return out;
    };
    return {gather(idx.train), gather(idx.val), gather(idx.test)};
}

TokenMatrix segment_select(const HiddenStateRecord& record, SegmentMode mode) {
    const std::size_t rows =
        mode == SegmentMode::question_only ? record.n_question : record.states.rows();
    require(rows >= 1, ErrorKind::invalid_argument, "record '" + record.id + "': empty token selection");
    require(rows <= record.states.rows(), ErrorKind::shape_mismatch,
            "record '" + record.id + "': fewer state rows than n_question");
    const std::size_t dim = record.states.cols();
    TokenMatrix m(rows, dim);
    const auto src = record.states.values();
    std::copy(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(rows * dim), m.data());
    return m;
}

HiddenStateRecord truncate_answer(const HiddenStateRecord& record, double fraction) {
    require(fraction > 0.0 && fraction <= 1.0, ErrorKind::invalid_argument,
            "answer fraction must lie in (0, 1]");
    if (fraction == 1.0) {
        return record;
    }
    const auto kept = static_cast<std::uint32_t>(std::ceil(fraction * record.n_answer - 1e-9));
    const std::size_t rows = std::size_t{record.n_question} + kept;
    const std::size_t dim = record.states.cols();
    HiddenStateRecord out;
    out.id = record.id;
    out.label = record.label;
    out.n_question = record.n_question;
    out.n_answer = kept;
    const auto src = record.states.values();
    out.states = Matrix<float>(rows, dim, std::vector<float>(src.begin(), src.begin() + static_cast<std::ptrdiff_t>(rows * dim)));
    return out;
}

std::vector<HiddenStateRecord> synth_dataset(std::size_t count, std::size_t dim, double separation,
                                             std::uint64_t seed) {
    SynthOptions options;
    options.count = count;
    options.dim = dim;
    options.separation = separation;
    options.seed = seed;
    return synth_dataset(options);
}

std::vector<HiddenStateRecord> synth_dataset(const SynthOptions& o) {
    require(o.count >= 2, ErrorKind::invalid_argument, "synth: need at least 2 records");
    require(o.dim >= 2, ErrorKind::invalid_argument, "synth: need hidden dim >= 2");
    require(std::isfinite(o.separation) && o.separation >= 0.0, ErrorKind::invalid_argument,
            "synth: separation must be finite and >= 0");
    require(o.min_question >= 1 && o.min_question <= o.max_question && o.min_answer <= o.max_answer,
            ErrorKind::invalid_argument, "synth: invalid token length ranges");
    require(o.tail_fraction > 0.0 && o.tail_fraction <= 1.0, ErrorKind::invalid_argument,
            "synth: tail_fraction must lie in (0, 1]");

    std::normal_distribution<double> normal(0.0, 1.0);

    std::vector<double> direction(o.dim);
    {
        std::mt19937_64 dir_rng(o.direction_seed.value_or(o.seed ^ 0x9e3779b97f4a7c15ULL));
        double norm = 0.0;
        while (norm < 1e-12) {
            norm = 0.0;
            for (auto& v : direction) {
                v = normal(dir_rng);
                norm += v * v;
            }
            norm = std::sqrt(norm);
        }
        for (auto& v : direction) {
            v /= norm;
        }
    }

    std::mt19937_64 rng(o.seed);
    std::vector<std::uint8_t> labels(o.count);
    for (std::size_t i = 0; i < o.count; ++i) {
        labels[i] = i < o.count / 2 ? 1 : 0;
    }
    std::shuffle(labels.begin(), labels.end(), rng);

    std::uniform_int_distribution<std::uint32_t> q_len(o.min_question, o.max_question);
    std::uniform_int_distribution<std::uint32_t> a_len(o.min_answer, o.max_answer);
    const int width = std::max<int>(6, static_cast<int>(std::to_string(o.count).size()));

    std::vector<HiddenStateRecord> records;
    records.reserve(o.count);
    for (std::size_t i = 0; i < o.count; ++i) {
        HiddenStateRecord rec;
        std::ostringstream id;
        id << o.id_prefix << '-' << std::setw(width) << std::setfill('0') << i;
        rec.id = id.str();
        rec.label = labels[i];
        rec.n_question = q_len(rng);
        rec.n_answer = a_len(rng);
        const std::size_t rows = std::size_t{rec.n_question} + rec.n_answer;
        const double shift = (rec.label == 1 ? 0.5 : -0.5) * o.separation;

        const auto tail = static_cast<std::size_t>(std::ceil(o.tail_fraction * rec.n_answer - 1e-9));
        const std::size_t signal_from = o.region == SignalRegion::all_tokens ? 0 : rows - tail;

        Matrix<float> states(rows, o.dim);
        for (std::size_t r = 0; r < rows; ++r) {
            const double s = r >= signal_from ? shift : 0.0;
            for (std::size_t c = 0; c < o.dim; ++c) {
                states(r, c) = static_cast<float>(normal(rng) + s * direction[c]);
            }
        }
        rec.states = std::move(states);
        records.push_back(std::move(rec));
    }
    return records;
}

std::vector<std::uint8_t> labels_of(std::span<const HiddenStateRecord> records) {
    std::vector<std::uint8_t> labels;
    labels.reserve(records.size());
    for (const auto& r : records) {
        labels.push_back(r.label);
    }
    return labels;
}

}  // namespace hsprobe
