#pragma once

#include "hsprobe/matrix.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace hsprobe {

inline constexpr std::uint32_t kHsdsVersion = 1;

enum class SegmentMode { question_only, question_and_answer };

std::string_view to_string(SegmentMode mode) noexcept;
SegmentMode parse_segment_mode(std::string_view text);

// One (question, answer) example: hidden states of all its tokens at a single
// layer. Rows [0, n_question) are question tokens, the rest answer tokens.
struct HiddenStateRecord {
    std::string id;
    std::uint8_t label = 0;  // 1 = answer judged correct
    std::uint32_t n_question = 0;
    std::uint32_t n_answer = 0;
    Matrix<float> states;

    std::size_t hidden_dim() const noexcept { return states.cols(); }
    bool operator==(const HiddenStateRecord&) const = default;
};

struct DatasetHeader {
    std::uint32_t format_version = kHsdsVersion;
    std::string model_name;
    std::int64_t layer_index = 0;
    std::uint32_t hidden_dim = 0;
    std::uint64_t record_count = 0;

    bool operator==(const DatasetHeader&) const = default;
};

struct Dataset {
    DatasetHeader header;
    std::vector<HiddenStateRecord> records;
};

// HSDS layout (little-endian):
//   "HSDS" | version u32 | header_len u32 | header JSON
//   records: id_len u16 | id | label u8 | n_question u32 | n_answer u32 | f32 rows
// record_count in the written header always equals records.size().
void write_dataset(std::span<const HiddenStateRecord> records, const DatasetHeader& header,
                   const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

struct ValidationReport {
    std::size_t total = 0;
    std::size_t positives = 0;
    std::size_t negatives = 0;
    double accuracy = 0.0;  // positives / total
    std::vector<std::string> non_finite_ids;
    std::vector<std::string> empty_question_ids;
    std::vector<std::string> row_count_ids;
    std::vector<std::string> bad_label_ids;
    std::vector<std::string> duplicate_ids;  // second and later occurrences

    std::size_t violation_count() const noexcept {
        return non_finite_ids.size() + empty_question_ids.size() + row_count_ids.size() +
               bad_label_ids.size() + duplicate_ids.size();
    }
};

ValidationReport validate(std::span<const HiddenStateRecord> records);

struct SplitSpec {
    double train = 0.8;
    double val = 0.1;
    double test = 0.1;
    std::uint64_t seed = 0;
};

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> val;
    std::vector<std::size_t> test;
};

struct Splits {
    std::vector<HiddenStateRecord> train;
    std::vector<HiddenStateRecord> val;
    std::vector<HiddenStateRecord> test;
};

// Stratified by label, deterministic per seed. Indices are returned in
// ascending order within each part.
SplitIndices split_indices(std::span<const std::uint8_t> labels, const SplitSpec& spec);
Splits split(std::span<const HiddenStateRecord> records, const SplitSpec& spec);

TokenMatrix segment_select(const HiddenStateRecord& record, SegmentMode mode);

// Keeps the first ceil(fraction * n_answer) answer tokens.
HiddenStateRecord truncate_answer(const HiddenStateRecord& record, double fraction);

enum class SignalRegion {
    all_tokens,   // every token is shifted by the class mean
    answer_tail,  // only the final tail_fraction of answer tokens is shifted
};

struct SynthOptions {
    std::size_t count = 1000;
    std::size_t dim = 16;
    double separation = 2.0;
    std::uint64_t seed = 0;
    // Direction of the class-mean offset; drawn from `seed` when unset.
    std::optional<std::uint64_t> direction_seed;
    SignalRegion region = SignalRegion::all_tokens;
    double tail_fraction = 0.25;
    std::uint32_t min_question = 3;
    std::uint32_t max_question = 30;
    std::uint32_t min_answer = 0;
    std::uint32_t max_answer = 60;
    std::string id_prefix = "synth";
};

// Two balanced Gaussian classes whose token means differ by `separation`
// along a random unit direction.
std::vector<HiddenStateRecord> synth_dataset(std::size_t count, std::size_t dim, double separation,
                                             std::uint64_t seed);
std::vector<HiddenStateRecord> synth_dataset(const SynthOptions& options);

std::vector<std::uint8_t> labels_of(std::span<const HiddenStateRecord> records);

}  // namespace hsprobe
