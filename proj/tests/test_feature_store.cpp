// HSDS format, validation, splitting and segment selection.

#include <gtest/gtest.h>

#include "hsprobe/error.hpp"
#include "hsprobe/feature_store.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>

namespace fs = std::filesystem;
using namespace hsprobe;

namespace {

fs::path temp_path(const std::string& name) {
    return fs::temp_directory_path() / ("hsprobe_fs_" + std::to_string(::getpid()) + "_" + name);
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::vector<char>& bytes) {
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

HiddenStateRecord make_record(std::string id, std::uint8_t label, std::uint32_t nq, std::uint32_t na,
                              std::size_t dim, float start = 0.0f) {
    HiddenStateRecord r;
    r.id = std::move(id);
    r.label = label;
    r.n_question = nq;
    r.n_answer = na;
    r.states = Matrix<float>(nq + na, dim);
    float v = start;
    for (auto& x : r.states.values()) {
        x = v;
        v += 0.5f;
    }
    return r;
}

ErrorKind kind_of(const fs::path& p) {
    try {
        read_dataset(p);
    } catch (const Error& e) {
        return e.kind();
    }
    ADD_FAILURE() << "no error reading " << p;
    return ErrorKind::invalid_argument;
}

void put_u32(std::vector<char>& b, std::size_t at, std::uint32_t v) {
    std::memcpy(b.data() + at, &v, 4);
}

}  // namespace

TEST(Hsds, ExactBytesOfTinyFile) {
    const auto path = temp_path("tiny.hsds");
    DatasetHeader h;
    h.model_name = "m";
    h.layer_index = 3;
    h.hidden_dim = 2;
    std::vector<HiddenStateRecord> recs{make_record("ab", 1, 1, 0, 2, 1.0f)};
    write_dataset(recs, h, path);

    const std::string meta = R"({"hidden_dim":2,"layer_index":3,"model_name":"m","record_count":1})";
    std::vector<char> want{'H', 'S', 'D', 'S', 1, 0, 0, 0, static_cast<char>(meta.size()), 0, 0, 0};
    want.insert(want.end(), meta.begin(), meta.end());
    for (int c : std::initializer_list<int>{2, 0, 'a', 'b', 1, 1, 0, 0, 0, 0, 0, 0, 0}) {
        want.push_back(static_cast<char>(c));
    }
    // 1.0f, 1.5f little-endian
    for (int c : {0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0xc0, 0x3f}) {
        want.push_back(static_cast<char>(c));
    }
    EXPECT_EQ(slurp(path), want);
    fs::remove(path);
}

TEST(Hsds, FileSizeMatchesLayout) {
    const auto path = temp_path("size.hsds");
    DatasetHeader h;
    h.model_name = "model";
    h.hidden_dim = 5;
    std::vector<HiddenStateRecord> recs{make_record("q1", 0, 3, 4, 5), make_record("question-2", 1, 2, 0, 5)};
    write_dataset(recs, h, path);
    const std::string meta = R"({"hidden_dim":5,"layer_index":0,"model_name":"model","record_count":2})";
    const std::size_t fixed = 4 + 4 + 4 + meta.size();
    const std::size_t r1 = 2 + 2 + 1 + 4 + 4 + 4 * 7 * 5;
    const std::size_t r2 = 2 + 10 + 1 + 4 + 4 + 4 * 2 * 5;
    EXPECT_EQ(fs::file_size(path), fixed + r1 + r2);
    fs::remove(path);
}

TEST(Hsds, RandomRoundTripsAreBitExact) {
    std::mt19937_64 rng(20240501);
    const auto path = temp_path("rt.hsds");
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t dim = 1 + rng() % 24;
        const std::size_t count = rng() % 12;
        DatasetHeader h;
        h.model_name = "model-" + std::to_string(trial);
        h.layer_index = static_cast<std::int64_t>(rng() % 40);
        h.hidden_dim = static_cast<std::uint32_t>(dim);
        std::vector<HiddenStateRecord> recs;
        for (std::size_t i = 0; i < count; ++i) {
            HiddenStateRecord r;
            r.id = "id" + std::to_string(rng() % 100000) + "_" + std::to_string(i);
            r.label = static_cast<std::uint8_t>(rng() % 2);
            r.n_question = static_cast<std::uint32_t>(1 + rng() % 6);
            r.n_answer = static_cast<std::uint32_t>(rng() % 6);
            r.states = Matrix<float>(r.n_question + r.n_answer, dim);
            for (auto& v : r.states.values()) {
                // arbitrary finite bit patterns, including subnormals and -0
                std::uint32_t bits;
                do {
                    bits = static_cast<std::uint32_t>(rng());
                } while ((bits & 0x7f800000u) == 0x7f800000u);
                std::memcpy(&v, &bits, 4);
            }
            recs.push_back(std::move(r));
        }
        write_dataset(recs, h, path);
        const auto ds = read_dataset(path);
        h.record_count = count;
        ASSERT_EQ(ds.header, h) << "trial " << trial;
        ASSERT_EQ(ds.records.size(), recs.size());
        for (std::size_t i = 0; i < count; ++i) {
            ASSERT_EQ(ds.records[i].id, recs[i].id);
            ASSERT_EQ(ds.records[i].label, recs[i].label);
            ASSERT_EQ(ds.records[i].n_question, recs[i].n_question);
            ASSERT_EQ(ds.records[i].n_answer, recs[i].n_answer);
            ASSERT_EQ(std::memcmp(ds.records[i].states.data(), recs[i].states.data(), recs[i].states.size() * 4), 0)
                << "trial " << trial << " record " << i;
        }
    }
    fs::remove(path);
}

class HsdsCorruption : public ::testing::Test {
protected:
    void SetUp() override {
        path = temp_path("bad.hsds");
        DatasetHeader h;
        h.model_name = "m";
        h.hidden_dim = 2;
        std::vector<HiddenStateRecord> recs{make_record("a", 1, 2, 1, 2), make_record("b", 0, 1, 1, 2)};
        write_dataset(recs, h, path);
        bytes = slurp(path);
        std::uint32_t len;
        std::memcpy(&len, bytes.data() + 8, 4);
        first_record = 12 + len;
    }
    void TearDown() override { fs::remove(path); }

    ErrorKind after(const std::vector<char>& b) {
        spit(path, b);
        return kind_of(path);
    }

    fs::path path;
    std::vector<char> bytes;
    std::size_t first_record = 0;
};

TEST_F(HsdsCorruption, BadMagic) {
    auto b = bytes;
    b[0] = 'X';
    EXPECT_EQ(after(b), ErrorKind::bad_magic);
}

TEST_F(HsdsCorruption, ShorterThanMagic) {
    EXPECT_EQ(after({'H', 'S'}), ErrorKind::truncated);
}

TEST_F(HsdsCorruption, FutureVersion) {
    auto b = bytes;
    put_u32(b, 4, 2);
    EXPECT_EQ(after(b), ErrorKind::version_mismatch);
}

TEST_F(HsdsCorruption, TruncatedEverywhere) {
    // cutting the file at any byte inside the header or a record is detected
    for (std::size_t cut = 4; cut < bytes.size(); ++cut) {
        std::vector<char> b(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
        const auto k = after(b);
        EXPECT_TRUE(k == ErrorKind::truncated || k == ErrorKind::corrupt) << "cut at " << cut;
    }
}

TEST_F(HsdsCorruption, MalformedHeaderJson) {
    auto b = bytes;
    b[12] = '[';
    EXPECT_EQ(after(b), ErrorKind::corrupt);
}

TEST_F(HsdsCorruption, HeaderLengthPastEnd) {
    auto b = bytes;
    put_u32(b, 8, 1u << 30);
    EXPECT_EQ(after(b), ErrorKind::truncated);
}

TEST_F(HsdsCorruption, NanPayload) {
    auto b = bytes;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(b.data() + first_record + 2 + 1 + 1 + 8, &nan, 4);
    EXPECT_EQ(after(b), ErrorKind::non_finite);
}

TEST_F(HsdsCorruption, LabelOutOfRange) {
    auto b = bytes;
    b[first_record + 2 + 1] = 2;
    EXPECT_EQ(after(b), ErrorKind::corrupt);
}

TEST_F(HsdsCorruption, TrailingBytes) {
    auto b = bytes;
    b.push_back(0);
    EXPECT_EQ(after(b), ErrorKind::corrupt);
}

TEST_F(HsdsCorruption, RowCountLargerThanPayload) {
    auto b = bytes;
    put_u32(b, first_record + 2 + 1 + 1, 1000);
    EXPECT_EQ(after(b), ErrorKind::truncated);
}

TEST(Hsds, MissingFileIsIo) {
    EXPECT_EQ(kind_of(temp_path("does-not-exist.hsds")), ErrorKind::io);
}

TEST(Hsds, WriterRejectsInconsistentRecords) {
    const auto path = temp_path("w.hsds");
    DatasetHeader h;
    h.hidden_dim = 3;
    auto expect_kind = [&](HiddenStateRecord r, ErrorKind k) {
        try {
            write_dataset(std::vector{r}, h, path);
            ADD_FAILURE() << "accepted";
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), k);
        }
    };
    expect_kind(make_record("d", 0, 1, 0, 2), ErrorKind::dimension_mismatch);
    auto rows = make_record("r", 0, 2, 0, 3);
    rows.n_answer = 1;
    expect_kind(rows, ErrorKind::shape_mismatch);
    auto nan = make_record("n", 0, 1, 0, 3);
    nan.states(0, 1) = std::numeric_limits<float>::infinity();
    expect_kind(nan, ErrorKind::non_finite);
    fs::remove(path);
}

TEST(Validate, CountsAndViolations) {
    std::vector<HiddenStateRecord> recs{make_record("ok", 1, 2, 1, 2), make_record("empty", 0, 0, 2, 2),
                                        make_record("neg", 0, 1, 0, 2)};
    recs[2].states(0, 0) = std::numeric_limits<float>::quiet_NaN();
    recs.push_back(make_record("rows", 1, 1, 1, 2));
    recs.back().n_answer = 4;
    const auto v = validate(recs);
    EXPECT_EQ(v.total, 4u);
    EXPECT_EQ(v.positives, 2u);
    EXPECT_EQ(v.negatives, 2u);
    EXPECT_DOUBLE_EQ(v.accuracy, 0.5);
    EXPECT_EQ(v.empty_question_ids, std::vector<std::string>{"empty"});
    EXPECT_EQ(v.non_finite_ids, std::vector<std::string>{"neg"});
    EXPECT_EQ(v.row_count_ids, std::vector<std::string>{"rows"});
    EXPECT_EQ(v.violation_count(), 3u);
    EXPECT_TRUE(v.duplicate_ids.empty());

    recs.push_back(make_record("ok", 0, 1, 1, 2));
    recs.push_back(make_record("ok", 0, 1, 1, 2));
    const auto dup = validate(recs);
    EXPECT_EQ(dup.duplicate_ids, (std::vector<std::string>{"ok", "ok"}));
    EXPECT_EQ(dup.violation_count(), 5u);
}

TEST(Split, StratifiedCountsOn100With30Positives) {
    // sizes 50/25/25; positive quotas 15/7.5/7.5, the tied remainder going to
    // the earlier part: 15/8/7
    std::vector<std::uint8_t> labels(100, 0);
    for (std::size_t i = 0; i < 30; ++i) {
        labels[i * 3] = 1;
    }
    const auto idx = split_indices(labels, {0.5, 0.25, 0.25, 7});
    auto positives = [&](const std::vector<std::size_t>& part) {
        std::size_t p = 0;
        for (auto i : part) p += labels[i];
        return p;
    };
    EXPECT_EQ(idx.train.size(), 50u);
    EXPECT_EQ(idx.val.size(), 25u);
    EXPECT_EQ(idx.test.size(), 25u);
    EXPECT_EQ(positives(idx.train), 15u);
    EXPECT_EQ(positives(idx.val), 8u);
    EXPECT_EQ(positives(idx.test), 7u);

    std::set<std::size_t> all;
    for (const auto* part : {&idx.train, &idx.val, &idx.test}) {
        EXPECT_TRUE(std::is_sorted(part->begin(), part->end()));
        all.insert(part->begin(), part->end());
    }
    EXPECT_EQ(all.size(), 100u);

    const auto again = split_indices(labels, {0.5, 0.25, 0.25, 7});
    EXPECT_EQ(again.train, idx.train);
    EXPECT_EQ(again.test, idx.test);
    const auto other = split_indices(labels, {0.5, 0.25, 0.25, 8});
    EXPECT_NE(other.train, idx.train);
}

TEST(Split, RejectsBadFractionsAndDuplicateIds) {
    std::vector<std::uint8_t> labels(10, 1);
    EXPECT_THROW(split_indices(labels, {0.5, 0.5, 0.5, 0}), Error);
    EXPECT_THROW(split_indices(labels, {-0.1, 0.6, 0.5, 0}), Error);
    std::vector<HiddenStateRecord> recs{make_record("x", 0, 1, 0, 1), make_record("x", 1, 1, 0, 1)};
    try {
        split(recs, {});
        ADD_FAILURE();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::invalid_argument);
    }
}

TEST(Segment, QuestionOnlyTakesLeadingRows) {
    const auto r = make_record("s", 1, 2, 3, 2);
    const auto q = segment_select(r, SegmentMode::question_only);
    ASSERT_EQ(q.rows(), 2u);
    EXPECT_EQ(q(1, 1), 1.5);
    const auto qa = segment_select(r, SegmentMode::question_and_answer);
    EXPECT_EQ(qa.rows(), 5u);
    EXPECT_EQ(qa(4, 1), 4.5);
}

TEST(Segment, TruncateAnswerKeepsCeilFraction) {
    const auto r = make_record("t", 1, 2, 10, 1);
    EXPECT_EQ(truncate_answer(r, 0.05).n_answer, 1u);  // ceil(0.5)
    EXPECT_EQ(truncate_answer(r, 0.3).n_answer, 3u);   // exactly 3, no float drift to 4
    EXPECT_EQ(truncate_answer(r, 0.31).n_answer, 4u);
    EXPECT_EQ(truncate_answer(r, 1.0), r);
    const auto t = truncate_answer(r, 0.5);
    EXPECT_EQ(t.states.rows(), 7u);
    EXPECT_EQ(t.states(6, 0), 3.0f);
    EXPECT_THROW(truncate_answer(r, 0.0), Error);
}

TEST(Synth, BalancedDeterministicAndValid) {
    const auto a = synth_dataset(101, 4, 2.0, 5);
    const auto b = synth_dataset(101, 4, 2.0, 5);
    EXPECT_EQ(a, b);
    const auto v = validate(a);
    EXPECT_EQ(v.violation_count(), 0u);
    EXPECT_EQ(v.total, 101u);
    EXPECT_LE(std::abs(static_cast<long>(v.positives) - static_cast<long>(v.negatives)), 1);
    EXPECT_NE(synth_dataset(101, 4, 2.0, 6), a);
}

TEST(SegmentModeText, RoundTrips) {
    for (auto m : {SegmentMode::question_only, SegmentMode::question_and_answer}) {
        EXPECT_EQ(parse_segment_mode(to_string(m)), m);
    }
    EXPECT_THROW(parse_segment_mode("answer_only"), Error);
}
