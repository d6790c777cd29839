#include "hsprobe/metrics.hpp"

#include "hsprobe/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

namespace hsprobe {

namespace {

void check_set(const ScoredSet& set, std::size_t min_size) {
    require(set.scores.size() == set.labels.size(), ErrorKind::shape_mismatch,
            "scores and labels differ in length");
    require(set.scores.size() >= min_size, ErrorKind::invalid_argument,
            "need at least " + std::to_string(min_size) + " scored samples");
    for (double s : set.scores) {
        require(std::isfinite(s), ErrorKind::non_finite, "scores must be finite");
    }
    for (auto y : set.labels) {
        require(y <= 1, ErrorKind::invalid_argument, "labels must be 0 or 1");
    }
}

// Indices sorted by descending score; equal scores keep input order.
std::vector<std::size_t> rank_descending(const ScoredSet& set) {
    std::vector<std::size_t> order(set.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return set.scores[a] > set.scores[b]; });
    return order;
}

struct TieGroup {
    double score = 0.0;
    std::size_t begin = 0;  // rank of the first member
    std::size_t count = 0;
    std::size_t positives = 0;
};

std::vector<TieGroup> tie_groups(const ScoredSet& set, const std::vector<std::size_t>& order) {
    std::vector<TieGroup> groups;
    for (std::size_t r = 0; r < order.size(); ++r) {
        const double s = set.scores[order[r]];
        if (groups.empty() || groups.back().score != s) {
            groups.push_back({s, r, 0, 0});
        }
        ++groups.back().count;
        groups.back().positives += set.labels[order[r]];
    }
    return groups;
}

void require_coverage(double c) {
    require(std::isfinite(c) && c > 0.0 && c <= 1.0, ErrorKind::invalid_argument,
            "coverage must lie in (0, 1]");
}

std::size_t retained_count(std::size_t n, double c) {
    const auto k = static_cast<std::size_t>(std::ceil(c * static_cast<double>(n) - 1e-9));
    return std::clamp<std::size_t>(k, 1, n);
}

// Expected accuracy of the top-k under random ordering of ties.
double top_k_accuracy(const std::vector<TieGroup>& groups, std::size_t k, std::size_t& group_cursor,
                      std::size_t& positives_above) {
    while (groups[group_cursor].begin + groups[group_cursor].count < k) {
        positives_above += groups[group_cursor].positives;
        ++group_cursor;
    }
    const auto& g = groups[group_cursor];
    const std::size_t taken = k - g.begin;
    const double partial =
        static_cast<double>(g.positives * taken) / static_cast<double>(g.count);
    return (static_cast<double>(positives_above) + partial) / static_cast<double>(k);
}

}  // namespace

std::vector<RocPoint> roc_curve(const ScoredSet& set) {
    check_set(set, 2);
    const std::size_t pos = static_cast<std::size_t>(std::count(set.labels.begin(), set.labels.end(), 1));
    const std::size_t neg = set.size() - pos;
    require(pos > 0 && neg > 0, ErrorKind::one_class, "ROC needs both classes present");

    const auto order = rank_descending(set);
    const auto groups = tie_groups(set, order);
    std::vector<RocPoint> curve;
    curve.reserve(groups.size() + 1);
    curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    std::size_t tp = 0;
    std::size_t fp = 0;
    for (const auto& g : groups) {
        tp += g.positives;
        fp += g.count - g.positives;
        curve.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                         static_cast<double>(tp) / static_cast<double>(pos), g.score});
    }
    return curve;
}

double auroc(const ScoredSet& set) {
    check_set(set, 2);
    const std::size_t pos = static_cast<std::size_t>(std::count(set.labels.begin(), set.labels.end(), 1));
    const std::size_t neg = set.size() - pos;
    require(pos > 0 && neg > 0, ErrorKind::one_class, "AUROC needs both classes present");

    // Trapezoids on integer counts: each group adds dFP * (TP_before + TP_after) / 2.
    const auto order = rank_descending(set);
    const auto groups = tie_groups(set, order);
    double twice_area = 0.0;
    std::size_t tp = 0;
    for (const auto& g : groups) {
        const std::size_t gp = g.positives;
        const std::size_t gn = g.count - g.positives;
        twice_area += static_cast<double>(gn) * static_cast<double>(2 * tp + gp);
        tp += gp;
    }
    return twice_area / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

std::vector<RACPoint> rac_curve(const ScoredSet& set) {
    check_set(set, 1);
    const std::size_t n = set.size();
    const auto order = rank_descending(set);
    const auto groups = tie_groups(set, order);
    std::vector<RACPoint> curve;
    curve.reserve(n);
    std::size_t cursor = 0;
    std::size_t above = 0;
    for (std::size_t k = 1; k <= n; ++k) {
        const double acc = top_k_accuracy(groups, k, cursor, above);
        curve.push_back({static_cast<double>(k) / static_cast<double>(n), acc, groups[cursor].score, k});
    }
    return curve;
}

double aurac(std::span<const RACPoint> curve) {
    require(!curve.empty(), ErrorKind::invalid_argument, "empty RAC");
    double area = curve.front().coverage * curve.front().accuracy;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        area += (curve[i].coverage - curve[i - 1].coverage) * 0.5 * (curve[i].accuracy + curve[i - 1].accuracy);
    }
    return area;
}

double aurac(const ScoredSet& set) {
    return aurac(rac_curve(set));
}

double plain_accuracy(const ScoredSet& set) {
    check_set(set, 1);
    const auto pos = std::count(set.labels.begin(), set.labels.end(), 1);
    return static_cast<double>(pos) / static_cast<double>(set.size());
}

double accuracy_at_coverage(const ScoredSet& set, double coverage) {
    require_coverage(coverage);
    check_set(set, 1);
    const auto order = rank_descending(set);
    const auto groups = tie_groups(set, order);
    std::size_t cursor = 0;
    std::size_t above = 0;
    return top_k_accuracy(groups, retained_count(set.size(), coverage), cursor, above);
}

double threshold_for_coverage(const ScoredSet& set, double coverage) {
    require_coverage(coverage);
    check_set(set, 1);
    const auto order = rank_descending(set);
    return set.scores[order[retained_count(set.size(), coverage) - 1]];
}

EvalReport evaluate(const ScoredSet& set) {
    EvalReport report;
    report.count = set.size();
    report.positives = static_cast<std::size_t>(std::count(set.labels.begin(), set.labels.end(), 1));
    report.roc = roc_curve(set);
    report.auroc = auroc(set);
    report.rac = rac_curve(set);
    report.aurac = aurac(report.rac);
    report.accuracy = plain_accuracy(set);
    return report;
}

}  // namespace hsprobe
