#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace hsprobe {

// Detector scores p (probability the answer is correct) paired with the
// correctness labels y.
struct ScoredSet {
    std::vector<double> scores;
    std::vector<std::uint8_t> labels;

    std::size_t size() const noexcept { return scores.size(); }
};

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
    double threshold = 0.0;  // scores >= threshold are predicted positive
};

struct RACPoint {
    double coverage = 0.0;
    double accuracy = 0.0;
    double threshold = 0.0;
    std::size_t retained = 0;
};

// One point per distinct score (ties grouped), from (0,0) to (1,1).
// Throws ErrorKind::one_class unless both labels occur.
std::vector<RocPoint> roc_curve(const ScoredSet& set);

// Trapezoidal area under roc_curve; equals the Mann-Whitney statistic with
// ties counted as one half.
double auroc(const ScoredSet& set);

// Accuracy of the k most confident samples for k = 1..n. When the cut falls
// inside a group of tied scores the group contributes its mean correctness,
// i.e. the expected accuracy under a uniformly random order of the ties.
std::vector<RACPoint> rac_curve(const ScoredSet& set);

// Area under the RAC over coverage (0, 1]; the first point is held constant
// on (0, 1/n].
double aurac(std::span<const RACPoint> curve);
double aurac(const ScoredSet& set);

double plain_accuracy(const ScoredSet& set);

// Accuracy over the ceil(c * n) most confident samples, 0 < c <= 1.
double accuracy_at_coverage(const ScoredSet& set, double coverage);

// Largest tau with |{p >= tau}| / n >= c.
double threshold_for_coverage(const ScoredSet& set, double coverage);

struct EvalReport {
    std::size_t count = 0;
    std::size_t positives = 0;
    double auroc = 0.0;
    double aurac = 0.0;
    double accuracy = 0.0;
    std::vector<RocPoint> roc;
    std::vector<RACPoint> rac;
};

EvalReport evaluate(const ScoredSet& set);

}  // namespace hsprobe
