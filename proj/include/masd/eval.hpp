#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "masd/vecmath.hpp"

namespace masd::eval {

// Probability that a random anomalous score exceeds a random normal score,
// ties counted 0.5 (equals the trapezoidal ROC area).
double auc(std::span<const double> normal_scores, std::span<const double> anomaly_scores);

// ROC area over false positive rates in [0, p], linearly interpolated at
// p and normalized by p.
double pauc(std::span<const double> normal_scores, std::span<const double> anomaly_scores,
            double p);

double harmonic_mean(std::span<const double> values);

struct ScoredEntry {
    double score = 0.0;
    bool anomalous = false;
    std::string section;
    std::string domain; // source | target
};

struct SliceMetrics {
    std::optional<double> auc;
    std::optional<double> pauc;
};

struct SectionReport {
    std::string section;
    SliceMetrics source;
    SliceMetrics target;
    SliceMetrics both;
};

struct MetricsReport {
    double p = 0.1;
    std::vector<SectionReport> sections;
    SliceMetrics source_hmean;
    SliceMetrics target_hmean;
    SliceMetrics both_hmean;
};

// Per-section AUC/pAUC for each domain slice plus the pooled "both
// domains" slice (single-threshold semantics), and harmonic means over
// sections per column. A slice missing one of the classes is reported
// absent.
MetricsReport evaluate(std::span<const ScoredEntry> entries, double p = 0.1);

std::string report_to_json(const MetricsReport& report);
std::string report_to_csv(const MetricsReport& report);

struct NearestNormalReport {
    std::vector<double> distances; // per anomalous embedding
    double mean = 0.0;
    double stddev = 0.0;
};

// Euclidean distance from each anomalous embedding to its closest normal
// embedding, in the original embedding space.
NearestNormalReport nearest_normal_distances(std::span<const Vec> anomaly_embs,
                                             std::span<const Vec> normal_embs);

} // namespace masd::eval
