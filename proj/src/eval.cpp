#include "masd/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace masd::eval {

namespace {

void check_nonempty(std::span<const double> normals, std::span<const double> anomalies) {
    if (normals.empty() || anomalies.empty()) {
        throw std::invalid_argument("metric: both classes must be nonempty");
    }
}

// ROC polyline from (0,0) to (1,1): one vertex per distinct score,
// thresholds descending, classification rule score >= threshold.
std::vector<std::pair<double, double>> roc_points(std::span<const double> normals,
                                                  std::span<const double> anomalies) {
    std::vector<double> ns(normals.begin(), normals.end());
    std::vector<double> as(anomalies.begin(), anomalies.end());
    std::sort(ns.begin(), ns.end(), std::greater<>());
    std::sort(as.begin(), as.end(), std::greater<>());

    std::vector<std::pair<double, double>> pts;
    pts.emplace_back(0.0, 0.0);
    std::size_t i = 0;
    std::size_t j = 0;
    const double inv_n = 1.0 / static_cast<double>(ns.size());
    const double inv_a = 1.0 / static_cast<double>(as.size());
    while (i < ns.size() || j < as.size()) {
        double v;
        if (i < ns.size() && j < as.size()) {
            v = std::max(ns[i], as[j]);
        } else if (i < ns.size()) {
            v = ns[i];
        } else {
            v = as[j];
        }
        while (i < ns.size() && ns[i] == v) {
            ++i;
        }
        while (j < as.size() && as[j] == v) {
            ++j;
        }
        pts.emplace_back(static_cast<double>(i) * inv_n, static_cast<double>(j) * inv_a);
    }
    return pts;
}

std::optional<double> slice_auc(const std::vector<const ScoredEntry*>& slice) {
    std::vector<double> ns;
    std::vector<double> as;
    for (const ScoredEntry* e : slice) {
        (e->anomalous ? as : ns).push_back(e->score);
    }
    if (ns.empty() || as.empty()) {
        return std::nullopt;
    }
    return auc(ns, as);
}

std::optional<double> slice_pauc(const std::vector<const ScoredEntry*>& slice, double p) {
    std::vector<double> ns;
    std::vector<double> as;
    for (const ScoredEntry* e : slice) {
        (e->anomalous ? as : ns).push_back(e->score);
    }
    if (ns.empty() || as.empty()) {
        return std::nullopt;
    }
    return pauc(ns, as, p);
}

std::optional<double> hmean_of(const std::vector<std::optional<double>>& vals) {
    std::vector<double> present;
    for (const auto& v : vals) {
        if (v) {
            if (*v <= 0.0) {
                return std::nullopt;
            }
            present.push_back(*v);
        }
    }
    if (present.empty()) {
        return std::nullopt;
    }
    return harmonic_mean(present);
}

nlohmann::json slice_json(const SliceMetrics& s) {
    nlohmann::json j;
    j["auc"] = s.auc ? nlohmann::json(*s.auc) : nlohmann::json(nullptr);
    j["pauc"] = s.pauc ? nlohmann::json(*s.pauc) : nlohmann::json(nullptr);
    return j;
}

void csv_cell(std::ostringstream& out, const std::optional<double>& v) {
    if (v) {
        out << *v;
    }
}

} // namespace

double auc(std::span<const double> normal_scores, std::span<const double> anomaly_scores) {
    check_nonempty(normal_scores, anomaly_scores);
    std::vector<double> ns(normal_scores.begin(), normal_scores.end());
    std::sort(ns.begin(), ns.end());
    double wins = 0.0;
    for (double a : anomaly_scores) {
        const auto lo = std::lower_bound(ns.begin(), ns.end(), a);
        const auto hi = std::upper_bound(ns.begin(), ns.end(), a);
        wins += static_cast<double>(lo - ns.begin());
        wins += 0.5 * static_cast<double>(hi - lo);
    }
    return wins / (static_cast<double>(ns.size()) * static_cast<double>(anomaly_scores.size()));
}

double pauc(std::span<const double> normal_scores, std::span<const double> anomaly_scores,
            double p) {
    check_nonempty(normal_scores, anomaly_scores);
    if (!(p > 0.0 && p <= 1.0)) {
        throw std::invalid_argument("pauc: p must be in (0, 1]");
    }
    const auto pts = roc_points(normal_scores, anomaly_scores);
    double area = 0.0;
    for (std::size_t i = 0; i + 1 < pts.size(); ++i) {
        const auto [x0, y0] = pts[i];
        const auto [x1, y1] = pts[i + 1];
        if (x0 >= p) {
            break;
        }
        if (x1 <= p) {
            area += (x1 - x0) * 0.5 * (y0 + y1);
        } else {
            // interpolate the curve at fpr = p
            const double yp = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * 0.5 * (y0 + yp);
            break;
        }
    }
    return area / p;
}

double harmonic_mean(std::span<const double> values) {
    if (values.empty()) {
        throw std::invalid_argument("harmonic_mean: empty input");
    }
    double denom = 0.0;
    for (double v : values) {
        if (!(v > 0.0)) {
            throw std::invalid_argument("harmonic_mean: values must be positive");
        }
        denom += 1.0 / v;
    }
    return static_cast<double>(values.size()) / denom;
}

MetricsReport evaluate(std::span<const ScoredEntry> entries, double p) {
    if (entries.empty()) {
        throw std::invalid_argument("evaluate: no entries");
    }
    std::map<std::string, std::vector<const ScoredEntry*>> by_section;
    for (const ScoredEntry& e : entries) {
        by_section[e.section].push_back(&e);
    }

    MetricsReport report;
    report.p = p;
    std::vector<std::optional<double>> src_auc, src_pauc, tgt_auc, tgt_pauc, both_auc, both_pauc;
    for (const auto& [section, slice] : by_section) {
        std::vector<const ScoredEntry*> source;
        std::vector<const ScoredEntry*> target;
        for (const ScoredEntry* e : slice) {
            (e->domain == "target" ? target : source).push_back(e);
        }
        SectionReport sr;
        sr.section = section;
        sr.source = {slice_auc(source), slice_pauc(source, p)};
        sr.target = {slice_auc(target), slice_pauc(target, p)};
        sr.both = {slice_auc(slice), slice_pauc(slice, p)};
        src_auc.push_back(sr.source.auc);
        src_pauc.push_back(sr.source.pauc);
        tgt_auc.push_back(sr.target.auc);
        tgt_pauc.push_back(sr.target.pauc);
        both_auc.push_back(sr.both.auc);
        both_pauc.push_back(sr.both.pauc);
        report.sections.push_back(std::move(sr));
    }
    report.source_hmean = {hmean_of(src_auc), hmean_of(src_pauc)};
    report.target_hmean = {hmean_of(tgt_auc), hmean_of(tgt_pauc)};
    report.both_hmean = {hmean_of(both_auc), hmean_of(both_pauc)};
    return report;
}

std::string report_to_json(const MetricsReport& report) {
    nlohmann::json j;
    j["p"] = report.p;
    j["sections"] = nlohmann::json::array();
    for (const SectionReport& s : report.sections) {
        nlohmann::json js;
        js["section"] = s.section;
        js["source"] = slice_json(s.source);
        js["target"] = slice_json(s.target);
        js["both"] = slice_json(s.both);
        j["sections"].push_back(js);
    }
    j["harmonic_mean"]["source"] = slice_json(report.source_hmean);
    j["harmonic_mean"]["target"] = slice_json(report.target_hmean);
    j["harmonic_mean"]["both"] = slice_json(report.both_hmean);
    return j.dump(2) + "\n";
}

std::string report_to_csv(const MetricsReport& report) {
    std::ostringstream out;
    out.precision(17);
    out << "section,source_auc,source_pauc,target_auc,target_pauc,both_auc,both_pauc\n";
    auto row = [&out](const std::string& name, const SliceMetrics& a, const SliceMetrics& b,
                      const SliceMetrics& c) {
        out << name << ',';
        csv_cell(out, a.auc);
        out << ',';
        csv_cell(out, a.pauc);
        out << ',';
        csv_cell(out, b.auc);
        out << ',';
        csv_cell(out, b.pauc);
        out << ',';
        csv_cell(out, c.auc);
        out << ',';
        csv_cell(out, c.pauc);
        out << '\n';
    };
    for (const SectionReport& s : report.sections) {
        row(s.section, s.source, s.target, s.both);
    }
    row("harmonic_mean", report.source_hmean, report.target_hmean, report.both_hmean);
    return out.str();
}

NearestNormalReport nearest_normal_distances(std::span<const Vec> anomaly_embs,
                                             std::span<const Vec> normal_embs) {
    if (anomaly_embs.empty() || normal_embs.empty()) {
        throw std::invalid_argument("nearest_normal_distances: empty input");
    }
    NearestNormalReport report;
    report.distances.reserve(anomaly_embs.size());
    for (const Vec& a : anomaly_embs) {
        double best = std::numeric_limits<double>::infinity();
        for (const Vec& n : normal_embs) {
            best = std::min(best, sq_dist(a, n));
        }
        report.distances.push_back(std::sqrt(best));
    }
    double mean = 0.0;
    for (double d : report.distances) {
        mean += d;
    }
    mean /= static_cast<double>(report.distances.size());
    double var = 0.0;
    for (double d : report.distances) {
        var += (d - mean) * (d - mean);
    }
    var /= static_cast<double>(report.distances.size());
    report.mean = mean;
    report.stddev = std::sqrt(var);
    return report;
}

} // namespace masd::eval
