#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include <json.hpp>

#include "masd/eval.hpp"
#include "masd/geometry.hpp"
#include "masd/rng.hpp"

using namespace masd;

namespace {

// Brute-force pairwise oracle for the AUC.
double auc_oracle(const Vec& normals, const Vec& anomalies) {
    double wins = 0.0;
    for (double a : anomalies) {
        for (double n : normals) {
            if (a > n) {
                wins += 1.0;
            } else if (a == n) {
                wins += 0.5;
            }
        }
    }
    return wins / (static_cast<double>(normals.size()) * static_cast<double>(anomalies.size()));
}

// Independent threshold-sweep oracle for the pAUC: enumerate every distinct
// score as a threshold, collect (fpr, tpr) pairs, integrate the polyline up
// to p with explicit interpolation.
double pauc_oracle(const Vec& normals, const Vec& anomalies, double p) {
    std::set<double> thresholds(normals.begin(), normals.end());
    thresholds.insert(anomalies.begin(), anomalies.end());

    std::vector<std::pair<double, double>> pts;
    pts.emplace_back(0.0, 0.0);
    for (auto it = thresholds.rbegin(); it != thresholds.rend(); ++it) {
        const double t = *it;
        double fp = 0.0, tp = 0.0;
        for (double n : normals) {
            if (n >= t) {
                fp += 1.0;
            }
        }
        for (double a : anomalies) {
            if (a >= t) {
                tp += 1.0;
            }
        }
        pts.emplace_back(fp / static_cast<double>(normals.size()),
                         tp / static_cast<double>(anomalies.size()));
    }

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
            const double yp = y0 + (y1 - y0) * (p - x0) / (x1 - x0);
            area += (p - x0) * 0.5 * (y0 + yp);
            break;
        }
    }
    return area / p;
}

std::pair<Vec, Vec> random_scores(Rng& rng, std::size_t max_points) {
    const std::size_t nn = 2 + rng.uniform_int(max_points - 1);
    const std::size_t na = 2 + rng.uniform_int(max_points - 1);
    Vec normals(nn), anomalies(na);
    for (double& v : normals) {
        v = std::round(rng.uniform() * 25.0) / 25.0; // coarse grid forces ties
    }
    for (double& v : anomalies) {
        v = std::round((rng.uniform() + 0.15) * 25.0) / 25.0;
    }
    return {normals, anomalies};
}

} // namespace

TEST_SUITE("eval") {

TEST_CASE("auc spot values") {
    CHECK(eval::auc(Vec{0.1, 0.2}, Vec{0.8, 0.9}) == 1.0);
    CHECK(eval::auc(Vec{0.5, 0.5, 0.5}, Vec{0.5, 0.5}) == 0.5);
    CHECK(eval::auc(Vec{0.3, 0.7}, Vec{0.5, 0.9}) == 0.75);
    CHECK_THROWS(eval::auc(Vec{}, Vec{1.0}));
}

TEST_CASE("pauc spot values") {
    CHECK(eval::pauc(Vec{0.1, 0.2}, Vec{0.8, 0.9}, 0.1) == doctest::Approx(1.0));
    CHECK(eval::pauc(Vec{0.3, 0.7}, Vec{0.5, 0.9}, 1.0) == doctest::Approx(0.75));
    CHECK_THROWS(eval::pauc(Vec{0.1}, Vec{0.9}, 0.0));
    CHECK_THROWS(eval::pauc(Vec{0.1}, Vec{0.9}, 1.5));
}

TEST_CASE("metrics match the brute-force oracles") {
    Rng rng(2718);
    double worst = 0.0;
    for (int t = 0; t < 50; ++t) {
        const auto [normals, anomalies] = random_scores(rng, 100);
        worst = std::max(worst,
                         std::abs(eval::auc(normals, anomalies) - auc_oracle(normals, anomalies)));
        worst = std::max(worst, std::abs(eval::pauc(normals, anomalies, 0.1) -
                                         pauc_oracle(normals, anomalies, 0.1)));
        worst = std::max(worst, std::abs(eval::pauc(normals, anomalies, 1.0) -
                                         eval::auc(normals, anomalies)));
    }
    CHECK(worst <= 1e-9);
}

TEST_CASE("pauc at p=1 equals auc to addition noise") {
    Rng rng(999);
    for (int t = 0; t < 20; ++t) {
        const auto [normals, anomalies] = random_scores(rng, 150);
        CHECK(std::abs(eval::pauc(normals, anomalies, 1.0) - eval::auc(normals, anomalies)) <=
              1e-12);
    }
}

TEST_CASE("auc is invariant under strictly monotone transforms") {
    Rng rng(31415);
    for (int t = 0; t < 20; ++t) {
        const auto [normals, anomalies] = random_scores(rng, 80);
        Vec tn = normals, ta = anomalies;
        for (double& v : tn) {
            v = std::exp(v) + 3.0;
        }
        for (double& v : ta) {
            v = std::exp(v) + 3.0;
        }
        CHECK(std::abs(eval::auc(normals, anomalies) - eval::auc(tn, ta)) <= 1e-12);
    }
}

TEST_CASE("swapping class labels flips the auc") {
    Rng rng(161803);
    for (int t = 0; t < 20; ++t) {
        const auto [normals, anomalies] = random_scores(rng, 80);
        CHECK(std::abs(eval::auc(normals, anomalies) + eval::auc(anomalies, normals) - 1.0) <=
              1e-12);
    }
}

TEST_CASE("harmonic mean") {
    CHECK(eval::harmonic_mean(Vec{0.37}) == 0.37);
    CHECK(eval::harmonic_mean(Vec{0.5, 1.0}) == 2.0 / 3.0);
    CHECK_THROWS(eval::harmonic_mean(Vec{}));
    CHECK_THROWS(eval::harmonic_mean(Vec{0.5, 0.0}));
    CHECK_THROWS(eval::harmonic_mean(Vec{0.5, -1.0}));

    Rng rng(6);
    for (int t = 0; t < 30; ++t) {
        Vec vals(3 + rng.uniform_int(5));
        double amean = 0.0;
        for (double& v : vals) {
            v = 0.05 + rng.uniform();
            amean += v;
        }
        amean /= static_cast<double>(vals.size());
        CHECK(eval::harmonic_mean(vals) <= amean + 1e-12);
    }
}

TEST_CASE("evaluate builds per-section, per-domain slices") {
    std::vector<eval::ScoredEntry> entries;
    auto add = [&entries](const std::string& section, const std::string& domain, bool anomalous,
                          double s) { entries.push_back({s, anomalous, section, domain}); };

    SUBCASE("perfect scorer yields all ones") {
        for (const std::string domain : {"source", "target"}) {
            for (int i = 0; i < 5; ++i) {
                add("s0", domain, false, 0.1 + 0.01 * i);
                add("s0", domain, true, 0.8 + 0.01 * i);
            }
        }
        const auto report = eval::evaluate(entries, 0.1);
        REQUIRE(report.sections.size() == 1);
        CHECK(*report.sections[0].source.auc == 1.0);
        CHECK(*report.sections[0].target.pauc == 1.0);
        CHECK(*report.sections[0].both.auc == 1.0);
        CHECK(*report.both_hmean.auc == 1.0);
    }
    SUBCASE("constant scorer yields auc 0.5") {
        for (int i = 0; i < 6; ++i) {
            add("s0", i % 2 ? "source" : "target", i % 2 == 0, 0.42);
        }
        const auto report = eval::evaluate(entries, 0.1);
        CHECK(*report.sections[0].both.auc == 0.5);
    }
    SUBCASE("two sections at auc 0.5 and 1.0 have hmean 2/3") {
        // perfect section
        for (int i = 0; i < 4; ++i) {
            add("good", "source", false, 0.0 + 0.01 * i);
            add("good", "source", true, 1.0 + 0.01 * i);
        }
        // all-tied section
        for (int i = 0; i < 4; ++i) {
            add("tied", "source", i % 2 == 0, 0.5);
        }
        const auto report = eval::evaluate(entries, 0.1);
        REQUIRE(report.sections.size() == 2);
        CHECK(*report.source_hmean.auc == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    }
    SUBCASE("slice missing a class is reported absent") {
        add("s0", "source", false, 0.2);
        add("s0", "source", true, 0.9);
        add("s0", "target", false, 0.4); // no target anomalies
        const auto report = eval::evaluate(entries, 0.1);
        CHECK(report.sections[0].source.auc.has_value());
        CHECK(!report.sections[0].target.auc.has_value());
        CHECK(report.sections[0].both.auc.has_value());
    }
}

TEST_CASE("report serialization") {
    std::vector<eval::ScoredEntry> entries;
    for (int i = 0; i < 4; ++i) {
        entries.push_back({0.1 * i, false, "s0", "source"});
        entries.push_back({0.5 + 0.1 * i, true, "s0", "source"});
        entries.push_back({0.1 * i, false, "s0", "target"});
        entries.push_back({0.5 + 0.1 * i, true, "s0", "target"});
    }
    const auto report = eval::evaluate(entries, 0.1);

    const auto parsed = nlohmann::json::parse(eval::report_to_json(report));
    CHECK(parsed["p"] == 0.1);
    CHECK(parsed["sections"].size() == 1);
    CHECK(parsed["sections"][0]["section"] == "s0");
    CHECK(parsed["sections"][0]["both"]["auc"] == 1.0);
    CHECK(parsed["harmonic_mean"]["both"]["auc"] == 1.0);

    const std::string csv = eval::report_to_csv(report);
    CHECK(csv.find("section,source_auc,source_pauc,target_auc,target_pauc,both_auc,both_pauc") ==
          0);
    CHECK(csv.find("harmonic_mean") != std::string::npos);
}

TEST_CASE("nearest normal distances") {
    SUBCASE("coinciding anomaly has distance 0") {
        const std::vector<Vec> anomalies{{1.0, 0.0}};
        const std::vector<Vec> normals{{0.0, 1.0}, {1.0, 0.0}};
        const auto r = eval::nearest_normal_distances(anomalies, normals);
        CHECK(r.distances[0] == 0.0);
    }
    SUBCASE("antipodal unit anomaly has distance 2") {
        const std::vector<Vec> anomalies{{-1.0, 0.0}};
        const std::vector<Vec> normals{{1.0, 0.0}};
        const auto r = eval::nearest_normal_distances(anomalies, normals);
        CHECK(r.distances[0] == doctest::Approx(2.0).epsilon(1e-15));
    }
    SUBCASE("matches the exhaustive oracle on random sets") {
        Rng rng(8);
        std::vector<Vec> anomalies, normals;
        for (int i = 0; i < 10; ++i) {
            Vec v(6);
            for (double& x : v) {
                x = rng.gaussian();
            }
            anomalies.push_back(geom::normalize(v).coords());
        }
        for (int i = 0; i < 25; ++i) {
            Vec v(6);
            for (double& x : v) {
                x = rng.gaussian();
            }
            normals.push_back(geom::normalize(v).coords());
        }
        const auto r = eval::nearest_normal_distances(anomalies, normals);
        for (std::size_t i = 0; i < anomalies.size(); ++i) {
            double best = 1e300;
            for (const Vec& n : normals) {
                best = std::min(best, std::sqrt(sq_dist(anomalies[i], n)));
            }
            CHECK(r.distances[i] == best);
        }
        CHECK(r.mean > 0.0);
        CHECK(r.stddev >= 0.0);
    }
}

} // TEST_SUITE
