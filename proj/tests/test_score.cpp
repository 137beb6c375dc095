#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "masd/geometry.hpp"
#include "masd/rng.hpp"
#include "masd/score.hpp"

using namespace masd;
namespace fs = std::filesystem;

namespace {

Vec random_unit(std::size_t dim, Rng& rng) {
    Vec v(dim);
    for (double& x : v) {
        x = rng.gaussian();
    }
    return geom::normalize(v).coords();
}

} // namespace

TEST_SUITE("score") {

TEST_CASE("kmeans with k=1 is the arithmetic mean") {
    const std::vector<Vec> pts{{1.0, 0.0}, {3.0, 2.0}, {5.0, 4.0}};
    const auto means = score::kmeans(pts, 1, 0);
    REQUIRE(means.size() == 1);
    CHECK(means[0][0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(means[0][1] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("kmeans with k equal to the distinct point count has zero inertia") {
    const std::vector<Vec> pts{{0.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}, {7.0, 7.0}};
    const auto means = score::kmeans(pts, 4, 3);
    REQUIRE(means.size() == 4);
    for (const Vec& p : pts) {
        double best = 1e300;
        for (const Vec& m : means) {
            best = std::min(best, sq_dist(p, m));
        }
        CHECK(best <= 1e-24);
    }
}

TEST_CASE("kmeans recovers two well-separated blobs") {
    Rng rng(12);
    std::vector<Vec> pts;
    Vec centroid_a{0.0, 0.0};
    Vec centroid_b{0.0, 0.0};
    for (int i = 0; i < 40; ++i) {
        const Vec a{5.0 + 0.3 * rng.gaussian(), 5.0 + 0.3 * rng.gaussian()};
        const Vec b{-5.0 + 0.3 * rng.gaussian(), -5.0 + 0.3 * rng.gaussian()};
        centroid_a[0] += a[0] / 40.0;
        centroid_a[1] += a[1] / 40.0;
        centroid_b[0] += b[0] / 40.0;
        centroid_b[1] += b[1] / 40.0;
        pts.push_back(a);
        pts.push_back(b);
    }
    const auto means = score::kmeans(pts, 2, 77);
    REQUIRE(means.size() == 2);
    const bool first_is_a = means[0][0] > 0.0;
    const Vec& ma = first_is_a ? means[0] : means[1];
    const Vec& mb = first_is_a ? means[1] : means[0];
    CHECK(std::sqrt(sq_dist(ma, centroid_a)) <= 0.1);
    CHECK(std::sqrt(sq_dist(mb, centroid_b)) <= 0.1);
}

TEST_CASE("kmeans is deterministic in the seed") {
    Rng rng(5);
    std::vector<Vec> pts;
    for (int i = 0; i < 50; ++i) {
        pts.push_back(random_unit(8, rng));
    }
    const auto a = score::kmeans(pts, 5, 11);
    const auto b = score::kmeans(pts, 5, 11);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i] == b[i]);
    }
}

TEST_CASE("fit_reference handles degenerate sections") {
    SUBCASE("identical source embeddings collapse and score zero") {
        Rng rng(9);
        const Vec point = random_unit(6, rng);
        std::map<std::string, score::SectionTrainEmbeddings> embs;
        embs["s"].source.assign(16, point);
        embs["s"].target.push_back(random_unit(6, rng));
        const auto refs = score::fit_reference(embs, 16, 1);
        CHECK(refs.sections.at("s").source_means.size() == 16);
        CHECK(score::anomaly_score(point, refs, "s") <= 1e-12);
    }
    SUBCASE("k is clamped to the source count") {
        Rng rng(10);
        std::map<std::string, score::SectionTrainEmbeddings> embs;
        for (int i = 0; i < 5; ++i) {
            embs["s"].source.push_back(random_unit(4, rng));
        }
        embs["s"].target.push_back(random_unit(4, rng));
        const auto refs = score::fit_reference(embs, 16, 1);
        CHECK(refs.sections.at("s").source_means.size() == 5);
    }
    SUBCASE("target reference count is preserved") {
        Rng rng(11);
        std::map<std::string, score::SectionTrainEmbeddings> embs;
        for (int i = 0; i < 20; ++i) {
            embs["s"].source.push_back(random_unit(4, rng));
        }
        for (int i = 0; i < 10; ++i) {
            embs["s"].target.push_back(random_unit(4, rng));
        }
        const auto refs = score::fit_reference(embs, 16, 1);
        CHECK(refs.sections.at("s").target_refs.size() == 10);
    }
    SUBCASE("missing domain is an error") {
        std::map<std::string, score::SectionTrainEmbeddings> embs;
        embs["s"].source.push_back(Vec{1.0, 0.0});
        CHECK_THROWS(score::fit_reference(embs, 4, 1));
    }
    SUBCASE("source means are re-normalized to the sphere") {
        Rng rng(13);
        std::map<std::string, score::SectionTrainEmbeddings> embs;
        for (int i = 0; i < 12; ++i) {
            embs["s"].source.push_back(random_unit(6, rng));
        }
        embs["s"].target.push_back(random_unit(6, rng));
        const auto refs = score::fit_reference(embs, 3, 2);
        for (const Vec& m : refs.sections.at("s").source_means) {
            CHECK(std::abs(norm2(m) - 1.0) <= 1e-9);
        }
    }
}

TEST_CASE("anomaly score semantics") {
    score::ReferenceModel refs;
    refs.sections["s"].source_means = {{1.0, 0.0}, {0.0, 1.0}};
    refs.sections["s"].target_refs = {{-1.0, 0.0}};

    SUBCASE("equal to a source mean scores 0") {
        CHECK(score::anomaly_score(Vec{1.0, 0.0}, refs, "s") == 0.0);
    }
    SUBCASE("orthogonal to sources but equal to a target ref scores 0") {
        CHECK(score::anomaly_score(Vec{-1.0, 0.0}, refs, "s") == 0.0);
    }
    SUBCASE("antipodal to every reference scores 2") {
        score::ReferenceModel lone;
        lone.sections["s"].source_means = {{1.0, 0.0}};
        lone.sections["s"].target_refs = {{1.0, 0.0}};
        CHECK(score::anomaly_score(Vec{-1.0, 0.0}, lone, "s") ==
              doctest::Approx(2.0).epsilon(1e-15));
    }
    SUBCASE("unknown section is an error") {
        CHECK_THROWS_AS((void)score::anomaly_score(Vec{1.0, 0.0}, refs, "zzz"),
                        std::invalid_argument);
    }
    SUBCASE("adding a reference never increases a score") {
        Rng rng(21);
        for (int t = 0; t < 50; ++t) {
            score::ReferenceModel base;
            base.sections["s"].source_means = {random_unit(5, rng), random_unit(5, rng)};
            base.sections["s"].target_refs = {random_unit(5, rng)};
            auto extended = base;
            extended.sections["s"].source_means.push_back(random_unit(5, rng));
            const Vec q = random_unit(5, rng);
            CHECK(score::anomaly_score(q, extended, "s") <=
                  score::anomaly_score(q, base, "s") + 1e-15);
        }
    }
    SUBCASE("scores live in [0, 2]") {
        Rng rng(31);
        for (int t = 0; t < 100; ++t) {
            const double s = score::anomaly_score(random_unit(2, rng), refs, "s");
            CHECK(s >= 0.0);
            CHECK(s <= 2.0);
        }
    }
}

TEST_CASE("cosine distance ranking equals squared distance ranking on the sphere") {
    Rng rng(41);
    for (int t = 0; t < 50; ++t) {
        std::vector<Vec> refs;
        for (int i = 0; i < 6; ++i) {
            refs.push_back(random_unit(8, rng));
        }
        const Vec q = random_unit(8, rng);
        std::size_t best_cos = 0;
        std::size_t best_dist = 0;
        for (std::size_t i = 1; i < refs.size(); ++i) {
            if (1.0 - dot(q, refs[i]) < 1.0 - dot(q, refs[best_cos])) {
                best_cos = i;
            }
            if (sq_dist(q, refs[i]) < sq_dist(q, refs[best_dist])) {
                best_dist = i;
            }
        }
        CHECK(best_cos == best_dist);
    }
}

TEST_CASE("reference checkpoint round trip") {
    Rng rng(51);
    std::map<std::string, score::SectionTrainEmbeddings> embs;
    for (const char* name : {"a", "b"}) {
        for (int i = 0; i < 8; ++i) {
            embs[name].source.push_back(random_unit(5, rng));
        }
        for (int i = 0; i < 3; ++i) {
            embs[name].target.push_back(random_unit(5, rng));
        }
    }
    const auto refs = score::fit_reference(embs, 4, 7);
    const fs::path path = fs::temp_directory_path() / "masd_refs.bin";
    score::save_reference(path, refs);
    const auto back = score::load_reference(path);
    REQUIRE(back.sections.size() == refs.sections.size());
    CHECK(back.k == refs.k);
    for (const auto& [name, section] : refs.sections) {
        const auto& other = back.sections.at(name);
        REQUIRE(other.source_means.size() == section.source_means.size());
        for (std::size_t i = 0; i < section.source_means.size(); ++i) {
            CHECK(other.source_means[i] == section.source_means[i]);
        }
        REQUIRE(other.target_refs.size() == section.target_refs.size());
    }
}

} // TEST_SUITE
