#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "masd/vecmath.hpp"

namespace masd::score {

// Lloyd's algorithm with k-means++ seeding, deterministic in the seed.
// Empty clusters are re-seeded to the point farthest from its assigned
// center. Converges when assignments stop changing (300 iteration cap).
std::vector<Vec> kmeans(std::span<const Vec> points, std::size_t k, std::uint64_t seed);

struct SectionRefs {
    std::vector<Vec> source_means; // re-normalized to the unit sphere
    std::vector<Vec> target_refs;  // stored verbatim
};

struct SectionTrainEmbeddings {
    std::vector<Vec> source;
    std::vector<Vec> target;
};

struct ReferenceModel {
    std::map<std::string, SectionRefs> sections;
    std::size_t k = 16;
};

// k-means per section over source-domain training embeddings; target
// embeddings kept as direct references. k is clamped to the source count.
ReferenceModel fit_reference(const std::map<std::string, SectionTrainEmbeddings>& train_embs,
                             std::size_t k, std::uint64_t seed);

// min over both domains of the minimum cosine distance (1 - cos).
double anomaly_score(const Vec& emb, const ReferenceModel& refs, const std::string& section);

void save_reference(const std::filesystem::path& path, const ReferenceModel& refs);
ReferenceModel load_reference(const std::filesystem::path& path);

} // namespace masd::score
