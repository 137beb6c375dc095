#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "masd/vecmath.hpp"

namespace masd::geom {

// D-dimensional embedding on the unit hypersphere.
class UnitVector {
public:
    explicit UnitVector(Vec coords);

    const Vec& coords() const { return coords_; }
    std::size_t dim() const { return coords_.size(); }

private:
    Vec coords_;
};

// Divide by the Euclidean norm. A near-zero vector is rejected: a zero
// embedding means the network collapsed onto the trivial fixed point.
UnitVector normalize(std::span<const double> v);

// Inner product of unit vectors, clamped to [-1, 1].
double cosine(const UnitVector& u, const UnitVector& v);

// Squared Euclidean distance between unit vectors, in [0, 4].
double unit_sq_dist(const UnitVector& u, const UnitVector& v);

// |cos(u,v) - (1 - ||u - v||^2 / 2)|, which must vanish on the sphere.
double cosine_identity_residual(const UnitVector& u, const UnitVector& v);

// cos(arccos(cos(u,c)) + m) with the shifted angle clamped to [0, pi].
double cos_margin(const UnitVector& u, const UnitVector& c, double m);

// N classes x M sub-clusters of fixed random unit centers. Non-trainable;
// fully determined by (N, M, D, seed), which is all that gets serialized.
class CenterBank {
public:
    CenterBank(std::size_t n_classes, std::size_t subclusters, std::size_t dim,
               std::uint64_t seed);

    // Bank with explicitly chosen unit centers (N*M of them, class-major).
    // Not serializable via the seed; meant for controlled setups.
    static CenterBank from_centers(const std::vector<Vec>& centers, std::size_t n_classes,
                                   std::size_t subclusters);

    std::size_t n_classes() const { return n_classes_; }
    std::size_t subclusters() const { return subclusters_; }
    std::size_t dim() const { return dim_; }
    std::uint64_t seed() const { return seed_; }

    // center of class j, sub-cluster m
    std::span<const double> center(std::size_t j, std::size_t m) const;
    // flat index j * M + m
    std::span<const double> center_flat(std::size_t idx) const;
    std::size_t total_centers() const { return n_classes_ * subclusters_; }

private:
    std::size_t n_classes_;
    std::size_t subclusters_;
    std::size_t dim_;
    std::uint64_t seed_;
    Vec data_; // (N*M) x D row-major
};

CenterBank init_centers(std::size_t n_classes, std::size_t subclusters, std::size_t dim,
                        std::uint64_t seed);

} // namespace masd::geom
