#include "masd/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "masd/rng.hpp"

namespace masd::geom {

UnitVector::UnitVector(Vec coords) : coords_(std::move(coords)) {
    const double n = norm2(coords_);
    if (std::abs(n - 1.0) > 1e-9) {
        throw std::invalid_argument("UnitVector: norm deviates from 1 by more than 1e-9");
    }
}

UnitVector normalize(std::span<const double> v) {
    const double n = norm2(v);
    if (!(n > 1e-30)) {
        throw std::domain_error("normalize: vector norm is (near) zero");
    }
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i] / n;
    }
    return UnitVector(std::move(out));
}

double cosine(const UnitVector& u, const UnitVector& v) {
    return std::clamp(dot(u.coords(), v.coords()), -1.0, 1.0);
}

double unit_sq_dist(const UnitVector& u, const UnitVector& v) {
    return masd::sq_dist(u.coords(), v.coords());
}

double cosine_identity_residual(const UnitVector& u, const UnitVector& v) {
    return std::abs(cosine(u, v) - (1.0 - unit_sq_dist(u, v) / 2.0));
}

double cos_margin(const UnitVector& u, const UnitVector& c, double m) {
    if (!(m >= 0.0 && m <= std::numbers::pi / 2.0)) {
        throw std::invalid_argument("cos_margin: margin must be in [0, pi/2]");
    }
    const double theta = std::acos(cosine(u, c));
    const double shifted = std::clamp(theta + m, 0.0, std::numbers::pi);
    return std::cos(shifted);
}

CenterBank::CenterBank(std::size_t n_classes, std::size_t subclusters, std::size_t dim,
                       std::uint64_t seed)
    : n_classes_(n_classes), subclusters_(subclusters), dim_(dim), seed_(seed) {
    if (n_classes < 1 || subclusters < 1 || dim < 1) {
        throw std::invalid_argument("CenterBank: N, M, D must all be >= 1");
    }
    Rng rng(seed);
    data_.resize(n_classes * subclusters * dim);
    Vec raw(dim);
    for (std::size_t c = 0; c < n_classes * subclusters; ++c) {
        // normalized Gaussian draws are exactly uniform on the sphere
        for (std::size_t d = 0; d < dim; ++d) {
            raw[d] = rng.gaussian();
        }
        const UnitVector u = normalize(raw);
        std::copy(u.coords().begin(), u.coords().end(), data_.begin() + c * dim);
    }
}

CenterBank CenterBank::from_centers(const std::vector<Vec>& centers, std::size_t n_classes,
                                    std::size_t subclusters) {
    if (centers.size() != n_classes * subclusters || centers.empty()) {
        throw std::invalid_argument("CenterBank::from_centers: need N*M centers");
    }
    CenterBank bank(n_classes, subclusters, centers[0].size(), 0);
    for (std::size_t i = 0; i < centers.size(); ++i) {
        const UnitVector u = normalize(centers[i]); // validates and re-projects
        std::copy(u.coords().begin(), u.coords().end(), bank.data_.begin() + i * bank.dim_);
    }
    return bank;
}

std::span<const double> CenterBank::center(std::size_t j, std::size_t m) const {
    if (j >= n_classes_ || m >= subclusters_) {
        throw std::out_of_range("CenterBank::center: index out of range");
    }
    return center_flat(j * subclusters_ + m);
}

std::span<const double> CenterBank::center_flat(std::size_t idx) const {
    return {data_.data() + idx * dim_, dim_};
}

CenterBank init_centers(std::size_t n_classes, std::size_t subclusters, std::size_t dim,
                        std::uint64_t seed) {
    return CenterBank(n_classes, subclusters, dim, seed);
}

} // namespace masd::geom
