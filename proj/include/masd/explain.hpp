#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "masd/dsp.hpp"
#include "masd/rng.hpp"

namespace masd::explain {

// Separable binary mask parameters: small time/frequency grids that are
// nearest-neighbor up-sampled and randomly cropped, then combined by outer
// product.
struct MaskParams {
    double mask_prob = 0.25;
    std::size_t time_grid = 20;
    std::size_t freq_grid = 34;
    std::size_t iters = 10000;
    std::uint64_t seed = 0;

    void validate() const;
};

// F x T binary mask stored in factored form.
struct Mask {
    std::vector<std::uint8_t> freq_keep; // length F
    std::vector<std::uint8_t> time_keep; // length T

    bool at(std::size_t f, std::size_t t) const { return freq_keep[f] && time_keep[t]; }
};

Mask sample_mask(const MaskParams& params, std::size_t freq_bins, std::size_t time_frames,
                 Rng& rng);

struct ImportanceMap {
    dsp::Grid values;
    MaskParams params;
};

// map(u) = sum_i s_i M_i(u) / (iters * p_keep), p_keep = (1 - mask_prob)^2.
// The scorer sees the element-wise product of the linear magnitude grid
// with each mask.
ImportanceMap importance_map(const std::function<double(const dsp::Grid&)>& scorer,
                             const dsp::Grid& linear_spec, const MaskParams& params);

enum class MapFormat { CsvGrid, Pgm };

void export_map(const ImportanceMap& map, const std::filesystem::path& path, MapFormat format);

dsp::Grid load_map_csv(const std::filesystem::path& path);

} // namespace masd::explain
