#include "masd/explain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace masd::explain {

namespace {

// Draw `grid` binary cells (keep probability 1 - mask_prob), up-sample by
// nearest neighbor so the result is at least `target` plus one cell of
// slack, and random-crop to exactly `target`.
std::vector<std::uint8_t> sample_axis(std::size_t grid, std::size_t target, double mask_prob,
                                      Rng& rng) {
    std::vector<std::uint8_t> cells(grid);
    for (auto& c : cells) {
        c = (rng.uniform() >= mask_prob) ? 1 : 0;
    }
    if (grid == 1) {
        return std::vector<std::uint8_t>(target, cells[0]);
    }
    const std::size_t cell = (target + grid - 2) / (grid - 1); // ceil(target / (grid-1))
    const std::size_t upsampled = grid * cell;
    const std::size_t offset = rng.uniform_int(upsampled - target + 1);
    std::vector<std::uint8_t> out(target);
    for (std::size_t i = 0; i < target; ++i) {
        out[i] = cells[(offset + i) / cell];
    }
    return out;
}

} // namespace

void MaskParams::validate() const {
    if (!(mask_prob >= 0.0 && mask_prob <= 1.0)) {
        throw std::invalid_argument("MaskParams: mask_prob must be in [0, 1]");
    }
    if (time_grid < 1 || freq_grid < 1) {
        throw std::invalid_argument("MaskParams: grids must be >= 1");
    }
    if (iters < 1) {
        throw std::invalid_argument("MaskParams: iters must be >= 1");
    }
}

Mask sample_mask(const MaskParams& params, std::size_t freq_bins, std::size_t time_frames,
                 Rng& rng) {
    params.validate();
    if (freq_bins < 1 || time_frames < 1) {
        throw std::invalid_argument("sample_mask: empty grid");
    }
    Mask m;
    // time axis first, then frequency: fixed order so seeds replay exactly
    m.time_keep = sample_axis(params.time_grid, time_frames, params.mask_prob, rng);
    m.freq_keep = sample_axis(params.freq_grid, freq_bins, params.mask_prob, rng);
    return m;
}

ImportanceMap importance_map(const std::function<double(const dsp::Grid&)>& scorer,
                             const dsp::Grid& linear_spec, const MaskParams& params) {
    params.validate();
    if (!(params.mask_prob > 0.0 && params.mask_prob < 1.0)) {
        throw std::invalid_argument("importance_map: mask_prob must be in (0, 1)");
    }
    const std::size_t F = linear_spec.rows;
    const std::size_t T = linear_spec.cols;
    Rng rng(params.seed);

    ImportanceMap map;
    map.params = params;
    map.values = dsp::Grid(F, T, 0.0);

    dsp::Grid masked(F, T);
    std::vector<double> weighted_time(T);
    for (std::size_t it = 0; it < params.iters; ++it) {
        const Mask mask = sample_mask(params, F, T, rng);
        for (std::size_t f = 0; f < F; ++f) {
            const double keep_f = mask.freq_keep[f] ? 1.0 : 0.0;
            for (std::size_t t = 0; t < T; ++t) {
                masked.at(f, t) =
                    linear_spec.at(f, t) * (keep_f * (mask.time_keep[t] ? 1.0 : 0.0));
            }
        }
        const double score = scorer(masked);
        if (!std::isfinite(score)) {
            throw std::runtime_error("importance_map: scorer returned a non-finite value");
        }
        for (std::size_t t = 0; t < T; ++t) {
            weighted_time[t] = mask.time_keep[t] ? score : 0.0;
        }
        for (std::size_t f = 0; f < F; ++f) {
            if (!mask.freq_keep[f]) {
                continue;
            }
            double* row = map.values.v.data() + f * T;
            for (std::size_t t = 0; t < T; ++t) {
                row[t] += weighted_time[t];
            }
        }
    }

    const double p_keep = (1.0 - params.mask_prob) * (1.0 - params.mask_prob);
    const double norm = 1.0 / (static_cast<double>(params.iters) * p_keep);
    for (double& v : map.values.v) {
        v *= norm;
    }
    return map;
}

void export_map(const ImportanceMap& map, const std::filesystem::path& path, MapFormat format) {
    const dsp::Grid& g = map.values;
    if (format == MapFormat::CsvGrid) {
        std::ofstream out(path);
        if (!out) {
            throw std::runtime_error("export_map: cannot write " + path.string());
        }
        out.precision(17);
        for (std::size_t f = 0; f < g.rows; ++f) {
            for (std::size_t t = 0; t < g.cols; ++t) {
                if (t) {
                    out << ',';
                }
                out << g.at(f, t);
            }
            out << '\n';
        }
        if (!out) {
            throw std::runtime_error("export_map: write failed for " + path.string());
        }
        return;
    }

    // P5 grayscale, width = T, height = F, min-max scaled; a flat map has
    // no range and becomes mid-gray.
    double lo = g.v.empty() ? 0.0 : g.v[0];
    double hi = lo;
    for (double v : g.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = hi - lo;
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("export_map: cannot write " + path.string());
    }
    out << "P5\n" << g.cols << ' ' << g.rows << "\n255\n";
    for (std::size_t f = 0; f < g.rows; ++f) {
        for (std::size_t t = 0; t < g.cols; ++t) {
            unsigned char byte = 128;
            if (range > 0.0) {
                byte = static_cast<unsigned char>(
                    std::lround((g.at(f, t) - lo) / range * 255.0));
            }
            out.write(reinterpret_cast<const char*>(&byte), 1);
        }
    }
    if (!out) {
        throw std::runtime_error("export_map: write failed for " + path.string());
    }
}

dsp::Grid load_map_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("load_map_csv: cannot open " + path.string());
    }
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            row.push_back(std::stod(cell));
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) {
        throw std::runtime_error("load_map_csv: empty file");
    }
    dsp::Grid g(rows.size(), rows[0].size());
    for (std::size_t f = 0; f < g.rows; ++f) {
        if (rows[f].size() != g.cols) {
            throw std::runtime_error("load_map_csv: ragged rows");
        }
        for (std::size_t t = 0; t < g.cols; ++t) {
            g.at(f, t) = rows[f][t];
        }
    }
    return g;
}

} // namespace masd::explain
