#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace masd::dsp {

inline constexpr double kLogFloor = 1e-12;

struct Waveform {
    std::vector<double> samples; // in [-1, 1)
    std::uint32_t sample_rate = 16000;
};

// Row-major frequency x time grid. Also reused for plain vectors
// (cols == 1) so that the binary feature cache has a single format.
struct Grid {
    std::size_t rows = 0; // F
    std::size_t cols = 0; // T
    std::vector<double> v;

    Grid() = default;
    Grid(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

// Strict PCM16 mono 16 kHz reader; anything else is rejected rather than
// resampled so the feature provenance stays unambiguous.
Waveform read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const Waveform& w);

// Hann-windowed magnitude STFT, no padding.
// F = n_fft/2 + 1, T = floor((len - n_fft)/hop) + 1.
Grid magnitude_spectrogram(const Waveform& w, std::size_t n_fft, std::size_t hop);

// log(eps + .) then per-frequency mean subtraction over time.
Grid temporal_mean_normalize(const Grid& g);

// Full-clip magnitude spectrum, max-pooled down to out_len bins, log scaled.
std::vector<double> magnitude_spectrum(const Waveform& w, std::size_t out_len);

// Binary feature cache: magic "MASD", version u32, F u32, T u32, f64 data.
void save_grid(const std::filesystem::path& path, const Grid& g);
Grid load_grid(const std::filesystem::path& path);

} // namespace masd::dsp
