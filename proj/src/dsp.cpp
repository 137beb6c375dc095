#include "masd/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "masd/fft.hpp"

namespace masd::dsp {

namespace {

std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) {
        throw std::runtime_error("wav: truncated file");
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t read_u16(std::istream& in) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    if (!in) {
        throw std::runtime_error("wav: truncated file");
    }
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

void write_u32(std::ostream& out, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>((v >> 8) & 0xff),
                                static_cast<unsigned char>((v >> 16) & 0xff),
                                static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_u16(std::ostream& out, std::uint16_t v) {
    const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                                static_cast<unsigned char>((v >> 8) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 2);
}

} // namespace

Waveform read_wav(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("wav: cannot open " + path.string());
    }

    char tag[4];
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "RIFF", 4) != 0) {
        throw std::runtime_error("wav: not a RIFF file: " + path.string());
    }
    read_u32(in); // RIFF chunk size
    in.read(tag, 4);
    if (!in || std::memcmp(tag, "WAVE", 4) != 0) {
        throw std::runtime_error("wav: not a WAVE file: " + path.string());
    }

    bool have_fmt = false;
    std::uint16_t audio_format = 0;
    std::uint16_t channels = 0;
    std::uint32_t sample_rate = 0;
    std::uint16_t bits = 0;
    std::vector<double> samples;
    bool have_data = false;

    while (in.read(tag, 4)) {
        const std::uint32_t size = read_u32(in);
        if (std::memcmp(tag, "fmt ", 4) == 0) {
            if (size < 16) {
                throw std::runtime_error("wav: malformed fmt chunk");
            }
            audio_format = read_u16(in);
            channels = read_u16(in);
            sample_rate = read_u32(in);
            read_u32(in); // byte rate
            read_u16(in); // block align
            bits = read_u16(in);
            in.ignore(size - 16);
            have_fmt = true;
        } else if (std::memcmp(tag, "data", 4) == 0) {
            if (!have_fmt) {
                throw std::runtime_error("wav: data chunk before fmt chunk");
            }
            if (audio_format != 1 || bits != 16) {
                throw std::runtime_error("wav: only PCM 16-bit is supported");
            }
            if (channels != 1) {
                throw std::runtime_error("wav: only mono is supported");
            }
            if (sample_rate != 16000) {
                throw std::runtime_error("wav: only 16 kHz is supported (no resampling)");
            }
            const std::size_t n = size / 2;
            samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                unsigned char b[2];
                in.read(reinterpret_cast<char*>(b), 2);
                if (!in) {
                    throw std::runtime_error("wav: truncated data chunk");
                }
                const std::int16_t s = static_cast<std::int16_t>(b[0] | (b[1] << 8));
                samples[i] = static_cast<double>(s) / 32768.0;
            }
            have_data = true;
            break;
        } else {
            // skip unknown chunk (word aligned)
            in.ignore(size + (size & 1));
        }
    }
    if (!have_data) {
        throw std::runtime_error("wav: no data chunk in " + path.string());
    }

    Waveform w;
    w.samples = std::move(samples);
    w.sample_rate = sample_rate;
    return w;
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("wav: cannot write " + path.string());
    }
    const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
    const std::uint32_t data_bytes = n * 2;

    out.write("RIFF", 4);
    write_u32(out, 36 + data_bytes);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    write_u32(out, 16);
    write_u16(out, 1); // PCM
    write_u16(out, 1); // mono
    write_u32(out, w.sample_rate);
    write_u32(out, w.sample_rate * 2);
    write_u16(out, 2);
    write_u16(out, 16);
    out.write("data", 4);
    write_u32(out, data_bytes);
    for (double x : w.samples) {
        double scaled = std::round(x * 32768.0);
        scaled = std::clamp(scaled, -32768.0, 32767.0);
        const std::int16_t s = static_cast<std::int16_t>(scaled);
        const unsigned char b[2] = {static_cast<unsigned char>(s & 0xff),
                                    static_cast<unsigned char>((s >> 8) & 0xff)};
        out.write(reinterpret_cast<const char*>(b), 2);
    }
    if (!out) {
        throw std::runtime_error("wav: write failed for " + path.string());
    }
}

Grid magnitude_spectrogram(const Waveform& w, std::size_t n_fft, std::size_t hop) {
    if (n_fft < 1 || hop < 1 || n_fft < hop) {
        throw std::invalid_argument("magnitude_spectrogram: need n_fft >= hop >= 1");
    }
    if (w.samples.size() < n_fft) {
        throw std::invalid_argument("magnitude_spectrogram: clip shorter than one frame");
    }

    const std::size_t freq_bins = n_fft / 2 + 1;
    const std::size_t frames = (w.samples.size() - n_fft) / hop + 1;

    // periodic Hann window
    std::vector<double> window(n_fft);
    for (std::size_t i = 0; i < n_fft; ++i) {
        window[i] = 0.5 * (1.0 - std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                          static_cast<double>(n_fft)));
    }

    Grid g(freq_bins, frames);
    std::vector<fft::Cplx> buf(n_fft);
    for (std::size_t t = 0; t < frames; ++t) {
        const std::size_t start = t * hop;
        for (std::size_t i = 0; i < n_fft; ++i) {
            buf[i] = fft::Cplx(w.samples[start + i] * window[i], 0.0);
        }
        auto spec = fft::dft(buf);
        for (std::size_t f = 0; f < freq_bins; ++f) {
            g.at(f, t) = std::abs(spec[f]);
        }
    }
    return g;
}

Grid temporal_mean_normalize(const Grid& g) {
    if (g.cols < 1) {
        throw std::invalid_argument("temporal_mean_normalize: empty grid");
    }
    Grid out(g.rows, g.cols);
    for (std::size_t f = 0; f < g.rows; ++f) {
        double mean = 0.0;
        for (std::size_t t = 0; t < g.cols; ++t) {
            const double lv = std::log(kLogFloor + g.at(f, t));
            out.at(f, t) = lv;
            mean += lv;
        }
        mean /= static_cast<double>(g.cols);
        for (std::size_t t = 0; t < g.cols; ++t) {
            out.at(f, t) -= mean;
        }
    }
    return out;
}

std::vector<double> magnitude_spectrum(const Waveform& w, std::size_t out_len) {
    if (out_len < 1) {
        throw std::invalid_argument("magnitude_spectrum: out_len must be >= 1");
    }
    const std::size_t full = w.samples.size() / 2 + 1;
    if (out_len > full) {
        throw std::invalid_argument("magnitude_spectrum: out_len exceeds spectrum resolution");
    }
    const auto mag = fft::real_magnitude(w.samples);

    std::vector<double> out(out_len);
    for (std::size_t i = 0; i < out_len; ++i) {
        const std::size_t lo = i * full / out_len;
        const std::size_t hi = (i + 1) * full / out_len;
        double m = mag[lo];
        for (std::size_t k = lo + 1; k < hi; ++k) {
            m = std::max(m, mag[k]);
        }
        out[i] = std::log(kLogFloor + m);
    }
    return out;
}

void save_grid(const std::filesystem::path& path, const Grid& g) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("grid: cannot write " + path.string());
    }
    out.write("MASD", 4);
    write_u32(out, 1);
    write_u32(out, static_cast<std::uint32_t>(g.rows));
    write_u32(out, static_cast<std::uint32_t>(g.cols));
    out.write(reinterpret_cast<const char*>(g.v.data()),
              static_cast<std::streamsize>(g.v.size() * sizeof(double)));
    if (!out) {
        throw std::runtime_error("grid: write failed for " + path.string());
    }
}

Grid load_grid(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("grid: cannot open " + path.string());
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MASD", 4) != 0) {
        throw std::runtime_error("grid: bad magic in " + path.string());
    }
    const std::uint32_t version = read_u32(in);
    if (version != 1) {
        throw std::runtime_error("grid: unsupported version in " + path.string());
    }
    const std::uint32_t rows = read_u32(in);
    const std::uint32_t cols = read_u32(in);
    Grid g(rows, cols);
    in.read(reinterpret_cast<char*>(g.v.data()),
            static_cast<std::streamsize>(g.v.size() * sizeof(double)));
    if (!in) {
        throw std::runtime_error("grid: truncated data in " + path.string());
    }
    return g;
}

} // namespace masd::dsp
