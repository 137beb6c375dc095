#include "masd/fft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace masd::fft {

namespace {

bool is_pow2(std::size_t n) {
    return n != 0 && (n & (n - 1)) == 0;
}

std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) {
        p <<= 1;
    }
    return p;
}

// Bluestein's algorithm: expresses a length-n DFT as a convolution that is
// evaluated with power-of-two FFTs. The chirp exponent uses k^2 mod 2n to
// keep the angle argument small for long inputs.
std::vector<Cplx> bluestein(const std::vector<Cplx>& x) {
    const std::size_t n = x.size();
    const std::size_t m = next_pow2(2 * n - 1);
    const double pi = std::numbers::pi;

    std::vector<Cplx> chirp(n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::uint64_t k2 = (static_cast<std::uint64_t>(k) * k) % (2 * n);
        const double angle = pi * static_cast<double>(k2) / static_cast<double>(n);
        chirp[k] = Cplx(std::cos(angle), -std::sin(angle));
    }

    std::vector<Cplx> a(m, Cplx(0.0, 0.0));
    for (std::size_t k = 0; k < n; ++k) {
        a[k] = x[k] * chirp[k];
    }
    std::vector<Cplx> b(m, Cplx(0.0, 0.0));
    b[0] = std::conj(chirp[0]);
    for (std::size_t k = 1; k < n; ++k) {
        b[k] = std::conj(chirp[k]);
        b[m - k] = b[k];
    }

    fft_pow2(a, false);
    fft_pow2(b, false);
    for (std::size_t k = 0; k < m; ++k) {
        a[k] *= b[k];
    }
    fft_pow2(a, true);

    std::vector<Cplx> out(n);
    for (std::size_t k = 0; k < n; ++k) {
        out[k] = a[k] * chirp[k];
    }
    return out;
}

} // namespace

void fft_pow2(std::vector<Cplx>& a, bool inverse) {
    const std::size_t n = a.size();
    if (!is_pow2(n)) {
        throw std::invalid_argument("fft_pow2: size must be a power of two");
    }
    if (n <= 1) {
        return;
    }

    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) {
            j ^= bit;
        }
        j ^= bit;
        if (i < j) {
            std::swap(a[i], a[j]);
        }
    }

    const double pi = std::numbers::pi;
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double angle = 2.0 * pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        const Cplx wlen(std::cos(angle), std::sin(angle));
        for (std::size_t i = 0; i < n; i += len) {
            Cplx w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                const Cplx u = a[i + k];
                const Cplx v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }

    if (inverse) {
        const double inv = 1.0 / static_cast<double>(n);
        for (Cplx& v : a) {
            v *= inv;
        }
    }
}

std::vector<Cplx> dft(std::vector<Cplx> x) {
    if (x.empty()) {
        return x;
    }
    if (is_pow2(x.size())) {
        fft_pow2(x, false);
        return x;
    }
    return bluestein(x);
}

std::vector<double> real_magnitude(const std::vector<double>& x) {
    if (x.empty()) {
        throw std::invalid_argument("real_magnitude: empty input");
    }
    std::vector<Cplx> buf(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        buf[i] = Cplx(x[i], 0.0);
    }
    buf = dft(std::move(buf));
    std::vector<double> mag(x.size() / 2 + 1);
    for (std::size_t k = 0; k < mag.size(); ++k) {
        mag[k] = std::abs(buf[k]);
    }
    return mag;
}

} // namespace masd::fft
