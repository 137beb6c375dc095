#pragma once

#include <complex>
#include <cstddef>
#include <vector>

namespace masd::fft {

using Cplx = std::complex<double>;

// In-place complex FFT. Size must be a power of two.
void fft_pow2(std::vector<Cplx>& a, bool inverse);

// Complex DFT of arbitrary length: power-of-two sizes go through the
// radix-2 path, everything else through Bluestein's chirp-z transform.
std::vector<Cplx> dft(std::vector<Cplx> x);

// One-sided magnitude of the real-input DFT: n/2 + 1 bins.
std::vector<double> real_magnitude(const std::vector<double>& x);

} // namespace masd::fft
