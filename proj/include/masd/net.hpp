#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "masd/dsp.hpp"
#include "masd/geometry.hpp"
#include "masd/vecmath.hpp"

namespace masd::net {

// Dense embedding network with two input branches and no bias terms
// anywhere. Hidden layers are rectified (unbounded, fixed point at zero),
// the head is linear, and the output is projected onto the unit sphere.
struct NetSpec {
    bool use_spectrogram = true;
    std::size_t spec_bins = 513;
    std::size_t spec_segments = 8;
    std::vector<std::size_t> spec_widths{128, 128};

    bool use_spectrum = true;
    std::size_t spectrum_len = 8192;
    std::vector<std::size_t> spectrum_widths{128, 128};

    std::size_t embed_dim = 256;

    std::size_t spec_input_dim() const { return spec_bins * spec_segments; }
    std::size_t spec_branch_out() const {
        return spec_widths.empty() ? spec_input_dim() : spec_widths.back();
    }
    std::size_t spectrum_branch_out() const {
        return spectrum_widths.empty() ? spectrum_len : spectrum_widths.back();
    }
    std::size_t concat_dim() const;
    void validate() const;
};

// Row-major (out x in) weight matrix; the whole parameter set of a layer.
struct Dense {
    std::size_t out = 0;
    std::size_t in = 0;
    Vec w;
};

struct EmbeddingNet {
    NetSpec spec;
    std::uint64_t seed = 0;
    std::vector<Dense> spec_layers;
    std::vector<Dense> spectrum_layers;
    Dense head;
};

EmbeddingNet init_weights(const NetSpec& spec, std::uint64_t seed);

struct ForwardCache {
    Vec spec_in;
    Vec spectrum_in;
    std::vector<Vec> spec_pre;     // pre-activation per layer
    std::vector<Vec> spectrum_pre;
    Vec concat;
    Vec prenorm;
    double prenorm_norm = 0.0;
    Vec emb;
};

// Mean-pool the normalized spectrogram into `segments` time segments and
// flatten segment-major.
Vec pool_spectrogram(const dsp::Grid& g, std::size_t segments);

// Per-sample standardization (zero mean, unit variance). Bias-free models
// cannot remove the large shared offset of log-magnitude features, so it
// is removed here, as part of the fixed input representation.
Vec standardize_input(Vec v);

// The canonical branch inputs: pooled+standardized spectrogram and
// standardized log spectrum. Every consumer (training, scoring, RISE
// scorers) must build inputs through these.
Vec prepare_spectrogram_input(const dsp::Grid& normalized, std::size_t segments);
Vec prepare_spectrum_input(Vec spectrum);

// Inputs are the prepared branch vectors (pooled spectrogram, spectrum).
// Pass an empty Vec for a disabled branch.
geom::UnitVector forward(const EmbeddingNet& net, const Vec& spec_in, const Vec& spectrum_in,
                         ForwardCache* cache = nullptr);

// Convenience overload taking the normalized grid and the raw log
// spectrum; prepares both branch inputs internally.
geom::UnitVector forward(const EmbeddingNet& net, const dsp::Grid& normalized_spec,
                         const Vec& raw_spectrum, ForwardCache* cache = nullptr);

struct ParamGrads {
    std::vector<Vec> spec_layers;
    std::vector<Vec> spectrum_layers;
    Vec head;
};

ParamGrads zero_grads(const EmbeddingNet& net);

// Accumulates exact parameter gradients for one sample. emb_grad is the
// loss gradient with respect to the unit embedding; the normalization
// Jacobian (I - ee^T)/||z|| is applied here.
void backward(const EmbeddingNet& net, const ForwardCache& cache, const Vec& emb_grad,
              ParamGrads& accum);

void sgd_step(EmbeddingNet& net, const ParamGrads& grads, double lr);
void add_weight_decay(const EmbeddingNet& net, double coeff, ParamGrads& grads);

// Versioned binary checkpoint: spec, seeds, center-bank parameters and raw
// weight tensors. No bias tensors exist to serialize.
struct ModelBundle {
    EmbeddingNet net;
    std::size_t bank_classes = 1;
    std::size_t bank_subclusters = 1;
    std::uint64_t bank_seed = 0;
    std::string loss_name;
    std::string granularity;
};

void save_model(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_model(const std::filesystem::path& path);

} // namespace masd::net
