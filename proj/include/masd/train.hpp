#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "masd/data.hpp"
#include "masd/geometry.hpp"
#include "masd/losses.hpp"
#include "masd/net.hpp"
#include "masd/vecmath.hpp"

namespace masd::train {

// One prepared sample: branch inputs plus bookkeeping for scoring.
struct Sample {
    Vec spec_in;
    Vec spectrum;
    std::size_t class_id = 0;
    std::string clip_id;
    std::string section;
    std::string domain;
    std::string split;
    bool anomalous = false;
};

struct FeatureSet {
    std::vector<Sample> samples;
    std::size_t n_classes = 0;
    std::vector<std::string> class_names;
    std::size_t spec_bins = 0;
    std::size_t spec_segments = 0;
    std::size_t spectrum_len = 0;
};

// Loads cached features (<clip_id>.spg linear grid, <clip_id>.spv log
// spectrum), applies temporal mean normalization and time pooling, and
// assigns class ids from the train split under the given granularity.
FeatureSet build_feature_set(const std::vector<data::ClipRecord>& records,
                             const std::filesystem::path& features_dir,
                             data::Granularity granularity, std::size_t segments,
                             bool use_spectrogram = true, bool use_spectrum = true);

FeatureSet filter_split(const FeatureSet& fs, const std::string& split);

struct TrainConfig {
    std::string loss_name = "sc-adacos"; // compactness | arcface | adacos | sc-adacos | compactness-cce
    int epochs = 10;
    int batch_size = 64;
    int subclusters = 16;
    double learning_rate = 1e-3;
    std::uint64_t seed = 0;
    bool mixup_enabled = true;

    double arcface_scale = 16.0;
    double arcface_margin = 0.5;
    double cce_alpha = 1.0;
    double cce_scale = 8.0;
    bool weight_decay = false;
    double weight_decay_coeff = 1e-4;

    std::size_t embed_dim = 256;
    std::vector<std::size_t> spec_widths{128, 128};
    std::vector<std::size_t> spectrum_widths{128, 128};

    bool check_decomposition = false; // record the decomposition discrepancy each epoch

    void validate() const;
};

// Per-epoch records; row 0 is the untrained baseline.
struct LossTrace {
    struct Row {
        int epoch = 0;
        double loss = 0.0;
        double intra = 0.0;
        std::optional<double> inter;
        std::optional<double> decomposition;
    };
    std::vector<Row> rows;
};

void write_loss_trace_csv(const std::filesystem::path& path, const LossTrace& trace);

struct TrainResult {
    net::EmbeddingNet model;
    geom::CenterBank bank;
    LossTrace trace;
    losses::ScaleState scale;
};

TrainResult train(const FeatureSet& train_data, const TrainConfig& cfg);

struct MonitorResult {
    double intra = 0.0;
    std::optional<double> inter;
};

// intra: per class, mean squared distance to the nearest own sub-cluster;
// inter: per class, mean squared distance to every other class's centers.
MonitorResult monitor_losses(const net::EmbeddingNet& model, const geom::CenterBank& bank,
                             const FeatureSet& data);

// Max relative discrepancy between the direct sub-cluster loss parameter
// gradient and its compactness decomposition on one batch.
double verify_grad_decomposition(const net::EmbeddingNet& model, const geom::CenterBank& bank,
                       const losses::ScaleState& state,
                       const std::vector<const Sample*>& batch,
                       const std::vector<losses::LabelDist>* mixed_labels = nullptr,
                       const std::vector<std::pair<Vec, Vec>>* mixed_inputs = nullptr);

// Embeddings for every sample of the set, in order.
std::vector<Vec> embed_all(const net::EmbeddingNet& model, const FeatureSet& data);

// Flat key=value config file (one pair per line, '#' comments).
TrainConfig load_train_config(const std::filesystem::path& path);

} // namespace masd::train
