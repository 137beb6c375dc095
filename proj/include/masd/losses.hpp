#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "masd/geometry.hpp"
#include "masd/vecmath.hpp"

namespace masd::losses {

// Per-sample class-weight vector. Pure labels are one-hot; pairwise mixup
// yields exactly two nonzero weights summing to 1.
struct LabelDist {
    Vec w;

    static LabelDist pure(std::size_t n_classes, std::size_t cls);
    void validate() const;
    std::size_t n_classes() const { return w.size(); }
};

// Loss value plus analytic per-sample gradients with respect to the
// embeddings as passed in (the normalization-layer chain rule is applied
// downstream by the network backward pass). Gradients include the 1/|Y|
// batch-mean factor, so they are directly comparable to finite differences
// of the returned value.
struct LossOutput {
    double value = 0.0;
    std::vector<Vec> emb_grads;
};

// Dynamically adaptive scale parameter and the statistics of its last
// update step.
struct ScaleState {
    double s = 1.0;
    long step = 0;
    double theta_med = 0.0;
    double b_avg = 0.0;
    double f_max = 0.0; // sub-cluster variant only
};

// t = 0 values: sqrt(2)*ln(N-1) resp. sqrt(2)*ln(N*M-1). Degenerate
// one-logit setups (N*M < 2) fall back to s = 1; their loss is 0 anyway.
ScaleState make_adacos_state(std::size_t n_classes);
ScaleState make_subcluster_state(std::size_t n_classes, std::size_t subclusters);

// Batch statistics consumed by the scale recursions: the per-sample angle
// to the target class (mixup-weighted, nearest sub-cluster for M > 1) and
// the cosines to every center.
struct ScaleBatch {
    std::vector<double> target_angle;
    std::vector<Vec> cos_to_centers; // per sample, N*M entries, class-major
    std::vector<LabelDist> labels;
};

ScaleBatch make_scale_batch(std::span<const Vec> embs, std::span<const LabelDist> labels,
                            const geom::CenterBank& bank);

ScaleState adacos_scale_update(const ScaleState& state, const ScaleBatch& batch,
                               std::size_t n_classes);
ScaleState subcluster_scale_update(const ScaleState& state, const ScaleBatch& batch,
                                   std::size_t n_classes, std::size_t subclusters);

// Mean squared distance to a single center.
LossOutput compactness_loss(std::span<const Vec> embs, std::span<const double> center);

// Mean over classes with support of the per-class (label-weighted)
// compactness against the class center; the N > 1 form of the one-class
// objective. Requires M = 1.
LossOutput class_compactness_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                                  const geom::CenterBank& bank);

// Margin softmax on cosine logits; the margin is applied per class scaled
// by its label weight. Requires M = 1.
LossOutput arcface_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                        const geom::CenterBank& bank, double scale, double margin);

// Softmax over all sub-cluster logits, summed within each class. The scale
// is treated as a constant of the step during differentiation.
LossOutput subcluster_adacos_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                                  const geom::CenterBank& bank, const ScaleState& state);

// class-compactness + alpha * cosine-softmax CCE at a fixed scale.
LossOutput compactness_plus_cce_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                                     const geom::CenterBank& bank, double s_fixed, double alpha);

// Gradient of the sub-cluster loss assembled from the two weighted
// compactness sums (within-class and full softmax weights), routed through
// the normalization-layer tangent projection. Must coincide with the
// projected direct gradient of subcluster_adacos_loss.
std::vector<Vec> compactness_decomposed_grad(std::span<const Vec> embs,
                                          std::span<const LabelDist> labels,
                                          const geom::CenterBank& bank, const ScaleState& state);

// Tangent projection g - <g,e>e at a unit embedding: the normalization
// Jacobian evaluated at ||z|| = 1.
Vec project_tangent(const Vec& emb, const Vec& grad);

std::pair<Vec, LabelDist> mixup(const Vec& a, const Vec& b, const LabelDist& la,
                                const LabelDist& lb, double lambda);

} // namespace masd::losses
