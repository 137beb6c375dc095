#include "masd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace masd::losses {

namespace {

constexpr double kPi = std::numbers::pi;

// cos(e, c) for unit c and arbitrary e, plus its exact gradient in e.
// Keeping the 1/||e|| factors makes the loss well defined off the sphere,
// which is what the finite-difference checks perturb.
struct CosVal {
    double cos;
    double inv_norm;
    double raw; // <e, c>
};

CosVal cos_to_center(const Vec& e, std::span<const double> c) {
    const double n = norm2(e);
    if (!(n > 1e-30)) {
        throw std::domain_error("loss: zero-norm embedding");
    }
    const double raw = dot(e, c);
    return {raw / n, 1.0 / n, raw};
}

// d cos(e,c)/d e = c/||e|| - <e,c> e / ||e||^3
void add_cos_grad(const Vec& e, std::span<const double> c, const CosVal& cv, double weight,
                  Vec& out) {
    const double a = weight * cv.inv_norm;
    const double b = weight * cv.cos * cv.inv_norm * cv.inv_norm;
    for (std::size_t d = 0; d < e.size(); ++d) {
        out[d] += a * c[d] - b * e[d];
    }
}

double lower_median(std::vector<double> v) {
    if (v.empty()) {
        throw std::invalid_argument("median of empty batch");
    }
    const std::size_t idx = (v.size() - 1) / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(idx), v.end());
    return v[idx];
}

void check_batch(std::span<const Vec> embs, std::span<const LabelDist> labels,
                 const geom::CenterBank& bank) {
    if (embs.empty()) {
        throw std::invalid_argument("loss: empty batch");
    }
    if (embs.size() != labels.size()) {
        throw std::invalid_argument("loss: embeddings/labels size mismatch");
    }
    for (const auto& l : labels) {
        l.validate();
        if (l.n_classes() != bank.n_classes()) {
            throw std::invalid_argument("loss: label width does not match class count");
        }
    }
    for (const auto& e : embs) {
        if (e.size() != bank.dim()) {
            throw std::invalid_argument("loss: embedding dimension does not match centers");
        }
    }
}

} // namespace

LabelDist LabelDist::pure(std::size_t n_classes, std::size_t cls) {
    if (cls >= n_classes) {
        throw std::invalid_argument("LabelDist: class index out of range");
    }
    LabelDist l;
    l.w.assign(n_classes, 0.0);
    l.w[cls] = 1.0;
    return l;
}

void LabelDist::validate() const {
    double sum = 0.0;
    std::size_t nonzero = 0;
    for (double x : w) {
        if (!(x >= 0.0)) {
            throw std::invalid_argument("LabelDist: negative or NaN weight");
        }
        if (x > 0.0) {
            ++nonzero;
        }
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-12) {
        throw std::invalid_argument("LabelDist: weights must sum to 1");
    }
    if (nonzero > 2) {
        throw std::invalid_argument("LabelDist: more than two nonzero weights");
    }
}

ScaleState make_adacos_state(std::size_t n_classes) {
    ScaleState st;
    st.step = 0;
    st.s = (n_classes >= 3) ? std::sqrt(2.0) * std::log(static_cast<double>(n_classes) - 1.0)
                            : 1.0;
    return st;
}

ScaleState make_subcluster_state(std::size_t n_classes, std::size_t subclusters) {
    ScaleState st;
    st.step = 0;
    const double total = static_cast<double>(n_classes) * static_cast<double>(subclusters);
    st.s = (total >= 3.0) ? std::sqrt(2.0) * std::log(total - 1.0) : 1.0;
    return st;
}

ScaleBatch make_scale_batch(std::span<const Vec> embs, std::span<const LabelDist> labels,
                            const geom::CenterBank& bank) {
    check_batch(embs, labels, bank);
    const std::size_t n = bank.n_classes();
    const std::size_t m = bank.subclusters();

    ScaleBatch batch;
    batch.target_angle.reserve(embs.size());
    batch.cos_to_centers.reserve(embs.size());
    batch.labels.assign(labels.begin(), labels.end());

    for (std::size_t x = 0; x < embs.size(); ++x) {
        Vec cosines(n * m);
        for (std::size_t idx = 0; idx < n * m; ++idx) {
            cosines[idx] = std::clamp(cos_to_center(embs[x], bank.center_flat(idx)).cos, -1.0, 1.0);
        }
        // angle to a class = angle to its nearest sub-cluster; a mixed-up
        // sample gets the label-weighted combination of its class angles
        double angle = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double lj = labels[x].w[j];
            if (lj <= 0.0) {
                continue;
            }
            double best = -1.0;
            for (std::size_t k = 0; k < m; ++k) {
                best = std::max(best, cosines[j * m + k]);
            }
            angle += lj * std::acos(best);
        }
        batch.target_angle.push_back(angle);
        batch.cos_to_centers.push_back(std::move(cosines));
    }
    return batch;
}

ScaleState adacos_scale_update(const ScaleState& state, const ScaleBatch& batch,
                               std::size_t n_classes) {
    if (batch.target_angle.empty()) {
        throw std::invalid_argument("adacos_scale_update: empty batch");
    }
    const double theta_med = lower_median(batch.target_angle);

    double b_avg = 0.0;
    for (std::size_t x = 0; x < batch.cos_to_centers.size(); ++x) {
        const Vec& cosines = batch.cos_to_centers[x];
        if (cosines.size() != n_classes) {
            throw std::invalid_argument("adacos_scale_update: expected one logit per class");
        }
        for (std::size_t j = 0; j < n_classes; ++j) {
            if (batch.labels[x].w[j] == 1.0) {
                continue; // non-corresponding classes only
            }
            b_avg += std::exp(state.s * cosines[j]);
        }
    }
    b_avg /= static_cast<double>(batch.cos_to_centers.size());

    ScaleState next = state;
    next.step = state.step + 1;
    next.theta_med = theta_med;
    next.b_avg = b_avg;
    next.f_max = 0.0;
    if (b_avg > 0.0 && std::isfinite(b_avg)) {
        const double denom = std::cos(std::min(kPi / 4.0, theta_med));
        next.s = std::max(std::log(b_avg) / denom, 1e-8);
    }
    return next;
}

ScaleState subcluster_scale_update(const ScaleState& state, const ScaleBatch& batch,
                                   std::size_t n_classes, std::size_t subclusters) {
    if (batch.target_angle.empty()) {
        throw std::invalid_argument("subcluster_scale_update: empty batch");
    }
    const std::size_t total = n_classes * subclusters;
    const double theta_med = lower_median(batch.target_angle);

    double f_max = -std::numeric_limits<double>::infinity();
    for (const Vec& cosines : batch.cos_to_centers) {
        if (cosines.size() != total) {
            throw std::invalid_argument("subcluster_scale_update: logit count mismatch");
        }
        for (double c : cosines) {
            f_max = std::max(f_max, state.s * c);
        }
    }

    // sums over all classes and sub-clusters, target included
    double b_avg = 0.0;
    for (const Vec& cosines : batch.cos_to_centers) {
        for (double c : cosines) {
            b_avg += std::exp(state.s * c - f_max);
        }
    }
    b_avg /= static_cast<double>(batch.cos_to_centers.size());

    ScaleState next = state;
    next.step = state.step + 1;
    next.theta_med = theta_med;
    next.b_avg = b_avg;
    next.f_max = f_max;
    if (b_avg > 0.0 && std::isfinite(b_avg)) {
        const double denom = std::cos(std::min(kPi / 4.0, theta_med));
        next.s = std::max((f_max + std::log(b_avg)) / denom, 1e-8);
    }
    return next;
}

LossOutput compactness_loss(std::span<const Vec> embs, std::span<const double> center) {
    if (embs.empty()) {
        throw std::invalid_argument("compactness_loss: empty batch");
    }
    const double inv = 1.0 / static_cast<double>(embs.size());
    LossOutput out;
    out.emb_grads.reserve(embs.size());
    for (const Vec& e : embs) {
        if (e.size() != center.size()) {
            throw std::invalid_argument("compactness_loss: dimension mismatch");
        }
        out.value += masd::sq_dist(e, center) * inv;
        Vec g(e.size());
        for (std::size_t d = 0; d < e.size(); ++d) {
            g[d] = 2.0 * (e[d] - center[d]) * inv;
        }
        out.emb_grads.push_back(std::move(g));
    }
    return out;
}

LossOutput class_compactness_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                                  const geom::CenterBank& bank) {
    check_batch(embs, labels, bank);
    if (bank.subclusters() != 1) {
        throw std::invalid_argument("class_compactness_loss: requires M = 1");
    }
    const std::size_t n = bank.n_classes();

    Vec class_weight(n, 0.0);
    for (const auto& l : labels) {
        for (std::size_t j = 0; j < n; ++j) {
            class_weight[j] += l.w[j];
        }
    }
    std::size_t present = 0;
    for (double wj : class_weight) {
        if (wj > 0.0) {
            ++present;
        }
    }
    const double inv_present = 1.0 / static_cast<double>(present);

    LossOutput out;
    out.emb_grads.assign(embs.size(), Vec(bank.dim(), 0.0));
    for (std::size_t x = 0; x < embs.size(); ++x) {
        for (std::size_t j = 0; j < n; ++j) {
            const double lj = labels[x].w[j];
            if (lj <= 0.0) {
                continue;
            }
            const auto c = bank.center(j, 0);
            const double coeff = inv_present * lj / class_weight[j];
            out.value += coeff * masd::sq_dist(embs[x], c);
            for (std::size_t d = 0; d < bank.dim(); ++d) {
                out.emb_grads[x][d] += coeff * 2.0 * (embs[x][d] - c[d]);
            }
        }
    }
    return out;
}

LossOutput arcface_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                        const geom::CenterBank& bank, double scale, double margin) {
    check_batch(embs, labels, bank);
    if (bank.subclusters() != 1) {
        throw std::invalid_argument("arcface_loss: requires M = 1 centers");
    }
    if (!(scale > 0.0)) {
        throw std::invalid_argument("arcface_loss: scale must be positive");
    }
    if (!(margin >= 0.0 && margin <= kPi / 2.0)) {
        throw std::invalid_argument("arcface_loss: margin must be in [0, pi/2]");
    }
    const std::size_t n = bank.n_classes();
    const double inv = 1.0 / static_cast<double>(embs.size());

    LossOutput out;
    out.emb_grads.assign(embs.size(), Vec(bank.dim(), 0.0));
    for (std::size_t x = 0; x < embs.size(); ++x) {
        std::vector<CosVal> cvs(n);
        Vec logits(n);
        Vec dlogit_dcos(n);
        for (std::size_t j = 0; j < n; ++j) {
            cvs[j] = cos_to_center(embs[x], bank.center(j, 0));
            const double mj = margin * labels[x].w[j];
            if (mj == 0.0) {
                logits[j] = scale * cvs[j].cos;
                dlogit_dcos[j] = scale;
            } else {
                const double cj = std::clamp(cvs[j].cos, -1.0, 1.0);
                const double theta = std::acos(cj);
                const double shifted = theta + mj;
                if (shifted >= kPi) {
                    logits[j] = scale * std::cos(kPi);
                    dlogit_dcos[j] = 0.0; // clamped branch is locally constant
                } else {
                    logits[j] = scale * std::cos(shifted);
                    const double sin_theta = std::max(std::sin(theta), 1e-12);
                    dlogit_dcos[j] = scale * std::sin(shifted) / sin_theta;
                }
            }
        }

        const double zmax = *std::max_element(logits.begin(), logits.end());
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            denom += std::exp(logits[j] - zmax);
        }
        for (std::size_t j = 0; j < n; ++j) {
            const double pj = std::exp(logits[j] - zmax) / denom;
            const double lj = labels[x].w[j];
            if (lj > 0.0) {
                out.value -= inv * lj * (logits[j] - zmax - std::log(denom));
            }
            add_cos_grad(embs[x], bank.center(j, 0), cvs[j], inv * (pj - lj) * dlogit_dcos[j],
                         out.emb_grads[x]);
        }
    }
    return out;
}

LossOutput subcluster_adacos_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                                  const geom::CenterBank& bank, const ScaleState& state) {
    check_batch(embs, labels, bank);
    if (!(state.s > 0.0)) {
        throw std::invalid_argument("subcluster_adacos_loss: scale must be positive");
    }
    const std::size_t n = bank.n_classes();
    const std::size_t m = bank.subclusters();
    const std::size_t total = n * m;
    const double inv = 1.0 / static_cast<double>(embs.size());

    // batch max logit, used to stabilize every exponential
    std::vector<std::vector<CosVal>> cvs(embs.size(), std::vector<CosVal>(total));
    double f_max = -std::numeric_limits<double>::infinity();
    for (std::size_t x = 0; x < embs.size(); ++x) {
        for (std::size_t idx = 0; idx < total; ++idx) {
            cvs[x][idx] = cos_to_center(embs[x], bank.center_flat(idx));
            f_max = std::max(f_max, state.s * cvs[x][idx].cos);
        }
    }

    LossOutput out;
    out.emb_grads.assign(embs.size(), Vec(bank.dim(), 0.0));
    for (std::size_t x = 0; x < embs.size(); ++x) {
        Vec ex(total); // exp(s cos - f_max)
        double sum_all = 0.0;
        Vec class_sum(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t k = 0; k < m; ++k) {
                const double e = std::exp(state.s * cvs[x][j * m + k].cos - f_max);
                ex[j * m + k] = e;
                class_sum[j] += e;
                sum_all += e;
            }
        }
        if (!std::isfinite(sum_all) || sum_all <= 0.0) {
            throw std::runtime_error("subcluster_adacos_loss: non-finite logits");
        }

        for (std::size_t j = 0; j < n; ++j) {
            const double lj = labels[x].w[j];
            if (lj > 0.0) {
                out.value -= inv * lj * std::log(class_sum[j] / sum_all);
            }
        }
        // d loss / d cos(e, c) = s * (r_c - l_class(c) * w_c) with r the full
        // softmax over all centers and w the within-class softmax
        for (std::size_t j = 0; j < n; ++j) {
            const double lj = labels[x].w[j];
            for (std::size_t k = 0; k < m; ++k) {
                const std::size_t idx = j * m + k;
                const double r = ex[idx] / sum_all;
                const double w = ex[idx] / class_sum[j];
                add_cos_grad(embs[x], bank.center_flat(idx), cvs[x][idx],
                             inv * state.s * (r - lj * w), out.emb_grads[x]);
            }
        }
    }
    return out;
}

LossOutput compactness_plus_cce_loss(std::span<const Vec> embs, std::span<const LabelDist> labels,
                                     const geom::CenterBank& bank, double s_fixed, double alpha) {
    check_batch(embs, labels, bank);
    if (bank.subclusters() != 1) {
        throw std::invalid_argument("compactness_plus_cce_loss: requires M = 1");
    }
    if (!(s_fixed > 0.0) || !(alpha >= 0.0)) {
        throw std::invalid_argument("compactness_plus_cce_loss: bad scale or weight");
    }
    const std::size_t n = bank.n_classes();
    const double inv = 1.0 / static_cast<double>(embs.size());

    LossOutput out = class_compactness_loss(embs, labels, bank);
    if (alpha == 0.0) {
        return out;
    }

    for (std::size_t x = 0; x < embs.size(); ++x) {
        std::vector<CosVal> cvs(n);
        Vec logits(n);
        for (std::size_t j = 0; j < n; ++j) {
            cvs[j] = cos_to_center(embs[x], bank.center(j, 0));
            logits[j] = s_fixed * cvs[j].cos;
        }
        const double zmax = *std::max_element(logits.begin(), logits.end());
        double denom = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            denom += std::exp(logits[j] - zmax);
        }
        for (std::size_t j = 0; j < n; ++j) {
            const double pj = std::exp(logits[j] - zmax) / denom;
            const double lj = labels[x].w[j];
            if (lj > 0.0) {
                out.value -= alpha * inv * lj * (logits[j] - zmax - std::log(denom));
            }
            add_cos_grad(embs[x], bank.center(j, 0), cvs[j], alpha * inv * (pj - lj) * s_fixed,
                         out.emb_grads[x]);
        }
    }
    return out;
}

std::vector<Vec> compactness_decomposed_grad(std::span<const Vec> embs,
                                          std::span<const LabelDist> labels,
                                          const geom::CenterBank& bank, const ScaleState& state) {
    check_batch(embs, labels, bank);
    const std::size_t n = bank.n_classes();
    const std::size_t m = bank.subclusters();
    const std::size_t total = n * m;
    const double inv = 1.0 / static_cast<double>(embs.size());

    double f_max = -std::numeric_limits<double>::infinity();
    std::vector<Vec> cosines(embs.size(), Vec(total));
    for (std::size_t x = 0; x < embs.size(); ++x) {
        for (std::size_t idx = 0; idx < total; ++idx) {
            cosines[x][idx] = cos_to_center(embs[x], bank.center_flat(idx)).cos;
            f_max = std::max(f_max, state.s * cosines[x][idx]);
        }
    }

    std::vector<Vec> grads(embs.size(), Vec(bank.dim(), 0.0));
    for (std::size_t x = 0; x < embs.size(); ++x) {
        Vec ex(total);
        double sum_all = 0.0;
        Vec class_sum(n, 0.0);
        for (std::size_t idx = 0; idx < total; ++idx) {
            ex[idx] = std::exp(state.s * cosines[x][idx] - f_max);
            class_sum[idx / m] += ex[idx];
            sum_all += ex[idx];
        }

        // the two weighted sums of the decomposition, accumulated separately so
        // degenerate setups (N = 1, exact fixed points) cancel exactly
        Vec intra(bank.dim(), 0.0);
        Vec inter(bank.dim(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const double lj = labels[x].w[j];
            if (lj <= 0.0) {
                continue;
            }
            for (std::size_t k = 0; k < m; ++k) {
                const std::size_t idx = j * m + k;
                const double w = ex[idx] / class_sum[j];
                const auto c = bank.center_flat(idx);
                for (std::size_t d = 0; d < intra.size(); ++d) {
                    intra[d] += inv * lj * state.s * w * (embs[x][d] - c[d]);
                }
            }
        }
        for (std::size_t idx = 0; idx < total; ++idx) {
            const double r = ex[idx] / sum_all;
            const auto c = bank.center_flat(idx);
            for (std::size_t d = 0; d < inter.size(); ++d) {
                inter[d] += inv * state.s * r * (embs[x][d] - c[d]);
            }
        }
        Vec& g = grads[x];
        for (std::size_t d = 0; d < g.size(); ++d) {
            g[d] = intra[d] - inter[d];
        }
        g = project_tangent(embs[x], g);
    }
    return grads;
}

Vec project_tangent(const Vec& emb, const Vec& grad) {
    const double n = norm2(emb);
    if (!(n > 1e-30)) {
        throw std::domain_error("project_tangent: zero-norm embedding");
    }
    Vec unit(emb.size());
    for (std::size_t d = 0; d < emb.size(); ++d) {
        unit[d] = emb[d] / n;
    }
    const double radial = dot(grad, unit);
    Vec out(grad.begin(), grad.end());
    for (std::size_t d = 0; d < out.size(); ++d) {
        out[d] -= radial * unit[d];
    }
    return out;
}

std::pair<Vec, LabelDist> mixup(const Vec& a, const Vec& b, const LabelDist& la,
                                const LabelDist& lb, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0)) {
        throw std::invalid_argument("mixup: lambda must be in [0, 1]");
    }
    if (a.size() != b.size() || la.w.size() != lb.w.size()) {
        throw std::invalid_argument("mixup: shape mismatch");
    }
    Vec feat(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        feat[i] = lambda * a[i] + (1.0 - lambda) * b[i];
    }
    LabelDist l;
    l.w.resize(la.w.size());
    for (std::size_t i = 0; i < la.w.size(); ++i) {
        l.w[i] = lambda * la.w[i] + (1.0 - lambda) * lb.w[i];
    }
    return {std::move(feat), std::move(l)};
}

} // namespace masd::losses
