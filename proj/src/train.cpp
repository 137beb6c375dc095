#include "masd/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "masd/rng.hpp"

namespace masd::train {

namespace {

using losses::LabelDist;
using losses::LossOutput;
using losses::ScaleState;

// Sattolo's algorithm: a uniformly random single cycle, hence a
// derangement for n >= 2.
std::vector<std::size_t> derangement(std::size_t n, Rng& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = i;
    }
    for (std::size_t i = n - 1; i > 0; --i) {
        const std::size_t j = rng.uniform_int(i);
        std::swap(p[i], p[j]);
    }
    return p;
}

bool is_adaptive(const std::string& loss) {
    return loss == "adacos" || loss == "sc-adacos";
}

std::size_t loss_subclusters(const TrainConfig& cfg) {
    return cfg.loss_name == "sc-adacos" ? static_cast<std::size_t>(cfg.subclusters) : 1;
}

LossOutput eval_loss(const TrainConfig& cfg, std::span<const Vec> embs,
                     std::span<const LabelDist> labels, const geom::CenterBank& bank,
                     const ScaleState& state) {
    if (cfg.loss_name == "compactness") {
        return losses::class_compactness_loss(embs, labels, bank);
    }
    if (cfg.loss_name == "arcface") {
        return losses::arcface_loss(embs, labels, bank, cfg.arcface_scale, cfg.arcface_margin);
    }
    if (cfg.loss_name == "adacos" || cfg.loss_name == "sc-adacos") {
        return losses::subcluster_adacos_loss(embs, labels, bank, state);
    }
    if (cfg.loss_name == "compactness-cce") {
        return losses::compactness_plus_cce_loss(embs, labels, bank, cfg.cce_scale,
                                                 cfg.cce_alpha);
    }
    throw std::invalid_argument("unknown loss '" + cfg.loss_name + "'");
}

double tensor_norm(const Vec& a) {
    double n = 0.0;
    for (double v : a) {
        n += v * v;
    }
    return std::sqrt(n);
}

// Per-tensor relative discrepancy with an absolute floor tied to the
// overall gradient magnitude, so all-dead tensors carrying only rounding
// dust do not register as mismatches.
double grads_rel_discrepancy(const net::ParamGrads& a, const net::ParamGrads& b) {
    std::vector<std::pair<const Vec*, const Vec*>> tensors;
    for (std::size_t i = 0; i < a.spec_layers.size(); ++i) {
        tensors.emplace_back(&a.spec_layers[i], &b.spec_layers[i]);
    }
    for (std::size_t i = 0; i < a.spectrum_layers.size(); ++i) {
        tensors.emplace_back(&a.spectrum_layers[i], &b.spectrum_layers[i]);
    }
    tensors.emplace_back(&a.head, &b.head);

    double global = 0.0;
    for (const auto& [ta, tb] : tensors) {
        global = std::max({global, tensor_norm(*ta), tensor_norm(*tb)});
    }
    if (global < 1e-300) {
        return 0.0;
    }

    double worst = 0.0;
    for (const auto& [ta, tb] : tensors) {
        double nd = 0.0;
        for (std::size_t i = 0; i < ta->size(); ++i) {
            const double d = (*ta)[i] - (*tb)[i];
            nd += d * d;
        }
        const double denom =
            std::max({tensor_norm(*ta), tensor_norm(*tb), 1e-8 * global});
        worst = std::max(worst, std::sqrt(nd) / denom);
    }
    return worst;
}

} // namespace

FeatureSet build_feature_set(const std::vector<data::ClipRecord>& records,
                             const std::filesystem::path& features_dir,
                             data::Granularity granularity, std::size_t segments,
                             bool use_spectrogram, bool use_spectrum) {
    FeatureSet fs;
    fs.spec_segments = segments;

    // class index from train-split keys, sorted for determinism
    std::set<std::string> keys;
    for (const auto& r : records) {
        if (r.split == "train") {
            keys.insert(data::class_key(r, granularity));
        }
    }
    std::map<std::string, std::size_t> index;
    for (const auto& k : keys) {
        index.emplace(k, fs.class_names.size());
        fs.class_names.push_back(k);
    }
    fs.n_classes = fs.class_names.size();
    if (fs.n_classes == 0) {
        throw std::invalid_argument("build_feature_set: no train records");
    }

    for (const auto& r : records) {
        Sample s;
        s.clip_id = r.clip_id;
        s.section = r.section;
        s.domain = r.domain;
        s.split = r.split;
        s.anomalous = r.anomalous();
        const auto it = index.find(data::class_key(r, granularity));
        s.class_id = (it != index.end()) ? it->second : fs.n_classes;

        if (use_spectrogram) {
            const dsp::Grid grid = dsp::load_grid(features_dir / (r.clip_id + ".spg"));
            const dsp::Grid norm = dsp::temporal_mean_normalize(grid);
            s.spec_in = net::prepare_spectrogram_input(norm, segments);
            if (fs.spec_bins == 0) {
                fs.spec_bins = grid.rows;
            } else if (fs.spec_bins != grid.rows) {
                throw std::runtime_error("build_feature_set: inconsistent spectrogram shape");
            }
        }
        if (use_spectrum) {
            const dsp::Grid sv = dsp::load_grid(features_dir / (r.clip_id + ".spv"));
            s.spectrum = net::prepare_spectrum_input(sv.v);
            if (fs.spectrum_len == 0) {
                fs.spectrum_len = s.spectrum.size();
            } else if (fs.spectrum_len != s.spectrum.size()) {
                throw std::runtime_error("build_feature_set: inconsistent spectrum length");
            }
        }
        fs.samples.push_back(std::move(s));
    }
    return fs;
}

FeatureSet filter_split(const FeatureSet& fs, const std::string& split) {
    FeatureSet out = fs;
    out.samples.clear();
    for (const auto& s : fs.samples) {
        if (s.split == split) {
            out.samples.push_back(s);
        }
    }
    return out;
}

void TrainConfig::validate() const {
    if (epochs < 1) {
        throw std::invalid_argument("TrainConfig: epochs must be >= 1");
    }
    if (batch_size < 1 || (mixup_enabled && batch_size < 2)) {
        throw std::invalid_argument("TrainConfig: batch_size must be >= 2 with mixup");
    }
    if (subclusters < 1) {
        throw std::invalid_argument("TrainConfig: subclusters must be >= 1");
    }
    if (!(learning_rate > 0.0)) {
        throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    }
    if (embed_dim < 1) {
        throw std::invalid_argument("TrainConfig: embed_dim must be >= 1");
    }
    if (loss_name != "compactness" && loss_name != "arcface" && loss_name != "adacos" &&
        loss_name != "sc-adacos" && loss_name != "compactness-cce") {
        throw std::invalid_argument("TrainConfig: unknown loss '" + loss_name + "'");
    }
}

void write_loss_trace_csv(const std::filesystem::path& path, const LossTrace& trace) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("loss trace: cannot write " + path.string());
    }
    out << "epoch,loss,intra,inter\n";
    out.precision(17);
    for (const auto& row : trace.rows) {
        out << row.epoch << ',' << row.loss << ',' << row.intra << ',';
        if (row.inter) {
            out << *row.inter;
        }
        out << '\n';
    }
}

MonitorResult monitor_losses(const net::EmbeddingNet& model, const geom::CenterBank& bank,
                             const FeatureSet& data) {
    const std::size_t n = bank.n_classes();
    const std::size_t m = bank.subclusters();
    std::vector<std::vector<Vec>> by_class(n);
    for (const Sample& s : data.samples) {
        if (s.class_id >= n) {
            continue;
        }
        const auto emb = net::forward(model, s.spec_in, s.spectrum);
        by_class[s.class_id].push_back(emb.coords());
    }

    double intra_sum = 0.0;
    double inter_sum = 0.0;
    std::size_t present = 0;
    for (std::size_t j = 0; j < n; ++j) {
        if (by_class[j].empty()) {
            std::cerr << "warning: class " << j << " has no samples; skipped in monitoring\n";
            continue;
        }
        ++present;
        double intra = 0.0;
        double inter = 0.0;
        for (const Vec& e : by_class[j]) {
            double nearest = std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < m; ++k) {
                nearest = std::min(nearest, masd::sq_dist(e, bank.center(j, k)));
            }
            intra += nearest;
            if (n > 1) {
                double other = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    if (c == j) {
                        continue;
                    }
                    for (std::size_t k = 0; k < m; ++k) {
                        other += masd::sq_dist(e, bank.center(c, k));
                    }
                }
                inter += other / static_cast<double>((n - 1) * m);
            }
        }
        intra_sum += intra / static_cast<double>(by_class[j].size());
        inter_sum += inter / static_cast<double>(by_class[j].size());
    }
    if (present == 0) {
        throw std::runtime_error("monitor_losses: no class has samples");
    }

    MonitorResult r;
    r.intra = intra_sum / static_cast<double>(present);
    if (n > 1) {
        r.inter = inter_sum / static_cast<double>(present);
    }
    return r;
}

std::vector<Vec> embed_all(const net::EmbeddingNet& model, const FeatureSet& data) {
    std::vector<Vec> out;
    out.reserve(data.samples.size());
    for (const Sample& s : data.samples) {
        out.push_back(net::forward(model, s.spec_in, s.spectrum).coords());
    }
    return out;
}

double verify_grad_decomposition(const net::EmbeddingNet& model, const geom::CenterBank& bank,
                       const losses::ScaleState& state,
                       const std::vector<const Sample*>& batch,
                       const std::vector<losses::LabelDist>* mixed_labels,
                       const std::vector<std::pair<Vec, Vec>>* mixed_inputs) {
    if (batch.empty()) {
        throw std::invalid_argument("verify_grad_decomposition: empty batch");
    }
    std::vector<Vec> embs;
    std::vector<net::ForwardCache> caches(batch.size());
    std::vector<LabelDist> labels;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Vec& spec_in = mixed_inputs ? (*mixed_inputs)[i].first : batch[i]->spec_in;
        const Vec& spectrum = mixed_inputs ? (*mixed_inputs)[i].second : batch[i]->spectrum;
        embs.push_back(net::forward(model, spec_in, spectrum, &caches[i]).coords());
        labels.push_back(mixed_labels ? (*mixed_labels)[i]
                                      : LabelDist::pure(bank.n_classes(), batch[i]->class_id));
    }

    const LossOutput direct = losses::subcluster_adacos_loss(embs, labels, bank, state);
    const auto decomposed = losses::compactness_decomposed_grad(embs, labels, bank, state);

    net::ParamGrads ga = net::zero_grads(model);
    net::ParamGrads gb = net::zero_grads(model);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        net::backward(model, caches[i], direct.emb_grads[i], ga);
        net::backward(model, caches[i], decomposed[i], gb);
    }
    return grads_rel_discrepancy(ga, gb);
}

TrainResult train(const FeatureSet& train_data, const TrainConfig& cfg) {
    cfg.validate();
    if (train_data.samples.empty()) {
        throw std::invalid_argument("train: empty dataset");
    }
    const std::size_t n_classes = train_data.n_classes;
    for (const Sample& s : train_data.samples) {
        if (s.class_id >= n_classes) {
            throw std::invalid_argument("train: sample with unknown class id");
        }
    }

    net::NetSpec spec;
    spec.use_spectrogram = train_data.spec_bins > 0;
    spec.spec_bins = std::max<std::size_t>(train_data.spec_bins, 1);
    spec.spec_segments = std::max<std::size_t>(train_data.spec_segments, 1);
    spec.spec_widths = cfg.spec_widths;
    spec.use_spectrum = train_data.spectrum_len > 0;
    spec.spectrum_len = std::max<std::size_t>(train_data.spectrum_len, 1);
    spec.spectrum_widths = cfg.spectrum_widths;
    spec.embed_dim = cfg.embed_dim;

    const std::size_t m = loss_subclusters(cfg);
    geom::CenterBank bank(n_classes, m, cfg.embed_dim, Rng::derive(cfg.seed, 1));
    net::EmbeddingNet model = net::init_weights(spec, Rng::derive(cfg.seed, 2));
    Rng rng(Rng::derive(cfg.seed, 3));

    ScaleState state = (cfg.loss_name == "sc-adacos")
                           ? losses::make_subcluster_state(n_classes, m)
                           : losses::make_adacos_state(n_classes);

    const std::size_t n_samples = train_data.samples.size();
    std::vector<LabelDist> pure_labels;
    pure_labels.reserve(n_samples);
    for (const Sample& s : train_data.samples) {
        pure_labels.push_back(LabelDist::pure(n_classes, s.class_id));
    }

    TrainResult result{std::move(model), std::move(bank), {}, state};
    // reuse local names bound to the result from here on
    net::EmbeddingNet& model_ref = result.model;
    geom::CenterBank& bank_ref = result.bank;

    auto record = [&](int epoch) {
        std::vector<Vec> embs = embed_all(model_ref, train_data);
        const LossOutput lo = eval_loss(cfg, embs, pure_labels, bank_ref, state);
        const MonitorResult mon = monitor_losses(model_ref, bank_ref, train_data);
        LossTrace::Row row;
        row.epoch = epoch;
        row.loss = lo.value;
        row.intra = mon.intra;
        row.inter = mon.inter;
        if (cfg.check_decomposition && (cfg.loss_name == "adacos" || cfg.loss_name == "sc-adacos")) {
            Rng vrng(Rng::derive(cfg.seed, 0x7e0 + static_cast<std::uint64_t>(epoch)));
            const std::size_t bsz =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n_samples);
            std::vector<const Sample*> vb;
            for (std::size_t i = 0; i < bsz; ++i) {
                vb.push_back(&train_data.samples[vrng.uniform_int(n_samples)]);
            }
            if (cfg.mixup_enabled && vb.size() >= 2) {
                std::vector<LabelDist> mixed_labels;
                std::vector<std::pair<Vec, Vec>> mixed_inputs;
                const auto partner = derangement(vb.size(), vrng);
                for (std::size_t i = 0; i < vb.size(); ++i) {
                    const double lam = vrng.uniform();
                    auto [spec_mixed, lab] = losses::mixup(
                        vb[i]->spec_in, vb[partner[i]]->spec_in,
                        LabelDist::pure(n_classes, vb[i]->class_id),
                        LabelDist::pure(n_classes, vb[partner[i]]->class_id), lam);
                    auto spectrum_pair = losses::mixup(
                        vb[i]->spectrum, vb[partner[i]]->spectrum,
                        LabelDist::pure(n_classes, vb[i]->class_id),
                        LabelDist::pure(n_classes, vb[partner[i]]->class_id), lam);
                    mixed_labels.push_back(lab);
                    mixed_inputs.emplace_back(std::move(spec_mixed),
                                              std::move(spectrum_pair.first));
                }
                row.decomposition =
                    verify_grad_decomposition(model_ref, bank_ref, state, vb, &mixed_labels, &mixed_inputs);
            } else {
                row.decomposition = verify_grad_decomposition(model_ref, bank_ref, state, vb);
            }
        }
        result.trace.rows.push_back(std::move(row));
    };

    record(0);

    std::vector<std::size_t> order(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) {
        order[i] = i;
    }

    long batch_index = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        // Fisher-Yates shuffle
        for (std::size_t i = n_samples - 1; i > 0; --i) {
            const std::size_t j = rng.uniform_int(i + 1);
            std::swap(order[i], order[j]);
        }

        for (std::size_t start = 0; start < n_samples;
             start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(n_samples, start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t bsz = end - start;

            std::vector<Vec> spec_inputs(bsz);
            std::vector<Vec> spectrum_inputs(bsz);
            std::vector<LabelDist> labels(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                const Sample& s = train_data.samples[order[start + i]];
                spec_inputs[i] = s.spec_in;
                spectrum_inputs[i] = s.spectrum;
                labels[i] = LabelDist::pure(n_classes, s.class_id);
            }
            if (cfg.mixup_enabled && bsz >= 2) {
                const auto partner = derangement(bsz, rng);
                std::vector<Vec> spec_mixed(bsz);
                std::vector<Vec> spectrum_mixed(bsz);
                std::vector<LabelDist> labels_mixed(bsz);
                for (std::size_t i = 0; i < bsz; ++i) {
                    const double lam = rng.uniform();
                    auto a = losses::mixup(spec_inputs[i], spec_inputs[partner[i]], labels[i],
                                           labels[partner[i]], lam);
                    auto b = losses::mixup(spectrum_inputs[i], spectrum_inputs[partner[i]],
                                           labels[i], labels[partner[i]], lam);
                    spec_mixed[i] = std::move(a.first);
                    spectrum_mixed[i] = std::move(b.first);
                    labels_mixed[i] = std::move(a.second);
                }
                spec_inputs = std::move(spec_mixed);
                spectrum_inputs = std::move(spectrum_mixed);
                labels = std::move(labels_mixed);
            }

            std::vector<Vec> embs(bsz);
            std::vector<net::ForwardCache> caches(bsz);
            for (std::size_t i = 0; i < bsz; ++i) {
                embs[i] =
                    net::forward(model_ref, spec_inputs[i], spectrum_inputs[i], &caches[i])
                        .coords();
            }

            if (is_adaptive(cfg.loss_name) && batch_index > 0 && n_classes > 1) {
                const auto stats = losses::make_scale_batch(embs, labels, bank_ref);
                state = (cfg.loss_name == "sc-adacos")
                            ? losses::subcluster_scale_update(state, stats, n_classes, m)
                            : losses::adacos_scale_update(state, stats, n_classes);
            }

            const LossOutput lo = eval_loss(cfg, embs, labels, bank_ref, state);
            if (!std::isfinite(lo.value)) {
                throw std::runtime_error("train: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(batch_index));
            }

            net::ParamGrads grads = net::zero_grads(model_ref);
            for (std::size_t i = 0; i < bsz; ++i) {
                net::backward(model_ref, caches[i], lo.emb_grads[i], grads);
            }
            if (cfg.weight_decay) {
                net::add_weight_decay(model_ref, cfg.weight_decay_coeff, grads);
            }
            net::sgd_step(model_ref, grads, cfg.learning_rate);
            ++batch_index;
        }
        record(epoch);
    }

    result.scale = state;
    return result;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("config: cannot open " + path.string());
    }
    TrainConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line = line.substr(0, hash);
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw std::invalid_argument("config line " + std::to_string(line_no) +
                                            ": expected key=value");
            }
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return (b == std::string::npos) ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "loss") {
            cfg.loss_name = value;
        } else if (key == "epochs") {
            cfg.epochs = std::stoi(value);
        } else if (key == "batch_size") {
            cfg.batch_size = std::stoi(value);
        } else if (key == "subclusters") {
            cfg.subclusters = std::stoi(value);
        } else if (key == "learning_rate") {
            cfg.learning_rate = std::stod(value);
        } else if (key == "seed") {
            cfg.seed = std::stoull(value);
        } else if (key == "mixup") {
            cfg.mixup_enabled = (value == "true" || value == "1");
        } else if (key == "embed_dim") {
            cfg.embed_dim = std::stoul(value);
        } else if (key == "weight_decay") {
            cfg.weight_decay = (value == "true" || value == "1");
        } else {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": unknown key '" + key + "'");
        }
    }
    return cfg;
}

} // namespace masd::train
