// masd: angular-margin representation learning for anomalous sound
// detection. Subcommands cover the whole pipeline: synth, features, train,
// score, eval, explain, verify.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>

#include <CLI11.hpp>

#include "masd/data.hpp"
#include "masd/dsp.hpp"
#include "masd/eval.hpp"
#include "masd/explain.hpp"
#include "masd/geometry.hpp"
#include "masd/losses.hpp"
#include "masd/net.hpp"
#include "masd/rng.hpp"
#include "masd/score.hpp"
#include "masd/train.hpp"

namespace fs = std::filesystem;
using namespace masd;

namespace {

struct ScoreRow {
    std::string clip_id;
    std::string section;
    double score;
};

// input paths are validated before any work begins
void require_exists(const fs::path& path, const char* what) {
    if (!fs::exists(path)) {
        throw std::invalid_argument(std::string(what) + " not found: " + path.string());
    }
}

void write_scores_csv(const fs::path& path, const std::vector<ScoreRow>& rows) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("scores: cannot write " + path.string());
    }
    out.precision(17);
    out << "clip_id,section,score\n";
    for (const auto& r : rows) {
        out << r.clip_id << ',' << r.section << ',' << r.score << '\n';
    }
}

std::map<std::string, double> read_scores_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("scores: cannot open " + path.string());
    }
    std::map<std::string, double> scores;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) {
            continue;
        }
        std::stringstream ss(line);
        std::string clip_id, section, score;
        std::getline(ss, clip_id, ',');
        std::getline(ss, section, ',');
        std::getline(ss, score, ',');
        scores[clip_id] = std::stod(score);
    }
    return scores;
}

int cmd_synth(const fs::path& out_dir, const data::SynthConfig& cfg) {
    const auto records = data::generate_synthetic(cfg, out_dir);
    std::cout << "wrote " << records.size() << " clips under " << out_dir.string() << "\n";
    return 0;
}

int cmd_features(const fs::path& manifest, const fs::path& out_dir, std::size_t n_fft,
                 std::size_t hop, std::size_t spectrum_len) {
    require_exists(manifest, "manifest");
    const auto records = data::load_manifest(manifest);
    const fs::path base = manifest.parent_path();
    fs::create_directories(out_dir);
    for (const auto& r : records) {
        const dsp::Waveform w = dsp::read_wav(base / r.path);
        const dsp::Grid spg = dsp::magnitude_spectrogram(w, n_fft, hop);
        dsp::save_grid(out_dir / (r.clip_id + ".spg"), spg);

        std::size_t len = spectrum_len;
        const std::size_t full = w.samples.size() / 2 + 1;
        if (len > full) {
            std::cerr << "warning: spectrum length clamped to " << full << " bins\n";
            len = full;
        }
        const auto spec = dsp::magnitude_spectrum(w, len);
        dsp::Grid sv(spec.size(), 1);
        sv.v = spec;
        dsp::save_grid(out_dir / (r.clip_id + ".spv"), sv);
    }
    std::cout << "extracted features for " << records.size() << " clips\n";
    return 0;
}

int cmd_train(const fs::path& manifest, const fs::path& features_dir, const fs::path& model_path,
              const fs::path& trace_path, train::TrainConfig cfg, const std::string& classes) {
    require_exists(manifest, "manifest");
    require_exists(features_dir, "features directory");
    const auto granularity = data::granularity_from_string(classes);
    const auto records = data::load_manifest(manifest);
    const auto all = train::build_feature_set(records, features_dir, granularity, 8);
    const auto train_set = train::filter_split(all, "train");

    const auto result = train::train(train_set, cfg);
    net::ModelBundle bundle;
    bundle.net = result.model;
    bundle.bank_classes = result.bank.n_classes();
    bundle.bank_subclusters = result.bank.subclusters();
    bundle.bank_seed = result.bank.seed();
    bundle.loss_name = cfg.loss_name;
    bundle.granularity = classes;
    net::save_model(model_path, bundle);
    if (!trace_path.empty()) {
        train::write_loss_trace_csv(trace_path, result.trace);
    }
    const auto& last = result.trace.rows.back();
    std::cout << "trained " << cfg.loss_name << " on " << train_set.samples.size()
              << " clips, final loss " << last.loss << ", intra " << last.intra << "\n";
    return 0;
}

int cmd_score(const fs::path& manifest, const fs::path& features_dir, const fs::path& model_path,
              const fs::path& refs_path, const fs::path& scores_path, std::size_t k,
              std::uint64_t seed) {
    require_exists(manifest, "manifest");
    require_exists(features_dir, "features directory");
    require_exists(model_path, "model");
    const auto records = data::load_manifest(manifest);
    const auto bundle = net::load_model(model_path);
    const auto fsall = train::build_feature_set(
        records, features_dir, data::granularity_from_string("none"),
        bundle.net.spec.spec_segments, bundle.net.spec.use_spectrogram,
        bundle.net.spec.use_spectrum);

    std::map<std::string, score::SectionTrainEmbeddings> train_embs;
    std::vector<ScoreRow> rows;
    std::vector<std::pair<const train::Sample*, Vec>> test_embs;
    for (const auto& s : fsall.samples) {
        const Vec emb = net::forward(bundle.net, s.spec_in, s.spectrum).coords();
        if (s.split == "train") {
            auto& section = train_embs[s.section];
            (s.domain == "target" ? section.target : section.source).push_back(emb);
        } else {
            test_embs.emplace_back(&s, emb);
        }
    }

    const auto refs = score::fit_reference(train_embs, k, seed);
    if (!refs_path.empty()) {
        score::save_reference(refs_path, refs);
    }
    for (const auto& [sample, emb] : test_embs) {
        rows.push_back({sample->clip_id, sample->section,
                        score::anomaly_score(emb, refs, sample->section)});
    }
    write_scores_csv(scores_path, rows);
    std::cout << "scored " << rows.size() << " test clips across " << refs.sections.size()
              << " sections\n";
    return 0;
}

int cmd_eval(const fs::path& manifest, const fs::path& scores_path, const fs::path& report_path,
             const fs::path& report_csv_path, double p) {
    require_exists(manifest, "manifest");
    require_exists(scores_path, "scores CSV");
    const auto records = data::load_manifest(manifest);
    const auto scores = read_scores_csv(scores_path);
    std::vector<eval::ScoredEntry> entries;
    for (const auto& r : records) {
        if (r.split != "test") {
            continue;
        }
        const auto it = scores.find(r.clip_id);
        if (it == scores.end()) {
            throw std::runtime_error("eval: no score for test clip " + r.clip_id);
        }
        entries.push_back({it->second, r.anomalous(), r.section, r.domain});
    }
    const auto report = eval::evaluate(entries, p);
    const std::string json = eval::report_to_json(report);
    if (report_path.empty()) {
        std::cout << json;
    } else {
        std::ofstream out(report_path);
        out << json;
        if (!out) {
            throw std::runtime_error("eval: cannot write " + report_path.string());
        }
    }
    if (!report_csv_path.empty()) {
        std::ofstream out(report_csv_path);
        out << eval::report_to_csv(report);
    }
    return 0;
}

int cmd_explain(const fs::path& manifest, const fs::path& features_dir,
                const fs::path& model_path, const fs::path& refs_path, const std::string& clip_id,
                const fs::path& out_dir, explain::MaskParams params) {
    require_exists(manifest, "manifest");
    require_exists(features_dir, "features directory");
    require_exists(model_path, "model");
    require_exists(refs_path, "reference model");
    const auto records = data::load_manifest(manifest);
    const auto bundle = net::load_model(model_path);
    const auto refs = score::load_reference(refs_path);
    fs::create_directories(out_dir);

    const data::ClipRecord* record = nullptr;
    for (const auto& r : records) {
        if (r.clip_id == clip_id) {
            record = &r;
            break;
        }
    }
    if (!record) {
        throw std::invalid_argument("explain: clip '" + clip_id + "' not in manifest");
    }

    const dsp::Grid linear = dsp::load_grid(features_dir / (clip_id + ".spg"));
    Vec spectrum;
    if (bundle.net.spec.use_spectrum) {
        spectrum = dsp::load_grid(features_dir / (clip_id + ".spv")).v;
    }
    const std::string section = record->section;

    auto scorer = [&](const dsp::Grid& masked) {
        const dsp::Grid norm = dsp::temporal_mean_normalize(masked);
        const Vec emb = net::forward(bundle.net, norm, spectrum).coords();
        return score::anomaly_score(emb, refs, section);
    };

    const auto map = explain::importance_map(scorer, linear, params);
    explain::export_map(map, out_dir / (clip_id + ".importance.csv"),
                        explain::MapFormat::CsvGrid);
    explain::export_map(map, out_dir / (clip_id + ".importance.pgm"), explain::MapFormat::Pgm);
    std::cout << "wrote importance map for " << clip_id << " (" << map.values.rows << "x"
              << map.values.cols << ", " << params.iters << " iterations)\n";
    return 0;
}

// Random tiny instance for the decomposition check.
double decomposition_trial(Rng& rng, bool subclusters, bool use_mixup) {
    const std::size_t n = 2 + rng.uniform_int(4);           // N <= 5
    const std::size_t m = subclusters ? 1 + rng.uniform_int(4) : 1;
    const std::size_t d = 2 + rng.uniform_int(7);           // D <= 8
    const std::size_t batch = 1 + rng.uniform_int(8);

    net::NetSpec spec;
    spec.use_spectrogram = true;
    spec.spec_bins = 3;
    spec.spec_segments = 2;
    spec.spec_widths = {5, 4};
    spec.use_spectrum = true;
    spec.spectrum_len = 5;
    spec.spectrum_widths = {4};
    spec.embed_dim = d;
    const auto model = net::init_weights(spec, rng.next_u64());
    const geom::CenterBank bank(n, m, d, rng.next_u64());

    losses::ScaleState state = losses::make_subcluster_state(n, m);
    state.s = 0.5 + 4.0 * rng.uniform();

    std::vector<Vec> embs;
    std::vector<net::ForwardCache> caches(batch);
    std::vector<losses::LabelDist> labels;
    for (std::size_t i = 0; i < batch; ++i) {
        // tiny rectifier nets can collapse a draw to the zero embedding
        for (int attempt = 0;; ++attempt) {
            Vec spec_in(spec.spec_input_dim());
            Vec spectrum(spec.spectrum_len);
            for (double& v : spec_in) {
                v = rng.gaussian();
            }
            for (double& v : spectrum) {
                v = rng.gaussian();
            }
            try {
                embs.push_back(net::forward(model, spec_in, spectrum, &caches[i]).coords());
                break;
            } catch (const std::domain_error&) {
                if (attempt > 100) {
                    throw;
                }
            }
        }
        if (use_mixup) {
            const std::size_t c1 = rng.uniform_int(n);
            std::size_t c2 = rng.uniform_int(n);
            const double lam = rng.uniform();
            auto mixed = losses::mixup(Vec{0.0}, Vec{0.0}, losses::LabelDist::pure(n, c1),
                                       losses::LabelDist::pure(n, c2), lam);
            labels.push_back(mixed.second);
        } else {
            labels.push_back(losses::LabelDist::pure(n, rng.uniform_int(n)));
        }
    }

    const auto direct = losses::subcluster_adacos_loss(embs, labels, bank, state);
    const auto decomposed = losses::compactness_decomposed_grad(embs, labels, bank, state);

    net::ParamGrads ga = net::zero_grads(model);
    net::ParamGrads gb = net::zero_grads(model);
    for (std::size_t i = 0; i < batch; ++i) {
        net::backward(model, caches[i], direct.emb_grads[i], ga);
        net::backward(model, caches[i], decomposed[i], gb);
    }

    auto nrm = [](const Vec& v) {
        double s = 0.0;
        for (double x : v) {
            s += x * x;
        }
        return std::sqrt(s);
    };
    std::vector<std::pair<const Vec*, const Vec*>> tensors;
    for (std::size_t i = 0; i < ga.spec_layers.size(); ++i) {
        tensors.emplace_back(&ga.spec_layers[i], &gb.spec_layers[i]);
    }
    for (std::size_t i = 0; i < ga.spectrum_layers.size(); ++i) {
        tensors.emplace_back(&ga.spectrum_layers[i], &gb.spectrum_layers[i]);
    }
    tensors.emplace_back(&ga.head, &gb.head);
    double global = 0.0;
    for (const auto& [ta, tb] : tensors) {
        global = std::max({global, nrm(*ta), nrm(*tb)});
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
        const double denom = std::max({nrm(*ta), nrm(*tb), 1e-8 * global});
        worst = std::max(worst, std::sqrt(nd) / denom);
    }
    return worst;
}

int cmd_verify(int trials, std::uint64_t seed) {
    Rng rng(seed);
    double worst_dec = 0.0;
    double worst_cor = 0.0;
    for (int i = 0; i < trials; ++i) {
        worst_dec = std::max(worst_dec, decomposition_trial(rng, true, i % 2 == 0));
        worst_cor = std::max(worst_cor, decomposition_trial(rng, false, i % 2 == 1));
    }

    double worst_identity = 0.0;
    for (std::size_t dim : {2, 64, 256}) {
        for (int i = 0; i < 1000; ++i) {
            Vec a(dim), b(dim);
            for (double& v : a) {
                v = rng.gaussian();
            }
            for (double& v : b) {
                v = rng.gaussian();
            }
            const auto u = geom::normalize(a);
            const auto v = geom::normalize(b);
            worst_identity = std::max(worst_identity, geom::cosine_identity_residual(u, v));
        }
    }

    double worst_metric = 0.0;
    for (int t = 0; t < 50; ++t) {
        const std::size_t nn = 2 + rng.uniform_int(99);
        const std::size_t na = 2 + rng.uniform_int(99);
        Vec normals(nn), anomalies(na);
        for (double& v : normals) {
            v = std::round(rng.uniform() * 20.0) / 20.0; // quantized to force ties
        }
        for (double& v : anomalies) {
            v = std::round((rng.uniform() + 0.1) * 20.0) / 20.0;
        }
        // pairwise oracle
        double wins = 0.0;
        for (double a : anomalies) {
            for (double n : normals) {
                if (a > n) {
                    wins += 1.0;
                } else if (a == n) {
                    wins += 0.5;
                }
            }
        }
        const double oracle = wins / static_cast<double>(nn * na);
        worst_metric = std::max(worst_metric, std::abs(oracle - eval::auc(normals, anomalies)));
        worst_metric =
            std::max(worst_metric, std::abs(eval::pauc(normals, anomalies, 1.0) -
                                            eval::auc(normals, anomalies)));
    }

    std::cout << "gradient decomposition max relative discrepancy: " << worst_dec << "\n";
    std::cout << "single-cluster decomposition max relative discrepancy: " << worst_cor << "\n";
    std::cout << "cosine-identity max residual: " << worst_identity << "\n";
    std::cout << "metric oracle max deviation: " << worst_metric << "\n";
    const bool ok = worst_dec <= 1e-6 && worst_cor <= 1e-6 && worst_identity <= 1e-12 &&
                    worst_metric <= 1e-9;
    std::cout << (ok ? "verify: OK" : "verify: FAILED") << "\n";
    return ok ? 0 : 2;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"angular-margin representation learning for anomalous sound detection"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    fs::path synth_out = "data";
    data::SynthConfig synth_cfg;
    synth_cfg.n_machine_types = 2;
    synth_cfg.sections_per_type = 2;
    synth_cfg.source_train_count = 24;
    synth_cfg.target_train_count = 4;
    synth_cfg.test_count_per_domain = 8;
    synth_cfg.clip_seconds = 1.0;
    synth->add_option("--out", synth_out, "output directory");
    synth->add_option("--types", synth_cfg.n_machine_types, "machine types");
    synth->add_option("--sections", synth_cfg.sections_per_type, "sections per type");
    synth->add_option("--attrs", synth_cfg.attributes_per_section, "attribute values per section");
    synth->add_option("--source-train", synth_cfg.source_train_count, "source train clips");
    synth->add_option("--target-train", synth_cfg.target_train_count, "target train clips");
    synth->add_option("--test-per-domain", synth_cfg.test_count_per_domain,
                      "test clips per domain per label");
    synth->add_option("--clip-seconds", synth_cfg.clip_seconds, "clip length in seconds");
    synth->add_option("--anomaly", synth_cfg.anomaly_kind,
                      "band-shift | harmonic-drop | transient");
    synth->add_option("--snr-db", synth_cfg.noise_snr_db, "signal-to-noise ratio in dB");
    synth->add_option("--seed", synth_cfg.seed, "random seed");

    // features
    auto* features = app.add_subcommand("features", "extract input representations");
    fs::path feat_manifest, feat_out = "features";
    std::size_t n_fft = 1024, hop = 512, spectrum_len = 8192;
    features->add_option("--manifest", feat_manifest, "manifest path")->required();
    features->add_option("--out", feat_out, "features directory");
    features->add_option("--n-fft", n_fft, "STFT size");
    features->add_option("--hop", hop, "STFT hop");
    features->add_option("--spectrum-len", spectrum_len, "pooled spectrum length");

    // train
    auto* tr = app.add_subcommand("train", "train an embedding model");
    fs::path tr_manifest, tr_features = "features", tr_model = "model.bin", tr_trace;
    train::TrainConfig tr_cfg;
    std::string tr_classes = "type-section-attr";
    bool no_mixup = false;
    tr->add_option("--manifest", tr_manifest, "manifest path")->required();
    tr->add_option("--features-dir", tr_features, "features directory");
    tr->add_option("--model", tr_model, "model output path");
    tr->add_option("--trace", tr_trace, "loss trace CSV output");
    tr->add_option("--loss", tr_cfg.loss_name,
                   "compactness | arcface | adacos | sc-adacos | compactness-cce");
    tr->add_option("--classes", tr_classes, "none | type | type-section | type-section-attr");
    tr->add_option("--subclusters", tr_cfg.subclusters, "sub-clusters per class");
    tr->add_option("--epochs", tr_cfg.epochs, "training epochs");
    tr->add_option("--batch", tr_cfg.batch_size, "batch size");
    tr->add_option("--lr", tr_cfg.learning_rate, "SGD learning rate");
    tr->add_option("--seed", tr_cfg.seed, "random seed");
    tr->add_option("--embed-dim", tr_cfg.embed_dim, "embedding dimension");
    tr->add_flag("--no-mixup", no_mixup, "disable mixup");
    fs::path tr_config;
    tr->add_option("--config", tr_config, "flat key=value config file (overridden by flags)");

    // score
    auto* sc = app.add_subcommand("score", "fit references and score test clips");
    fs::path sc_manifest, sc_features = "features", sc_model = "model.bin";
    fs::path sc_refs, sc_scores = "scores.csv";
    std::size_t sc_k = 16;
    std::uint64_t sc_seed = 0;
    sc->add_option("--manifest", sc_manifest, "manifest path")->required();
    sc->add_option("--features-dir", sc_features, "features directory");
    sc->add_option("--model", sc_model, "model path");
    sc->add_option("--refs", sc_refs, "reference model output path");
    sc->add_option("--scores", sc_scores, "scores CSV output");
    sc->add_option("--k", sc_k, "k-means cluster count");
    sc->add_option("--seed", sc_seed, "k-means seed");

    // eval
    auto* ev = app.add_subcommand("eval", "compute AUC/pAUC report");
    fs::path ev_manifest, ev_scores = "scores.csv", ev_report, ev_report_csv;
    double ev_p = 0.1;
    ev->add_option("--manifest", ev_manifest, "manifest path")->required();
    ev->add_option("--scores", ev_scores, "scores CSV");
    ev->add_option("--report", ev_report, "JSON report output (stdout if omitted)");
    ev->add_option("--report-csv", ev_report_csv, "flat CSV report output");
    ev->add_option("--p", ev_p, "pAUC false-positive-rate bound");

    // explain
    auto* ex = app.add_subcommand("explain", "RISE importance map for one clip");
    fs::path ex_manifest, ex_features = "features", ex_model = "model.bin", ex_refs,
             ex_out = "maps";
    std::string ex_clip;
    explain::MaskParams ex_params;
    ex->add_option("--manifest", ex_manifest, "manifest path")->required();
    ex->add_option("--features-dir", ex_features, "features directory");
    ex->add_option("--model", ex_model, "model path");
    ex->add_option("--refs", ex_refs, "reference model path")->required();
    ex->add_option("--clip", ex_clip, "clip id")->required();
    ex->add_option("--out", ex_out, "output directory");
    ex->add_option("--iters", ex_params.iters, "mask iterations");
    ex->add_option("--seed", ex_params.seed, "mask seed");
    ex->add_option("--mask-prob", ex_params.mask_prob, "per-cell masking probability");
    ex->add_option("--time-grid", ex_params.time_grid, "time mask size");
    ex->add_option("--freq-grid", ex_params.freq_grid, "frequency mask size");

    // verify
    auto* ve = app.add_subcommand("verify", "run the identity and oracle suites");
    int ve_trials = 100;
    std::uint64_t ve_seed = 7;
    ve->add_option("--trials", ve_trials, "random instances per identity");
    ve->add_option("--seed", ve_seed, "random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);
        }
        std::ostringstream usage;
        usage << app.help();
        std::cerr << e.what() << "\n" << usage.str();
        return 1;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(synth_out, synth_cfg);
        }
        if (features->parsed()) {
            return cmd_features(feat_manifest, feat_out, n_fft, hop, spectrum_len);
        }
        if (tr->parsed()) {
            train::TrainConfig cfg = tr_cfg;
            if (!tr_config.empty()) {
                // config file as the base, explicitly given flags win
                cfg = train::load_train_config(tr_config);
                if (tr->count("--loss")) cfg.loss_name = tr_cfg.loss_name;
                if (tr->count("--epochs")) cfg.epochs = tr_cfg.epochs;
                if (tr->count("--batch")) cfg.batch_size = tr_cfg.batch_size;
                if (tr->count("--subclusters")) cfg.subclusters = tr_cfg.subclusters;
                if (tr->count("--lr")) cfg.learning_rate = tr_cfg.learning_rate;
                if (tr->count("--seed")) cfg.seed = tr_cfg.seed;
                if (tr->count("--embed-dim")) cfg.embed_dim = tr_cfg.embed_dim;
            }
            if (no_mixup || tr->count("--no-mixup")) {
                cfg.mixup_enabled = false;
            }
            return cmd_train(tr_manifest, tr_features, tr_model, tr_trace, cfg, tr_classes);
        }
        if (sc->parsed()) {
            return cmd_score(sc_manifest, sc_features, sc_model, sc_refs, sc_scores, sc_k,
                             sc_seed);
        }
        if (ev->parsed()) {
            return cmd_eval(ev_manifest, ev_scores, ev_report, ev_report_csv, ev_p);
        }
        if (ex->parsed()) {
            return cmd_explain(ex_manifest, ex_features, ex_model, ex_refs, ex_clip, ex_out,
                               ex_params);
        }
        if (ve->parsed()) {
            return cmd_verify(ve_trials, ve_seed);
        }
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
