#include "masd/data.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "masd/dsp.hpp"
#include "masd/rng.hpp"

namespace masd::data {

namespace {

using nlohmann::json;

ClipRecord record_from_json(const json& j, std::size_t line_no) {
    auto require = [&](const char* key) -> std::string {
        if (!j.contains(key) || !j.at(key).is_string()) {
            throw std::invalid_argument("manifest line " + std::to_string(line_no) +
                                        ": missing field '" + key + "'");
        }
        return j.at(key).get<std::string>();
    };
    ClipRecord r;
    r.clip_id = require("clip_id");
    r.path = require("path");
    r.machine_type = require("machine_type");
    r.section = require("section");
    r.domain = require("domain");
    r.split = require("split");
    r.label = require("label");
    if (j.contains("attributes")) {
        for (const auto& [k, v] : j.at("attributes").items()) {
            r.attributes[k] = v.get<std::string>();
        }
    }

    if (r.domain != "source" && r.domain != "target") {
        throw std::invalid_argument("manifest line " + std::to_string(line_no) +
                                    ": unknown domain '" + r.domain + "'");
    }
    if (r.split != "train" && r.split != "test") {
        throw std::invalid_argument("manifest line " + std::to_string(line_no) +
                                    ": unknown split '" + r.split + "'");
    }
    if (r.label != "normal" && r.label != "anomalous") {
        throw std::invalid_argument("manifest line " + std::to_string(line_no) +
                                    ": unknown label '" + r.label + "'");
    }
    if (r.split == "train" && r.anomalous()) {
        throw std::invalid_argument("manifest line " + std::to_string(line_no) +
                                    ": anomalous label inside a train split");
    }
    return r;
}

json record_to_json(const ClipRecord& r) {
    json j;
    j["clip_id"] = r.clip_id;
    j["path"] = r.path;
    j["machine_type"] = r.machine_type;
    j["section"] = r.section;
    j["domain"] = r.domain;
    j["split"] = r.split;
    j["label"] = r.label;
    j["attributes"] = json::object();
    for (const auto& [k, v] : r.attributes) {
        j["attributes"][k] = v;
    }
    return j;
}

// One sinusoidal signature component.
struct Component {
    double freq_hz;
    double amp;
    double am_rate_hz;
    double am_depth;
};

struct Signature {
    std::vector<Component> comps;
};

Signature make_signature(std::uint64_t seed, std::size_t class_index) {
    Rng rng(Rng::derive(seed, 0xc1a5'0000ULL + class_index));
    Signature sig;
    const std::size_t n_comp = 3 + rng.uniform_int(3); // 3..5
    const double bin_hz = 16000.0 / 1024.0;
    for (std::size_t i = 0; i < n_comp; ++i) {
        Component c;
        // bin-centered frequencies keep class peaks crisp in the STFT
        c.freq_hz = bin_hz * static_cast<double>(20 + rng.uniform_int(430));
        c.amp = 0.4 + 0.6 * rng.uniform();
        c.am_rate_hz = 0.5 + 7.5 * rng.uniform();
        c.am_depth = 0.6 * rng.uniform();
        sig.comps.push_back(c);
    }
    return sig;
}

constexpr double kTargetFreqShift = 1.03;
constexpr double kAnomalyBandShift = 1.12;
constexpr double kSignatureRms = 0.1;

std::vector<double> render_signature(const Signature& sig, double freq_scale, bool drop_strongest,
                                     std::size_t n_samples, Rng& rng) {
    std::size_t strongest = 0;
    for (std::size_t i = 1; i < sig.comps.size(); ++i) {
        if (sig.comps[i].amp > sig.comps[strongest].amp) {
            strongest = i;
        }
    }

    std::vector<double> x(n_samples, 0.0);
    const double dt = 1.0 / 16000.0;
    for (std::size_t ci = 0; ci < sig.comps.size(); ++ci) {
        if (drop_strongest && ci == strongest) {
            continue;
        }
        const Component& c = sig.comps[ci];
        const double phase = 2.0 * std::numbers::pi * rng.uniform();
        const double am_phase = 2.0 * std::numbers::pi * rng.uniform();
        const double w = 2.0 * std::numbers::pi * c.freq_hz * freq_scale;
        const double wm = 2.0 * std::numbers::pi * c.am_rate_hz;
        for (std::size_t n = 0; n < n_samples; ++n) {
            const double t = static_cast<double>(n) * dt;
            const double env = 1.0 - c.am_depth + c.am_depth * 0.5 * (1.0 + std::sin(wm * t + am_phase));
            x[n] += c.amp * env * std::sin(w * t + phase);
        }
    }

    double rms = 0.0;
    for (double v : x) {
        rms += v * v;
    }
    rms = std::sqrt(rms / static_cast<double>(n_samples));
    if (rms > 1e-12) {
        const double g = kSignatureRms / rms;
        for (double& v : x) {
            v *= g;
        }
    }
    return x;
}

// Shared broadband noise; the texture differs per domain but not per class.
void add_noise(std::vector<double>& x, const std::string& domain, double snr_db, Rng& rng) {
    if (std::isinf(snr_db) && snr_db > 0.0) {
        return;
    }
    const double noise_rms = kSignatureRms / std::pow(10.0, snr_db / 20.0);
    const std::size_t n = x.size();
    std::vector<double> noise(n);
    for (double& v : noise) {
        v = rng.gaussian();
    }
    if (domain == "target") {
        // darker texture: short moving average
        std::vector<double> smoothed(n, 0.0);
        double acc = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            acc += noise[i];
            if (i >= 4) {
                acc -= noise[i - 4];
            }
            smoothed[i] = acc / 4.0;
        }
        noise = std::move(smoothed);
    }
    double rms = 0.0;
    for (double v : noise) {
        rms += v * v;
    }
    rms = std::sqrt(rms / static_cast<double>(n));
    const double g = (rms > 1e-12) ? noise_rms / rms : 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] += g * noise[i];
    }
}

void add_transients(std::vector<double>& x, Rng& rng) {
    const std::size_t burst_len = 800; // 50 ms
    const std::size_t bursts = 8;
    if (x.size() <= burst_len) {
        return;
    }
    for (std::size_t b = 0; b < bursts; ++b) {
        const std::size_t start = rng.uniform_int(x.size() - burst_len);
        for (std::size_t i = 0; i < burst_len; ++i) {
            const double env = std::sin(std::numbers::pi * static_cast<double>(i) /
                                        static_cast<double>(burst_len));
            x[start + i] += 3.0 * kSignatureRms * env * rng.gaussian();
        }
    }
}

} // namespace

std::vector<ClipRecord> load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("manifest: cannot open " + path.string());
    }
    std::vector<ClipRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) {
            continue;
        }
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::invalid_argument("manifest line " + std::to_string(line_no) + ": " +
                                        e.what());
        }
        records.push_back(record_from_json(j, line_no));
    }
    if (records.empty()) {
        std::cerr << "warning: manifest " << path.string() << " contains no records\n";
    }
    return records;
}

void save_manifest(const std::filesystem::path& path, const std::vector<ClipRecord>& records) {
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("manifest: cannot write " + path.string());
    }
    for (const ClipRecord& r : records) {
        out << record_to_json(r).dump() << '\n';
    }
}

Granularity granularity_from_string(const std::string& s) {
    if (s == "none") {
        return Granularity::None;
    }
    if (s == "type") {
        return Granularity::Type;
    }
    if (s == "type-section") {
        return Granularity::TypeSection;
    }
    if (s == "type-section-attr") {
        return Granularity::TypeSectionAttr;
    }
    throw std::invalid_argument("unknown class granularity '" + s + "'");
}

std::string granularity_to_string(Granularity g) {
    switch (g) {
    case Granularity::None:
        return "none";
    case Granularity::Type:
        return "type";
    case Granularity::TypeSection:
        return "type-section";
    case Granularity::TypeSectionAttr:
        return "type-section-attr";
    }
    throw std::logic_error("bad granularity");
}

std::string class_key(const ClipRecord& r, Granularity g) {
    switch (g) {
    case Granularity::None:
        return "all";
    case Granularity::Type:
        return r.machine_type;
    case Granularity::TypeSection:
        return r.machine_type + "/" + r.section;
    case Granularity::TypeSectionAttr: {
        std::string key = r.machine_type + "/" + r.section;
        for (const auto& [k, v] : r.attributes) { // std::map: sorted keys
            key += "/" + k + "=" + v;
        }
        return key;
    }
    }
    throw std::logic_error("bad granularity");
}

void SynthConfig::validate() const {
    if (n_machine_types < 1 || sections_per_type < 1 || attributes_per_section < 1 ||
        source_train_count < 1 || target_train_count < 1 || test_count_per_domain < 1) {
        throw std::invalid_argument("SynthConfig: all counts must be >= 1");
    }
    if (!(clip_seconds > 0.0)) {
        throw std::invalid_argument("SynthConfig: clip_seconds must be positive");
    }
    if (anomaly_kind != "band-shift" && anomaly_kind != "harmonic-drop" &&
        anomaly_kind != "transient") {
        throw std::invalid_argument("SynthConfig: unknown anomaly kind '" + anomaly_kind + "'");
    }
}

std::vector<ClipRecord> generate_synthetic(const SynthConfig& cfg,
                                           const std::filesystem::path& out_dir) {
    cfg.validate();
    const std::filesystem::path wav_dir = out_dir / "wav";
    std::filesystem::create_directories(wav_dir);

    const std::size_t n_samples =
        static_cast<std::size_t>(std::llround(cfg.clip_seconds * 16000.0));
    const int attrs = cfg.attributes_per_section;

    std::vector<ClipRecord> records;
    std::uint64_t clip_counter = 0;

    for (int mt = 0; mt < cfg.n_machine_types; ++mt) {
        const std::string type_name = "mt" + std::to_string(mt);
        for (int sec = 0; sec < cfg.sections_per_type; ++sec) {
            const std::string section_name = type_name + "_s" + std::to_string(sec);

            struct Slot {
                std::string domain;
                std::string split;
                std::string label;
                int count;
            };
            const std::vector<Slot> slots = {
                {"source", "train", "normal", cfg.source_train_count},
                {"target", "train", "normal", cfg.target_train_count},
                {"source", "test", "normal", cfg.test_count_per_domain},
                {"source", "test", "anomalous", cfg.test_count_per_domain},
                {"target", "test", "normal", cfg.test_count_per_domain},
                {"target", "test", "anomalous", cfg.test_count_per_domain},
            };

            for (const Slot& slot : slots) {
                for (int i = 0; i < slot.count; ++i) {
                    const int attr = i % attrs;
                    const std::size_t class_index =
                        (static_cast<std::size_t>(mt) * cfg.sections_per_type + sec) * attrs +
                        attr;
                    const Signature sig = make_signature(cfg.seed, class_index);

                    Rng clip_rng(Rng::derive(cfg.seed, 0x0c11'0000ULL + clip_counter));
                    double freq_scale = (slot.domain == "target") ? kTargetFreqShift : 1.0;
                    bool drop = false;
                    const bool anomalous = slot.label == "anomalous";
                    if (anomalous && cfg.anomaly_kind == "band-shift") {
                        freq_scale *= kAnomalyBandShift;
                    }
                    if (anomalous && cfg.anomaly_kind == "harmonic-drop") {
                        drop = true;
                    }

                    std::vector<double> x =
                        render_signature(sig, freq_scale, drop, n_samples, clip_rng);
                    if (anomalous && cfg.anomaly_kind == "transient") {
                        add_transients(x, clip_rng);
                    }
                    add_noise(x, slot.domain, cfg.noise_snr_db, clip_rng);
                    for (double& v : x) {
                        v = std::clamp(v, -0.999, 0.999);
                    }

                    ClipRecord r;
                    r.clip_id = section_name + "_" + slot.domain + "_" + slot.split + "_" +
                                slot.label + "_" + std::to_string(i);
                    r.path = "wav/" + r.clip_id + ".wav";
                    r.machine_type = type_name;
                    r.section = section_name;
                    r.domain = slot.domain;
                    r.split = slot.split;
                    r.label = slot.label;
                    r.attributes["set"] = "a" + std::to_string(attr);
                    records.push_back(r);

                    dsp::Waveform w;
                    w.samples = std::move(x);
                    w.sample_rate = 16000;
                    dsp::write_wav(out_dir / r.path, w);
                    ++clip_counter;
                }
            }
        }
    }

    save_manifest(out_dir / "manifest.jsonl", records);
    return records;
}

} // namespace masd::data
