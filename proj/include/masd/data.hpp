#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace masd::data {

struct ClipRecord {
    std::string clip_id;
    std::string path; // relative to the manifest directory
    std::string machine_type;
    std::string section;
    std::string domain; // source | target
    std::string split;  // train | test
    std::string label;  // normal | anomalous
    std::map<std::string, std::string> attributes;

    bool anomalous() const { return label == "anomalous"; }
};

// JSON-lines manifest. A train split containing an anomalous label is a
// hard error (semi-supervised premise).
std::vector<ClipRecord> load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const std::vector<ClipRecord>& records);

// Auxiliary-task class granularities.
enum class Granularity { None, Type, TypeSection, TypeSectionAttr };

Granularity granularity_from_string(const std::string& s);
std::string granularity_to_string(Granularity g);

// Class key of a record under a granularity (the joint key concatenates
// machine type, section and sorted attribute pairs).
std::string class_key(const ClipRecord& r, Granularity g);

struct SynthConfig {
    int n_machine_types = 7;
    int sections_per_type = 6;
    int attributes_per_section = 2;
    int source_train_count = 990;
    int target_train_count = 10;
    int test_count_per_domain = 50; // per label (normal / anomalous)
    double clip_seconds = 10.0;
    std::string anomaly_kind = "band-shift"; // band-shift | harmonic-drop | transient
    double noise_snr_db = 0.0;               // +inf disables noise
    std::uint64_t seed = 1;

    void validate() const;
};

// Writes WAV files under out_dir/wav plus out_dir/manifest.jsonl and
// returns the records. Deterministic in cfg.seed, byte for byte.
std::vector<ClipRecord> generate_synthetic(const SynthConfig& cfg,
                                           const std::filesystem::path& out_dir);

} // namespace masd::data
