#include "masd/score.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <limits>
#include <stdexcept>

#include "masd/rng.hpp"

namespace masd::score {

namespace {

std::size_t nearest_center(const Vec& p, const std::vector<Vec>& centers) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centers.size(); ++c) {
        const double d = sq_dist(p, centers[c]);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

double cosine_general(const Vec& a, const Vec& b) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na < 1e-30 || nb < 1e-30) {
        return 0.0;
    }
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) {
        throw std::runtime_error("reference model: truncated file");
    }
    return v;
}

void write_vecs(std::ostream& out, const std::vector<Vec>& vs, std::size_t dim) {
    write_u64(out, vs.size());
    write_u64(out, dim);
    for (const Vec& v : vs) {
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<std::streamsize>(v.size() * sizeof(double)));
    }
}

std::vector<Vec> read_vecs(std::istream& in) {
    const std::uint64_t n = read_u64(in);
    const std::uint64_t dim = read_u64(in);
    if (dim > (1ULL << 24) || n > (1ULL << 24)) {
        throw std::runtime_error("reference model: implausible shape");
    }
    std::vector<Vec> vs(n, Vec(dim));
    for (Vec& v : vs) {
        in.read(reinterpret_cast<char*>(v.data()),
                static_cast<std::streamsize>(dim * sizeof(double)));
        if (!in) {
            throw std::runtime_error("reference model: truncated data");
        }
    }
    return vs;
}

} // namespace

std::vector<Vec> kmeans(std::span<const Vec> points, std::size_t k, std::uint64_t seed) {
    if (points.empty()) {
        throw std::invalid_argument("kmeans: no points");
    }
    if (k < 1) {
        throw std::invalid_argument("kmeans: k must be >= 1");
    }
    const std::size_t n = points.size();
    const std::size_t dim = points[0].size();
    Rng rng(seed);

    // k-means++ seeding
    std::vector<Vec> centers;
    centers.reserve(k);
    centers.push_back(points[rng.uniform_int(n)]);
    std::vector<double> d2(n);
    while (centers.size() < k) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (const Vec& c : centers) {
                best = std::min(best, sq_dist(points[i], c));
            }
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {
            centers.push_back(points[rng.uniform_int(n)]);
            continue;
        }
        double r = rng.uniform() * total;
        std::size_t pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            r -= d2[i];
            if (r <= 0.0) {
                pick = i;
                break;
            }
        }
        centers.push_back(points[pick]);
    }

    std::vector<std::size_t> assign(n, k);
    for (int iter = 0; iter < 300; ++iter) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = nearest_center(points[i], centers);
            if (c != assign[i]) {
                assign[i] = c;
                changed = true;
            }
        }
        if (!changed && iter > 0) {
            break;
        }

        std::vector<Vec> sums(k, Vec(dim, 0.0));
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t i = 0; i < n; ++i) {
            axpy(1.0, points[i], sums[assign[i]]);
            ++counts[assign[i]];
        }
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) {
                // re-seed to the point farthest from its assigned center
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = sq_dist(points[i], centers[assign[i]]);
                    if (d > far_d) {
                        far_d = d;
                        far = i;
                    }
                }
                centers[c] = points[far];
                changed = true;
            } else {
                for (std::size_t d = 0; d < dim; ++d) {
                    centers[c][d] = sums[c][d] / static_cast<double>(counts[c]);
                }
            }
        }
        if (!changed) {
            break;
        }
    }
    return centers;
}

ReferenceModel fit_reference(const std::map<std::string, SectionTrainEmbeddings>& train_embs,
                             std::size_t k, std::uint64_t seed) {
    if (k < 1) {
        throw std::invalid_argument("fit_reference: k must be >= 1");
    }
    ReferenceModel model;
    model.k = k;
    std::uint64_t section_idx = 0;
    for (const auto& [section, embs] : train_embs) {
        if (embs.source.empty() || embs.target.empty()) {
            throw std::invalid_argument("fit_reference: section '" + section +
                                        "' is missing a domain");
        }
        std::size_t k_eff = k;
        if (k_eff > embs.source.size()) {
            k_eff = embs.source.size();
            std::cerr << "warning: section '" << section << "' has only " << embs.source.size()
                      << " source samples; clamping k to " << k_eff << "\n";
        }
        SectionRefs refs;
        refs.source_means = kmeans(embs.source, k_eff, Rng::derive(seed, section_idx));
        for (Vec& mean : refs.source_means) {
            const double nrm = norm2(mean);
            if (nrm > 1e-12) {
                scale_inplace(mean, 1.0 / nrm);
            }
        }
        refs.target_refs = embs.target;
        model.sections.emplace(section, std::move(refs));
        ++section_idx;
    }
    return model;
}

double anomaly_score(const Vec& emb, const ReferenceModel& refs, const std::string& section) {
    const auto it = refs.sections.find(section);
    if (it == refs.sections.end()) {
        throw std::invalid_argument("anomaly_score: unknown section '" + section + "'");
    }
    double best = std::numeric_limits<double>::infinity();
    for (const Vec& m : it->second.source_means) {
        best = std::min(best, 1.0 - cosine_general(emb, m));
    }
    for (const Vec& t : it->second.target_refs) {
        best = std::min(best, 1.0 - cosine_general(emb, t));
    }
    return best;
}

void save_reference(const std::filesystem::path& path, const ReferenceModel& refs) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("reference model: cannot write " + path.string());
    }
    out.write("MASDREFS", 8);
    write_u64(out, 1);
    write_u64(out, refs.k);
    write_u64(out, refs.sections.size());
    for (const auto& [name, section] : refs.sections) {
        write_u64(out, name.size());
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        const std::size_t dim =
            section.source_means.empty() ? 0 : section.source_means[0].size();
        write_vecs(out, section.source_means, dim);
        const std::size_t tdim = section.target_refs.empty() ? 0 : section.target_refs[0].size();
        write_vecs(out, section.target_refs, tdim);
    }
    if (!out) {
        throw std::runtime_error("reference model: write failed");
    }
}

ReferenceModel load_reference(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("reference model: cannot open " + path.string());
    }
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "MASDREFS", 8) != 0) {
        throw std::runtime_error("reference model: bad magic");
    }
    if (read_u64(in) != 1) {
        throw std::runtime_error("reference model: unsupported version");
    }
    ReferenceModel refs;
    refs.k = read_u64(in);
    const std::uint64_t n_sections = read_u64(in);
    for (std::uint64_t i = 0; i < n_sections; ++i) {
        const std::uint64_t len = read_u64(in);
        std::string name(len, '\0');
        in.read(name.data(), static_cast<std::streamsize>(len));
        SectionRefs section;
        section.source_means = read_vecs(in);
        section.target_refs = read_vecs(in);
        refs.sections.emplace(std::move(name), std::move(section));
    }
    return refs;
}

} // namespace masd::score
