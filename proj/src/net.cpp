#include "masd/net.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "masd/rng.hpp"

namespace masd::net {

namespace {

void matvec(const Dense& layer, const Vec& x, Vec& y) {
    if (x.size() != layer.in) {
        throw std::invalid_argument("net: input dimension mismatch");
    }
    y.assign(layer.out, 0.0);
    for (std::size_t r = 0; r < layer.out; ++r) {
        const double* wrow = layer.w.data() + r * layer.in;
        double s = 0.0;
        for (std::size_t c = 0; c < layer.in; ++c) {
            s += wrow[c] * x[c];
        }
        y[r] = s;
    }
}

Vec relu(const Vec& x) {
    Vec y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = x[i] > 0.0 ? x[i] : 0.0;
    }
    return y;
}

// Runs one branch, recording pre-activations. Returns the branch output
// (input passes through unchanged when the branch has no layers).
Vec run_branch(const std::vector<Dense>& layers, const Vec& input, std::vector<Vec>* pre) {
    Vec act = input;
    for (const Dense& layer : layers) {
        Vec z;
        matvec(layer, act, z);
        if (pre) {
            pre->push_back(z);
        }
        act = relu(z);
    }
    return act;
}

// Backprop through a branch; returns nothing useful upstream of the input.
void branch_backward(const std::vector<Dense>& layers, const Vec& input,
                     const std::vector<Vec>& pre, Vec grad_out, std::vector<Vec>& grad_accum) {
    for (std::size_t li = layers.size(); li-- > 0;) {
        const Dense& layer = layers[li];
        const Vec& z = pre[li];
        // through the rectifier
        for (std::size_t r = 0; r < layer.out; ++r) {
            if (z[r] <= 0.0) {
                grad_out[r] = 0.0;
            }
        }
        const Vec& in_act = (li == 0) ? input : relu(pre[li - 1]);
        Vec& gw = grad_accum[li];
        Vec grad_in(layer.in, 0.0);
        for (std::size_t r = 0; r < layer.out; ++r) {
            const double gr = grad_out[r];
            if (gr == 0.0) {
                continue;
            }
            double* gwrow = gw.data() + r * layer.in;
            const double* wrow = layer.w.data() + r * layer.in;
            for (std::size_t c = 0; c < layer.in; ++c) {
                gwrow[c] += gr * in_act[c];
                grad_in[c] += gr * wrow[c];
            }
        }
        grad_out = std::move(grad_in);
    }
}

void write_u64(std::ostream& out, std::uint64_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint64_t read_u64(std::istream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    if (!in) {
        throw std::runtime_error("model: truncated file");
    }
    return v;
}

void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
    const std::uint64_t n = read_u64(in);
    if (n > (1ULL << 20)) {
        throw std::runtime_error("model: implausible string length");
    }
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) {
        throw std::runtime_error("model: truncated string");
    }
    return s;
}

void write_dense(std::ostream& out, const Dense& d) {
    write_u64(out, d.out);
    write_u64(out, d.in);
    out.write(reinterpret_cast<const char*>(d.w.data()),
              static_cast<std::streamsize>(d.w.size() * sizeof(double)));
}

Dense read_dense(std::istream& in) {
    Dense d;
    d.out = read_u64(in);
    d.in = read_u64(in);
    if (d.out > (1ULL << 24) || d.in > (1ULL << 24)) {
        throw std::runtime_error("model: implausible tensor shape");
    }
    d.w.resize(d.out * d.in);
    in.read(reinterpret_cast<char*>(d.w.data()),
            static_cast<std::streamsize>(d.w.size() * sizeof(double)));
    if (!in) {
        throw std::runtime_error("model: truncated tensor");
    }
    return d;
}

} // namespace

std::size_t NetSpec::concat_dim() const {
    std::size_t d = 0;
    if (use_spectrogram) {
        d += spec_branch_out();
    }
    if (use_spectrum) {
        d += spectrum_branch_out();
    }
    return d;
}

void NetSpec::validate() const {
    if (!use_spectrogram && !use_spectrum) {
        throw std::invalid_argument("NetSpec: at least one input branch required");
    }
    if (embed_dim < 1) {
        throw std::invalid_argument("NetSpec: embed_dim must be >= 1");
    }
    if (use_spectrogram && (spec_bins < 1 || spec_segments < 1)) {
        throw std::invalid_argument("NetSpec: bad spectrogram input shape");
    }
    if (use_spectrum && spectrum_len < 1) {
        throw std::invalid_argument("NetSpec: bad spectrum input length");
    }
    for (std::size_t w : spec_widths) {
        if (w < 1) {
            throw std::invalid_argument("NetSpec: zero-width layer");
        }
    }
    for (std::size_t w : spectrum_widths) {
        if (w < 1) {
            throw std::invalid_argument("NetSpec: zero-width layer");
        }
    }
}

EmbeddingNet init_weights(const NetSpec& spec, std::uint64_t seed) {
    spec.validate();
    EmbeddingNet net;
    net.spec = spec;
    net.seed = seed;
    Rng rng(Rng::derive(seed, 0x6e65'74));

    auto make_layers = [&rng](std::size_t input, const std::vector<std::size_t>& widths) {
        std::vector<Dense> layers;
        std::size_t fan_in = input;
        for (std::size_t width : widths) {
            Dense d;
            d.out = width;
            d.in = fan_in;
            d.w.resize(width * fan_in);
            const double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
            for (double& w : d.w) {
                w = std_dev * rng.gaussian();
            }
            layers.push_back(std::move(d));
            fan_in = width;
        }
        return layers;
    };

    if (spec.use_spectrogram) {
        net.spec_layers = make_layers(spec.spec_input_dim(), spec.spec_widths);
    }
    if (spec.use_spectrum) {
        net.spectrum_layers = make_layers(spec.spectrum_len, spec.spectrum_widths);
    }
    net.head.out = spec.embed_dim;
    net.head.in = spec.concat_dim();
    net.head.w.resize(net.head.out * net.head.in);
    const double std_dev = std::sqrt(2.0 / static_cast<double>(net.head.in));
    for (double& w : net.head.w) {
        w = std_dev * rng.gaussian();
    }
    return net;
}

Vec pool_spectrogram(const dsp::Grid& g, std::size_t segments) {
    if (segments < 1 || g.cols < segments) {
        throw std::invalid_argument("pool_spectrogram: need at least one frame per segment");
    }
    Vec out(g.rows * segments, 0.0);
    for (std::size_t s = 0; s < segments; ++s) {
        const std::size_t lo = s * g.cols / segments;
        const std::size_t hi = (s + 1) * g.cols / segments;
        const double inv = 1.0 / static_cast<double>(hi - lo);
        for (std::size_t f = 0; f < g.rows; ++f) {
            double m = 0.0;
            for (std::size_t t = lo; t < hi; ++t) {
                m += g.at(f, t);
            }
            out[s * g.rows + f] = m * inv;
        }
    }
    return out;
}

geom::UnitVector forward(const EmbeddingNet& net, const Vec& spec_in, const Vec& spectrum_in,
                         ForwardCache* cache) {
    const NetSpec& spec = net.spec;
    if (spec.use_spectrogram && spec_in.size() != spec.spec_input_dim()) {
        throw std::invalid_argument("forward: spectrogram input shape mismatch");
    }
    if (spec.use_spectrum && spectrum_in.size() != spec.spectrum_len) {
        throw std::invalid_argument("forward: spectrum input shape mismatch");
    }

    if (cache) {
        *cache = ForwardCache{};
        cache->spec_in = spec_in;
        cache->spectrum_in = spectrum_in;
    }

    Vec concat;
    concat.reserve(spec.concat_dim());
    if (spec.use_spectrogram) {
        Vec out = run_branch(net.spec_layers, spec_in, cache ? &cache->spec_pre : nullptr);
        concat.insert(concat.end(), out.begin(), out.end());
    }
    if (spec.use_spectrum) {
        Vec out = run_branch(net.spectrum_layers, spectrum_in,
                             cache ? &cache->spectrum_pre : nullptr);
        concat.insert(concat.end(), out.begin(), out.end());
    }

    Vec prenorm;
    matvec(net.head, concat, prenorm);
    if (!all_finite(prenorm)) {
        throw std::runtime_error("forward: non-finite activations");
    }
    geom::UnitVector emb = geom::normalize(prenorm); // throws on the trivial zero embedding

    if (cache) {
        cache->concat = std::move(concat);
        cache->prenorm = std::move(prenorm);
        cache->prenorm_norm = norm2(cache->prenorm);
        cache->emb = emb.coords();
    }
    return emb;
}

Vec standardize_input(Vec v) {
    if (v.empty()) {
        return v;
    }
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double& x : v) {
        x -= mean;
        var += x * x;
    }
    const double stddev = std::sqrt(var / static_cast<double>(v.size()));
    if (stddev > 1e-12) {
        for (double& x : v) {
            x /= stddev;
        }
    }
    return v;
}

Vec prepare_spectrogram_input(const dsp::Grid& normalized, std::size_t segments) {
    return standardize_input(pool_spectrogram(normalized, segments));
}

Vec prepare_spectrum_input(Vec spectrum) {
    return standardize_input(std::move(spectrum));
}

geom::UnitVector forward(const EmbeddingNet& net, const dsp::Grid& normalized_spec,
                         const Vec& raw_spectrum, ForwardCache* cache) {
    Vec spec_in;
    if (net.spec.use_spectrogram) {
        if (normalized_spec.rows != net.spec.spec_bins) {
            throw std::invalid_argument("forward: spectrogram bin count mismatch");
        }
        spec_in = prepare_spectrogram_input(normalized_spec, net.spec.spec_segments);
    }
    Vec spectrum_in;
    if (net.spec.use_spectrum) {
        spectrum_in = prepare_spectrum_input(raw_spectrum);
    }
    return forward(net, spec_in, spectrum_in, cache);
}

ParamGrads zero_grads(const EmbeddingNet& net) {
    ParamGrads g;
    for (const Dense& d : net.spec_layers) {
        g.spec_layers.emplace_back(d.w.size(), 0.0);
    }
    for (const Dense& d : net.spectrum_layers) {
        g.spectrum_layers.emplace_back(d.w.size(), 0.0);
    }
    g.head.assign(net.head.w.size(), 0.0);
    return g;
}

void backward(const EmbeddingNet& net, const ForwardCache& cache, const Vec& emb_grad,
              ParamGrads& accum) {
    if (emb_grad.size() != net.spec.embed_dim || cache.emb.size() != net.spec.embed_dim) {
        throw std::invalid_argument("backward: gradient shape mismatch or stale cache");
    }

    // normalization Jacobian: (I - ee^T)/||z||
    const double radial = dot(emb_grad, cache.emb);
    Vec grad_prenorm(emb_grad.size());
    for (std::size_t d = 0; d < emb_grad.size(); ++d) {
        grad_prenorm[d] = (emb_grad[d] - radial * cache.emb[d]) / cache.prenorm_norm;
    }

    // head layer
    Vec grad_concat(net.head.in, 0.0);
    for (std::size_t r = 0; r < net.head.out; ++r) {
        const double gr = grad_prenorm[r];
        if (gr == 0.0) {
            continue;
        }
        double* gwrow = accum.head.data() + r * net.head.in;
        const double* wrow = net.head.w.data() + r * net.head.in;
        for (std::size_t c = 0; c < net.head.in; ++c) {
            gwrow[c] += gr * cache.concat[c];
            grad_concat[c] += gr * wrow[c];
        }
    }

    std::size_t offset = 0;
    if (net.spec.use_spectrogram) {
        const std::size_t width = net.spec.spec_branch_out();
        Vec g(grad_concat.begin() + static_cast<std::ptrdiff_t>(offset),
              grad_concat.begin() + static_cast<std::ptrdiff_t>(offset + width));
        branch_backward(net.spec_layers, cache.spec_in, cache.spec_pre, std::move(g),
                        accum.spec_layers);
        offset += width;
    }
    if (net.spec.use_spectrum) {
        const std::size_t width = net.spec.spectrum_branch_out();
        Vec g(grad_concat.begin() + static_cast<std::ptrdiff_t>(offset),
              grad_concat.begin() + static_cast<std::ptrdiff_t>(offset + width));
        branch_backward(net.spectrum_layers, cache.spectrum_in, cache.spectrum_pre, std::move(g),
                        accum.spectrum_layers);
    }
}

void sgd_step(EmbeddingNet& net, const ParamGrads& grads, double lr) {
    auto apply = [lr](Dense& d, const Vec& g) {
        for (std::size_t i = 0; i < d.w.size(); ++i) {
            d.w[i] -= lr * g[i];
        }
    };
    for (std::size_t i = 0; i < net.spec_layers.size(); ++i) {
        apply(net.spec_layers[i], grads.spec_layers[i]);
    }
    for (std::size_t i = 0; i < net.spectrum_layers.size(); ++i) {
        apply(net.spectrum_layers[i], grads.spectrum_layers[i]);
    }
    apply(net.head, grads.head);
}

void add_weight_decay(const EmbeddingNet& net, double coeff, ParamGrads& grads) {
    auto apply = [coeff](const Dense& d, Vec& g) {
        for (std::size_t i = 0; i < d.w.size(); ++i) {
            g[i] += coeff * d.w[i];
        }
    };
    for (std::size_t i = 0; i < net.spec_layers.size(); ++i) {
        apply(net.spec_layers[i], grads.spec_layers[i]);
    }
    for (std::size_t i = 0; i < net.spectrum_layers.size(); ++i) {
        apply(net.spectrum_layers[i], grads.spectrum_layers[i]);
    }
    apply(net.head, grads.head);
}

void save_model(const std::filesystem::path& path, const ModelBundle& bundle) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("model: cannot write " + path.string());
    }
    out.write("MASDMODL", 8);
    write_u64(out, 1); // version

    const NetSpec& s = bundle.net.spec;
    write_u64(out, s.use_spectrogram ? 1 : 0);
    write_u64(out, s.spec_bins);
    write_u64(out, s.spec_segments);
    write_u64(out, s.spec_widths.size());
    for (std::size_t w : s.spec_widths) {
        write_u64(out, w);
    }
    write_u64(out, s.use_spectrum ? 1 : 0);
    write_u64(out, s.spectrum_len);
    write_u64(out, s.spectrum_widths.size());
    for (std::size_t w : s.spectrum_widths) {
        write_u64(out, w);
    }
    write_u64(out, s.embed_dim);
    write_u64(out, bundle.net.seed);

    write_u64(out, bundle.bank_classes);
    write_u64(out, bundle.bank_subclusters);
    write_u64(out, bundle.bank_seed);
    write_string(out, bundle.loss_name);
    write_string(out, bundle.granularity);

    write_u64(out, bundle.net.spec_layers.size());
    for (const Dense& d : bundle.net.spec_layers) {
        write_dense(out, d);
    }
    write_u64(out, bundle.net.spectrum_layers.size());
    for (const Dense& d : bundle.net.spectrum_layers) {
        write_dense(out, d);
    }
    write_dense(out, bundle.net.head);
    if (!out) {
        throw std::runtime_error("model: write failed for " + path.string());
    }
}

ModelBundle load_model(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("model: cannot open " + path.string());
    }
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "MASDMODL", 8) != 0) {
        throw std::runtime_error("model: bad magic in " + path.string());
    }
    if (read_u64(in) != 1) {
        throw std::runtime_error("model: unsupported version");
    }

    ModelBundle b;
    NetSpec& s = b.net.spec;
    s.use_spectrogram = read_u64(in) != 0;
    s.spec_bins = read_u64(in);
    s.spec_segments = read_u64(in);
    s.spec_widths.resize(read_u64(in));
    for (std::size_t& w : s.spec_widths) {
        w = read_u64(in);
    }
    s.use_spectrum = read_u64(in) != 0;
    s.spectrum_len = read_u64(in);
    s.spectrum_widths.resize(read_u64(in));
    for (std::size_t& w : s.spectrum_widths) {
        w = read_u64(in);
    }
    s.embed_dim = read_u64(in);
    b.net.seed = read_u64(in);

    b.bank_classes = read_u64(in);
    b.bank_subclusters = read_u64(in);
    b.bank_seed = read_u64(in);
    b.loss_name = read_string(in);
    b.granularity = read_string(in);

    b.net.spec_layers.resize(read_u64(in));
    for (Dense& d : b.net.spec_layers) {
        d = read_dense(in);
    }
    b.net.spectrum_layers.resize(read_u64(in));
    for (Dense& d : b.net.spectrum_layers) {
        d = read_dense(in);
    }
    b.net.head = read_dense(in);
    return b;
}

} // namespace masd::net
