#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "masd/net.hpp"
#include "masd/rng.hpp"

using namespace masd;
namespace fs = std::filesystem;

namespace {

net::NetSpec tiny_spec(std::size_t embed_dim = 5) {
    net::NetSpec spec;
    spec.spec_bins = 4;
    spec.spec_segments = 2;
    spec.spec_widths = {6, 5};
    spec.spectrum_len = 7;
    spec.spectrum_widths = {5};
    spec.embed_dim = embed_dim;
    return spec;
}

std::pair<Vec, Vec> random_inputs(const net::NetSpec& spec, Rng& rng) {
    Vec a(spec.spec_input_dim());
    Vec b(spec.spectrum_len);
    for (double& v : a) {
        v = rng.gaussian();
    }
    for (double& v : b) {
        v = rng.gaussian();
    }
    return {a, b};
}

// flattened view over all parameters for the finite-difference loop
std::vector<double*> param_ptrs(net::EmbeddingNet& model) {
    std::vector<double*> ptrs;
    for (auto& layer : model.spec_layers) {
        for (double& w : layer.w) {
            ptrs.push_back(&w);
        }
    }
    for (auto& layer : model.spectrum_layers) {
        for (double& w : layer.w) {
            ptrs.push_back(&w);
        }
    }
    for (double& w : model.head.w) {
        ptrs.push_back(&w);
    }
    return ptrs;
}

Vec flatten(const net::ParamGrads& g) {
    Vec out;
    for (const auto& t : g.spec_layers) {
        out.insert(out.end(), t.begin(), t.end());
    }
    for (const auto& t : g.spectrum_layers) {
        out.insert(out.end(), t.begin(), t.end());
    }
    out.insert(out.end(), g.head.begin(), g.head.end());
    return out;
}

} // namespace

TEST_SUITE("net") {

TEST_CASE("seeded initialization is deterministic and bias-free") {
    const auto spec = tiny_spec();
    const auto a = net::init_weights(spec, 5);
    const auto b = net::init_weights(spec, 5);
    CHECK(a.head.w == b.head.w);
    for (std::size_t i = 0; i < a.spec_layers.size(); ++i) {
        CHECK(a.spec_layers[i].w == b.spec_layers[i].w);
    }
    const auto c = net::init_weights(spec, 6);
    CHECK(a.head.w != c.head.w);
}

TEST_CASE("output is unit-norm for any valid weights") {
    Rng rng(17);
    const auto spec = tiny_spec();
    for (int i = 0; i < 20; ++i) {
        const auto model = net::init_weights(spec, rng.next_u64());
        const auto [a, b] = random_inputs(spec, rng);
        const auto emb = net::forward(model, a, b);
        CHECK(std::abs(norm2(emb.coords()) - 1.0) <= 1e-9);
    }
}

TEST_CASE("zero weights hit the trivial-solution guard") {
    const auto spec = tiny_spec();
    auto model = net::init_weights(spec, 3);
    for (auto& layer : model.spec_layers) {
        std::fill(layer.w.begin(), layer.w.end(), 0.0);
    }
    for (auto& layer : model.spectrum_layers) {
        std::fill(layer.w.begin(), layer.w.end(), 0.0);
    }
    std::fill(model.head.w.begin(), model.head.w.end(), 0.0);

    Rng rng(9);
    const auto [a, b] = random_inputs(spec, rng);
    CHECK_THROWS_AS((void)net::forward(model, a, b), std::domain_error);

    // zero input with nonzero weights collapses the same way
    const auto live = net::init_weights(spec, 4);
    const Vec za(spec.spec_input_dim(), 0.0);
    const Vec zb(spec.spectrum_len, 0.0);
    CHECK_THROWS_AS((void)net::forward(live, za, zb), std::domain_error);
}

TEST_CASE("positive homogeneity of the bias-free rectifier net") {
    Rng rng(23);
    const auto spec = tiny_spec();
    const auto model = net::init_weights(spec, rng.next_u64());
    const auto [a, b] = random_inputs(spec, rng);

    net::ForwardCache base_cache;
    const auto base = net::forward(model, a, b, &base_cache);

    const double kappa = 3.7;
    Vec sa = a, sb = b;
    scale_inplace(sa, kappa);
    scale_inplace(sb, kappa);
    net::ForwardCache scaled_cache;
    const auto scaled = net::forward(model, sa, sb, &scaled_cache);

    for (std::size_t d = 0; d < spec.embed_dim; ++d) {
        CHECK(scaled_cache.prenorm[d] ==
              doctest::Approx(kappa * base_cache.prenorm[d]).epsilon(1e-9));
        CHECK(scaled.coords()[d] == doctest::Approx(base.coords()[d]).epsilon(1e-9));
    }
}

TEST_CASE("backward gradients") {
    Rng rng(31);
    const auto spec = tiny_spec();
    auto model = net::init_weights(spec, rng.next_u64());
    const auto [a, b] = random_inputs(spec, rng);

    SUBCASE("zero embedding gradient gives zero parameter gradients") {
        net::ForwardCache cache;
        (void)net::forward(model, a, b, &cache);
        auto grads = net::zero_grads(model);
        net::backward(model, cache, Vec(spec.embed_dim, 0.0), grads);
        for (double v : flatten(grads)) {
            CHECK(v == 0.0);
        }
    }
    SUBCASE("gradient parallel to the embedding is projected away") {
        net::ForwardCache cache;
        const auto emb = net::forward(model, a, b, &cache);
        auto grads = net::zero_grads(model);
        Vec parallel = emb.coords();
        scale_inplace(parallel, 2.5);
        net::backward(model, cache, parallel, grads);
        for (double v : flatten(grads)) {
            CHECK(std::abs(v) <= 1e-12);
        }
    }
    SUBCASE("matches finite differences through a scalar readout") {
        // scalar loss: dot(emb, probe) so the FD only needs forward passes
        Vec probe(spec.embed_dim);
        for (double& v : probe) {
            v = rng.gaussian();
        }
        net::ForwardCache cache;
        (void)net::forward(model, a, b, &cache);
        auto grads = net::zero_grads(model);
        net::backward(model, cache, probe, grads);
        const Vec analytic = flatten(grads);

        const auto ptrs = param_ptrs(model);
        REQUIRE(ptrs.size() == analytic.size());
        const double h = 1e-5;
        double na = 0.0, nf = 0.0, nd = 0.0;
        for (std::size_t i = 0; i < ptrs.size(); ++i) {
            const double keep = *ptrs[i];
            *ptrs[i] = keep + h;
            const double up = dot(net::forward(model, a, b).coords(), probe);
            *ptrs[i] = keep - h;
            const double down = dot(net::forward(model, a, b).coords(), probe);
            *ptrs[i] = keep;
            const double fd = (up - down) / (2.0 * h);
            na += analytic[i] * analytic[i];
            nf += fd * fd;
            nd += (analytic[i] - fd) * (analytic[i] - fd);
        }
        const double rel = std::sqrt(nd) / std::max(std::sqrt(na), std::sqrt(nf));
        CHECK(rel <= 1e-4);
    }
}

TEST_CASE("He initialization preserves activation scale") {
    // square rectifier layer: E||relu(Wx)||^2 == ||x||^2
    Rng rng(47);
    net::NetSpec spec;
    spec.use_spectrogram = false;
    spec.spectrum_len = 64;
    spec.spectrum_widths = {64};
    spec.embed_dim = 8;

    Vec x(64);
    for (double& v : x) {
        v = rng.gaussian();
    }
    const double in_norm = dot(x, x);

    double mean_ratio = 0.0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        const auto model = net::init_weights(spec, rng.next_u64());
        const auto& layer = model.spectrum_layers[0];
        double out_norm = 0.0;
        for (std::size_t r = 0; r < layer.out; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < layer.in; ++c) {
                s += layer.w[r * layer.in + c] * x[c];
            }
            if (s > 0.0) {
                out_norm += s * s;
            }
        }
        mean_ratio += out_norm / in_norm;
    }
    mean_ratio /= trials;
    CHECK(mean_ratio == doctest::Approx(1.0).epsilon(0.2));
}

TEST_CASE("grid overload matches the prepared-input path") {
    Rng rng(71);
    net::NetSpec spec = tiny_spec();
    spec.spec_bins = 5;
    spec.spec_segments = 3;
    const auto model = net::init_weights(spec, rng.next_u64());

    dsp::Grid grid(5, 9);
    for (double& v : grid.v) {
        v = rng.gaussian();
    }
    Vec spectrum(spec.spectrum_len);
    for (double& v : spectrum) {
        v = rng.gaussian();
    }

    const auto via_grid = net::forward(model, grid, spectrum);
    const auto via_prepared =
        net::forward(model, net::prepare_spectrogram_input(grid, spec.spec_segments),
                     net::prepare_spectrum_input(spectrum));
    CHECK(via_grid.coords() == via_prepared.coords());
}

TEST_CASE("standardized inputs have zero mean and unit variance") {
    Rng rng(73);
    Vec v(200);
    for (double& x : v) {
        x = 5.0 + 2.0 * rng.gaussian();
    }
    const Vec s = net::standardize_input(v);
    double mean = 0.0;
    for (double x : s) {
        mean += x;
    }
    mean /= static_cast<double>(s.size());
    double var = 0.0;
    for (double x : s) {
        var += (x - mean) * (x - mean);
    }
    var /= static_cast<double>(s.size());
    CHECK(std::abs(mean) <= 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-9));

    // constant vectors map to zeros instead of dividing by zero
    const Vec flat = net::standardize_input(Vec(10, 3.5));
    for (double x : flat) {
        CHECK(x == 0.0);
    }
}

TEST_CASE("spectrogram pooling shape and content") {
    dsp::Grid g(2, 6);
    for (std::size_t t = 0; t < 6; ++t) {
        g.at(0, t) = static_cast<double>(t);
        g.at(1, t) = 10.0;
    }
    const Vec pooled = net::pool_spectrogram(g, 3);
    REQUIRE(pooled.size() == 6);
    // segment-major: [seg0 f0, seg0 f1, seg1 f0, ...]
    CHECK(pooled[0] == doctest::Approx(0.5));
    CHECK(pooled[1] == doctest::Approx(10.0));
    CHECK(pooled[2] == doctest::Approx(2.5));
    CHECK(pooled[4] == doctest::Approx(4.5));
    CHECK_THROWS(net::pool_spectrogram(g, 7));
}

TEST_CASE("model checkpoint round trip") {
    Rng rng(61);
    const auto spec = tiny_spec();
    const auto model = net::init_weights(spec, rng.next_u64());

    net::ModelBundle bundle;
    bundle.net = model;
    bundle.bank_classes = 4;
    bundle.bank_subclusters = 16;
    bundle.bank_seed = 123;
    bundle.loss_name = "adacos";
    bundle.granularity = "type-section";

    const fs::path path = fs::temp_directory_path() / "masd_model_roundtrip.bin";
    net::save_model(path, bundle);

    // structural: the checkpoint holds weight matrices only, no bias slots
    std::size_t weight_bytes = 0;
    std::size_t tensor_count = 1; // head
    for (const auto& layer : model.spec_layers) {
        weight_bytes += layer.w.size() * sizeof(double);
        ++tensor_count;
    }
    for (const auto& layer : model.spectrum_layers) {
        weight_bytes += layer.w.size() * sizeof(double);
        ++tensor_count;
    }
    weight_bytes += model.head.w.size() * sizeof(double);
    const std::size_t header_bytes = 8 + 8 /*version*/ + 8 * 12 /*spec+seeds+counts*/ +
                                     8 * spec.spec_widths.size() +
                                     8 * spec.spectrum_widths.size() +
                                     (8 + bundle.loss_name.size()) +
                                     (8 + bundle.granularity.size()) + 8 * 2 /*layer counts*/ +
                                     16 * tensor_count /*shapes*/;
    CHECK(fs::file_size(path) == header_bytes + weight_bytes);

    const auto back = net::load_model(path);
    CHECK(back.net.head.w == model.head.w);
    CHECK(back.net.spec.embed_dim == spec.embed_dim);
    CHECK(back.bank_classes == 4);
    CHECK(back.bank_subclusters == 16);
    CHECK(back.bank_seed == 123);
    CHECK(back.loss_name == "adacos");
    CHECK(back.granularity == "type-section");

    Rng rng2(62);
    const auto [a, b] = random_inputs(spec, rng2);
    const auto e1 = net::forward(model, a, b);
    const auto e2 = net::forward(back.net, a, b);
    CHECK(e1.coords() == e2.coords());
}

} // TEST_SUITE
