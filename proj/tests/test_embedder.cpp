#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <unistd.h>

#include <sigmatch/embedder.hpp>
#include <sigmatch/losses.hpp>

#include "oracles.hpp"

using namespace sigmatch;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    static const fs::path dir = [] {
        fs::path d = fs::temp_directory_path() /
                     ("sigmatch_emb_test_" + std::to_string(::getpid()));
        fs::create_directories(d);
        return d;
    }();
    return dir / name;
}

NetworkConfig small_config(Normalization norm, Activation act) {
    NetworkConfig cfg;
    cfg.input_dim = 8;
    cfg.hidden_dim = 6;
    cfg.signature_dim = 4;
    cfg.hidden_activation = act;
    cfg.normalization = norm;
    return cfg;
}

Matrix random_batch(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) m(r, c) = g(rng);
    return m;
}

bool tensors_equal(const EmbeddingNetwork& a, const EmbeddingNetwork& b) {
    return a.w1() == b.w1() && a.b1() == b.b1() && a.w2() == b.w2() && a.b2() == b.b2() &&
           a.bn_gain() == b.bn_gain() && a.bn_bias() == b.bn_bias() &&
           a.bn_running_mean() == b.bn_running_mean() &&
           a.bn_running_var() == b.bn_running_var();
}

/// A composed-gradient test point: batch + triplet list chosen so every
/// hinge sits well away from its boundary (and, for relu, every
/// pre-activation sits away from the kink), keeping central differences
/// valid.
struct FdCase {
    EmbeddingNetwork net;
    Matrix batch;
    std::vector<Triplet> triplets;
    TripletMargin margin{1.0};
};

/// Test-point validity knobs: keep hinges, relu kinks and normalization
/// curvature away from the difference quotient.
struct FdValidity {
    double input_scale = 1.5;
    double row_norm_floor = 0.8;  // l2_scaled
    double bn_var_floor = 0.02;   // batch_norm
    double hinge_floor = 0.08;    // min |violation| per kept triplet
};

FdCase make_fd_case(const NetworkConfig& cfg, std::size_t batch_rows, std::uint64_t base_seed,
                    const FdValidity& valid = {}) {
    std::vector<Triplet> candidates;
    for (std::size_t k = 0; k + 1 < batch_rows; k += 2) {
        for (std::size_t n = 0; n < batch_rows; ++n) {
            if (n == k || n == k + 1) continue;
            candidates.push_back({k, k + 1, n});
        }
    }
    for (std::uint64_t seed = base_seed; seed < base_seed + 500; ++seed) {
        EmbeddingNetwork net = init_kaiming(cfg, seed);
        const Matrix batch =
            random_batch(batch_rows, cfg.input_dim, seed ^ 0xBA7C, valid.input_scale);

        ForwardCache cache;
        const Matrix sig = net.forward(batch, ForwardMode::train, cache);

        bool clean = true;
        if (cfg.hidden_activation == Activation::relu) {
            for (std::size_t b = 0; b < cache.pre_hidden.rows() && clean; ++b)
                for (std::size_t h = 0; h < cache.pre_hidden.cols(); ++h)
                    if (std::abs(cache.pre_hidden(b, h)) < 0.02) {
                        clean = false;
                        break;
                    }
        }
        if (cfg.normalization == Normalization::l2_scaled) {
            for (double n : cache.row_norm)
                if (n < valid.row_norm_floor) clean = false;
        } else {
            for (double v : cache.batch_var)
                if (v < valid.bn_var_floor) clean = false;
        }
        if (!clean) continue;

        TripletMargin margin{1.0};
        std::vector<Triplet> kept;
        std::size_t active = 0;
        for (const Triplet& t : candidates) {
            const double v = squared_distance(sig.row(t.anchor), sig.row(t.positive)) -
                             squared_distance(sig.row(t.anchor), sig.row(t.negative)) +
                             margin.alpha;
            if (std::abs(v) < valid.hinge_floor) continue;
            kept.push_back(t);
            if (v > 0) ++active;
        }
        if (kept.size() < 4 || active < 2) continue;
        return {std::move(net), batch, std::move(kept), margin};
    }
    FAIL("no clean finite-difference case found");
    return {EmbeddingNetwork(cfg), Matrix(), {}, {}};
}

FdCase make_fd_case(Normalization norm, Activation act, std::uint64_t base_seed) {
    return make_fd_case(small_config(norm, act), 6, base_seed);
}

} // namespace

TEST_CASE("kaiming init: default-config weight variance and zero biases") {
    NetworkConfig cfg; // 8192 -> 2048 -> 512
    const EmbeddingNetwork net = init_kaiming(cfg, 7);

    double sum = 0.0, sq = 0.0;
    for (float w : net.w1()) {
        sum += w;
        sq += static_cast<double>(w) * w;
    }
    const double n = static_cast<double>(net.w1().size());
    const double mean = sum / n;
    const double var = sq / n - mean * mean;
    const double target = 2.0 / 8192.0;
    CHECK(std::abs(var - target) <= 0.1 * target);
    CHECK(std::abs(mean) < 1e-4);

    for (float b : net.b1()) CHECK(b == 0.0f);
    for (float b : net.b2()) CHECK(b == 0.0f);
    for (float b : net.bn_bias()) CHECK(b == 0.0f);
    for (float g : net.bn_gain()) CHECK(g == 1.0f);
    for (float v : net.bn_running_var()) CHECK(v == 1.0f);
    CHECK(net.config().norm_scale == std::sqrt(512.0));
}

TEST_CASE("kaiming init: deterministic in seed") {
    const NetworkConfig cfg = small_config(Normalization::batch_norm, Activation::sigmoid);
    const EmbeddingNetwork a = init_kaiming(cfg, 123);
    const EmbeddingNetwork b = init_kaiming(cfg, 123);
    CHECK(tensors_equal(a, b));
    const EmbeddingNetwork c = init_kaiming(cfg, 124);
    CHECK_FALSE(c.w1() == a.w1());
}

TEST_CASE("forward: default config emits B x 512") {
    NetworkConfig cfg;
    const EmbeddingNetwork net = init_kaiming(cfg, 3);
    const Matrix batch = random_batch(3, cfg.input_dim, 11);
    const Matrix out = net.forward(batch, ForwardMode::eval);
    CHECK(out.rows() == 3);
    CHECK(out.cols() == 512);
    CHECK(out.all_finite());
}

TEST_CASE("forward: l2_scaled rows have norm sqrt(d)") {
    NetworkConfig cfg = small_config(Normalization::l2_scaled, Activation::sigmoid);
    const EmbeddingNetwork net = init_kaiming(cfg, 5);
    const Matrix batch = random_batch(9, cfg.input_dim, 21);
    const Matrix out = net.forward(batch, ForwardMode::train);
    const double want = std::sqrt(4.0);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        double norm = 0;
        for (std::size_t c = 0; c < out.cols(); ++c) norm += out(r, c) * out(r, c);
        norm = std::sqrt(norm);
        CHECK(std::abs(norm - want) / want <= 1e-6);
    }
}

TEST_CASE("forward: zero pre-norm row under l2_scaled is flagged, not divided") {
    NetworkConfig cfg = small_config(Normalization::l2_scaled, Activation::identity);
    EmbeddingNetwork net(cfg); // all-zero weights: pre-norm rows are zero
    const Matrix batch = random_batch(3, cfg.input_dim, 2);
    ForwardCache cache;
    const Matrix out = net.forward(batch, ForwardMode::train, cache);
    CHECK(cache.degenerate_rows.size() == 3);
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) CHECK(out(r, c) == 0.0);
}

TEST_CASE("forward: eval mode is bit-deterministic") {
    const NetworkConfig cfg = small_config(Normalization::batch_norm, Activation::tanh);
    const EmbeddingNetwork net = init_kaiming(cfg, 9);
    const Matrix batch = random_batch(4, cfg.input_dim, 13);
    const Matrix a = net.forward(batch, ForwardMode::eval);
    const Matrix b = net.forward(batch, ForwardMode::eval);
    REQUIRE(a.same_shape(b));
    CHECK(std::memcmp(a.data(), b.data(), a.rows() * a.cols() * sizeof(double)) == 0);
}

TEST_CASE("forward: eval rows are independent of their batch") {
    // chunked embedding relies on this: a row embeds identically whether it
    // is sent alone or inside a larger batch
    for (auto norm : {Normalization::batch_norm, Normalization::l2_scaled}) {
        const NetworkConfig cfg = small_config(norm, Activation::sigmoid);
        const EmbeddingNetwork net = init_kaiming(cfg, 29);
        const Matrix batch = random_batch(5, cfg.input_dim, 30);
        const Matrix all = net.forward(batch, ForwardMode::eval);
        for (std::size_t r = 0; r < batch.rows(); ++r) {
            Matrix single(1, cfg.input_dim);
            for (std::size_t c = 0; c < cfg.input_dim; ++c) single(0, c) = batch(r, c);
            const Matrix one = net.forward(single, ForwardMode::eval);
            for (std::size_t c = 0; c < cfg.signature_dim; ++c)
                CHECK(one(0, c) == all(r, c));
        }
    }
}

TEST_CASE("forward: error cases") {
    const NetworkConfig cfg = small_config(Normalization::batch_norm, Activation::sigmoid);
    const EmbeddingNetwork net = init_kaiming(cfg, 1);
    SECTION("single-row train batch under batch_norm") {
        CHECK_THROWS_AS(net.forward(random_batch(1, cfg.input_dim, 1), ForwardMode::train),
                        BatchTooSmall);
        // eval mode embeds single queries fine
        CHECK_NOTHROW(net.forward(random_batch(1, cfg.input_dim, 1), ForwardMode::eval));
    }
    SECTION("width mismatch") {
        CHECK_THROWS_AS(net.forward(random_batch(2, 5, 1), ForwardMode::eval), DimensionError);
    }
    SECTION("non-finite input") {
        Matrix bad = random_batch(2, cfg.input_dim, 1);
        bad(1, 3) = std::numeric_limits<double>::quiet_NaN();
        CHECK_THROWS_AS(net.forward(bad, ForwardMode::eval), ValueError);
    }
    SECTION("empty batch") {
        CHECK_THROWS_AS(net.forward(Matrix(0, cfg.input_dim), ForwardMode::eval), InputError);
    }
}

TEST_CASE("batch_norm train output: per-coordinate mean is bn_bias, variance is gain^2") {
    NetworkConfig cfg = small_config(Normalization::batch_norm, Activation::sigmoid);
    EmbeddingNetwork net = init_kaiming(cfg, 31);
    // nontrivial gains and biases
    auto tensors = net.trainable_tensors();
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(0.5, 2.0);
    for (float& g : *tensors[4]) g = static_cast<float>(u(rng));
    for (float& b : *tensors[5]) b = static_cast<float>(u(rng) - 1.25);
    net.mark_updated();

    const Matrix batch = random_batch(64, cfg.input_dim, 77);
    ForwardCache cache;
    const Matrix out = net.forward(batch, ForwardMode::train, cache);
    const double scale = net.config().norm_scale;
    const double eps = net.config().batch_norm_epsilon;

    for (std::size_t j = 0; j < cfg.signature_dim; ++j) {
        double mean = 0;
        for (std::size_t b = 0; b < out.rows(); ++b) mean += out(b, j) / scale;
        mean /= static_cast<double>(out.rows());
        double var = 0;
        for (std::size_t b = 0; b < out.rows(); ++b) {
            const double d = out(b, j) / scale - mean;
            var += d * d;
        }
        var /= static_cast<double>(out.rows());
        const double gain = net.bn_gain()[j];
        const double bias = net.bn_bias()[j];
        CHECK_THAT(mean, Catch::Matchers::WithinAbs(bias, 1e-9));
        // batch variance of xhat is exactly v/(v+eps), which is 1 up to the
        // epsilon correction
        const double bv = cache.batch_var[j];
        CHECK_THAT(var, Catch::Matchers::WithinRel(gain * gain * bv / (bv + eps), 1e-9));
        CHECK_THAT(var, Catch::Matchers::WithinRel(gain * gain, 1e-3));
    }
}

TEST_CASE("running stats update follows the momentum recurrence") {
    NetworkConfig cfg = small_config(Normalization::batch_norm, Activation::sigmoid);
    EmbeddingNetwork net = init_kaiming(cfg, 41);
    const Matrix batch = random_batch(16, cfg.input_dim, 42);
    ForwardCache cache;
    net.forward(batch, ForwardMode::train, cache);
    const std::vector<float> old_mean = net.bn_running_mean();
    const std::vector<float> old_var = net.bn_running_var();
    net.update_running_stats(cache);
    const double m = cfg.batch_norm_momentum;
    for (std::size_t j = 0; j < cfg.signature_dim; ++j) {
        CHECK(net.bn_running_mean()[j] ==
              static_cast<float>(m * old_mean[j] + (1 - m) * cache.batch_mean[j]));
        CHECK(net.bn_running_var()[j] ==
              static_cast<float>(m * old_var[j] + (1 - m) * cache.batch_var[j]));
    }
}

TEST_CASE("backward: zero signature gradient gives zero parameter gradients") {
    for (auto norm : {Normalization::batch_norm, Normalization::l2_scaled}) {
        const NetworkConfig cfg = small_config(norm, Activation::sigmoid);
        const EmbeddingNetwork net = init_kaiming(cfg, 17);
        const Matrix batch = random_batch(5, cfg.input_dim, 18);
        ForwardCache cache;
        net.forward(batch, ForwardMode::train, cache);
        const Gradients g = net.backward(cache, Matrix(5, cfg.signature_dim, 0.0));
        for (std::size_t i = 0; i < g.w1.rows() * g.w1.cols(); ++i) CHECK(g.w1.data()[i] == 0.0);
        for (double v : g.b1) CHECK(v == 0.0);
        for (std::size_t i = 0; i < g.w2.rows() * g.w2.cols(); ++i) CHECK(g.w2.data()[i] == 0.0);
        for (double v : g.b2) CHECK(v == 0.0);
        for (double v : g.bn_gain) CHECK(v == 0.0);
        for (double v : g.bn_bias) CHECK(v == 0.0);
        for (std::size_t i = 0; i < g.input.rows() * g.input.cols(); ++i)
            CHECK(g.input.data()[i] == 0.0);
    }
}

TEST_CASE("backward: identical calls produce identical gradients") {
    const FdCase c = make_fd_case(Normalization::batch_norm, Activation::sigmoid, 200);
    ForwardCache cache;
    const Matrix sig = c.net.forward(c.batch, ForwardMode::train, cache);
    const auto [rep, grad_sig] = batch_triplet_loss(sig, c.triplets, c.margin);
    const Gradients a = c.net.backward(cache, grad_sig);
    const Gradients b = c.net.backward(cache, grad_sig);
    CHECK(std::memcmp(a.w1.data(), b.w1.data(), a.w1.rows() * a.w1.cols() * sizeof(double)) ==
          0);
    CHECK(a.b1 == b.b1);
    CHECK(a.bn_gain == b.bn_gain);
}

TEST_CASE("backward: stale or wrong-mode caches are rejected") {
    const NetworkConfig cfg = small_config(Normalization::batch_norm, Activation::sigmoid);
    EmbeddingNetwork net = init_kaiming(cfg, 19);
    const Matrix batch = random_batch(4, cfg.input_dim, 20);
    const Matrix grad(4, cfg.signature_dim, 0.0);

    SECTION("eval cache") {
        ForwardCache cache;
        net.forward(batch, ForwardMode::eval, cache);
        CHECK_THROWS_AS(net.backward(cache, grad), StateError);
    }
    SECTION("parameters changed after forward") {
        ForwardCache cache;
        net.forward(batch, ForwardMode::train, cache);
        net.mark_updated();
        CHECK_THROWS_AS(net.backward(cache, grad), StateError);
    }
    SECTION("gradient shape mismatch") {
        ForwardCache cache;
        net.forward(batch, ForwardMode::train, cache);
        CHECK_THROWS_AS(net.backward(cache, Matrix(4, cfg.signature_dim + 1, 0.0)),
                        DimensionError);
    }
}

TEST_CASE("composed network+triplet gradients match finite differences") {
    const std::vector<Normalization> norms = {Normalization::batch_norm,
                                              Normalization::l2_scaled};
    const std::vector<Activation> acts = {Activation::sigmoid, Activation::relu,
                                          Activation::tanh, Activation::identity};
    std::uint64_t base = 1000;
    for (auto norm : norms)
        for (auto act : acts) {
            INFO("normalization=" << to_string(norm) << " activation=" << to_string(act));
            FdCase c = make_fd_case(norm, act, base);
            base += 1000;

            auto loss = [&](const Matrix& sig) {
                return batch_triplet_loss(sig, c.triplets, c.margin).first.total_loss;
            };
            ForwardCache cache;
            const Matrix sig = c.net.forward(c.batch, ForwardMode::train, cache);
            const auto [rep, grad_sig] = batch_triplet_loss(sig, c.triplets, c.margin);
            REQUIRE(rep.active_count >= 2);
            const Gradients analytic = c.net.backward(cache, grad_sig);

            const oracle::FdCheck fd =
                oracle::finite_difference_check(c.net, c.batch, loss, analytic, 1e-4);
            INFO("checked=" << fd.checked << " near_zero=" << fd.near_zero);
            CHECK(fd.max_rel_err <= 1e-4);

            // gradient w.r.t. the input, same oracle treatment
            Matrix batch = c.batch;
            double max_rel = 0;
            for (std::size_t r = 0; r < batch.rows(); ++r)
                for (std::size_t col = 0; col < batch.cols(); ++col) {
                    const double h = 1e-5;
                    const double orig = batch(r, col);
                    batch(r, col) = orig + h;
                    const double fp = loss(c.net.forward(batch, ForwardMode::train));
                    batch(r, col) = orig - h;
                    const double fm = loss(c.net.forward(batch, ForwardMode::train));
                    batch(r, col) = orig;
                    const double fd_g = (fp - fm) / (2 * h);
                    const double an = analytic.input(r, col);
                    const double mag = std::max(std::abs(an), std::abs(fd_g));
                    if (mag > 1e-7) max_rel = std::max(max_rel, std::abs(an - fd_g) / mag);
                }
            CHECK(max_rel <= 1e-4);
        }
}

TEST_CASE("gradients match finite differences at perturbation 1e-3 on the toy config") {
    // 4-row batch of 8-dim inputs; curvature-controlled test points so the
    // h = 1e-3 quotient stays within the 1e-4 tolerance
    for (auto norm : {Normalization::batch_norm, Normalization::l2_scaled}) {
        INFO("normalization=" << to_string(norm));
        NetworkConfig cfg = small_config(norm, Activation::sigmoid);
        FdCase c = make_fd_case(cfg, 4, 4000, {3.0, 2.0, 0.1, 0.35});
        auto loss = [&](const Matrix& sig) {
            return batch_triplet_loss(sig, c.triplets, c.margin).first.total_loss;
        };
        ForwardCache cache;
        const Matrix sig = c.net.forward(c.batch, ForwardMode::train, cache);
        const auto [rep, grad_sig] = batch_triplet_loss(sig, c.triplets, c.margin);
        const Gradients analytic = c.net.backward(cache, grad_sig);
        const oracle::FdCheck fd =
            oracle::finite_difference_check(c.net, c.batch, loss, analytic, 1e-3);
        CHECK(fd.max_rel_err <= 1e-4);
    }
}

TEST_CASE("model save/load: bit-exact round trip") {
    NetworkConfig cfg = small_config(Normalization::batch_norm, Activation::relu);
    cfg.norm_scale = 3.5;
    EmbeddingNetwork net = init_kaiming(cfg, 55);
    // make running stats non-trivial
    ForwardCache cache;
    net.forward(random_batch(8, cfg.input_dim, 56), ForwardMode::train, cache);
    net.update_running_stats(cache);

    const auto p = temp_file("model.f2nn");
    save_model(net, p);
    const EmbeddingNetwork back = load_model(p);
    CHECK(tensors_equal(net, back));
    CHECK(back.config().input_dim == cfg.input_dim);
    CHECK(back.config().norm_scale == 3.5);
    CHECK(back.config().hidden_activation == Activation::relu);

    // save -> load -> save produces identical bytes
    const auto q = temp_file("model2.f2nn");
    save_model(back, q);
    std::ifstream f1(p, std::ios::binary), f2(q, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
}

TEST_CASE("model load: error cases") {
    const NetworkConfig cfg = small_config(Normalization::l2_scaled, Activation::sigmoid);
    const EmbeddingNetwork net = init_kaiming(cfg, 57);
    const auto p = temp_file("model3.f2nn");
    save_model(net, p);

    SECTION("truncated file") {
        std::ifstream in(p, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
        bytes.resize(bytes.size() - 7);
        const auto q = temp_file("trunc.f2nn");
        std::ofstream out(q, std::ios::binary);
        out << bytes;
        out.close();
        CHECK_THROWS_AS(load_model(q), FormatError);
    }
    SECTION("bad magic") {
        const auto q = temp_file("magic.f2nn");
        std::ofstream out(q, std::ios::binary);
        out << "XXXXGARBAGE";
        out.close();
        CHECK_THROWS_AS(load_model(q), FormatError);
    }
    SECTION("dimension mismatch against expectation") {
        NetworkConfig expect = cfg;
        expect.signature_dim = 512; // file holds 4
        CHECK_THROWS_AS(load_model(p, &expect), FormatError);
    }
}
