// The 2-layer embedding network: linear -> activation -> linear -> batch
// normalization or scaled L2 normalization, emitting fixed-norm signatures.
// Forward never mutates the network; the trainer applies running-stat
// updates and parameter steps explicitly.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sigmatch/core.hpp"

namespace sigmatch {

enum class Activation : std::uint32_t { sigmoid = 0, relu = 1, tanh = 2, identity = 3 };
enum class Normalization : std::uint32_t { batch_norm = 0, l2_scaled = 1 };
enum class ForwardMode { train, eval };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::sigmoid: return "sigmoid";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
        case Activation::identity: return "identity";
    }
    return "?";
}

inline const char* to_string(Normalization n) {
    return n == Normalization::batch_norm ? "batch_norm" : "l2_scaled";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "sigmoid") return Activation::sigmoid;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    if (s == "identity") return Activation::identity;
    throw InputError("unknown activation '" + s + "'");
}

inline Normalization normalization_from_string(const std::string& s) {
    if (s == "batch_norm") return Normalization::batch_norm;
    if (s == "l2_scaled") return Normalization::l2_scaled;
    throw InputError("unknown normalization '" + s + "'");
}

struct NetworkConfig {
    std::size_t input_dim = 8192;
    std::size_t hidden_dim = 2048;
    std::size_t signature_dim = 512;
    Activation hidden_activation = Activation::sigmoid;
    Normalization normalization = Normalization::batch_norm;
    double norm_scale = 0.0; // <= 0 means sqrt(signature_dim)
    double batch_norm_epsilon = 1e-5;
    double batch_norm_momentum = 0.9;

    double resolved_norm_scale() const {
        return norm_scale > 0.0 ? norm_scale : std::sqrt(static_cast<double>(signature_dim));
    }

    void validate() const {
        if (input_dim == 0 || hidden_dim == 0 || signature_dim == 0)
            throw InputError("network dimensions must be positive");
        if (!(batch_norm_epsilon > 0.0)) throw InputError("batch_norm_epsilon must be positive");
        if (!(batch_norm_momentum > 0.0) || !(batch_norm_momentum < 1.0))
            throw InputError("batch_norm_momentum must lie in (0,1)");
        if (!std::isfinite(norm_scale)) throw InputError("norm_scale must be finite");
    }
};

/// Per-batch state captured by a train-mode forward pass, consumed by
/// backward(). Holds everything the analytic gradients need.
struct ForwardCache {
    ForwardMode mode = ForwardMode::train;
    std::uint64_t revision = 0;
    Matrix input;      // B x input_dim
    Matrix pre_hidden; // B x hidden_dim, before activation
    Matrix hidden;     // B x hidden_dim, after activation
    Matrix pre_norm;   // B x signature_dim, second linear output
    Matrix normalized; // B x signature_dim, after normalization, before gain/bias/scale
    std::vector<double> batch_mean;    // batch_norm train
    std::vector<double> batch_var;     // biased
    std::vector<double> inv_std;       // 1/sqrt(var + eps)
    std::vector<double> row_norm;      // l2_scaled: ||pre_norm row||
    std::vector<std::size_t> degenerate_rows; // l2_scaled rows with zero norm
};

struct Gradients {
    Matrix w1; // hidden x input
    std::vector<double> b1;
    Matrix w2; // signature x hidden
    std::vector<double> b2;
    std::vector<double> bn_gain;
    std::vector<double> bn_bias;
    Matrix input; // B x input_dim
};

class EmbeddingNetwork {
public:
    explicit EmbeddingNetwork(NetworkConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        cfg_.norm_scale = cfg_.resolved_norm_scale();
        w1_.assign(cfg_.hidden_dim * cfg_.input_dim, 0.0f);
        b1_.assign(cfg_.hidden_dim, 0.0f);
        w2_.assign(cfg_.signature_dim * cfg_.hidden_dim, 0.0f);
        b2_.assign(cfg_.signature_dim, 0.0f);
        bn_gain_.assign(cfg_.signature_dim, 1.0f);
        bn_bias_.assign(cfg_.signature_dim, 0.0f);
        bn_running_mean_.assign(cfg_.signature_dim, 0.0f);
        bn_running_var_.assign(cfg_.signature_dim, 1.0f);
    }

    const NetworkConfig& config() const { return cfg_; }
    std::uint64_t revision() const { return revision_; }

    const std::vector<float>& w1() const { return w1_; }
    const std::vector<float>& b1() const { return b1_; }
    const std::vector<float>& w2() const { return w2_; }
    const std::vector<float>& b2() const { return b2_; }
    const std::vector<float>& bn_gain() const { return bn_gain_; }
    const std::vector<float>& bn_bias() const { return bn_bias_; }
    const std::vector<float>& bn_running_mean() const { return bn_running_mean_; }
    const std::vector<float>& bn_running_var() const { return bn_running_var_; }

    /// Trainable tensors in declared order: w1, b1, w2, b2, bn_gain, bn_bias.
    /// Callers that mutate through these must call mark_updated().
    std::array<std::vector<float>*, 6> trainable_tensors() {
        return {&w1_, &b1_, &w2_, &b2_, &bn_gain_, &bn_bias_};
    }

    void mark_updated() { ++revision_; }

    /// Folds a train-mode batch's statistics into the running estimates:
    /// running = momentum * running + (1 - momentum) * batch.
    void update_running_stats(const ForwardCache& cache) {
        if (cache.mode != ForwardMode::train || cache.batch_mean.empty())
            throw StateError("running stats require a train-mode batch_norm cache");
        const double m = cfg_.batch_norm_momentum;
        for (std::size_t j = 0; j < cfg_.signature_dim; ++j) {
            bn_running_mean_[j] =
                static_cast<float>(m * bn_running_mean_[j] + (1.0 - m) * cache.batch_mean[j]);
            bn_running_var_[j] =
                static_cast<float>(m * bn_running_var_[j] + (1.0 - m) * cache.batch_var[j]);
        }
        ++revision_;
    }

    void set_running_stats(std::span<const float> mean, std::span<const float> var) {
        if (mean.size() != cfg_.signature_dim || var.size() != cfg_.signature_dim)
            throw DimensionError("running statistic size does not match signature_dim");
        for (float v : var)
            if (!(v > 0.0f)) throw ValueError("running variance must be strictly positive");
        std::copy(mean.begin(), mean.end(), bn_running_mean_.begin());
        std::copy(var.begin(), var.end(), bn_running_var_.begin());
        ++revision_;
    }

    Matrix forward(const Matrix& batch, ForwardMode mode) const {
        ForwardCache scratch;
        return forward_impl(batch, mode, scratch, /*want_cache=*/false);
    }

    Matrix forward(const Matrix& batch, ForwardMode mode, ForwardCache& cache) const {
        return forward_impl(batch, mode, cache, /*want_cache=*/true);
    }

    /// Analytic gradients of a scalar loss given d(loss)/d(signatures).
    /// The cache must come from a train-mode forward on this exact
    /// parameter state.
    Gradients backward(const ForwardCache& cache, const Matrix& grad_signatures) const {
        if (cache.mode != ForwardMode::train)
            throw StateError("backward requires a train-mode cache");
        if (cache.revision != revision_)
            throw StateError("cache is stale: parameters changed since forward");
        const std::size_t B = cache.input.rows();
        const std::size_t D = cfg_.input_dim;
        const std::size_t H = cfg_.hidden_dim;
        const std::size_t S = cfg_.signature_dim;
        if (grad_signatures.rows() != B || grad_signatures.cols() != S)
            throw DimensionError("grad_signatures shape does not match the cached batch");

        const double scale = cfg_.norm_scale;
        Matrix d_pre_norm(B, S);

        if (cfg_.normalization == Normalization::batch_norm) {
            // y = scale * (gain .* xhat + bias); backprop through batch stats.
            std::vector<double> sum_dxhat(S, 0.0), sum_dxhat_xhat(S, 0.0);
            Matrix d_xhat(B, S);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t j = 0; j < S; ++j) {
                    const double dy = scale * grad_signatures(b, j);
                    const double dxh = dy * bn_gain_[j];
                    d_xhat(b, j) = dxh;
                    sum_dxhat[j] += dxh;
                    sum_dxhat_xhat[j] += dxh * cache.normalized(b, j);
                }
            }
            const double inv_b = 1.0 / static_cast<double>(B);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < S; ++j)
                    d_pre_norm(b, j) = cache.inv_std[j] * inv_b *
                                       (static_cast<double>(B) * d_xhat(b, j) - sum_dxhat[j] -
                                        cache.normalized(b, j) * sum_dxhat_xhat[j]);
        } else {
            // y = scale * z / ||z||; rows with zero norm stay at zero.
            for (std::size_t b = 0; b < B; ++b) {
                const double n = cache.row_norm[b];
                if (n == 0.0) {
                    for (std::size_t j = 0; j < S; ++j) d_pre_norm(b, j) = 0.0;
                    continue;
                }
                double dot = 0.0;
                for (std::size_t j = 0; j < S; ++j)
                    dot += grad_signatures(b, j) * cache.normalized(b, j);
                const double k = scale / n;
                for (std::size_t j = 0; j < S; ++j)
                    d_pre_norm(b, j) =
                        k * (grad_signatures(b, j) - dot * cache.normalized(b, j));
            }
        }

        Gradients g;
        g.b2.assign(S, 0.0);
        g.bn_gain.assign(S, 0.0);
        g.bn_bias.assign(S, 0.0);
        if (cfg_.normalization == Normalization::batch_norm) {
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < S; ++j) {
                    const double dy = scale * grad_signatures(b, j);
                    g.bn_bias[j] += dy;
                    g.bn_gain[j] += dy * cache.normalized(b, j);
                }
        }

        // d_pre_norm -> W2, b2, hidden
        g.w2 = Matrix(S, H);
        Matrix d_hidden(B, H);
        parallel_for(S, [&](std::size_t j0, std::size_t j1) {
            for (std::size_t j = j0; j < j1; ++j)
                for (std::size_t b = 0; b < B; ++b) {
                    const double d = d_pre_norm(b, j);
                    for (std::size_t h = 0; h < H; ++h) g.w2(j, h) += d * cache.hidden(b, h);
                }
        });
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < S; ++j) g.b2[j] += d_pre_norm(b, j);
        parallel_for(B, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b)
                for (std::size_t h = 0; h < H; ++h) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < S; ++j)
                        acc += d_pre_norm(b, j) * w2_[j * H + h];
                    d_hidden(b, h) = acc;
                }
        });

        // Through the activation.
        Matrix d_pre_hidden(B, H);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h)
                d_pre_hidden(b, h) =
                    d_hidden(b, h) *
                    activation_derivative(cache.pre_hidden(b, h), cache.hidden(b, h));

        g.b1.assign(H, 0.0);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < H; ++h) g.b1[h] += d_pre_hidden(b, h);
        g.w1 = Matrix(H, D);
        parallel_for(H, [&](std::size_t h0, std::size_t h1) {
            for (std::size_t h = h0; h < h1; ++h)
                for (std::size_t b = 0; b < B; ++b) {
                    const double d = d_pre_hidden(b, h);
                    for (std::size_t c = 0; c < D; ++c) g.w1(h, c) += d * cache.input(b, c);
                }
        });
        g.input = Matrix(B, D);
        parallel_for(B, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b)
                for (std::size_t c = 0; c < D; ++c) {
                    double acc = 0.0;
                    for (std::size_t h = 0; h < H; ++h)
                        acc += d_pre_hidden(b, h) * w1_[h * D + c];
                    g.input(b, c) = acc;
                }
        });
        return g;
    }

private:
    double activation_derivative(double pre, double post) const {
        switch (cfg_.hidden_activation) {
            case Activation::sigmoid: return post * (1.0 - post);
            case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
            case Activation::tanh: return 1.0 - post * post;
            case Activation::identity: return 1.0;
        }
        return 0.0;
    }

    static double apply_activation(Activation a, double x) {
        switch (a) {
            case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
            case Activation::relu: return x > 0.0 ? x : 0.0;
            case Activation::tanh: return std::tanh(x);
            case Activation::identity: return x;
        }
        return x;
    }

    Matrix forward_impl(const Matrix& batch, ForwardMode mode, ForwardCache& cache,
                        bool want_cache) const {
        const std::size_t B = batch.rows();
        const std::size_t D = cfg_.input_dim;
        const std::size_t H = cfg_.hidden_dim;
        const std::size_t S = cfg_.signature_dim;
        if (B == 0) throw InputError("empty batch");
        if (batch.cols() != D)
            throw DimensionError("batch width " + std::to_string(batch.cols()) +
                                 " does not match input_dim " + std::to_string(D));
        if (!batch.all_finite()) throw ValueError("non-finite value in input batch");
        if (mode == ForwardMode::train && cfg_.normalization == Normalization::batch_norm &&
            B < 2)
            throw BatchTooSmall("batch_norm training requires a batch of at least 2");

        Matrix pre_hidden(B, H), hidden(B, H);
        parallel_for(B, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b) {
                const auto x = batch.row(b);
                for (std::size_t h = 0; h < H; ++h) {
                    const float* wrow = w1_.data() + h * D;
                    double acc = b1_[h];
                    for (std::size_t c = 0; c < D; ++c) acc += x[c] * wrow[c];
                    pre_hidden(b, h) = acc;
                    hidden(b, h) = apply_activation(cfg_.hidden_activation, acc);
                }
            }
        });

        Matrix pre_norm(B, S);
        parallel_for(B, [&](std::size_t b0, std::size_t b1) {
            for (std::size_t b = b0; b < b1; ++b)
                for (std::size_t j = 0; j < S; ++j) {
                    const float* wrow = w2_.data() + j * H;
                    double acc = b2_[j];
                    for (std::size_t h = 0; h < H; ++h) acc += hidden(b, h) * wrow[h];
                    pre_norm(b, j) = acc;
                }
        });

        Matrix out(B, S);
        Matrix normalized(B, S);
        const double scale = cfg_.norm_scale;

        if (cfg_.normalization == Normalization::batch_norm) {
            std::vector<double> mean(S, 0.0), var(S, 0.0), inv_std(S, 0.0);
            if (mode == ForwardMode::train) {
                const double inv_b = 1.0 / static_cast<double>(B);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t j = 0; j < S; ++j) mean[j] += pre_norm(b, j);
                for (std::size_t j = 0; j < S; ++j) mean[j] *= inv_b;
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t j = 0; j < S; ++j) {
                        const double d = pre_norm(b, j) - mean[j];
                        var[j] += d * d;
                    }
                for (std::size_t j = 0; j < S; ++j) var[j] *= inv_b;
            } else {
                for (std::size_t j = 0; j < S; ++j) {
                    mean[j] = bn_running_mean_[j];
                    var[j] = bn_running_var_[j];
                }
            }
            for (std::size_t j = 0; j < S; ++j)
                inv_std[j] = 1.0 / std::sqrt(var[j] + cfg_.batch_norm_epsilon);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t j = 0; j < S; ++j) {
                    const double xhat = (pre_norm(b, j) - mean[j]) * inv_std[j];
                    normalized(b, j) = xhat;
                    out(b, j) = scale * (bn_gain_[j] * xhat + bn_bias_[j]);
                }
            if (want_cache && mode == ForwardMode::train) {
                cache.batch_mean = std::move(mean);
                cache.batch_var = std::move(var);
                cache.inv_std = std::move(inv_std);
            }
        } else {
            std::vector<double> row_norm(B, 0.0);
            std::vector<std::size_t> degenerate;
            for (std::size_t b = 0; b < B; ++b) {
                double s = 0.0;
                for (std::size_t j = 0; j < S; ++j) s += pre_norm(b, j) * pre_norm(b, j);
                const double n = std::sqrt(s);
                row_norm[b] = n;
                if (n == 0.0) {
                    degenerate.push_back(b);
                    for (std::size_t j = 0; j < S; ++j) {
                        normalized(b, j) = 0.0;
                        out(b, j) = 0.0;
                    }
                } else {
                    for (std::size_t j = 0; j < S; ++j) {
                        const double u = pre_norm(b, j) / n;
                        normalized(b, j) = u;
                        out(b, j) = scale * u;
                    }
                }
            }
            if (want_cache) {
                cache.row_norm = std::move(row_norm);
                cache.degenerate_rows = std::move(degenerate);
            }
        }

        if (want_cache) {
            cache.mode = mode;
            cache.revision = revision_;
            cache.input = batch;
            cache.pre_hidden = std::move(pre_hidden);
            cache.hidden = std::move(hidden);
            cache.pre_norm = std::move(pre_norm);
            cache.normalized = std::move(normalized);
        }
        return out;
    }

    NetworkConfig cfg_;
    std::vector<float> w1_, b1_, w2_, b2_;
    std::vector<float> bn_gain_, bn_bias_, bn_running_mean_, bn_running_var_;
    std::uint64_t revision_ = 0;
};

/// Kaiming-normal weights (variance 2/fan_in), zero biases, unit gains.
inline EmbeddingNetwork init_kaiming(const NetworkConfig& cfg, std::uint64_t seed) {
    EmbeddingNetwork net(cfg);
    std::mt19937_64 rng(seed);
    auto tensors = net.trainable_tensors();
    const auto& c = net.config();
    {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(c.input_dim)));
        for (float& w : *tensors[0]) w = static_cast<float>(dist(rng));
    }
    {
        std::normal_distribution<double> dist(0.0,
                                              std::sqrt(2.0 / static_cast<double>(c.hidden_dim)));
        for (float& w : *tensors[2]) w = static_cast<float>(dist(rng));
    }
    net.mark_updated();
    return net;
}

namespace detail {
inline constexpr char kModelMagic[5] = "F2NN";
inline constexpr std::uint32_t kModelVersion = 1;

inline void write_tensor(std::ostream& out, const std::vector<float>& t) {
    for (float v : t) io::write_f32(out, v);
}

inline void read_tensor(std::istream& in, std::vector<float>& t) {
    for (float& v : t) {
        v = io::read_f32(in);
        if (!std::isfinite(v)) throw FormatError("non-finite parameter in model file");
    }
}
} // namespace detail

inline void save_model(const EmbeddingNetwork& net, const std::filesystem::path& path) {
    write_file_atomic(path, [&](std::ostream& out) {
        const auto& c = net.config();
        io::write_magic(out, detail::kModelMagic);
        io::write_u32(out, detail::kModelVersion);
        io::write_u32(out, static_cast<std::uint32_t>(c.input_dim));
        io::write_u32(out, static_cast<std::uint32_t>(c.hidden_dim));
        io::write_u32(out, static_cast<std::uint32_t>(c.signature_dim));
        io::write_u32(out, static_cast<std::uint32_t>(c.hidden_activation));
        io::write_u32(out, static_cast<std::uint32_t>(c.normalization));
        io::write_f64(out, c.norm_scale);
        io::write_f64(out, c.batch_norm_epsilon);
        io::write_f64(out, c.batch_norm_momentum);
        detail::write_tensor(out, net.w1());
        detail::write_tensor(out, net.b1());
        detail::write_tensor(out, net.w2());
        detail::write_tensor(out, net.b2());
        detail::write_tensor(out, net.bn_gain());
        detail::write_tensor(out, net.bn_bias());
        detail::write_tensor(out, net.bn_running_mean());
        detail::write_tensor(out, net.bn_running_var());
    });
}

/// Loads a model; when `expect` is given, its dimensions must match the
/// file header exactly.
inline EmbeddingNetwork load_model(const std::filesystem::path& path,
                                   const NetworkConfig* expect = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open model: " + path.string());
    io::expect_magic(in, detail::kModelMagic, "model");
    const std::uint32_t version = io::read_u32(in);
    if (version != detail::kModelVersion)
        throw FormatError("unsupported model version " + std::to_string(version));
    NetworkConfig cfg;
    cfg.input_dim = io::read_u32(in);
    cfg.hidden_dim = io::read_u32(in);
    cfg.signature_dim = io::read_u32(in);
    const std::uint32_t act = io::read_u32(in);
    if (act > static_cast<std::uint32_t>(Activation::identity))
        throw FormatError("unknown activation code in model file");
    cfg.hidden_activation = static_cast<Activation>(act);
    const std::uint32_t norm = io::read_u32(in);
    if (norm > static_cast<std::uint32_t>(Normalization::l2_scaled))
        throw FormatError("unknown normalization code in model file");
    cfg.normalization = static_cast<Normalization>(norm);
    cfg.norm_scale = io::read_f64(in);
    cfg.batch_norm_epsilon = io::read_f64(in);
    cfg.batch_norm_momentum = io::read_f64(in);
    if (expect) {
        if (expect->input_dim != cfg.input_dim || expect->hidden_dim != cfg.hidden_dim ||
            expect->signature_dim != cfg.signature_dim)
            throw FormatError("model dimensions do not match the expected configuration");
    }
    try {
        cfg.validate();
    } catch (const InputError& e) {
        throw FormatError(std::string("invalid model configuration: ") + e.what());
    }

    EmbeddingNetwork net(cfg);
    auto tensors = net.trainable_tensors();
    for (auto* t : tensors) detail::read_tensor(in, *t);
    // running stats come last and are not trainable
    std::vector<float> mean(cfg.signature_dim), var(cfg.signature_dim);
    detail::read_tensor(in, mean);
    detail::read_tensor(in, var);
    for (float v : var)
        if (!(v > 0.0f)) throw FormatError("running variance must be strictly positive");
    net.set_running_stats(mean, var);
    io::expect_eof(in, "model");
    net.mark_updated();
    return net;
}

} // namespace sigmatch
