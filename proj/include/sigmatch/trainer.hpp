// Training loop: class-balanced batches, online mining, analytic
// backprop, SGD with momentum, plateau-based learning-rate decay, and the
// squared-error autoencoder pretraining mode with a mirrored decoder.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "sigmatch/core.hpp"
#include "sigmatch/embedder.hpp"
#include "sigmatch/featurestore.hpp"
#include "sigmatch/losses.hpp"
#include "sigmatch/matcher.hpp"
#include "sigmatch/metrics.hpp"
#include "sigmatch/mining.hpp"

namespace sigmatch {

enum class LossKind { triplet, quadruplet, autoencoder };
enum class OptimizerKind { sgd_momentum };

inline const char* to_string(LossKind k) {
    switch (k) {
        case LossKind::triplet: return "triplet";
        case LossKind::quadruplet: return "quadruplet";
        case LossKind::autoencoder: return "autoencoder";
    }
    return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "triplet") return LossKind::triplet;
    if (s == "quadruplet") return LossKind::quadruplet;
    if (s == "autoencoder") return LossKind::autoencoder;
    throw InputError("unknown loss kind '" + s + "'");
}

struct TrainConfig {
    TripletMargin margin{1.75};
    std::size_t batch_size = 1000;
    LossKind loss_kind = LossKind::triplet;
    OptimizerKind optimizer = OptimizerKind::sgd_momentum;
    double learning_rate = 0.01;
    double momentum = 0.9;
    std::size_t epochs = 20;
    std::uint64_t seed = 0;
    std::size_t eval_every = 1; // 0 disables validation
    // batch composition / mining
    std::size_t per_class = 2;
    std::size_t negatives_per_anchor = 5;
    std::size_t positives_per_anchor = 1;
    // validation protocol
    double enroll_fraction = 0.6;
    // learning-rate schedule: multiply by lr_decay after plateau_evals
    // validation evals without improvement
    double lr_decay = 0.1;
    std::size_t plateau_evals = 3;

    void validate() const {
        margin.validate();
        if (!(learning_rate > 0.0) && learning_rate != 0.0)
            throw InputError("learning_rate must be non-negative");
        if (!(momentum >= 0.0) || !(momentum < 1.0))
            throw InputError("momentum must lie in [0, 1)");
        if (epochs < 1) throw InputError("epochs must be >= 1");
        if (batch_size == 0) throw InputError("batch_size must be positive");
        if (per_class == 0 || negatives_per_anchor == 0 || positives_per_anchor == 0)
            throw InputError("batch composition counts must be positive");
        if (!(enroll_fraction > 0.0) || enroll_fraction > 1.0)
            throw InputError("enroll_fraction must lie in (0, 1]");
        if (!(lr_decay > 0.0) || lr_decay > 1.0)
            throw InputError("lr_decay must lie in (0, 1]");
    }

    MiningConfig mining() const {
        MiningConfig m;
        m.negatives_per_anchor = negatives_per_anchor;
        m.positives_per_anchor = positives_per_anchor;
        m.margin = margin;
        return m;
    }
};

struct EpochStats {
    double loss = 0.0;
    std::size_t active_triplets = 0;
    std::optional<double> val_accuracy;
    double seconds = 0.0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
};

inline void write_history_csv(const TrainHistory& history, std::ostream& out) {
    out << "epoch,loss,active_triplets,val_accuracy,seconds\n";
    for (std::size_t e = 0; e < history.epochs.size(); ++e) {
        const EpochStats& s = history.epochs[e];
        out << (e + 1) << ',' << s.loss << ',' << s.active_triplets << ',';
        if (s.val_accuracy) out << *s.val_accuracy;
        out << ',' << s.seconds << '\n';
    }
}

// ---------------------------------------------------------------------------
// Optimizer: v <- momentum * v + g;  theta <- theta - lr * v.

class SgdMomentum {
public:
    SgdMomentum(double learning_rate, double momentum)
        : lr_(learning_rate), momentum_(momentum) {}

    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }

    /// Updates one tensor in place; the velocity buffer is keyed by slot.
    void step(std::size_t slot, std::span<float> params, std::span<const double> grad) {
        if (params.size() != grad.size()) throw DimensionError("gradient shape mismatch");
        if (velocity_.size() <= slot) velocity_.resize(slot + 1);
        auto& v = velocity_[slot];
        if (v.size() != params.size()) v.assign(params.size(), 0.0);
        for (std::size_t i = 0; i < params.size(); ++i) {
            v[i] = momentum_ * v[i] + grad[i];
            params[i] = static_cast<float>(params[i] - lr_ * v[i]);
        }
    }

private:
    double lr_;
    double momentum_;
    std::vector<std::vector<double>> velocity_;
};

namespace detail {

inline std::span<const double> matrix_span(const Matrix& m) {
    return {m.data(), m.rows() * m.cols()};
}

inline void apply_gradients(EmbeddingNetwork& net, SgdMomentum& opt, const Gradients& g) {
    auto tensors = net.trainable_tensors();
    opt.step(0, *tensors[0], matrix_span(g.w1));
    opt.step(1, *tensors[1], g.b1);
    opt.step(2, *tensors[2], matrix_span(g.w2));
    opt.step(3, *tensors[3], g.b2);
    opt.step(4, *tensors[4], g.bn_gain);
    opt.step(5, *tensors[5], g.bn_bias);
    net.mark_updated();
}

inline void check_class_disjoint(const Dataset& train, const Dataset& val) {
    if (train.origin().empty() || train.origin() != val.origin()) return;
    for (std::uint32_t cid : val.classes())
        if (train.has_class(cid))
            throw InputError("validation set shares class " + std::to_string(cid) +
                             " with the training set");
}

} // namespace detail

/// Benchmark on the validation set with rejection disabled (threshold at
/// the cosine-distance maximum), reporting accuracy at 100% yield.
inline double validate(const EmbeddingNetwork& net, const Dataset& val_ds,
                       double enroll_fraction, std::uint64_t seed) {
    if (val_ds.size() == 0) throw InputError("validation dataset is empty");
    BenchmarkOptions opts;
    opts.enroll_fraction = enroll_fraction;
    opts.seed = seed;
    opts.thresholds = {2.0};
    const BenchmarkReport report = benchmark(net, val_ds, opts);
    const RocPoint& p = report.curve.points.front();
    if (!p.accuracy)
        throw UndefinedMetric("validation accuracy undefined: no labeled enrolled queries");
    return *p.accuracy;
}

/// One epoch's worth of batch index plans, covering floor(n/batch) steps
/// (at least one).
inline std::size_t steps_per_epoch(std::size_t dataset_size, std::size_t batch_size) {
    return std::max<std::size_t>(1, dataset_size / std::max<std::size_t>(1, batch_size));
}

namespace detail {

struct PlateauTracker {
    double best = -1.0;
    std::size_t since_best = 0;

    // returns true when the schedule should decay
    bool observe(double value, std::size_t patience) {
        if (value > best + 1e-12) {
            best = value;
            since_best = 0;
            return false;
        }
        ++since_best;
        if (since_best >= patience) {
            since_best = 0;
            return true;
        }
        return false;
    }
};

} // namespace detail

/// Metric-loss training (triplet or quadruplet). Dispatches to
/// train_autoencoder when the config asks for reconstruction loss.
inline TrainHistory train(EmbeddingNetwork& net, const Dataset& train_ds, const Dataset* val_ds,
                          const TrainConfig& cfg);

/// Squared-error autoencoder pretraining: the encoder is the network
/// itself, the decoder mirrors it (signature -> hidden -> input, same
/// hidden activation) and is discarded afterwards.
inline TrainHistory train_autoencoder(EmbeddingNetwork& net, const Dataset& train_ds,
                                      const TrainConfig& cfg);

namespace detail {

/// The decoder half of the autoencoder. Plain two-layer net without an
/// output normalization; exists only during pretraining.
class MirrorDecoder {
public:
    MirrorDecoder(std::size_t signature_dim, std::size_t hidden_dim, std::size_t output_dim,
                  Activation activation, std::uint64_t seed)
        : sig_(signature_dim), hid_(hidden_dim), out_(output_dim), act_(activation) {
        w1_.assign(hid_ * sig_, 0.0f);
        b1_.assign(hid_, 0.0f);
        w2_.assign(out_ * hid_, 0.0f);
        b2_.assign(out_, 0.0f);
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> d1(0.0, std::sqrt(2.0 / static_cast<double>(sig_)));
        for (float& w : w1_) w = static_cast<float>(d1(rng));
        std::normal_distribution<double> d2(0.0, std::sqrt(2.0 / static_cast<double>(hid_)));
        for (float& w : w2_) w = static_cast<float>(d2(rng));
    }

    struct Cache {
        Matrix input, pre_hidden, hidden;
    };

    Matrix forward(const Matrix& in, Cache* cache = nullptr) const {
        const std::size_t B = in.rows();
        Matrix pre(B, hid_), hidden(B, hid_), out(B, out_);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < hid_; ++h) {
                const float* row = w1_.data() + h * sig_;
                double acc = b1_[h];
                for (std::size_t c = 0; c < sig_; ++c) acc += in(b, c) * row[c];
                pre(b, h) = acc;
                hidden(b, h) = activate(acc);
            }
            for (std::size_t o = 0; o < out_; ++o) {
                const float* row = w2_.data() + o * hid_;
                double acc = b2_[o];
                for (std::size_t h = 0; h < hid_; ++h) acc += hidden(b, h) * row[h];
                out(b, o) = acc;
            }
        }
        if (cache) {
            cache->input = in;
            cache->pre_hidden = std::move(pre);
            cache->hidden = std::move(hidden);
        }
        return out;
    }

    /// Returns the gradient w.r.t. the decoder input and applies parameter
    /// updates through the supplied optimizer (slots 0..3).
    Matrix backward_and_step(const Cache& cache, const Matrix& grad_out, SgdMomentum& opt) {
        const std::size_t B = cache.input.rows();
        Matrix d_pre(B, hid_);
        std::vector<double> g_b2(out_, 0.0), g_b1(hid_, 0.0);
        Matrix g_w2(out_, hid_), g_w1(hid_, sig_);
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < out_; ++o) {
                const double d = grad_out(b, o);
                g_b2[o] += d;
                for (std::size_t h = 0; h < hid_; ++h) g_w2(o, h) += d * cache.hidden(b, h);
            }
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t h = 0; h < hid_; ++h) {
                double acc = 0.0;
                for (std::size_t o = 0; o < out_; ++o)
                    acc += grad_out(b, o) * w2_[o * hid_ + h];
                d_pre(b, h) = acc * derivative(cache.pre_hidden(b, h), cache.hidden(b, h));
            }
        Matrix d_input(B, sig_);
        for (std::size_t b = 0; b < B; ++b) {
            for (std::size_t h = 0; h < hid_; ++h) {
                const double d = d_pre(b, h);
                g_b1[h] += d;
                for (std::size_t c = 0; c < sig_; ++c) g_w1(h, c) += d * cache.input(b, c);
            }
            for (std::size_t c = 0; c < sig_; ++c) {
                double acc = 0.0;
                for (std::size_t h = 0; h < hid_; ++h) acc += d_pre(b, h) * w1_[h * sig_ + c];
                d_input(b, c) = acc;
            }
        }
        opt.step(0, w1_, matrix_span(g_w1));
        opt.step(1, b1_, g_b1);
        opt.step(2, w2_, matrix_span(g_w2));
        opt.step(3, b2_, g_b2);
        return d_input;
    }

private:
    double activate(double x) const {
        switch (act_) {
            case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-x));
            case Activation::relu: return x > 0.0 ? x : 0.0;
            case Activation::tanh: return std::tanh(x);
            case Activation::identity: return x;
        }
        return x;
    }
    double derivative(double pre, double post) const {
        switch (act_) {
            case Activation::sigmoid: return post * (1.0 - post);
            case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
            case Activation::tanh: return 1.0 - post * post;
            case Activation::identity: return 1.0;
        }
        return 0.0;
    }

    std::size_t sig_, hid_, out_;
    Activation act_;
    std::vector<float> w1_, b1_, w2_, b2_;
};

} // namespace detail

inline TrainHistory train_autoencoder(EmbeddingNetwork& net, const Dataset& train_ds,
                                      const TrainConfig& cfg) {
    cfg.validate();
    if (train_ds.dimension() != net.config().input_dim)
        throw DimensionError("training dataset dimension does not match the model input");
    if (train_ds.size() == 0) throw InputError("training dataset is empty");

    const auto& nc = net.config();
    detail::MirrorDecoder decoder(nc.signature_dim, nc.hidden_dim, nc.input_dim,
                                  nc.hidden_activation, derive_seed(cfg.seed, 0xDEC0DE));
    SgdMomentum enc_opt(cfg.learning_rate, cfg.momentum);
    SgdMomentum dec_opt(cfg.learning_rate, cfg.momentum);

    const std::size_t batch = std::min(cfg.batch_size, train_ds.size());
    const std::size_t steps = steps_per_epoch(train_ds.size(), batch);
    std::vector<std::size_t> order(train_ds.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    TrainHistory history;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        std::mt19937_64 rng(derive_seed(cfg.seed, epoch, 0xAE));
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0;
        for (std::size_t s = 0; s < steps; ++s) {
            const std::size_t lo = s * batch;
            const std::size_t hi = std::min(lo + batch, order.size());
            const std::span<const std::size_t> rows(order.data() + lo, hi - lo);
            const Matrix x = train_ds.gather(rows);

            ForwardCache cache;
            const Matrix signatures = net.forward(x, ForwardMode::train, cache);
            detail::MirrorDecoder::Cache dec_cache;
            const Matrix reconstruction = decoder.forward(signatures, &dec_cache);
            auto [loss, grad_recon] = autoencoder_loss(x, reconstruction);
            if (!std::isfinite(loss))
                throw DivergenceError("non-finite reconstruction loss at epoch " +
                                      std::to_string(epoch + 1) + ", batch " +
                                      std::to_string(s + 1));
            epoch_loss += loss;

            const Matrix grad_sig = decoder.backward_and_step(dec_cache, grad_recon, dec_opt);
            const Gradients grads = net.backward(cache, grad_sig);
            detail::apply_gradients(net, enc_opt, grads);
            if (nc.normalization == Normalization::batch_norm) net.update_running_stats(cache);
        }
        const auto t1 = std::chrono::steady_clock::now();
        EpochStats stats;
        stats.loss = epoch_loss;
        stats.active_triplets = 0;
        stats.seconds = std::chrono::duration<double>(t1 - t0).count();
        history.epochs.push_back(stats);
    }
    return history;
}

inline TrainHistory train(EmbeddingNetwork& net, const Dataset& train_ds, const Dataset* val_ds,
                          const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.loss_kind == LossKind::autoencoder) return train_autoencoder(net, train_ds, cfg);
    if (train_ds.dimension() != net.config().input_dim)
        throw DimensionError("training dataset dimension does not match the model input");
    if (train_ds.size() == 0) throw InputError("training dataset is empty");
    if (val_ds) detail::check_class_disjoint(train_ds, *val_ds);

    SgdMomentum opt(cfg.learning_rate, cfg.momentum);
    const MiningConfig mining = cfg.mining();
    const std::size_t batch = std::min(cfg.batch_size, train_ds.size());
    const std::size_t steps = steps_per_epoch(train_ds.size(), batch);
    detail::PlateauTracker plateau;

    TrainHistory history;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double epoch_loss = 0.0;
        std::size_t epoch_active = 0;
        for (std::size_t s = 0; s < steps; ++s) {
            const BatchPlan plan =
                compose_batch(train_ds, batch, cfg.per_class, derive_seed(cfg.seed, epoch, s));
            const Matrix x = train_ds.gather(plan.examples);
            std::vector<std::uint32_t> labels(plan.examples.size());
            for (std::size_t i = 0; i < plan.examples.size(); ++i)
                labels[i] = train_ds.class_id(plan.examples[i]);

            ForwardCache cache;
            const Matrix signatures = net.forward(x, ForwardMode::train, cache);
            if (!signatures.all_finite())
                throw DivergenceError("non-finite signatures at epoch " +
                                      std::to_string(epoch + 1) + ", batch " +
                                      std::to_string(s + 1));

            LossReport report;
            Matrix grad_signatures;
            bool have_terms = false;
            if (cfg.loss_kind == LossKind::triplet) {
                const std::vector<Triplet> triplets = mine_semi_hard(signatures, labels, mining);
                have_terms = !triplets.empty();
                if (have_terms)
                    std::tie(report, grad_signatures) =
                        batch_triplet_loss(signatures, triplets, cfg.margin);
            } else {
                std::set<std::uint32_t> distinct(labels.begin(), labels.end());
                if (distinct.size() >= 3) {
                    const std::vector<Quadruplet> quads =
                        mine_quadruplets(signatures, labels, mining);
                    have_terms = !quads.empty();
                    if (have_terms)
                        std::tie(report, grad_signatures) = batch_quadruplet_loss(
                            signatures, quads, {cfg.margin.alpha, cfg.margin.alpha});
                }
            }

            if (!have_terms) continue; // nothing mined: no update for this batch

            if (!std::isfinite(report.total_loss))
                throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch + 1) +
                                      ", batch " + std::to_string(s + 1));
            epoch_loss += report.total_loss;
            epoch_active += report.active_count;

            const Gradients grads = net.backward(cache, grad_signatures);
            detail::apply_gradients(net, opt, grads);
            if (net.config().normalization == Normalization::batch_norm)
                net.update_running_stats(cache);
        }
        const auto t1 = std::chrono::steady_clock::now();

        EpochStats stats;
        stats.loss = epoch_loss;
        stats.active_triplets = epoch_active;
        stats.seconds = std::chrono::duration<double>(t1 - t0).count();
        if (val_ds && cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            stats.val_accuracy =
                validate(net, *val_ds, cfg.enroll_fraction, derive_seed(cfg.seed, 0xE7A1, epoch));
            if (plateau.observe(*stats.val_accuracy, cfg.plateau_evals))
                opt.set_learning_rate(opt.learning_rate() * cfg.lr_decay);
        }
        history.epochs.push_back(stats);

        // margin separation reached: every mined batch was loss-free
        if (epoch_active == 0 && cfg.loss_kind != LossKind::autoencoder) break;
    }
    return history;
}

// ---------------------------------------------------------------------------
// key=value training configuration files.

inline TrainConfig parse_train_config(std::istream& in) {
    TrainConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string_view sv(line);
        while (!sv.empty() && (sv.front() == ' ' || sv.front() == '\t')) sv.remove_prefix(1);
        if (sv.empty() || sv.front() == '#') continue;
        const std::size_t eq = sv.find('=');
        if (eq == std::string_view::npos)
            throw FormatError("expected key=value on line " + std::to_string(line_no));
        const std::string key(sv.substr(0, eq));
        const std::string value(sv.substr(eq + 1));
        auto as_double = [&] {
            double v{};
            auto [p, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
            if (ec != std::errc() || p != value.data() + value.size())
                throw FormatError("malformed number for '" + key + "'");
            return v;
        };
        auto as_size = [&] {
            const double v = as_double();
            if (v < 0 || v != std::floor(v))
                throw FormatError("'" + key + "' must be a non-negative integer");
            return static_cast<std::size_t>(v);
        };
        if (key == "alpha") cfg.margin.alpha = as_double();
        else if (key == "batch_size") cfg.batch_size = as_size();
        else if (key == "loss") cfg.loss_kind = loss_kind_from_string(value);
        else if (key == "optimizer") {
            if (value != "sgd_momentum") throw InputError("unknown optimizer '" + value + "'");
        } else if (key == "learning_rate") cfg.learning_rate = as_double();
        else if (key == "momentum") cfg.momentum = as_double();
        else if (key == "epochs") cfg.epochs = as_size();
        else if (key == "seed") cfg.seed = static_cast<std::uint64_t>(as_double());
        else if (key == "eval_every") cfg.eval_every = as_size();
        else if (key == "per_class") cfg.per_class = as_size();
        else if (key == "negatives_per_anchor") cfg.negatives_per_anchor = as_size();
        else if (key == "positives_per_anchor") cfg.positives_per_anchor = as_size();
        else if (key == "enroll_fraction") cfg.enroll_fraction = as_double();
        else if (key == "lr_decay") cfg.lr_decay = as_double();
        else if (key == "plateau_evals") cfg.plateau_evals = as_size();
        else throw FormatError("unknown configuration key '" + key + "'");
    }
    return cfg;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open config: " + path.string());
    return parse_train_config(in);
}

} // namespace sigmatch
