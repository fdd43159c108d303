// Batch losses over embeddings: triplet and quadruplet hinges on squared L2
// distances, plus the squared-error reconstruction loss used for
// autoencoder pretraining. Every loss comes with its analytic gradient.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "sigmatch/core.hpp"

namespace sigmatch {

struct TripletMargin {
    double alpha = 1.75;

    void validate() const {
        if (!(alpha >= 0.0)) throw InputError("triplet margin must be non-negative");
    }
};

struct QuadrupletMargins {
    double alpha1 = 1.75;
    double alpha2 = 1.75;

    void validate() const {
        if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0))
            throw InputError("quadruplet margins must be non-negative");
    }
};

/// Batch-local index tuple. anchor/positive share a class, negative does not.
struct Triplet {
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;

    friend bool operator==(const Triplet&, const Triplet&) = default;
    friend auto operator<=>(const Triplet&, const Triplet&) = default;
};

/// Triplet plus a second negative from a third class.
struct Quadruplet {
    std::size_t anchor = 0;
    std::size_t positive = 0;
    std::size_t negative = 0;
    std::size_t negative2 = 0;

    friend bool operator==(const Quadruplet&, const Quadruplet&) = default;
    friend auto operator<=>(const Quadruplet&, const Quadruplet&) = default;
};

struct LossReport {
    double total_loss = 0.0;
    std::size_t active_count = 0; // terms with strictly positive loss
    std::vector<double> per_term;
};

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionError("vector dimensions differ: " + std::to_string(a.size()) + " vs " +
                             std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// [ ||a-p||^2 - ||a-n||^2 + alpha ]_+
inline double triplet_loss(std::span<const double> anchor, std::span<const double> positive,
                           std::span<const double> negative, TripletMargin margin) {
    margin.validate();
    const double v =
        squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin.alpha;
    return v > 0.0 ? v : 0.0;
}

struct TripletGrad {
    std::vector<double> anchor;
    std::vector<double> positive;
    std::vector<double> negative;
};

/// Subgradient of triplet_loss; the zero branch is taken at the hinge
/// boundary, so inactive triplets contribute nothing.
inline TripletGrad triplet_loss_grad(std::span<const double> anchor,
                                     std::span<const double> positive,
                                     std::span<const double> negative, TripletMargin margin) {
    const std::size_t d = anchor.size();
    TripletGrad g{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0),
                  std::vector<double>(d, 0.0)};
    if (triplet_loss(anchor, positive, negative, margin) <= 0.0) return g;
    for (std::size_t i = 0; i < d; ++i) {
        g.anchor[i] = 2.0 * (negative[i] - positive[i]);
        g.positive[i] = 2.0 * (positive[i] - anchor[i]);
        g.negative[i] = 2.0 * (anchor[i] - negative[i]);
    }
    return g;
}

/// [ ||a-p||^2 - ||a-n||^2 + a1 ]_+ + [ ||a-p||^2 - ||n-n2||^2 + a2 ]_+
inline double quadruplet_loss(std::span<const double> anchor, std::span<const double> positive,
                              std::span<const double> negative, std::span<const double> negative2,
                              QuadrupletMargins margins) {
    margins.validate();
    const double dap = squared_distance(anchor, positive);
    const double dan = squared_distance(anchor, negative);
    const double dnn = squared_distance(negative, negative2);
    return std::max(dap - dan + margins.alpha1, 0.0) + std::max(dap - dnn + margins.alpha2, 0.0);
}

namespace detail {

inline void check_index(std::size_t idx, std::size_t batch) {
    if (idx >= batch)
        throw IndexError("batch index " + std::to_string(idx) + " out of range (batch size " +
                         std::to_string(batch) + ")");
}

inline void accumulate_scaled_diff(Matrix& grad, std::size_t row, std::span<const double> u,
                                   std::span<const double> v, double scale) {
    auto g = grad.row(row);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * (u[i] - v[i]);
}

} // namespace detail

/// Sums per-triplet losses over a batch of signatures and accumulates the
/// per-row signature gradients.
inline std::pair<LossReport, Matrix> batch_triplet_loss(const Matrix& signatures,
                                                        std::span<const Triplet> triplets,
                                                        TripletMargin margin) {
    margin.validate();
    const std::size_t batch = signatures.rows();
    LossReport report;
    report.per_term.reserve(triplets.size());
    Matrix grad(batch, signatures.cols(), 0.0);
    for (const Triplet& t : triplets) {
        detail::check_index(t.anchor, batch);
        detail::check_index(t.positive, batch);
        detail::check_index(t.negative, batch);
        const auto a = signatures.row(t.anchor);
        const auto p = signatures.row(t.positive);
        const auto n = signatures.row(t.negative);
        const double loss = triplet_loss(a, p, n, margin);
        report.per_term.push_back(loss);
        report.total_loss += loss;
        if (loss > 0.0) {
            ++report.active_count;
            detail::accumulate_scaled_diff(grad, t.anchor, n, p, 2.0);
            detail::accumulate_scaled_diff(grad, t.positive, p, a, 2.0);
            detail::accumulate_scaled_diff(grad, t.negative, a, n, 2.0);
        }
    }
    return {std::move(report), std::move(grad)};
}

/// Quadruplet analogue of batch_triplet_loss. active_count counts
/// quadruplets whose combined loss is positive.
inline std::pair<LossReport, Matrix> batch_quadruplet_loss(const Matrix& signatures,
                                                           std::span<const Quadruplet> quads,
                                                           QuadrupletMargins margins) {
    margins.validate();
    const std::size_t batch = signatures.rows();
    LossReport report;
    report.per_term.reserve(quads.size());
    Matrix grad(batch, signatures.cols(), 0.0);
    for (const Quadruplet& q : quads) {
        detail::check_index(q.anchor, batch);
        detail::check_index(q.positive, batch);
        detail::check_index(q.negative, batch);
        detail::check_index(q.negative2, batch);
        const auto a = signatures.row(q.anchor);
        const auto p = signatures.row(q.positive);
        const auto n = signatures.row(q.negative);
        const auto n2 = signatures.row(q.negative2);
        const double dap = squared_distance(a, p);
        const double term1 = dap - squared_distance(a, n) + margins.alpha1;
        const double term2 = dap - squared_distance(n, n2) + margins.alpha2;
        const double loss = std::max(term1, 0.0) + std::max(term2, 0.0);
        report.per_term.push_back(loss);
        report.total_loss += loss;
        if (loss > 0.0) ++report.active_count;
        if (term1 > 0.0) {
            detail::accumulate_scaled_diff(grad, q.anchor, n, p, 2.0);
            detail::accumulate_scaled_diff(grad, q.positive, p, a, 2.0);
            detail::accumulate_scaled_diff(grad, q.negative, a, n, 2.0);
        }
        if (term2 > 0.0) {
            detail::accumulate_scaled_diff(grad, q.anchor, a, p, 2.0);
            detail::accumulate_scaled_diff(grad, q.positive, p, a, 2.0);
            detail::accumulate_scaled_diff(grad, q.negative, n2, n, 2.0);
            detail::accumulate_scaled_diff(grad, q.negative2, n, n2, 2.0);
        }
    }
    return {std::move(report), std::move(grad)};
}

/// Mean over the batch of ||input - reconstruction||^2, with the gradient
/// w.r.t. the reconstruction.
inline std::pair<double, Matrix> autoencoder_loss(const Matrix& input,
                                                  const Matrix& reconstruction) {
    if (!input.same_shape(reconstruction))
        throw DimensionError("input and reconstruction shapes differ");
    if (input.rows() == 0) throw InputError("empty batch");
    const double inv_b = 1.0 / static_cast<double>(input.rows());
    double total = 0.0;
    Matrix grad(input.rows(), input.cols());
    for (std::size_t r = 0; r < input.rows(); ++r) {
        for (std::size_t c = 0; c < input.cols(); ++c) {
            const double d = reconstruction(r, c) - input(r, c);
            total += d * d;
            grad(r, c) = 2.0 * d * inv_b;
        }
    }
    return {total * inv_b, std::move(grad)};
}

} // namespace sigmatch
