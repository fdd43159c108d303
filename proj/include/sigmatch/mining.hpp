// Minibatch composition and triplet/quadruplet selection. The online rule
// is semi-hardest selection: among negatives no closer to the anchor than
// the positive, keep the highest-loss ones; negatives inside the positive
// radius are excluded because they collapse the embedding.
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "sigmatch/core.hpp"
#include "sigmatch/featurestore.hpp"
#include "sigmatch/losses.hpp"

namespace sigmatch {

struct BatchPlan {
    std::vector<std::size_t> examples; // dataset-level indices, no repeats
    std::map<std::uint32_t, std::size_t> class_counts;
};

struct MiningConfig {
    std::size_t negatives_per_anchor = 5;
    std::size_t positives_per_anchor = 1;
    TripletMargin margin{};
    std::size_t offline_chunks = 10;

    void validate() const {
        if (negatives_per_anchor == 0 || positives_per_anchor == 0 || offline_chunks == 0)
            throw InputError("mining counts must be positive");
        margin.validate();
    }
};

/// Picks ceil(batch_size / per_class) random classes, then up to per_class
/// random examples from each. Classes with fewer examples contribute what
/// they have.
inline BatchPlan compose_batch(const Dataset& ds, std::size_t batch_size, std::size_t per_class,
                               std::uint64_t rng_seed) {
    if (per_class == 0) throw InputError("per_class must be positive");
    if (batch_size == 0) throw InputError("batch_size must be positive");
    if (batch_size > ds.size()) throw InputError("batch_size exceeds dataset size");
    if (per_class >= 2) {
        bool any_pair = false;
        for (std::uint32_t cid : ds.classes())
            if (ds.class_examples(cid).size() >= 2) {
                any_pair = true;
                break;
            }
        if (!any_pair)
            throw MiningError("no class has two examples; positive pairs are impossible");
    }

    std::mt19937_64 rng(rng_seed);
    std::vector<std::uint32_t> classes = ds.classes();
    std::shuffle(classes.begin(), classes.end(), rng);
    const std::size_t want_classes = (batch_size + per_class - 1) / per_class;

    BatchPlan plan;
    for (std::size_t k = 0; k < classes.size() && k < want_classes; ++k) {
        const std::uint32_t cid = classes[k];
        std::vector<std::size_t> members = ds.class_examples(cid);
        std::shuffle(members.begin(), members.end(), rng);
        const std::size_t take = std::min(per_class, members.size());
        for (std::size_t i = 0; i < take; ++i) plan.examples.push_back(members[i]);
        plan.class_counts[cid] = take;
    }
    return plan;
}

namespace detail {

/// Squared-distance table for a batch of row vectors.
inline Matrix pairwise_squared_distances(const Matrix& points) {
    const std::size_t n = points.rows();
    Matrix d(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = squared_distance(points.row(i), points.row(j));
            d(i, j) = v;
            d(j, i) = v;
        }
    return d;
}

/// The semi-hardest selection rule over a precomputed distance table.
///
/// For each anchor, positives are ranked hardest-first (largest d(a,p)^2,
/// ties to the lower index) and capped at positives_per_anchor. For each
/// kept (a,p) pair, eligible negatives satisfy d(a,n)^2 >= d(a,p)^2 and
/// have strictly positive triplet loss; the negatives_per_anchor
/// highest-loss ones are kept, ties to the lower index.
inline std::vector<Triplet> semi_hard_from_distances(const Matrix& dist,
                                                     std::span<const std::uint32_t> labels,
                                                     const MiningConfig& cfg) {
    cfg.validate();
    const std::size_t n = labels.size();
    if (dist.rows() != n || dist.cols() != n)
        throw DimensionError("distance table does not match label count");
    const double alpha = cfg.margin.alpha;

    std::vector<Triplet> out;
    std::vector<std::size_t> positives, negatives;
    for (std::size_t a = 0; a < n; ++a) {
        positives.clear();
        for (std::size_t p = 0; p < n; ++p)
            if (p != a && labels[p] == labels[a]) positives.push_back(p);
        if (positives.empty()) continue;
        std::sort(positives.begin(), positives.end(), [&](std::size_t x, std::size_t y) {
            if (dist(a, x) != dist(a, y)) return dist(a, x) > dist(a, y);
            return x < y;
        });
        if (positives.size() > cfg.positives_per_anchor)
            positives.resize(cfg.positives_per_anchor);

        for (std::size_t p : positives) {
            const double dap = dist(a, p);
            negatives.clear();
            for (std::size_t neg = 0; neg < n; ++neg) {
                if (labels[neg] == labels[a]) continue;
                const double dan = dist(a, neg);
                if (dan < dap) continue;                  // would collapse the model
                if (dap - dan + alpha <= 0.0) continue;   // already separated
                negatives.push_back(neg);
            }
            std::sort(negatives.begin(), negatives.end(), [&](std::size_t x, std::size_t y) {
                if (dist(a, x) != dist(a, y)) return dist(a, x) < dist(a, y);
                return x < y;
            });
            if (negatives.size() > cfg.negatives_per_anchor)
                negatives.resize(cfg.negatives_per_anchor);
            for (std::size_t neg : negatives) out.push_back({a, p, neg});
        }
    }
    return out;
}

} // namespace detail

/// Online semi-hard mining over a batch of signatures.
inline std::vector<Triplet> mine_semi_hard(const Matrix& signatures,
                                           std::span<const std::uint32_t> labels,
                                           const MiningConfig& cfg) {
    if (signatures.rows() != labels.size())
        throw DimensionError("label count does not match batch size");
    return detail::semi_hard_from_distances(detail::pairwise_squared_distances(signatures),
                                            labels, cfg);
}

/// Offline mining: the dataset is partitioned into class-stratified random
/// chunks and the semi-hard rule runs inside each chunk on an external
/// feature representation. Returns dataset-level indices.
inline std::vector<Triplet> mine_offline(const Dataset& ds, const Matrix& external_features,
                                         const MiningConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    if (external_features.rows() != ds.size())
        throw DimensionError("external feature row count does not match dataset size");

    std::vector<std::uint32_t> classes = ds.classes();
    std::mt19937_64 rng(seed);
    std::shuffle(classes.begin(), classes.end(), rng);
    const std::size_t chunks = std::min(cfg.offline_chunks, std::max<std::size_t>(classes.size(), 1));

    std::vector<Triplet> out;
    std::vector<std::size_t> members;
    std::vector<std::uint32_t> labels;
    for (std::size_t c = 0; c < chunks; ++c) {
        const std::size_t lo = classes.size() * c / chunks;
        const std::size_t hi = classes.size() * (c + 1) / chunks;
        members.clear();
        for (std::size_t k = lo; k < hi; ++k) {
            const auto& idx = ds.class_examples(classes[k]);
            members.insert(members.end(), idx.begin(), idx.end());
        }
        if (members.size() < 2) continue;
        std::sort(members.begin(), members.end());

        Matrix chunk_features(members.size(), external_features.cols());
        labels.assign(members.size(), 0);
        for (std::size_t i = 0; i < members.size(); ++i) {
            const auto src = external_features.row(members[i]);
            std::copy(src.begin(), src.end(), chunk_features.row(i).begin());
            labels[i] = ds.class_id(members[i]);
        }
        for (const Triplet& t :
             detail::semi_hard_from_distances(detail::pairwise_squared_distances(chunk_features),
                                              labels, cfg))
            out.push_back({members[t.anchor], members[t.positive], members[t.negative]});
    }
    return out;
}

/// Extends each semi-hard triplet with a second negative from a third
/// class, chosen semi-hard with respect to the d(n, n2)^2 term: among
/// candidates with d(n,n2)^2 >= d(a,p)^2 and a positive second hinge, the
/// closest (highest-loss) one wins; triplets with no valid candidate are
/// dropped. The second hinge reuses the config margin.
inline std::vector<Quadruplet> mine_quadruplets(const Matrix& signatures,
                                                std::span<const std::uint32_t> labels,
                                                const MiningConfig& cfg) {
    if (signatures.rows() != labels.size())
        throw DimensionError("label count does not match batch size");
    {
        std::vector<std::uint32_t> distinct(labels.begin(), labels.end());
        std::sort(distinct.begin(), distinct.end());
        distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
        if (distinct.size() < 3)
            throw MiningError("quadruplet mining needs at least 3 distinct classes, got " +
                              std::to_string(distinct.size()));
    }

    const Matrix dist = detail::pairwise_squared_distances(signatures);
    const double alpha2 = cfg.margin.alpha;
    std::vector<Quadruplet> out;
    for (const Triplet& t : detail::semi_hard_from_distances(dist, labels, cfg)) {
        const double dap = dist(t.anchor, t.positive);
        bool found = false;
        std::size_t best = 0;
        double best_dnn = 0.0;
        for (std::size_t n2 = 0; n2 < labels.size(); ++n2) {
            if (labels[n2] == labels[t.anchor] || labels[n2] == labels[t.negative]) continue;
            const double dnn = dist(t.negative, n2);
            if (dnn < dap) continue;
            if (dap - dnn + alpha2 <= 0.0) continue;
            if (!found || dnn < best_dnn) {
                found = true;
                best = n2;
                best_dnn = dnn;
            }
        }
        if (found) out.push_back({t.anchor, t.positive, t.negative, best});
    }
    return out;
}

} // namespace sigmatch
