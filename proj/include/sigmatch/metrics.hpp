// Evaluation: the five-way confusion ledger over enrolled/absent queries,
// yield / false-positive-rate / accuracy, threshold sweeps and the
// enrollment benchmark protocol (one template per enrolled identity,
// everything else queried).
#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sigmatch/core.hpp"
#include "sigmatch/embedder.hpp"
#include "sigmatch/featurestore.hpp"
#include "sigmatch/matcher.hpp"

namespace sigmatch {

/// Ledger of query outcomes. A query whose identity is enrolled lands in
/// n1 (correct label), n2 (wrong label) or n3 (rejected); one whose
/// identity is absent lands in n5 (labeled anyway) or n6 (rejected).
/// The absent/correct cell is structurally zero: there is no way to
/// correctly label a plate that has no template, and no code path here
/// increments it.
struct ConfusionCounts {
    std::uint64_t n1 = 0;
    std::uint64_t n2 = 0;
    std::uint64_t n3 = 0;
    std::uint64_t n5 = 0;
    std::uint64_t n6 = 0;

    static constexpr std::uint64_t n4() { return 0; }

    std::uint64_t enrolled_queries() const { return n1 + n2 + n3; }
    std::uint64_t absent_queries() const { return n5 + n6; }
    std::uint64_t total() const { return enrolled_queries() + absent_queries(); }

    friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

/// Ground truth for one query: the enrolled identity it should match, or
/// nullopt when its identity has no template.
using TruthLabel = std::optional<std::string>;

inline ConfusionCounts tally(std::span<const MatchResult> results,
                             std::span<const TruthLabel> truth) {
    if (results.size() != truth.size())
        throw InputError("results and truth lengths differ");
    ConfusionCounts c;
    for (std::size_t i = 0; i < results.size(); ++i) {
        const MatchResult& r = results[i];
        if (truth[i].has_value()) {
            if (!r.accepted)
                ++c.n3;
            else if (r.identity == *truth[i])
                ++c.n1;
            else
                ++c.n2;
        } else {
            if (r.accepted)
                ++c.n5;
            else
                ++c.n6;
        }
    }
    return c;
}

/// (n1 + n2) / (n1 + n2 + n3)
inline double yield_rate(const ConfusionCounts& c) {
    const std::uint64_t denom = c.n1 + c.n2 + c.n3;
    if (denom == 0) throw UndefinedMetric("yield undefined: no enrolled-identity queries");
    return static_cast<double>(c.n1 + c.n2) / static_cast<double>(denom);
}

/// n5 / (n5 + n6)
inline double fpr(const ConfusionCounts& c) {
    const std::uint64_t denom = c.n5 + c.n6;
    if (denom == 0)
        throw UndefinedMetric("false positive rate undefined: no absent-identity queries");
    return static_cast<double>(c.n5) / static_cast<double>(denom);
}

/// n1 / (n1 + n2)
inline double accuracy(const ConfusionCounts& c) {
    const std::uint64_t denom = c.n1 + c.n2;
    if (denom == 0) throw UndefinedMetric("accuracy undefined: no labeled enrolled queries");
    return static_cast<double>(c.n1) / static_cast<double>(denom);
}

struct RocPoint {
    double threshold = 0.0;
    std::optional<double> yield;
    std::optional<double> fpr;
    std::optional<double> accuracy;
    ConfusionCounts counts;
};

struct RocCurve {
    std::vector<RocPoint> points; // thresholds ascending
};

/// 200 evenly spaced thresholds over [0, 2].
inline std::vector<double> default_threshold_grid(std::size_t n = 200) {
    if (n < 2) throw InputError("threshold grid needs at least 2 points");
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i)
        t[i] = 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
    return t;
}

namespace detail {

inline void check_ascending(std::span<const double> thresholds) {
    if (thresholds.empty()) throw InputError("threshold list is empty");
    for (std::size_t i = 1; i < thresholds.size(); ++i)
        if (!(thresholds[i] > thresholds[i - 1]))
            throw InputError("thresholds must be strictly ascending");
}

/// Tally at one threshold from precomputed nearest neighbors.
inline ConfusionCounts tally_neighbors(std::span<const Neighbor> nearest,
                                       std::span<const std::string> identities,
                                       std::span<const TruthLabel> truth, double threshold) {
    ConfusionCounts c;
    for (std::size_t i = 0; i < nearest.size(); ++i) {
        const bool accepted =
            nearest[i].index != Neighbor::npos && nearest[i].distance <= threshold;
        if (truth[i].has_value()) {
            if (!accepted)
                ++c.n3;
            else if (identities[nearest[i].index] == *truth[i])
                ++c.n1;
            else
                ++c.n2;
        } else {
            if (accepted)
                ++c.n5;
            else
                ++c.n6;
        }
    }
    return c;
}

inline RocPoint make_point(double threshold, const ConfusionCounts& counts) {
    RocPoint p;
    p.threshold = threshold;
    p.counts = counts;
    if (counts.enrolled_queries() > 0) p.yield = yield_rate(counts);
    if (counts.absent_queries() > 0) p.fpr = fpr(counts);
    if (counts.n1 + counts.n2 > 0) p.accuracy = accuracy(counts);
    return p;
}

} // namespace detail

/// Sweeps thresholds over one set of queries. Distances are computed once;
/// undefined metrics are reported as absent values, never as zeros.
inline RocCurve roc_sweep(const TemplateDB& db, std::span<const Signature> queries,
                          std::span<const TruthLabel> truth,
                          std::span<const double> thresholds) {
    if (queries.size() != truth.size())
        throw InputError("queries and truth lengths differ");
    detail::check_ascending(thresholds);

    std::vector<Neighbor> nearest(queries.size());
    parallel_for(queries.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) nearest[i] = db.nearest(queries[i]);
    });
    std::vector<std::string> identities(db.size());
    for (std::size_t i = 0; i < db.size(); ++i) identities[i] = db.identity(i);

    RocCurve curve;
    curve.points.reserve(thresholds.size());
    for (double t : thresholds)
        curve.points.push_back(
            detail::make_point(t, detail::tally_neighbors(nearest, identities, truth, t)));
    return curve;
}

enum class TemplateSelection {
    first_example, // first example of the class in dataset order
    random_example // seeded random pick per enrolled class
};

struct BenchmarkOptions {
    double enroll_fraction = 0.6;
    std::uint64_t seed = 0;
    std::vector<double> thresholds; // empty = default grid
    TemplateSelection selection = TemplateSelection::first_example;
    std::size_t forward_chunk = 512;
};

struct BenchmarkReport {
    RocCurve curve;
    std::size_t template_count = 0;
    std::size_t query_count = 0;
    double total_seconds = 0.0;      // matching time only
    double per_query_seconds = 0.0;
};

/// The enrollment protocol: a seeded shuffle picks enroll_fraction of the
/// classes, one example per picked class becomes its template, and every
/// remaining example (held-out examples of enrolled classes plus all
/// examples of absent classes) is queried against the database.
inline BenchmarkReport benchmark(const EmbeddingNetwork& model, const Dataset& bench,
                                 const BenchmarkOptions& opts) {
    if (!(opts.enroll_fraction > 0.0) || opts.enroll_fraction > 1.0)
        throw InputError("enroll_fraction must lie in (0, 1]");
    if (bench.dimension() != model.config().input_dim)
        throw DimensionError("benchmark dataset dimension does not match the model input");
    if (bench.size() == 0) throw InputError("benchmark dataset is empty");

    // Embed everything in eval mode (row-independent, so chunking is safe).
    const std::size_t S = model.config().signature_dim;
    std::vector<Signature> signatures(bench.size());
    {
        const std::size_t chunk = std::max<std::size_t>(opts.forward_chunk, 1);
        std::vector<std::size_t> rows;
        for (std::size_t base = 0; base < bench.size(); base += chunk) {
            const std::size_t hi = std::min(bench.size(), base + chunk);
            rows.resize(hi - base);
            for (std::size_t i = base; i < hi; ++i) rows[i - base] = i;
            const Matrix out = model.forward(bench.gather(rows), ForwardMode::eval);
            for (std::size_t i = base; i < hi; ++i)
                signatures[i] = Signature(out.row(i - base));
        }
    }

    std::vector<std::uint32_t> classes = bench.classes();
    std::mt19937_64 rng(opts.seed);
    std::shuffle(classes.begin(), classes.end(), rng);
    std::size_t n_enroll = static_cast<std::size_t>(
        std::llround(opts.enroll_fraction * static_cast<double>(classes.size())));
    n_enroll = std::min(n_enroll, classes.size());

    std::vector<bool> is_template(bench.size(), false);
    std::vector<std::uint32_t> enrolled_classes(classes.begin(),
                                                classes.begin() + static_cast<std::ptrdiff_t>(n_enroll));
    TemplateDB db(S);
    for (std::uint32_t cid : enrolled_classes) {
        const auto& members = bench.class_examples(cid);
        std::size_t pick = *std::min_element(members.begin(), members.end());
        if (opts.selection == TemplateSelection::random_example) {
            std::uniform_int_distribution<std::size_t> d(0, members.size() - 1);
            pick = members[d(rng)];
        }
        is_template[pick] = true;
        db.enroll(std::to_string(cid), signatures[pick]);
    }

    std::vector<std::uint32_t> sorted_enrolled = enrolled_classes;
    std::sort(sorted_enrolled.begin(), sorted_enrolled.end());
    auto enrolled = [&](std::uint32_t cid) {
        return std::binary_search(sorted_enrolled.begin(), sorted_enrolled.end(), cid);
    };

    std::vector<Signature> queries;
    std::vector<TruthLabel> truth;
    for (std::size_t i = 0; i < bench.size(); ++i) {
        if (is_template[i]) continue;
        queries.push_back(signatures[i]);
        if (enrolled(bench.class_id(i)))
            truth.emplace_back(std::to_string(bench.class_id(i)));
        else
            truth.emplace_back(std::nullopt);
    }

    // Time the matching pass, then reuse the distances for every threshold.
    std::vector<Neighbor> nearest(queries.size());
    const auto t0 = std::chrono::steady_clock::now();
    parallel_for(queries.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) nearest[i] = db.nearest(queries[i]);
    });
    const auto t1 = std::chrono::steady_clock::now();

    std::vector<std::string> identities(db.size());
    for (std::size_t i = 0; i < db.size(); ++i) identities[i] = db.identity(i);
    const std::vector<double> grid =
        opts.thresholds.empty() ? default_threshold_grid() : opts.thresholds;
    detail::check_ascending(grid);

    BenchmarkReport report;
    report.template_count = db.size();
    report.query_count = queries.size();
    report.total_seconds = std::chrono::duration<double>(t1 - t0).count();
    report.per_query_seconds =
        queries.empty() ? 0.0 : report.total_seconds / static_cast<double>(queries.size());
    report.curve.points.reserve(grid.size());
    for (double t : grid)
        report.curve.points.push_back(
            detail::make_point(t, detail::tally_neighbors(nearest, identities, truth, t)));
    return report;
}

// ---------------------------------------------------------------------------
// Report CSV: `threshold,yield,fpr,accuracy,n1,n2,n3,n5,n6` rows followed by
// a `templates,queries,total_seconds,per_query_microseconds` summary.
// Undefined metrics are left as empty fields.

inline void write_report_csv(const BenchmarkReport& report, std::ostream& out) {
    auto field = [](const std::optional<double>& v) {
        if (!v) return std::string();
        char buf[64];
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), *v);
        (void)ec;
        return std::string(buf, ptr);
    };
    out << "threshold,yield,fpr,accuracy,n1,n2,n3,n5,n6\n";
    for (const RocPoint& p : report.curve.points) {
        out << field(p.threshold) << ',' << field(p.yield) << ',' << field(p.fpr) << ','
            << field(p.accuracy) << ',' << p.counts.n1 << ',' << p.counts.n2 << ','
            << p.counts.n3 << ',' << p.counts.n5 << ',' << p.counts.n6 << '\n';
    }
    out << "templates,queries,total_seconds,per_query_microseconds\n";
    out << report.template_count << ',' << report.query_count << ','
        << field(report.total_seconds) << ',' << field(report.per_query_seconds * 1e6) << '\n';
}

inline BenchmarkReport read_report_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("empty report");
    if (line.rfind("threshold,yield,fpr,accuracy", 0) != 0)
        throw FormatError("unrecognized report header");

    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::size_t start = 0;
        while (true) {
            const std::size_t comma = s.find(',', start);
            out.push_back(s.substr(start, comma == std::string::npos ? comma : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        return out;
    };
    auto num = [](const std::string& s) -> std::optional<double> {
        if (s.empty()) return std::nullopt;
        double v{};
        auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc() || ptr != s.data() + s.size())
            throw FormatError("malformed number in report: '" + s + "'");
        return v;
    };

    BenchmarkReport report;
    bool summary_next = false;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line.rfind("templates,queries", 0) == 0) {
            summary_next = true;
            continue;
        }
        const auto fields = split(line);
        if (summary_next) {
            if (fields.size() != 4) throw FormatError("malformed timing summary");
            report.template_count = static_cast<std::size_t>(*num(fields[0]));
            report.query_count = static_cast<std::size_t>(*num(fields[1]));
            report.total_seconds = *num(fields[2]);
            report.per_query_seconds = *num(fields[3]) / 1e6;
            summary_next = false;
            continue;
        }
        if (fields.size() != 9) throw FormatError("malformed report row");
        RocPoint p;
        p.threshold = *num(fields[0]);
        p.yield = num(fields[1]);
        p.fpr = num(fields[2]);
        p.accuracy = num(fields[3]);
        p.counts.n1 = static_cast<std::uint64_t>(*num(fields[4]));
        p.counts.n2 = static_cast<std::uint64_t>(*num(fields[5]));
        p.counts.n3 = static_cast<std::uint64_t>(*num(fields[6]));
        p.counts.n5 = static_cast<std::uint64_t>(*num(fields[7]));
        p.counts.n6 = static_cast<std::uint64_t>(*num(fields[8]));
        report.curve.points.push_back(std::move(p));
    }
    return report;
}

} // namespace sigmatch
