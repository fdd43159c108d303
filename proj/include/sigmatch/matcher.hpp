// Template database and matching engine. One signature per identity,
// stored unit-normalized so a comparison is a dot product; queries are
// matched exhaustively by cosine distance with a rejection threshold.
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "sigmatch/core.hpp"

namespace sigmatch {

/// 1 - cos(a, b), in [0, 2].
inline double cosine_distance(const Signature& a, const Signature& b) {
    if (a.dim() != b.dim())
        throw DimensionError("signature dimensions differ: " + std::to_string(a.dim()) +
                             " vs " + std::to_string(b.dim()));
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        const double x = a.values[i];
        const double y = b.values[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) throw ValueError("cosine distance of a zero vector");
    return 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
}

struct MatchResult {
    bool accepted = false;
    std::string identity;  // set when accepted
    double distance = std::numeric_limits<double>::infinity(); // best distance seen
};

/// Nearest template: index into the database (or npos when empty) plus the
/// cosine distance.
struct Neighbor {
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t index = npos;
    double distance = std::numeric_limits<double>::infinity();
};

struct MatchTiming {
    std::size_t queries = 0;
    double total_seconds = 0.0;
    double per_query_seconds = 0.0;
};

/// Concurrent match/nearest calls are safe while no enroll is in flight;
/// enrollment needs exclusive access.
class TemplateDB {
public:
    explicit TemplateDB(std::size_t dimension) : dim_(dimension) {
        if (dim_ == 0) throw InputError("template dimension must be positive");
    }

    std::size_t dimension() const { return dim_; }
    std::size_t size() const { return identities_.size(); }
    bool contains(const std::string& identity) const { return index_.count(identity) != 0; }

    const std::string& identity(std::size_t i) const { return identities_[i]; }
    std::span<const float> stored(std::size_t i) const {
        return {vectors_.data() + i * dim_, dim_};
    }

    /// Stores the signature unit-normalized. One enrollment per identity.
    void enroll(const std::string& identity, const Signature& sig) {
        if (sig.dim() != dim_)
            throw DimensionError("signature dimension " + std::to_string(sig.dim()) +
                                 " does not match database dimension " + std::to_string(dim_));
        double norm_sq = 0.0;
        for (float v : sig.values) {
            if (!std::isfinite(v)) throw ValueError("non-finite signature value");
            norm_sq += static_cast<double>(v) * static_cast<double>(v);
        }
        if (norm_sq == 0.0) throw ValueError("cannot enroll a zero signature");
        if (index_.count(identity))
            throw DuplicateError("identity '" + identity + "' is already enrolled");
        const double inv = 1.0 / std::sqrt(norm_sq);
        index_.emplace(identity, identities_.size());
        identities_.push_back(identity);
        vectors_.reserve(vectors_.size() + dim_);
        for (float v : sig.values) vectors_.push_back(static_cast<float>(v * inv));
    }

    Neighbor nearest(const Signature& query) const {
        if (query.dim() != dim_)
            throw DimensionError("query dimension " + std::to_string(query.dim()) +
                                 " does not match database dimension " + std::to_string(dim_));
        double norm_sq = 0.0;
        for (float v : query.values) {
            if (!std::isfinite(v)) throw ValueError("non-finite query value");
            norm_sq += static_cast<double>(v) * static_cast<double>(v);
        }
        if (norm_sq == 0.0) throw ValueError("cannot match a zero query");
        if (size() == 0) return {};

        // Round the unit query exactly like enroll() rounds templates, so a
        // query identical to an enrolled signature lands at distance 0.
        std::vector<float> q(dim_);
        const double inv = 1.0 / std::sqrt(norm_sq);
        for (std::size_t i = 0; i < dim_; ++i)
            q[i] = static_cast<float>(query.values[i] * inv);

        if (threads::count() <= 1 || size() < 64) return scan_range(q, 0, size());

        std::vector<Neighbor> partial(parallel_chunks(size()));
        parallel_for_indexed(size(), [&](std::size_t w, std::size_t lo, std::size_t hi) {
            partial[w] = scan_range(q, lo, hi);
        });
        // combine in chunk order so ties keep the earliest enrollment
        Neighbor best;
        for (const Neighbor& cand : partial)
            if (cand.index != Neighbor::npos && cand.distance < best.distance) best = cand;
        return best;
    }

    /// Accept when the nearest template is within the threshold; ties go to
    /// the earliest enrollment. An empty database rejects with an infinite
    /// best distance.
    MatchResult match(const Signature& query, double threshold) const {
        const Neighbor n = nearest(query);
        MatchResult r;
        r.distance = n.distance;
        if (n.index != Neighbor::npos && n.distance <= threshold) {
            r.accepted = true;
            r.identity = identities_[n.index];
        }
        return r;
    }

    std::vector<MatchResult> match_batch(std::span<const Signature> queries, double threshold,
                                         MatchTiming* timing = nullptr) const {
        std::vector<MatchResult> results(queries.size());
        const auto t0 = std::chrono::steady_clock::now();
        parallel_for(queries.size(), [&](std::size_t lo, std::size_t hi) {
            for (std::size_t i = lo; i < hi; ++i) results[i] = match(queries[i], threshold);
        });
        const auto t1 = std::chrono::steady_clock::now();
        if (timing) {
            timing->queries = queries.size();
            timing->total_seconds = std::chrono::duration<double>(t1 - t0).count();
            timing->per_query_seconds =
                queries.empty() ? 0.0 : timing->total_seconds / static_cast<double>(queries.size());
        }
        return results;
    }

private:
    friend TemplateDB load_db(const std::filesystem::path&);

    /// Used when restoring from disk: the values are already normalized and
    /// must survive the round trip bit-exactly, so no renormalization.
    void insert_stored(std::string identity, std::span<const float> unit_values) {
        if (unit_values.size() != dim_)
            throw FormatError("stored template width does not match database dimension");
        double norm_sq = 0.0;
        for (float v : unit_values) {
            if (!std::isfinite(v)) throw FormatError("non-finite stored template value");
            norm_sq += static_cast<double>(v) * static_cast<double>(v);
        }
        if (std::abs(norm_sq - 1.0) > 1e-5)
            throw FormatError("stored template is not unit-normalized");
        if (!index_.emplace(identity, identities_.size()).second)
            throw FormatError("duplicate identity in template database file");
        identities_.push_back(std::move(identity));
        vectors_.insert(vectors_.end(), unit_values.begin(), unit_values.end());
    }

    Neighbor scan_range(const std::vector<float>& unit_query, std::size_t lo,
                        std::size_t hi) const {
        // For unit u, v: 1 - u.v == |u - v|^2 / 2. The squared-difference
        // form is exact at 0 for identical vectors; results are clamped to
        // the cosine-distance range [0, 2].
        Neighbor best;
        for (std::size_t i = lo; i < hi; ++i) {
            const float* row = vectors_.data() + i * dim_;
            double acc = 0.0;
            for (std::size_t c = 0; c < dim_; ++c) {
                const double d =
                    static_cast<double>(unit_query[c]) - static_cast<double>(row[c]);
                acc += d * d;
            }
            const double dist = std::min(2.0, 0.5 * acc);
            if (dist < best.distance) {
                best.distance = dist;
                best.index = i;
            }
        }
        return best;
    }

    std::size_t dim_;
    std::vector<std::string> identities_;
    std::vector<float> vectors_; // row-major, unit rows
    std::unordered_map<std::string, std::size_t> index_;
};

namespace detail {
inline constexpr char kDbMagic[5] = "TMDB";
inline constexpr std::uint32_t kDbVersion = 1;
} // namespace detail

inline void save_db(const TemplateDB& db, const std::filesystem::path& path) {
    write_file_atomic(path, [&](std::ostream& out) {
        io::write_magic(out, detail::kDbMagic);
        io::write_u32(out, detail::kDbVersion);
        io::write_u32(out, static_cast<std::uint32_t>(db.dimension()));
        io::write_u64(out, db.size());
        for (std::size_t i = 0; i < db.size(); ++i) {
            const std::string& id = db.identity(i);
            if (id.size() > 0xffff) throw FormatError("identity longer than 65535 bytes");
            io::write_u16(out, static_cast<std::uint16_t>(id.size()));
            io::write_bytes(out, id.data(), id.size());
            for (float v : db.stored(i)) io::write_f32(out, v);
        }
    });
}

inline TemplateDB load_db(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open template database: " + path.string());
    io::expect_magic(in, detail::kDbMagic, "template database");
    const std::uint32_t version = io::read_u32(in);
    if (version != detail::kDbVersion)
        throw FormatError("unsupported template database version " + std::to_string(version));
    const std::uint32_t dim = io::read_u32(in);
    if (dim == 0) throw FormatError("template dimension must be positive");
    const std::uint64_t count = io::read_u64(in);
    TemplateDB db(dim);
    std::vector<float> row(dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint16_t len = io::read_u16(in);
        std::string id(len, '\0');
        if (len > 0) io::read_bytes(in, id.data(), len);
        for (std::uint32_t c = 0; c < dim; ++c) row[c] = io::read_f32(in);
        db.insert_stored(std::move(id), row);
    }
    io::expect_eof(in, "template database");
    return db;
}

} // namespace sigmatch
