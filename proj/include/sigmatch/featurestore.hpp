// Labeled feature-vector datasets: CSV/binary ingestion, class-disjoint
// splitting and a synthetic clustered generator used as a stand-in for the
// opaque upstream descriptors.
#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sigmatch/core.hpp"

namespace sigmatch {

using FeatureVector = std::vector<float>;

struct LabeledExample {
    std::string example_id;
    std::uint32_t class_id = 0;
    FeatureVector features;
};

enum class DatasetFormat { csv, binary };

/// Immutable after construction; safe for concurrent reads.
class Dataset {
public:
    explicit Dataset(std::size_t dimension, std::string origin = {})
        : dim_(dimension), origin_(std::move(origin)) {
        if (dim_ == 0) throw InputError("dataset dimension must be positive");
    }

    void add(const LabeledExample& ex) { add(ex.example_id, ex.class_id, ex.features); }

    void add(std::string example_id, std::uint32_t class_id, std::span<const float> features) {
        if (features.size() != dim_)
            throw DimensionError("example '" + example_id + "' has width " +
                                 std::to_string(features.size()) + ", dataset dimension is " +
                                 std::to_string(dim_));
        for (float v : features)
            if (!std::isfinite(v))
                throw ValueError("non-finite feature value in example '" + example_id + "'");
        if (!id_index_.emplace(example_id, ids_.size()).second)
            throw FormatError("duplicate example_id '" + example_id + "'");
        class_index_[class_id].push_back(ids_.size());
        ids_.push_back(std::move(example_id));
        class_ids_.push_back(class_id);
        features_.insert(features_.end(), features.begin(), features.end());
    }

    std::size_t size() const { return ids_.size(); }
    std::size_t dimension() const { return dim_; }
    const std::string& origin() const { return origin_; }

    const std::string& example_id(std::size_t i) const { return ids_[i]; }
    std::uint32_t class_id(std::size_t i) const { return class_ids_[i]; }
    std::span<const float> features(std::size_t i) const {
        return {features_.data() + i * dim_, dim_};
    }

    std::size_t class_count() const { return class_index_.size(); }

    /// Class ids in ascending order.
    std::vector<std::uint32_t> classes() const {
        std::vector<std::uint32_t> out;
        out.reserve(class_index_.size());
        for (const auto& [cid, _] : class_index_) out.push_back(cid);
        return out;
    }

    const std::vector<std::size_t>& class_examples(std::uint32_t class_id) const {
        auto it = class_index_.find(class_id);
        if (it == class_index_.end())
            throw IndexError("unknown class_id " + std::to_string(class_id));
        return it->second;
    }

    bool has_class(std::uint32_t class_id) const { return class_index_.count(class_id) != 0; }

    /// Copies the listed example rows into a batch matrix (double precision).
    Matrix gather(std::span<const std::size_t> rows) const {
        Matrix out(rows.size(), dim_);
        for (std::size_t r = 0; r < rows.size(); ++r) {
            if (rows[r] >= size()) throw IndexError("example index out of range");
            auto src = features(rows[r]);
            for (std::size_t c = 0; c < dim_; ++c) out(r, c) = src[c];
        }
        return out;
    }

    friend bool operator==(const Dataset& a, const Dataset& b) {
        return a.dim_ == b.dim_ && a.ids_ == b.ids_ && a.class_ids_ == b.class_ids_ &&
               a.features_ == b.features_;
    }

private:
    std::size_t dim_;
    std::string origin_;
    std::vector<float> features_; // row-major size() x dim_
    std::vector<std::string> ids_;
    std::vector<std::uint32_t> class_ids_;
    std::map<std::uint32_t, std::vector<std::size_t>> class_index_;
    std::unordered_map<std::string, std::size_t> id_index_;
};

namespace detail {

inline std::string_view strip_cr(std::string_view line) {
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    return line;
}

inline float parse_feature(std::string_view tok, std::size_t line_no) {
    float v{};
    const char* first = tok.data();
    const char* last = tok.data() + tok.size();
    auto [ptr, ec] = std::from_chars(first, last, v);
    if (ec == std::errc::result_out_of_range)
        throw ValueError("feature value out of range on line " + std::to_string(line_no));
    if (ec != std::errc() || ptr != last)
        throw FormatError("malformed feature value on line " + std::to_string(line_no));
    if (!std::isfinite(v))
        throw ValueError("non-finite feature value on line " + std::to_string(line_no));
    return v;
}

inline Dataset load_dataset_csv(std::istream& in, const std::string& origin) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("empty file");
    std::string_view header = strip_cr(line);
    constexpr std::string_view prefix = "dim=";
    if (header.substr(0, prefix.size()) != prefix)
        throw FormatError("header must start with 'dim='");
    std::size_t dim = 0;
    {
        auto rest = header.substr(prefix.size());
        auto [ptr, ec] = std::from_chars(rest.data(), rest.data() + rest.size(), dim);
        if (ec != std::errc() || ptr != rest.data() + rest.size() || dim == 0)
            throw FormatError("malformed dimension header");
    }
    Dataset ds(dim, origin);
    std::size_t line_no = 1;
    std::vector<float> row(dim);
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view sv = strip_cr(line);
        if (sv.empty()) continue;
        // example_id,class_id,v0,...,v{D-1}
        std::vector<std::string_view> fields;
        std::size_t start = 0;
        while (true) {
            std::size_t comma = sv.find(',', start);
            fields.push_back(sv.substr(start, comma == std::string_view::npos
                                                  ? std::string_view::npos
                                                  : comma - start));
            if (comma == std::string_view::npos) break;
            start = comma + 1;
        }
        if (fields.size() < 2)
            throw FormatError("expected 'example_id,class_id,...' on line " +
                              std::to_string(line_no));
        if (fields.size() != dim + 2)
            throw DimensionError("row width " + std::to_string(fields.size() - 2) +
                                 " does not match dim=" + std::to_string(dim) + " on line " +
                                 std::to_string(line_no));
        std::uint32_t class_id{};
        {
            auto tok = fields[1];
            auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), class_id);
            if (ec != std::errc() || ptr != tok.data() + tok.size())
                throw FormatError("malformed class_id on line " + std::to_string(line_no));
        }
        for (std::size_t c = 0; c < dim; ++c) row[c] = parse_feature(fields[c + 2], line_no);
        ds.add(std::string(fields[0]), class_id, row);
    }
    return ds;
}

inline constexpr char kDatasetMagic[5] = "SGV1";

inline Dataset load_dataset_binary(std::istream& in, const std::string& origin) {
    io::expect_magic(in, kDatasetMagic, "dataset");
    const std::uint32_t dim = io::read_u32(in);
    if (dim == 0) throw FormatError("dataset dimension must be positive");
    const std::uint64_t count = io::read_u64(in);
    Dataset ds(dim, origin);
    std::vector<float> row(dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint16_t id_len = io::read_u16(in);
        std::string id(id_len, '\0');
        if (id_len > 0) io::read_bytes(in, id.data(), id_len);
        const std::uint32_t class_id = io::read_u32(in);
        for (std::uint32_t c = 0; c < dim; ++c) {
            row[c] = io::read_f32(in);
            if (!std::isfinite(row[c]))
                throw ValueError("non-finite feature value in record " + std::to_string(i));
        }
        ds.add(std::move(id), class_id, row);
    }
    io::expect_eof(in, "dataset");
    return ds;
}

inline void save_dataset_csv(const Dataset& ds, std::ostream& out) {
    out << "dim=" << ds.dimension() << "\n";
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.example_id(i) << ',' << ds.class_id(i);
        for (float v : ds.features(i)) {
            auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
            out << ',';
            out.write(buf, ptr - buf);
            (void)ec;
        }
        out << '\n';
    }
}

inline void save_dataset_binary(const Dataset& ds, std::ostream& out) {
    io::write_magic(out, kDatasetMagic);
    io::write_u32(out, static_cast<std::uint32_t>(ds.dimension()));
    io::write_u64(out, ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const std::string& id = ds.example_id(i);
        if (id.size() > 0xffff) throw FormatError("example_id longer than 65535 bytes");
        io::write_u16(out, static_cast<std::uint16_t>(id.size()));
        io::write_bytes(out, id.data(), id.size());
        io::write_u32(out, ds.class_id(i));
        for (float v : ds.features(i)) io::write_f32(out, v);
    }
}

} // namespace detail

inline Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open dataset: " + path.string());
    return format == DatasetFormat::csv ? detail::load_dataset_csv(in, path.string())
                                        : detail::load_dataset_binary(in, path.string());
}

inline void save_dataset(const Dataset& ds, const std::filesystem::path& path,
                         DatasetFormat format) {
    write_file_atomic(path, [&](std::ostream& out) {
        format == DatasetFormat::csv ? detail::save_dataset_csv(ds, out)
                                     : detail::save_dataset_binary(ds, out);
    });
}

/// .csv maps to the text format, anything else to the binary one.
inline DatasetFormat dataset_format_for(const std::filesystem::path& path) {
    return path.extension() == ".csv" ? DatasetFormat::csv : DatasetFormat::binary;
}

struct SplitFractions {
    double train = 0.6;
    double val = 0.2;
    double bench = 0.2;
};

/// Splits by class, never by example: a class's images land wholly in one
/// part, so benchmark plates are unseen during training.
inline std::array<Dataset, 3> split_dataset(const Dataset& ds, SplitFractions fractions,
                                            std::uint64_t seed) {
    const std::array<double, 3> f = {fractions.train, fractions.val, fractions.bench};
    for (double x : f)
        if (!(x >= 0.0)) throw InputError("split fractions must be non-negative");
    const double sum = f[0] + f[1] + f[2];
    if (std::abs(sum - 1.0) > 1e-9) throw InputError("split fractions must sum to 1");

    std::vector<std::uint32_t> classes = ds.classes();
    std::mt19937_64 rng(seed);
    std::shuffle(classes.begin(), classes.end(), rng);

    const auto total = static_cast<double>(classes.size());
    const std::size_t b1 = static_cast<std::size_t>(std::llround(f[0] * total));
    const std::size_t b2 = static_cast<std::size_t>(std::llround((f[0] + f[1]) * total));
    const std::array<std::pair<std::size_t, std::size_t>, 3> ranges = {
        std::pair{std::size_t{0}, b1}, std::pair{b1, b2}, std::pair{b2, classes.size()}};

    static const char* names[3] = {"train", "val", "bench"};
    for (int part = 0; part < 3; ++part)
        if (f[part] > 0.0 && ranges[part].second == ranges[part].first)
            throw SplitError(std::string(names[part]) + " fraction " + std::to_string(f[part]) +
                             " yields zero classes");

    std::map<std::uint32_t, int> part_of_class;
    for (int part = 0; part < 3; ++part)
        for (std::size_t i = ranges[part].first; i < ranges[part].second; ++i)
            part_of_class[classes[i]] = part;

    std::array<Dataset, 3> out = {Dataset(ds.dimension(), ds.origin()),
                                  Dataset(ds.dimension(), ds.origin()),
                                  Dataset(ds.dimension(), ds.origin())};
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const int part = part_of_class.at(ds.class_id(i));
        out[static_cast<std::size_t>(part)].add(ds.example_id(i), ds.class_id(i),
                                                ds.features(i));
    }
    return out;
}

/// Isotropic Gaussian clusters: one center per class at scale inter_spread,
/// per-example noise at scale intra_spread.
inline Dataset generate_synthetic(std::size_t n_classes, std::size_t per_class, std::size_t dim,
                                  double intra_spread, double inter_spread, std::uint64_t seed) {
    if (n_classes < 1) throw InputError("n_classes must be >= 1");
    if (per_class < 1) throw InputError("per_class must be >= 1");
    if (dim < 2) throw InputError("dim must be >= 2");
    if (!(intra_spread > 0.0) || !(inter_spread > 0.0))
        throw InputError("spreads must be positive");

    std::string origin = "synth:classes=" + std::to_string(n_classes) +
                         ",per_class=" + std::to_string(per_class) +
                         ",dim=" + std::to_string(dim) + ",seed=" + std::to_string(seed);
    Dataset ds(dim, std::move(origin));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<double> center(dim);
    std::vector<float> row(dim);
    for (std::size_t k = 0; k < n_classes; ++k) {
        for (std::size_t c = 0; c < dim; ++c) center[c] = inter_spread * unit(rng);
        for (std::size_t e = 0; e < per_class; ++e) {
            for (std::size_t c = 0; c < dim; ++c)
                row[c] = static_cast<float>(center[c] + intra_spread * unit(rng));
            ds.add("c" + std::to_string(k) + "_e" + std::to_string(e),
                   static_cast<std::uint32_t>(k), row);
        }
    }
    return ds;
}

} // namespace sigmatch
