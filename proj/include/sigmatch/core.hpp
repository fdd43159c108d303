// Core types shared across the sigmatch library: error hierarchy, the
// row-major double matrix used for batch math, the Signature vector,
// seed derivation, thread configuration and little-endian file helpers.
#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

namespace sigmatch {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class FormatError : public Error {
public:
    using Error::Error;
};
class DimensionError : public Error {
public:
    using Error::Error;
};
class ValueError : public Error {
public:
    using Error::Error;
};
class SplitError : public Error {
public:
    using Error::Error;
};
class MiningError : public Error {
public:
    using Error::Error;
};
class IndexError : public Error {
public:
    using Error::Error;
};
class StateError : public Error {
public:
    using Error::Error;
};
class DuplicateError : public Error {
public:
    using Error::Error;
};
class InputError : public Error {
public:
    using Error::Error;
};
class UndefinedMetric : public Error {
public:
    using Error::Error;
};
class DivergenceError : public Error {
public:
    using Error::Error;
};
class BatchTooSmall : public Error {
public:
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Matrix: dense row-major, double precision. All batch math runs in double;
// only persisted tensors (model weights, stored templates, dataset features)
// are 32-bit floats.

class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double value = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, value) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    void fill(double value) { std::fill(data_.begin(), data_.end(), value); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// A matching-ready embedding vector. Stored as float32, the same precision
// every on-disk format uses.
struct Signature {
    std::vector<float> values;

    Signature() = default;
    explicit Signature(std::vector<float> v) : values(std::move(v)) {}
    explicit Signature(std::span<const double> v) {
        values.reserve(v.size());
        for (double x : v) values.push_back(static_cast<float>(x));
    }

    std::size_t dim() const { return values.size(); }

    double norm() const {
        double s = 0.0;
        for (float x : values) s += static_cast<double>(x) * static_cast<double>(x);
        return std::sqrt(s);
    }
};

// ---------------------------------------------------------------------------
// Seeding. Every random choice in the library funnels through a caller seed;
// derived streams use splitmix64 so (seed, epoch, batch) tuples map to
// independent engine seeds.

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a = 0, std::uint64_t b = 0) {
    return splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b);
}

// ---------------------------------------------------------------------------
// Thread configuration. Work is always split into per-thread chunks that own
// disjoint output rows, so results are bit-identical for any thread count.

namespace threads {

inline std::atomic<int>& count_ref() {
    static std::atomic<int> n{1};
    return n;
}

inline int count() { return count_ref().load(std::memory_order_relaxed); }

inline void set_count(int n) {
    count_ref().store(n < 1 ? 1 : n, std::memory_order_relaxed);
}

} // namespace threads

// Runs fn(worker, begin, end) over [0, n) split into contiguous chunks, one
// per worker. fn must not touch state shared between chunks.
template <typename Fn>
void parallel_for_indexed(std::size_t n, Fn&& fn) {
    const int want = threads::count();
    if (want <= 1 || n < 2) {
        if (n > 0) fn(std::size_t{0}, std::size_t{0}, n);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(want), n);
    std::vector<std::thread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = n * w / workers;
        const std::size_t end = n * (w + 1) / workers;
        if (w + 1 == workers) {
            fn(w, begin, end);
        } else {
            pool.emplace_back([&fn, w, begin, end] { fn(w, begin, end); });
        }
    }
    for (auto& t : pool) t.join();
}

// Range-only variant: fn(begin, end).
template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    parallel_for_indexed(n, [&fn](std::size_t, std::size_t begin, std::size_t end) {
        fn(begin, end);
    });
}

// Number of chunks parallel_for will use for n items.
inline std::size_t parallel_chunks(std::size_t n) {
    const int want = threads::count();
    if (want <= 1 || n < 2) return n > 0 ? 1 : 0;
    return std::min<std::size_t>(static_cast<std::size_t>(want), n);
}

// ---------------------------------------------------------------------------
// Little-endian binary IO. Reads throw FormatError on truncation.

namespace io {

inline void write_bytes(std::ostream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void read_bytes(std::istream& in, void* p, std::size_t n) {
    in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n)
        throw FormatError("unexpected end of file");
}

template <typename UInt>
void write_uint_le(std::ostream& out, UInt v) {
    unsigned char buf[sizeof(UInt)];
    for (std::size_t i = 0; i < sizeof(UInt); ++i)
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    write_bytes(out, buf, sizeof(UInt));
}

template <typename UInt>
UInt read_uint_le(std::istream& in) {
    unsigned char buf[sizeof(UInt)];
    read_bytes(in, buf, sizeof(UInt));
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i)
        v |= static_cast<UInt>(buf[i]) << (8 * i);
    return v;
}

inline void write_u16(std::ostream& out, std::uint16_t v) { write_uint_le(out, v); }
inline void write_u32(std::ostream& out, std::uint32_t v) { write_uint_le(out, v); }
inline void write_u64(std::ostream& out, std::uint64_t v) { write_uint_le(out, v); }
inline std::uint16_t read_u16(std::istream& in) { return read_uint_le<std::uint16_t>(in); }
inline std::uint32_t read_u32(std::istream& in) { return read_uint_le<std::uint32_t>(in); }
inline std::uint64_t read_u64(std::istream& in) { return read_uint_le<std::uint64_t>(in); }

inline void write_f32(std::ostream& out, float v) {
    write_u32(out, std::bit_cast<std::uint32_t>(v));
}
inline float read_f32(std::istream& in) {
    return std::bit_cast<float>(read_u32(in));
}
inline void write_f64(std::ostream& out, double v) {
    write_u64(out, std::bit_cast<std::uint64_t>(v));
}
inline double read_f64(std::istream& in) {
    return std::bit_cast<double>(read_u64(in));
}

inline void write_magic(std::ostream& out, const char (&magic)[5]) {
    write_bytes(out, magic, 4);
}

inline void expect_magic(std::istream& in, const char (&magic)[5], const char* what) {
    char buf[4];
    read_bytes(in, buf, 4);
    if (std::memcmp(buf, magic, 4) != 0)
        throw FormatError(std::string("bad magic for ") + what);
}

inline void expect_eof(std::istream& in, const char* what) {
    if (in.peek() != std::char_traits<char>::eof())
        throw FormatError(std::string("trailing data in ") + what);
}

} // namespace io

// Writes through a temp file in the destination directory and renames into
// place, so readers never observe a partially written file.
template <typename Writer>
void write_file_atomic(const std::filesystem::path& path, Writer&& writer) {
    namespace fs = std::filesystem;
    fs::path dir = path.parent_path();
    if (dir.empty()) dir = ".";
    static std::atomic<std::uint64_t> counter{0};
    fs::path tmp = dir / (path.filename().string() + ".tmp" +
                          std::to_string(counter.fetch_add(1)) + "-" +
                          std::to_string(static_cast<std::uint64_t>(
                              std::hash<std::thread::id>{}(std::this_thread::get_id()) & 0xffff)));
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open for writing: " + tmp.string());
        writer(out);
        out.flush();
        if (!out) {
            std::error_code ec;
            fs::remove(tmp, ec);
            throw Error("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp, ec);
        throw Error("cannot rename into place: " + path.string());
    }
}

} // namespace sigmatch
