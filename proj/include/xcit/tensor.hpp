// Dense row-major tensor with an allocation-tracking backend, plus the
// Param (value + gradient accumulator) building block.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xcit {

struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Transient-allocation accounting. Every Tensor buffer goes through this, so
// a benchmark can bracket an op and read back the high-water mark of live
// bytes it allocated. Single-threaded counters; bench runs are serialized.
// ---------------------------------------------------------------------------
namespace mem {

struct Counters {
    std::size_t live = 0;
    std::size_t peak = 0;
};

inline Counters& counters() {
    static thread_local Counters c;
    return c;
}

inline void on_alloc(std::size_t bytes) {
    Counters& c = counters();
    c.live += bytes;
    c.peak = std::max(c.peak, c.live);
}

inline void on_free(std::size_t bytes) {
    counters().live -= bytes;
}

inline std::size_t live_bytes() { return counters().live; }

// Returns the baseline; pair with peak_since() around the measured region.
inline std::size_t reset_peak() {
    Counters& c = counters();
    c.peak = c.live;
    return c.live;
}

inline std::size_t peak_since(std::size_t baseline) {
    return counters().peak - baseline;
}

}  // namespace mem

template <typename T>
struct TrackingAllocator {
    using value_type = T;
    TrackingAllocator() noexcept = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        mem::on_alloc(n * sizeof(T));
        return static_cast<T*>(::operator new(n * sizeof(T)));
    }
    void deallocate(T* p, std::size_t n) noexcept {
        mem::on_free(n * sizeof(T));
        ::operator delete(p);
    }
    bool operator==(const TrackingAllocator&) const { return true; }
};

// Verify mode adds finite checks after op boundaries. Off by default; the
// test and gradcheck paths switch it on.
inline bool& verify_mode() {
    static bool on = false;
    return on;
}

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <typename T>
class Tensor {
public:
    using Storage = std::vector<T, TrackingAllocator<T>>;

    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<std::size_t>(check_extents()), T(0));
    }

    Tensor(Shape shape, std::initializer_list<T> vals) : shape_(std::move(shape)) {
        std::int64_t n = check_extents();
        if (static_cast<std::int64_t>(vals.size()) != n) {
            throw ShapeError("tensor init list has " + std::to_string(vals.size()) +
                             " values for shape " + shape_str(shape_));
        }
        data_.assign(vals.begin(), vals.end());
        check_finite("construct");
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t extent(int axis) const { return shape_[static_cast<std::size_t>(axis)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // 2-D accessors; most of the math lives on matrices.
    T& at(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * shape_[1] + c)]; }
    const T& at(std::int64_t r, std::int64_t c) const {
        return data_[static_cast<std::size_t>(r * shape_[1] + c)];
    }

    std::int64_t rows() const { return shape_[0]; }
    std::int64_t cols() const { return shape_[1]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    Tensor reshaped(Shape s) const {
        std::int64_t n = 1;
        for (auto e : s) n *= e;
        if (n != numel()) {
            throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(s) +
                             " changes element count");
        }
        Tensor out = *this;
        out.shape_ = std::move(s);
        return out;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    void check_finite(const char* where) const {
        if (!verify_mode()) return;
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) {
                throw NumericError(std::string("non-finite value after ") + where);
            }
        }
    }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape_);
        for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
        return out;
    }

private:
    std::int64_t check_extents() const {
        std::int64_t n = 1;
        for (auto e : shape_) {
            if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape_));
            n *= e;
        }
        return n;
    }

    Shape shape_;
    Storage data_;
};

// Trainable value with an additive gradient accumulator of identical shape.
template <typename T>
struct Param {
    Tensor<T> value;
    Tensor<T> grad;

    Param() = default;
    explicit Param(Tensor<T> v) : value(std::move(v)), grad(value.shape()) {}

    void zero_grad() { grad.fill(T(0)); }
    std::int64_t numel() const { return value.numel(); }
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

// Normal(0, std) resampled until within 2 std, the usual truncated init.
template <typename T>
void fill_trunc_normal(Tensor<T>& t, Rng& rng, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        double v = dist(rng);
        while (std::abs(v) > 2.0 * stddev) v = dist(rng);
        t[i] = static_cast<T>(v);
    }
}

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(dist(rng));
}

}  // namespace xcit
