#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynhead {

/// Dense 4-D shape: (batch, channels, height, width), row-major with width fastest.
struct Shape {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    std::int64_t spatial() const { return static_cast<std::int64_t>(h) * w; }

    std::int64_t index(int b, int ch, int y, int x) const {
        return ((static_cast<std::int64_t>(b) * c + ch) * h + y) * w + x;
    }

    bool operator==(const Shape&) const = default;

    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

namespace detail {

struct TensorData {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;   // allocated on first accumulation
    bool requires_grad = false;
};

} // namespace detail

/// Shared-handle dense f64 tensor. Copies alias the same storage; use clone()
/// for a deep copy. All dimensions must be >= 1.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s) { return filled(s, 0.0); }

    static Tensor filled(Shape s, double value) {
        check_shape(s);
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorData>();
        t.impl_->shape = s;
        t.impl_->values.assign(static_cast<std::size_t>(s.numel()), value);
        return t;
    }

    static Tensor from_values(Shape s, std::vector<double> values) {
        check_shape(s);
        if (static_cast<std::int64_t>(values.size()) != s.numel())
            throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                        " does not match shape " + s.str());
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorData>();
        t.impl_->shape = s;
        t.impl_->values = std::move(values);
        return t;
    }

    explicit operator bool() const { return impl_ != nullptr; }

    const Shape& shape() const { return impl_->shape; }
    std::int64_t numel() const { return impl_->shape.numel(); }

    double* data() { return impl_->values.data(); }
    const double* data() const { return impl_->values.data(); }
    std::span<const double> values() const { return impl_->values; }
    std::span<double> values_mut() { return impl_->values; }

    double& at(int b, int c, int y, int x) { return impl_->values[impl_->shape.index(b, c, y, x)]; }
    double at(int b, int c, int y, int x) const { return impl_->values[impl_->shape.index(b, c, y, x)]; }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    /// Gradient buffer, zero-initialized on first access.
    std::vector<double>& grad() {
        if (impl_->grad.empty()) impl_->grad.assign(impl_->values.size(), 0.0);
        return impl_->grad;
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }

    Tensor clone() const {
        Tensor t = from_values(impl_->shape, impl_->values);
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    void fill(double v) { std::fill(impl_->values.begin(), impl_->values.end(), v); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    bool all_finite() const {
        for (double v : impl_->values)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Identity of the underlying storage; used by the tape.
    const void* id() const { return impl_.get(); }

private:
    static void check_shape(const Shape& s) {
        if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
            throw std::invalid_argument("tensor: all dimensions must be >= 1, got " + s.str());
    }

    std::shared_ptr<detail::TensorData> impl_;
};

/// Deterministic RNG. Wraps mt19937_64 with explicit value mappings so that
/// sequences do not depend on library-specific distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    std::int64_t uniform_int(std::int64_t n) {
        return static_cast<std::int64_t>(uniform() * static_cast<double>(n)) % n;
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    Tensor tensor_normal(Shape s, double mean, double stddev) {
        Tensor t = Tensor::zeros(s);
        for (auto& v : t.values_mut()) v = normal(mean, stddev);
        return t;
    }

    Tensor tensor_uniform(Shape s, double lo, double hi) {
        Tensor t = Tensor::zeros(s);
        for (auto& v : t.values_mut()) v = uniform(lo, hi);
        return t;
    }

private:
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Derives an independent substream seed from a master seed, a stream tag and
/// an index (splitmix64 finalizer).
inline std::uint64_t substream_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t idx = 0) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1) + 0xBF58476D1CE4E5B9ull * (idx + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

} // namespace dynhead
