#pragma once

#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "echolab/common.hpp"
#include "echolab/rng.hpp"

namespace echolab {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); i++) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

namespace detail {

// 64-byte-aligned storage so Eigen's vectorized kernels always see the same
// alignment; heap-address-dependent peeling would otherwise make identical
// computations differ in the last bit between runs.
struct AlignedBuf {
    double* p = nullptr;
    size_t n = 0;

    explicit AlignedBuf(size_t count) : n(count) {
        size_t bytes = (count * sizeof(double) + 63) / 64 * 64;
        if (bytes == 0) bytes = 64;
        p = static_cast<double*>(std::aligned_alloc(64, bytes));
        if (!p) throw std::bad_alloc();
        std::fill_n(p, count, 0.0);
    }
    AlignedBuf(const AlignedBuf& o) : AlignedBuf(o.n) { std::copy_n(o.p, n, p); }
    AlignedBuf& operator=(const AlignedBuf&) = delete;
    ~AlignedBuf() { std::free(p); }
};

}  // namespace detail

// Dense double tensor. Buffers are shared on copy; graph code treats values
// as immutable after construction, mutation happens via clone() or the
// optimizer which owns its parameter buffers.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          buf_(std::make_shared<detail::AlignedBuf>(shape_numel(shape_))) {}

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        std::fill_n(t.buf_->p, t.buf_->n, v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    static Tensor from(Shape shape, const std::vector<double>& values) {
        check(shape_numel(shape) == values.size(), "tensor init size mismatch");
        Tensor t(std::move(shape));
        std::copy(values.begin(), values.end(), t.buf_->p);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(shape));
        for (size_t i = 0; i < t.buf_->n; i++) t.buf_->p[i] = stddev * rng.normal();
        return t;
    }

    bool defined() const { return static_cast<bool>(buf_); }
    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape_.size()); }
    size_t size() const { return buf_ ? buf_->n : 0; }

    double* data() { return buf_->p; }
    const double* data() const { return buf_->p; }
    double& operator[](size_t i) { return buf_->p[i]; }
    double operator[](size_t i) const { return buf_->p[i]; }

    double item() const {
        check(size() == 1, "item() on non-scalar tensor");
        return buf_->p[0];
    }

    // 4-d accessors for (B,C,H,W) layouts
    double& at4(int b, int c, int h, int w) {
        int C = shape_[1], H = shape_[2], W = shape_[3];
        return buf_->p[((static_cast<size_t>(b) * C + c) * H + h) * W + w];
    }
    double at4(int b, int c, int h, int w) const {
        int C = shape_[1], H = shape_[2], W = shape_[3];
        return buf_->p[((static_cast<size_t>(b) * C + c) * H + h) * W + w];
    }

    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.buf_ = std::make_shared<detail::AlignedBuf>(*buf_);
        return t;
    }

    Tensor reshaped(Shape new_shape) const {
        check(shape_numel(new_shape) == size(), "reshape numel mismatch");
        Tensor t = *this;  // shares buffer
        t.shape_ = std::move(new_shape);
        return t;
    }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    bool all_finite() const {
        for (size_t i = 0; i < buf_->n; i++)
            if (!std::isfinite(buf_->p[i])) return false;
        return true;
    }

    void fill(double v) { std::fill_n(buf_->p, buf_->n, v); }

    uint64_t content_hash() const { return fnv1a(buf_->p, buf_->n * sizeof(double)); }

private:
    Shape shape_;
    std::shared_ptr<detail::AlignedBuf> buf_;
};

inline bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) return false;
    for (size_t i = 0; i < a.size(); i++)
        if (a[i] != b[i]) return false;
    return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); i++) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

}  // namespace echolab
