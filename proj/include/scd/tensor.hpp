#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "scd/errors.hpp"

namespace scd {

// Dense rank-4 shape in batch/channel/height/width order.
struct Shape4 {
    int n = 0;
    int c = 0;
    int h = 0;
    int w = 0;

    std::int64_t numel() const {
        return static_cast<std::int64_t>(n) * c * h * w;
    }
    bool operator==(const Shape4&) const = default;
    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
               std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

// Dense double-precision tensor, row-major in (n, c, h, w). The universal
// value type of the stack; immutable by convention once an op has produced it.
class Tensor4 {
public:
    Tensor4() = default;

    Tensor4(int n, int c, int h, int w, double fill = 0.0)
        : shape_{n, c, h, w} {
        check_shape(shape_);
        v_.assign(static_cast<std::size_t>(shape_.numel()), fill);
    }

    Tensor4(Shape4 s, std::vector<double> data) : shape_(s), v_(std::move(data)) {
        check_shape(shape_);
        if (static_cast<std::int64_t>(v_.size()) != shape_.numel())
            throw ShapeError("Tensor4: data length " + std::to_string(v_.size()) +
                             " does not match shape " + shape_.str());
    }

    const Shape4& shape() const { return shape_; }
    std::int64_t numel() const { return shape_.numel(); }
    bool empty() const { return v_.empty(); }

    double* data() { return v_.data(); }
    const double* data() const { return v_.data(); }
    std::vector<double>& vec() { return v_; }
    const std::vector<double>& vec() const { return v_; }

    std::int64_t index(int n, int c, int y, int x) const {
        return ((static_cast<std::int64_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
    }
    double& at(int n, int c, int y, int x) { return v_[index(n, c, y, x)]; }
    double at(int n, int c, int y, int x) const { return v_[index(n, c, y, x)]; }

    double& operator[](std::int64_t i) { return v_[i]; }
    double operator[](std::int64_t i) const { return v_[i]; }

    bool all_finite() const {
        for (double x : v_)
            if (!std::isfinite(x)) return false;
        return true;
    }

    std::int64_t count_nonfinite() const {
        std::int64_t k = 0;
        for (double x : v_)
            if (!std::isfinite(x)) ++k;
        return k;
    }

private:
    static void check_shape(const Shape4& s) {
        if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
            throw ShapeError("Tensor4: all dimensions must be >= 1, got " + s.str());
    }

    Shape4 shape_;
    std::vector<double> v_;
};

// Integer label raster (class indices, change labels, masks). Spatial dims
// match the tensors it annotates; one plane per batch element.
struct LabelImage {
    int n = 0;
    int h = 0;
    int w = 0;
    std::vector<int> v;

    LabelImage() = default;
    LabelImage(int n_, int h_, int w_, int fill = 0)
        : n(n_), h(h_), w(w_), v(static_cast<std::size_t>(n_) * h_ * w_, fill) {
        if (n < 1 || h < 1 || w < 1)
            throw ShapeError("LabelImage: dimensions must be >= 1");
    }

    std::int64_t index(int b, int y, int x) const {
        return (static_cast<std::int64_t>(b) * h + y) * w + x;
    }
    int& at(int b, int y, int x) { return v[index(b, y, x)]; }
    int at(int b, int y, int x) const { return v[index(b, y, x)]; }
    std::int64_t numel() const { return static_cast<std::int64_t>(n) * h * w; }
};

}  // namespace scd
