#include "lumix/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <fmt/format.h>

#include "lumix/contraction.hpp"

namespace lumix {

namespace {


void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw ShapeError(fmt::format("{}: expected rank {}, got shape {}", what, rank, shape_string(t.shape())));
    }
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    for (auto e : shape_) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
    data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    for (auto e : shape_) {
        if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_string(shape_));
    }
    if (shape_size(shape_) != data_.size()) {
        throw ShapeError(fmt::format("shape {} needs {} elements, got {}", shape_string(shape_), shape_size(shape_),
                                     data_.size()));
    }
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw ShapeError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t.data_[i * n + i] = 1.0;
    return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError(fmt::format("axis {} out of range for shape {}", axis, shape_string(shape_)));
    }
    return shape_[axis];
}

std::size_t Tensor::offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size()) {
        throw ShapeError(fmt::format("index of rank {} for shape {}", index.size(), shape_string(shape_)));
    }
    std::size_t off = 0;
    std::size_t axis = 0;
    for (auto i : index) {
        if (i >= shape_[axis]) throw std::out_of_range("tensor index out of range");
        off = off * shape_[axis] + i;
        ++axis;
    }
    return off;
}

double& Tensor::at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
double Tensor::at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

double Tensor::item() const {
    if (data_.size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
    Tensor copy = *this;
    return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
    if (shape_size(shape) != data_.size()) {
        throw ShapeError(fmt::format("cannot reshape {} to {}", shape_string(shape_), shape_string(shape)));
    }
    shape_ = std::move(shape);
    return std::move(*this);
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(fmt::format("{}: shape mismatch {} vs {}", what, shape_string(a.shape()),
                                     shape_string(b.shape())));
    }
}

Tensor operator+(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    return add_into(out, b);
}

Tensor operator-(const Tensor& a, const Tensor& b) {
    Tensor out = a;
    return add_scaled_into(out, b, -1.0);
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "hadamard");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
    return out;
}

Tensor scaled(const Tensor& a, double factor) {
    Tensor out = a;
    for (auto& v : out.data()) v *= factor;
    return out;
}

Tensor& add_into(Tensor& dst, const Tensor& src) {
    require_same_shape(dst, src, "add");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    return dst;
}

Tensor& add_scaled_into(Tensor& dst, const Tensor& src, double factor) {
    require_same_shape(dst, src, "add_scaled");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
    return dst;
}

double sum(const Tensor& a) { return std::accumulate(a.data().begin(), a.data().end(), 0.0); }

double max_abs(const Tensor& a) {
    double m = 0.0;
    for (double v : a.data()) m = std::max(m, std::abs(v));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double max_rel_diff(const Tensor& a, const Tensor& b, double floor) {
    const double scale = std::max({max_abs(a), max_abs(b), floor});
    return max_abs_diff(a, b) / scale;
}

bool all_finite(const Tensor& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](double v) { return std::isfinite(v); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul lhs");
    require_rank(b, 2, "matmul rhs");
    if (a.extent(1) != b.extent(0)) {
        throw ShapeError(fmt::format("matmul: inner extents differ, {} x {}", shape_string(a.shape()),
                                     shape_string(b.shape())));
    }
    Tensor out({a.extent(0), b.extent(1)});
    rowwise_product(a.raw(), b.raw(), out.raw(), a.extent(0), a.extent(1), b.extent(1));
    return out;
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t r = a.extent(0), c = a.extent(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return out;
}

Tensor softmax_rows(const Tensor& x) {
    if (x.rank() == 0) throw ShapeError("softmax_rows on rank-0 tensor");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.raw() + r * cols;
        double* dst = out.raw() + r * cols;
        const double mx = *std::max_element(src, src + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c] = std::exp(src[c] - mx);
            total += dst[c];
        }
        const double inv = 1.0 / total;
        for (std::size_t c = 0; c < cols; ++c) dst[c] *= inv;
    }
    return out;
}

Tensor layer_norm_rows(const Tensor& x, double eps) {
    if (x.rank() == 0) throw ShapeError("layer_norm_rows on rank-0 tensor");
    const std::size_t cols = x.shape().back();
    const std::size_t rows = x.size() / cols;
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = x.raw() + r * cols;
        double* dst = out.raw() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += src[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (src[c] - mean) * (src[c] - mean);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) dst[c] = (src[c] - mean) * inv;
    }
    return out;
}

TensorLoraDims tensor_lora_dims(const Tensor& a, const Tensor& b, const Tensor& c, const Shape& h_shape) {
    auto fail = [&] {
        return ShapeError(fmt::format("tensor lora extents inconsistent: A {} B {} C {} h {}", shape_string(a.shape()),
                                      shape_string(b.shape()), shape_string(c.shape()), shape_string(h_shape)));
    };
    if (a.rank() != 3 || b.rank() != 3 || c.rank() != 4 || h_shape.size() != 2) throw fail();
    TensorLoraDims d;
    d.n_out = a.extent(0);
    d.d_out = a.extent(1);
    d.r1 = a.extent(2);
    d.m_in = b.extent(1);
    d.r2 = b.extent(2);
    d.d_in = c.extent(1);
    if (b.extent(0) != d.n_out || c.extent(0) != d.n_out || c.extent(2) != d.r1 || c.extent(3) != d.r2 ||
        h_shape[0] != d.m_in || h_shape[1] != d.d_in) {
        throw fail();
    }
    return d;
}

Tensor contract_tensor_lora_3step(const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& h) {
    const auto dims = tensor_lora_dims(a, b, c, h.shape());
    Tensor out({dims.n_out, dims.d_out});
    kernels::tensor_lora_3step<double>(dims, a.raw(), b.raw(), c.raw(), h.raw(), out.raw());
    return out;
}

Tensor contract_tensor_lora_fused(const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& h) {
    const auto dims = tensor_lora_dims(a, b, c, h.shape());
    Tensor out({dims.n_out, dims.d_out});
    kernels::tensor_lora_fused<double>(dims, a.raw(), b.raw(), c.raw(), h.raw(), out.raw());
    return out;
}

}  // namespace lumix
