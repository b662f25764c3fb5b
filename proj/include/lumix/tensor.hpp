#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lumix {

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized kernels choose their reduction order from
/// the buffer address, so fixed alignment keeps results reproducible.
template <class T>
struct AlignedAllocator {
    using value_type = T;
    static constexpr std::align_val_t kAlign{64};
    AlignedAllocator() = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
    template <class U>
    bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using Storage = std::vector<double, AlignedAllocator<double>>;

/// Thrown when operand extents do not conform. The message names every shape involved.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/**
 * Dense row-major array of doubles with explicit shape.
 *
 * A default-constructed tensor has rank 0 and no elements. Scalars are
 * represented with shape {1}.
 */
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    static Tensor scalar(double value) { return Tensor({1}, value); }
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor identity(std::size_t n);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const noexcept { return data_.size(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    double* raw() noexcept { return data_.data(); }
    const double* raw() const noexcept { return data_.data(); }
    std::vector<double> values() const { return {data_.begin(), data_.end()}; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::initializer_list<std::size_t> index);
    double at(std::initializer_list<std::size_t> index) const;

    /// Value of a single-element tensor.
    double item() const;

    Tensor reshaped(Shape shape) const&;
    Tensor reshaped(Shape shape) &&;

    void fill(double value);

    /// Same shape and the same value in every element.
    bool operator==(const Tensor&) const = default;

private:
    std::size_t offset(std::initializer_list<std::size_t> index) const;

    Shape shape_;
    Storage data_;
};

// Elementwise arithmetic on identically shaped tensors.
Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double factor);
Tensor& add_into(Tensor& dst, const Tensor& src);
Tensor& add_scaled_into(Tensor& dst, const Tensor& src, double factor);

double sum(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);
/// max |a-b| / max(max|a|, max|b|, floor)
double max_rel_diff(const Tensor& a, const Tensor& b, double floor = 1e-300);
bool all_finite(const Tensor& a);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

/// Standard matrix product of rank-2 tensors.
Tensor matmul(const Tensor& a, const Tensor& b);

/// out[rows x n] = x[rows x k] * w[k x n], row-major. Each output row is a
/// function of its own input row only, bit for bit, so stacking order never
/// changes results.
void rowwise_product(const double* x, const double* w, double* out, std::size_t rows, std::size_t k, std::size_t n);
Tensor transpose(const Tensor& a);

/// Softmax along the last axis, with per-row max subtraction.
Tensor softmax_rows(const Tensor& x);

/// Normalizes every row over the last axis to zero mean and unit variance.
Tensor layer_norm_rows(const Tensor& x, double eps = 1e-6);

/**
 * Tensor LoRA update for one token: A[N,d_out,R1], B[N,M,R2], C[N,d_in,R1,R2],
 * h[M,d_in] -> out[N,d_out].
 *
 * Evaluated as three successive contractions:
 *   Ch[n,m,r,s]  = sum_l C[n,l,r,s] h[m,l]
 *   BCh[n,r]     = sum_{m,s} B[n,m,s] Ch[n,m,r,s]
 *   out[n,o]     = sum_r A[n,o,r] BCh[n,r]
 */
Tensor contract_tensor_lora_3step(const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& h);

/// Same value as the 3-step form, computed as one contraction over (m, l, r, s)
/// without building the Ch or BCh intermediates.
Tensor contract_tensor_lora_fused(const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& h);

struct TensorLoraDims {
    std::size_t n_out = 0;
    std::size_t m_in = 0;
    std::size_t d_in = 0;
    std::size_t d_out = 0;
    std::size_t r1 = 0;
    std::size_t r2 = 0;
};

/// Validates the factor/input extents and returns the implied dimensions.
TensorLoraDims tensor_lora_dims(const Tensor& a, const Tensor& b, const Tensor& c, const Shape& h_shape);

}  // namespace lumix
