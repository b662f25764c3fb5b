#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "lumix/tensor.hpp"

namespace lumix {

class Tape;

/// Handle to a value recorded on a Tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class GradError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/**
 * Operation log for reverse-mode differentiation.
 *
 * Every primitive appends one node holding its output value and a closure
 * that maps the output gradient onto its inputs. backward() replays the log
 * from the loss towards the leaves, visiting each node once. Nodes are kept
 * in a deque so references to recorded values stay valid while recording.
 */
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var leaf(Tensor value);

    const Tensor& value(Var v) const;
    /// Gradient accumulated by the last backward(). Zero when v is off the loss path.
    Tensor grad(Var v) const;
    bool requires_grad(Var v) const;

    void backward(Var loss);

    std::size_t size() const noexcept { return nodes_.size(); }

    // Op-author interface.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn fn);
    /// Gradient buffer of a node, zero-initialized on first access.
    Tensor& grad_buffer(Var v);
    void accumulate(Var v, const Tensor& g);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool has_grad = false;
        BackwardFn backward;
    };

    void check(Var v) const;

    std::deque<Node> nodes_;
};

// Differentiable primitives. Unless noted, tensors are treated as
// [rows x last-extent] where "rows" is the product of the leading extents.
namespace ad {

Var matmul(Var a, Var b);
/// x[..., k] * w[k, n] (+ bias[n]) -> [..., n]
Var linear(Var x, Var w, std::optional<Var> bias = std::nullopt);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
Var mean(Var a);
/// Mean of squared differences over all elements; target is constant.
Var mse(Var pred, const Tensor& target);
Var softmax_rows(Var x);
Var layer_norm(Var x, double eps = 1e-6);
Var silu(Var x);
Var gelu(Var x);
Var reshape(Var x, Shape shape);

/// x[..., L, d] + y[L, d] broadcast over the leading extents.
Var add_suffix(Var x, Var y);
/// y[K, d] -> [K*times, d], block k repeated `times` times consecutively.
Var repeat_rows(Var y, std::size_t times);
/// y[K, d] -> [K*times, d], the whole table tiled `times` times.
Var tile_rows(Var y, std::size_t times);
/// x[S, L, d] * (1 + scale[S, d]) + shift[S, d]
Var modulate(Var x, Var shift, Var scale);
/// x[S, L, d] + gate[S, d] * y[S, L, d]
Var gated_add(Var x, Var y, Var gate);
/// x[S, L, d] + y[S, d] broadcast over L.
Var add_slices(Var x, Var y);
/// Columns [start, start+width) of x[R, C].
Var columns(Var x, std::size_t start, std::size_t width);
/// Slices s with s % group == index from x[S, ...] -> [S/group, ...].
Var select_slices(Var x, std::size_t group, std::size_t index);
/// table[V, d] rows picked by indices -> [n, d].
Var gather_rows(Var table, std::span<const std::size_t> indices);

}  // namespace ad

}  // namespace lumix
