#include "lumix/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <Eigen/Core>
#include <fmt/format.h>

namespace lumix {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

ConstMatrixMap as_rows(const Tensor& t, std::size_t cols) {
    return ConstMatrixMap(t.raw(), static_cast<Eigen::Index>(t.size() / cols), static_cast<Eigen::Index>(cols));
}

MatrixMap as_rows(Tensor& t, std::size_t cols) {
    return MatrixMap(t.raw(), static_cast<Eigen::Index>(t.size() / cols), static_cast<Eigen::Index>(cols));
}

Tape& same_tape(std::initializer_list<Var> vars) {
    Tape* tape = vars.begin()->tape;
    for (const auto& v : vars) {
        if (v.tape == nullptr || v.tape != tape) throw GradError("operands recorded on different tapes");
    }
    return *tape;
}

std::size_t last_extent(const Tensor& t) {
    if (t.rank() == 0) throw ShapeError("operation requires rank >= 1");
    return t.shape().back();
}

}  // namespace

const Tensor& Var::value() const {
    if (tape == nullptr) throw GradError("Var is not attached to a tape");
    return tape->value(*this);
}

void Tape::check(Var v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
        throw GradError(fmt::format("Var {} was not recorded on this tape", v.id));
    }
}

Var Tape::constant(Tensor value) { return record(std::move(value), std::span<const Var>{}, nullptr); }

Var Tape::leaf(Tensor value) {
    Var v = record(std::move(value), std::span<const Var>{}, nullptr);
    nodes_.back().requires_grad = true;
    return v;
}

const Tensor& Tape::value(Var v) const {
    check(v);
    return nodes_[v.id].value;
}

Tensor Tape::grad(Var v) const {
    check(v);
    const Node& node = nodes_[v.id];
    if (node.has_grad) return node.grad;
    return Tensor(node.value.shape());
}

bool Tape::requires_grad(Var v) const {
    check(v);
    return nodes_[v.id].requires_grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    bool needs = false;
    for (const auto& in : inputs) {
        check(in);
        needs = needs || nodes_[in.id].requires_grad;
    }
    Node node;
    node.value = std::move(value);
    node.requires_grad = needs;
    if (needs) node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_buffer(Var v) {
    check(v);
    Node& node = nodes_[v.id];
    if (!node.has_grad) {
        node.grad = Tensor(node.value.shape());
        node.has_grad = true;
    }
    return node.grad;
}

void Tape::accumulate(Var v, const Tensor& g) {
    check(v);
    if (!nodes_[v.id].requires_grad) return;
    Tensor& buf = grad_buffer(v);
    if (buf.size() != g.size()) {
        throw ShapeError(fmt::format("gradient {} does not match value {}", shape_string(g.shape()),
                                     shape_string(buf.shape())));
    }
    for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void Tape::backward(Var loss) {
    check(loss);
    if (nodes_[loss.id].value.size() != 1) {
        throw GradError("backward() needs a scalar loss, got shape " + shape_string(nodes_[loss.id].value.shape()));
    }
    for (auto& node : nodes_) {
        node.has_grad = false;
        node.grad = Tensor();
    }
    grad_buffer(loss).fill(1.0);
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.has_grad || !node.backward) continue;
        node.backward(*this, node.grad);
    }
}

namespace ad {

Var matmul(Var a, Var b) {
    Tape& tape = same_tape({a, b});
    Tensor out = lumix::matmul(a.value(), b.value());
    return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        const Tensor& av = t.value(a);
        const Tensor& bv = t.value(b);
        if (t.requires_grad(a)) {
            Tensor& ga = t.grad_buffer(a);
            as_rows(ga, av.extent(1)).noalias() += as_rows(g, g.extent(1)) * as_rows(bv, bv.extent(1)).transpose();
        }
        if (t.requires_grad(b)) {
            Tensor& gb = t.grad_buffer(b);
            as_rows(gb, bv.extent(1)).noalias() += as_rows(av, av.extent(1)).transpose() * as_rows(g, g.extent(1));
        }
    });
}

Var linear(Var x, Var w, std::optional<Var> bias) {
    Tape& tape = bias ? same_tape({x, w, *bias}) : same_tape({x, w});
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    if (wv.rank() != 2 || last_extent(xv) != wv.extent(0)) {
        throw ShapeError(fmt::format("linear: input {} does not match weight {}", shape_string(xv.shape()),
                                     shape_string(wv.shape())));
    }
    const std::size_t k = wv.extent(0), n = wv.extent(1);
    Shape out_shape = xv.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    rowwise_product(xv.raw(), wv.raw(), out.raw(), xv.size() / k, k, n);
    if (bias) {
        const Tensor& bv = bias->value();
        if (bv.size() != n) {
            throw ShapeError(fmt::format("linear: bias {} for output width {}", shape_string(bv.shape()), n));
        }
        as_rows(out, n).rowwise() += as_rows(bv, n).row(0);
    }
    std::vector<Var> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    return tape.record(std::move(out), inputs, [x, w, bias, k, n](Tape& t, const Tensor& g) {
        const auto gm = as_rows(g, n);
        if (t.requires_grad(x)) {
            as_rows(t.grad_buffer(x), k).noalias() += gm * as_rows(t.value(w), n).transpose();
        }
        if (t.requires_grad(w)) {
            as_rows(t.grad_buffer(w), n).noalias() += as_rows(t.value(x), k).transpose() * gm;
        }
        if (bias && t.requires_grad(*bias)) {
            as_rows(t.grad_buffer(*bias), n).row(0) += gm.colwise().sum();
        }
    });
}

Var add(Var a, Var b) {
    Tape& tape = same_tape({a, b});
    Tensor out = a.value() + b.value();
    return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, g);
    });
}

Var sub(Var a, Var b) {
    Tape& tape = same_tape({a, b});
    Tensor out = a.value() - b.value();
    return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        t.accumulate(a, g);
        t.accumulate(b, scaled(g, -1.0));
    });
}

Var mul(Var a, Var b) {
    Tape& tape = same_tape({a, b});
    Tensor out = hadamard(a.value(), b.value());
    return tape.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
        if (t.requires_grad(a)) t.accumulate(a, hadamard(g, t.value(b)));
        if (t.requires_grad(b)) t.accumulate(b, hadamard(g, t.value(a)));
    });
}

Var scale(Var a, double factor) {
    Tape& tape = same_tape({a});
    Tensor out = scaled(a.value(), factor);
    return tape.record(std::move(out), {a}, [a, factor](Tape& t, const Tensor& g) {
        t.accumulate(a, scaled(g, factor));
    });
}

Var sum(Var a) {
    Tape& tape = same_tape({a});
    Tensor out = Tensor::scalar(lumix::sum(a.value()));
    return tape.record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
        Tensor& ga = t.grad_buffer(a);
        const double gv = g[0];
        for (auto& v : ga.data()) v += gv;
    });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mse(Var pred, const Tensor& target) {
    Tape& tape = same_tape({pred});
    const Tensor& pv = pred.value();
    require_same_shape(pv, target, "mse");
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        const double r = pv[i] - target[i];
        acc += r * r;
    }
    const double inv_n = 1.0 / static_cast<double>(pv.size());
    Tensor out = Tensor::scalar(acc * inv_n);
    return tape.record(std::move(out), {pred}, [pred, target, inv_n](Tape& t, const Tensor& g) {
        const Tensor& pv = t.value(pred);
        Tensor& gp = t.grad_buffer(pred);
        const double f = 2.0 * inv_n * g[0];
        for (std::size_t i = 0; i < pv.size(); ++i) gp[i] += f * (pv[i] - target[i]);
    });
}

Var softmax_rows(Var x) {
    Tape& tape = same_tape({x});
    Tensor out = lumix::softmax_rows(x.value());
    const Var self{&tape, tape.size()};
    return tape.record(std::move(out), {x}, [x, self](Tape& t, const Tensor& g) {
        const Tensor& yv = t.value(self);
        const std::size_t cols = yv.shape().back();
        const std::size_t rows = yv.size() / cols;
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = yv.raw() + r * cols;
            const double* gr = g.raw() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
            double* dst = gx.raw() + r * cols;
            for (std::size_t c = 0; c < cols; ++c) dst[c] += yr[c] * (gr[c] - dot);
        }
    });
}

Var layer_norm(Var x, double eps) {
    Tape& tape = same_tape({x});
    const Tensor& xv = x.value();
    const std::size_t cols = last_extent(xv);
    const std::size_t rows = xv.size() / cols;
    Tensor out(xv.shape());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* src = xv.raw() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += src[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (src[c] - mean) * (src[c] - mean);
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = inv;
        double* dst = out.raw() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dst[c] = (src[c] - mean) * inv;
    }
    const Var self{&tape, tape.size()};
    return tape.record(std::move(out), {x},
                       [x, self, inv_std, cols, rows](Tape& t, const Tensor& g) {
                           const Tensor& normalized = t.value(self);
                           Tensor& gx = t.grad_buffer(x);
                           const double inv_cols = 1.0 / static_cast<double>(cols);
                           for (std::size_t r = 0; r < rows; ++r) {
                               const double* y = normalized.raw() + r * cols;
                               const double* gr = g.raw() + r * cols;
                               double g_mean = 0.0, gy_mean = 0.0;
                               for (std::size_t c = 0; c < cols; ++c) {
                                   g_mean += gr[c];
                                   gy_mean += gr[c] * y[c];
                               }
                               g_mean *= inv_cols;
                               gy_mean *= inv_cols;
                               double* dst = gx.raw() + r * cols;
                               const double inv = (*inv_std)[r];
                               for (std::size_t c = 0; c < cols; ++c) dst[c] += inv * (gr[c] - g_mean - y[c] * gy_mean);
                           }
                       });
}

Var silu(Var x) {
    Tape& tape = same_tape({x});
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] / (1.0 + std::exp(-xv[i]));
    return tape.record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-xv[i]));
            gx[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
        }
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
    Tape& tape = same_tape({x});
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        const double v = xv[i];
        out[i] = 0.5 * v * (1.0 + std::tanh(kGeluC * (v + kGeluA * v * v * v)));
    }
    return tape.record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < xv.size(); ++i) {
            const double v = xv[i];
            const double th = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            gx[i] += g[i] * d;
        }
    });
}

Var reshape(Var x, Shape shape) {
    Tape& tape = same_tape({x});
    Tensor out = x.value().reshaped(std::move(shape));
    return tape.record(std::move(out), {x}, [x](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Var add_suffix(Var x, Var y) {
    Tape& tape = same_tape({x, y});
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    if (yv.rank() > xv.rank() || !std::equal(yv.shape().rbegin(), yv.shape().rend(), xv.shape().rbegin())) {
        throw ShapeError(fmt::format("add_suffix: {} is not a suffix of {}", shape_string(yv.shape()),
                                     shape_string(xv.shape())));
    }
    const std::size_t block = yv.size();
    Tensor out = xv;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += yv[i % block];
    return tape.record(std::move(out), {x, y}, [x, y, block](Tape& t, const Tensor& g) {
        t.accumulate(x, g);
        if (t.requires_grad(y)) {
            Tensor& gy = t.grad_buffer(y);
            for (std::size_t i = 0; i < g.size(); ++i) gy[i % block] += g[i];
        }
    });
}

Var repeat_rows(Var y, std::size_t times) {
    Tape& tape = same_tape({y});
    const Tensor& yv = y.value();
    if (yv.rank() != 2) throw ShapeError("repeat_rows expects a matrix, got " + shape_string(yv.shape()));
    const std::size_t rows = yv.extent(0), cols = yv.extent(1);
    Tensor out({rows * times, cols});
    for (std::size_t r = 0; r < rows * times; ++r)
        std::copy_n(yv.raw() + (r / times) * cols, cols, out.raw() + r * cols);
    return tape.record(std::move(out), {y}, [y, times, rows, cols](Tape& t, const Tensor& g) {
        Tensor& gy = t.grad_buffer(y);
        for (std::size_t r = 0; r < rows * times; ++r)
            for (std::size_t c = 0; c < cols; ++c) gy[(r / times) * cols + c] += g[r * cols + c];
    });
}

Var tile_rows(Var y, std::size_t times) {
    Tape& tape = same_tape({y});
    const Tensor& yv = y.value();
    if (yv.rank() != 2) throw ShapeError("tile_rows expects a matrix, got " + shape_string(yv.shape()));
    const std::size_t rows = yv.extent(0), cols = yv.extent(1);
    Tensor out({rows * times, cols});
    for (std::size_t k = 0; k < times; ++k) std::copy_n(yv.raw(), yv.size(), out.raw() + k * yv.size());
    return tape.record(std::move(out), {y}, [y, times](Tape& t, const Tensor& g) {
        Tensor& gy = t.grad_buffer(y);
        const std::size_t block = gy.size();
        for (std::size_t k = 0; k < times; ++k)
            for (std::size_t i = 0; i < block; ++i) gy[i] += g[k * block + i];
    });
}

namespace {

struct SliceLayout {
    std::size_t slices, tokens, width;
};

SliceLayout slice_layout(const Tensor& x, const Tensor& per_slice, const char* what) {
    if (x.rank() < 2 || per_slice.rank() != 2 || per_slice.extent(0) != x.extent(0) ||
        per_slice.extent(1) != x.shape().back()) {
        throw ShapeError(fmt::format("{}: per-slice rows {} do not match input {}", what,
                                     shape_string(per_slice.shape()), shape_string(x.shape())));
    }
    const std::size_t s = x.extent(0), d = x.shape().back();
    return {s, x.size() / (s * d), d};
}

}  // namespace

Var modulate(Var x, Var shift, Var scale) {
    Tape& tape = same_tape({x, shift, scale});
    const Tensor& xv = x.value();
    const auto lay = slice_layout(xv, shift.value(), "modulate");
    require_same_shape(shift.value(), scale.value(), "modulate");
    const Tensor& sh = shift.value();
    const Tensor& sc = scale.value();
    Tensor out(xv.shape());
    for (std::size_t s = 0; s < lay.slices; ++s)
        for (std::size_t l = 0; l < lay.tokens; ++l) {
            const std::size_t base = (s * lay.tokens + l) * lay.width;
            for (std::size_t c = 0; c < lay.width; ++c)
                out[base + c] = xv[base + c] * (1.0 + sc[s * lay.width + c]) + sh[s * lay.width + c];
        }
    return tape.record(std::move(out), {x, shift, scale}, [x, shift, scale, lay](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x);
        const Tensor& sc = t.value(scale);
        const bool gx_on = t.requires_grad(x), gsh_on = t.requires_grad(shift), gsc_on = t.requires_grad(scale);
        Tensor* gx = gx_on ? &t.grad_buffer(x) : nullptr;
        Tensor* gsh = gsh_on ? &t.grad_buffer(shift) : nullptr;
        Tensor* gsc = gsc_on ? &t.grad_buffer(scale) : nullptr;
        for (std::size_t s = 0; s < lay.slices; ++s)
            for (std::size_t l = 0; l < lay.tokens; ++l) {
                const std::size_t base = (s * lay.tokens + l) * lay.width;
                for (std::size_t c = 0; c < lay.width; ++c) {
                    const double gv = g[base + c];
                    const std::size_t pc = s * lay.width + c;
                    if (gx) (*gx)[base + c] += gv * (1.0 + sc[pc]);
                    if (gsh) (*gsh)[pc] += gv;
                    if (gsc) (*gsc)[pc] += gv * xv[base + c];
                }
            }
    });
}

Var gated_add(Var x, Var y, Var gate) {
    Tape& tape = same_tape({x, y, gate});
    const Tensor& xv = x.value();
    const Tensor& yv = y.value();
    require_same_shape(xv, yv, "gated_add");
    const auto lay = slice_layout(xv, gate.value(), "gated_add");
    const Tensor& gt = gate.value();
    Tensor out = xv;
    for (std::size_t s = 0; s < lay.slices; ++s)
        for (std::size_t l = 0; l < lay.tokens; ++l) {
            const std::size_t base = (s * lay.tokens + l) * lay.width;
            for (std::size_t c = 0; c < lay.width; ++c) out[base + c] += gt[s * lay.width + c] * yv[base + c];
        }
    return tape.record(std::move(out), {x, y, gate}, [x, y, gate, lay](Tape& t, const Tensor& g) {
        t.accumulate(x, g);
        const Tensor& yv = t.value(y);
        const Tensor& gt = t.value(gate);
        Tensor* gy = t.requires_grad(y) ? &t.grad_buffer(y) : nullptr;
        Tensor* gg = t.requires_grad(gate) ? &t.grad_buffer(gate) : nullptr;
        for (std::size_t s = 0; s < lay.slices; ++s)
            for (std::size_t l = 0; l < lay.tokens; ++l) {
                const std::size_t base = (s * lay.tokens + l) * lay.width;
                for (std::size_t c = 0; c < lay.width; ++c) {
                    const double gv = g[base + c];
                    if (gy) (*gy)[base + c] += gv * gt[s * lay.width + c];
                    if (gg) (*gg)[s * lay.width + c] += gv * yv[base + c];
                }
            }
    });
}

Var add_slices(Var x, Var y) {
    Tape& tape = same_tape({x, y});
    const Tensor& xv = x.value();
    const auto lay = slice_layout(xv, y.value(), "add_slices");
    const Tensor& yv = y.value();
    Tensor out = xv;
    for (std::size_t s = 0; s < lay.slices; ++s)
        for (std::size_t l = 0; l < lay.tokens; ++l) {
            const std::size_t base = (s * lay.tokens + l) * lay.width;
            for (std::size_t c = 0; c < lay.width; ++c) out[base + c] += yv[s * lay.width + c];
        }
    return tape.record(std::move(out), {x, y}, [x, y, lay](Tape& t, const Tensor& g) {
        t.accumulate(x, g);
        if (!t.requires_grad(y)) return;
        Tensor& gy = t.grad_buffer(y);
        for (std::size_t s = 0; s < lay.slices; ++s)
            for (std::size_t l = 0; l < lay.tokens; ++l) {
                const std::size_t base = (s * lay.tokens + l) * lay.width;
                for (std::size_t c = 0; c < lay.width; ++c) gy[s * lay.width + c] += g[base + c];
            }
    });
}

Var columns(Var x, std::size_t start, std::size_t width) {
    Tape& tape = same_tape({x});
    const Tensor& xv = x.value();
    if (xv.rank() != 2 || start + width > xv.extent(1) || width == 0) {
        throw ShapeError(fmt::format("columns [{}, {}) out of range for {}", start, start + width,
                                     shape_string(xv.shape())));
    }
    const std::size_t rows = xv.extent(0), cols = xv.extent(1);
    Tensor out({rows, width});
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(xv.raw() + r * cols + start, width, out.raw() + r * width);
    return tape.record(std::move(out), {x}, [x, start, width, rows, cols](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < width; ++c) gx[r * cols + start + c] += g[r * width + c];
    });
}

Var select_slices(Var x, std::size_t group, std::size_t index) {
    Tape& tape = same_tape({x});
    const Tensor& xv = x.value();
    if (xv.rank() == 0 || group == 0 || index >= group || xv.extent(0) % group != 0) {
        throw ShapeError(fmt::format("select_slices: group {} index {} invalid for {}", group, index,
                                     shape_string(xv.shape())));
    }
    const std::size_t count = xv.extent(0) / group;
    const std::size_t slice = xv.size() / xv.extent(0);
    Shape shape = xv.shape();
    shape[0] = count;
    Tensor out(shape);
    for (std::size_t j = 0; j < count; ++j)
        std::copy_n(xv.raw() + (j * group + index) * slice, slice, out.raw() + j * slice);
    return tape.record(std::move(out), {x}, [x, group, index, count, slice](Tape& t, const Tensor& g) {
        Tensor& gx = t.grad_buffer(x);
        for (std::size_t j = 0; j < count; ++j)
            for (std::size_t i = 0; i < slice; ++i) gx[(j * group + index) * slice + i] += g[j * slice + i];
    });
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
    Tape& tape = same_tape({table});
    const Tensor& tv = table.value();
    if (tv.rank() != 2 || indices.empty()) throw ShapeError("gather_rows expects a matrix and indices");
    const std::size_t cols = tv.extent(1);
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    Tensor out({idx.size(), cols});
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= tv.extent(0)) {
            throw std::out_of_range(fmt::format("gather_rows: index {} >= {}", idx[r], tv.extent(0)));
        }
        std::copy_n(tv.raw() + idx[r] * cols, cols, out.raw() + r * cols);
    }
    return tape.record(std::move(out), {table}, [table, idx = std::move(idx), cols](Tape& t, const Tensor& g) {
        Tensor& gt = t.grad_buffer(table);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (std::size_t c = 0; c < cols; ++c) gt[idx[r] * cols + c] += g[r * cols + c];
    });
}

}  // namespace ad

}  // namespace lumix
