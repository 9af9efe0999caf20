#pragma once

// Dense fp64 tensors with reverse-mode automatic differentiation on an
// explicit tape. Everything is 64-bit and single-threaded with fixed loop
// order, so a forward pass is bit-reproducible for fixed inputs.
//
// Ops record a backward closure on the tape only when some input requires a
// gradient and the tape is active; evaluation passes run with an inactive
// tape and pay no autodiff cost.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "cas/error.hpp"
#include "cas/rng.hpp"

namespace cas {

struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // same length as data whenever requires_grad

    std::size_t size() const { return data.size(); }

    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }

    void zero_grad() {
        std::fill(grad.begin(), grad.end(), 0.0);
    }
};

using TensorRef = std::shared_ptr<Tensor>;

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

inline std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("zero dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

inline TensorRef tensor(std::vector<std::size_t> shape) {
    auto t = std::make_shared<Tensor>();
    t->data.assign(shape_product(shape), 0.0);
    t->shape = std::move(shape);
    return t;
}

inline TensorRef tensor(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_product(shape) != data.size())
        throw ShapeError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    return t;
}

inline TensorRef scalar_tensor(double v) {
    return tensor({1}, {v});
}

// Trainable parameter, uniformly initialized in [-bound, bound].
inline TensorRef param(std::vector<std::size_t> shape, Rng& rng, double bound) {
    auto t = tensor(std::move(shape));
    for (double& x : t->data) x = rng.uniform(-bound, bound);
    t->requires_grad = true;
    t->ensure_grad();
    return t;
}

inline TensorRef constant_like(const TensorRef& x, double v) {
    auto t = tensor(x->shape);
    std::fill(t->data.begin(), t->data.end(), v);
    return t;
}

inline bool all_finite(const Tensor& t) {
    for (double v : t.data)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Tape

class Tape {
public:
    void record(std::function<void()> backward_fn) {
        nodes_.push_back(std::move(backward_fn));
    }

    // Inactive tapes skip recording entirely (evaluation mode).
    bool active() const { return active_; }
    void set_active(bool a) { active_ = a; }

    std::size_t node_count() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    // One reverse sweep; visits each recorded node exactly once.
    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
    bool active_ = true;
};

// Seeds d(loss)/d(loss) = 1 and sweeps the tape once. Every requires_grad
// tensor reachable from the loss accumulates its gradient; tensors that do
// not feed the loss keep their (zeroed) gradients untouched.
inline void backward(const TensorRef& loss, Tape& tape) {
    if (loss->size() != 1)
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss->shape));
    if (!loss->requires_grad)
        throw ContractError("backward: loss does not require grad (nothing was recorded)");
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    tape.run_backward();
}

namespace detail {

inline bool want_grad(const Tape& tape, std::initializer_list<const TensorRef*> inputs) {
    if (!tape.active()) return false;
    for (const TensorRef* t : inputs)
        if ((*t)->requires_grad) return true;
    return false;
}

inline void mark_output(const TensorRef& out) {
    out->requires_grad = true;
    out->ensure_grad();
}

inline void require_2d(const TensorRef& t, const char* op) {
    if (t->shape.size() != 2)
        throw ShapeError(std::string(op) + ": expected a 2-d tensor, got shape " + shape_str(t->shape));
}

inline void require_same_shape(const TensorRef& a, const TensorRef& b, const char* op) {
    if (a->shape != b->shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a->shape) +
                         " vs " + shape_str(b->shape));
}

// c[m x n] += a[m x k] * b[k x n]
inline void gemm_nn_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    }
}

// c[m x n] += a[m x k] * b[n x k]^T
inline void gemm_nt_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
            ci[j] += acc;
        }
    }
}

// c[k x n] += a[m x k]^T * b[m x n]
inline void gemm_tn_acc(const double* a, const double* b, double* c,
                        std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            if (aip == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Matrix products

inline TensorRef matmul(Tape& tape, const TensorRef& a, const TensorRef& b) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (a->cols() != b->rows())
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a->shape) +
                         " vs " + shape_str(b->shape));
    const std::size_t m = a->rows(), k = a->cols(), n = b->cols();
    auto out = tensor({m, n});
    detail::gemm_nn_acc(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_output(out);
        tape.record([a, b, out, m, k, n] {
            if (a->requires_grad)  // dA += dC * B^T
                detail::gemm_nt_acc(out->grad.data(), b->data.data(), a->grad.data(), m, n, k);
            if (b->requires_grad)  // dB += A^T * dC
                detail::gemm_tn_acc(a->data.data(), out->grad.data(), b->grad.data(), m, k, n);
        });
    }
    return out;
}

// a[m x k] * b[n x k]^T; the natural orientation for (out x in) weight matrices.
inline TensorRef matmul_nt(Tape& tape, const TensorRef& a, const TensorRef& b) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    if (a->cols() != b->cols())
        throw ShapeError("matmul_nt: inner dimensions disagree: " + shape_str(a->shape) +
                         " vs " + shape_str(b->shape) + " (transposed)");
    const std::size_t m = a->rows(), k = a->cols(), n = b->rows();
    auto out = tensor({m, n});
    detail::gemm_nt_acc(a->data.data(), b->data.data(), out->data.data(), m, k, n);
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_output(out);
        tape.record([a, b, out, m, k, n] {
            if (a->requires_grad)  // dA += dC * B
                detail::gemm_nn_acc(out->grad.data(), b->data.data(), a->grad.data(), m, n, k);
            if (b->requires_grad)  // dB += dC^T * A
                detail::gemm_tn_acc(out->grad.data(), a->data.data(), b->grad.data(), m, n, k);
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Element-wise ops

inline TensorRef add(Tape& tape, const TensorRef& a, const TensorRef& b) {
    detail::require_same_shape(a, b, "add");
    auto out = tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] + b->data[i];
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_output(out);
        tape.record([a, b, out] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i];
        });
    }
    return out;
}

// x[m x n] + row-broadcast bias[1 x n]
inline TensorRef add_bias(Tape& tape, const TensorRef& x, const TensorRef& bias) {
    detail::require_2d(x, "add_bias");
    if (bias->rows() != 1 || bias->cols() != x->cols())
        throw ShapeError("add_bias: bias shape " + shape_str(bias->shape) +
                         " incompatible with " + shape_str(x->shape));
    const std::size_t m = x->rows(), n = x->cols();
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->data[i * n + j] = x->data[i * n + j] + bias->data[j];
    if (detail::want_grad(tape, {&x, &bias})) {
        detail::mark_output(out);
        tape.record([x, bias, out, m, n] {
            if (x->requires_grad)
                for (std::size_t i = 0; i < m * n; ++i) x->grad[i] += out->grad[i];
            if (bias->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) bias->grad[j] += out->grad[i * n + j];
        });
    }
    return out;
}

inline TensorRef mul(Tape& tape, const TensorRef& a, const TensorRef& b) {
    detail::require_same_shape(a, b, "mul");
    auto out = tensor(a->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = a->data[i] * b->data[i];
    if (detail::want_grad(tape, {&a, &b})) {
        detail::mark_output(out);
        tape.record([a, b, out] {
            if (a->requires_grad)
                for (std::size_t i = 0; i < out->size(); ++i) a->grad[i] += out->grad[i] * b->data[i];
            if (b->requires_grad)
                for (std::size_t i = 0; i < out->size(); ++i) b->grad[i] += out->grad[i] * a->data[i];
        });
    }
    return out;
}

inline TensorRef scale(Tape& tape, const TensorRef& x, double c) {
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = x->data[i] * c;
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out, c] {
            for (std::size_t i = 0; i < out->size(); ++i) x->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

// Multiplies row t of x[m x n] by s[t]; s has shape (m x 1).
inline TensorRef scale_rows(Tape& tape, const TensorRef& x, const TensorRef& s) {
    detail::require_2d(x, "scale_rows");
    if (s->rows() != x->rows() || s->cols() != 1)
        throw ShapeError("scale_rows: scale shape " + shape_str(s->shape) +
                         " incompatible with " + shape_str(x->shape));
    const std::size_t m = x->rows(), n = x->cols();
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out->data[i * n + j] = x->data[i * n + j] * s->data[i];
    if (detail::want_grad(tape, {&x, &s})) {
        detail::mark_output(out);
        tape.record([x, s, out, m, n] {
            if (x->requires_grad)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        x->grad[i * n + j] += out->grad[i * n + j] * s->data[i];
            if (s->requires_grad)
                for (std::size_t i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < n; ++j)
                        acc += out->grad[i * n + j] * x->data[i * n + j];
                    s->grad[i] += acc;
                }
        });
    }
    return out;
}

inline TensorRef tanh(Tape& tape, const TensorRef& x) {
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = std::tanh(x->data[i]);
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out] {
            for (std::size_t i = 0; i < out->size(); ++i) {
                const double y = out->data[i];
                x->grad[i] += out->grad[i] * (1.0 - y * y);
            }
        });
    }
    return out;
}

inline TensorRef sigmoid(Tape& tape, const TensorRef& x) {
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < out->size(); ++i) {
        const double v = x->data[i];
        out->data[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                                : std::exp(v) / (1.0 + std::exp(v));
    }
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out] {
            for (std::size_t i = 0; i < out->size(); ++i) {
                const double y = out->data[i];
                x->grad[i] += out->grad[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

inline TensorRef log(Tape& tape, const TensorRef& x) {
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = std::log(x->data[i]);
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out] {
            for (std::size_t i = 0; i < out->size(); ++i)
                x->grad[i] += out->grad[i] / x->data[i];
        });
    }
    return out;
}

// Gaussian error linear unit, tanh approximation.
inline TensorRef gelu(Tape& tape, const TensorRef& x) {
    static constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    static constexpr double kA = 0.044715;
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < out->size(); ++i) {
        const double v = x->data[i];
        out->data[i] = 0.5 * v * (1.0 + std::tanh(kC * (v + kA * v * v * v)));
    }
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out] {
            for (std::size_t i = 0; i < out->size(); ++i) {
                const double v = x->data[i];
                const double u = kC * (v + kA * v * v * v);
                const double th = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * v * v);
                const double d = 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
                x->grad[i] += out->grad[i] * d;
            }
        });
    }
    return out;
}

// Element-wise product with a fixed mask (the mask never receives gradient).
// Training code draws masks scaled by 1/keep_prob; an all-ones mask is the
// identity.
inline TensorRef dropout(Tape& tape, const TensorRef& x, const TensorRef& mask) {
    detail::require_same_shape(x, mask, "dropout");
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < out->size(); ++i) out->data[i] = x->data[i] * mask->data[i];
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, mask, out] {
            for (std::size_t i = 0; i < out->size(); ++i)
                x->grad[i] += out->grad[i] * mask->data[i];
        });
    }
    return out;
}

// Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p).
inline TensorRef dropout_mask(std::vector<std::size_t> shape, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
    auto m = tensor(std::move(shape));
    const double keep = 1.0 - p;
    for (double& v : m->data) v = rng.next_double() < keep ? 1.0 / keep : 0.0;
    return m;
}

// ---------------------------------------------------------------------------
// Reductions and normalizations

inline TensorRef sum(Tape& tape, const TensorRef& x) {
    double acc = 0.0;
    for (double v : x->data) acc += v;
    auto out = scalar_tensor(acc);
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out] {
            const double g = out->grad[0];
            for (std::size_t i = 0; i < x->size(); ++i) x->grad[i] += g;
        });
    }
    return out;
}

// Max-subtracted softmax along rows (axis=1) or columns (axis=0) of a 2-d
// tensor. Each slice sums to 1 and is strictly positive.
inline TensorRef softmax(Tape& tape, const TensorRef& x, int axis = 1) {
    detail::require_2d(x, "softmax");
    if (axis != 0 && axis != 1)
        throw ShapeError("softmax: axis must be 0 or 1, got " + std::to_string(axis));
    const std::size_t m = x->rows(), n = x->cols();
    auto out = tensor(x->shape);
    const std::size_t slices = axis == 1 ? m : n;
    const std::size_t len = axis == 1 ? n : m;
    const std::size_t stride = axis == 1 ? 1 : n;
    const std::size_t pitch = axis == 1 ? n : 1;
    for (std::size_t s = 0; s < slices; ++s) {
        const double* xs = x->data.data() + s * pitch;
        double* os = out->data.data() + s * pitch;
        double mx = xs[0];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, xs[i * stride]);
        double z = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            const double e = std::exp(xs[i * stride] - mx);
            os[i * stride] = e;
            z += e;
        }
        for (std::size_t i = 0; i < len; ++i) os[i * stride] /= z;
    }
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out, slices, len, stride, pitch] {
            for (std::size_t s = 0; s < slices; ++s) {
                const double* ys = out->data.data() + s * pitch;
                const double* gs = out->grad.data() + s * pitch;
                double* xg = x->grad.data() + s * pitch;
                double dot = 0.0;
                for (std::size_t i = 0; i < len; ++i) dot += gs[i * stride] * ys[i * stride];
                for (std::size_t i = 0; i < len; ++i)
                    xg[i * stride] += ys[i * stride] * (gs[i * stride] - dot);
            }
        });
    }
    return out;
}

// Row-wise log-softmax.
inline TensorRef log_softmax(Tape& tape, const TensorRef& x) {
    detail::require_2d(x, "log_softmax");
    const std::size_t m = x->rows(), n = x->cols();
    auto out = tensor(x->shape);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x->data.data() + i * n;
        double* oi = out->data.data() + i * n;
        double mx = xi[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(xi[j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) oi[j] = xi[j] - lz;
    }
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out, m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                const double* oi = out->data.data() + i * n;
                const double* gi = out->grad.data() + i * n;
                double* xg = x->grad.data() + i * n;
                double gsum = 0.0;
                for (std::size_t j = 0; j < n; ++j) gsum += gi[j];
                for (std::size_t j = 0; j < n; ++j) xg[j] += gi[j] - std::exp(oi[j]) * gsum;
            }
        });
    }
    return out;
}

// Softmax of square score matrix restricted to the causal (lower-triangular)
// region: row i is normalized over columns j <= i and zero elsewhere. Masked
// cells are never read, so a token cannot influence outputs at earlier
// positions even at the bit level.
inline TensorRef causal_masked_softmax(Tape& tape, const TensorRef& scores) {
    detail::require_2d(scores, "causal_masked_softmax");
    if (scores->rows() != scores->cols())
        throw ShapeError("causal_masked_softmax: scores must be square, got " +
                         shape_str(scores->shape));
    const std::size_t t = scores->rows();
    auto out = tensor(scores->shape);
    for (std::size_t i = 0; i < t; ++i) {
        const double* xi = scores->data.data() + i * t;
        double* oi = out->data.data() + i * t;
        double mx = xi[0];
        for (std::size_t j = 1; j <= i; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            const double e = std::exp(xi[j] - mx);
            oi[j] = e;
            z += e;
        }
        for (std::size_t j = 0; j <= i; ++j) oi[j] /= z;
    }
    if (detail::want_grad(tape, {&scores})) {
        detail::mark_output(out);
        tape.record([scores, out, t] {
            for (std::size_t i = 0; i < t; ++i) {
                const double* yi = out->data.data() + i * t;
                const double* gi = out->grad.data() + i * t;
                double* xg = scores->grad.data() + i * t;
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) dot += gi[j] * yi[j];
                for (std::size_t j = 0; j <= i; ++j) xg[j] += yi[j] * (gi[j] - dot);
            }
        });
    }
    return out;
}

// Row-wise layer normalization with learned gain and bias (each 1 x n).
inline TensorRef layer_norm(Tape& tape, const TensorRef& x, const TensorRef& gain,
                            const TensorRef& bias, double eps = 1e-5) {
    detail::require_2d(x, "layer_norm");
    const std::size_t m = x->rows(), n = x->cols();
    if (gain->rows() != 1 || gain->cols() != n || bias->rows() != 1 || bias->cols() != n)
        throw ShapeError("layer_norm: gain/bias must be (1x" + std::to_string(n) + "), got " +
                         shape_str(gain->shape) + " and " + shape_str(bias->shape));
    auto out = tensor(x->shape);
    auto xhat = std::make_shared<std::vector<double>>(m * n);
    auto inv_sigma = std::make_shared<std::vector<double>>(m);
    for (std::size_t i = 0; i < m; ++i) {
        const double* xi = x->data.data() + i * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xi[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = xi[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[i] = is;
        double* hi = xhat->data() + i * n;
        double* oi = out->data.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            hi[j] = (xi[j] - mean) * is;
            oi[j] = hi[j] * gain->data[j] + bias->data[j];
        }
    }
    if (detail::want_grad(tape, {&x, &gain, &bias})) {
        detail::mark_output(out);
        tape.record([x, gain, bias, out, xhat, inv_sigma, m, n] {
            for (std::size_t i = 0; i < m; ++i) {
                const double* gi = out->grad.data() + i * n;
                const double* hi = xhat->data() + i * n;
                if (gain->requires_grad)
                    for (std::size_t j = 0; j < n; ++j) gain->grad[j] += gi[j] * hi[j];
                if (bias->requires_grad)
                    for (std::size_t j = 0; j < n; ++j) bias->grad[j] += gi[j];
                if (x->requires_grad) {
                    double sum_dh = 0.0, sum_dh_h = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = gi[j] * gain->data[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hi[j];
                    }
                    const double inv_n = 1.0 / static_cast<double>(n);
                    double* xg = x->grad.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double dh = gi[j] * gain->data[j];
                        xg[j] += (*inv_sigma)[i] *
                                 (dh - inv_n * sum_dh - hi[j] * inv_n * sum_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lookup and layout ops

// Gathers rows of table (V x H) by token id; gradient flows only to the
// looked-up rows.
inline TensorRef embedding_lookup(Tape& tape, const TensorRef& table,
                                  const std::vector<std::uint32_t>& ids) {
    detail::require_2d(table, "embedding_lookup");
    const std::size_t v = table->rows(), h = table->cols(), t = ids.size();
    if (t == 0) throw ContractError("embedding_lookup: empty id sequence");
    for (std::uint32_t id : ids)
        if (id >= v)
            throw IndexError("embedding_lookup: id " + std::to_string(id) +
                             " out of range for vocabulary of " + std::to_string(v));
    auto out = tensor({t, h});
    for (std::size_t i = 0; i < t; ++i) {
        const double* row = table->data.data() + static_cast<std::size_t>(ids[i]) * h;
        std::copy(row, row + h, out->data.data() + i * h);
    }
    if (detail::want_grad(tape, {&table})) {
        detail::mark_output(out);
        auto ids_copy = std::make_shared<std::vector<std::uint32_t>>(ids);
        tape.record([table, out, ids_copy, h] {
            for (std::size_t i = 0; i < ids_copy->size(); ++i) {
                double* dst = table->grad.data() + static_cast<std::size_t>((*ids_copy)[i]) * h;
                const double* src = out->grad.data() + i * h;
                for (std::size_t j = 0; j < h; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

inline TensorRef slice_rows(Tape& tape, const TensorRef& x, std::size_t r0, std::size_t r1) {
    detail::require_2d(x, "slice_rows");
    if (r0 >= r1 || r1 > x->rows())
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + ", " + std::to_string(r1) +
                         ") invalid for shape " + shape_str(x->shape));
    const std::size_t n = x->cols(), m = r1 - r0;
    auto out = tensor({m, n});
    std::copy(x->data.data() + r0 * n, x->data.data() + r1 * n, out->data.data());
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out, r0, m, n] {
            for (std::size_t i = 0; i < m * n; ++i) x->grad[r0 * n + i] += out->grad[i];
        });
    }
    return out;
}

inline TensorRef slice_cols(Tape& tape, const TensorRef& x, std::size_t c0, std::size_t c1) {
    detail::require_2d(x, "slice_cols");
    if (c0 >= c1 || c1 > x->cols())
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + ", " + std::to_string(c1) +
                         ") invalid for shape " + shape_str(x->shape));
    const std::size_t m = x->rows(), n = x->cols(), w = c1 - c0;
    auto out = tensor({m, w});
    for (std::size_t i = 0; i < m; ++i)
        std::copy(x->data.data() + i * n + c0, x->data.data() + i * n + c1,
                  out->data.data() + i * w);
    if (detail::want_grad(tape, {&x})) {
        detail::mark_output(out);
        tape.record([x, out, c0, m, n, w] {
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    x->grad[i * n + c0 + j] += out->grad[i * w + j];
        });
    }
    return out;
}

inline TensorRef concat_rows(Tape& tape, const std::vector<TensorRef>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no tensors given");
    const std::size_t n = parts[0]->cols();
    std::size_t m = 0;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p->cols() != n)
            throw ShapeError("concat_rows: column mismatch " + shape_str(p->shape) +
                             " vs expected " + std::to_string(n) + " columns");
        m += p->rows();
    }
    auto out = tensor({m, n});
    std::size_t row = 0;
    for (const auto& p : parts) {
        std::copy(p->data.begin(), p->data.end(), out->data.data() + row * n);
        row += p->rows();
    }
    bool needs = false;
    for (const auto& p : parts) needs = needs || p->requires_grad;
    if (tape.active() && needs) {
        detail::mark_output(out);
        tape.record([parts, out, n] {
            std::size_t row = 0;
            for (const auto& p : parts) {
                if (p->requires_grad)
                    for (std::size_t i = 0; i < p->size(); ++i)
                        p->grad[i] += out->grad[row * n + i];
                row += p->rows();
            }
        });
    }
    return out;
}

inline TensorRef concat_cols(Tape& tape, const std::vector<TensorRef>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no tensors given");
    const std::size_t m = parts[0]->rows();
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p->rows() != m)
            throw ShapeError("concat_cols: row mismatch " + shape_str(p->shape) +
                             " vs expected " + std::to_string(m) + " rows");
        n += p->cols();
    }
    auto out = tensor({m, n});
    std::size_t col = 0;
    for (const auto& p : parts) {
        const std::size_t w = p->cols();
        for (std::size_t i = 0; i < m; ++i)
            std::copy(p->data.data() + i * w, p->data.data() + (i + 1) * w,
                      out->data.data() + i * n + col);
        col += w;
    }
    bool needs = false;
    for (const auto& p : parts) needs = needs || p->requires_grad;
    if (tape.active() && needs) {
        detail::mark_output(out);
        tape.record([parts, out, m, n] {
            std::size_t col = 0;
            for (const auto& p : parts) {
                const std::size_t w = p->cols();
                if (p->requires_grad)
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            p->grad[i * w + j] += out->grad[i * n + col + j];
                col += w;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Loss

// Mean negative log-probability of the targets; exp of the result is
// perplexity. Expects log-probabilities, one row per position.
inline TensorRef cross_entropy(Tape& tape, const TensorRef& log_probs,
                               const std::vector<std::uint32_t>& targets) {
    detail::require_2d(log_probs, "cross_entropy");
    const std::size_t t = log_probs->rows(), v = log_probs->cols();
    if (targets.size() != t)
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(t) + " rows");
    for (std::uint32_t y : targets)
        if (y >= v)
            throw IndexError("cross_entropy: target id " + std::to_string(y) +
                             " out of range for vocabulary of " + std::to_string(v));
    double acc = 0.0;
    for (std::size_t i = 0; i < t; ++i) acc -= log_probs->data[i * v + targets[i]];
    auto out = scalar_tensor(acc / static_cast<double>(t));
    if (detail::want_grad(tape, {&log_probs})) {
        detail::mark_output(out);
        auto targets_copy = std::make_shared<std::vector<std::uint32_t>>(targets);
        tape.record([log_probs, out, targets_copy, t, v] {
            const double g = out->grad[0] / static_cast<double>(t);
            for (std::size_t i = 0; i < t; ++i)
                log_probs->grad[i * v + (*targets_copy)[i]] -= g;
        });
    }
    return out;
}

// Tape-free total NLL over a window; used by evaluation.
inline double nll_sum(const Tensor& log_probs, const std::vector<std::uint32_t>& targets) {
    const std::size_t t = log_probs.rows(), v = log_probs.cols();
    if (targets.size() != t)
        throw ShapeError("nll_sum: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(t) + " rows");
    double acc = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        if (targets[i] >= v)
            throw IndexError("nll_sum: target id " + std::to_string(targets[i]) +
                             " out of range for vocabulary of " + std::to_string(v));
        acc -= log_probs.data[i * v + targets[i]];
    }
    return acc;
}

}  // namespace cas
