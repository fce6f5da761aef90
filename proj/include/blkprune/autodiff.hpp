#pragma once

// Tape-based reverse-mode differentiation over dense row-major matrices.
//
// A Tape records one node per differentiable op in creation order. Each node
// owns its forward value; backward closures read their inputs' values back
// from the tape, so nothing is copied twice. backward() walks the tape in
// strict reverse creation order and returns the gradients of every
// registered parameter.

#include "blkprune/tensor.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace blkprune {

template <typename Scalar>
class Tape;

enum class OpKind : std::uint8_t {
    Constant,
    Parameter,
    MatMul,
    MatMulNT,
    Add,
    Sub,
    Hadamard,
    Scale,
    Square,
    Sqrt,
    Abs,
    Softmax,
    CausalSoftmax,
    Silu,
    RmsNorm,
    Rope,
    SliceCols,
    ConcatCols,
    L2Norm,
    Mse,
    Sum,
    Embedding,
    CrossEntropy,
};

std::string_view op_name(OpKind kind);

template <typename Scalar>
struct Var {
    Tape<Scalar>* tape = nullptr;
    int id = -1;

    const Matrix<Scalar>& value() const { return tape->value(id); }
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    Scalar item() const {
        if (value().size() != 1) {
            throw ContractError("item() on non-scalar " + shape_str(value()));
        }
        return value()(0, 0);
    }
};

// Gradients keyed by parameter name. Absent entries mean zero gradient.
template <typename Scalar>
class GradStore {
  public:
    using Mat = Matrix<Scalar>;

    void set(const std::string& name, Mat grad) { grads_[name] = std::move(grad); }
    bool contains(const std::string& name) const { return grads_.count(name) != 0; }

    // Zero matrix of the requested shape when the parameter had no gradient.
    Mat get(const std::string& name, Index rows, Index cols) const {
        auto it = grads_.find(name);
        if (it == grads_.end()) return Mat::Zero(rows, cols);
        if (it->second.rows() != rows || it->second.cols() != cols) {
            throw DimensionError("gradient '" + name + "' has shape " + shape_str(it->second) +
                                 ", expected " + shape_str(rows, cols));
        }
        return it->second;
    }

    const Mat& at(const std::string& name) const {
        auto it = grads_.find(name);
        if (it == grads_.end()) throw ContractError("no gradient recorded for '" + name + "'");
        return it->second;
    }

    const std::map<std::string, Mat>& entries() const { return grads_; }

  private:
    std::map<std::string, Mat> grads_;
};

template <typename Scalar>
class Tape {
  public:
    using Mat = Matrix<Scalar>;
    using BackwardFn = std::function<void(Tape&, int self, const Mat& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<Scalar> constant(Mat value) {
        return push(OpKind::Constant, std::move(value), {}, nullptr, false);
    }

    Var<Scalar> parameter(const std::string& name, Mat value) {
        for (const auto& [pname, pid] : params_) {
            if (pname == name) throw ContractError("parameter '" + name + "' registered twice");
        }
        Var<Scalar> v = push(OpKind::Parameter, std::move(value), {}, nullptr, true);
        params_.emplace_back(name, v.id);
        return v;
    }

    // Appends a differentiable op. The node requires a gradient iff any input does.
    Var<Scalar> record(OpKind kind, Mat value, std::initializer_list<int> inputs,
                       BackwardFn backward) {
        bool needs = false;
        for (int in : inputs) needs = needs || nodes_[in].requires_grad;
        if (!all_finite(value)) {
            throw NumericError(std::string(op_name(kind)) + ": non-finite forward value");
        }
        return push(kind, std::move(value), std::vector<int>(inputs),
                    needs ? std::move(backward) : BackwardFn{}, needs);
    }

    Var<Scalar> record(OpKind kind, Mat value, const std::vector<int>& inputs,
                       BackwardFn backward) {
        bool needs = false;
        for (int in : inputs) needs = needs || nodes_[in].requires_grad;
        if (!all_finite(value)) {
            throw NumericError(std::string(op_name(kind)) + ": non-finite forward value");
        }
        return push(kind, std::move(value), inputs, needs ? std::move(backward) : BackwardFn{},
                    needs);
    }

    const Mat& value(int id) const { return nodes_.at(id).value; }
    bool requires_grad(int id) const { return nodes_[id].requires_grad; }
    OpKind kind(int id) const { return nodes_[id].kind; }
    const std::vector<int>& inputs(int id) const { return nodes_[id].inputs; }
    std::size_t size() const { return nodes_.size(); }

    template <typename Derived>
    void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
        Node& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    // Runs reverse accumulation from a scalar loss, returns one gradient per
    // registered parameter and resets the tape.
    GradStore<Scalar> backward(Var<Scalar> loss) {
        if (loss.tape != this) throw ContractError("backward: loss belongs to another tape");
        const Mat& lv = value(loss.id);
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw ContractError("backward: loss must be scalar, got " + shape_str(lv));
        }
        if (nodes_[loss.id].requires_grad) {
            nodes_[loss.id].grad = Mat::Ones(1, 1);
            for (int id = loss.id; id >= 0; --id) {
                Node& n = nodes_[id];
                if (!n.backward || n.grad.size() == 0) continue;
                Mat g = std::move(n.grad);
                n.grad = Mat();
                n.backward(*this, id, g);
            }
        }
        GradStore<Scalar> store;
        for (const auto& [name, id] : params_) {
            Node& n = nodes_[id];
            Mat g = n.grad.size() == 0 ? Mat::Zero(n.value.rows(), n.value.cols())
                                       : std::move(n.grad);
            if (!all_finite(g)) {
                throw NumericError("backward: non-finite gradient for parameter '" + name + "'");
            }
            store.set(name, std::move(g));
        }
        reset();
        return store;
    }

    void reset() {
        nodes_.clear();
        params_.clear();
    }

  private:
    struct Node {
        OpKind kind;
        Mat value;
        Mat grad;
        std::vector<int> inputs;
        BackwardFn backward;
        bool requires_grad;
    };

    Var<Scalar> push(OpKind kind, Mat value, std::vector<int> inputs, BackwardFn backward,
                     bool requires_grad) {
        nodes_.push_back(Node{kind, std::move(value), Mat(), std::move(inputs),
                              std::move(backward), requires_grad});
        return Var<Scalar>{this, static_cast<int>(nodes_.size()) - 1};
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<std::string, int>> params_;
};

inline std::string_view op_name(OpKind kind) {
    switch (kind) {
        case OpKind::Constant: return "constant";
        case OpKind::Parameter: return "parameter";
        case OpKind::MatMul: return "matmul";
        case OpKind::MatMulNT: return "matmul_nt";
        case OpKind::Add: return "add";
        case OpKind::Sub: return "sub";
        case OpKind::Hadamard: return "hadamard";
        case OpKind::Scale: return "scale";
        case OpKind::Square: return "square";
        case OpKind::Sqrt: return "sqrt";
        case OpKind::Abs: return "abs";
        case OpKind::Softmax: return "softmax";
        case OpKind::CausalSoftmax: return "causal_softmax";
        case OpKind::Silu: return "silu";
        case OpKind::RmsNorm: return "rms_norm";
        case OpKind::Rope: return "rope";
        case OpKind::SliceCols: return "slice_cols";
        case OpKind::ConcatCols: return "concat_cols";
        case OpKind::L2Norm: return "l2_norm";
        case OpKind::Mse: return "mse";
        case OpKind::Sum: return "sum";
        case OpKind::Embedding: return "embedding";
        case OpKind::CrossEntropy: return "cross_entropy";
    }
    return "unknown";
}

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Var<Scalar>& a, const Var<Scalar>& b, std::string_view what) {
    if (a.tape == nullptr || a.tape != b.tape) {
        throw ContractError(std::string(what) + ": operands live on different tapes");
    }
    return *a.tape;
}

template <typename Scalar>
void require_same_shape(const Var<Scalar>& a, const Var<Scalar>& b, std::string_view what) {
    blkprune::require_same_shape(a.value(), b.value(), what);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ " + shape_str(a.value()) + " x " +
                             shape_str(b.value()));
    }
    Matrix<Scalar> out = a.value() * b.value();
    const int ia = a.id, ib = b.id;
    return t.record(OpKind::MatMul, std::move(out), {ia, ib},
                    [ia, ib](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                        if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib).transpose());
                        if (tp.requires_grad(ib)) tp.accumulate(ib, tp.value(ia).transpose() * g);
                    });
}

// a * b^T; with b a [out x in] weight this is a bias-free linear layer.
template <typename Scalar>
Var<Scalar> matmul_nt(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: inner dimensions differ " + shape_str(a.value()) +
                             " x " + shape_str(b.value()) + "^T");
    }
    Matrix<Scalar> out = a.value() * b.value().transpose();
    const int ia = a.id, ib = b.id;
    return t.record(OpKind::MatMulNT, std::move(out), {ia, ib},
                    [ia, ib](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                        if (tp.requires_grad(ia)) tp.accumulate(ia, g * tp.value(ib));
                        if (tp.requires_grad(ib)) tp.accumulate(ib, g.transpose() * tp.value(ia));
                    });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight) {
    return matmul_nt(x, weight);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b, "add");
    detail::require_same_shape(a, b, "add");
    Matrix<Scalar> out = a.value() + b.value();
    const int ia = a.id, ib = b.id;
    return t.record(OpKind::Add, std::move(out), {ia, ib},
                    [ia, ib](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                        tp.accumulate(ia, g);
                        tp.accumulate(ib, g);
                    });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b, "sub");
    detail::require_same_shape(a, b, "sub");
    Matrix<Scalar> out = a.value() - b.value();
    const int ia = a.id, ib = b.id;
    return t.record(OpKind::Sub, std::move(out), {ia, ib},
                    [ia, ib](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                        tp.accumulate(ia, g);
                        if (tp.requires_grad(ib)) tp.accumulate(ib, -g);
                    });
}

template <typename Scalar>
Var<Scalar> operator+(const Var<Scalar>& a, const Var<Scalar>& b) {
    return add(a, b);
}

template <typename Scalar>
Var<Scalar> operator-(const Var<Scalar>& a, const Var<Scalar>& b) {
    return sub(a, b);
}

template <typename Scalar>
Var<Scalar> hadamard(const Var<Scalar>& a, const Var<Scalar>& b) {
    auto& t = detail::same_tape(a, b, "hadamard");
    detail::require_same_shape(a, b, "hadamard");
    Matrix<Scalar> out = a.value().cwiseProduct(b.value());
    const int ia = a.id, ib = b.id;
    return t.record(OpKind::Hadamard, std::move(out), {ia, ib},
                    [ia, ib](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                        if (tp.requires_grad(ia)) tp.accumulate(ia, g.cwiseProduct(tp.value(ib)));
                        if (tp.requires_grad(ib)) tp.accumulate(ib, g.cwiseProduct(tp.value(ia)));
                    });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar s) {
    Matrix<Scalar> out = a.value() * s;
    const int ia = a.id;
    return a.tape->record(OpKind::Scale, std::move(out), {ia},
                          [ia, s](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                              tp.accumulate(ia, g * s);
                          });
}

template <typename Scalar>
Var<Scalar> square(const Var<Scalar>& a) {
    Matrix<Scalar> out = a.value().array().square().matrix();
    const int ia = a.id;
    return a.tape->record(OpKind::Square, std::move(out), {ia},
                          [ia](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                              tp.accumulate(ia, (g.array() * tp.value(ia).array() * Scalar(2))
                                                    .matrix());
                          });
}

template <typename Scalar>
Var<Scalar> sqrt(const Var<Scalar>& a) {
    if ((a.value().array() < Scalar(0)).any()) {
        throw ContractError("sqrt: negative input");
    }
    Matrix<Scalar> out = a.value().array().sqrt().matrix();
    const int ia = a.id;
    return a.tape->record(OpKind::Sqrt, std::move(out), {ia},
                          [ia](Tape<Scalar>& tp, int self, const Matrix<Scalar>& g) {
                              tp.accumulate(ia, (g.array() / (Scalar(2) * tp.value(self).array()))
                                                    .matrix());
                          });
}

template <typename Scalar>
Var<Scalar> abs(const Var<Scalar>& a) {
    Matrix<Scalar> out = a.value().cwiseAbs();
    const int ia = a.id;
    return a.tape->record(OpKind::Abs, std::move(out), {ia},
                          [ia](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                              tp.accumulate(ia,
                                            (g.array() * tp.value(ia).array().sign()).matrix());
                          });
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& a) {
    const auto& x = a.value();
    Matrix<Scalar> out = (x.array() / (Scalar(1) + (-x.array()).exp())).matrix();
    const int ia = a.id;
    return a.tape->record(
        OpKind::Silu, std::move(out), {ia}, [ia](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
            const auto& xv = tp.value(ia);
            auto sig = (Scalar(1) / (Scalar(1) + (-xv.array()).exp())).eval();
            tp.accumulate(ia, (g.array() * sig * (Scalar(1) + xv.array() * (Scalar(1) - sig)))
                                  .matrix());
        });
}

// ---------------------------------------------------------------------------
// Row-wise (last dimension) ops
// ---------------------------------------------------------------------------

namespace detail {

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& x, bool causal) {
    Matrix<Scalar> y(x.rows(), x.cols());
    for (Index r = 0; r < x.rows(); ++r) {
        const Index width = causal ? std::min<Index>(r + 1, x.cols()) : x.cols();
        auto row = x.row(r).head(width);
        const Scalar mx = row.maxCoeff();
        auto e = (row.array() - mx).exp().eval();
        y.row(r).head(width) = (e / e.sum()).matrix();
        if (width < x.cols()) y.row(r).tail(x.cols() - width).setZero();
    }
    return y;
}

template <typename Scalar>
void softmax_backward(Tape<Scalar>& tp, int self, int input, const Matrix<Scalar>& g) {
    const auto& y = tp.value(self);
    Vector<Scalar> dot = (g.cwiseProduct(y)).rowwise().sum();
    Matrix<Scalar> dx = y.cwiseProduct(g - dot.replicate(1, g.cols()));
    tp.accumulate(input, dx);
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> softmax(const Var<Scalar>& a) {
    const int ia = a.id;
    return a.tape->record(OpKind::Softmax, detail::softmax_rows(a.value(), false), {ia},
                          [ia](Tape<Scalar>& tp, int self, const Matrix<Scalar>& g) {
                              detail::softmax_backward(tp, self, ia, g);
                          });
}

// Softmax over row r restricted to columns 0..r; later columns get probability 0.
template <typename Scalar>
Var<Scalar> causal_softmax(const Var<Scalar>& a) {
    const int ia = a.id;
    return a.tape->record(OpKind::CausalSoftmax, detail::softmax_rows(a.value(), true), {ia},
                          [ia](Tape<Scalar>& tp, int self, const Matrix<Scalar>& g) {
                              detail::softmax_backward(tp, self, ia, g);
                          });
}

inline constexpr double kDefaultNormEps = 1e-5;

// y = x / sqrt(mean(x^2) + eps) * scale, per row. scale is a 1 x d row.
template <typename Scalar>
Var<Scalar> rms_norm(const Var<Scalar>& x, const Var<Scalar>& scale_row, double eps) {
    auto& t = detail::same_tape(x, scale_row, "rms_norm");
    if (!(eps > 0.0)) throw ContractError("rms_norm: eps must be positive");
    if (scale_row.rows() != 1 || scale_row.cols() != x.cols()) {
        throw DimensionError("rms_norm: scale " + shape_str(scale_row.value()) +
                             " does not match width of " + shape_str(x.value()));
    }
    const auto& xv = x.value();
    const Scalar d = static_cast<Scalar>(xv.cols());
    Vector<Scalar> inv = ((xv.array().square().rowwise().sum() / d) + static_cast<Scalar>(eps))
                             .rsqrt()
                             .matrix();
    Matrix<Scalar> out = (xv.array().colwise() * inv.array()).matrix();
    out.array().rowwise() *= scale_row.value().row(0).array();
    const int ix = x.id, is = scale_row.id;
    return t.record(OpKind::RmsNorm, std::move(out), {ix, is},
                    [ix, is, inv = std::move(inv), d](Tape<Scalar>& tp, int,
                                                      const Matrix<Scalar>& g) {
                        const auto& xv2 = tp.value(ix);
                        Matrix<Scalar> n = (xv2.array().colwise() * inv.array()).matrix();
                        if (tp.requires_grad(is)) {
                            tp.accumulate(is, g.cwiseProduct(n).colwise().sum());
                        }
                        if (tp.requires_grad(ix)) {
                            Matrix<Scalar> dn = g;
                            dn.array().rowwise() *= tp.value(is).row(0).array();
                            Vector<Scalar> m = dn.cwiseProduct(n).rowwise().sum() / d;
                            Matrix<Scalar> dx =
                                ((dn - (n.array().colwise() * m.array()).matrix()).array()
                                     .colwise() *
                                 inv.array())
                                    .matrix();
                            tp.accumulate(ix, dx);
                        }
                    });
}

// Rotary position embedding on each head's slice, rotating adjacent column
// pairs (2i, 2i+1) by position * theta^(-2i/head_dim). Row index = position.
template <typename Scalar>
Var<Scalar> rope(const Var<Scalar>& x, int n_heads, double theta) {
    const auto& xv = x.value();
    if (n_heads <= 0 || xv.cols() % n_heads != 0 || (xv.cols() / n_heads) % 2 != 0) {
        throw DimensionError("rope: width " + std::to_string(xv.cols()) +
                             " not divisible into even-sized heads");
    }
    const Index head_dim = xv.cols() / n_heads;
    const Index half = head_dim / 2;
    Matrix<Scalar> cos_t(xv.rows(), half), sin_t(xv.rows(), half);
    for (Index p = 0; p < xv.rows(); ++p) {
        for (Index i = 0; i < half; ++i) {
            const double freq = std::pow(theta, -2.0 * static_cast<double>(i) /
                                                    static_cast<double>(head_dim));
            const double ang = static_cast<double>(p) * freq;
            cos_t(p, i) = static_cast<Scalar>(std::cos(ang));
            sin_t(p, i) = static_cast<Scalar>(std::sin(ang));
        }
    }
    auto rotate = [n_heads, head_dim, half](const Matrix<Scalar>& in, const Matrix<Scalar>& c,
                                            const Matrix<Scalar>& s, Scalar sign) {
        Matrix<Scalar> out(in.rows(), in.cols());
        for (Index p = 0; p < in.rows(); ++p) {
            for (int h = 0; h < n_heads; ++h) {
                const Index base = h * head_dim;
                for (Index i = 0; i < half; ++i) {
                    const Scalar x0 = in(p, base + 2 * i);
                    const Scalar x1 = in(p, base + 2 * i + 1);
                    const Scalar cs = c(p, i), sn = sign * s(p, i);
                    out(p, base + 2 * i) = x0 * cs - x1 * sn;
                    out(p, base + 2 * i + 1) = x0 * sn + x1 * cs;
                }
            }
        }
        return out;
    };
    Matrix<Scalar> out = rotate(xv, cos_t, sin_t, Scalar(1));
    const int ix = x.id;
    return x.tape->record(OpKind::Rope, std::move(out), {ix},
                          [ix, rotate, cos_t = std::move(cos_t), sin_t = std::move(sin_t)](
                              Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                              // Inverse rotation is the transpose of the forward one.
                              tp.accumulate(ix, rotate(g, cos_t, sin_t, Scalar(-1)));
                          });
}

template <typename Scalar>
Var<Scalar> slice_cols(const Var<Scalar>& x, Index start, Index count) {
    if (start < 0 || count <= 0 || start + count > x.cols()) {
        throw DimensionError("slice_cols: range [" + std::to_string(start) + ", " +
                             std::to_string(start + count) + ") outside " + shape_str(x.value()));
    }
    Matrix<Scalar> out = x.value().middleCols(start, count);
    const int ix = x.id;
    const Index rows = x.rows(), cols = x.cols();
    return x.tape->record(OpKind::SliceCols, std::move(out), {ix},
                          [ix, start, count, rows, cols](Tape<Scalar>& tp, int,
                                                         const Matrix<Scalar>& g) {
                              Matrix<Scalar> dx = Matrix<Scalar>::Zero(rows, cols);
                              dx.middleCols(start, count) = g;
                              tp.accumulate(ix, dx);
                          });
}

template <typename Scalar>
Var<Scalar> concat_cols(std::span<const Var<Scalar>> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    Tape<Scalar>& t = *parts.front().tape;
    const Index rows = parts.front().rows();
    Index total = 0;
    std::vector<int> ids;
    std::vector<Index> widths;
    for (const auto& p : parts) {
        if (p.tape != &t) throw ContractError("concat_cols: operands live on different tapes");
        if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
        ids.push_back(p.id);
        widths.push_back(p.cols());
        total += p.cols();
    }
    Matrix<Scalar> out(rows, total);
    Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return t.record(OpKind::ConcatCols, std::move(out), ids,
                    [ids, widths](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                        Index o = 0;
                        for (std::size_t i = 0; i < ids.size(); ++i) {
                            if (tp.requires_grad(ids[i])) {
                                tp.accumulate(ids[i], g.middleCols(o, widths[i]));
                            }
                            o += widths[i];
                        }
                    });
}

// ---------------------------------------------------------------------------
// Reductions and losses (all return 1 x 1)
// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
    Matrix<Scalar> out(1, 1);
    out(0, 0) = x.value().sum();
    const int ix = x.id;
    const Index rows = x.rows(), cols = x.cols();
    return x.tape->record(OpKind::Sum, std::move(out), {ix},
                          [ix, rows, cols](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                              tp.accumulate(ix, Matrix<Scalar>::Constant(rows, cols, g(0, 0)));
                          });
}

// Frobenius norm. The gradient at the zero tensor is taken to be zero.
template <typename Scalar>
Var<Scalar> l2_norm(const Var<Scalar>& x) {
    if (x.value().size() == 0) throw ContractError("l2_norm: empty tensor");
    Matrix<Scalar> out(1, 1);
    out(0, 0) = x.value().norm();
    const int ix = x.id;
    return x.tape->record(OpKind::L2Norm, std::move(out), {ix},
                          [ix](Tape<Scalar>& tp, int self, const Matrix<Scalar>& g) {
                              const Scalar n = tp.value(self)(0, 0);
                              if (n > Scalar(0)) tp.accumulate(ix, tp.value(ix) * (g(0, 0) / n));
                          });
}

// mean((pred - target)^2); target is a detached constant.
template <typename Scalar>
Var<Scalar> mse(const Var<Scalar>& pred, const Matrix<Scalar>& target) {
    require_same_shape(pred.value(), target, "mse");
    if (target.size() == 0) throw ContractError("mse: empty tensor");
    Matrix<Scalar> out(1, 1);
    const Scalar count = static_cast<Scalar>(target.size());
    out(0, 0) = (pred.value() - target).squaredNorm() / count;
    const int ip = pred.id;
    return pred.tape->record(OpKind::Mse, std::move(out), {ip},
                             [ip, target, count](Tape<Scalar>& tp, int, const Matrix<Scalar>& g) {
                                 tp.accumulate(ip, (tp.value(ip) - target) *
                                                       (Scalar(2) * g(0, 0) / count));
                             });
}

// Gathers rows of table by token id.
template <typename Scalar>
Var<Scalar> embedding(const Var<Scalar>& table, std::span<const std::uint32_t> ids) {
    const auto& tv = table.value();
    Matrix<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= static_cast<std::uint32_t>(tv.rows())) {
            throw ContractError("embedding: token id " + std::to_string(ids[i]) +
                                " out of range for vocab " + std::to_string(tv.rows()));
        }
        out.row(static_cast<Index>(i)) = tv.row(ids[i]);
    }
    const int it = table.id;
    std::vector<std::uint32_t> idv(ids.begin(), ids.end());
    const Index rows = tv.rows(), cols = tv.cols();
    return table.tape->record(OpKind::Embedding, std::move(out), {it},
                              [it, idv = std::move(idv), rows, cols](Tape<Scalar>& tp, int,
                                                                     const Matrix<Scalar>& g) {
                                  Matrix<Scalar> dt = Matrix<Scalar>::Zero(rows, cols);
                                  for (std::size_t i = 0; i < idv.size(); ++i) {
                                      dt.row(idv[i]) += g.row(static_cast<Index>(i));
                                  }
                                  tp.accumulate(it, dt);
                              });
}

// Mean next-token negative log-likelihood of targets under row-wise softmax(logits).
template <typename Scalar>
Var<Scalar> cross_entropy(const Var<Scalar>& logits, std::span<const std::uint32_t> targets) {
    const auto& lv = logits.value();
    if (static_cast<Index>(targets.size()) != lv.rows() || targets.empty()) {
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                             " targets for " + shape_str(lv));
    }
    Matrix<Scalar> probs = detail::softmax_rows(lv, false);
    Scalar nll = 0;
    for (Index r = 0; r < lv.rows(); ++r) {
        const auto t = targets[static_cast<std::size_t>(r)];
        if (t >= static_cast<std::uint32_t>(lv.cols())) {
            throw ContractError("cross_entropy: target out of range");
        }
        const Scalar mx = lv.row(r).maxCoeff();
        const Scalar lse = mx + std::log((lv.row(r).array() - mx).exp().sum());
        nll += lse - lv(r, t);
    }
    Matrix<Scalar> out(1, 1);
    out(0, 0) = nll / static_cast<Scalar>(lv.rows());
    const int il = logits.id;
    std::vector<std::uint32_t> tv(targets.begin(), targets.end());
    return logits.tape->record(
        OpKind::CrossEntropy, std::move(out), {il},
        [il, probs = std::move(probs), tv = std::move(tv)](Tape<Scalar>& tp, int,
                                                           const Matrix<Scalar>& g) {
            Matrix<Scalar> d = probs;
            for (std::size_t r = 0; r < tv.size(); ++r) d(static_cast<Index>(r), tv[r]) -= 1;
            d *= g(0, 0) / static_cast<Scalar>(tv.size());
            tp.accumulate(il, d);
        });
}

}  // namespace blkprune
