#include "polypseg/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>

namespace polypseg::ops {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

std::vector<std::int64_t> contiguous_strides(const Shape& s) {
    std::vector<std::int64_t> st(s.size());
    std::int64_t acc = 1;
    for (int d = static_cast<int>(s.size()) - 1; d >= 0; --d) {
        st[static_cast<std::size_t>(d)] = acc;
        acc *= s[static_cast<std::size_t>(d)];
    }
    return st;
}

// Broadcast plan for a binary elementwise op. Strides of broadcast
// dimensions are zeroed so one flat walk indexes both inputs.
struct Bcast {
    Shape out;
    std::vector<std::int64_t> out_strides;
    std::vector<std::int64_t> a_strides;
    std::vector<std::int64_t> b_strides;
    std::int64_t n = 0;
    bool same = false;

    void map(std::int64_t flat, std::int64_t& ai, std::int64_t& bi) const {
        ai = 0;
        bi = 0;
        for (std::size_t d = 0; d < out.size(); ++d) {
            std::int64_t idx = flat / out_strides[d];
            flat -= idx * out_strides[d];
            ai += idx * a_strides[d];
            bi += idx * b_strides[d];
        }
    }
};

Bcast make_bcast(const Shape& a, const Shape& b) {
    Bcast bc;
    std::size_t rank = std::max(a.size(), b.size());
    bc.out.resize(rank);
    Shape ap(rank, 1), bp(rank, 1);
    std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
    std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
    for (std::size_t d = 0; d < rank; ++d) {
        check<ShapeError>(ap[d] == bp[d] || ap[d] == 1 || bp[d] == 1,
                          "broadcast mismatch: " + shape_str(a) + " vs " + shape_str(b));
        bc.out[d] = std::max(ap[d], bp[d]);
    }
    bc.out_strides = contiguous_strides(bc.out);
    auto as = contiguous_strides(ap);
    auto bs = contiguous_strides(bp);
    bc.a_strides.resize(rank);
    bc.b_strides.resize(rank);
    for (std::size_t d = 0; d < rank; ++d) {
        bc.a_strides[d] = (ap[d] == 1 && bc.out[d] != 1) ? 0 : as[d];
        bc.b_strides[d] = (bp[d] == 1 && bc.out[d] != 1) ? 0 : bs[d];
    }
    bc.n = shape_numel(bc.out);
    bc.same = (a == b);
    return bc;
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

enum class BinOp { Add, Sub, Mul, Div };

Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op) {
    Bcast bc = make_bcast(a.shape(), b.shape());
    std::vector<double> out(static_cast<std::size_t>(bc.n));
    const double* av = a.data();
    const double* bv = b.data();
    auto apply = [op](double x, double y) {
        switch (op) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            case BinOp::Mul: return x * y;
            default: return x / y;
        }
    };
    if (bc.same) {
        for (std::int64_t i = 0; i < bc.n; ++i)
            out[static_cast<std::size_t>(i)] = apply(av[i], bv[i]);
    } else {
        std::int64_t ai, bi;
        for (std::int64_t i = 0; i < bc.n; ++i) {
            bc.map(i, ai, bi);
            out[static_cast<std::size_t>(i)] = apply(av[ai], bv[bi]);
        }
    }
    return make_op_result(bc.out, std::move(out), {a, b}, [bc, op](TensorNode& node) {
        auto& pa = *node.parents[0];
        auto& pb = *node.parents[1];
        const double* go = node.grad.data();
        const double* av = pa.values.data();
        const double* bv = pb.values.data();
        double* ga = pa.grad.data();
        double* gb = pb.grad.data();
        std::int64_t ai, bi;
        for (std::int64_t i = 0; i < bc.n; ++i) {
            if (bc.same) {
                ai = i;
                bi = i;
            } else {
                bc.map(i, ai, bi);
            }
            double g = go[i];
            switch (op) {
                case BinOp::Add:
                    ga[ai] += g;
                    gb[bi] += g;
                    break;
                case BinOp::Sub:
                    ga[ai] += g;
                    gb[bi] -= g;
                    break;
                case BinOp::Mul:
                    ga[ai] += g * bv[bi];
                    gb[bi] += g * av[ai];
                    break;
                case BinOp::Div: {
                    double inv = 1.0 / bv[bi];
                    ga[ai] += g * inv;
                    gb[bi] -= g * av[ai] * inv * inv;
                    break;
                }
            }
        }
    });
}

// Unary elementwise helper: fwd(x) and dfdx(x, y).
template <class F, class DF>
Tensor unary_op(const Tensor& x, F fwd, DF dfdx) {
    std::int64_t n = x.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* xv = x.data();
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fwd(xv[i]);
    return make_op_result(x.shape(), std::move(out), {x}, [n, dfdx](TensorNode& node) {
        auto& p = *node.parents[0];
        const double* xv = p.values.data();
        const double* yv = node.values.data();
        const double* go = node.grad.data();
        double* gx = p.grad.data();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i] * dfdx(xv[i], yv[i]);
    });
}

struct DimSplit {
    std::int64_t outer, len, inner;
};

DimSplit split_at(const Shape& s, int dim) {
    check<ShapeError>(dim >= 0 && dim < static_cast<int>(s.size()), "dim out of range");
    DimSplit d{1, s[static_cast<std::size_t>(dim)], 1};
    for (int i = 0; i < dim; ++i) d.outer *= s[static_cast<std::size_t>(i)];
    for (std::size_t i = static_cast<std::size_t>(dim) + 1; i < s.size(); ++i) d.inner *= s[i];
    return d;
}

Shape reduced_shape(const Shape& s, int dim, bool keepdim) {
    Shape out = s;
    if (keepdim) {
        out[static_cast<std::size_t>(dim)] = 1;
    } else {
        out.erase(out.begin() + dim);
        if (out.empty()) out = {1};
    }
    return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinOp::Div); }

Tensor scale(const Tensor& x, double c) {
    return unary_op(
        x, [c](double v) { return v * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
    return unary_op(
        x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
    return unary_op(
        x, [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
    return unary_op(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
        [](double v, double) {
            return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
                   v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
        });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op(
        x,
        [](double v) {
            return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                            : std::exp(v) / (1.0 + std::exp(v));
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor abs(const Tensor& x) {
    return unary_op(
        x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor bce_with_logits(const Tensor& logits, const Tensor& target) {
    check<ShapeError>(logits.shape() == target.shape(),
                      "bce_with_logits: shape mismatch " + shape_str(logits.shape()) + " vs " +
                          shape_str(target.shape()));
    std::int64_t n = logits.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* xv = logits.data();
    const double* tv = target.data();
    for (std::int64_t i = 0; i < n; ++i) {
        double x = xv[i];
        out[static_cast<std::size_t>(i)] =
            std::max(x, 0.0) - x * tv[i] + std::log1p(std::exp(-std::abs(x)));
    }
    return make_op_result(logits.shape(), std::move(out), {logits, target},
                          [n](TensorNode& node) {
                              auto& px = *node.parents[0];
                              auto& pt = *node.parents[1];
                              const double* xv = px.values.data();
                              const double* tv = pt.values.data();
                              const double* go = node.grad.data();
                              double* gx = px.grad.data();
                              double* gt = pt.grad.data();
                              for (std::int64_t i = 0; i < n; ++i) {
                                  double x = xv[i];
                                  double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                                                      : std::exp(x) / (1.0 + std::exp(x));
                                  gx[i] += go[i] * (s - tv[i]);
                                  gt[i] += go[i] * (-x);
                              }
                          });
}

Tensor sum(const Tensor& x) {
    std::int64_t n = x.numel();
    double acc = 0.0;
    const double* xv = x.data();
    for (std::int64_t i = 0; i < n; ++i) acc += xv[i];
    return make_op_result({1}, {acc}, {x}, [n](TensorNode& node) {
        auto& p = *node.parents[0];
        double g = node.grad[0];
        double* gx = p.grad.data();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor sum_dim(const Tensor& x, int dim, bool keepdim) {
    DimSplit d = split_at(x.shape(), dim);
    Shape oshape = reduced_shape(x.shape(), dim, keepdim);
    std::vector<double> out(static_cast<std::size_t>(d.outer * d.inner), 0.0);
    const double* xv = x.data();
    for (std::int64_t o = 0; o < d.outer; ++o)
        for (std::int64_t k = 0; k < d.len; ++k) {
            const double* row = xv + (o * d.len + k) * d.inner;
            double* orow = out.data() + o * d.inner;
            for (std::int64_t i = 0; i < d.inner; ++i) orow[i] += row[i];
        }
    return make_op_result(oshape, std::move(out), {x}, [d](TensorNode& node) {
        auto& p = *node.parents[0];
        const double* go = node.grad.data();
        double* gx = p.grad.data();
        for (std::int64_t o = 0; o < d.outer; ++o)
            for (std::int64_t k = 0; k < d.len; ++k) {
                double* row = gx + (o * d.len + k) * d.inner;
                const double* grow = go + o * d.inner;
                for (std::int64_t i = 0; i < d.inner; ++i) row[i] += grow[i];
            }
    });
}

Tensor mean_dim(const Tensor& x, int dim, bool keepdim) {
    double inv = 1.0 / static_cast<double>(x.shape()[static_cast<std::size_t>(dim)]);
    return scale(sum_dim(x, dim, keepdim), inv);
}

Tensor max_dim(const Tensor& x, int dim, bool keepdim) {
    DimSplit d = split_at(x.shape(), dim);
    Shape oshape = reduced_shape(x.shape(), dim, keepdim);
    std::int64_t on = d.outer * d.inner;
    std::vector<double> out(static_cast<std::size_t>(on));
    std::vector<std::int64_t> arg(static_cast<std::size_t>(on));
    const double* xv = x.data();
    for (std::int64_t o = 0; o < d.outer; ++o)
        for (std::int64_t i = 0; i < d.inner; ++i) {
            std::int64_t best = (o * d.len) * d.inner + i;
            double bv = xv[best];
            for (std::int64_t k = 1; k < d.len; ++k) {
                std::int64_t idx = (o * d.len + k) * d.inner + i;
                if (xv[idx] > bv) {
                    bv = xv[idx];
                    best = idx;
                }
            }
            out[static_cast<std::size_t>(o * d.inner + i)] = bv;
            arg[static_cast<std::size_t>(o * d.inner + i)] = best;
        }
    return make_op_result(oshape, std::move(out), {x}, [arg = std::move(arg)](TensorNode& node) {
        auto& p = *node.parents[0];
        const double* go = node.grad.data();
        double* gx = p.grad.data();
        for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
    });
}

Tensor reshape(const Tensor& x, Shape shape) {
    std::int64_t known = 1;
    int infer = -1;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (shape[d] == -1) {
            check<ShapeError>(infer < 0, "reshape: multiple -1 dims");
            infer = static_cast<int>(d);
        } else {
            known *= shape[d];
        }
    }
    if (infer >= 0) {
        check<ShapeError>(known > 0 && x.numel() % known == 0,
                          "reshape: cannot infer dim for " + shape_str(x.shape()));
        shape[static_cast<std::size_t>(infer)] = x.numel() / known;
    }
    check<ShapeError>(shape_numel(shape) == x.numel(),
                      "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
    std::vector<double> out(x.values());
    std::int64_t n = x.numel();
    return make_op_result(std::move(shape), std::move(out), {x}, [n](TensorNode& node) {
        auto& p = *node.parents[0];
        const double* go = node.grad.data();
        double* gx = p.grad.data();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += go[i];
    });
}

Tensor permute(const Tensor& x, const std::vector<int>& perm) {
    const Shape& s = x.shape();
    check<ShapeError>(perm.size() == s.size(), "permute: rank mismatch");
    Shape oshape(perm.size());
    auto xstr = contiguous_strides(s);
    std::vector<std::int64_t> mstr(perm.size());
    std::vector<bool> seen(perm.size(), false);
    for (std::size_t d = 0; d < perm.size(); ++d) {
        int p = perm[d];
        check<ShapeError>(p >= 0 && p < static_cast<int>(s.size()) && !seen[static_cast<std::size_t>(p)],
                          "permute: invalid permutation");
        seen[static_cast<std::size_t>(p)] = true;
        oshape[d] = s[static_cast<std::size_t>(p)];
        mstr[d] = xstr[static_cast<std::size_t>(p)];
    }
    auto ostr = contiguous_strides(oshape);
    std::int64_t n = x.numel();
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* xv = x.data();
    auto src_index = [&](std::int64_t flat) {
        std::int64_t xi = 0;
        for (std::size_t d = 0; d < ostr.size(); ++d) {
            std::int64_t idx = flat / ostr[d];
            flat -= idx * ostr[d];
            xi += idx * mstr[d];
        }
        return xi;
    };
    for (std::int64_t i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = xv[src_index(i)];
    return make_op_result(std::move(oshape), std::move(out), {x},
                          [n, ostr, mstr](TensorNode& node) {
                              auto& p = *node.parents[0];
                              const double* go = node.grad.data();
                              double* gx = p.grad.data();
                              for (std::int64_t i = 0; i < n; ++i) {
                                  std::int64_t flat = i, xi = 0;
                                  for (std::size_t d = 0; d < ostr.size(); ++d) {
                                      std::int64_t idx = flat / ostr[d];
                                      flat -= idx * ostr[d];
                                      xi += idx * mstr[d];
                                  }
                                  gx[xi] += go[i];
                              }
                          });
}

Tensor concat(const std::vector<Tensor>& xs, int dim) {
    check<ShapeError>(!xs.empty(), "concat: empty input list");
    Shape oshape = xs[0].shape();
    check<ShapeError>(dim >= 0 && dim < static_cast<int>(oshape.size()), "concat: dim out of range");
    std::int64_t total = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        check<ShapeError>(s.size() == oshape.size(), "concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d)
            check<ShapeError>(static_cast<int>(d) == dim || s[d] == oshape[d],
                              "concat: shape mismatch at dim " + std::to_string(d));
        total += s[static_cast<std::size_t>(dim)];
    }
    oshape[static_cast<std::size_t>(dim)] = total;

    DimSplit d0 = split_at(oshape, dim);
    std::vector<double> out(static_cast<std::size_t>(shape_numel(oshape)));
    std::vector<std::int64_t> blocks;  // per-input dim*inner block size
    std::int64_t obloc = total * d0.inner;
    std::int64_t off = 0;
    for (const auto& x : xs) {
        std::int64_t blk = x.shape()[static_cast<std::size_t>(dim)] * d0.inner;
        blocks.push_back(blk);
        const double* xv = x.data();
        for (std::int64_t o = 0; o < d0.outer; ++o)
            std::memcpy(out.data() + o * obloc + off, xv + o * blk,
                        static_cast<std::size_t>(blk) * sizeof(double));
        off += blk;
    }
    return make_op_result(std::move(oshape), std::move(out), xs,
                          [blocks, obloc, outer = d0.outer](TensorNode& node) {
                              const double* go = node.grad.data();
                              std::int64_t off = 0;
                              for (std::size_t k = 0; k < blocks.size(); ++k) {
                                  auto& p = *node.parents[k];
                                  double* gx = p.grad.data();
                                  std::int64_t blk = blocks[k];
                                  for (std::int64_t o = 0; o < outer; ++o) {
                                      const double* src = go + o * obloc + off;
                                      double* dst = gx + o * blk;
                                      for (std::int64_t i = 0; i < blk; ++i) dst[i] += src[i];
                                  }
                                  off += blk;
                              }
                          });
}

Tensor narrow(const Tensor& x, int dim, std::int64_t start, std::int64_t length) {
    const Shape& s = x.shape();
    check<ShapeError>(dim >= 0 && dim < static_cast<int>(s.size()), "narrow: dim out of range");
    check<ShapeError>(start >= 0 && length > 0 && start + length <= s[static_cast<std::size_t>(dim)],
                      "narrow: range [" + std::to_string(start) + "," +
                          std::to_string(start + length) + ") out of bounds for " + shape_str(s));
    DimSplit d = split_at(s, dim);
    Shape oshape = s;
    oshape[static_cast<std::size_t>(dim)] = length;
    std::vector<double> out(static_cast<std::size_t>(d.outer * length * d.inner));
    const double* xv = x.data();
    std::int64_t xbloc = d.len * d.inner;
    std::int64_t obloc = length * d.inner;
    for (std::int64_t o = 0; o < d.outer; ++o)
        std::memcpy(out.data() + o * obloc, xv + o * xbloc + start * d.inner,
                    static_cast<std::size_t>(obloc) * sizeof(double));
    return make_op_result(std::move(oshape), std::move(out), {x},
                          [d, start, obloc, xbloc](TensorNode& node) {
                              auto& p = *node.parents[0];
                              const double* go = node.grad.data();
                              double* gx = p.grad.data();
                              for (std::int64_t o = 0; o < d.outer; ++o) {
                                  const double* src = go + o * obloc;
                                  double* dst = gx + o * xbloc + start * d.inner;
                                  for (std::int64_t i = 0; i < obloc; ++i) dst[i] += src[i];
                              }
                          });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& as = a.shape();
    const Shape& bs = b.shape();
    check<ShapeError>(as.size() == bs.size() && (as.size() == 2 || as.size() == 3),
                      "matmul: expected equal-rank 2D or 3D inputs, got " + shape_str(as) +
                          " and " + shape_str(bs));
    std::int64_t batch = 1, M, K, N;
    if (as.size() == 3) {
        check<ShapeError>(as[0] == bs[0], "matmul: batch mismatch");
        batch = as[0];
        M = as[1];
        K = as[2];
        check<ShapeError>(bs[1] == K, "matmul: inner dim mismatch " + shape_str(as) + " x " +
                                          shape_str(bs));
        N = bs[2];
    } else {
        M = as[0];
        K = as[1];
        check<ShapeError>(bs[0] == K, "matmul: inner dim mismatch " + shape_str(as) + " x " +
                                          shape_str(bs));
        N = bs[1];
    }
    Shape oshape = as.size() == 3 ? Shape{batch, M, N} : Shape{M, N};
    std::vector<double> out(static_cast<std::size_t>(batch * M * N));
    for (std::int64_t t = 0; t < batch; ++t) {
        CMapM A(a.data() + t * M * K, M, K);
        CMapM B(b.data() + t * K * N, K, N);
        MapM C(out.data() + t * M * N, M, N);
        C.noalias() = A * B;
    }
    return make_op_result(std::move(oshape), std::move(out), {a, b},
                          [batch, M, K, N](TensorNode& node) {
                              auto& pa = *node.parents[0];
                              auto& pb = *node.parents[1];
                              for (std::int64_t t = 0; t < batch; ++t) {
                                  CMapM A(pa.values.data() + t * M * K, M, K);
                                  CMapM B(pb.values.data() + t * K * N, K, N);
                                  CMapM G(node.grad.data() + t * M * N, M, N);
                                  MapM GA(pa.grad.data() + t * M * K, M, K);
                                  MapM GB(pb.grad.data() + t * K * N, K, N);
                                  GA.noalias() += G * B.transpose();
                                  GB.noalias() += A.transpose() * G;
                              }
                          });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    check<ShapeError>(ws.size() == 2, "linear: weight must be 2D");
    std::int64_t in = ws[1], out_f = ws[0];
    check<ShapeError>(!xs.empty() && xs.back() == in,
                      "linear: input " + shape_str(xs) + " vs weight " + shape_str(ws));
    std::int64_t rows = x.numel() / in;
    bool has_bias = b.defined();
    if (has_bias)
        check<ShapeError>(b.shape() == Shape{out_f}, "linear: bias shape " + shape_str(b.shape()));

    std::vector<double> out(static_cast<std::size_t>(rows * out_f));
    {
        CMapM X(x.data(), rows, in);
        CMapM W(w.data(), out_f, in);
        MapM Y(out.data(), rows, out_f);
        Y.noalias() = X * W.transpose();
        if (has_bias) {
            Eigen::Map<const Eigen::VectorXd> bv(b.data(), out_f);
            Y.rowwise() += bv.transpose();
        }
    }
    Shape oshape = xs;
    oshape.back() = out_f;
    std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, w, b}
                                           : std::vector<Tensor>{x, w};
    return make_op_result(std::move(oshape), std::move(out), parents,
                          [rows, in, out_f, has_bias](TensorNode& node) {
                              auto& px = *node.parents[0];
                              auto& pw = *node.parents[1];
                              CMapM X(px.values.data(), rows, in);
                              CMapM W(pw.values.data(), out_f, in);
                              CMapM G(node.grad.data(), rows, out_f);
                              MapM GX(px.grad.data(), rows, in);
                              MapM GW(pw.grad.data(), out_f, in);
                              GX.noalias() += G * W;
                              GW.noalias() += G.transpose() * X;
                              if (has_bias) {
                                  auto& pb = *node.parents[2];
                                  Eigen::Map<Eigen::VectorXd> GB(pb.grad.data(), out_f);
                                  GB.noalias() += G.colwise().sum().transpose();
                              }
                          });
}

namespace {

struct ConvDims {
    std::int64_t N, C, H, W, Co, Cig, kh, kw, Ho, Wo, groups, stride, pad;
};

void im2col(const double* x, const ConvDims& cd, std::int64_t n, std::int64_t grp, double* col) {
    std::int64_t HW = cd.H * cd.W;
    std::int64_t out_hw = cd.Ho * cd.Wo;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < cd.Cig; ++c) {
        const double* xc = x + ((n * cd.C) + grp * cd.Cig + c) * HW;
        for (std::int64_t ki = 0; ki < cd.kh; ++ki)
            for (std::int64_t kj = 0; kj < cd.kw; ++kj) {
                double* dst = col + row * out_hw;
                for (std::int64_t oi = 0; oi < cd.Ho; ++oi) {
                    std::int64_t ii = oi * cd.stride - cd.pad + ki;
                    if (ii < 0 || ii >= cd.H) {
                        std::fill(dst, dst + cd.Wo, 0.0);
                        dst += cd.Wo;
                        continue;
                    }
                    const double* xr = xc + ii * cd.W;
                    for (std::int64_t oj = 0; oj < cd.Wo; ++oj) {
                        std::int64_t jj = oj * cd.stride - cd.pad + kj;
                        *dst++ = (jj >= 0 && jj < cd.W) ? xr[jj] : 0.0;
                    }
                }
                ++row;
            }
    }
}

void col2im_add(const double* col, const ConvDims& cd, std::int64_t n, std::int64_t grp,
                double* gx) {
    std::int64_t HW = cd.H * cd.W;
    std::int64_t out_hw = cd.Ho * cd.Wo;
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < cd.Cig; ++c) {
        double* xc = gx + ((n * cd.C) + grp * cd.Cig + c) * HW;
        for (std::int64_t ki = 0; ki < cd.kh; ++ki)
            for (std::int64_t kj = 0; kj < cd.kw; ++kj) {
                const double* src = col + row * out_hw;
                for (std::int64_t oi = 0; oi < cd.Ho; ++oi) {
                    std::int64_t ii = oi * cd.stride - cd.pad + ki;
                    if (ii < 0 || ii >= cd.H) {
                        src += cd.Wo;
                        continue;
                    }
                    double* xr = xc + ii * cd.W;
                    for (std::int64_t oj = 0; oj < cd.Wo; ++oj) {
                        std::int64_t jj = oj * cd.stride - cd.pad + kj;
                        if (jj >= 0 && jj < cd.W) xr[jj] += src[oj];
                    }
                    src += cd.Wo;
                }
                ++row;
            }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t stride,
              std::int64_t padding, std::int64_t groups) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    check<ShapeError>(xs.size() == 4, "conv2d: input must be NCHW, got " + shape_str(xs));
    check<ShapeError>(ws.size() == 4, "conv2d: weight must be 4D, got " + shape_str(ws));
    ConvDims cd;
    cd.N = xs[0];
    cd.C = xs[1];
    cd.H = xs[2];
    cd.W = xs[3];
    cd.Co = ws[0];
    cd.Cig = ws[1];
    cd.kh = ws[2];
    cd.kw = ws[3];
    cd.groups = groups;
    cd.stride = stride;
    cd.pad = padding;
    check<ShapeError>(groups >= 1 && cd.C % groups == 0 && cd.Co % groups == 0,
                      "conv2d: groups " + std::to_string(groups) + " incompatible with channels");
    check<ShapeError>(cd.Cig == cd.C / groups,
                      "conv2d: weight " + shape_str(ws) + " vs input channels " +
                          std::to_string(cd.C) + " groups " + std::to_string(groups));
    cd.Ho = (cd.H + 2 * padding - cd.kh) / stride + 1;
    cd.Wo = (cd.W + 2 * padding - cd.kw) / stride + 1;
    check<ShapeError>(cd.Ho >= 1 && cd.Wo >= 1, "conv2d: empty output for input " + shape_str(xs));
    bool has_bias = b.defined();
    if (has_bias)
        check<ShapeError>(b.shape() == Shape{cd.Co}, "conv2d: bias shape " + shape_str(b.shape()));

    std::int64_t Cog = cd.Co / groups;
    std::int64_t ckk = cd.Cig * cd.kh * cd.kw;
    std::int64_t out_hw = cd.Ho * cd.Wo;
    std::vector<double> out(static_cast<std::size_t>(cd.N * cd.Co * out_hw));
    std::vector<double> col(static_cast<std::size_t>(ckk * out_hw));
    for (std::int64_t n = 0; n < cd.N; ++n)
        for (std::int64_t g = 0; g < groups; ++g) {
            im2col(x.data(), cd, n, g, col.data());
            CMapM W(w.data() + g * Cog * ckk, Cog, ckk);
            CMapM Cm(col.data(), ckk, out_hw);
            MapM O(out.data() + (n * cd.Co + g * Cog) * out_hw, Cog, out_hw);
            O.noalias() = W * Cm;
        }
    if (has_bias) {
        const double* bv = b.data();
        for (std::int64_t n = 0; n < cd.N; ++n)
            for (std::int64_t c = 0; c < cd.Co; ++c) {
                double* o = out.data() + (n * cd.Co + c) * out_hw;
                for (std::int64_t i = 0; i < out_hw; ++i) o[i] += bv[c];
            }
    }
    Shape oshape{cd.N, cd.Co, cd.Ho, cd.Wo};
    std::vector<Tensor> parents = has_bias ? std::vector<Tensor>{x, w, b}
                                           : std::vector<Tensor>{x, w};
    return make_op_result(
        std::move(oshape), std::move(out), parents, [cd, Cog, ckk, out_hw, has_bias](TensorNode& node) {
            auto& px = *node.parents[0];
            auto& pw = *node.parents[1];
            std::vector<double> col(static_cast<std::size_t>(ckk * out_hw));
            std::vector<double> gcol(static_cast<std::size_t>(ckk * out_hw));
            for (std::int64_t n = 0; n < cd.N; ++n)
                for (std::int64_t g = 0; g < cd.groups; ++g) {
                    im2col(px.values.data(), cd, n, g, col.data());
                    CMapM W(pw.values.data() + g * Cog * ckk, Cog, ckk);
                    CMapM Cm(col.data(), ckk, out_hw);
                    CMapM G(node.grad.data() + (n * cd.Co + g * Cog) * out_hw, Cog, out_hw);
                    MapM GW(pw.grad.data() + g * Cog * ckk, Cog, ckk);
                    GW.noalias() += G * Cm.transpose();
                    MapM GC(gcol.data(), ckk, out_hw);
                    GC.noalias() = W.transpose() * G;
                    col2im_add(gcol.data(), cd, n, g, px.grad.data());
                }
            if (has_bias) {
                auto& pb = *node.parents[2];
                double* gb = pb.grad.data();
                const double* go = node.grad.data();
                for (std::int64_t n = 0; n < cd.N; ++n)
                    for (std::int64_t c = 0; c < cd.Co; ++c) {
                        const double* g = go + (n * cd.Co + c) * out_hw;
                        double acc = 0.0;
                        for (std::int64_t i = 0; i < out_hw; ++i) acc += g[i];
                        gb[c] += acc;
                    }
            }
        });
}

Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    Tensor& running_mean, Tensor& running_var, bool training, double momentum,
                    double eps) {
    const Shape& xs = x.shape();
    check<ShapeError>(xs.size() == 4, "batch_norm2d: input must be NCHW");
    std::int64_t N = xs[0], C = xs[1], HW = xs[2] * xs[3];
    check<ShapeError>(gamma.shape() == Shape{C} && beta.shape() == Shape{C},
                      "batch_norm2d: affine params must be [C]");

    std::vector<double> mean(static_cast<std::size_t>(C));
    std::vector<double> iv(static_cast<std::size_t>(C));
    const double* xv = x.data();
    double m = static_cast<double>(N * HW);
    if (training) {
        check<ValueError>(N * HW > 1, "batch_norm2d: need more than one value per channel");
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = xv + (n * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) s += p[i];
            }
            double mu = s / m;
            double v = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* p = xv + (n * C + c) * HW;
                for (std::int64_t i = 0; i < HW; ++i) {
                    double d = p[i] - mu;
                    v += d * d;
                }
            }
            double var_b = v / m;
            mean[static_cast<std::size_t>(c)] = mu;
            iv[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(var_b + eps);
            double var_u = v / (m - 1.0);
            running_mean.data()[c] = (1.0 - momentum) * running_mean.data()[c] + momentum * mu;
            running_var.data()[c] = (1.0 - momentum) * running_var.data()[c] + momentum * var_u;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[static_cast<std::size_t>(c)] = running_mean.data()[c];
            iv[static_cast<std::size_t>(c)] = 1.0 / std::sqrt(running_var.data()[c] + eps);
        }
    }

    std::vector<double> out(x.values().size());
    const double* gv = gamma.data();
    const double* bv = beta.data();
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t c = 0; c < C; ++c) {
            const double* p = xv + (n * C + c) * HW;
            double* o = out.data() + (n * C + c) * HW;
            double mu = mean[static_cast<std::size_t>(c)];
            double ivc = iv[static_cast<std::size_t>(c)];
            double g = gv[c], bb = bv[c];
            for (std::int64_t i = 0; i < HW; ++i) o[i] = (p[i] - mu) * ivc * g + bb;
        }
    return make_op_result(
        xs, std::move(out), {x, gamma, beta},
        [N, C, HW, m, training, mean = std::move(mean), iv = std::move(iv)](TensorNode& node) {
            auto& px = *node.parents[0];
            auto& pg = *node.parents[1];
            auto& pb = *node.parents[2];
            const double* xv = px.values.data();
            const double* gv = pg.values.data();
            const double* go = node.grad.data();
            double* gx = px.grad.data();
            double* gg = pg.grad.data();
            double* gb = pb.grad.data();
            for (std::int64_t c = 0; c < C; ++c) {
                double mu = mean[static_cast<std::size_t>(c)];
                double ivc = iv[static_cast<std::size_t>(c)];
                double g = gv[c];
                double sum_go = 0.0, sum_go_xhat = 0.0;
                for (std::int64_t n = 0; n < N; ++n) {
                    const double* p = xv + (n * C + c) * HW;
                    const double* q = go + (n * C + c) * HW;
                    for (std::int64_t i = 0; i < HW; ++i) {
                        sum_go += q[i];
                        sum_go_xhat += q[i] * (p[i] - mu) * ivc;
                    }
                }
                gg[c] += sum_go_xhat;
                gb[c] += sum_go;
                if (training) {
                    for (std::int64_t n = 0; n < N; ++n) {
                        const double* p = xv + (n * C + c) * HW;
                        const double* q = go + (n * C + c) * HW;
                        double* r = gx + (n * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) {
                            double xhat = (p[i] - mu) * ivc;
                            r[i] += g * ivc / m * (m * q[i] - sum_go - xhat * sum_go_xhat);
                        }
                    }
                } else {
                    double k = g * ivc;
                    for (std::int64_t n = 0; n < N; ++n) {
                        const double* q = go + (n * C + c) * HW;
                        double* r = gx + (n * C + c) * HW;
                        for (std::int64_t i = 0; i < HW; ++i) r[i] += k * q[i];
                    }
                }
            }
        });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const Shape& xs = x.shape();
    check<ShapeError>(!xs.empty(), "layer_norm: empty shape");
    std::int64_t D = xs.back();
    check<ShapeError>(gamma.shape() == Shape{D} && beta.shape() == Shape{D},
                      "layer_norm: affine params must match last dim " + std::to_string(D));
    std::int64_t rows = x.numel() / D;
    std::vector<double> mean(static_cast<std::size_t>(rows));
    std::vector<double> iv(static_cast<std::size_t>(rows));
    std::vector<double> out(x.values().size());
    const double* xv = x.data();
    const double* gv = gamma.data();
    const double* bv = beta.data();
    double dm = static_cast<double>(D);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* p = xv + r * D;
        double s = 0.0;
        for (std::int64_t i = 0; i < D; ++i) s += p[i];
        double mu = s / dm;
        double v = 0.0;
        for (std::int64_t i = 0; i < D; ++i) {
            double d = p[i] - mu;
            v += d * d;
        }
        double ivr = 1.0 / std::sqrt(v / dm + eps);
        mean[static_cast<std::size_t>(r)] = mu;
        iv[static_cast<std::size_t>(r)] = ivr;
        double* o = out.data() + r * D;
        for (std::int64_t i = 0; i < D; ++i) o[i] = (p[i] - mu) * ivr * gv[i] + bv[i];
    }
    return make_op_result(
        xs, std::move(out), {x, gamma, beta},
        [rows, D, dm, mean = std::move(mean), iv = std::move(iv)](TensorNode& node) {
            auto& px = *node.parents[0];
            auto& pg = *node.parents[1];
            auto& pb = *node.parents[2];
            const double* xv = px.values.data();
            const double* gv = pg.values.data();
            const double* go = node.grad.data();
            double* gx = px.grad.data();
            double* gg = pg.grad.data();
            double* gb = pb.grad.data();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* p = xv + r * D;
                const double* q = go + r * D;
                double mu = mean[static_cast<std::size_t>(r)];
                double ivr = iv[static_cast<std::size_t>(r)];
                double sum_gxhat = 0.0, sum_gxhat_xhat = 0.0;
                for (std::int64_t i = 0; i < D; ++i) {
                    double xhat = (p[i] - mu) * ivr;
                    double gxh = q[i] * gv[i];
                    sum_gxhat += gxh;
                    sum_gxhat_xhat += gxh * xhat;
                    gg[i] += q[i] * xhat;
                    gb[i] += q[i];
                }
                double* r2 = gx + r * D;
                for (std::int64_t i = 0; i < D; ++i) {
                    double xhat = (p[i] - mu) * ivr;
                    double gxh = q[i] * gv[i];
                    r2[i] += ivr / dm * (dm * gxh - sum_gxhat - xhat * sum_gxhat_xhat);
                }
            }
        });
}

Tensor softmax(const Tensor& x, int dim) {
    DimSplit d = split_at(x.shape(), dim);
    std::vector<double> out(x.values().size());
    const double* xv = x.data();
    for (std::int64_t o = 0; o < d.outer; ++o)
        for (std::int64_t i = 0; i < d.inner; ++i) {
            std::int64_t base = o * d.len * d.inner + i;
            double mx = xv[base];
            for (std::int64_t k = 1; k < d.len; ++k)
                mx = std::max(mx, xv[base + k * d.inner]);
            double z = 0.0;
            for (std::int64_t k = 0; k < d.len; ++k) {
                double e = std::exp(xv[base + k * d.inner] - mx);
                out[static_cast<std::size_t>(base + k * d.inner)] = e;
                z += e;
            }
            double inv = 1.0 / z;
            for (std::int64_t k = 0; k < d.len; ++k)
                out[static_cast<std::size_t>(base + k * d.inner)] *= inv;
        }
    return make_op_result(x.shape(), std::move(out), {x}, [d](TensorNode& node) {
        auto& p = *node.parents[0];
        const double* yv = node.values.data();
        const double* go = node.grad.data();
        double* gx = p.grad.data();
        for (std::int64_t o = 0; o < d.outer; ++o)
            for (std::int64_t i = 0; i < d.inner; ++i) {
                std::int64_t base = o * d.len * d.inner + i;
                double dot = 0.0;
                for (std::int64_t k = 0; k < d.len; ++k) {
                    std::int64_t idx = base + k * d.inner;
                    dot += go[idx] * yv[idx];
                }
                for (std::int64_t k = 0; k < d.len; ++k) {
                    std::int64_t idx = base + k * d.inner;
                    gx[idx] += yv[idx] * (go[idx] - dot);
                }
            }
    });
}

namespace {

struct LerpAxis {
    std::vector<std::int64_t> i0, i1;
    std::vector<double> w0, w1;
};

LerpAxis make_lerp(std::int64_t in, std::int64_t out) {
    LerpAxis ax;
    ax.i0.resize(static_cast<std::size_t>(out));
    ax.i1.resize(static_cast<std::size_t>(out));
    ax.w0.resize(static_cast<std::size_t>(out));
    ax.w1.resize(static_cast<std::size_t>(out));
    double s = static_cast<double>(in) / static_cast<double>(out);
    for (std::int64_t i = 0; i < out; ++i) {
        double src = (static_cast<double>(i) + 0.5) * s - 0.5;
        if (src < 0.0) src = 0.0;
        auto lo = static_cast<std::int64_t>(src);
        ax.i0[static_cast<std::size_t>(i)] = lo;
        ax.i1[static_cast<std::size_t>(i)] = lo < in - 1 ? lo + 1 : lo;
        double f = src - static_cast<double>(lo);
        ax.w1[static_cast<std::size_t>(i)] = f;
        ax.w0[static_cast<std::size_t>(i)] = 1.0 - f;
    }
    return ax;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    const Shape& xs = x.shape();
    check<ShapeError>(xs.size() == 4, "bilinear_resize: input must be NCHW");
    check<ValueError>(out_h >= 1 && out_w >= 1, "bilinear_resize: invalid output size");
    std::int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (out_h == H && out_w == W) return scale(x, 1.0);
    LerpAxis ah = make_lerp(H, out_h);
    LerpAxis aw = make_lerp(W, out_w);
    std::vector<double> out(static_cast<std::size_t>(N * C * out_h * out_w));
    const double* xv = x.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* p = xv + nc * H * W;
        double* o = out.data() + nc * out_h * out_w;
        for (std::int64_t i = 0; i < out_h; ++i) {
            const double* r0 = p + ah.i0[static_cast<std::size_t>(i)] * W;
            const double* r1 = p + ah.i1[static_cast<std::size_t>(i)] * W;
            double h0 = ah.w0[static_cast<std::size_t>(i)], h1 = ah.w1[static_cast<std::size_t>(i)];
            for (std::int64_t j = 0; j < out_w; ++j) {
                std::int64_t j0 = aw.i0[static_cast<std::size_t>(j)];
                std::int64_t j1 = aw.i1[static_cast<std::size_t>(j)];
                double v0 = aw.w0[static_cast<std::size_t>(j)], v1 = aw.w1[static_cast<std::size_t>(j)];
                *o++ = h0 * (v0 * r0[j0] + v1 * r0[j1]) + h1 * (v0 * r1[j0] + v1 * r1[j1]);
            }
        }
    }
    return make_op_result({N, C, out_h, out_w}, std::move(out), {x},
                          [N, C, H, W, out_h, out_w, ah, aw](TensorNode& node) {
                              auto& p = *node.parents[0];
                              const double* go = node.grad.data();
                              double* gx = p.grad.data();
                              for (std::int64_t nc = 0; nc < N * C; ++nc) {
                                  double* gp = gx + nc * H * W;
                                  const double* g = go + nc * out_h * out_w;
                                  for (std::int64_t i = 0; i < out_h; ++i) {
                                      std::int64_t r0 = ah.i0[static_cast<std::size_t>(i)] * W;
                                      std::int64_t r1 = ah.i1[static_cast<std::size_t>(i)] * W;
                                      double h0 = ah.w0[static_cast<std::size_t>(i)];
                                      double h1 = ah.w1[static_cast<std::size_t>(i)];
                                      for (std::int64_t j = 0; j < out_w; ++j) {
                                          std::int64_t j0 = aw.i0[static_cast<std::size_t>(j)];
                                          std::int64_t j1 = aw.i1[static_cast<std::size_t>(j)];
                                          double v0 = aw.w0[static_cast<std::size_t>(j)];
                                          double v1 = aw.w1[static_cast<std::size_t>(j)];
                                          double gg = *g++;
                                          gp[r0 + j0] += gg * h0 * v0;
                                          gp[r0 + j1] += gg * h0 * v1;
                                          gp[r1 + j0] += gg * h1 * v0;
                                          gp[r1 + j1] += gg * h1 * v1;
                                      }
                                  }
                              }
                          });
}

Tensor adaptive_avg_pool2d(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
    const Shape& xs = x.shape();
    check<ShapeError>(xs.size() == 4, "adaptive_avg_pool2d: input must be NCHW");
    check<ValueError>(out_h >= 1 && out_w >= 1, "adaptive_avg_pool2d: invalid output size");
    std::int64_t N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    auto win = [](std::int64_t i, std::int64_t in, std::int64_t out, std::int64_t& s,
                  std::int64_t& e) {
        s = i * in / out;
        e = (i + 1) * in + out - 1;
        e = e / out;
        if (e > in) e = in;
    };
    std::vector<double> out(static_cast<std::size_t>(N * C * out_h * out_w));
    const double* xv = x.data();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* p = xv + nc * H * W;
        double* o = out.data() + nc * out_h * out_w;
        for (std::int64_t i = 0; i < out_h; ++i) {
            std::int64_t hs, he;
            win(i, H, out_h, hs, he);
            for (std::int64_t j = 0; j < out_w; ++j) {
                std::int64_t ws, we;
                win(j, W, out_w, ws, we);
                double acc = 0.0;
                for (std::int64_t u = hs; u < he; ++u)
                    for (std::int64_t v = ws; v < we; ++v) acc += p[u * W + v];
                *o++ = acc / static_cast<double>((he - hs) * (we - ws));
            }
        }
    }
    return make_op_result({N, C, out_h, out_w}, std::move(out), {x},
                          [N, C, H, W, out_h, out_w, win](TensorNode& node) {
                              auto& p = *node.parents[0];
                              const double* go = node.grad.data();
                              double* gx = p.grad.data();
                              for (std::int64_t nc = 0; nc < N * C; ++nc) {
                                  double* gp = gx + nc * H * W;
                                  const double* g = go + nc * out_h * out_w;
                                  for (std::int64_t i = 0; i < out_h; ++i) {
                                      std::int64_t hs, he;
                                      win(i, H, out_h, hs, he);
                                      for (std::int64_t j = 0; j < out_w; ++j) {
                                          std::int64_t ws, we;
                                          win(j, W, out_w, ws, we);
                                          double gg = *g++ / static_cast<double>((he - hs) * (we - ws));
                                          for (std::int64_t u = hs; u < he; ++u)
                                              for (std::int64_t v = ws; v < we; ++v)
                                                  gp[u * W + v] += gg;
                                      }
                                  }
                              }
                          });
}

Tensor global_max_pool2d(const Tensor& x) {
    const Shape& xs = x.shape();
    check<ShapeError>(xs.size() == 4, "global_max_pool2d: input must be NCHW");
    std::int64_t NC = xs[0] * xs[1], HW = xs[2] * xs[3];
    std::vector<double> out(static_cast<std::size_t>(NC));
    std::vector<std::int64_t> arg(static_cast<std::size_t>(NC));
    const double* xv = x.data();
    for (std::int64_t nc = 0; nc < NC; ++nc) {
        const double* p = xv + nc * HW;
        std::int64_t best = 0;
        for (std::int64_t i = 1; i < HW; ++i)
            if (p[i] > p[best]) best = i;
        out[static_cast<std::size_t>(nc)] = p[best];
        arg[static_cast<std::size_t>(nc)] = nc * HW + best;
    }
    return make_op_result({xs[0], xs[1], 1, 1}, std::move(out), {x},
                          [arg = std::move(arg)](TensorNode& node) {
                              auto& p = *node.parents[0];
                              const double* go = node.grad.data();
                              double* gx = p.grad.data();
                              for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += go[i];
                          });
}

Tensor global_avg_pool2d(const Tensor& x) {
    const Shape& xs = x.shape();
    check<ShapeError>(xs.size() == 4, "global_avg_pool2d: input must be NCHW");
    return adaptive_avg_pool2d(x, 1, 1);
}

namespace {

// Separable zero-padded box sum divided by k per axis (so applying both
// axes divides by k*k). Symmetric, hence self-adjoint.
void box_filter_nchw(const double* in, double* out, std::int64_t NC, std::int64_t H,
                     std::int64_t W, std::int64_t k) {
    std::int64_t p = k / 2;
    double inv = 1.0 / static_cast<double>(k);
    std::vector<double> tmp(static_cast<std::size_t>(H * W));
    for (std::int64_t nc = 0; nc < NC; ++nc) {
        const double* src = in + nc * H * W;
        // Horizontal pass into tmp.
        for (std::int64_t i = 0; i < H; ++i) {
            const double* r = src + i * W;
            double* t = tmp.data() + i * W;
            double acc = 0.0;
            for (std::int64_t j = 0; j < std::min(p, W); ++j) acc += r[j];
            for (std::int64_t j = 0; j < W; ++j) {
                if (j + p < W) acc += r[j + p];
                t[j] = acc * inv;
                if (j - p >= 0) acc -= r[j - p];
            }
        }
        // Vertical pass into out.
        double* dst = out + nc * H * W;
        for (std::int64_t j = 0; j < W; ++j) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < std::min(p, H); ++i) acc += tmp[i * W + j];
            for (std::int64_t i = 0; i < H; ++i) {
                if (i + p < H) acc += tmp[(i + p) * W + j];
                dst[i * W + j] = acc * inv;
                if (i - p >= 0) acc -= tmp[(i - p) * W + j];
            }
        }
    }
}

}  // namespace

Tensor avg_pool2d_samepad(const Tensor& x, std::int64_t k) {
    const Shape& xs = x.shape();
    check<ShapeError>(xs.size() == 4, "avg_pool2d_samepad: input must be NCHW");
    check<ValueError>(k >= 1 && k % 2 == 1, "avg_pool2d_samepad: kernel must be odd");
    std::int64_t NC = xs[0] * xs[1], H = xs[2], W = xs[3];
    std::vector<double> out(x.values().size());
    box_filter_nchw(x.data(), out.data(), NC, H, W, k);
    return make_op_result(xs, std::move(out), {x}, [NC, H, W, k](TensorNode& node) {
        auto& p = *node.parents[0];
        std::vector<double> g(node.grad.size());
        box_filter_nchw(node.grad.data(), g.data(), NC, H, W, k);
        double* gx = p.grad.data();
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
    check<ValueError>(p >= 0.0 && p < 1.0, "dropout: p must be in [0,1)");
    if (!training || p == 0.0) return scale(x, 1.0);
    std::int64_t n = x.numel();
    double keep = 1.0 - p;
    double s = 1.0 / keep;
    std::vector<double> mask(static_cast<std::size_t>(n));
    for (auto& mv : mask) mv = rng.bernoulli(keep) ? s : 0.0;
    std::vector<double> out(static_cast<std::size_t>(n));
    const double* xv = x.data();
    for (std::int64_t i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] = xv[i] * mask[static_cast<std::size_t>(i)];
    return make_op_result(x.shape(), std::move(out), {x},
                          [mask = std::move(mask)](TensorNode& node) {
                              auto& p = *node.parents[0];
                              const double* go = node.grad.data();
                              double* gx = p.grad.data();
                              for (std::size_t i = 0; i < mask.size(); ++i)
                                  gx[i] += go[i] * mask[i];
                          });
}

Tensor drop_path(const Tensor& x, double p, bool training, Rng& rng) {
    check<ValueError>(p >= 0.0 && p < 1.0, "drop_path: p must be in [0,1)");
    if (!training || p == 0.0) return scale(x, 1.0);
    const Shape& xs = x.shape();
    check<ShapeError>(!xs.empty(), "drop_path: empty shape");
    std::int64_t B = xs[0];
    std::int64_t per = x.numel() / B;
    double keep = 1.0 - p;
    double s = 1.0 / keep;
    std::vector<double> mask(static_cast<std::size_t>(B));
    for (auto& mv : mask) mv = rng.bernoulli(keep) ? s : 0.0;
    std::vector<double> out(x.values().size());
    const double* xv = x.data();
    for (std::int64_t b = 0; b < B; ++b) {
        double mv = mask[static_cast<std::size_t>(b)];
        const double* src = xv + b * per;
        double* dst = out.data() + b * per;
        for (std::int64_t i = 0; i < per; ++i) dst[i] = src[i] * mv;
    }
    return make_op_result(xs, std::move(out), {x},
                          [per, mask = std::move(mask)](TensorNode& node) {
                              auto& p = *node.parents[0];
                              const double* go = node.grad.data();
                              double* gx = p.grad.data();
                              for (std::size_t b = 0; b < mask.size(); ++b) {
                                  double mv = mask[b];
                                  const double* src = go + static_cast<std::int64_t>(b) * per;
                                  double* dst = gx + static_cast<std::int64_t>(b) * per;
                                  for (std::int64_t i = 0; i < per; ++i) dst[i] += src[i] * mv;
                              }
                          });
}

}  // namespace polypseg::ops
