#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "instid/tensor.hpp"

namespace instid {

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<EMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const EMat<T>>;

template <typename T>
MapM<T> as_mat(Tensor<T>& t, int rows, int cols) {
    return MapM<T>(t.data.data(), rows, cols);
}
template <typename T>
CMapM<T> as_mat(const Tensor<T>& t, int rows, int cols) {
    return CMapM<T>(t.data.data(), rows, cols);
}

// Reverse-mode tape. One tape per forward pass; ops append nodes, backward()
// walks them in reverse. Gradients are only materialized for nodes on a path
// from a requires-grad leaf to the loss.
template <typename T>
class Tape {
  public:
    struct Var {
        int i = -1;
        bool valid() const { return i >= 0; }
    };

    Tape() { nodes_.reserve(256); }

    Var leaf(Tensor<T> value, bool requires_grad = false) {
        return push(std::move(value), requires_grad, {}, nullptr);
    }

    const Tensor<T>& val(Var v) const { return nodes_[v.i].value; }
    Tensor<T>& mutable_val(Var v) { return nodes_[v.i].value; }
    const Tensor<T>& grad(Var v) const { return nodes_[v.i].grad; }
    bool needs_grad(Var v) const { return nodes_[v.i].needs_grad; }
    std::size_t size() const { return nodes_.size(); }

    // ---- elementwise ----

    Var add(Var a, Var b) {
        check_same(a, b, "add");
        Tensor<T> out = val(a);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += val(b)[i];
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b](Node& n) {
            accumulate(a, n.grad);
            accumulate(b, n.grad);
        });
    }

    Var sub(Var a, Var b) {
        check_same(a, b, "sub");
        Tensor<T> out = val(a);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= val(b)[i];
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b](Node& n) {
            accumulate(a, n.grad);
            if (nodes_[b.i].needs_grad) {
                Tensor<T> g = n.grad;
                for (auto& v : g.data) v = -v;
                accumulate(b, g);
            }
        });
    }

    // a + s*b
    Var add_scaled(Var a, Var b, T s) {
        check_same(a, b, "add_scaled");
        Tensor<T> out = val(a);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += s * val(b)[i];
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b, s](Node& n) {
            accumulate(a, n.grad);
            if (nodes_[b.i].needs_grad) {
                Tensor<T> g = n.grad;
                for (auto& v : g.data) v *= s;
                accumulate(b, g);
            }
        });
    }

    Var mul(Var a, Var b) {
        check_same(a, b, "mul");
        Tensor<T> out = val(a);
        for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= val(b)[i];
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b](Node& n) {
            if (nodes_[a.i].needs_grad) {
                Tensor<T> g = n.grad;
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= val(b)[i];
                accumulate(a, g);
            }
            if (nodes_[b.i].needs_grad) {
                Tensor<T> g = n.grad;
                for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= val(a)[i];
                accumulate(b, g);
            }
        });
    }

    Var scale(Var a, T s) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v *= s;
        return push(std::move(out), any_grad({a}), {a}, [this, a, s](Node& n) {
            Tensor<T> g = n.grad;
            for (auto& v : g.data) v *= s;
            accumulate(a, g);
        });
    }

    Var silu(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
        return push(std::move(out), any_grad({a}), {a}, [this, a](Node& n) {
            Tensor<T> g = n.grad;
            const Tensor<T>& x = val(a);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                const T s = T(1) / (T(1) + std::exp(-x[i]));
                g[i] *= s * (T(1) + x[i] * (T(1) - s));
            }
            accumulate(a, g);
        });
    }

    Var sigmoid(Var a) {
        Tensor<T> out = val(a);
        for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
        Var r = push(std::move(out), any_grad({a}), {a}, nullptr);
        nodes_[r.i].backward = [this, a, r](Node& n) {
            Tensor<T> g = n.grad;
            const Tensor<T>& y = val(r);
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] *= y[i] * (T(1) - y[i]);
            accumulate(a, g);
        };
        return r;
    }

    // ---- matrix ops ----

    // [m,k] x [k,n] -> [m,n]
    Var matmul(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        const int m = A.dim(0), k = A.dim(1), n = B.dim(1);
        if (B.dim(0) != k) throw ShapeError("matmul: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        Tensor<T> out(Shape{m, n});
        as_mat(out, m, n).noalias() = as_mat(A, m, k) * as_mat(B, k, n);
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b, m, k, n](Node& nd) {
            CMapM<T> G(nd.grad.data.data(), m, n);
            if (nodes_[a.i].needs_grad) {
                Tensor<T> ga(Shape{m, k});
                as_mat(ga, m, k).noalias() = G * as_mat(val(b), k, n).transpose();
                accumulate(a, ga);
            }
            if (nodes_[b.i].needs_grad) {
                Tensor<T> gb(Shape{k, n});
                as_mat(gb, k, n).noalias() = as_mat(val(a), m, k).transpose() * G;
                accumulate(b, gb);
            }
        });
    }

    // [m,k] x [n,k]^T -> [m,n]
    Var matmul_nt(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        const int m = A.dim(0), k = A.dim(1), n = B.dim(0);
        if (B.dim(1) != k) throw ShapeError("matmul_nt: inner dims " + shape_str(A.shape) + " x " + shape_str(B.shape));
        Tensor<T> out(Shape{m, n});
        as_mat(out, m, n).noalias() = as_mat(A, m, k) * as_mat(B, n, k).transpose();
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b, m, k, n](Node& nd) {
            CMapM<T> G(nd.grad.data.data(), m, n);
            if (nodes_[a.i].needs_grad) {
                Tensor<T> ga(Shape{m, k});
                as_mat(ga, m, k).noalias() = G * as_mat(val(b), n, k);
                accumulate(a, ga);
            }
            if (nodes_[b.i].needs_grad) {
                Tensor<T> gb(Shape{n, k});
                as_mat(gb, n, k).noalias() = G.transpose() * as_mat(val(a), m, k);
                accumulate(b, gb);
            }
        });
    }

    // x [n,in] * w[out,in]^T + bias[out] -> [n,out]
    Var linear(Var x, Var w, Var b) {
        Var y = matmul_nt(x, w);
        return add_row_vec(y, b);
    }

    // y[i,j] = x[i,j] + v[j]
    Var add_row_vec(Var x, Var v) {
        const auto& X = val(x);
        const int n = X.dim(0), c = X.dim(1);
        if (val(v).numel() != c) throw ShapeError("add_row_vec: width mismatch");
        Tensor<T> out = X;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) += val(v)[j];
        return push(std::move(out), any_grad({x, v}), {x, v}, [this, x, v, n, c](Node& nd) {
            accumulate(x, nd.grad);
            if (nodes_[v.i].needs_grad) {
                Tensor<T> gv(Shape{c});
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j) gv[j] += nd.grad.at(i, j);
                accumulate(v, gv);
            }
        });
    }

    // Multiply row i of x [n,c] by constant s[i]; no gradient for s.
    Var scale_rows(Var x, std::vector<T> s) {
        const auto& X = val(x);
        const int n = X.dim(0), c = X.dim(1);
        if (static_cast<int>(s.size()) != n) throw ShapeError("scale_rows: length mismatch");
        Tensor<T> out = X;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) *= s[static_cast<std::size_t>(i)];
        return push(std::move(out), any_grad({x}), {x}, [this, x, s = std::move(s), n, c](Node& nd) {
            Tensor<T> g = nd.grad;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < c; ++j) g.at(i, j) *= s[static_cast<std::size_t>(i)];
            accumulate(x, g);
        });
    }

    // Row-wise softmax over [n,m].
    Var softmax_rows(Var a) {
        const auto& A = val(a);
        const int n = A.dim(0), m = A.dim(1);
        Tensor<T> out = A;
        for (int i = 0; i < n; ++i) {
            T mx = out.at(i, 0);
            for (int j = 1; j < m; ++j) mx = std::max(mx, out.at(i, j));
            T sum = T(0);
            for (int j = 0; j < m; ++j) {
                out.at(i, j) = std::exp(out.at(i, j) - mx);
                sum += out.at(i, j);
            }
            for (int j = 0; j < m; ++j) out.at(i, j) /= sum;
        }
        Var r = push(std::move(out), any_grad({a}), {a}, nullptr);
        nodes_[r.i].backward = [this, a, r, n, m](Node& nd) {
            const Tensor<T>& P = val(r);
            Tensor<T> g(Shape{n, m});
            for (int i = 0; i < n; ++i) {
                T dot = T(0);
                for (int j = 0; j < m; ++j) dot += nd.grad.at(i, j) * P.at(i, j);
                for (int j = 0; j < m; ++j) g.at(i, j) = P.at(i, j) * (nd.grad.at(i, j) - dot);
            }
            accumulate(a, g);
        };
        return r;
    }

    // [h*w, c] tokens from CHW and back.
    Var chw_to_tokens(Var x) {
        const auto& X = val(x);
        const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
        Tensor<T> out(Shape{h * w, c});
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < h * w; ++p) out.at(p, ch) = X[static_cast<std::int64_t>(ch) * h * w + p];
        return push(std::move(out), any_grad({x}), {x}, [this, x, c, h, w](Node& nd) {
            Tensor<T> g(Shape{c, h, w});
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < h * w; ++p) g[static_cast<std::int64_t>(ch) * h * w + p] = nd.grad.at(p, ch);
            accumulate(x, g);
        });
    }

    Var tokens_to_chw(Var x, int c, int h, int w) {
        const auto& X = val(x);
        if (X.dim(0) != h * w || X.dim(1) != c) throw ShapeError("tokens_to_chw: bad shape");
        Tensor<T> out(Shape{c, h, w});
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < h * w; ++p) out[static_cast<std::int64_t>(ch) * h * w + p] = X.at(p, ch);
        return push(std::move(out), any_grad({x}), {x}, [this, x, c, h, w](Node& nd) {
            Tensor<T> g(Shape{h * w, c});
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < h * w; ++p) g.at(p, ch) = nd.grad[static_cast<std::int64_t>(ch) * h * w + p];
            accumulate(x, g);
        });
    }

    // Gather rows of a [v,d] table; backward scatter-adds.
    Var gather_rows(Var table, std::vector<int> idx) {
        const auto& Tb = val(table);
        const int d = Tb.dim(1);
        const int n = static_cast<int>(idx.size());
        Tensor<T> out(Shape{n, d});
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) out.at(i, j) = Tb.at(idx[static_cast<std::size_t>(i)], j);
        return push(std::move(out), any_grad({table}), {table},
                    [this, table, idx = std::move(idx), d](Node& nd) {
                        Tensor<T> g(val(table).shape);
                        for (std::size_t i = 0; i < idx.size(); ++i)
                            for (int j = 0; j < d; ++j) g.at(idx[i], j) += nd.grad.at(static_cast<int>(i), j);
                        accumulate(table, g);
                    });
    }

    Var concat_rows(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.dim(1) != B.dim(1)) throw ShapeError("concat_rows: width mismatch");
        const int na = A.dim(0), nb = B.dim(0), d = A.dim(1);
        Tensor<T> out(Shape{na + nb, d});
        std::copy(A.data.begin(), A.data.end(), out.data.begin());
        std::copy(B.data.begin(), B.data.end(), out.data.begin() + A.data.size());
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b, na, nb, d](Node& nd) {
            if (nodes_[a.i].needs_grad) {
                Tensor<T> g(Shape{na, d});
                std::copy(nd.grad.data.begin(), nd.grad.data.begin() + g.data.size(), g.data.begin());
                accumulate(a, g);
            }
            if (nodes_[b.i].needs_grad) {
                Tensor<T> g(Shape{nb, d});
                std::copy(nd.grad.data.begin() + static_cast<std::size_t>(na) * d, nd.grad.data.end(),
                          g.data.begin());
                accumulate(b, g);
            }
        });
    }

    // ---- image ops (CHW) ----

    Var conv2d(Var x, Var w, Var b, int stride, int pad) {
        const auto& X = val(x);
        const auto& W = val(w);
        const int ci = X.dim(0), h = X.dim(1), wd = X.dim(2);
        const int co = W.dim(0), kh = W.dim(2), kw = W.dim(3);
        if (W.dim(1) != ci) throw ShapeError("conv2d: channel mismatch " + shape_str(X.shape) + " vs " + shape_str(W.shape));
        const int ho = (h + 2 * pad - kh) / stride + 1;
        const int wo = (wd + 2 * pad - kw) / stride + 1;
        Tensor<T> col = im2col(X, kh, kw, stride, pad, ho, wo);
        Tensor<T> out(Shape{co, ho, wo});
        as_mat(out, co, ho * wo).noalias() =
            as_mat(W, co, ci * kh * kw) * as_mat(col, ci * kh * kw, ho * wo);
        for (int c = 0; c < co; ++c) {
            T* dst = out.data.data() + static_cast<std::int64_t>(c) * ho * wo;
            const T bias = val(b)[c];
            for (int p = 0; p < ho * wo; ++p) dst[p] += bias;
        }
        return push(std::move(out), any_grad({x, w, b}), {x, w, b},
                    [this, x, w, b, col = std::move(col), stride, pad, ci, h, wd, co, kh, kw, ho,
                     wo](Node& nd) {
                        CMapM<T> G(nd.grad.data.data(), co, ho * wo);
                        if (nodes_[b.i].needs_grad) {
                            Tensor<T> gb(Shape{co});
                            for (int c = 0; c < co; ++c) gb[c] = G.row(c).sum();
                            accumulate(b, gb);
                        }
                        if (nodes_[w.i].needs_grad) {
                            Tensor<T> gw(Shape{co, ci, kh, kw});
                            as_mat(gw, co, ci * kh * kw).noalias() =
                                G * as_mat(col, ci * kh * kw, ho * wo).transpose();
                            accumulate(w, gw);
                        }
                        if (nodes_[x.i].needs_grad) {
                            Tensor<T> gcol(Shape{ci * kh * kw, ho * wo});
                            as_mat(gcol, ci * kh * kw, ho * wo).noalias() =
                                as_mat(val(w), co, ci * kh * kw).transpose() * G;
                            Tensor<T> gx(Shape{ci, h, wd});
                            col2im(gcol, gx, kh, kw, stride, pad, ho, wo);
                            accumulate(x, gx);
                        }
                    });
    }

    Var upsample2x(Var x) {
        const auto& X = val(x);
        const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
        Tensor<T> out(Shape{c, 2 * h, 2 * w});
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < 2 * h; ++i)
                for (int j = 0; j < 2 * w; ++j)
                    out[(static_cast<std::int64_t>(ch) * 2 * h + i) * 2 * w + j] =
                        X[(static_cast<std::int64_t>(ch) * h + i / 2) * w + j / 2];
        return push(std::move(out), any_grad({x}), {x}, [this, x, c, h, w](Node& nd) {
            Tensor<T> g(Shape{c, h, w});
            for (int ch = 0; ch < c; ++ch)
                for (int i = 0; i < 2 * h; ++i)
                    for (int j = 0; j < 2 * w; ++j)
                        g[(static_cast<std::int64_t>(ch) * h + i / 2) * w + j / 2] +=
                            nd.grad[(static_cast<std::int64_t>(ch) * 2 * h + i) * 2 * w + j];
            accumulate(x, g);
        });
    }

    Var concat_ch(Var a, Var b) {
        const auto& A = val(a);
        const auto& B = val(b);
        if (A.dim(1) != B.dim(1) || A.dim(2) != B.dim(2)) throw ShapeError("concat_ch: spatial mismatch");
        const int ca = A.dim(0), cb = B.dim(0), h = A.dim(1), w = A.dim(2);
        Tensor<T> out(Shape{ca + cb, h, w});
        std::copy(A.data.begin(), A.data.end(), out.data.begin());
        std::copy(B.data.begin(), B.data.end(), out.data.begin() + A.data.size());
        return push(std::move(out), any_grad({a, b}), {a, b}, [this, a, b, ca, cb, h, w](Node& nd) {
            if (nodes_[a.i].needs_grad) {
                Tensor<T> g(Shape{ca, h, w});
                std::copy(nd.grad.data.begin(), nd.grad.data.begin() + g.data.size(), g.data.begin());
                accumulate(a, g);
            }
            if (nodes_[b.i].needs_grad) {
                Tensor<T> g(Shape{cb, h, w});
                std::copy(nd.grad.data.begin() + static_cast<std::size_t>(ca) * h * w, nd.grad.data.end(),
                          g.data.begin());
                accumulate(b, g);
            }
        });
    }

    // GroupNorm over CHW with per-channel affine.
    Var group_norm(Var x, Var gamma, Var beta, int groups, T eps = T(1e-5)) {
        const auto& X = val(x);
        const int c = X.dim(0), h = X.dim(1), w = X.dim(2);
        if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
        const int gc = c / groups;
        const std::int64_t gsize = static_cast<std::int64_t>(gc) * h * w;
        Tensor<T> xhat(Shape{c, h, w});
        std::vector<T> inv_std(static_cast<std::size_t>(groups));
        for (int g = 0; g < groups; ++g) {
            const T* src = X.data.data() + g * gsize;
            double mean = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) mean += src[i];
            mean /= static_cast<double>(gsize);
            double var = 0.0;
            for (std::int64_t i = 0; i < gsize; ++i) {
                const double d = src[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            const T istd = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            inv_std[static_cast<std::size_t>(g)] = istd;
            T* dst = xhat.data.data() + g * gsize;
            for (std::int64_t i = 0; i < gsize; ++i) dst[i] = static_cast<T>((src[i] - mean)) * istd;
        }
        Tensor<T> out(Shape{c, h, w});
        for (int ch = 0; ch < c; ++ch) {
            const T* src = xhat.data.data() + static_cast<std::int64_t>(ch) * h * w;
            T* dst = out.data.data() + static_cast<std::int64_t>(ch) * h * w;
            const T ga = val(gamma)[ch], be = val(beta)[ch];
            for (int p = 0; p < h * w; ++p) dst[p] = src[p] * ga + be;
        }
        return push(std::move(out), any_grad({x, gamma, beta}), {x, gamma, beta},
                    [this, x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), groups,
                     c, h, w, gc, gsize](Node& nd) {
                        if (nodes_[gamma.i].needs_grad) {
                            Tensor<T> gg(Shape{c});
                            for (int ch = 0; ch < c; ++ch) {
                                T acc = T(0);
                                for (int p = 0; p < h * w; ++p)
                                    acc += nd.grad[static_cast<std::int64_t>(ch) * h * w + p] *
                                           xhat[static_cast<std::int64_t>(ch) * h * w + p];
                                gg[ch] = acc;
                            }
                            accumulate(gamma, gg);
                        }
                        if (nodes_[beta.i].needs_grad) {
                            Tensor<T> gb(Shape{c});
                            for (int ch = 0; ch < c; ++ch) {
                                T acc = T(0);
                                for (int p = 0; p < h * w; ++p)
                                    acc += nd.grad[static_cast<std::int64_t>(ch) * h * w + p];
                                gb[ch] = acc;
                            }
                            accumulate(beta, gb);
                        }
                        if (nodes_[x.i].needs_grad) {
                            // dxhat = dy * gamma; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                            Tensor<T> gx(Shape{c, h, w});
                            for (int g = 0; g < groups; ++g) {
                                double sum_d = 0.0, sum_dx = 0.0;
                                for (int cc = 0; cc < gc; ++cc) {
                                    const int ch = g * gc + cc;
                                    const T ga = val(gamma)[ch];
                                    for (int p = 0; p < h * w; ++p) {
                                        const std::int64_t k = static_cast<std::int64_t>(ch) * h * w + p;
                                        const T d = nd.grad[k] * ga;
                                        sum_d += d;
                                        sum_dx += d * xhat[k];
                                    }
                                }
                                const double inv_n = 1.0 / static_cast<double>(gsize);
                                const T istd = inv_std[static_cast<std::size_t>(g)];
                                for (int cc = 0; cc < gc; ++cc) {
                                    const int ch = g * gc + cc;
                                    const T ga = val(gamma)[ch];
                                    for (int p = 0; p < h * w; ++p) {
                                        const std::int64_t k = static_cast<std::int64_t>(ch) * h * w + p;
                                        const T d = nd.grad[k] * ga;
                                        gx[k] = istd * static_cast<T>(d - sum_d * inv_n -
                                                                      xhat[k] * sum_dx * inv_n);
                                    }
                                }
                            }
                            accumulate(x, gx);
                        }
                    });
    }

    // Same data, new shape.
    Var reshape(Var a, Shape shape) {
        if (shape_numel(shape) != val(a).numel()) throw ShapeError("reshape: numel mismatch");
        Tensor<T> out = val(a);
        out.shape = shape;
        return push(std::move(out), any_grad({a}), {a}, [this, a](Node& n) {
            Tensor<T> g = n.grad;
            g.shape = val(a).shape;
            accumulate(a, g);
        });
    }

    // x[c,h,w] + b[1,c] broadcast over the spatial grid
    Var add_ch_bias(Var x, Var b) {
        const auto& X = val(x);
        const auto& B = val(b);
        if (X.ndim() != 3 || B.numel() != X.dim(0)) throw ShapeError("add_ch_bias: shape mismatch");
        const int c = X.dim(0), hw = X.dim(1) * X.dim(2);
        Tensor<T> out = X;
        for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < hw; ++i) out[ci * hw + i] += B[ci];
        return push(std::move(out), any_grad({x, b}), {x, b}, [this, x, b, c, hw](Node& n) {
            accumulate(x, n.grad);
            if (nodes_[b.i].needs_grad) {
                Tensor<T> g(val(b).shape, T(0));
                for (int ci = 0; ci < c; ++ci)
                    for (int i = 0; i < hw; ++i) g[ci] += n.grad[ci * hw + i];
                accumulate(b, g);
            }
        });
    }

    // ---- reductions ----

    // mean over elements of the stable binary cross entropy between logits
    // and fixed labels in [0,1]
    Var bce_logits(Var a, const Tensor<T>& labels) {
        const auto& A = val(a);
        if (A.shape != labels.shape) throw ShapeError("bce_logits: shape mismatch");
        const double inv_n = 1.0 / static_cast<double>(A.numel());
        double acc = 0.0;
        for (std::int64_t i = 0; i < A.numel(); ++i) {
            const double x = A[i], y = labels[i];
            acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
        }
        Tensor<T> out(Shape{1});
        out[0] = static_cast<T>(acc * inv_n);
        return push(std::move(out), any_grad({a}), {a}, [this, a, labels, inv_n](Node& nd) {
            Tensor<T> g(val(a).shape);
            const T s = nd.grad[0] * static_cast<T>(inv_n);
            for (std::int64_t i = 0; i < g.numel(); ++i) {
                const T sig = T(1) / (T(1) + std::exp(-val(a)[i]));
                g[i] = s * (sig - labels[i]);
            }
            accumulate(a, g);
        });
    }

    Var mse(Var a, const Tensor<T>& target) {
        const auto& A = val(a);
        if (A.shape != target.shape) throw ShapeError("mse: shape mismatch");
        const double inv_n = 1.0 / static_cast<double>(A.numel());
        double acc = 0.0;
        for (std::int64_t i = 0; i < A.numel(); ++i) {
            const double d = A[i] - target[i];
            acc += d * d;
        }
        Tensor<T> out(Shape{1});
        out[0] = static_cast<T>(acc * inv_n);
        return push(std::move(out), any_grad({a}), {a}, [this, a, target, inv_n](Node& nd) {
            Tensor<T> g(val(a).shape);
            const T s = nd.grad[0] * static_cast<T>(2.0 * inv_n);
            for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = s * (val(a)[i] - target[i]);
            accumulate(a, g);
        });
    }

    Var sum(Var a) {
        T acc = T(0);
        for (T v : val(a).data) acc += v;
        Tensor<T> out(Shape{1});
        out[0] = acc;
        return push(std::move(out), any_grad({a}), {a}, [this, a](Node& nd) {
            Tensor<T> g(val(a).shape, nd.grad[0]);
            accumulate(a, g);
        });
    }

    // Scalar loss backward.
    void backward(Var loss) {
        Node& ln = nodes_[loss.i];
        if (ln.value.numel() != 1) throw ShapeError("backward: loss must be scalar");
        ensure_grad(loss.i);
        ln.grad[0] = T(1);
        for (int i = loss.i; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.needs_grad || !n.backward || n.grad.empty()) continue;
            n.backward(n);
        }
    }

  private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;  // allocated lazily
        bool needs_grad = false;
        std::function<void(Node&)> backward;
    };

    std::vector<Node> nodes_;

    bool any_grad(std::initializer_list<Var> vs) const {
        for (Var v : vs)
            if (nodes_[v.i].needs_grad) return true;
        return false;
    }

    void check_same(Var a, Var b, const char* op) const {
        if (val(a).shape != val(b).shape)
            throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                             shape_str(val(b).shape));
    }

    Var push(Tensor<T> value, bool needs_grad, std::initializer_list<Var> /*parents*/,
             std::function<void(Node&)> backward) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void ensure_grad(int i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad.empty()) n.grad = Tensor<T>(n.value.shape);
    }

    void accumulate(Var v, const Tensor<T>& g) {
        if (!nodes_[v.i].needs_grad) return;
        ensure_grad(v.i);
        Tensor<T>& dst = nodes_[v.i].grad;
        for (std::int64_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    }

    static Tensor<T> im2col(const Tensor<T>& x, int kh, int kw, int stride, int pad, int ho, int wo) {
        const int ci = x.dim(0), h = x.dim(1), w = x.dim(2);
        Tensor<T> col(Shape{ci * kh * kw, ho * wo});
        for (int c = 0; c < ci; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    T* dst = col.data.data() +
                             (static_cast<std::int64_t>(c) * kh * kw + ki * kw + kj) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride - pad + ki;
                        if (iy < 0 || iy >= h) {
                            for (int ox = 0; ox < wo; ++ox) dst[oy * wo + ox] = T(0);
                            continue;
                        }
                        const T* src = x.data.data() + (static_cast<std::int64_t>(c) * h + iy) * w;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride - pad + kj;
                            dst[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                        }
                    }
                }
        return col;
    }

    static void col2im(const Tensor<T>& col, Tensor<T>& gx, int kh, int kw, int stride, int pad,
                       int ho, int wo) {
        const int ci = gx.dim(0), h = gx.dim(1), w = gx.dim(2);
        for (int c = 0; c < ci; ++c)
            for (int ki = 0; ki < kh; ++ki)
                for (int kj = 0; kj < kw; ++kj) {
                    const T* src = col.data.data() +
                                   (static_cast<std::int64_t>(c) * kh * kw + ki * kw + kj) * ho * wo;
                    for (int oy = 0; oy < ho; ++oy) {
                        const int iy = oy * stride - pad + ki;
                        if (iy < 0 || iy >= h) continue;
                        T* dst = gx.data.data() + (static_cast<std::int64_t>(c) * h + iy) * w;
                        for (int ox = 0; ox < wo; ++ox) {
                            const int ix = ox * stride - pad + kj;
                            if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                        }
                    }
                }
    }
};

}  // namespace instid
