#pragma once

// Reverse-mode autodiff on a dynamic tape. One tape per forward pass;
// nodes are recorded in creation order, which is a topological order,
// and backward() visits them exactly once in reverse. Adjoints are
// zero-initialized on first touch. A tape is single-threaded; distinct
// tapes may run concurrently.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "maskvar/tensor.hpp"

namespace maskvar {

class Tape {
public:
    struct Value {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Tape() { pin_blas_single_thread(); }

    // Leaf over externally owned storage (model parameters). The tensor
    // must outlive the tape.
    Value leaf(const Tensor* external, bool needs_grad) {
        Node n;
        n.external = external;
        n.needs_grad = needs_grad;
        return push(std::move(n));
    }

    // Leaf that owns a copy; never differentiated.
    Value constant(Tensor t) {
        Node n;
        n.owned = std::move(t);
        n.needs_grad = false;
        return push(std::move(n));
    }

    const Tensor& value(Value v) const {
        const Node& n = nodes_[check(v)];
        return n.external ? *n.external : n.owned;
    }
    bool needs_grad(Value v) const { return nodes_[check(v)].needs_grad; }

    // Adjoint of a node; zeros until backward has run.
    const Tensor& grad(Value v) {
        Node& n = nodes_[check(v)];
        ensure_grad(n);
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    // ---- primitives ----

    Value matmul(Value a, Value b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
            throw std::invalid_argument("matmul: inner dimensions disagree " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
        const int m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        Tensor out({m, n});
        matmul_kernel(false, false, m, n, k, 1.0, ta.data.data(), k, tb.data.data(), n, 0.0, out.data.data(), n);
        return record({a, b}, std::move(out), [this, a, b, m, k, n](const Tensor& g) {
            if (nodes_[a.id].needs_grad) {  // dA += g * B^T
                Tensor& da = grad_mut(a);
                matmul_kernel(false, true, m, k, n, 1.0, g.data.data(), n, value(b).data.data(), n, 1.0, da.data.data(), k);
            }
            if (nodes_[b.id].needs_grad) {  // dB += A^T * g
                Tensor& db = grad_mut(b);
                matmul_kernel(true, false, k, n, m, 1.0, value(a).data.data(), k, g.data.data(), n, 1.0, db.data.data(), n);
            }
        });
    }

    // a * b^T with a:[M,K], b:[N,K] -> [M,N].
    Value matmul_nt(Value a, Value b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[1])
            throw std::invalid_argument("matmul_nt: inner dimensions disagree " + shape_str(ta.shape) + " x " + shape_str(tb.shape) + "^T");
        const int m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
        Tensor out({m, n});
        matmul_kernel(false, true, m, n, k, 1.0, ta.data.data(), k, tb.data.data(), k, 0.0, out.data.data(), n);
        return record({a, b}, std::move(out), [this, a, b, m, k, n](const Tensor& g) {
            if (nodes_[a.id].needs_grad) {  // dA += g * B
                Tensor& da = grad_mut(a);
                matmul_kernel(false, false, m, k, n, 1.0, g.data.data(), n, value(b).data.data(), k, 1.0, da.data.data(), k);
            }
            if (nodes_[b.id].needs_grad) {  // dB += g^T * A
                Tensor& db = grad_mut(b);
                matmul_kernel(true, false, n, k, m, 1.0, g.data.data(), n, value(a).data.data(), k, 1.0, db.data.data(), k);
            }
        });
    }

    Value add(Value a, Value b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        require_same_shape(ta, tb, "add");
        Tensor out = ta;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
        return record({a, b}, std::move(out), [this, a, b](const Tensor& g) {
            accumulate(a, g.data);
            accumulate(b, g.data);
        });
    }

    // [M,N] + row vector [N], broadcast over rows (bias add).
    Value add_rowvec(Value a, Value v) {
        const Tensor& ta = value(a);
        const Tensor& tv = value(v);
        if (ta.rank() != 2 || tv.rank() != 1 || tv.shape[0] != ta.shape[1])
            throw std::invalid_argument("add_rowvec: need [M,N] + [N], got " + shape_str(ta.shape) + " + " + shape_str(tv.shape));
        const int m = ta.shape[0], n = ta.shape[1];
        Tensor out = ta;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<std::size_t>(i) * n + j] += tv.data[j];
        return record({a, v}, std::move(out), [this, a, v, m, n](const Tensor& g) {
            accumulate(a, g.data);
            if (nodes_[v.id].needs_grad) {
                Tensor& dv = grad_mut(v);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) dv.data[j] += g.data[static_cast<std::size_t>(i) * n + j];
            }
        });
    }

    Value scale(Value a, double s) {
        Tensor out = value(a);
        for (double& x : out.data) x *= s;
        return record({a}, std::move(out), [this, a, s](const Tensor& g) {
            if (!nodes_[a.id].needs_grad) return;
            Tensor& da = grad_mut(a);
            for (std::size_t i = 0; i < g.data.size(); ++i) da.data[i] += s * g.data[i];
        });
    }

    // Exact-erf GELU: x * Phi(x). The erf form keeps finite-difference
    // checks tight, unlike the tanh approximation.
    Value gelu(Value a) {
        const Tensor& ta = value(a);
        Tensor out = ta;
        for (double& x : out.data) x = x * 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
        return record({a}, std::move(out), [this, a](const Tensor& g) {
            if (!nodes_[a.id].needs_grad) return;
            Tensor& da = grad_mut(a);
            const Tensor& ta2 = value(a);
            constexpr double inv_sqrt_2pi = 0.3989422804014326779;
            for (std::size_t i = 0; i < g.data.size(); ++i) {
                const double x = ta2.data[i];
                const double phi_cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                const double phi_pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                da.data[i] += g.data[i] * (phi_cdf + x * phi_pdf);
            }
        });
    }

    // Per-row layernorm with affine output: y = gain * (x-mu)/sqrt(var+eps) + bias.
    Value layernorm(Value x, Value gain, Value bias, double eps = 1e-5) {
        const Tensor& tx = value(x);
        const Tensor& tg = value(gain);
        const Tensor& tb = value(bias);
        if (tx.rank() != 2 || tg.rank() != 1 || tb.rank() != 1 || tg.shape[0] != tx.shape[1] || tb.shape[0] != tx.shape[1])
            throw std::invalid_argument("layernorm: need x [M,N], gain [N], bias [N]");
        const int m = tx.shape[0], n = tx.shape[1];
        Tensor out({m, n});
        std::vector<double> inv_std(static_cast<std::size_t>(m));
        std::vector<double> normed(static_cast<std::size_t>(m) * n);
        for (int i = 0; i < m; ++i) {
            const double* row = tx.data.data() + static_cast<std::size_t>(i) * n;
            double mu = 0.0;
            for (int j = 0; j < n; ++j) mu += row[j];
            mu /= n;
            double var = 0.0;
            for (int j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= n;
            const double is = 1.0 / std::sqrt(var + eps);
            inv_std[static_cast<std::size_t>(i)] = is;
            for (int j = 0; j < n; ++j) {
                const double xn = (row[j] - mu) * is;
                normed[static_cast<std::size_t>(i) * n + j] = xn;
                out.data[static_cast<std::size_t>(i) * n + j] = tg.data[j] * xn + tb.data[j];
            }
        }
        return record({x, gain, bias}, std::move(out),
                      [this, x, gain, bias, m, n, inv_std = std::move(inv_std), normed = std::move(normed)](const Tensor& g) {
            const Tensor& tg2 = value(gain);
            if (nodes_[gain.id].needs_grad) {
                Tensor& dg = grad_mut(gain);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        dg.data[j] += g.data[static_cast<std::size_t>(i) * n + j] * normed[static_cast<std::size_t>(i) * n + j];
            }
            if (nodes_[bias.id].needs_grad) {
                Tensor& db = grad_mut(bias);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) db.data[j] += g.data[static_cast<std::size_t>(i) * n + j];
            }
            if (nodes_[x.id].needs_grad) {
                Tensor& dx = grad_mut(x);
                for (int i = 0; i < m; ++i) {
                    const std::size_t off = static_cast<std::size_t>(i) * n;
                    const double is = inv_std[static_cast<std::size_t>(i)];
                    // dxhat = g * gain; dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                    double mean_dxh = 0.0, mean_dxh_xh = 0.0;
                    for (int j = 0; j < n; ++j) {
                        const double dxh = g.data[off + j] * tg2.data[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * normed[off + j];
                    }
                    mean_dxh /= n;
                    mean_dxh_xh /= n;
                    for (int j = 0; j < n; ++j) {
                        const double dxh = g.data[off + j] * tg2.data[j];
                        dx.data[off + j] += is * (dxh - mean_dxh - normed[off + j] * mean_dxh_xh);
                    }
                }
            }
        });
    }

    // Softmax along `axis`. Supported: rank-1 (axis 0) and rank-2 rows
    // (axis 1). Max-subtraction keeps huge logits finite.
    Value softmax(Value a, int axis) {
        const Tensor& ta = value(a);
        int rows, cols;
        if (ta.rank() == 1 && axis == 0) {
            rows = 1;
            cols = ta.shape[0];
        } else if (ta.rank() == 2 && axis == 1) {
            rows = ta.shape[0];
            cols = ta.shape[1];
        } else {
            throw std::invalid_argument("softmax: unsupported axis " + std::to_string(axis) + " for shape " + shape_str(ta.shape));
        }
        Tensor out = ta;
        for (int i = 0; i < rows; ++i) {
            double* row = out.data.data() + static_cast<std::size_t>(i) * cols;
            double mx = row[0];
            for (int j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < cols; ++j) {
                row[j] = std::exp(row[j] - mx);
                sum += row[j];
            }
            for (int j = 0; j < cols; ++j) row[j] /= sum;
        }
        return record({a}, std::move(out), [this, a, rows, cols, self = next_id()](const Tensor& g) {
            if (!nodes_[a.id].needs_grad) return;
            const Tensor& y = value(Value{self});
            Tensor& da = grad_mut(a);
            for (int i = 0; i < rows; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * cols;
                double dot = 0.0;
                for (int j = 0; j < cols; ++j) dot += g.data[off + j] * y.data[off + j];
                for (int j = 0; j < cols; ++j) da.data[off + j] += y.data[off + j] * (g.data[off + j] - dot);
            }
        });
    }

    // log softmax of a vector.
    Value log_softmax(Value a) {
        const Tensor& ta = value(a);
        if (ta.rank() != 1) throw std::invalid_argument("log_softmax: rank-1 input required");
        const int n = ta.shape[0];
        Tensor out = ta;
        double mx = out.data[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, out.data[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += std::exp(out.data[j] - mx);
        const double lse = mx + std::log(sum);
        for (int j = 0; j < n; ++j) out.data[j] -= lse;
        return record({a}, std::move(out), [this, a, n, self = next_id()](const Tensor& g) {
            if (!nodes_[a.id].needs_grad) return;
            const Tensor& y = value(Value{self});
            Tensor& da = grad_mut(a);
            double gsum = 0.0;
            for (int j = 0; j < n; ++j) gsum += g.data[j];
            for (int j = 0; j < n; ++j) da.data[j] += g.data[j] - std::exp(y.data[j]) * gsum;
        });
    }

    // Per-row cross entropy against integer targets: out[k] = -log softmax(logits[k])[target[k]].
    // Also reports the predictive-distribution entropy per row as a diagnostic.
    struct CrossEntropyOut {
        Value losses;  // [K]
        std::vector<double> entropies;
    };
    CrossEntropyOut cross_entropy_rows(Value logits, const std::vector<int>& targets) {
        const Tensor& tl = value(logits);
        if (tl.rank() != 2) throw std::invalid_argument("cross_entropy_rows: logits must be [K,V]");
        const int k = tl.shape[0], v = tl.shape[1];
        if (static_cast<int>(targets.size()) != k)
            throw std::invalid_argument("cross_entropy_rows: targets size mismatch");
        for (int t : targets)
            if (t < 0 || t >= v) throw std::out_of_range("cross_entropy_rows: target " + std::to_string(t) + " out of vocab range " + std::to_string(v));
        Tensor out({k});
        std::vector<double> probs(static_cast<std::size_t>(k) * v);
        std::vector<double> entropies(static_cast<std::size_t>(k));
        for (int i = 0; i < k; ++i) {
            const double* row = tl.data.data() + static_cast<std::size_t>(i) * v;
            double mx = row[0];
            for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
            const double lse = mx + std::log(sum);
            out.data[static_cast<std::size_t>(i)] = lse - row[targets[static_cast<std::size_t>(i)]];
            double ent = 0.0;
            for (int j = 0; j < v; ++j) {
                const double p = std::exp(row[j] - lse);
                probs[static_cast<std::size_t>(i) * v + j] = p;
                if (p > 0.0) ent -= p * std::log(p);
            }
            entropies[static_cast<std::size_t>(i)] = ent;
        }
        Value losses = record({logits}, std::move(out),
                              [this, logits, targets, k, v, probs = std::move(probs)](const Tensor& g) {
            if (!nodes_[logits.id].needs_grad) return;
            Tensor& dl = grad_mut(logits);
            for (int i = 0; i < k; ++i) {
                const double gi = g.data[static_cast<std::size_t>(i)];
                if (gi == 0.0) continue;
                const std::size_t off = static_cast<std::size_t>(i) * v;
                for (int j = 0; j < v; ++j) dl.data[off + j] += gi * probs[off + j];
                dl.data[off + targets[static_cast<std::size_t>(i)]] -= gi;
            }
        });
        return {losses, std::move(entropies)};
    }

    // Row gather: out[k,:] = x[idx[k],:]. Doubles as the embedding lookup.
    Value gather_rows(Value x, std::vector<int> idx) {
        const Tensor& tx = value(x);
        if (tx.rank() != 2) throw std::invalid_argument("gather_rows: input must be rank 2");
        const int n = tx.shape[0], h = tx.shape[1];
        for (int i : idx)
            if (i < 0 || i >= n) throw std::out_of_range("gather_rows: row index " + std::to_string(i) + " out of range " + std::to_string(n));
        const int k = static_cast<int>(idx.size());
        Tensor out({k, h});
        for (int i = 0; i < k; ++i)
            std::copy_n(tx.data.data() + static_cast<std::size_t>(idx[static_cast<std::size_t>(i)]) * h, h,
                        out.data.data() + static_cast<std::size_t>(i) * h);
        return record({x}, std::move(out), [this, x, idx = std::move(idx), h](const Tensor& g) {
            if (!nodes_[x.id].needs_grad) return;
            Tensor& dx = grad_mut(x);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                double* dst = dx.data.data() + static_cast<std::size_t>(idx[i]) * h;
                const double* src = g.data.data() + i * h;
                for (int j = 0; j < h; ++j) dst[j] += src[j];
            }
        });
    }

    // Element gather from a vector.
    Value gather_elems(Value x, std::vector<int> idx) {
        const Tensor& tx = value(x);
        if (tx.rank() != 1) throw std::invalid_argument("gather_elems: input must be rank 1");
        for (int i : idx)
            if (i < 0 || i >= tx.shape[0]) throw std::out_of_range("gather_elems: index out of range");
        Tensor out({static_cast<int>(idx.size())});
        for (std::size_t i = 0; i < idx.size(); ++i) out.data[i] = tx.data[static_cast<std::size_t>(idx[i])];
        return record({x}, std::move(out), [this, x, idx = std::move(idx)](const Tensor& g) {
            if (!nodes_[x.id].needs_grad) return;
            Tensor& dx = grad_mut(x);
            for (std::size_t i = 0; i < idx.size(); ++i) dx.data[static_cast<std::size_t>(idx[i])] += g.data[i];
        });
    }

    Value slice_cols(Value x, int offset, int width) {
        const Tensor& tx = value(x);
        if (tx.rank() != 2 || offset < 0 || width <= 0 || offset + width > tx.shape[1])
            throw std::invalid_argument("slice_cols: bad slice");
        const int m = tx.shape[0], n = tx.shape[1];
        Tensor out({m, width});
        for (int i = 0; i < m; ++i)
            std::copy_n(tx.data.data() + static_cast<std::size_t>(i) * n + offset, width,
                        out.data.data() + static_cast<std::size_t>(i) * width);
        return record({x}, std::move(out), [this, x, offset, width, m, n](const Tensor& g) {
            if (!nodes_[x.id].needs_grad) return;
            Tensor& dx = grad_mut(x);
            for (int i = 0; i < m; ++i) {
                double* dst = dx.data.data() + static_cast<std::size_t>(i) * n + offset;
                const double* src = g.data.data() + static_cast<std::size_t>(i) * width;
                for (int j = 0; j < width; ++j) dst[j] += src[j];
            }
        });
    }

    Value concat_cols(const std::vector<Value>& xs) {
        if (xs.empty()) throw std::invalid_argument("concat_cols: empty input");
        const int m = value(xs[0]).shape[0];
        int total = 0;
        for (Value v : xs) {
            const Tensor& t = value(v);
            if (t.rank() != 2 || t.shape[0] != m) throw std::invalid_argument("concat_cols: row counts disagree");
            total += t.shape[1];
        }
        Tensor out({m, total});
        int off = 0;
        for (Value v : xs) {
            const Tensor& t = value(v);
            const int w = t.shape[1];
            for (int i = 0; i < m; ++i)
                std::copy_n(t.data.data() + static_cast<std::size_t>(i) * w, w,
                            out.data.data() + static_cast<std::size_t>(i) * total + off);
            off += w;
        }
        return record(xs, std::move(out), [this, xs, m, total](const Tensor& g) {
            int o = 0;
            for (Value v : xs) {
                const int w = value(v).shape[1];
                if (nodes_[v.id].needs_grad) {
                    Tensor& dv = grad_mut(v);
                    for (int i = 0; i < m; ++i) {
                        double* dst = dv.data.data() + static_cast<std::size_t>(i) * w;
                        const double* src = g.data.data() + static_cast<std::size_t>(i) * total + o;
                        for (int j = 0; j < w; ++j) dst[j] += src[j];
                    }
                }
                o += w;
            }
        });
    }

    // Mean over all entries -> scalar [1].
    Value mean_all(Value x) {
        const Tensor& tx = value(x);
        if (tx.numel() == 0) throw std::invalid_argument("mean_all: empty tensor");
        double s = 0.0;
        for (double v : tx.data) s += v;
        const double inv = 1.0 / static_cast<double>(tx.numel());
        Tensor out({1});
        out.data[0] = s * inv;
        return record({x}, std::move(out), [this, x, inv](const Tensor& g) {
            if (!nodes_[x.id].needs_grad) return;
            Tensor& dx = grad_mut(x);
            const double gv = g.data[0] * inv;
            for (double& d : dx.data) d += gv;
        });
    }

    Value sum_all(Value x) {
        const Tensor& tx = value(x);
        double s = 0.0;
        for (double v : tx.data) s += v;
        Tensor out({1});
        out.data[0] = s;
        return record({x}, std::move(out), [this, x](const Tensor& g) {
            if (!nodes_[x.id].needs_grad) return;
            Tensor& dx = grad_mut(x);
            for (double& d : dx.data) d += g.data[0];
        });
    }

    // Weighted sum with constant weights -> scalar.
    Value dot_const(Value x, std::vector<double> w) {
        const Tensor& tx = value(x);
        if (tx.rank() != 1 || tx.shape[0] != static_cast<int>(w.size()))
            throw std::invalid_argument("dot_const: weight length mismatch");
        double s = 0.0;
        for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * tx.data[i];
        Tensor out({1});
        out.data[0] = s;
        return record({x}, std::move(out), [this, x, w = std::move(w)](const Tensor& g) {
            if (!nodes_[x.id].needs_grad) return;
            Tensor& dx = grad_mut(x);
            for (std::size_t i = 0; i < w.size(); ++i) dx.data[i] += g.data[0] * w[i];
        });
    }

    // Same data, new shape.
    Value reshape(Value x, std::vector<int> shape) {
        const Tensor& tx = value(x);
        if (shape_numel(shape) != tx.numel()) throw std::invalid_argument("reshape: element count mismatch");
        Tensor out(shape, tx.data);
        return record({x}, std::move(out), [this, x](const Tensor& g) {
            accumulate(x, g.data);
        });
    }

    // Elementwise multiply by a constant mask (dropout). No grad to the mask.
    Value mul_mask(Value x, Tensor mask) {
        const Tensor& tx = value(x);
        require_same_shape(tx, mask, "mul_mask");
        Tensor out = tx;
        for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= mask.data[i];
        return record({x}, std::move(out), [this, x, mask = std::move(mask)](const Tensor& g) {
            if (!nodes_[x.id].needs_grad) return;
            Tensor& dx = grad_mut(x);
            for (std::size_t i = 0; i < g.data.size(); ++i) dx.data[i] += g.data[i] * mask.data[i];
        });
    }

    // ---- backward ----

    // Seeds the root adjoint with `seed` and sweeps the tape once in
    // reverse creation order. Root must be scalar.
    void backward(Value root, double seed = 1.0) {
        Node& r = nodes_[check(root)];
        if (value(root).numel() != 1) throw std::invalid_argument("backward: root must be scalar");
        if (!r.needs_grad) return;
        ensure_grad(r);
        r.grad.data[0] += seed;
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<std::size_t>(i)];
            if (!n.backward || !n.needs_grad || n.grad.data.empty()) continue;
            n.backward(n.grad);
        }
    }

private:
    struct Node {
        Tensor owned;                  // storage for non-leaf values
        const Tensor* external = nullptr;  // set for parameter leaves
        Tensor grad;                   // allocated lazily, zero-filled
        std::function<void(const Tensor&)> backward;
        bool needs_grad = false;
    };

    int next_id() const { return static_cast<int>(nodes_.size()); }

    int check(Value v) const {
        if (v.id < 0 || v.id >= static_cast<int>(nodes_.size())) throw std::out_of_range("tape: invalid value handle");
        return v.id;
    }

    Value push(Node n) {
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    template <typename F>
    Value record(const std::vector<Value>& parents, Tensor out, F&& back) {
        bool ng = false;
        for (Value p : parents) ng = ng || nodes_[check(p)].needs_grad;
        Node n;
        n.owned = std::move(out);
        n.needs_grad = ng;
        if (ng) n.backward = std::forward<F>(back);
        return push(std::move(n));
    }

    void ensure_grad(Node& n) {
        if (n.grad.data.empty()) n.grad = Tensor(n.external ? n.external->shape : n.owned.shape);
    }

    Tensor& grad_mut(Value v) {
        Node& n = nodes_[check(v)];
        ensure_grad(n);
        return n.grad;
    }

    void accumulate(Value v, const std::vector<double>& g) {
        if (!nodes_[check(v)].needs_grad) return;
        Tensor& d = grad_mut(v);
        for (std::size_t i = 0; i < g.size(); ++i) d.data[i] += g[i];
    }

    std::vector<Node> nodes_;
};

// Max over coordinates of |analytic - central difference| / max(1, |analytic|),
// perturbing every entry of every tensor in `params`. `eval` recomputes the
// scalar loss from the tensors' current contents.
inline double max_rel_grad_error(const std::function<double()>& eval, std::span<Tensor* const> params,
                                 const std::vector<double>& analytic, double h = 1e-5) {
    std::size_t flat = 0;
    for (const Tensor* p : params) flat += p->data.size();
    if (flat != analytic.size()) throw std::invalid_argument("max_rel_grad_error: gradient length mismatch");
    double worst = 0.0;
    std::size_t c = 0;
    for (Tensor* p : params) {
        for (double& x : p->data) {
            const double saved = x;
            x = saved + h;
            const double fp = eval();
            x = saved - h;
            const double fm = eval();
            x = saved;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[c++];
            worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
        }
    }
    return worst;
}

}  // namespace maskvar
