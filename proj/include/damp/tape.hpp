#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "damp/matrix.hpp"

namespace damp {

// Log arguments are floored here so saturated softmax outputs at small
// temperatures cannot produce -inf.
inline constexpr double kLogFloor = 1e-12;

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode automatic differentiation over Matrix values.
//
// Ops append nodes holding the forward value and a backward closure. backward()
// walks the node list in reverse, so gradients reach every leaf that the root
// depends on, including leaves reused by many ops (their gradients accumulate).
// A tape built with record_grads=false evaluates forward only; this is the
// no-grad path used for evaluation and pseudo-labeling.
class Tape {
public:
    explicit Tape(bool record_grads = true) : record_(record_grads) {}

    bool recording() const { return record_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    Var constant(Matrix m) { return push(std::move(m), nullptr); }

    Var scalar(double v) {
        Matrix m(1, 1);
        m.data[0] = v;
        return constant(std::move(m));
    }

    // Leaf with tracked gradient (parameter injection point).
    Var leaf(const Matrix& m) { return push(m, nullptr); }

    const Matrix& value(Var v) const { return nodes_[v.id].value; }

    double scalar_value(Var v) const {
        const Matrix& m = value(v);
        if (m.rows != 1 || m.cols != 1) throw std::invalid_argument("scalar_value: var is " + m.shape_str());
        return m.data[0];
    }

    // Gradient of the last backward() root w.r.t. v (zeros if unreached).
    Matrix grad(Var v) const {
        const Node& n = nodes_[v.id];
        if (!n.has_grad) return Matrix(n.value.rows, n.value.cols, 0.0);
        return n.grad;
    }

    // ---- arithmetic ----

    Var add(Var a, Var b) {
        check_shape(value(a).same_shape(value(b)), "tape.add", value(a), value(b));
        Matrix out = damp::add(value(a), value(b));
        return push(std::move(out), [this, a, b](const Matrix& g) {
            accumulate(a, g);
            accumulate(b, g);
        });
    }

    Var sub(Var a, Var b) {
        check_shape(value(a).same_shape(value(b)), "tape.sub", value(a), value(b));
        Matrix out = damp::sub(value(a), value(b));
        return push(std::move(out), [this, a, b](const Matrix& g) {
            accumulate(a, g);
            accumulate(b, damp::scale(g, -1.0));
        });
    }

    Var hadamard(Var a, Var b) {
        check_shape(value(a).same_shape(value(b)), "tape.hadamard", value(a), value(b));
        Matrix out = damp::hadamard(value(a), value(b));
        return push(std::move(out), [this, a, b](const Matrix& g) {
            accumulate(a, damp::hadamard(g, value(b)));
            accumulate(b, damp::hadamard(g, value(a)));
        });
    }

    Var scale(Var a, double s) {
        Matrix out = damp::scale(value(a), s);
        return push(std::move(out), [this, a, s](const Matrix& g) { accumulate(a, damp::scale(g, s)); });
    }

    Var neg(Var a) { return scale(a, -1.0); }

    // c = s * a with s a learnable 1x1 (the residual gains).
    Var mul_scalar(Var a, Var s) {
        if (value(s).rows != 1 || value(s).cols != 1)
            throw std::invalid_argument("tape.mul_scalar: scalar operand is " + value(s).shape_str());
        Matrix out = damp::scale(value(a), value(s).data[0]);
        return push(std::move(out), [this, a, s](const Matrix& g) {
            accumulate(a, damp::scale(g, value(s).data[0]));
            Matrix ds(1, 1);
            ds.data[0] = dot_all(g, value(a));
            accumulate(s, ds);
        });
    }

    // a (MxD) + row vector b (1xD) broadcast over rows.
    Var add_rowvec(Var a, Var b) {
        const Matrix& av = value(a);
        const Matrix& bv = value(b);
        if (bv.rows != 1 || bv.cols != av.cols)
            throw std::invalid_argument("tape.add_rowvec: " + av.shape_str() + " vs " + bv.shape_str());
        Matrix out = av;
        for (int i = 0; i < out.rows; ++i)
            for (int j = 0; j < out.cols; ++j) out(i, j) += bv(0, j);
        return push(std::move(out), [this, a, b](const Matrix& g) {
            accumulate(a, g);
            Matrix db(1, g.cols);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) db(0, j) += g(i, j);
            accumulate(b, db);
        });
    }

    Var matmul(Var a, Var b) {
        Matrix out = damp::matmul(value(a), value(b));
        return push(std::move(out), [this, a, b](const Matrix& g) {
            accumulate(a, damp::matmul_nt(g, value(b)));
            accumulate(b, damp::matmul_tn(value(a), g));
        });
    }

    // c = a * b^T
    Var matmul_nt(Var a, Var b) {
        Matrix out = damp::matmul_nt(value(a), value(b));
        return push(std::move(out), [this, a, b](const Matrix& g) {
            accumulate(a, damp::matmul(g, value(b)));
            accumulate(b, damp::matmul_tn(g, value(a)));
        });
    }

    // ---- structure ----

    Var concat_rows(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("tape.concat_rows: empty part list");
        int cols = value(parts[0]).cols;
        int rows = 0;
        for (Var p : parts) {
            check_shape(value(p).cols == cols, "tape.concat_rows", value(parts[0]), value(p));
            rows += value(p).rows;
        }
        Matrix out(rows, cols);
        int r = 0;
        for (Var p : parts) {
            const Matrix& m = value(p);
            std::copy(m.data.begin(), m.data.end(), out.data.begin() + static_cast<size_t>(r) * cols);
            r += m.rows;
        }
        auto parts_copy = parts;
        return push(std::move(out), [this, parts_copy](const Matrix& g) {
            int r0 = 0;
            for (Var p : parts_copy) {
                const Matrix& m = value(p);
                Matrix gp(m.rows, m.cols);
                std::copy(g.data.begin() + static_cast<size_t>(r0) * g.cols,
                          g.data.begin() + static_cast<size_t>(r0 + m.rows) * g.cols, gp.data.begin());
                accumulate(p, gp);
                r0 += m.rows;
            }
        });
    }

    Var slice_rows(Var a, int r0, int nrows) {
        const Matrix& av = value(a);
        if (r0 < 0 || nrows < 1 || r0 + nrows > av.rows)
            throw std::invalid_argument("tape.slice_rows: rows [" + std::to_string(r0) + "," +
                                        std::to_string(r0 + nrows) + ") out of " + av.shape_str());
        Matrix out(nrows, av.cols);
        std::copy(av.data.begin() + static_cast<size_t>(r0) * av.cols,
                  av.data.begin() + static_cast<size_t>(r0 + nrows) * av.cols, out.data.begin());
        return push(std::move(out), [this, a, r0](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            std::copy(g.data.begin(), g.data.end(), ga.data.begin() + static_cast<size_t>(r0) * av2.cols);
            accumulate(a, ga);
        });
    }

    Var row(Var a, int r) { return slice_rows(a, r, 1); }

    Var slice_cols(Var a, int c0, int ncols) {
        const Matrix& av = value(a);
        if (c0 < 0 || ncols < 1 || c0 + ncols > av.cols)
            throw std::invalid_argument("tape.slice_cols: cols [" + std::to_string(c0) + "," +
                                        std::to_string(c0 + ncols) + ") out of " + av.shape_str());
        Matrix out(av.rows, ncols);
        for (int i = 0; i < av.rows; ++i)
            for (int j = 0; j < ncols; ++j) out(i, j) = av(i, c0 + j);
        return push(std::move(out), [this, a, c0](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            for (int i = 0; i < g.rows; ++i)
                for (int j = 0; j < g.cols; ++j) ga(i, c0 + j) = g(i, j);
            accumulate(a, ga);
        });
    }

    Var concat_cols(const std::vector<Var>& parts) {
        if (parts.empty()) throw std::invalid_argument("tape.concat_cols: empty part list");
        int rows = value(parts[0]).rows;
        int cols = 0;
        for (Var p : parts) {
            check_shape(value(p).rows == rows, "tape.concat_cols", value(parts[0]), value(p));
            cols += value(p).cols;
        }
        Matrix out(rows, cols);
        int c = 0;
        for (Var p : parts) {
            const Matrix& m = value(p);
            for (int i = 0; i < rows; ++i)
                for (int j = 0; j < m.cols; ++j) out(i, c + j) = m(i, j);
            c += m.cols;
        }
        auto parts_copy = parts;
        return push(std::move(out), [this, parts_copy](const Matrix& g) {
            int c0 = 0;
            for (Var p : parts_copy) {
                const Matrix& m = value(p);
                Matrix gp(m.rows, m.cols);
                for (int i = 0; i < m.rows; ++i)
                    for (int j = 0; j < m.cols; ++j) gp(i, j) = g(i, c0 + j);
                accumulate(p, gp);
                c0 += m.cols;
            }
        });
    }

    Var pick(Var a, int r, int c) {
        const Matrix& av = value(a);
        if (r < 0 || r >= av.rows || c < 0 || c >= av.cols)
            throw std::invalid_argument("tape.pick: (" + std::to_string(r) + "," + std::to_string(c) +
                                        ") out of " + av.shape_str());
        Matrix out(1, 1);
        out.data[0] = av(r, c);
        return push(std::move(out), [this, a, r, c](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            ga(r, c) = g.data[0];
            accumulate(a, ga);
        });
    }

    Var diag(Var a) {
        const Matrix& av = value(a);
        if (av.rows != av.cols) throw std::invalid_argument("tape.diag: matrix is " + av.shape_str());
        Matrix out(av.rows, 1);
        for (int i = 0; i < av.rows; ++i) out(i, 0) = av(i, i);
        return push(std::move(out), [this, a](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            for (int i = 0; i < av2.rows; ++i) ga(i, i) = g(i, 0);
            accumulate(a, ga);
        });
    }

    // ---- reductions ----

    Var colsum(Var a) {
        const Matrix& av = value(a);
        Matrix out(1, av.cols);
        for (int i = 0; i < av.rows; ++i)
            for (int j = 0; j < av.cols; ++j) out(0, j) += av(i, j);
        return push(std::move(out), [this, a](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            for (int i = 0; i < av2.rows; ++i)
                for (int j = 0; j < av2.cols; ++j) ga(i, j) = g(0, j);
            accumulate(a, ga);
        });
    }

    Var rowsum(Var a) {
        const Matrix& av = value(a);
        Matrix out(av.rows, 1);
        for (int i = 0; i < av.rows; ++i)
            for (int j = 0; j < av.cols; ++j) out(i, 0) += av(i, j);
        return push(std::move(out), [this, a](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            for (int i = 0; i < av2.rows; ++i)
                for (int j = 0; j < av2.cols; ++j) ga(i, j) = g(i, 0);
            accumulate(a, ga);
        });
    }

    Var sum_all(Var a) {
        const Matrix& av = value(a);
        Matrix out(1, 1);
        for (double v : av.data) out.data[0] += v;
        return push(std::move(out), [this, a](const Matrix& g) {
            const Matrix& av2 = value(a);
            accumulate(a, Matrix(av2.rows, av2.cols, g.data[0]));
        });
    }

    Var mean_all(Var a) {
        const Matrix& av = value(a);
        return scale(sum_all(a), 1.0 / static_cast<double>(av.size()));
    }

    // ---- nonlinear ----

    Var gelu(Var a) {
        const Matrix& av = value(a);
        Matrix out(av.rows, av.cols);
        for (size_t i = 0; i < av.data.size(); ++i) {
            double x = av.data[i];
            out.data[i] = x * normal_cdf(x);
        }
        return push(std::move(out), [this, a](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            for (size_t i = 0; i < av2.data.size(); ++i) {
                double x = av2.data[i];
                ga.data[i] = g.data[i] * (normal_cdf(x) + x * normal_pdf(x));
            }
            accumulate(a, ga);
        });
    }

    Var softmax_rows(Var a) {
        const Matrix& av = value(a);
        Matrix out(av.rows, av.cols);
        for (int i = 0; i < av.rows; ++i) {
            double m = av(i, 0);
            for (int j = 1; j < av.cols; ++j) m = std::max(m, av(i, j));
            double z = 0.0;
            for (int j = 0; j < av.cols; ++j) {
                out(i, j) = std::exp(av(i, j) - m);
                z += out(i, j);
            }
            for (int j = 0; j < av.cols; ++j) out(i, j) /= z;
        }
        Var res = push(std::move(out), nullptr);
        if (record_) {
            nodes_[res.id].back = [this, a, res](const Matrix& g) {
                const Matrix& y = value(res);
                Matrix ga(y.rows, y.cols);
                for (int i = 0; i < y.rows; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < y.cols; ++j) s += g(i, j) * y(i, j);
                    for (int j = 0; j < y.cols; ++j) ga(i, j) = y(i, j) * (g(i, j) - s);
                }
                accumulate(a, ga);
            };
        }
        return res;
    }

    // Per-row log(sum(exp(x))) with max subtraction; output Mx1.
    Var logsumexp_rows(Var a) {
        const Matrix& av = value(a);
        Matrix out(av.rows, 1);
        for (int i = 0; i < av.rows; ++i) {
            double m = av(i, 0);
            for (int j = 1; j < av.cols; ++j) m = std::max(m, av(i, j));
            double z = 0.0;
            for (int j = 0; j < av.cols; ++j) z += std::exp(av(i, j) - m);
            out(i, 0) = m + std::log(z);
        }
        Var res = push(std::move(out), nullptr);
        if (record_) {
            nodes_[res.id].back = [this, a, res](const Matrix& g) {
                const Matrix& av2 = value(a);
                const Matrix& y = value(res);
                Matrix ga(av2.rows, av2.cols);
                for (int i = 0; i < av2.rows; ++i)
                    for (int j = 0; j < av2.cols; ++j)
                        ga(i, j) = g(i, 0) * std::exp(av2(i, j) - y(i, 0));
                accumulate(a, ga);
            };
        }
        return res;
    }

    // log(max(x, kLogFloor)); gradient is zero where the floor is active.
    Var log_floor(Var a) {
        const Matrix& av = value(a);
        Matrix out(av.rows, av.cols);
        for (size_t i = 0; i < av.data.size(); ++i) out.data[i] = std::log(std::max(av.data[i], kLogFloor));
        return push(std::move(out), [this, a](const Matrix& g) {
            const Matrix& av2 = value(a);
            Matrix ga(av2.rows, av2.cols);
            for (size_t i = 0; i < av2.data.size(); ++i)
                ga.data[i] = av2.data[i] > kLogFloor ? g.data[i] / av2.data[i] : 0.0;
            accumulate(a, ga);
        });
    }

    // Per-row x / ||x||; rejects rows with vanishing norm (undefined direction).
    Var row_normalize(Var a) {
        const Matrix& av = value(a);
        Matrix out(av.rows, av.cols);
        for (int i = 0; i < av.rows; ++i) {
            double n = 0.0;
            for (int j = 0; j < av.cols; ++j) n += av(i, j) * av(i, j);
            n = std::sqrt(n);
            if (n < 1e-30)
                throw std::domain_error("row_normalize: row " + std::to_string(i) +
                                        " has near-zero norm " + std::to_string(n));
            for (int j = 0; j < av.cols; ++j) out(i, j) = av(i, j) / n;
        }
        Var res = push(std::move(out), nullptr);
        if (record_) {
            nodes_[res.id].back = [this, a, res](const Matrix& g) {
                const Matrix& av2 = value(a);
                const Matrix& y = value(res);
                Matrix ga(av2.rows, av2.cols);
                for (int i = 0; i < av2.rows; ++i) {
                    double n = 0.0;
                    for (int j = 0; j < av2.cols; ++j) n += av2(i, j) * av2(i, j);
                    n = std::sqrt(n);
                    double yd = 0.0;
                    for (int j = 0; j < av2.cols; ++j) yd += y(i, j) * g(i, j);
                    for (int j = 0; j < av2.cols; ++j) ga(i, j) = (g(i, j) - y(i, j) * yd) / n;
                }
                accumulate(a, ga);
            };
        }
        return res;
    }

    // y = gain * (x - mean) / sqrt(var + eps) + bias, per row. gain/bias are 1xD.
    Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5) {
        const Matrix& xv = value(x);
        const Matrix& gv = value(gain);
        const Matrix& bv = value(bias);
        if (gv.rows != 1 || gv.cols != xv.cols || bv.rows != 1 || bv.cols != xv.cols)
            throw std::invalid_argument("tape.layer_norm_rows: x " + xv.shape_str() + " gain " +
                                        gv.shape_str() + " bias " + bv.shape_str());
        Matrix xhat(xv.rows, xv.cols);
        Matrix inv_sigma(xv.rows, 1);
        Matrix out(xv.rows, xv.cols);
        for (int i = 0; i < xv.rows; ++i) {
            double mu = 0.0;
            for (int j = 0; j < xv.cols; ++j) mu += xv(i, j);
            mu /= xv.cols;
            double var = 0.0;
            for (int j = 0; j < xv.cols; ++j) {
                double d = xv(i, j) - mu;
                var += d * d;
            }
            var /= xv.cols;
            double inv = 1.0 / std::sqrt(var + eps);
            inv_sigma(i, 0) = inv;
            for (int j = 0; j < xv.cols; ++j) {
                xhat(i, j) = (xv(i, j) - mu) * inv;
                out(i, j) = gv(0, j) * xhat(i, j) + bv(0, j);
            }
        }
        Var res = push(std::move(out), nullptr);
        if (record_) {
            auto xh = std::make_shared<Matrix>(std::move(xhat));
            auto is = std::make_shared<Matrix>(std::move(inv_sigma));
            nodes_[res.id].back = [this, x, gain, bias, xh, is](const Matrix& g) {
                const Matrix& xv2 = value(x);
                const Matrix& gv2 = value(gain);
                int D = xv2.cols;
                Matrix gx(xv2.rows, D);
                Matrix ggain(1, D);
                Matrix gbias(1, D);
                for (int i = 0; i < xv2.rows; ++i) {
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (int j = 0; j < D; ++j) {
                        double h = g(i, j) * gv2(0, j);
                        mean_h += h;
                        mean_hx += h * (*xh)(i, j);
                        ggain(0, j) += g(i, j) * (*xh)(i, j);
                        gbias(0, j) += g(i, j);
                    }
                    mean_h /= D;
                    mean_hx /= D;
                    double inv = (*is)(i, 0);
                    for (int j = 0; j < D; ++j) {
                        double h = g(i, j) * gv2(0, j);
                        gx(i, j) = inv * (h - mean_h - (*xh)(i, j) * mean_hx);
                    }
                }
                accumulate(x, gx);
                accumulate(gain, ggain);
                accumulate(bias, gbias);
            };
        }
        return res;
    }

    // ---- backward ----

    void backward(Var root) {
        if (!record_) throw std::logic_error("Tape.backward: tape built without gradient recording");
        const Matrix& rv = value(root);
        if (rv.rows != 1 || rv.cols != 1)
            throw std::invalid_argument("Tape.backward: root must be 1x1, got " + rv.shape_str());
        Node& rn = nodes_[root.id];
        rn.grad = Matrix(1, 1, 1.0);
        rn.has_grad = true;
        for (int i = root.id; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.has_grad && n.back) n.back(n.grad);
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool has_grad = false;
        std::function<void(const Matrix&)> back;
    };

    static double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))); }
    static double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

    template <typename F>
    Var push(Matrix value, F&& back) {
        Node n;
        n.value = std::move(value);
        if constexpr (!std::is_same_v<std::decay_t<F>, std::nullptr_t>) {
            if (record_) n.back = std::forward<F>(back);
        }
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    void accumulate(Var v, const Matrix& g) {
        Node& n = nodes_[v.id];
        if (!n.has_grad) {
            n.grad = g;
            n.has_grad = true;
        } else {
            add_inplace(n.grad, g);
        }
    }

    std::vector<Node> nodes_;
    bool record_;
};

}  // namespace damp
