// Independent reference implementations used only by tests. These stay
// deliberately naive and never call the engine's fast paths they check.
#pragma once

#include <cmath>
#include <vector>

#include "ntk/program.hpp"
#include "ntk/tensor.hpp"

namespace ntk::oracle {

// Triple-loop matrix product.
inline Tensor matmul_naive(const Tensor& a, const Tensor& b) {
    const std::int64_t m = a.shape().dim(0), k = a.shape().dim(1), p = b.shape().dim(1);
    Tensor out(Shape{m, p});
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < p; ++j) {
            double s = 0.0;
            for (std::int64_t kk = 0; kk < k; ++kk) {
                s += a.at(i * k + kk) * b.at(kk * p + j);
            }
            out.at(i * p + j) = s;
        }
    }
    return out;
}

// Explicit wraparound circular cross-correlation.
inline Tensor conv2d_naive(const Tensor& x, const Tensor& filt) {
    const std::int64_t dh = x.shape().dim(0), dw = x.shape().dim(1), cin = x.shape().dim(2);
    const std::int64_t fh = filt.shape().dim(0), fw = filt.shape().dim(1);
    const std::int64_t cout = filt.shape().dim(3);
    const std::int64_t ch = fh / 2, cw = fw / 2;
    Tensor out(Shape{dh, dw, cout});
    for (std::int64_t i = 0; i < dh; ++i) {
        for (std::int64_t j = 0; j < dw; ++j) {
            for (std::int64_t co = 0; co < cout; ++co) {
                double s = 0.0;
                for (std::int64_t a = 0; a < fh; ++a) {
                    for (std::int64_t b = 0; b < fw; ++b) {
                        const std::int64_t ii = ((i + a - ch) % dh + dh) % dh;
                        const std::int64_t jj = ((j + b - cw) % dw + dw) % dw;
                        for (std::int64_t ci = 0; ci < cin; ++ci) {
                            s += x.at((ii * dw + jj) * cin + ci) *
                                 filt.at(((a * fw + b) * cin + ci) * cout + co);
                        }
                    }
                }
                out.at((i * dw + j) * cout + co) = s;
            }
        }
    }
    return out;
}

// Kronecker product of dense matrices.
inline Tensor kron(const Tensor& a, const Tensor& b) {
    const std::int64_t am = a.shape().dim(0), an = a.shape().dim(1);
    const std::int64_t bm = b.shape().dim(0), bn = b.shape().dim(1);
    Tensor out(Shape{am * bm, an * bn});
    for (std::int64_t i = 0; i < am; ++i) {
        for (std::int64_t j = 0; j < an; ++j) {
            for (std::int64_t k = 0; k < bm; ++k) {
                for (std::int64_t l = 0; l < bn; ++l) {
                    out.at((i * bm + k) * an * bn + j * bn + l) =
                        a.at(i * an + j) * b.at(k * bn + l);
                }
            }
        }
    }
    return out;
}

// Central finite difference of f(theta) along a tangent direction.
template <typename F>
std::vector<double> central_difference(F&& f, const std::vector<Tensor>& theta,
                                       const std::vector<Tensor>& tangent, double eps) {
    std::vector<Tensor> plus = theta, minus = theta;
    for (std::size_t b = 0; b < theta.size(); ++b) {
        for (std::int64_t i = 0; i < theta[b].numel(); ++i) {
            plus[b].at(i) += eps * tangent[b].at(i);
            minus[b].at(i) -= eps * tangent[b].at(i);
        }
    }
    const std::vector<double> fp = f(plus);
    const std::vector<double> fm = f(minus);
    std::vector<double> out(fp.size());
    for (std::size_t i = 0; i < fp.size(); ++i) {
        out[i] = (fp[i] - fm[i]) / (2.0 * eps);
    }
    return out;
}

// Cyclic Jacobi eigensolver for symmetric matrices; returns eigenvalues.
inline std::vector<double> symmetric_eigenvalues(Tensor a) {
    const std::int64_t n = a.shape().dim(0);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = i + 1; j < n; ++j) {
                off += a.at(i * n + j) * a.at(i * n + j);
            }
        }
        if (off < 1e-26) {
            break;
        }
        for (std::int64_t p = 0; p < n; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                const double apq = a.at(p * n + q);
                if (std::abs(apq) < 1e-300) {
                    continue;
                }
                const double app = a.at(p * n + p), aqq = a.at(q * n + q);
                const double tau = (aqq - app) / (2.0 * apq);
                const double t = (tau >= 0 ? 1.0 : -1.0) /
                                 (std::abs(tau) + std::sqrt(1.0 + tau * tau));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = t * c;
                for (std::int64_t k = 0; k < n; ++k) {
                    const double akp = a.at(k * n + p), akq = a.at(k * n + q);
                    a.at(k * n + p) = c * akp - s * akq;
                    a.at(k * n + q) = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double apk = a.at(p * n + k), aqk = a.at(q * n + k);
                    a.at(p * n + k) = c * apk - s * aqk;
                    a.at(q * n + k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        eig[static_cast<std::size_t>(i)] = a.at(i * n + i);
    }
    return eig;
}

// Dense 4-matrix product A * B * C^T * D^T with explicit matrices.
inline Tensor mjjmp_dense(const Tensor& a, const Tensor& b, const Tensor& c, const Tensor& d) {
    Tensor ab = matmul_naive(a, b);
    Tensor ct(Shape{c.shape().dim(1), c.shape().dim(0)});
    for (std::int64_t i = 0; i < c.shape().dim(0); ++i) {
        for (std::int64_t j = 0; j < c.shape().dim(1); ++j) {
            ct.at(j * c.shape().dim(0) + i) = c.at(i * c.shape().dim(1) + j);
        }
    }
    Tensor abc = matmul_naive(ab, ct);
    Tensor dt(Shape{d.shape().dim(1), d.shape().dim(0)});
    for (std::int64_t i = 0; i < d.shape().dim(0); ++i) {
        for (std::int64_t j = 0; j < d.shape().dim(1); ++j) {
            dt.at(j * d.shape().dim(0) + i) = d.at(i * d.shape().dim(1) + j);
        }
    }
    return matmul_naive(abc, dt);
}

// Hand-rolled forward pass of an FCN given weight matrices (row = output).
inline std::vector<double> fcn_forward_naive(const std::vector<Tensor>& weights,
                                             const std::vector<double>& x, bool relu_hidden) {
    std::vector<double> h = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        const Tensor& w = weights[l];
        const std::int64_t rows = w.shape().dim(0), cols = w.shape().dim(1);
        std::vector<double> next(static_cast<std::size_t>(rows), 0.0);
        for (std::int64_t i = 0; i < rows; ++i) {
            for (std::int64_t j = 0; j < cols; ++j) {
                next[static_cast<std::size_t>(i)] +=
                    w.at(i * cols + j) * h[static_cast<std::size_t>(j)];
            }
        }
        if (relu_hidden && l + 1 < weights.size()) {
            for (double& v : next) {
                v = v > 0 ? v : 0;
            }
        }
        h = std::move(next);
    }
    return h;
}

}  // namespace ntk::oracle
