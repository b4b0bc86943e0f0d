// SPDX-License-Identifier: Apache-2.0
#include "dcmoe/graph.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace dcmoe {

namespace {
constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;
constexpr double kRmsEps = 1e-8;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return cdf + x * pdf;
}
}  // namespace

ValueId Graph::push_(Tensor value, bool needs_grad, std::function<void(Graph&, int)> bw) {
    nodes_.push_back(Node{std::move(value), Tensor{}, std::move(bw), needs_grad});
    return static_cast<ValueId>(nodes_.size() - 1);
}

Tensor& Graph::grad_ref_(ValueId id) {
    Node& n = nodes_[id];
    if (n.grad.data.empty() && n.value.numel() > 0) n.grad = Tensor(n.value.shape);
    return n.grad;
}

ValueId Graph::input(Tensor value, bool needs_grad) {
    return push_(std::move(value), needs_grad, nullptr);
}

void Graph::backward(ValueId loss) {
    if (nodes_[loss].value.numel() != 1)
        throw dimension_error("backward: loss must be scalar");
    for (auto& n : nodes_) {
        if (!n.grad.data.empty()) std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
    grad_ref_(loss).data[0] = 1.0;
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.backward && n.needs_grad && !n.grad.data.empty()) n.backward(*this, i);
    }
}

ValueId Graph::matmul(ValueId a, ValueId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (A.shape.size() != 2 || B.shape.size() != 2 || A.shape[1] != B.shape[0])
        throw dimension_error("matmul: " + shape_str(A.shape) + " x " + shape_str(B.shape));
    const std::size_t m = A.shape[0], k = A.shape[1], n = B.shape[1];
    Tensor C({m, n});
    // ikj loop order keeps the inner loop contiguous in B and C
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = A.data[i * k + kk];
            if (aik == 0.0) continue;
            const double* brow = &B.data[kk * n];
            double* crow = &C.data[i * n];
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    ensure_finite(C, "matmul");
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return push_(std::move(C), ng, [a, b, m, k, n](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        const Tensor& A = g.nodes_[a].value;
        const Tensor& B = g.nodes_[b].value;
        if (g.nodes_[a].needs_grad) {
            Tensor& dA = g.grad_ref_(a);  // dA = dY * B^T
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) {
                    const double d = dY.data[i * n + j];
                    if (d == 0.0) continue;
                    const double* brow = &B.data[0] + j;  // column j, stride n
                    for (std::size_t kk = 0; kk < k; ++kk)
                        dA.data[i * k + kk] += d * brow[kk * n];
                }
        }
        if (g.nodes_[b].needs_grad) {
            Tensor& dB = g.grad_ref_(b);  // dB = A^T * dY
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const double aik = A.data[i * k + kk];
                    if (aik == 0.0) continue;
                    const double* drow = &dY.data[i * n];
                    double* brow = &dB.data[kk * n];
                    for (std::size_t j = 0; j < n; ++j) brow[j] += aik * drow[j];
                }
        }
    });
}

ValueId Graph::add(ValueId a, ValueId b) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[b].value;
    if (!A.same_shape(B)) throw dimension_error("add: shape mismatch");
    Tensor C = A;
    for (std::size_t i = 0; i < C.data.size(); ++i) C.data[i] += B.data[i];
    ensure_finite(C, "add");
    bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    return push_(std::move(C), ng, [a, b](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        for (ValueId src : {a, b}) {
            if (!g.nodes_[src].needs_grad) continue;
            Tensor& dX = g.grad_ref_(src);
            for (std::size_t i = 0; i < dY.data.size(); ++i) dX.data[i] += dY.data[i];
        }
    });
}

ValueId Graph::add_row_bias(ValueId x, ValueId bias) {
    const Tensor& X = nodes_[x].value;
    const Tensor& B = nodes_[bias].value;
    const std::size_t n = X.rows(), d = X.cols();
    if (B.numel() != d) throw dimension_error("add_row_bias: bias width mismatch");
    Tensor Y = X;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) Y.data[i * d + j] += B.data[j];
    ensure_finite(Y, "add_row_bias");
    bool ng = nodes_[x].needs_grad || nodes_[bias].needs_grad;
    return push_(std::move(Y), ng, [x, bias, n, d](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        if (g.nodes_[x].needs_grad) {
            Tensor& dX = g.grad_ref_(x);
            for (std::size_t i = 0; i < dY.data.size(); ++i) dX.data[i] += dY.data[i];
        }
        if (g.nodes_[bias].needs_grad) {
            Tensor& dB = g.grad_ref_(bias);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) dB.data[j] += dY.data[i * d + j];
        }
    });
}

ValueId Graph::gelu(ValueId x) {
    const Tensor& X = nodes_[x].value;
    Tensor Y = X;
    for (double& v : Y.data) v = gelu_fwd(v);
    ensure_finite(Y, "gelu");
    return push_(std::move(Y), nodes_[x].needs_grad, [x](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        const Tensor& X = g.nodes_[x].value;
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < dY.data.size(); ++i)
            dX.data[i] += dY.data[i] * gelu_grad(X.data[i]);
    });
}

ValueId Graph::softmax_rows(ValueId x) {
    const Tensor& X = nodes_[x].value;
    const std::size_t n = X.rows(), e = X.cols();
    Tensor Y = X;
    for (std::size_t i = 0; i < n; ++i) {
        double* row = &Y.data[i * e];
        double mx = *std::max_element(row, row + e);
        double sum = 0.0;
        for (std::size_t j = 0; j < e; ++j) sum += (row[j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < e; ++j) row[j] /= sum;
    }
    ensure_finite(Y, "softmax_rows");
    return push_(std::move(Y), nodes_[x].needs_grad, [x, n, e](Graph& g, int self) {
        const Tensor& Y = g.nodes_[self].value;
        const Tensor& dY = g.nodes_[self].grad;
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < n; ++i) {
            const double* y = &Y.data[i * e];
            const double* dy = &dY.data[i * e];
            double dot = 0.0;
            for (std::size_t j = 0; j < e; ++j) dot += y[j] * dy[j];
            for (std::size_t j = 0; j < e; ++j) dX.data[i * e + j] += y[j] * (dy[j] - dot);
        }
    });
}

ValueId Graph::rms_norm(ValueId x, ValueId scale) {
    const Tensor& X = nodes_[x].value;
    const Tensor& S = nodes_[scale].value;
    const std::size_t n = X.rows(), d = X.cols();
    if (S.numel() != d) throw dimension_error("rms_norm: scale width mismatch");
    Tensor Y({n, d});
    std::vector<double> inv_rms(n);
    for (std::size_t i = 0; i < n; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) ss += X.data[i * d + j] * X.data[i * d + j];
        inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(d) + kRmsEps);
        for (std::size_t j = 0; j < d; ++j)
            Y.data[i * d + j] = X.data[i * d + j] * inv_rms[i] * S.data[j];
    }
    ensure_finite(Y, "rms_norm");
    bool ng = nodes_[x].needs_grad || nodes_[scale].needs_grad;
    return push_(std::move(Y), ng,
                 [x, scale, n, d, inv_rms = std::move(inv_rms)](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        const Tensor& X = g.nodes_[x].value;
        const Tensor& S = g.nodes_[scale].value;
        if (g.nodes_[scale].needs_grad) {
            Tensor& dS = g.grad_ref_(scale);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    dS.data[j] += dY.data[i * d + j] * X.data[i * d + j] * inv_rms[i];
        }
        if (g.nodes_[x].needs_grad) {
            Tensor& dX = g.grad_ref_(x);
            for (std::size_t i = 0; i < n; ++i) {
                // y_j = g_j x_j r, r = (mean(x^2)+eps)^{-1/2}
                double dot = 0.0;  // sum_j dy_j g_j x_j
                for (std::size_t j = 0; j < d; ++j)
                    dot += dY.data[i * d + j] * S.data[j] * X.data[i * d + j];
                const double r = inv_rms[i];
                const double c = dot * r * r * r / static_cast<double>(d);
                for (std::size_t j = 0; j < d; ++j)
                    dX.data[i * d + j] += dY.data[i * d + j] * S.data[j] * r - c * X.data[i * d + j];
            }
        }
    });
}

ValueId Graph::scale_const(ValueId x, double c) {
    Tensor Y = nodes_[x].value;
    for (double& v : Y.data) v *= c;
    return push_(std::move(Y), nodes_[x].needs_grad, [x, c](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < dY.data.size(); ++i) dX.data[i] += c * dY.data[i];
    });
}

ValueId Graph::cross_entropy(ValueId logits, const std::vector<std::size_t>& targets,
                             const std::vector<bool>* mask) {
    const Tensor& L = nodes_[logits].value;
    const std::size_t n = L.rows(), v = L.cols();
    if (targets.size() != n) throw dimension_error("cross_entropy: target count mismatch");
    std::size_t active = 0;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[i]) continue;
        if (targets[i] >= v) throw std::out_of_range("cross_entropy: target index out of range");
        const double* row = &L.data[i * v];
        double mx = *std::max_element(row, row + v);
        double lse = 0.0;
        for (std::size_t j = 0; j < v; ++j) lse += std::exp(row[j] - mx);
        lse = mx + std::log(lse);
        total += lse - row[targets[i]];
        ++active;
    }
    if (active == 0) throw std::invalid_argument("cross_entropy: empty mask");
    Tensor out({1}, {total / static_cast<double>(active)});
    ensure_finite(out, "cross_entropy");
    std::vector<bool> m = mask ? *mask : std::vector<bool>(n, true);
    return push_(std::move(out), nodes_[logits].needs_grad,
                 [logits, targets, m = std::move(m), n, v, active](Graph& g, int self) {
        const double dy = g.nodes_[self].grad.data[0] / static_cast<double>(active);
        const Tensor& L = g.nodes_[logits].value;
        Tensor& dL = g.grad_ref_(logits);
        for (std::size_t i = 0; i < n; ++i) {
            if (!m[i]) continue;
            const double* row = &L.data[i * v];
            double mx = *std::max_element(row, row + v);
            double sum = 0.0;
            for (std::size_t j = 0; j < v; ++j) sum += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < v; ++j)
                dL.data[i * v + j] += dy * (std::exp(row[j] - mx) / sum - (j == targets[i] ? 1.0 : 0.0));
        }
    });
}

ValueId Graph::attention(ValueId q, ValueId k, ValueId v, std::size_t n_heads) {
    const Tensor& Q = nodes_[q].value;
    const Tensor& K = nodes_[k].value;
    const Tensor& V = nodes_[v].value;
    const std::size_t t = Q.rows(), d = Q.cols();
    if (!Q.same_shape(K) || !Q.same_shape(V)) throw dimension_error("attention: q/k/v shape mismatch");
    if (d % n_heads != 0) throw dimension_error("attention: d not divisible by n_heads");
    const std::size_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    // attn[h] is the [t x t] causal softmax matrix, saved for the backward pass
    auto attn = std::make_shared<std::vector<Tensor>>();
    attn->reserve(n_heads);
    Tensor O({t, d});
    for (std::size_t h = 0; h < n_heads; ++h) {
        Tensor A({t, t});
        for (std::size_t i = 0; i < t; ++i) {
            double mx = -1e300;
            for (std::size_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c)
                    s += Q.data[i * d + h * dh + c] * K.data[j * d + h * dh + c];
                A.data[i * t + j] = s * scale;
                mx = std::max(mx, A.data[i * t + j]);
            }
            double sum = 0.0;
            for (std::size_t j = 0; j <= i; ++j)
                sum += (A.data[i * t + j] = std::exp(A.data[i * t + j] - mx));
            for (std::size_t j = 0; j <= i; ++j) A.data[i * t + j] /= sum;
            for (std::size_t j = 0; j <= i; ++j) {
                const double a = A.data[i * t + j];
                if (a == 0.0) continue;
                for (std::size_t c = 0; c < dh; ++c)
                    O.data[i * d + h * dh + c] += a * V.data[j * d + h * dh + c];
            }
        }
        attn->push_back(std::move(A));
    }
    ensure_finite(O, "attention");
    bool ng = nodes_[q].needs_grad || nodes_[k].needs_grad || nodes_[v].needs_grad;
    return push_(std::move(O), ng, [q, k, v, n_heads, t, d, dh, scale, attn](Graph& g, int self) {
        const Tensor& dO = g.nodes_[self].grad;
        const Tensor& Q = g.nodes_[q].value;
        const Tensor& K = g.nodes_[k].value;
        const Tensor& V = g.nodes_[v].value;
        Tensor& dQ = g.grad_ref_(q);
        Tensor& dK = g.grad_ref_(k);
        Tensor& dV = g.grad_ref_(v);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const Tensor& A = (*attn)[h];
            for (std::size_t i = 0; i < t; ++i) {
                // dA_ij = dO_i . V_j ; softmax backward; then into Q,K
                std::vector<double> dA(i + 1, 0.0);
                for (std::size_t j = 0; j <= i; ++j)
                    for (std::size_t c = 0; c < dh; ++c)
                        dA[j] += dO.data[i * d + h * dh + c] * V.data[j * d + h * dh + c];
                double dot = 0.0;
                for (std::size_t j = 0; j <= i; ++j) dot += dA[j] * A.data[i * t + j];
                for (std::size_t j = 0; j <= i; ++j) {
                    const double a = A.data[i * t + j];
                    const double dS = a * (dA[j] - dot) * scale;
                    for (std::size_t c = 0; c < dh; ++c) {
                        dQ.data[i * d + h * dh + c] += dS * K.data[j * d + h * dh + c];
                        dK.data[j * d + h * dh + c] += dS * Q.data[i * d + h * dh + c];
                        dV.data[j * d + h * dh + c] += a * dO.data[i * d + h * dh + c];
                    }
                }
            }
        }
    });
}

ValueId Graph::embedding_rows(ValueId table, const std::vector<std::size_t>& ids) {
    const Tensor& T = nodes_[table].value;
    const std::size_t v = T.rows(), d = T.cols();
    Tensor Y({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= v) throw std::out_of_range("embedding_rows: id out of range");
        std::copy_n(&T.data[ids[i] * d], d, &Y.data[i * d]);
    }
    return push_(std::move(Y), nodes_[table].needs_grad, [table, ids, d](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        Tensor& dT = g.grad_ref_(table);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) dT.data[ids[i] * d + c] += dY.data[i * d + c];
    });
}

ValueId Graph::take_rows(ValueId x, const std::vector<std::size_t>& rows) {
    const Tensor& X = nodes_[x].value;
    const std::size_t d = X.cols();
    Tensor Y({rows.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= X.rows()) throw std::out_of_range("take_rows: row out of range");
        std::copy_n(&X.data[rows[i] * d], d, &Y.data[i * d]);
    }
    return push_(std::move(Y), nodes_[x].needs_grad, [x, rows, d](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) dX.data[rows[i] * d + c] += dY.data[i * d + c];
    });
}

ValueId Graph::scatter_rows(ValueId x, const std::vector<std::size_t>& rows, std::size_t n_rows) {
    const Tensor& X = nodes_[x].value;
    const std::size_t d = X.cols();
    if (rows.size() != X.rows()) throw dimension_error("scatter_rows: index count mismatch");
    Tensor Y({n_rows, d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= n_rows) throw std::out_of_range("scatter_rows: row out of range");
        for (std::size_t c = 0; c < d; ++c) Y.data[rows[i] * d + c] += X.data[i * d + c];
    }
    return push_(std::move(Y), nodes_[x].needs_grad, [x, rows, d](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < d; ++c) dX.data[i * d + c] += dY.data[rows[i] * d + c];
    });
}

ValueId Graph::row_scale(ValueId x, ValueId w) {
    const Tensor& X = nodes_[x].value;
    const Tensor& W = nodes_[w].value;
    const std::size_t n = X.rows(), d = X.cols();
    if (W.numel() != n) throw dimension_error("row_scale: weight count mismatch");
    Tensor Y = X;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < d; ++c) Y.data[i * d + c] *= W.data[i];
    bool ng = nodes_[x].needs_grad || nodes_[w].needs_grad;
    return push_(std::move(Y), ng, [x, w, n, d](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        const Tensor& X = g.nodes_[x].value;
        const Tensor& W = g.nodes_[w].value;
        if (g.nodes_[x].needs_grad) {
            Tensor& dX = g.grad_ref_(x);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c) dX.data[i * d + c] += dY.data[i * d + c] * W.data[i];
        }
        if (g.nodes_[w].needs_grad) {
            Tensor& dW = g.grad_ref_(w);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < d; ++c) dW.data[i] += dY.data[i * d + c] * X.data[i * d + c];
        }
    });
}

ValueId Graph::take_elems(ValueId x, const std::vector<std::size_t>& idx) {
    const Tensor& X = nodes_[x].value;
    Tensor Y({idx.size()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= X.numel()) throw std::out_of_range("take_elems: index out of range");
        Y.data[i] = X.data[idx[i]];
    }
    return push_(std::move(Y), nodes_[x].needs_grad, [x, idx](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < idx.size(); ++i) dX.data[idx[i]] += dY.data[i];
    });
}

ValueId Graph::col_mean(ValueId x) {
    const Tensor& X = nodes_[x].value;
    const std::size_t n = X.rows(), e = X.cols();
    Tensor Y({e});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < e; ++j) Y.data[j] += X.data[i * e + j];
    for (double& v : Y.data) v /= static_cast<double>(n);
    return push_(std::move(Y), nodes_[x].needs_grad, [x, n, e](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < e; ++j)
                dX.data[i * e + j] += dY.data[j] / static_cast<double>(n);
    });
}

ValueId Graph::dot_const(ValueId x, const std::vector<double>& c) {
    const Tensor& X = nodes_[x].value;
    if (X.numel() != c.size()) throw dimension_error("dot_const: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < c.size(); ++i) s += X.data[i] * c[i];
    return push_(Tensor({1}, {s}), nodes_[x].needs_grad, [x, c](Graph& g, int self) {
        const double dy = g.nodes_[self].grad.data[0];
        Tensor& dX = g.grad_ref_(x);
        for (std::size_t i = 0; i < c.size(); ++i) dX.data[i] += dy * c[i];
    });
}

ValueId Graph::mean_all(ValueId x) {
    const Tensor& X = nodes_[x].value;
    const std::size_t n = X.numel();
    double s = 0.0;
    for (double v : X.data) s += v;
    return push_(Tensor({1}, {s / static_cast<double>(n)}), nodes_[x].needs_grad,
                 [x, n](Graph& g, int self) {
        const double dy = g.nodes_[self].grad.data[0] / static_cast<double>(n);
        Tensor& dX = g.grad_ref_(x);
        for (double& v : dX.data) v += dy;
    });
}

ValueId Graph::select_renorm(ValueId probs, const std::vector<std::vector<std::size_t>>& groups,
                             const std::vector<std::vector<std::size_t>>& emit) {
    const Tensor& P = nodes_[probs].value;
    const std::size_t n = P.rows(), e = P.cols();
    if (groups.size() != n || emit.size() != n)
        throw dimension_error("select_renorm: group count mismatch");
    std::vector<double> out;
    std::vector<double> denom(n, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
        for (std::size_t j : groups[t]) denom[t] += P.data[t * e + j];
        if (denom[t] <= 0.0) throw numeric_error("select_renorm: zero selected mass");
        for (std::size_t j : emit[t]) out.push_back(P.data[t * e + j] / denom[t]);
    }
    const std::size_t n_out = out.size();
    Tensor Y({n_out}, std::move(out));
    return push_(std::move(Y), nodes_[probs].needs_grad,
                 [probs, groups, emit, denom = std::move(denom), e](Graph& g, int self) {
        const Tensor& dY = g.nodes_[self].grad;
        const Tensor& P = g.nodes_[probs].value;
        Tensor& dP = g.grad_ref_(probs);
        std::size_t pos = 0;
        for (std::size_t t = 0; t < groups.size(); ++t) {
            const double S = denom[t];
            for (std::size_t i : emit[t]) {
                const double dy = dY.data[pos++];
                if (dy == 0.0) continue;
                const double pi = P.data[t * e + i];
                // w_i = p_i / S with S = sum over the selected group; the
                // group membership itself is treated as a constant.
                for (std::size_t j : groups[t]) {
                    if (j == i)
                        dP.data[t * e + j] += dy * (S - pi) / (S * S);
                    else
                        dP.data[t * e + j] -= dy * pi / (S * S);
                }
            }
        }
    });
}

}  // namespace dcmoe
