// Dense double-precision tensors with reverse-mode automatic differentiation.
// The graph is rebuilt on every forward pass (define-by-run); nodes hold their
// parents, so dropping the handles frees the pass. Matrix products report
// their multiply-accumulate cost to the active OpCounter.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lasformer/common.hpp"
#include "lasformer/op_counter.hpp"
#include "lasformer/rng.hpp"

namespace lasformer {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool backward_ran = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
    }
};

namespace detail {
inline thread_local bool g_no_grad = false;
}

// RAII scope disabling graph construction (inference / oracle evaluation).
class NoGradScope {
public:
    NoGradScope() : prev_(detail::g_no_grad) { detail::g_no_grad = true; }
    ~NoGradScope() { detail::g_no_grad = prev_; }
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool prev_;
};

inline bool grad_enabled() { return !detail::g_no_grad; }

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false) {
        if (lasformer::numel(shape) != static_cast<int>(values.size())) {
            throw ShapeError("value count " + std::to_string(values.size()) +
                             " does not match shape " + shape_str(shape));
        }
        auto node = std::make_shared<TensorNode>();
        node->shape = std::move(shape);
        node->values = std::move(values);
        node->requires_grad = requires_grad && grad_enabled();
        return Tensor(std::move(node));
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(static_cast<size_t>(lasformer::numel(shape)), 0.0);
        return from_values(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> v(static_cast<size_t>(lasformer::numel(shape)), value);
        return from_values(std::move(shape), std::move(v), requires_grad);
    }

    static Tensor scalar(double value) { return from_values({1}, {value}); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int numel() const { return static_cast<int>(node_->values.size()); }
    int rows() const { return node_->shape.at(0); }
    int cols() const { return node_->shape.at(1); }

    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& values() { return node_->values; }
    double at(int i) const { return node_->values.at(static_cast<size_t>(i)); }
    double at(int r, int c) const {
        return node_->values[static_cast<size_t>(r) * cols() + c];
    }
    double scalar_value() const {
        if (numel() != 1) {
            throw ContractError("expected scalar tensor, got shape " +
                                shape_str(shape()));
        }
        return node_->values[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
        node_->backward_ran = false;
    }

    TensorNode* node() const { return node_.get(); }
    std::shared_ptr<TensorNode> node_ptr() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Generic op constructor: result with given parents and backprop closure.
// The closure receives the result node; parents are reachable through it.
inline Tensor make_op(Shape shape, std::vector<double> values,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backprop) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    bool needs = false;
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
    if (needs && grad_enabled()) {
        node->requires_grad = true;
        node->parents.reserve(parents.size());
        for (const Tensor& p : parents) node->parents.push_back(p.node_ptr());
        node->backprop = std::move(backprop);
    }
    return Tensor(std::move(node));
}

namespace detail {

// c[M,N] += a[M,K] * b[K,N]
inline void raw_matmul(const double* a, const double* b, double* c, int M,
                       int K, int N) {
    for (int m = 0; m < M; ++m) {
        double* crow = c + static_cast<size_t>(m) * N;
        const double* arow = a + static_cast<size_t>(m) * K;
        for (int k = 0; k < K; ++k) {
            const double amk = arow[k];
            const double* brow = b + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) crow[n] += amk * brow[n];
        }
    }
}

// c[M,N] += a[M,K] * b[N,K]^T   (rows of both operands are contiguous)
inline void raw_matmul_nt(const double* a, const double* b, double* c, int M,
                          int K, int N) {
    for (int m = 0; m < M; ++m) {
        const double* arow = a + static_cast<size_t>(m) * K;
        double* crow = c + static_cast<size_t>(m) * N;
        for (int n = 0; n < N; ++n) {
            const double* brow = b + static_cast<size_t>(n) * K;
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += arow[k] * brow[k];
            crow[n] += s;
        }
    }
}

// c[K,N] += a[M,K]^T * b[M,N]
inline void raw_matmul_tn(const double* a, const double* b, double* c, int M,
                          int K, int N) {
    for (int m = 0; m < M; ++m) {
        const double* arow = a + static_cast<size_t>(m) * K;
        const double* brow = b + static_cast<size_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            const double amk = arow[k];
            double* crow = c + static_cast<size_t>(k) * N;
            for (int n = 0; n < N; ++n) crow[n] += amk * brow[n];
        }
    }
}

inline void require_2d(const Tensor& t, std::string_view what) {
    if (t.ndim() != 2) {
        throw ShapeError(std::string(what) + " expects a 2-d tensor, got " +
                         shape_str(t.shape()));
    }
}

}  // namespace detail

// a[M,K] x b[K,N] -> [M,N]. Counts M*K*N multiply-accumulates under `label`.
inline Tensor matmul(const Tensor& a, const Tensor& b, std::string_view label) {
    detail::require_2d(a, "matmul");
    detail::require_2d(b, "matmul");
    if (label.empty()) throw ContractError("matmul: empty operation label");
    const int M = a.rows(), K = a.cols(), N = b.cols();
    if (b.rows() != K) {
        throw ShapeError("matmul: inner dimensions disagree: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<size_t>(M) * N, 0.0);
    detail::raw_matmul(a.values().data(), b.values().data(), out.data(), M, K, N);
    count_macs(label, static_cast<std::uint64_t>(M) * K * N);
    return make_op({M, N}, std::move(out), {a, b}, [M, K, N](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            detail::raw_matmul_nt(self.grad.data(), pb.values.data(),
                                  pa.grad.data(), M, N, K);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            detail::raw_matmul_tn(pa.values.data(), self.grad.data(),
                                  pb.grad.data(), M, K, N);
        }
    });
}

// a[M,K] x b[N,K]^T -> [M,N]; the natural layout for attention logits.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b,
                        std::string_view label) {
    detail::require_2d(a, "matmul_nt");
    detail::require_2d(b, "matmul_nt");
    if (label.empty()) throw ContractError("matmul_nt: empty operation label");
    const int M = a.rows(), K = a.cols(), N = b.rows();
    if (b.cols() != K) {
        throw ShapeError("matmul_nt: inner dimensions disagree: " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         "^T");
    }
    std::vector<double> out(static_cast<size_t>(M) * N, 0.0);
    detail::raw_matmul_nt(a.values().data(), b.values().data(), out.data(), M,
                          K, N);
    count_macs(label, static_cast<std::uint64_t>(M) * K * N);
    return make_op({M, N}, std::move(out), {a, b}, [M, K, N](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            // dA = dC * B
            detail::raw_matmul(self.grad.data(), pb.values.data(),
                               pa.grad.data(), M, N, K);
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            // dB = dC^T * A
            detail::raw_matmul_tn(self.grad.data(), pa.values.data(),
                                  pb.grad.data(), M, N, K);
        }
    });
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             std::string_view what) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(what) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        for (int p = 0; p < 2; ++p) {
            TensorNode& parent = *self.parents[p];
            if (!parent.requires_grad) continue;
            parent.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                parent.grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.values());
    const auto& bv = b.values();
    for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make_op(a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        TensorNode& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa.grad[i] += self.grad[i] * pb.values[i];
        }
        if (pb.requires_grad) {
            pb.ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb.grad[i] += self.grad[i] * pa.values[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.values());
    for (double& v : out) v *= c;
    return make_op(a.shape(), std::move(out), {a}, [c](TensorNode& self) {
        TensorNode& pa = *self.parents[0];
        if (!pa.requires_grad) return;
        pa.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += c * self.grad[i];
    });
}

// x[N,d] + bias[d] broadcast over rows.
inline Tensor add_row_vector(const Tensor& x, const Tensor& bias) {
    detail::require_2d(x, "add_row_vector");
    const int N = x.rows(), d = x.cols();
    if (bias.numel() != d) {
        throw ShapeError("add_row_vector: bias " + shape_str(bias.shape()) +
                         " does not match row width " + std::to_string(d));
    }
    std::vector<double> out(x.values());
    const auto& bv = bias.values();
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += bv[j];
    return make_op(x.shape(), std::move(out), {x, bias},
                   [N, d](TensorNode& self) {
                       TensorNode& px = *self.parents[0];
                       TensorNode& pb = *self.parents[1];
                       if (px.requires_grad) {
                           px.ensure_grad();
                           for (size_t i = 0; i < self.grad.size(); ++i)
                               px.grad[i] += self.grad[i];
                       }
                       if (pb.requires_grad) {
                           pb.ensure_grad();
                           for (int i = 0; i < N; ++i)
                               for (int j = 0; j < d; ++j)
                                   pb.grad[j] +=
                                       self.grad[static_cast<size_t>(i) * d + j];
                       }
                   });
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.values());
    for (double& v : out) v = v > 0.0 ? v : 0.0;
    return make_op(x.shape(), std::move(out), {x}, [](TensorNode& self) {
        TensorNode& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (px.values[i] > 0.0) px.grad[i] += self.grad[i];
    });
}

inline Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_op({1}, {s}, {x}, [](TensorNode& self) {
        TensorNode& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < px.grad.size(); ++i) px.grad[i] += self.grad[0];
    });
}

inline Tensor mean_all(const Tensor& x) {
    const double inv = 1.0 / x.numel();
    double s = 0.0;
    for (double v : x.values()) s += v;
    return make_op({1}, {s * inv}, {x}, [inv](TensorNode& self) {
        TensorNode& px = *self.parents[0];
        if (!px.requires_grad) return;
        px.ensure_grad();
        for (size_t i = 0; i < px.grad.size(); ++i)
            px.grad[i] += self.grad[0] * inv;
    });
}

// Constant copy of x, detached from the graph.
inline Tensor detach(const Tensor& x) {
    return Tensor::from_values(x.shape(), x.values(), false);
}

// Row-wise softmax with optional additive mask (entries 0 or kMaskedLogit).
// Stabilized by row-max subtraction; fully masked rows are an error.
inline Tensor softmax_rows(const Tensor& x, const Tensor* additive_mask = nullptr) {
    detail::require_2d(x, "softmax_rows");
    const int N = x.rows(), C = x.cols();
    if (C < 1) throw ShapeError("softmax_rows: need at least one column");
    if (additive_mask != nullptr) check_same_shape(x, *additive_mask, "softmax_rows mask");
    std::vector<double> out(static_cast<size_t>(N) * C);
    const auto& xv = x.values();
    const double* mv = additive_mask ? additive_mask->values().data() : nullptr;
    for (int i = 0; i < N; ++i) {
        const size_t base = static_cast<size_t>(i) * C;
        double rowmax = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < C; ++j) {
            const double z = xv[base + j] + (mv ? mv[base + j] : 0.0);
            rowmax = std::max(rowmax, z);
        }
        if (rowmax <= kMaskedThreshold) {
            throw DegenerateRowError(
                "softmax_rows: row " + std::to_string(i) +
                " has no admissible positions (empty selection set)");
        }
        double denom = 0.0;
        for (int j = 0; j < C; ++j) {
            const double z = xv[base + j] + (mv ? mv[base + j] : 0.0);
            const double e = std::exp(z - rowmax);
            out[base + j] = e;
            denom += e;
        }
        const double inv = 1.0 / denom;
        for (int j = 0; j < C; ++j) out[base + j] *= inv;
    }
    std::vector<Tensor> parents = {x};
    return make_op(x.shape(), std::move(out), std::move(parents),
                   [N, C](TensorNode& self) {
                       TensorNode& px = *self.parents[0];
                       if (!px.requires_grad) return;
                       px.ensure_grad();
                       for (int i = 0; i < N; ++i) {
                           const size_t base = static_cast<size_t>(i) * C;
                           double dot = 0.0;
                           for (int j = 0; j < C; ++j)
                               dot += self.grad[base + j] * self.values[base + j];
                           for (int j = 0; j < C; ++j)
                               px.grad[base + j] += self.values[base + j] *
                                                    (self.grad[base + j] - dot);
                       }
                   });
}

// Mean token cross-entropy in nats over rows where counted[i] is true.
inline Tensor cross_entropy_rows(const Tensor& logits,
                                 const std::vector<int>& targets,
                                 const std::vector<bool>& counted) {
    detail::require_2d(logits, "cross_entropy_rows");
    const int T = logits.rows(), V = logits.cols();
    if (static_cast<int>(targets.size()) != T ||
        static_cast<int>(counted.size()) != T) {
        throw ShapeError("cross_entropy_rows: target length " +
                         std::to_string(targets.size()) + " vs " +
                         std::to_string(T) + " rows");
    }
    int n_counted = 0;
    for (bool c : counted) n_counted += c ? 1 : 0;
    if (n_counted == 0) {
        throw DegenerateRowError("cross_entropy_rows: all target positions are padding");
    }
    const auto& lv = logits.values();
    double loss = 0.0;
    for (int i = 0; i < T; ++i) {
        if (!counted[i]) continue;
        const int t = targets[i];
        if (t < 0 || t >= V) {
            throw InputError("cross_entropy_rows: target id " + std::to_string(t) +
                             " out of vocabulary of size " + std::to_string(V));
        }
        const size_t base = static_cast<size_t>(i) * V;
        double rowmax = lv[base];
        for (int j = 1; j < V; ++j) rowmax = std::max(rowmax, lv[base + j]);
        double denom = 0.0;
        for (int j = 0; j < V; ++j) denom += std::exp(lv[base + j] - rowmax);
        loss += std::log(denom) + rowmax - lv[base + t];
    }
    loss /= n_counted;
    return make_op({1}, {loss}, {logits},
                   [T, V, targets, counted, n_counted](TensorNode& self) {
                       TensorNode& pl = *self.parents[0];
                       if (!pl.requires_grad) return;
                       pl.ensure_grad();
                       const double g = self.grad[0] / n_counted;
                       for (int i = 0; i < T; ++i) {
                           if (!counted[i]) continue;
                           const size_t base = static_cast<size_t>(i) * V;
                           double rowmax = pl.values[base];
                           for (int j = 1; j < V; ++j)
                               rowmax = std::max(rowmax, pl.values[base + j]);
                           double denom = 0.0;
                           for (int j = 0; j < V; ++j)
                               denom += std::exp(pl.values[base + j] - rowmax);
                           const double inv = 1.0 / denom;
                           for (int j = 0; j < V; ++j) {
                               const double p =
                                   std::exp(pl.values[base + j] - rowmax) * inv;
                               pl.grad[base + j] +=
                                   g * (p - (j == targets[i] ? 1.0 : 0.0));
                           }
                       }
                   });
}

// Row-wise layer normalization with learned gain/bias.
inline Tensor layer_norm_rows(const Tensor& x, const Tensor& gain,
                              const Tensor& bias, double eps = 1e-5) {
    detail::require_2d(x, "layer_norm_rows");
    const int N = x.rows(), d = x.cols();
    if (gain.numel() != d || bias.numel() != d) {
        throw ShapeError("layer_norm_rows: gain/bias width must be " +
                         std::to_string(d));
    }
    const auto& xv = x.values();
    const auto& gv = gain.values();
    const auto& bv = bias.values();
    std::vector<double> out(static_cast<size_t>(N) * d);
    std::vector<double> inv_sigma(N);
    std::vector<double> xhat(static_cast<size_t>(N) * d);
    for (int i = 0; i < N; ++i) {
        const size_t base = static_cast<size_t>(i) * d;
        double mean = 0.0;
        for (int j = 0; j < d; ++j) mean += xv[base + j];
        mean /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) {
            const double c = xv[base + j] - mean;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[i] = is;
        for (int j = 0; j < d; ++j) {
            const double h = (xv[base + j] - mean) * is;
            xhat[base + j] = h;
            out[base + j] = h * gv[j] + bv[j];
        }
    }
    return make_op(
        x.shape(), std::move(out), {x, gain, bias},
        [N, d, inv_sigma = std::move(inv_sigma),
         xhat = std::move(xhat)](TensorNode& self) {
            TensorNode& px = *self.parents[0];
            TensorNode& pg = *self.parents[1];
            TensorNode& pb = *self.parents[2];
            for (int i = 0; i < N; ++i) {
                const size_t base = static_cast<size_t>(i) * d;
                if (pg.requires_grad) {
                    pg.ensure_grad();
                    for (int j = 0; j < d; ++j)
                        pg.grad[j] += self.grad[base + j] * xhat[base + j];
                }
                if (pb.requires_grad) {
                    pb.ensure_grad();
                    for (int j = 0; j < d; ++j) pb.grad[j] += self.grad[base + j];
                }
                if (px.requires_grad) {
                    px.ensure_grad();
                    double mean_dh = 0.0, mean_dh_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double dh = self.grad[base + j] * pg.values[j];
                        mean_dh += dh;
                        mean_dh_xhat += dh * xhat[base + j];
                    }
                    mean_dh /= d;
                    mean_dh_xhat /= d;
                    for (int j = 0; j < d; ++j) {
                        const double dh = self.grad[base + j] * pg.values[j];
                        px.grad[base + j] +=
                            inv_sigma[i] *
                            (dh - mean_dh - xhat[base + j] * mean_dh_xhat);
                    }
                }
            }
        });
}

// Gathers table rows by token id -> [ids.size(), d].
inline Tensor embedding_rows(const std::vector<int>& ids, const Tensor& table) {
    detail::require_2d(table, "embedding_rows");
    const int V = table.rows(), d = table.cols();
    const int T = static_cast<int>(ids.size());
    std::vector<double> out(static_cast<size_t>(T) * d);
    const auto& tv = table.values();
    for (int i = 0; i < T; ++i) {
        const int id = ids[i];
        if (id < 0 || id >= V) {
            throw InputError("embedding_rows: token id " + std::to_string(id) +
                             " out of vocabulary of size " + std::to_string(V));
        }
        std::copy_n(tv.data() + static_cast<size_t>(id) * d, d,
                    out.data() + static_cast<size_t>(i) * d);
    }
    return make_op({T, d}, std::move(out), {table}, [ids, d](TensorNode& self) {
        TensorNode& pt = *self.parents[0];
        if (!pt.requires_grad) return;
        pt.ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const size_t src = i * d;
            const size_t dst = static_cast<size_t>(ids[i]) * d;
            for (int j = 0; j < d; ++j) pt.grad[dst + j] += self.grad[src + j];
        }
    });
}

inline Tensor slice_cols(const Tensor& x, int c0, int width) {
    detail::require_2d(x, "slice_cols");
    const int N = x.rows(), d = x.cols();
    if (c0 < 0 || width < 1 || c0 + width > d) {
        throw ShapeError("slice_cols: [" + std::to_string(c0) + "," +
                         std::to_string(c0 + width) + ") out of width " +
                         std::to_string(d));
    }
    std::vector<double> out(static_cast<size_t>(N) * width);
    const auto& xv = x.values();
    for (int i = 0; i < N; ++i)
        std::copy_n(xv.data() + static_cast<size_t>(i) * d + c0, width,
                    out.data() + static_cast<size_t>(i) * width);
    return make_op({N, width}, std::move(out), {x},
                   [N, d, c0, width](TensorNode& self) {
                       TensorNode& px = *self.parents[0];
                       if (!px.requires_grad) return;
                       px.ensure_grad();
                       for (int i = 0; i < N; ++i)
                           for (int j = 0; j < width; ++j)
                               px.grad[static_cast<size_t>(i) * d + c0 + j] +=
                                   self.grad[static_cast<size_t>(i) * width + j];
                   });
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const int N = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != N)
            throw ShapeError("concat_cols: row count mismatch " +
                             shape_str(p.shape()));
        total += p.cols();
    }
    std::vector<double> out(static_cast<size_t>(N) * total);
    int off = 0;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
        const int w = p.cols();
        widths.push_back(w);
        const auto& pv = p.values();
        for (int i = 0; i < N; ++i)
            std::copy_n(pv.data() + static_cast<size_t>(i) * w, w,
                        out.data() + static_cast<size_t>(i) * total + off);
        off += w;
    }
    return make_op({N, total}, std::move(out), parts,
                   [N, total, widths](TensorNode& self) {
                       int off2 = 0;
                       for (size_t p = 0; p < widths.size(); ++p) {
                           TensorNode& pp = *self.parents[p];
                           const int w = widths[p];
                           if (pp.requires_grad) {
                               pp.ensure_grad();
                               for (int i = 0; i < N; ++i)
                                   for (int j = 0; j < w; ++j)
                                       pp.grad[static_cast<size_t>(i) * w + j] +=
                                           self.grad[static_cast<size_t>(i) * total +
                                                     off2 + j];
                           }
                           off2 += w;
                       }
                   });
}

// Inverted dropout; draws one uniform per element from `rng`.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> out(x.values());
    std::vector<std::uint8_t> kept(out.size());
    for (size_t i = 0; i < out.size(); ++i) {
        const bool k = rng.uniform(0.0, 1.0) >= rate;
        kept[i] = k ? 1 : 0;
        out[i] = k ? out[i] * keep_scale : 0.0;
    }
    return make_op(x.shape(), std::move(out), {x},
                   [kept = std::move(kept), keep_scale](TensorNode& self) {
                       TensorNode& px = *self.parents[0];
                       if (!px.requires_grad) return;
                       px.ensure_grad();
                       for (size_t i = 0; i < self.grad.size(); ++i)
                           if (kept[i]) px.grad[i] += self.grad[i] * keep_scale;
                   });
}

// Reverse-mode sweep from a scalar loss. Grad buffers accumulate; callers
// reset parameter grads between steps. A second call on the same loss node
// without a reset is an error.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(loss.shape()));
    }
    TensorNode* root = loss.node();
    if (root->backward_ran) {
        throw ContractError("backward: already called on this loss; reset first");
    }
    root->backward_ran = true;

    // Iterative post-order DFS to topologically sort the graph.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> visited;
    std::vector<std::pair<TensorNode*, size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* parent = node->parents[next++].get();
            if (visited.insert(parent).second && !parent->parents.empty()) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backprop && !node->grad.empty()) node->backprop(*node);
    }
}

}  // namespace lasformer
