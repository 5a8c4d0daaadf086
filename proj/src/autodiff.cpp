#include "flexdoc/autodiff.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Core>

namespace flexdoc {

std::string shape_string(const Shape& shape) {
    std::ostringstream ss;
    ss << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
    ss << ']';
    return ss.str();
}

template <class T>
Var<T> Tape<T>::constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <class T>
Var<T> Tape<T>::leaf(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <class T>
Var<T> Tape<T>::parameter(const Tensor<T>& external) {
    Node n;
    n.external = &external;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
}

template <class T>
Var<T> Tape<T>::record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward) {
    const std::size_t self = nodes_.size();
    bool needs_grad = false;
    for (auto p : parents) {
        if (p >= self) throw ShapeError("graph cycle: parent recorded after child");
        needs_grad = needs_grad || nodes_[p].requires_grad;
    }
#ifdef FLEXDOC_CHECK_FINITE
    if (!value.all_finite()) throw ShapeError("non-finite value produced by op " + std::to_string(self));
#endif
    Node n;
    n.owned = std::move(value);
    n.parents = std::move(parents);
    n.requires_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return {this, self};
}

template <class T>
const Tensor<T>& Tape<T>::value(std::size_t id) const {
    const auto& n = nodes_.at(id);
    return n.external ? *n.external : n.owned;
}

template <class T>
Tensor<T>& Tape<T>::grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(value(id).shape(), T(0));
    return n.grad;
}

template <class T>
Tensor<T> Tape<T>::grad(Var<T> v) const {
    const auto& n = nodes_.at(v.id);
    if (n.grad.empty()) return Tensor<T>(value(v.id).shape(), T(0));
    return n.grad;
}

template <class T>
void Tape<T>::backward(Var<T> loss) {
    if (loss.tape != this) throw ShapeError("backward: loss belongs to another tape");
    if (value(loss.id).size() != 1)
        throw ShapeError("backward: loss must be scalar, got shape " + shape_string(value(loss.id).shape()));
    grad_buffer(loss.id).fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
        auto& n = nodes_[i];
        if (n.backward && !n.grad.empty()) n.backward(*this, i);
    }
}

template class Tape<float>;
template class Tape<double>;

namespace ad {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

template <class T>
MapC<T> view(const Tensor<T>& t) {
    return MapC<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <class T>
MapM<T> view(Tensor<T>& t) {
    return MapM<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <class T>
void require_same_tape(Var<T> a, Var<T> b) {
    if (a.tape != b.tape || a.tape == nullptr) throw ShapeError("operands live on different tapes");
}

template <class T>
void require_2d(const Tensor<T>& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_string(t.shape()));
}

template <class T>
void accumulate(Tape<T>& tape, std::size_t id, const Tensor<T>& g) {
    if (!tape.requires_grad(id)) return;
    auto& dst = tape.grad_buffer(id);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    require_2d(A, "matmul");
    require_2d(B, "matmul");
    if (A.cols() != B.rows())
        throw ShapeError("matmul: shape mismatch " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
    Tensor<T> C(A.rows(), B.cols());
    view(C).noalias() = view(A) * view(B);
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(C), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        if (t.requires_grad(ia)) view(t.grad_buffer(ia)).noalias() += view(G) * view(t.value(ib)).transpose();
        if (t.requires_grad(ib)) view(t.grad_buffer(ib)).noalias() += view(t.value(ia)).transpose() * view(G);
    });
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    if (!A.same_shape(B)) throw ShapeError("add: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    Tensor<T> C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C[i] += B[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(C), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        accumulate(t, ia, G);
        accumulate(t, ib, G);
    });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    if (!A.same_shape(B)) throw ShapeError("sub: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    Tensor<T> C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C[i] -= B[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(C), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        accumulate(t, ia, G);
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < G.size(); ++i) gb[i] -= G[i];
        }
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_tape(a, b);
    const auto& A = a.value();
    const auto& B = b.value();
    if (!A.same_shape(B)) throw ShapeError("mul: shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
    Tensor<T> C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C[i] *= B[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(C), {ia, ib}, [ia, ib](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        if (t.requires_grad(ia)) {
            const auto& Bv = t.value(ib);
            auto& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * Bv[i];
        }
        if (t.requires_grad(ib)) {
            const auto& Av = t.value(ia);
            auto& gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < G.size(); ++i) gb[i] += G[i] * Av[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T factor) {
    Tensor<T> C = a.value();
    for (auto& x : C.storage()) x *= factor;
    const std::size_t ia = a.id;
    return a.tape->record(std::move(C), {ia}, [ia, factor](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < G.size(); ++i) ga[i] += G[i] * factor;
    });
}

template <class T>
Var<T> scale_rows(Var<T> a, const std::vector<T>& weights) {
    const auto& A = a.value();
    require_2d(A, "scale_rows");
    if (weights.size() != A.rows()) throw ShapeError("scale_rows: weight count != rows");
    Tensor<T> C = A;
    const std::size_t n = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) C(r, c) *= weights[r];
    const std::size_t ia = a.id;
    return a.tape->record(std::move(C), {ia}, [ia, weights, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < weights.size(); ++r)
            for (std::size_t c = 0; c < n; ++c) ga(r, c) += G(r, c) * weights[r];
    });
}

template <class T>
Var<T> add_bias(Var<T> a, Var<T> bias) {
    require_same_tape(a, bias);
    const auto& A = a.value();
    const auto& B = bias.value();
    require_2d(A, "add_bias");
    if (B.size() != A.cols()) throw ShapeError("add_bias: bias length " + std::to_string(B.size()) + " != cols " + std::to_string(A.cols()));
    Tensor<T> C = A;
    const std::size_t n = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r)
        for (std::size_t c = 0; c < n; ++c) C(r, c) += B[c];
    const std::size_t ia = a.id, ib = bias.id;
    return a.tape->record(std::move(C), {ia, ib}, [ia, ib, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        accumulate(t, ia, G);
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            for (std::size_t r = 0; r < G.rows(); ++r)
                for (std::size_t c = 0; c < n; ++c) gb[c] += G(r, c);
        }
    });
}

template <class T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
    return add_bias(matmul(x, weight), bias);
}

template <class T>
Var<T> gelu(Var<T> a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    Tensor<T> C = a.value();
    for (auto& x : C.storage()) x = T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2));
    const std::size_t ia = a.id;
    return a.tape->record(std::move(C), {ia}, [ia](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        const auto& X = t.value(ia);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < G.size(); ++i) {
            const T x = X[i];
            const T d = T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
            ga[i] += G[i] * d;
        }
    });
}

template <class T>
Var<T> softmax(Var<T> a) {
    const auto& A = a.value();
    require_2d(A, "softmax");
    Tensor<T> P(A.shape());
    const std::size_t n = A.cols();
    for (std::size_t r = 0; r < A.rows(); ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, A(r, c));
        T z = 0;
        for (std::size_t c = 0; c < n; ++c) z += (P(r, c) = std::exp(A(r, c) - mx));
        for (std::size_t c = 0; c < n; ++c) P(r, c) /= z;
    }
    const std::size_t ia = a.id;
    return a.tape->record(std::move(P), {ia}, [ia, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        const auto& Pv = t.value(self);
        auto& ga = t.grad_buffer(ia);
        for (std::size_t r = 0; r < G.rows(); ++r) {
            T dot = 0;
            for (std::size_t c = 0; c < n; ++c) dot += G(r, c) * Pv(r, c);
            for (std::size_t c = 0; c < n; ++c) ga(r, c) += Pv(r, c) * (G(r, c) - dot);
        }
    });
}

template <class T>
Var<T> layer_norm(Var<T> x, std::optional<Var<T>> gamma, std::optional<Var<T>> beta, T eps) {
    const auto& X = x.value();
    require_2d(X, "layer_norm");
    const std::size_t rows = X.rows(), n = X.cols();
    if (gamma && gamma->value().size() != n) throw ShapeError("layer_norm: gamma length mismatch");
    if (beta && beta->value().size() != n) throw ShapeError("layer_norm: beta length mismatch");

    Tensor<T> xhat(X.shape());
    std::vector<T> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        T mean = 0;
        for (std::size_t c = 0; c < n; ++c) mean += X(r, c);
        mean /= T(n);
        T var = 0;
        for (std::size_t c = 0; c < n; ++c) var += (X(r, c) - mean) * (X(r, c) - mean);
        var /= T(n);
        rstd[r] = T(1) / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) xhat(r, c) = (X(r, c) - mean) * rstd[r];
    }
    Tensor<T> Y = xhat;
    if (gamma) {
        const auto& g = gamma->value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) Y(r, c) *= g[c];
    }
    if (beta) {
        const auto& b = beta->value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < n; ++c) Y(r, c) += b[c];
    }

    std::vector<std::size_t> parents{x.id};
    const long ig = gamma ? static_cast<long>(gamma->id) : -1;
    const long ib = beta ? static_cast<long>(beta->id) : -1;
    if (gamma) parents.push_back(gamma->id);
    if (beta) parents.push_back(beta->id);
    const std::size_t ix = x.id;
    return x.tape->record(
        std::move(Y), std::move(parents),
        [ix, ig, ib, n, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
            const auto& G = t.grad_buffer(self);
            const std::size_t rows = G.rows();
            if (ig >= 0 && t.requires_grad(static_cast<std::size_t>(ig))) {
                auto& gg = t.grad_buffer(static_cast<std::size_t>(ig));
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < n; ++c) gg[c] += G(r, c) * xhat(r, c);
            }
            if (ib >= 0 && t.requires_grad(static_cast<std::size_t>(ib))) {
                auto& gb = t.grad_buffer(static_cast<std::size_t>(ib));
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < n; ++c) gb[c] += G(r, c);
            }
            if (!t.requires_grad(ix)) return;
            const T* g = ig >= 0 ? t.value(static_cast<std::size_t>(ig)).data() : nullptr;
            auto& gx = t.grad_buffer(ix);
            std::vector<T> dxhat(n);
            for (std::size_t r = 0; r < rows; ++r) {
                T mean_d = 0, mean_dx = 0;
                for (std::size_t c = 0; c < n; ++c) {
                    dxhat[c] = G(r, c) * (g ? g[c] : T(1));
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * xhat(r, c);
                }
                mean_d /= T(n);
                mean_dx /= T(n);
                for (std::size_t c = 0; c < n; ++c)
                    gx(r, c) += rstd[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
            }
        });
}

template <class T>
Var<T> embedding_lookup(Var<T> table, const std::vector<long>& ids) {
    const auto& W = table.value();
    require_2d(W, "embedding_lookup");
    const std::size_t n = W.cols();
    Tensor<T> out(ids.size(), n);
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const long id = ids[r];
        if (id == -1) continue;
        if (id < 0 || static_cast<std::size_t>(id) >= W.rows())
            throw ShapeError("embedding_lookup: id " + std::to_string(id) + " outside table of " + std::to_string(W.rows()) + " rows");
        std::copy_n(W.data() + static_cast<std::size_t>(id) * n, n, out.data() + r * n);
    }
    const std::size_t it = table.id;
    return table.tape->record(std::move(out), {it}, [it, ids, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        auto& gw = t.grad_buffer(it);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            if (ids[r] < 0) continue;
            T* dst = gw.data() + static_cast<std::size_t>(ids[r]) * n;
            const T* src = G.data() + r * n;
            for (std::size_t c = 0; c < n; ++c) dst[c] += src[c];
        }
    });
}

template <class T>
Var<T> dropout(Var<T> x, double p, std::mt19937_64& rng, bool train) {
    if (!(p >= 0.0 && p < 1.0)) throw ShapeError("dropout: p must lie in [0,1)");
    if (!train || p == 0.0) return x;
    const auto& X = x.value();
    std::vector<T> keep(X.size());
    std::bernoulli_distribution bern(1.0 - p);
    const T inv = T(1.0 / (1.0 - p));
    for (auto& k : keep) k = bern(rng) ? inv : T(0);
    Tensor<T> Y = X;
    for (std::size_t i = 0; i < Y.size(); ++i) Y[i] *= keep[i];
    const std::size_t ix = x.id;
    return x.tape->record(std::move(Y), {ix}, [ix, keep = std::move(keep)](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t i = 0; i < G.size(); ++i) gx[i] += G[i] * keep[i];
    });
}

template <class T>
Var<T> masked_mean(Var<T> x, const std::vector<bool>& row_mask) {
    const auto& X = x.value();
    require_2d(X, "masked_mean");
    if (row_mask.size() != X.rows()) throw ShapeError("masked_mean: mask length != rows");
    const auto count = static_cast<std::size_t>(std::count(row_mask.begin(), row_mask.end(), true));
    if (count == 0) throw ShapeError("masked_mean: no rows selected");
    const std::size_t n = X.cols();
    Tensor<T> out(1, n);
    for (std::size_t r = 0; r < X.rows(); ++r) {
        if (!row_mask[r]) continue;
        for (std::size_t c = 0; c < n; ++c) out[c] += X(r, c);
    }
    const T inv = T(1) / T(count);
    for (auto& v : out.storage()) v *= inv;
    const std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix, row_mask, n, inv](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < row_mask.size(); ++r) {
            if (!row_mask[r]) continue;
            for (std::size_t c = 0; c < n; ++c) gx(r, c) += G[c] * inv;
        }
    });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t n = parts.front().value().cols();
    std::size_t rows = 0;
    std::vector<std::size_t> ids, offsets;
    for (const auto& p : parts) {
        require_same_tape(p, parts.front());
        require_2d(p.value(), "concat_rows");
        if (p.value().cols() != n) throw ShapeError("concat_rows: column mismatch");
        ids.push_back(p.id);
        offsets.push_back(rows);
        rows += p.value().rows();
    }
    Tensor<T> out(rows, n);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        const auto& v = parts[i].value();
        std::copy(v.data(), v.data() + v.size(), out.data() + offsets[i] * n);
    }
    return parts.front().tape->record(std::move(out), ids, [ids, offsets, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!t.requires_grad(ids[i])) continue;
            auto& g = t.grad_buffer(ids[i]);
            const T* src = G.data() + offsets[i] * n;
            for (std::size_t j = 0; j < g.size(); ++j) g[j] += src[j];
        }
    });
}

template <class T>
Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end) {
    const auto& X = x.value();
    require_2d(X, "slice_rows");
    if (begin > end || end > X.rows()) throw ShapeError("slice_rows: range out of bounds");
    const std::size_t n = X.cols();
    Tensor<T> out(end - begin, n);
    std::copy(X.data() + begin * n, X.data() + end * n, out.data());
    const std::size_t ix = x.id;
    return x.tape->record(std::move(out), {ix}, [ix, begin, n](Tape<T>& t, std::size_t self) {
        const auto& G = t.grad_buffer(self);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t j = 0; j < G.size(); ++j) gx[begin * n + j] += G[j];
    });
}

template <class T>
Var<T> sum(Var<T> x) {
    const auto& X = x.value();
    T s = 0;
    for (T v : X.storage()) s += v;
    const std::size_t ix = x.id;
    return x.tape->record(Tensor<T>::scalar(s), {ix}, [ix](Tape<T>& t, std::size_t self) {
        const T g = t.grad_buffer(self)[0];
        auto& gx = t.grad_buffer(ix);
        for (auto& v : gx.storage()) v += g;
    });
}

template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets) {
    const auto& L = logits.value();
    require_2d(L, "cross_entropy");
    if (targets.size() != L.rows()) throw ShapeError("cross_entropy: target count != rows");
    const std::size_t n = L.cols();
    Tensor<T> probs(L.shape());
    T total = 0;
    for (std::size_t r = 0; r < L.rows(); ++r) {
        const int y = targets[r];
        if (y < 0 || static_cast<std::size_t>(y) >= n) throw ShapeError("cross_entropy: target out of range");
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, L(r, c));
        T z = 0;
        for (std::size_t c = 0; c < n; ++c) z += (probs(r, c) = std::exp(L(r, c) - mx));
        for (std::size_t c = 0; c < n; ++c) probs(r, c) /= z;
        total += std::log(z) + mx - L(r, static_cast<std::size_t>(y));
    }
    const std::size_t il = logits.id;
    return logits.tape->record(Tensor<T>::scalar(total), {il},
                               [il, targets, n, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
                                   const T g = t.grad_buffer(self)[0];
                                   auto& gl = t.grad_buffer(il);
                                   for (std::size_t r = 0; r < targets.size(); ++r) {
                                       for (std::size_t c = 0; c < n; ++c) gl(r, c) += g * probs(r, c);
                                       gl(r, static_cast<std::size_t>(targets[r])) -= g;
                                   }
                               });
}

template <class T>
Var<T> mse(Var<T> prediction, const Tensor<T>& target) {
    const auto& P = prediction.value();
    require_2d(P, "mse");
    if (P.size() != target.size() || P.cols() != target.cols())
        throw ShapeError("mse: shape mismatch " + shape_string(P.shape()) + " vs " + shape_string(target.shape()));
    const std::size_t n = P.cols();
    Tensor<T> diff(P.shape());
    T total = 0;
    for (std::size_t i = 0; i < P.size(); ++i) {
        diff[i] = P[i] - target[i];
        total += diff[i] * diff[i];
    }
    total /= T(n);
    const std::size_t ip = prediction.id;
    return prediction.tape->record(Tensor<T>::scalar(total), {ip},
                                   [ip, n, diff = std::move(diff)](Tape<T>& t, std::size_t self) {
                                       const T g = t.grad_buffer(self)[0] * T(2) / T(n);
                                       auto& gp = t.grad_buffer(ip);
                                       for (std::size_t i = 0; i < diff.size(); ++i) gp[i] += g * diff[i];
                                   });
}

template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const SequenceLayout& layout, std::size_t heads) {
    require_same_tape(q, k);
    require_same_tape(q, v);
    const auto& Q = q.value();
    const auto& K = k.value();
    const auto& V = v.value();
    const std::size_t B = layout.batch, S = layout.seq_len, d = Q.cols();
    if (Q.rows() != B * S || !Q.same_shape(K) || !Q.same_shape(V))
        throw ShapeError("attention: q/k/v must all be [batch*seq_len, d]");
    if (layout.key_valid.size() != B * S) throw ShapeError("attention: key_valid length mismatch");
    if (heads == 0 || d % heads != 0) throw ShapeError("attention: d not divisible by heads");
    const std::size_t dh = d / heads;
    const T scale_f = T(1) / std::sqrt(T(dh));

    // probs[((b*H + h)*S + s)*S + t]
    std::vector<T> probs(B * heads * S * S, T(0));
    Tensor<T> out(B * S, d);
    std::vector<T> row(S);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t s = 0; s < S; ++s) {
                const T* qs = Q.data() + (b * S + s) * d + c0;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t t = 0; t < S; ++t) {
                    if (!layout.key_valid[b * S + t]) continue;
                    const T* kt = K.data() + (b * S + t) * d + c0;
                    T dot = 0;
                    for (std::size_t j = 0; j < dh; ++j) dot += qs[j] * kt[j];
                    row[t] = dot * scale_f;
                    mx = std::max(mx, row[t]);
                }
                T* p = probs.data() + ((b * heads + h) * S + s) * S;
                if (mx == -std::numeric_limits<T>::infinity()) continue;  // no valid key
                T z = 0;
                for (std::size_t t = 0; t < S; ++t) {
                    if (!layout.key_valid[b * S + t]) continue;
                    z += (p[t] = std::exp(row[t] - mx));
                }
                T* o = out.data() + (b * S + s) * d + c0;
                for (std::size_t t = 0; t < S; ++t) {
                    if (!layout.key_valid[b * S + t]) continue;
                    p[t] /= z;
                    const T* vt = V.data() + (b * S + t) * d + c0;
                    for (std::size_t j = 0; j < dh; ++j) o[j] += p[t] * vt[j];
                }
            }
        }
    }

    const std::size_t iq = q.id, ik = k.id, iv = v.id;
    return q.tape->record(
        std::move(out), {iq, ik, iv},
        [iq, ik, iv, B, S, d, dh, heads, scale_f, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
            const auto& G = t.grad_buffer(self);
            const auto& Qv = t.value(iq);
            const auto& Kv = t.value(ik);
            const auto& Vv = t.value(iv);
            Tensor<T>* gq = t.requires_grad(iq) ? &t.grad_buffer(iq) : nullptr;
            Tensor<T>* gk = t.requires_grad(ik) ? &t.grad_buffer(ik) : nullptr;
            Tensor<T>* gv = t.requires_grad(iv) ? &t.grad_buffer(iv) : nullptr;
            std::vector<T> dp(S), ds(S);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * dh;
                    for (std::size_t s = 0; s < S; ++s) {
                        const T* p = probs.data() + ((b * heads + h) * S + s) * S;
                        const T* go = G.data() + (b * S + s) * d + c0;
                        T dot = 0;
                        for (std::size_t u = 0; u < S; ++u) {
                            const T* vu = Vv.data() + (b * S + u) * d + c0;
                            T acc = 0;
                            for (std::size_t j = 0; j < dh; ++j) acc += go[j] * vu[j];
                            dp[u] = acc;
                            dot += acc * p[u];
                            if (gv && p[u] != T(0)) {
                                T* gvu = gv->data() + (b * S + u) * d + c0;
                                for (std::size_t j = 0; j < dh; ++j) gvu[j] += p[u] * go[j];
                            }
                        }
                        for (std::size_t u = 0; u < S; ++u) ds[u] = p[u] * (dp[u] - dot) * scale_f;
                        const T* qs = Qv.data() + (b * S + s) * d + c0;
                        T* gqs = gq ? gq->data() + (b * S + s) * d + c0 : nullptr;
                        for (std::size_t u = 0; u < S; ++u) {
                            if (ds[u] == T(0)) continue;
                            const T* ku = Kv.data() + (b * S + u) * d + c0;
                            if (gqs)
                                for (std::size_t j = 0; j < dh; ++j) gqs[j] += ds[u] * ku[j];
                            if (gk) {
                                T* gku = gk->data() + (b * S + u) * d + c0;
                                for (std::size_t j = 0; j < dh; ++j) gku[j] += ds[u] * qs[j];
                            }
                        }
                    }
                }
            }
        });
}

#define FLEXDOC_INSTANTIATE_OPS(T)                                                                   \
    template Var<T> matmul<T>(Var<T>, Var<T>);                                                       \
    template Var<T> add<T>(Var<T>, Var<T>);                                                          \
    template Var<T> sub<T>(Var<T>, Var<T>);                                                          \
    template Var<T> mul<T>(Var<T>, Var<T>);                                                          \
    template Var<T> scale<T>(Var<T>, T);                                                             \
    template Var<T> scale_rows<T>(Var<T>, const std::vector<T>&);                                    \
    template Var<T> add_bias<T>(Var<T>, Var<T>);                                                     \
    template Var<T> linear<T>(Var<T>, Var<T>, Var<T>);                                               \
    template Var<T> gelu<T>(Var<T>);                                                                 \
    template Var<T> softmax<T>(Var<T>);                                                              \
    template Var<T> layer_norm<T>(Var<T>, std::optional<Var<T>>, std::optional<Var<T>>, T);          \
    template Var<T> embedding_lookup<T>(Var<T>, const std::vector<long>&);                           \
    template Var<T> dropout<T>(Var<T>, double, std::mt19937_64&, bool);                              \
    template Var<T> masked_mean<T>(Var<T>, const std::vector<bool>&);                                \
    template Var<T> concat_rows<T>(const std::vector<Var<T>>&);                                      \
    template Var<T> slice_rows<T>(Var<T>, std::size_t, std::size_t);                                 \
    template Var<T> sum<T>(Var<T>);                                                                  \
    template Var<T> cross_entropy<T>(Var<T>, const std::vector<int>&);                               \
    template Var<T> mse<T>(Var<T>, const Tensor<T>&);                                                \
    template Var<T> attention<T>(Var<T>, Var<T>, Var<T>, const SequenceLayout&, std::size_t);

FLEXDOC_INSTANTIATE_OPS(float)
FLEXDOC_INSTANTIATE_OPS(double)

#undef FLEXDOC_INSTANTIATE_OPS

}  // namespace ad
}  // namespace flexdoc
