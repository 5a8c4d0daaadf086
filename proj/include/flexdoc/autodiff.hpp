#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "flexdoc/tensor.hpp"

namespace flexdoc {

template <class T>
class Tape;

/// Handle to a node recorded on a Tape.
template <class T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Tensor<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

/// Records operations in creation order. Creation order is a topological
/// order, so backward is a single reverse sweep that visits each node once.
/// A tape is single-threaded; independent tapes may run concurrently.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> constant(Tensor<T> value);
    /// Owned leaf that receives a gradient.
    Var<T> leaf(Tensor<T> value);
    /// Leaf referencing external storage (a model parameter); no copy is made.
    /// The referenced tensor must outlive the tape.
    Var<T> parameter(const Tensor<T>& external);

    /// Records an op output. Parents must already be on this tape.
    Var<T> record(Tensor<T> value, std::vector<std::size_t> parents, BackwardFn backward);

    const Tensor<T>& value(std::size_t id) const;
    const Tensor<T>& value(Var<T> v) const { return value(v.id); }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of a node, zero-initialised on first access.
    Tensor<T>& grad_buffer(std::size_t id);
    /// Gradient of the last backward pass; zeros if the node was not reached.
    Tensor<T> grad(Var<T> v) const;
    bool has_grad(Var<T> v) const { return !nodes_[v.id].grad.empty(); }

    /// Reverse sweep from a scalar loss. Throws ShapeError for non-scalar losses.
    void backward(Var<T> loss);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* external = nullptr;
        Tensor<T> grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };
    std::vector<Node> nodes_;
};

template <class T>
const Tensor<T>& Var<T>::value() const {
    return tape->value(id);
}

namespace ad {

// All reductions and normalisations act on the last axis of rank-2 tensors.

template <class T> Var<T> matmul(Var<T> a, Var<T> b);
template <class T> Var<T> add(Var<T> a, Var<T> b);
template <class T> Var<T> sub(Var<T> a, Var<T> b);
template <class T> Var<T> mul(Var<T> a, Var<T> b);
template <class T> Var<T> scale(Var<T> a, T factor);
/// Row r multiplied by the constant weights[r].
template <class T> Var<T> scale_rows(Var<T> a, const std::vector<T>& weights);
/// a [m,n] + bias [1,n] broadcast over rows.
template <class T> Var<T> add_bias(Var<T> a, Var<T> bias);
/// x W + b.
template <class T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);
template <class T> Var<T> gelu(Var<T> a);
template <class T> Var<T> softmax(Var<T> a);
/// Normalises each row; gamma/beta are optional [1,n] affine parameters.
template <class T> Var<T> layer_norm(Var<T> x, std::optional<Var<T>> gamma, std::optional<Var<T>> beta,
                                     T eps = T(1e-6));
/// Gathers table rows. An id of -1 yields a zero row and no gradient.
template <class T> Var<T> embedding_lookup(Var<T> table, const std::vector<long>& ids);
/// Inverted dropout; identity when `train` is false. Throws for p outside [0,1).
template <class T> Var<T> dropout(Var<T> x, double p, std::mt19937_64& rng, bool train);
/// Mean over the rows where row_mask is true; result is [1,n].
template <class T> Var<T> masked_mean(Var<T> x, const std::vector<bool>& row_mask);
template <class T> Var<T> concat_rows(const std::vector<Var<T>>& parts);
template <class T> Var<T> slice_rows(Var<T> x, std::size_t begin, std::size_t end);
template <class T> Var<T> sum(Var<T> x);
/// Sum over rows of softmax cross-entropy against integer targets.
template <class T> Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets);
/// Sum over rows of the mean squared error across the row's components.
template <class T> Var<T> mse(Var<T> prediction, const Tensor<T>& target);

/// Layout of a padded batch flattened to rows: row b*seq_len + s.
struct SequenceLayout {
    std::size_t batch = 0;
    std::size_t seq_len = 0;
    /// batch*seq_len flags; false keys are excluded from attention.
    std::vector<bool> key_valid;
};

/// Multi-head scaled dot-product self-attention over pre-projected q, k, v.
template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const SequenceLayout& layout, std::size_t heads);

}  // namespace ad

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace flexdoc
