// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <vector>

#include "dcmoe/tensor.hpp"

namespace dcmoe {

using ValueId = int;

/// Reverse-mode tape. Ops append nodes that only reference earlier nodes, so
/// a single reverse sweep over the tape propagates gradients. Values are
/// immutable once produced.
class Graph {
  public:
    struct Node {
        Tensor value;
        Tensor grad;  // allocated lazily at backward time
        std::function<void(Graph&, int)> backward;  // may be empty (leaf/constant)
        bool needs_grad = false;
    };

    ValueId input(Tensor value, bool needs_grad);
    ValueId constant(Tensor value) { return input(std::move(value), false); }

    const Tensor& value(ValueId id) const { return nodes_[id].value; }
    const Tensor& grad(ValueId id) const { return nodes_[id].grad; }
    std::size_t size() const { return nodes_.size(); }

    /// Seeds d(loss)/d(loss)=1 at `loss` (a scalar node) and sweeps the tape.
    void backward(ValueId loss);

    // ---- differentiable ops ----
    ValueId matmul(ValueId a, ValueId b);
    ValueId add(ValueId a, ValueId b);                      // same shape
    ValueId add_row_bias(ValueId x, ValueId bias);          // [n x d] + [d]
    ValueId gelu(ValueId x);
    ValueId softmax_rows(ValueId x);
    ValueId rms_norm(ValueId x, ValueId scale);             // per-row RMS, learned scale [d]
    ValueId scale_const(ValueId x, double c);
    ValueId cross_entropy(ValueId logits, const std::vector<std::size_t>& targets,
                          const std::vector<bool>* mask = nullptr);  // mean NLL, scalar
    /// Multi-head causal self-attention over one sequence. q,k,v are [T x d].
    ValueId attention(ValueId q, ValueId k, ValueId v, std::size_t n_heads);
    ValueId embedding_rows(ValueId table, const std::vector<std::size_t>& ids);
    ValueId take_rows(ValueId x, const std::vector<std::size_t>& rows);
    /// Scatter rows of x into a zero [n_rows x d] tensor (accumulating).
    ValueId scatter_rows(ValueId x, const std::vector<std::size_t>& rows, std::size_t n_rows);
    /// Scale row i of x by w[i]; w is a flat [n] value.
    ValueId row_scale(ValueId x, ValueId w);
    ValueId take_elems(ValueId x, const std::vector<std::size_t>& idx);  // flat gather
    ValueId col_mean(ValueId x);                            // [n x e] -> [e]
    ValueId dot_const(ValueId x, const std::vector<double>& c);  // scalar
    ValueId mean_all(ValueId x);                            // scalar mean of all elems

    /// Renormalized selection weights (the mixture weights of the layer
    /// output). `groups[t]` lists the selected column indices of row t of
    /// `probs` whose mass enters the denominator; `emit[t]` lists, in order,
    /// the subset of those columns whose weight is emitted (routed experts).
    /// Output is a flat vector of all emitted weights, rows concatenated.
    ValueId select_renorm(ValueId probs, const std::vector<std::vector<std::size_t>>& groups,
                          const std::vector<std::vector<std::size_t>>& emit);

  private:
    ValueId push_(Tensor value, bool needs_grad, std::function<void(Graph&, int)> bw);
    Tensor& grad_ref_(ValueId id);
    std::vector<Node> nodes_;

    friend struct GraphOps;
};

}  // namespace dcmoe
