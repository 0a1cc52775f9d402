#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "uap/rng.hpp"
#include "uap/tensor.hpp"

namespace uap {

using NodeId = std::int32_t;

enum class Pad { valid, same };
enum class Mode { train, eval };

/// Reverse-mode autodiff over a linear tape of operation nodes. Nodes are
/// appended in topological order by construction; backward() walks the tape in
/// reverse. Tensors are immutable once recorded. All kernels are deterministic:
/// fixed loop order, no reductions whose result depends on scheduling.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf node. Set needs_grad when the caller intends to read d(root)/d(this).
    NodeId input(Tensor v, bool needs_grad = false);

    // --- elementwise and reductions ---
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId x, double c);
    NodeId sum(NodeId x);
    NodeId relu(NodeId x);  // subgradient at 0 is 0

    // --- network layers ---

    /// 2d cross-correlation, stride 1. x is (N,C,H,W), or (N,C,G,H,W) read as
    /// N x (C*G) channel planes. w is (OCE,ICE,kh,kw) with ICE equal to the
    /// effective channel count. With out_orientations=g>1 the OCE outputs are
    /// regrouped as (N, OCE/g, g, H', W'); otherwise output is (N,OCE,H',W').
    NodeId conv2d(NodeId x, NodeId w, Pad pad, std::size_t out_orientations = 1);

    /// x (N,C,...) plus per-channel bias b (C), broadcast over trailing dims.
    NodeId add_channel_bias(NodeId x, NodeId b);

    /// 2x2 max pooling, stride 2, over the last two dims (4d or 5d input).
    /// Requires even spatial extents. Gradient routes to the first maximum in
    /// scan order.
    NodeId maxpool2d(NodeId x);

    NodeId dense(NodeId x, NodeId w, NodeId b);  // (N,F) x (O,F) + (O) -> (N,O)

    NodeId softmax(NodeId x);  // rows of (N,K); max-subtracted, rows sum to 1

    /// Mean over the batch of -log(probs[i, labels[i]]).
    NodeId cross_entropy_mean(NodeId probs, std::vector<std::size_t> labels);

    /// Inverted dropout; identity in eval mode. Mask drawn from rng in element order.
    NodeId dropout(NodeId x, double p, Mode mode, Rng& rng);

    NodeId reshape(NodeId x, std::vector<std::size_t> shape);

    /// sum_n x[n, cols[n]] for (N,K) x. Used to pull per-class logit gradients.
    NodeId pick_sum(NodeId x, std::vector<std::size_t> cols);

    // --- p4 group helpers ---

    /// (OC,IC,k,k) -> (OC*4,IC,k,k); block r holds the kernels rotated by r*90
    /// degrees (exact index permutation).
    NodeId kernel_expand_z2(NodeId w);

    /// (OC,IC,4,k,k) -> (OC*4,IC*4,k,k); block r is rotated by r*90 degrees
    /// with the orientation axis cyclically shifted by r.
    NodeId kernel_expand_p4(NodeId w);

    /// max over the orientation axis: (N,C,4,H,W) -> (N,C,H,W).
    NodeId orientation_max(NodeId x);

    // --- differentiation ---

    /// Populate gradients of every needs_grad node reachable from root.
    /// root must be scalar. Calling twice without reset_grads() is an error.
    void backward(NodeId root);
    void reset_grads();

    // --- introspection ---
    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    const std::vector<double>& grad(NodeId id) const;
    std::size_t node_count() const { return nodes_.size(); }
    const char* op_name(NodeId id) const { return nodes_[id].op; }
    const std::vector<NodeId>& parents(NodeId id) const { return nodes_[id].parents; }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;  // empty until backward touches it
        std::vector<NodeId> parents;
        std::function<void(Tape&, NodeId)> backward;
        const char* op = "leaf";
        bool needs_grad = false;
    };

    NodeId emplace(Tensor value, std::vector<NodeId> parents, const char* op,
                   std::function<void(Tape&, NodeId)> bwd);
    std::vector<double>& grad_buf(NodeId id);
    bool wants_grad(NodeId id) const { return nodes_[id].needs_grad; }

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

/// Exact 90-degree counterclockwise index map for a square n x n grid:
/// destination (y,x) reads from source (x, n-1-y).
inline std::pair<std::size_t, std::size_t> rot90_src(std::size_t y, std::size_t x, std::size_t n) {
    return {x, n - 1 - y};
}

/// Max over coordinates of |autodiff - central difference| / max(1e-8, |central difference|)
/// for a scalar-valued graph builder f evaluated at x. Checks every coordinate.
double grad_check(const std::function<NodeId(Tape&, NodeId)>& f, const Tensor& x, double h);

/// Same, restricted to the given coordinates (for large inputs).
double grad_check_coords(const std::function<NodeId(Tape&, NodeId)>& f, const Tensor& x,
                         double h, const std::vector<std::size_t>& coords);

/// Compare a caller-supplied gradient against central differences of feval.
/// This is the primitive grad_check builds on; tests use it for negative controls.
double grad_check_compare(const std::vector<double>& analytic,
                          const std::function<double(const Tensor&)>& feval, const Tensor& x,
                          double h, const std::vector<std::size_t>& coords);

}  // namespace uap
