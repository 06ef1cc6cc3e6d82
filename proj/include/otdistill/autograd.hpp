#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "otdistill/matrix.hpp"

namespace otdistill::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of a per-forward-pass gradient graph. Leaves are parameters or
// constants; interior nodes record the op, the parents, and a closure that
// scatters this node's gradient back to them. A graph is built fresh for
// every training step and freed once the loss handle goes out of scope;
// parameter leaves outlive graphs and accumulate gradients across backward
// calls until the optimizer clears them.
struct Node {
    Matrix value;
    Matrix grad;  // same shape as value, zero-initialized
    bool requires_grad = false;
    bool backward_done = false;
    const char* op = "leaf";
    std::string name;  // set for parameters, used in diagnostics
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backprop;

    bool is_leaf() const { return parents.empty(); }
    double scalar() const;  // value of a 1x1 node
};

// Trainable leaf.
NodePtr leaf(Matrix value, std::string name = "");
// Non-trainable leaf; gradients never flow into it.
NodePtr constant(Matrix value);
// Detached copy of an existing node's value.
NodePtr detach(const NodePtr& a);

// --- core ops -------------------------------------------------------------

NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr transpose(const NodePtr& a);

// Elementwise ops. The right operand may broadcast: 1x1 scalar, bx1 column
// against a bxm left operand, or 1xm row against a bxm left operand.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr div(const NodePtr& a, const NodePtr& b);

NodePtr scalar_mul(const NodePtr& a, double s);
NodePtr scalar_add(const NodePtr& a, double s);

NodePtr relu(const NodePtr& a);
NodePtr tanh(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr log(const NodePtr& a);
NodePtr square(const NodePtr& a);

NodePtr sum_all(const NodePtr& a);    // 1x1
NodePtr mean_all(const NodePtr& a);   // 1x1
NodePtr row_sums(const NodePtr& a);   // bx1, sum across each row
NodePtr col_means(const NodePtr& a);  // 1xm, mean down each column

// bx1 column of per-row Euclidean norms. A row of exact zeros is rejected
// (its cosine normalization would divide by zero).
NodePtr rowwise_l2norm(const NodePtr& a);

// out[i][j] = squared Euclidean distance between row i of a and row j of b.
// Summed directly per pair, so every entry is >= 0 even in floating point
// (the Gram-matrix expansion is not). a: n_a x k, b: n_b x k -> n_a x n_b.
NodePtr pairwise_sqdist(const NodePtr& a, const NodePtr& b);

NodePtr concat_cols(const std::vector<NodePtr>& parts);

// Column gather: out[:, j] = a[:, indices[j]]. Differentiable; the backward
// pass scatter-adds into the selected source columns.
NodePtr gather_cols(const NodePtr& a, const std::vector<std::size_t>& indices);

NodePtr softmax_rows(const NodePtr& a);

// Mean cross-entropy over the batch with a log-sum-exp-stable softmax fused
// in. labels[i] is the class index of row i.
NodePtr softmax_cross_entropy(const NodePtr& logits, const std::vector<std::size_t>& labels);

// --- backward -------------------------------------------------------------

// Reverse-mode pass from a scalar loss. Accumulates into every reachable
// leaf that requires gradients; interior-node gradients are working storage
// owned by the pass. Calling backward twice on the same node is rejected.
void backward(const NodePtr& loss);

void zero_grad(const std::vector<NodePtr>& params);

}  // namespace otdistill::ag
