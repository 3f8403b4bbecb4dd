#pragma once

#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "micromoe/tensor.hpp"

namespace micromoe {

/// Raised when a kernel produces a NaN/Inf or a loss diverges.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Handle to a node on a Graph tape.
struct Val {
  int id = -1;
};

/// Reverse-mode tape over dense tensors.
///
/// Primitives append nodes in topological order (inputs always precede the
/// ops that use them); backward() replays the tape once in reverse, so for
/// fixed inputs both values and gradients are bitwise reproducible. Every
/// primitive checks its output for NaN/Inf and raises NumericalError naming
/// the producing op.
class Graph {
 public:
  /// Constant leaf; never receives a gradient.
  Val constant(Tensor t);

  /// Leaf bound to a parameter tensor. Repeated calls with the same tensor
  /// return the same node. After backward(), the node's gradient is
  /// accumulated into the tensor's grad buffer when requires_grad is set.
  Val param(const std::shared_ptr<Tensor>& p);

  // Elementwise and broadcast arithmetic.
  Val add(Val a, Val b);
  Val sub(Val a, Val b);
  Val mul(Val a, Val b);
  Val scale(Val a, double c);
  Val add_rowvec(Val a, Val bias);  // bias shape (1, n), broadcast over rows
  Val mul_rowvec(Val a, Val scale); // scale shape (1, n), broadcast over rows

  // Linear algebra.
  Val matmul(Val a, Val b);
  Val transpose(Val a);

  // Nonlinearities.
  Val gelu(Val a);  // exact erf form
  Val relu(Val a);

  // Row-structured ops.
  Val softmax_rows(Val a);
  Val layer_norm(Val a, Val gain, Val bias);  // per-row, eps 1e-5
  Val mean_rows(Val a);                       // (m,n) -> (1,n)
  Val sum_all(Val a);                         // (m,n) -> scalar

  // Indexing. Index vectors are captured by value; out-of-range ids throw.
  Val embedding_rows(Val table, const std::vector<int>& ids);
  Val concat_rows(Val a, Val b);
  Val slice_cols(Val a, std::size_t from, std::size_t to);
  Val concat_cols(const std::vector<Val>& parts);
  Val gather_rows(Val a, const std::vector<std::size_t>& idx);
  Val scatter_rows(Val a, const std::vector<std::size_t>& idx,
                   std::size_t out_rows);
  /// out[i][j] = a[i][cols[i][j]]; cols must be rectangular.
  Val gather_cols_per_row(Val a, const std::vector<std::vector<int>>& cols);
  /// out[k][0] = a[r[k]][c[k]].
  Val gather_cells(Val a, const std::vector<std::size_t>& r,
                   const std::vector<std::size_t>& c);
  /// out[i][j] = a[i][j] * w[i][0].
  Val rowwise_scale(Val a, Val w);

  /// Sum over (row, token) pairs of -log softmax(logits[row])[token].
  Val nll_sum(Val logits,
              const std::vector<std::pair<std::size_t, int>>& targets);

  const Tensor& value(Val v) const { return node(v).value; }
  const Tensor& grad(Val v) const;

  /// Backpropagates from a scalar loss. Each reachable node is visited
  /// exactly once, in reverse tape order; parameter leaves accumulate into
  /// their tensor's grad buffer.
  void backward(Val loss);

  /// Smallest |x| seen at a ReLU input during forward evaluation; infinity
  /// when no ReLU ran. Used by the finite-difference checker to skip
  /// evaluations that straddle a kink.
  double min_kink_distance() const { return kink_dist_; }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor gradbuf;  // zero-size until first contribution
    std::vector<int> parents;
    std::function<void(Graph&, int)> back;  // null for leaves
    const char* op = "";
    std::shared_ptr<Tensor> bound;  // parameter leaves only
  };

  Node& node(Val v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Val v) const {
    return nodes_[static_cast<std::size_t>(v.id)];
  }
  Tensor& grad_ref(int id);
  bool has_grad(int id) const {
    return nodes_[static_cast<std::size_t>(id)].gradbuf.size() > 0;
  }
  Val push(Node n, const char* op);

  std::deque<Node> nodes_;  // deque: references stay valid as nodes append
  std::unordered_map<const Tensor*, int> param_ids_;
  double kink_dist_ = 1.0 / 0.0;
  bool backward_done_ = false;
};

// Raw matmul kernels shared by forward and backward passes.
// c (m,n) += or = a * b with the given transposition pattern.
void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate);
void mm_nt(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate);
void mm_tn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate);

}  // namespace micromoe
