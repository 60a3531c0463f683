#pragma once

// Minimal reverse-mode automatic differentiation over dense 2-D matrices.
//
// A Tape owns every node created while building one computation. Nodes are
// appended in creation order, which is a valid topological order, so
// backward() simply walks the tape in reverse. Parameters live outside the
// tape; the tape materialises one leaf per Parameter and flushes that leaf's
// gradient into Parameter::grad when backward reaches it.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

namespace etegrec::ag {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool frozen = false;

  Parameter(std::string n, Matrix v);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;
  std::function<void(Node&)> backward;
};

// Lightweight handle to a node on a tape.
class Var {
 public:
  Var() = default;
  Var(Node* node, Tape* tape) : node_(node), tape_(tape) {}

  const Matrix& value() const { return node_->value; }
  // Gradient after Tape::backward; zeros if nothing reached this node.
  Matrix grad() const;
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;
  bool requires_grad() const { return node_->requires_grad; }
  bool valid() const { return node_ != nullptr; }

  Node* node() const { return node_; }
  Tape* tape() const { return tape_; }

 private:
  Node* node_ = nullptr;
  Tape* tape_ = nullptr;
};

class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  // A differentiable input that is not a Parameter (used by gradient checks).
  Var input(Matrix value);
  // Leaf bound to a parameter; cached so each parameter appears once per tape.
  Var param(Parameter& p);

  // Seeds d(root)/d(root) = 1; root must be 1x1.
  void backward(Var root);
  // Seeds arbitrary upstream gradients on several nodes at once.
  void backward(const std::vector<std::pair<Var, Matrix>>& seeds);

  // Used by op implementations.
  Var make(Matrix value, bool requires_grad, std::function<void(Node&)> backward);
  std::size_t size() const { return nodes_.size(); }

 private:
  void run_backward();

  bool grad_enabled_;
  std::vector<std::unique_ptr<Node>> nodes_;
  std::unordered_map<Parameter*, Node*> params_;
};

// Adds g into n->grad if the node takes gradients.
void accumulate(Node* n, const Matrix& g);

// ---- elementwise & shape ops ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);  // broadcast 1xC row over every row of a
Var relu(Var a);
Var detach(Var a);
Var transpose(Var a);
Var matmul(Var a, Var b);     // a * b
Var matmul_bt(Var a, Var b);  // a * b^T
Var gather_rows(Var a, const std::vector<int>& rows);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var a, Index start, Index count);

// ---- reductions ----
Var sum(Var a);
Var square_sum(Var a);  // sum of squares
// sum_i a(i, cols[i])
Var select_sum(Var a, const std::vector<int>& cols);

// ---- normalisation, softmax, logs ----
Var rms_norm(Var x, Var gain, double eps = 1e-6);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
// log(max(a, floor)); gradient is zero where the floor is active.
Var log_floor(Var a, double floor);
Var l2_normalize_rows(Var a, double eps = 1e-12);

// out(b, k) = -||v_b - e_k||^2
Var neg_sq_dist(Var v, Var codes);

// Inverted dropout; identity when p == 0 or rng is null.
Var dropout(Var a, double p, std::mt19937_64* rng);

// ---- segmented ops used by the sequence model ----
struct Segment {
  Index offset = 0;
  Index length = 0;
};

// Mean of rows within each segment, skipping rows whose mask entry is 0.
// Returns one row per segment.
Var segment_mean(Var x, const std::vector<Segment>& segments,
                 const std::vector<std::uint8_t>& row_mask);

struct AttentionLayout {
  std::vector<Segment> queries;  // one per example
  std::vector<Segment> keys;     // one per example, paired with queries
  std::vector<std::uint8_t> key_mask;  // per key row; empty means all valid
  int heads = 1;
  int head_dim = 1;
  bool causal = false;  // query j attends keys 0..j of its segment
};

// Fused multi-head scaled dot-product attention. q is (rows x heads*head_dim)
// in query-row space; k and v are in key-row space. Output has q's shape.
Var attention(Var q, Var k, Var v, const AttentionLayout& layout);

}  // namespace etegrec::ag
