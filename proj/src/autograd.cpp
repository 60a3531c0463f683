#include "etegrec/autograd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>

namespace etegrec::ag {

Parameter::Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
  grad = Matrix::Zero(value.rows(), value.cols());
}

Matrix Var::grad() const {
  if (node_->grad.size() == 0) return Matrix::Zero(rows(), cols());
  return node_->grad;
}

double Var::item() const {
  if (rows() != 1 || cols() != 1) throw std::logic_error("item() on a non-scalar");
  return node_->value(0, 0);
}

void accumulate(Node* n, const Matrix& g) {
  if (!n->requires_grad) return;
  if (n->grad.size() == 0) {
    n->grad = g;
  } else {
    n->grad += g;
  }
}

Var Tape::make(Matrix value, bool requires_grad, std::function<void(Node&)> backward) {
  auto node = std::make_unique<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad && grad_enabled_;
  if (node->requires_grad) node->backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(nodes_.back().get(), this);
}

Var Tape::constant(Matrix value) { return make(std::move(value), false, nullptr); }

Var Tape::input(Matrix value) { return make(std::move(value), true, nullptr); }

Var Tape::param(Parameter& p) {
  if (auto it = params_.find(&p); it != params_.end()) return Var(it->second, this);
  Parameter* target = &p;
  Var v = make(p.value, !p.frozen, [target](Node& self) {
    if (target->grad.size() == 0) target->zero_grad();
    target->grad += self.grad;
  });
  params_.emplace(&p, v.node());
  return v;
}

void Tape::backward(Var root) {
  if (root.rows() != 1 || root.cols() != 1) throw std::logic_error("backward() needs a scalar root");
  backward({{root, Matrix::Ones(1, 1)}});
}

void Tape::backward(const std::vector<std::pair<Var, Matrix>>& seeds) {
  if (!grad_enabled_) throw std::logic_error("backward() on a no-grad tape");
  for (const auto& [v, g] : seeds) accumulate(v.node(), g);
  run_backward();
}

void Tape::run_backward() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node& n = **it;
    if (n.requires_grad && n.backward && n.grad.size() != 0) n.backward(n);
  }
}

namespace {

Tape& tape_of(Var a) { return *a.tape(); }

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

}  // namespace

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  Node* na = a.node();
  Node* nb = b.node();
  return tape_of(a).make(a.value() + b.value(), na->requires_grad || nb->requires_grad,
                         [na, nb](Node& self) {
                           accumulate(na, self.grad);
                           accumulate(nb, self.grad);
                         });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  Node* na = a.node();
  Node* nb = b.node();
  return tape_of(a).make(a.value() - b.value(), na->requires_grad || nb->requires_grad,
                         [na, nb](Node& self) {
                           accumulate(na, self.grad);
                           if (nb->requires_grad) accumulate(nb, -self.grad);
                         });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  Node* na = a.node();
  Node* nb = b.node();
  return tape_of(a).make(a.value().cwiseProduct(b.value()), na->requires_grad || nb->requires_grad,
                         [na, nb](Node& self) {
                           if (na->requires_grad) accumulate(na, self.grad.cwiseProduct(nb->value));
                           if (nb->requires_grad) accumulate(nb, self.grad.cwiseProduct(na->value));
                         });
}

Var scale(Var a, double s) {
  Node* na = a.node();
  return tape_of(a).make(a.value() * s, na->requires_grad,
                         [na, s](Node& self) { accumulate(na, self.grad * s); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  Node* na = a.node();
  Node* nr = row.node();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return tape_of(a).make(std::move(out), na->requires_grad || nr->requires_grad,
                         [na, nr](Node& self) {
                           accumulate(na, self.grad);
                           if (nr->requires_grad) accumulate(nr, self.grad.colwise().sum());
                         });
}

Var relu(Var a) {
  Node* na = a.node();
  return tape_of(a).make(a.value().cwiseMax(0.0), na->requires_grad, [na](Node& self) {
    Matrix g = (na->value.array() > 0.0).select(self.grad, 0.0);
    accumulate(na, g);
  });
}

Var detach(Var a) { return tape_of(a).constant(a.value()); }

Var transpose(Var a) {
  Node* na = a.node();
  return tape_of(a).make(a.value().transpose(), na->requires_grad,
                         [na](Node& self) { accumulate(na, self.grad.transpose()); });
}

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  Matrix out = a.value() * b.value();
  return tape_of(a).make(std::move(out), na->requires_grad || nb->requires_grad,
                         [na, nb](Node& self) {
                           if (na->requires_grad) accumulate(na, self.grad * nb->value.transpose());
                           if (nb->requires_grad) accumulate(nb, na->value.transpose() * self.grad);
                         });
}

Var matmul_bt(Var a, Var b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_bt: inner dimension mismatch");
  Node* na = a.node();
  Node* nb = b.node();
  Matrix out = a.value() * b.value().transpose();
  return tape_of(a).make(std::move(out), na->requires_grad || nb->requires_grad,
                         [na, nb](Node& self) {
                           if (na->requires_grad) accumulate(na, self.grad * nb->value);
                           if (nb->requires_grad) accumulate(nb, self.grad.transpose() * na->value);
                         });
}

Var gather_rows(Var a, const std::vector<int>& rows) {
  Matrix out(static_cast<Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw std::out_of_range("gather_rows: row index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(rows[i]);
  }
  Node* na = a.node();
  return tape_of(a).make(std::move(out), na->requires_grad, [na, rows](Node& self) {
    Matrix g = Matrix::Zero(na->value.rows(), na->value.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) g.row(rows[i]) += self.grad.row(static_cast<Index>(i));
    accumulate(na, g);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  Index total = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.cols() != parts.front().cols()) throw std::invalid_argument("concat_rows: column mismatch");
    total += p.rows();
    needs_grad = needs_grad || p.requires_grad();
  }
  Matrix out(total, parts.front().cols());
  std::vector<Node*> nodes;
  Index offset = 0;
  for (const auto& p : parts) {
    out.middleRows(offset, p.rows()) = p.value();
    offset += p.rows();
    nodes.push_back(p.node());
  }
  return tape_of(parts.front()).make(std::move(out), needs_grad, [nodes](Node& self) {
    Index off = 0;
    for (Node* n : nodes) {
      const Index r = n->value.rows();
      if (n->requires_grad) accumulate(n, self.grad.middleRows(off, r));
      off += r;
    }
  });
}

Var slice_rows(Var a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
  Node* na = a.node();
  return tape_of(a).make(a.value().middleRows(start, count), na->requires_grad,
                         [na, start, count](Node& self) {
                           Matrix g = Matrix::Zero(na->value.rows(), na->value.cols());
                           g.middleRows(start, count) = self.grad;
                           accumulate(na, g);
                         });
}

Var sum(Var a) {
  Node* na = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return tape_of(a).make(std::move(out), na->requires_grad, [na](Node& self) {
    accumulate(na, Matrix::Constant(na->value.rows(), na->value.cols(), self.grad(0, 0)));
  });
}

Var square_sum(Var a) {
  Node* na = a.node();
  Matrix out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return tape_of(a).make(std::move(out), na->requires_grad, [na](Node& self) {
    accumulate(na, na->value * (2.0 * self.grad(0, 0)));
  });
}

Var select_sum(Var a, const std::vector<int>& cols) {
  if (static_cast<Index>(cols.size()) != a.rows()) throw std::invalid_argument("select_sum: need one column per row");
  double total = 0.0;
  for (Index i = 0; i < a.rows(); ++i) {
    if (cols[i] < 0 || cols[i] >= a.cols()) throw std::out_of_range("select_sum: column out of range");
    total += a.value()(i, cols[i]);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  Node* na = a.node();
  return tape_of(a).make(std::move(out), na->requires_grad, [na, cols](Node& self) {
    Matrix g = Matrix::Zero(na->value.rows(), na->value.cols());
    for (Index i = 0; i < g.rows(); ++i) g(i, cols[i]) = self.grad(0, 0);
    accumulate(na, g);
  });
}

Var rms_norm(Var x, Var gain, double eps) {
  if (gain.rows() != 1 || gain.cols() != x.cols()) throw std::invalid_argument("rms_norm: gain shape");
  const Index n = x.cols();
  Eigen::VectorXd inv(x.rows());
  Matrix out(x.rows(), n);
  for (Index i = 0; i < x.rows(); ++i) {
    const double ms = x.value().row(i).squaredNorm() / static_cast<double>(n);
    inv(i) = 1.0 / std::sqrt(ms + eps);
    out.row(i) = x.value().row(i).cwiseProduct(gain.value().row(0)) * inv(i);
  }
  Node* nx = x.node();
  Node* ng = gain.node();
  return tape_of(x).make(std::move(out), nx->requires_grad || ng->requires_grad,
                         [nx, ng, inv, n](Node& self) {
                           const Matrix& xv = nx->value;
                           const auto g = ng->value.row(0);
                           if (nx->requires_grad) {
                             Matrix dx(xv.rows(), n);
                             for (Index i = 0; i < xv.rows(); ++i) {
                               const double dot = self.grad.row(i).cwiseProduct(g).dot(xv.row(i));
                               const double s = inv(i);
                               dx.row(i) = self.grad.row(i).cwiseProduct(g) * s -
                                           xv.row(i) * (s * s * s * dot / static_cast<double>(n));
                             }
                             accumulate(nx, dx);
                           }
                           if (ng->requires_grad) {
                             Matrix dg = Matrix::Zero(1, n);
                             for (Index i = 0; i < xv.rows(); ++i) {
                               dg.row(0) += self.grad.row(i).cwiseProduct(xv.row(i)) * inv(i);
                             }
                             accumulate(ng, dg);
                           }
                         });
}

namespace {

Matrix softmax_values(const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    out.row(i) = (a.row(i).array() - m).exp();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace

Var softmax_rows(Var a) {
  Node* na = a.node();
  Matrix out = softmax_values(a.value());
  return tape_of(a).make(out, na->requires_grad, [na](Node& self) {
    const Matrix& y = self.value;
    Matrix dx(y.rows(), y.cols());
    for (Index i = 0; i < y.rows(); ++i) {
      const double dot = self.grad.row(i).dot(y.row(i));
      dx.row(i) = y.row(i).cwiseProduct((self.grad.row(i).array() - dot).matrix());
    }
    accumulate(na, dx);
  });
}

Var log_softmax_rows(Var a) {
  Node* na = a.node();
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    const double m = a.value().row(i).maxCoeff();
    const double lse = m + std::log((a.value().row(i).array() - m).exp().sum());
    out.row(i) = a.value().row(i).array() - lse;
  }
  return tape_of(a).make(std::move(out), na->requires_grad, [na](Node& self) {
    Matrix dx(self.value.rows(), self.value.cols());
    for (Index i = 0; i < dx.rows(); ++i) {
      const double total = self.grad.row(i).sum();
      dx.row(i) = self.grad.row(i) - self.value.row(i).array().exp().matrix() * total;
    }
    accumulate(na, dx);
  });
}

Var log_floor(Var a, double floor) {
  Node* na = a.node();
  Matrix out = a.value().cwiseMax(floor).array().log().matrix();
  return tape_of(a).make(std::move(out), na->requires_grad, [na, floor](Node& self) {
    Matrix dx = (na->value.array() > floor).select(self.grad.array() / na->value.array(), 0.0);
    accumulate(na, dx);
  });
}

Var l2_normalize_rows(Var a, double eps) {
  Node* na = a.node();
  Eigen::VectorXd norms(a.rows());
  Matrix out(a.rows(), a.cols());
  for (Index i = 0; i < a.rows(); ++i) {
    norms(i) = std::max(a.value().row(i).norm(), eps);
    out.row(i) = a.value().row(i) / norms(i);
  }
  return tape_of(a).make(std::move(out), na->requires_grad, [na, norms](Node& self) {
    Matrix dx(self.value.rows(), self.value.cols());
    for (Index i = 0; i < dx.rows(); ++i) {
      const double dot = self.grad.row(i).dot(self.value.row(i));
      dx.row(i) = (self.grad.row(i) - self.value.row(i) * dot) / norms(i);
    }
    accumulate(na, dx);
  });
}

Var neg_sq_dist(Var v, Var codes) {
  if (v.cols() != codes.cols()) throw std::invalid_argument("neg_sq_dist: dimension mismatch");
  const Matrix& vv = v.value();
  const Matrix& ev = codes.value();
  Matrix out(vv.rows(), ev.rows());
  for (Index b = 0; b < vv.rows(); ++b) {
    for (Index k = 0; k < ev.rows(); ++k) {
      double d = 0.0;
      for (Index j = 0; j < vv.cols(); ++j) {
        const double diff = vv(b, j) - ev(k, j);
        d += diff * diff;
      }
      out(b, k) = -d;
    }
  }
  Node* nv = v.node();
  Node* ne = codes.node();
  return tape_of(v).make(std::move(out), nv->requires_grad || ne->requires_grad,
                         [nv, ne](Node& self) {
                           const Matrix& g = self.grad;
                           const Matrix& vv = nv->value;
                           const Matrix& ev = ne->value;
                           if (nv->requires_grad) {
                             const Matrix ge = g * ev;
                             Matrix dv = 2.0 * (ge.array() - vv.array().colwise() * g.rowwise().sum().array()).matrix();
                             accumulate(nv, dv);
                           }
                           if (ne->requires_grad) {
                             Eigen::RowVectorXd colsum = g.colwise().sum();
                             Matrix de = (g.transpose() * vv -
                                          Matrix(ev.array().colwise() * colsum.transpose().array())) * 2.0;
                             accumulate(ne, de);
                           }
                         });
}

Var dropout(Var a, double p, std::mt19937_64* rng) {
  if (p <= 0.0 || rng == nullptr) return a;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  Matrix mask(a.rows(), a.cols());
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(*rng) ? 1.0 / (1.0 - p) : 0.0;
  Node* na = a.node();
  return tape_of(a).make(a.value().cwiseProduct(mask), na->requires_grad,
                         [na, mask](Node& self) { accumulate(na, self.grad.cwiseProduct(mask)); });
}

Var segment_mean(Var x, const std::vector<Segment>& segments, const std::vector<std::uint8_t>& row_mask) {
  const bool masked = !row_mask.empty();
  if (masked && static_cast<Index>(row_mask.size()) != x.rows()) {
    throw std::invalid_argument("segment_mean: mask length differs from row count");
  }
  Matrix out = Matrix::Zero(static_cast<Index>(segments.size()), x.cols());
  std::vector<double> counts(segments.size(), 0.0);
  for (std::size_t s = 0; s < segments.size(); ++s) {
    for (Index r = segments[s].offset; r < segments[s].offset + segments[s].length; ++r) {
      if (masked && !row_mask[r]) continue;
      out.row(static_cast<Index>(s)) += x.value().row(r);
      counts[s] += 1.0;
    }
    if (counts[s] == 0.0) throw std::invalid_argument("segment_mean: fully masked segment");
    out.row(static_cast<Index>(s)) /= counts[s];
  }
  Node* nx = x.node();
  return tape_of(x).make(std::move(out), nx->requires_grad,
                         [nx, segments, row_mask, counts, masked](Node& self) {
                           Matrix g = Matrix::Zero(nx->value.rows(), nx->value.cols());
                           for (std::size_t s = 0; s < segments.size(); ++s) {
                             for (Index r = segments[s].offset; r < segments[s].offset + segments[s].length; ++r) {
                               if (masked && !row_mask[r]) continue;
                               g.row(r) = self.grad.row(static_cast<Index>(s)) / counts[s];
                             }
                           }
                           accumulate(nx, g);
                         });
}

Var attention(Var q, Var k, Var v, const AttentionLayout& layout) {
  const Index width = static_cast<Index>(layout.heads) * layout.head_dim;
  if (q.cols() != width || k.cols() != width || v.cols() != width) {
    throw std::invalid_argument("attention: projection width != heads * head_dim");
  }
  if (layout.queries.size() != layout.keys.size()) throw std::invalid_argument("attention: segment count mismatch");
  if (!layout.key_mask.empty() && static_cast<Index>(layout.key_mask.size()) != k.rows()) {
    throw std::invalid_argument("attention: key mask length mismatch");
  }
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(layout.head_dim));
  const double neg_inf = -std::numeric_limits<double>::infinity();
  const Index hd = layout.head_dim;

  Matrix out = Matrix::Zero(q.rows(), width);
  // probabilities per (segment, head), kept for the backward pass
  auto probs = std::make_shared<std::vector<Matrix>>();
  probs->reserve(layout.queries.size() * layout.heads);

  for (std::size_t s = 0; s < layout.queries.size(); ++s) {
    const Segment qs = layout.queries[s];
    const Segment ks = layout.keys[s];
    for (int h = 0; h < layout.heads; ++h) {
      const Index col = h * hd;
      Matrix scores = q.value().block(qs.offset, col, qs.length, hd) *
                      k.value().block(ks.offset, col, ks.length, hd).transpose() * scale_factor;
      for (Index i = 0; i < qs.length; ++i) {
        for (Index j = 0; j < ks.length; ++j) {
          const bool masked_key = !layout.key_mask.empty() && !layout.key_mask[ks.offset + j];
          if (masked_key || (layout.causal && j > i)) scores(i, j) = neg_inf;
        }
        const double m = scores.row(i).maxCoeff();
        if (m == neg_inf) {
          scores.row(i).setZero();
          continue;
        }
        scores.row(i) = (scores.row(i).array() - m).exp();
        scores.row(i) /= scores.row(i).sum();
      }
      out.block(qs.offset, col, qs.length, hd) = scores * v.value().block(ks.offset, col, ks.length, hd);
      probs->push_back(std::move(scores));
    }
  }

  Node* nq = q.node();
  Node* nk = k.node();
  Node* nv = v.node();
  const bool needs = nq->requires_grad || nk->requires_grad || nv->requires_grad;
  return tape_of(q).make(std::move(out), needs, [nq, nk, nv, layout, probs, scale_factor, hd](Node& self) {
    Matrix dq = Matrix::Zero(nq->value.rows(), nq->value.cols());
    Matrix dk = Matrix::Zero(nk->value.rows(), nk->value.cols());
    Matrix dv = Matrix::Zero(nv->value.rows(), nv->value.cols());
    std::size_t idx = 0;
    for (std::size_t s = 0; s < layout.queries.size(); ++s) {
      const Segment qs = layout.queries[s];
      const Segment ks = layout.keys[s];
      for (int h = 0; h < layout.heads; ++h, ++idx) {
        const Index col = h * hd;
        const Matrix& p = (*probs)[idx];
        const auto d_out = self.grad.block(qs.offset, col, qs.length, hd);
        const auto vblk = nv->value.block(ks.offset, col, ks.length, hd);
        dv.block(ks.offset, col, ks.length, hd) += p.transpose() * d_out;
        Matrix dp = d_out * vblk.transpose();
        Matrix ds(p.rows(), p.cols());
        for (Index i = 0; i < p.rows(); ++i) {
          const double dot = dp.row(i).dot(p.row(i));
          ds.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
        }
        dq.block(qs.offset, col, qs.length, hd) += ds * nk->value.block(ks.offset, col, ks.length, hd) * scale_factor;
        dk.block(ks.offset, col, ks.length, hd) +=
            ds.transpose() * nq->value.block(qs.offset, col, qs.length, hd) * scale_factor;
      }
    }
    accumulate(nq, dq);
    accumulate(nk, dk);
    accumulate(nv, dv);
  });
}

}  // namespace etegrec::ag
