#pragma once

#include "etegrec/autograd.hpp"

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

namespace etegrec::nn {

using ag::Matrix;
using ag::Parameter;
using ag::Tape;
using ag::Var;

// Owns the parameters of one model component. Order of registration is the
// serialisation order and the optimizer-state order.
class ParameterSet {
 public:
  Parameter& add(const std::string& name, Matrix init);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter*> all();
  std::vector<const Parameter*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  void set_frozen(bool frozen);
  // FNV-1a over names, shapes and raw parameter bytes.
  std::uint64_t hash() const;
  double grad_norm() const;
  bool all_finite() const;
  // Copies values from a set with identical names and shapes.
  void assign_values(const ParameterSet& other);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

Matrix uniform_init(ag::Index rows, ag::Index cols, double bound, std::mt19937_64& rng);
Matrix normal_init(ag::Index rows, ag::Index cols, double stddev, std::mt19937_64& rng);

// y = x W + b, W stored as (in x out).
struct Linear {
  Parameter* weight = nullptr;
  Parameter* bias = nullptr;

  static Linear create(ParameterSet& params, const std::string& name, int in, int out, std::mt19937_64& rng,
                       bool with_bias = true);
  Var forward(Tape& tape, Var x) const;
  int in_features() const { return static_cast<int>(weight->value.rows()); }
  int out_features() const { return static_cast<int>(weight->value.cols()); }
};

// Feed-forward stack with ReLU between layers (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  static Mlp create(ParameterSet& params, const std::string& name, int in, const std::vector<int>& hidden, int out,
                    std::mt19937_64& rng);
  Var forward(Tape& tape, Var x) const;
};

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

// Decoupled-weight-decay Adam over one ParameterSet. Frozen parameters are
// skipped entirely (neither decayed nor moved).
class AdamW {
 public:
  explicit AdamW(AdamWOptions options = {}) : options_(options) {}

  void step(ParameterSet& params);
  void set_lr(double lr) { options_.lr = lr; }
  const AdamWOptions& options() const { return options_; }
  std::int64_t steps() const { return step_; }

  // Moment buffers, exposed for checkpointing.
  std::vector<Matrix>& first_moments() { return m_; }
  std::vector<Matrix>& second_moments() { return v_; }
  void set_steps(std::int64_t s) { step_ = s; }
  void ensure_state(const ParameterSet& params);

 private:
  AdamWOptions options_;
  std::int64_t step_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

}  // namespace etegrec::nn
