#include "etegrec/nn.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace etegrec::nn {

Parameter& ParameterSet::add(const std::string& name, Matrix init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
  return *params_.back();
}

bool ParameterSet::contains(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return true;
  }
  return false;
}

Parameter& ParameterSet::get(const std::string& name) {
  for (auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

const Parameter& ParameterSet::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p->name == name) return *p;
  }
  throw std::out_of_range("unknown parameter: " + name);
}

std::vector<Parameter*> ParameterSet::all() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

std::vector<const Parameter*> ParameterSet::all() const {
  std::vector<const Parameter*> out;
  for (const auto& p : params_) out.push_back(p.get());
  return out;
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void ParameterSet::set_frozen(bool frozen) {
  for (auto& p : params_) p->frozen = frozen;
}

namespace {

constexpr std::uint64_t kFnvOffset = 1469598103934665603ULL;
constexpr std::uint64_t kFnvPrime = 1099511628211ULL;

void fnv_mix(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= kFnvPrime;
  }
}

}  // namespace

std::uint64_t ParameterSet::hash() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& p : params_) {
    fnv_mix(h, p->name.data(), p->name.size());
    const std::int64_t shape[2] = {p->value.rows(), p->value.cols()};
    fnv_mix(h, shape, sizeof(shape));
    fnv_mix(h, p->value.data(), sizeof(double) * static_cast<std::size_t>(p->value.size()));
  }
  return h;
}

void ParameterSet::assign_values(const ParameterSet& other) {
  if (other.params_.size() != params_.size()) throw std::invalid_argument("parameter sets differ in size");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Parameter& src = *other.params_[i];
    Parameter& dst = *params_[i];
    if (src.name != dst.name || src.value.rows() != dst.value.rows() || src.value.cols() != dst.value.cols()) {
      throw std::invalid_argument("parameter mismatch at " + dst.name);
    }
    dst.value = src.value;
  }
}

double ParameterSet::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_) {
    if (!p->frozen && p->grad.size() != 0) sq += p->grad.squaredNorm();
  }
  return std::sqrt(sq);
}

bool ParameterSet::all_finite() const {
  for (const auto& p : params_) {
    if (!p->value.allFinite()) return false;
  }
  return true;
}

Matrix uniform_init(ag::Index rows, ag::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Matrix m(rows, cols);
  for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Matrix normal_init(ag::Index rows, ag::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Matrix m(rows, cols);
  for (ag::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

Linear Linear::create(ParameterSet& params, const std::string& name, int in, int out, std::mt19937_64& rng,
                      bool with_bias) {
  Linear l;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  l.weight = &params.add(name + ".weight", uniform_init(in, out, bound, rng));
  if (with_bias) l.bias = &params.add(name + ".bias", Matrix::Zero(1, out));
  return l;
}

Var Linear::forward(Tape& tape, Var x) const {
  Var y = ag::matmul(x, tape.param(*weight));
  if (bias != nullptr) y = ag::add_row(y, tape.param(*bias));
  return y;
}

Mlp Mlp::create(ParameterSet& params, const std::string& name, int in, const std::vector<int>& hidden, int out,
                std::mt19937_64& rng) {
  Mlp m;
  int prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (hidden[i] <= 0) throw std::invalid_argument("MLP widths must be positive");
    m.layers.push_back(Linear::create(params, name + "." + std::to_string(i), prev, hidden[i], rng));
    prev = hidden[i];
  }
  m.layers.push_back(Linear::create(params, name + "." + std::to_string(hidden.size()), prev, out, rng));
  return m;
}

Var Mlp::forward(Tape& tape, Var x) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = layers[i].forward(tape, x);
    if (i + 1 < layers.size()) x = ag::relu(x);
  }
  return x;
}

void AdamW::ensure_state(const ParameterSet& params) {
  if (m_.size() == params.size()) return;
  m_.clear();
  v_.clear();
  for (const Parameter* p : params.all()) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::step(ParameterSet& params) {
  ensure_state(params);
  ++step_;
  double clip = 1.0;
  if (options_.clip_norm > 0.0) {
    const double norm = params.grad_norm();
    if (norm > options_.clip_norm) clip = options_.clip_norm / norm;
  }
  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
  auto all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    Parameter& p = *all[i];
    if (p.frozen) continue;
    if (p.grad.size() == 0) p.zero_grad();
    const Matrix g = p.grad * clip;
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * g;
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * g.cwiseProduct(g);
    p.value *= (1.0 - options_.lr * options_.weight_decay);
    p.value.array() -= options_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + options_.eps);
  }
}

}  // namespace etegrec::nn
