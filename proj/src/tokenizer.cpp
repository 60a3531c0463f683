#include "etegrec/tokenizer.hpp"

#include "etegrec/errors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace etegrec::tokenizer {

void TokenizerConfig::validate() const {
  if (levels < 1) throw ConfigError("tokenizer levels must be >= 1");
  if (codebook_size < 2) throw ConfigError("codebook size must be >= 2");
  if (code_dim < 1 || input_dim < 1) throw ConfigError("tokenizer dimensions must be positive");
  for (int h : hidden) {
    if (h < 1) throw ConfigError("tokenizer hidden widths must be positive");
  }
  if (beta < 0.0) throw ConfigError("beta must be non-negative");
  if (suffix_capacity < 1) throw ConfigError("suffix capacity must be >= 1");
}

Tokenizer::Tokenizer(TokenizerConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(seed);
  encoder_ = nn::Mlp::create(params_, "encoder", config_.input_dim, config_.hidden, config_.code_dim, rng);
  std::vector<int> reversed(config_.hidden.rbegin(), config_.hidden.rend());
  decoder_ = nn::Mlp::create(params_, "decoder", config_.code_dim, reversed, config_.input_dim, rng);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config_.code_dim));
  for (int l = 0; l < config_.levels; ++l) {
    codebooks_.push_back(&params_.add("codebook." + std::to_string(l),
                                      nn::normal_init(config_.codebook_size, config_.code_dim, stddev, rng)));
  }
}

Var Tokenizer::encode(Tape& tape, Var z) const {
  if (z.cols() != config_.input_dim) throw std::invalid_argument("encode: input has wrong dimension");
  if (!z.value().allFinite()) throw std::invalid_argument("encode: non-finite input");
  return encoder_.forward(tape, z);
}

QuantizedBatch Tokenizer::quantize(Tape& tape, Var r, const QuantizeOptions& options) const {
  if (r.cols() != config_.code_dim) throw std::invalid_argument("quantize: latent has wrong dimension");
  const auto batch = static_cast<std::size_t>(r.rows());
  if (options.forced_tokens != nullptr && options.forced_tokens->size() != batch) {
    throw std::invalid_argument("quantize: forced tokens must cover every row");
  }
  QuantizedBatch out;
  out.tokens.assign(batch, std::vector<int>(static_cast<std::size_t>(config_.levels), 0));
  Var v = r;
  for (int l = 0; l < config_.levels; ++l) {
    Var codes = tape.param(*codebooks_[static_cast<std::size_t>(l)]);
    Var neg_dist = ag::neg_sq_dist(v, codes);
    Var dist = ag::softmax_rows(neg_dist);
    std::vector<int> picked(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      int best = 0;
      if (options.forced_tokens != nullptr) {
        best = (*options.forced_tokens)[b].at(static_cast<std::size_t>(l));
      } else {
        const auto row = neg_dist.value().row(static_cast<ag::Index>(b));
        for (int k = 1; k < row.size(); ++k) {
          if (row(k) > row(best)) best = k;
        }
      }
      picked[b] = best;
      out.tokens[b][static_cast<std::size_t>(l)] = best;
    }
    Var sel = ag::gather_rows(codes, picked);
    out.residuals.push_back(v);
    out.selected.push_back(sel);
    out.distributions.push_back(dist);
    out.quantized = l == 0 ? sel : ag::add(out.quantized, sel);
    v = ag::sub(v, options.detach_chain ? ag::detach(sel) : sel);
  }
  return out;
}

Var Tokenizer::reconstruct(Tape& tape, Var quantized) const {
  if (quantized.cols() != config_.code_dim) throw std::invalid_argument("reconstruct: wrong dimension");
  return decoder_.forward(tape, quantized);
}

Var Tokenizer::straight_through(Var latent, Var quantized) {
  return ag::add(latent, ag::detach(ag::sub(quantized, latent)));
}

SqLossTerms Tokenizer::sq_loss(Var z, const QuantizedBatch& q, Var z_tilde) const {
  const double inv_batch = 1.0 / static_cast<double>(z.rows());
  SqLossTerms t;
  t.recon = ag::scale(ag::square_sum(ag::sub(z, z_tilde)), inv_batch);
  Var rq;
  for (std::size_t l = 0; l < q.residuals.size(); ++l) {
    Var codebook_term = ag::square_sum(ag::sub(ag::detach(q.residuals[l]), q.selected[l]));
    Var commitment = ag::square_sum(ag::sub(q.residuals[l], ag::detach(q.selected[l])));
    Var level = ag::add(codebook_term, ag::scale(commitment, config_.beta));
    rq = l == 0 ? level : ag::add(rq, level);
  }
  t.rq = ag::scale(rq, inv_batch);
  t.total = ag::add(t.recon, t.rq);
  return t;
}

Vector Tokenizer::encode(const Vector& z) const {
  Tape tape(false);
  return encode(tape, tape.constant(z.transpose())).value().row(0).transpose();
}

QuantizationResult Tokenizer::quantize(const Vector& latent) const {
  Tape tape(false);
  QuantizedBatch q = quantize(tape, tape.constant(latent.transpose()));
  QuantizationResult res;
  res.tokens = q.tokens.front();
  res.latent = latent;
  res.quantized = q.quantized.value().row(0).transpose();
  for (std::size_t l = 0; l < q.residuals.size(); ++l) {
    res.residuals.push_back(q.residuals[l].value().row(0).transpose());
    res.distributions.push_back(q.distributions[l].value().row(0).transpose());
  }
  return res;
}

Vector Tokenizer::reconstruct(const Vector& quantized) const {
  Tape tape(false);
  return reconstruct(tape, tape.constant(quantized.transpose())).value().row(0).transpose();
}

Matrix Tokenizer::encode_all(const Matrix& embeddings) const {
  Tape tape(false);
  return encode(tape, tape.constant(embeddings)).value();
}

std::vector<std::vector<int>> Tokenizer::assign_tokens(const Matrix& embeddings) const {
  Tape tape(false);
  Var r = encode(tape, tape.constant(embeddings));
  return quantize(tape, r).tokens;
}

void Tokenizer::init_codebooks(const Matrix& latents, std::uint64_t seed) {
  if (latents.rows() < config_.codebook_size) {
    throw std::invalid_argument("codebook initialisation needs at least " + std::to_string(config_.codebook_size) +
                                " latents, got " + std::to_string(latents.rows()) + "; use a larger sample");
  }
  if (latents.cols() != config_.code_dim) throw std::invalid_argument("init_codebooks: latent dimension mismatch");
  std::mt19937_64 rng(seed);
  Matrix residual = latents;
  for (int l = 0; l < config_.levels; ++l) {
    Matrix centroids = kmeans(residual, config_.codebook_size, rng);
    for (ag::Index i = 0; i < residual.rows(); ++i) {
      ag::Index best = 0;
      double best_d = (residual.row(i) - centroids.row(0)).squaredNorm();
      for (ag::Index k = 1; k < centroids.rows(); ++k) {
        const double d = (residual.row(i) - centroids.row(k)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      residual.row(i) -= centroids.row(best);
    }
    codebooks_[static_cast<std::size_t>(l)]->value = std::move(centroids);
  }
}

Vector assignment_distribution(const Vector& v, const Matrix& codebook) {
  Vector logits(codebook.rows());
  for (ag::Index k = 0; k < codebook.rows(); ++k) logits(k) = -(v.transpose() - codebook.row(k)).squaredNorm();
  const double m = logits.maxCoeff();
  Vector p = (logits.array() - m).exp();
  return p / p.sum();
}

namespace {

ag::Index nearest(const Matrix& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& x, double* dist = nullptr) {
  ag::Index best = 0;
  double best_d = (x - centroids.row(0)).squaredNorm();
  for (ag::Index k = 1; k < centroids.rows(); ++k) {
    const double d = (x - centroids.row(k)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  if (dist != nullptr) *dist = best_d;
  return best;
}

}  // namespace

Matrix kmeans(const Matrix& points, int k, std::mt19937_64& rng, int max_iterations) {
  const ag::Index n = points.rows();
  if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");
  Matrix centroids(k, points.cols());

  std::uniform_int_distribution<ag::Index> uniform(0, n - 1);
  centroids.row(0) = points.row(uniform(rng));
  std::vector<double> d2(static_cast<std::size_t>(n));
  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (ag::Index i = 0; i < n; ++i) {
      double best = (points.row(i) - centroids.row(0)).squaredNorm();
      for (int j = 1; j < c; ++j) best = std::min(best, (points.row(i) - centroids.row(j)).squaredNorm());
      d2[static_cast<std::size_t>(i)] = best;
      total += best;
    }
    if (total <= 0.0) {
      centroids.row(c) = points.row(uniform(rng));
    } else {
      std::discrete_distribution<ag::Index> pick(d2.begin(), d2.end());
      centroids.row(c) = points.row(pick(rng));
    }
  }

  std::vector<ag::Index> assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < max_iterations; ++it) {
    bool changed = false;
    for (ag::Index i = 0; i < n; ++i) {
      const ag::Index a = nearest(centroids, points.row(i));
      if (a != assign[static_cast<std::size_t>(i)]) {
        assign[static_cast<std::size_t>(i)] = a;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(k, points.cols());
    std::vector<double> counts(static_cast<std::size_t>(k), 0.0);
    for (ag::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])] += 1.0;
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0.0) centroids.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
  }

  // Jitter duplicates so the codebook has no bitwise-identical rows.
  const double spread = std::max(1e-6, std::sqrt(points.rowwise().squaredNorm().mean()));
  std::normal_distribution<double> noise(0.0, 1e-3 * spread);
  for (int c = 1; c < k; ++c) {
    for (int j = 0; j < c; ++j) {
      if (centroids.row(c) == centroids.row(j)) {
        for (ag::Index d = 0; d < centroids.cols(); ++d) centroids(c, d) += noise(rng);
        j = -1;  // re-check against all earlier rows
      }
    }
  }
  return centroids;
}

int reseed_unused_codes(Matrix& codebook, const std::vector<std::int64_t>& usage, const Matrix& residual_pool) {
  if (residual_pool.rows() == 0) return 0;
  std::vector<ag::Index> live;
  for (ag::Index k = 0; k < codebook.rows(); ++k) {
    if (usage[static_cast<std::size_t>(k)] > 0) live.push_back(k);
  }
  // squared distance from every residual to its nearest live code
  Vector nearest = Vector::Constant(residual_pool.rows(), std::numeric_limits<double>::infinity());
  auto absorb = [&](const Eigen::Ref<const Eigen::RowVectorXd>& code) {
    for (ag::Index i = 0; i < residual_pool.rows(); ++i) {
      nearest(i) = std::min(nearest(i), (residual_pool.row(i) - code).squaredNorm());
    }
  };
  for (ag::Index k : live) absorb(codebook.row(k));
  int reseeded = 0;
  for (ag::Index k = 0; k < codebook.rows(); ++k) {
    if (usage[static_cast<std::size_t>(k)] != 0) continue;
    ag::Index far = 0;
    nearest.maxCoeff(&far);  // lowest index on ties
    codebook.row(k) = residual_pool.row(far);
    absorb(codebook.row(k));
    ++reseeded;
  }
  return reseeded;
}

std::map<std::size_t, std::size_t> IdentifierMap::collision_histogram() const {
  std::map<std::vector<int>, std::size_t> groups;
  for (const auto& it : items) ++groups[it.tokens];
  std::map<std::size_t, std::size_t> hist;
  for (const auto& [tokens, n] : groups) ++hist[n];
  return hist;
}

std::uint64_t IdentifierMap::hash() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t x) {
    for (int i = 0; i < 8; ++i) {
      h ^= (x >> (8 * i)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& it : items) {
    for (int t : it.tokens) mix(static_cast<std::uint64_t>(t));
    mix(static_cast<std::uint64_t>(it.suffix));
  }
  return h;
}

bool IdentifierMap::operator==(const IdentifierMap& o) const {
  return levels == o.levels && codebook_size == o.codebook_size && suffix_capacity == o.suffix_capacity &&
         tokenizer_hash == o.tokenizer_hash && items == o.items;
}

void IdentifierMap::write_text(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << "# levels " << levels << " codebook_size " << codebook_size << " suffix_capacity " << suffix_capacity
      << " tokenizer_hash " << tokenizer_hash << '\n';
  for (const auto& it : items) {
    out << it.item_id;
    for (int t : it.tokens) out << '\t' << t;
    out << '\t' << it.suffix << '\n';
  }
}

IdentifierMap IdentifierMap::read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open identifier file: " + path.string());
  IdentifierMap map;
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw FormatError(path.string() + ": missing header");
  {
    std::istringstream hs(line.substr(2));
    std::string key;
    while (hs >> key) {
      if (key == "levels") hs >> map.levels;
      else if (key == "codebook_size") hs >> map.codebook_size;
      else if (key == "suffix_capacity") hs >> map.suffix_capacity;
      else if (key == "tokenizer_hash") hs >> map.tokenizer_hash;
      else throw FormatError(path.string() + ": unknown header key " + key);
    }
  }
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    ItemIdentifier id;
    ls >> id.item_id;
    std::vector<int> nums;
    int x = 0;
    while (ls >> x) nums.push_back(x);
    if (static_cast<int>(nums.size()) != map.levels + 1) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(map.levels + 1) + " integers");
    }
    id.suffix = nums.back();
    nums.pop_back();
    id.tokens = std::move(nums);
    map.items.push_back(std::move(id));
  }
  return map;
}

IdentifierMap assign_suffixes(const std::vector<std::vector<int>>& tokens, const data::ItemIndex& index, int levels,
                              int codebook_size, int suffix_capacity) {
  if (tokens.size() != index.size()) throw std::invalid_argument("assign_suffixes: one token list per item required");
  std::map<std::vector<int>, int> next_suffix;
  for (const auto& t : tokens) ++next_suffix[t];
  for (const auto& [t, n] : next_suffix) {
    if (n > suffix_capacity) {
      throw CapacityError("collision group of " + std::to_string(n) + " items exceeds suffix capacity " +
                          std::to_string(suffix_capacity));
    }
  }
  next_suffix.clear();
  IdentifierMap map;
  map.levels = levels;
  map.codebook_size = codebook_size;
  map.suffix_capacity = suffix_capacity;
  map.items.reserve(tokens.size());
  // Index order is ascending item id, so ordinals follow item id order.
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    map.items.push_back({tokens[i], next_suffix[tokens[i]]++, index.id(static_cast<int>(i))});
  }
  return map;
}

IdentifierMap tokenize_corpus(const data::EmbeddingTable& table, const Tokenizer& tokenizer) {
  const auto& cfg = tokenizer.config();
  IdentifierMap map = assign_suffixes(tokenizer.assign_tokens(table.rows), table.index, cfg.levels, cfg.codebook_size,
                                      cfg.suffix_capacity);
  map.tokenizer_hash = tokenizer.hash();
  return map;
}

double identifier_change_fraction(const IdentifierMap& previous, const IdentifierMap& current) {
  if (previous.items.size() != current.items.size()) throw std::invalid_argument("identifier maps cover different item sets");
  if (previous.items.empty()) return 0.0;
  std::size_t changed = 0;
  for (std::size_t i = 0; i < previous.items.size(); ++i) {
    if (previous.items[i].item_id != current.items[i].item_id) {
      throw std::invalid_argument("identifier maps cover different item sets");
    }
    if (previous.items[i].tokens != current.items[i].tokens || previous.items[i].suffix != current.items[i].suffix) {
      ++changed;
    }
  }
  return static_cast<double>(changed) / static_cast<double>(previous.items.size());
}

}  // namespace etegrec::tokenizer
