#pragma once

// Residual-quantization item tokenizer: MLP encoder, L stacked codebooks,
// MLP decoder. Graph-building methods take a Tape so the same code serves
// training (with gradients) and inference (no-grad tape).

#include "etegrec/autograd.hpp"
#include "etegrec/data.hpp"
#include "etegrec/nn.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace etegrec::tokenizer {

using ag::Matrix;
using ag::Tape;
using ag::Var;
using Vector = Eigen::VectorXd;

struct TokenizerConfig {
  int levels = 3;
  int codebook_size = 256;
  int code_dim = 128;
  std::vector<int> hidden = {512, 256};
  double beta = 0.25;
  int input_dim = 256;
  int suffix_capacity = 64;

  void validate() const;
};

struct QuantizeOptions {
  // Residual chain stops gradients at the selected codes, so the commitment
  // term never reaches earlier codebooks. Alignment paths keep the full chain.
  bool detach_chain = true;
  // When set, tokens are taken from here instead of the argmax.
  const std::vector<std::vector<int>>* forced_tokens = nullptr;
};

struct QuantizedBatch {
  std::vector<std::vector<int>> tokens;  // [row][level]
  std::vector<Var> residuals;            // v_l per level, B x d_c
  std::vector<Var> selected;             // e^l_{c_l} per level, B x d_c
  std::vector<Var> distributions;        // P(k | v_l) per level, B x K
  Var quantized;                         // sum of selected codes
};

struct QuantizationResult {
  std::vector<int> tokens;
  std::vector<Vector> residuals;
  std::vector<Vector> distributions;
  Vector latent;
  Vector quantized;
};

struct SqLossTerms {
  Var recon;
  Var rq;
  Var total;
};

class Tokenizer {
 public:
  Tokenizer(TokenizerConfig config, std::uint64_t seed);

  const TokenizerConfig& config() const { return config_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  ag::Parameter& codebook(int level) { return *codebooks_.at(static_cast<std::size_t>(level)); }
  const ag::Parameter& codebook(int level) const { return *codebooks_.at(static_cast<std::size_t>(level)); }
  std::uint64_t hash() const { return params_.hash(); }
  void set_frozen(bool frozen) { params_.set_frozen(frozen); }

  // Batched graph operations (rows are items).
  Var encode(Tape& tape, Var z) const;
  QuantizedBatch quantize(Tape& tape, Var r, const QuantizeOptions& options = {}) const;
  Var reconstruct(Tape& tape, Var quantized) const;
  // Forward value of `quantized`, gradient routed to `latent` unchanged.
  static Var straight_through(Var latent, Var quantized);
  // Mean over rows of ||z - z~||^2 and the two-term RQ loss.
  SqLossTerms sq_loss(Var z, const QuantizedBatch& q, Var z_tilde) const;

  // Single-vector conveniences over a no-grad tape.
  Vector encode(const Vector& z) const;
  QuantizationResult quantize(const Vector& latent) const;
  Vector reconstruct(const Vector& quantized) const;
  // Tokens for every row of `embeddings`.
  std::vector<std::vector<int>> assign_tokens(const Matrix& embeddings) const;
  // Encoder outputs for every row.
  Matrix encode_all(const Matrix& embeddings) const;

  // Level-wise k-means over the residual stream of `latents`.
  void init_codebooks(const Matrix& latents, std::uint64_t seed);

  const nn::Mlp& encoder() const { return encoder_; }
  const nn::Mlp& decoder() const { return decoder_; }

 private:
  TokenizerConfig config_;
  nn::ParameterSet params_;
  nn::Mlp encoder_;
  nn::Mlp decoder_;
  std::vector<ag::Parameter*> codebooks_;
};

// P(k|v) = softmax_k(-||v - e_k||^2), stable form.
Vector assignment_distribution(const Vector& v, const Matrix& codebook);

// Lloyd's k-means with k-means++ seeding. Returns k x d centroids; centroids
// that coincide bitwise are jittered so every row is distinct.
Matrix kmeans(const Matrix& points, int k, std::mt19937_64& rng, int max_iterations = 100);

// Codes that nobody used move, one at a time, onto the residual farthest
// from every current code. Returns the number of codes reseeded.
int reseed_unused_codes(Matrix& codebook, const std::vector<std::int64_t>& usage, const Matrix& residual_pool);

struct ItemIdentifier {
  std::vector<int> tokens;
  int suffix = 0;
  std::string item_id;

  bool operator==(const ItemIdentifier& o) const {
    return tokens == o.tokens && suffix == o.suffix && item_id == o.item_id;
  }
};

struct IdentifierMap {
  int levels = 0;
  int codebook_size = 0;
  int suffix_capacity = 0;
  std::uint64_t tokenizer_hash = 0;
  std::vector<ItemIdentifier> items;  // indexed like the embedding table

  std::size_t size() const { return items.size(); }
  // group size -> number of token groups with that many items
  std::map<std::size_t, std::size_t> collision_histogram() const;
  std::uint64_t hash() const;
  bool operator==(const IdentifierMap& o) const;

  void write_text(const std::filesystem::path& path) const;
  static IdentifierMap read_text(const std::filesystem::path& path);
};

// Items sharing the same L tokens get suffixes 0,1,2,... by ascending item id.
IdentifierMap assign_suffixes(const std::vector<std::vector<int>>& tokens, const data::ItemIndex& index,
                              int levels, int codebook_size, int suffix_capacity);
IdentifierMap tokenize_corpus(const data::EmbeddingTable& table, const Tokenizer& tokenizer);

// Fraction of items whose (tokens, suffix) differ between the maps.
double identifier_change_fraction(const IdentifierMap& previous, const IdentifierMap& current);

}  // namespace etegrec::tokenizer
