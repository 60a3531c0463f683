#pragma once

// Encoder-decoder transformer over item-token sequences. Input and output
// share one vocabulary embedding matrix; logits are inner products with it.

#include "etegrec/autograd.hpp"
#include "etegrec/nn.hpp"
#include "etegrec/tokenizer.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace etegrec::recommender {

using ag::Matrix;
using ag::Tape;
using ag::Var;

struct RecommenderConfig {
  int encoder_layers = 6;
  int decoder_layers = 6;
  int d_model = 128;
  int d_ff = 512;
  int heads = 4;
  int head_dim = 64;
  double dropout = 0.1;
  int max_len = 50;  // items per input sequence
  int levels = 3;
  int codebook_size = 256;
  int suffix_capacity = 64;
  int semantic_dim = 256;                // projection output (tokenizer input space)
  std::vector<int> projection_hidden = {256};
  bool final_norm = true;

  void validate() const;
  int max_positions() const { return (max_len + 1) * (levels + 1); }
};

// Token id layout: PAD, BOS, then L blocks of K level tokens, then suffixes.
class VocabLayout {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;

  VocabLayout(int levels, int codebook_size, int suffix_capacity);

  int levels() const { return levels_; }
  int codebook_size() const { return codebook_size_; }
  int suffix_capacity() const { return suffix_capacity_; }
  int size() const { return 2 + levels_ * codebook_size_ + suffix_capacity_; }
  int identifier_length() const { return levels_ + 1; }

  int level_token(int level, int code) const;
  int suffix_token(int suffix) const;

  struct Slot {
    enum class Kind { pad, bos, level, suffix } kind;
    int level = -1;  // level index for level tokens
    int code = -1;   // code or suffix ordinal
  };
  Slot describe(int token) const;

  std::vector<int> identifier_tokens(const tokenizer::ItemIdentifier& id) const;
  // Token id of `step` (0-based position within an identifier) for `value`.
  int step_token(int step, int value) const;

 private:
  int levels_;
  int codebook_size_;
  int suffix_capacity_;
};

struct TokenSequence {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;  // 1 for real tokens, 0 for PAD

  static TokenSequence from_ids(std::vector<int> ids);
  std::size_t size() const { return ids.size(); }
};

// Flattens an item history into level/suffix tokens (L+1 per item).
TokenSequence history_tokens(const std::vector<int>& items, const tokenizer::IdentifierMap& ids,
                             const VocabLayout& vocab);

struct EncodedBatch {
  Var states;                         // all rows of all sequences, stacked
  std::vector<ag::Segment> segments;  // one per sequence
  std::vector<std::uint8_t> mask;     // per row
};

struct DecodedBatch {
  Var states;  // stacked decoder rows
  Var logits;  // stacked rows x vocabulary
  std::vector<ag::Segment> segments;
};

class Recommender {
 public:
  Recommender(RecommenderConfig config, std::uint64_t seed);

  const RecommenderConfig& config() const { return config_; }
  const VocabLayout& vocab() const { return vocab_; }
  nn::ParameterSet& parameters() { return params_; }
  const nn::ParameterSet& parameters() const { return params_; }
  std::uint64_t hash() const { return params_.hash(); }
  void set_frozen(bool frozen) { params_.set_frozen(frozen); }

  // `dropout_rng` null means evaluation mode.
  EncodedBatch embed_and_encode(Tape& tape, const std::vector<TokenSequence>& inputs,
                                std::mt19937_64* dropout_rng = nullptr) const;

  // Each prefix starts with BOS. `source` maps prefix i to the encoded
  // sequence it attends to; empty means i -> i.
  DecodedBatch decode(Tape& tape, const EncodedBatch& encoded, const std::vector<TokenSequence>& prefixes,
                      std::mt19937_64* dropout_rng = nullptr, const std::vector<int>& source = {}) const;

  // Mean-pooled encoder state projected into the semantic space, one row per sequence.
  Var project_sequence_state(Tape& tape, const EncodedBatch& encoded) const;
  // Decoder BOS-position state projected into the semantic space.
  Var preference_state(Tape& tape, const DecodedBatch& decoded) const;

  const nn::Mlp& sequence_projection() const { return seq_proj_; }
  const nn::Mlp& preference_projection() const { return pref_proj_; }

 private:
  struct AttentionBlock {
    ag::Parameter* q;
    ag::Parameter* k;
    ag::Parameter* v;
    ag::Parameter* o;
  };
  struct EncoderLayer {
    ag::Parameter* norm1;
    AttentionBlock self;
    ag::Parameter* norm2;
    ag::Parameter* ff1;
    ag::Parameter* ff2;
  };
  struct DecoderLayer {
    ag::Parameter* norm1;
    AttentionBlock self;
    ag::Parameter* norm2;
    AttentionBlock cross;
    ag::Parameter* norm3;
    ag::Parameter* ff1;
    ag::Parameter* ff2;
  };

  AttentionBlock make_attention(const std::string& name, std::mt19937_64& rng);
  Var attend(Tape& tape, const AttentionBlock& blk, Var queries_in, Var keys_in, const ag::AttentionLayout& layout) const;
  Var feed_forward(Tape& tape, ag::Parameter* ff1, ag::Parameter* ff2, Var x) const;
  Var embed(Tape& tape, const std::vector<int>& ids, ag::Parameter& positions, const std::vector<int>& pos) const;

  RecommenderConfig config_;
  VocabLayout vocab_;
  nn::ParameterSet params_;
  ag::Parameter* embedding_ = nullptr;
  ag::Parameter* enc_pos_ = nullptr;
  ag::Parameter* dec_pos_ = nullptr;
  std::vector<EncoderLayer> enc_;
  std::vector<DecoderLayer> dec_;
  ag::Parameter* enc_final_ = nullptr;
  ag::Parameter* dec_final_ = nullptr;
  nn::Mlp seq_proj_;
  nn::Mlp pref_proj_;
};

// Sum over positions of -log softmax(logits)[target], averaged over `batch`.
Var rec_loss(Var logits, const std::vector<int>& targets, int batch);

}  // namespace etegrec::recommender
