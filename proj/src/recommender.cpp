#include "etegrec/recommender.hpp"

#include "etegrec/errors.hpp"

#include <cmath>
#include <stdexcept>

namespace etegrec::recommender {

void RecommenderConfig::validate() const {
  if (encoder_layers < 0 || decoder_layers < 0) throw ConfigError("layer counts must be non-negative");
  if (d_model < 1 || d_ff < 1 || heads < 1 || head_dim < 1) throw ConfigError("model widths must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
  if (max_len < 1 || levels < 1 || codebook_size < 2 || suffix_capacity < 1 || semantic_dim < 1) {
    throw ConfigError("invalid vocabulary or sequence configuration");
  }
}

VocabLayout::VocabLayout(int levels, int codebook_size, int suffix_capacity)
    : levels_(levels), codebook_size_(codebook_size), suffix_capacity_(suffix_capacity) {}

int VocabLayout::level_token(int level, int code) const {
  if (level < 0 || level >= levels_ || code < 0 || code >= codebook_size_) {
    throw std::out_of_range("level token out of range");
  }
  return 2 + level * codebook_size_ + code;
}

int VocabLayout::suffix_token(int suffix) const {
  if (suffix < 0 || suffix >= suffix_capacity_) throw std::out_of_range("suffix token out of range");
  return 2 + levels_ * codebook_size_ + suffix;
}

int VocabLayout::step_token(int step, int value) const {
  return step < levels_ ? level_token(step, value) : suffix_token(value);
}

VocabLayout::Slot VocabLayout::describe(int token) const {
  if (token == kPad) return {Slot::Kind::pad};
  if (token == kBos) return {Slot::Kind::bos};
  if (token < 0 || token >= size()) throw std::out_of_range("token id outside the vocabulary");
  const int t = token - 2;
  if (t < levels_ * codebook_size_) return {Slot::Kind::level, t / codebook_size_, t % codebook_size_};
  return {Slot::Kind::suffix, -1, t - levels_ * codebook_size_};
}

std::vector<int> VocabLayout::identifier_tokens(const tokenizer::ItemIdentifier& id) const {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(levels_) + 1);
  for (int l = 0; l < levels_; ++l) out.push_back(level_token(l, id.tokens.at(static_cast<std::size_t>(l))));
  out.push_back(suffix_token(id.suffix));
  return out;
}

TokenSequence TokenSequence::from_ids(std::vector<int> ids) {
  TokenSequence s;
  s.mask.reserve(ids.size());
  for (int id : ids) s.mask.push_back(id == VocabLayout::kPad ? 0 : 1);
  s.ids = std::move(ids);
  return s;
}

TokenSequence history_tokens(const std::vector<int>& items, const tokenizer::IdentifierMap& ids,
                             const VocabLayout& vocab) {
  std::vector<int> out;
  out.reserve(items.size() * static_cast<std::size_t>(vocab.identifier_length()));
  for (int item : items) {
    const auto toks = vocab.identifier_tokens(ids.items.at(static_cast<std::size_t>(item)));
    out.insert(out.end(), toks.begin(), toks.end());
  }
  return TokenSequence::from_ids(std::move(out));
}

Recommender::AttentionBlock Recommender::make_attention(const std::string& name, std::mt19937_64& rng) {
  const int inner = config_.heads * config_.head_dim;
  const double in_bound = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
  const double out_bound = 1.0 / std::sqrt(static_cast<double>(inner));
  AttentionBlock b{};
  b.q = &params_.add(name + ".q", nn::uniform_init(config_.d_model, inner, in_bound, rng));
  b.k = &params_.add(name + ".k", nn::uniform_init(config_.d_model, inner, in_bound, rng));
  b.v = &params_.add(name + ".v", nn::uniform_init(config_.d_model, inner, in_bound, rng));
  b.o = &params_.add(name + ".o", nn::uniform_init(inner, config_.d_model, out_bound, rng));
  return b;
}

Recommender::Recommender(RecommenderConfig config, std::uint64_t seed)
    : config_(std::move(config)), vocab_(config_.levels, config_.codebook_size, config_.suffix_capacity) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.d_model;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  embedding_ = &params_.add("embedding", nn::normal_init(vocab_.size(), d, emb_std, rng));
  enc_pos_ = &params_.add("position.encoder", nn::normal_init(config_.max_positions(), d, emb_std, rng));
  dec_pos_ = &params_.add("position.decoder", nn::normal_init(vocab_.identifier_length(), d, emb_std, rng));
  const Matrix ones = Matrix::Ones(1, d);
  const double ff_in = 1.0 / std::sqrt(static_cast<double>(d));
  const double ff_out = 1.0 / std::sqrt(static_cast<double>(config_.d_ff));
  for (int i = 0; i < config_.encoder_layers; ++i) {
    const std::string p = "encoder." + std::to_string(i);
    EncoderLayer layer{};
    layer.norm1 = &params_.add(p + ".norm1", ones);
    layer.self = make_attention(p + ".self", rng);
    layer.norm2 = &params_.add(p + ".norm2", ones);
    layer.ff1 = &params_.add(p + ".ff1", nn::uniform_init(d, config_.d_ff, ff_in, rng));
    layer.ff2 = &params_.add(p + ".ff2", nn::uniform_init(config_.d_ff, d, ff_out, rng));
    enc_.push_back(layer);
  }
  for (int i = 0; i < config_.decoder_layers; ++i) {
    const std::string p = "decoder." + std::to_string(i);
    DecoderLayer layer{};
    layer.norm1 = &params_.add(p + ".norm1", ones);
    layer.self = make_attention(p + ".self", rng);
    layer.norm2 = &params_.add(p + ".norm2", ones);
    layer.cross = make_attention(p + ".cross", rng);
    layer.norm3 = &params_.add(p + ".norm3", ones);
    layer.ff1 = &params_.add(p + ".ff1", nn::uniform_init(d, config_.d_ff, ff_in, rng));
    layer.ff2 = &params_.add(p + ".ff2", nn::uniform_init(config_.d_ff, d, ff_out, rng));
    dec_.push_back(layer);
  }
  enc_final_ = &params_.add("encoder.final_norm", ones);
  dec_final_ = &params_.add("decoder.final_norm", ones);
  seq_proj_ = nn::Mlp::create(params_, "projection.sequence", d, config_.projection_hidden, config_.semantic_dim, rng);
  pref_proj_ = nn::Mlp::create(params_, "projection.preference", d, config_.projection_hidden, config_.semantic_dim, rng);
}

Var Recommender::embed(Tape& tape, const std::vector<int>& ids, ag::Parameter& positions,
                       const std::vector<int>& pos) const {
  for (int id : ids) {
    if (id < 0 || id >= vocab_.size()) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  }
  for (int p : pos) {
    if (p >= positions.value.rows()) throw std::out_of_range("sequence longer than the position table");
  }
  return ag::add(ag::gather_rows(tape.param(*embedding_), ids), ag::gather_rows(tape.param(positions), pos));
}

Var Recommender::attend(Tape& tape, const AttentionBlock& blk, Var queries_in, Var keys_in,
                        const ag::AttentionLayout& layout) const {
  Var q = ag::matmul(queries_in, tape.param(*blk.q));
  Var k = ag::matmul(keys_in, tape.param(*blk.k));
  Var v = ag::matmul(keys_in, tape.param(*blk.v));
  return ag::matmul(ag::attention(q, k, v, layout), tape.param(*blk.o));
}

Var Recommender::feed_forward(Tape& tape, ag::Parameter* ff1, ag::Parameter* ff2, Var x) const {
  return ag::matmul(ag::relu(ag::matmul(x, tape.param(*ff1))), tape.param(*ff2));
}

EncodedBatch Recommender::embed_and_encode(Tape& tape, const std::vector<TokenSequence>& inputs,
                                           std::mt19937_64* dropout_rng) const {
  if (inputs.empty()) throw std::invalid_argument("embed_and_encode: empty batch");
  EncodedBatch out;
  std::vector<int> ids;
  std::vector<int> pos;
  for (const auto& seq : inputs) {
    if (seq.ids.empty()) throw std::invalid_argument("embed_and_encode: empty sequence");
    if (seq.mask.size() != seq.ids.size()) throw std::invalid_argument("embed_and_encode: mask length mismatch");
    out.segments.push_back({static_cast<ag::Index>(ids.size()), static_cast<ag::Index>(seq.ids.size())});
    for (std::size_t i = 0; i < seq.ids.size(); ++i) {
      ids.push_back(seq.ids[i]);
      pos.push_back(static_cast<int>(i));
      out.mask.push_back(seq.mask[i]);
    }
  }
  Var x = embed(tape, ids, *enc_pos_, pos);

  ag::AttentionLayout layout;
  layout.queries = out.segments;
  layout.keys = out.segments;
  layout.key_mask = out.mask;
  layout.heads = config_.heads;
  layout.head_dim = config_.head_dim;
  const double p = config_.dropout;
  for (const auto& layer : enc_) {
    Var h = ag::rms_norm(x, tape.param(*layer.norm1));
    x = ag::add(x, ag::dropout(attend(tape, layer.self, h, h, layout), p, dropout_rng));
    h = ag::rms_norm(x, tape.param(*layer.norm2));
    x = ag::add(x, ag::dropout(feed_forward(tape, layer.ff1, layer.ff2, h), p, dropout_rng));
  }
  if (config_.final_norm) x = ag::rms_norm(x, tape.param(*enc_final_));
  out.states = x;
  return out;
}

DecodedBatch Recommender::decode(Tape& tape, const EncodedBatch& encoded, const std::vector<TokenSequence>& prefixes,
                                 std::mt19937_64* dropout_rng, const std::vector<int>& source) const {
  if (prefixes.empty()) throw std::invalid_argument("decode: empty batch");
  if (source.empty() && prefixes.size() != encoded.segments.size()) {
    throw std::invalid_argument("decode: one prefix per encoded sequence required");
  }
  if (!source.empty() && source.size() != prefixes.size()) throw std::invalid_argument("decode: source size mismatch");
  DecodedBatch out;
  std::vector<int> ids;
  std::vector<int> pos;
  std::vector<ag::Segment> keys;
  for (std::size_t i = 0; i < prefixes.size(); ++i) {
    const auto& pre = prefixes[i];
    if (pre.ids.empty()) throw std::invalid_argument("decode: empty prefix");
    if (pre.ids.front() != VocabLayout::kBos) throw std::invalid_argument("decode: prefix must start with BOS");
    out.segments.push_back({static_cast<ag::Index>(ids.size()), static_cast<ag::Index>(pre.ids.size())});
    for (std::size_t j = 0; j < pre.ids.size(); ++j) {
      ids.push_back(pre.ids[j]);
      pos.push_back(static_cast<int>(j));
    }
    const std::size_t src = source.empty() ? i : static_cast<std::size_t>(source[i]);
    keys.push_back(encoded.segments.at(src));
  }
  Var x = embed(tape, ids, *dec_pos_, pos);

  ag::AttentionLayout self_layout;
  self_layout.queries = out.segments;
  self_layout.keys = out.segments;
  self_layout.heads = config_.heads;
  self_layout.head_dim = config_.head_dim;
  self_layout.causal = true;
  ag::AttentionLayout cross_layout;
  cross_layout.queries = out.segments;
  cross_layout.keys = keys;
  cross_layout.key_mask = encoded.mask;
  cross_layout.heads = config_.heads;
  cross_layout.head_dim = config_.head_dim;

  const double p = config_.dropout;
  for (const auto& layer : dec_) {
    Var h = ag::rms_norm(x, tape.param(*layer.norm1));
    x = ag::add(x, ag::dropout(attend(tape, layer.self, h, h, self_layout), p, dropout_rng));
    h = ag::rms_norm(x, tape.param(*layer.norm2));
    x = ag::add(x, ag::dropout(attend(tape, layer.cross, h, encoded.states, cross_layout), p, dropout_rng));
    h = ag::rms_norm(x, tape.param(*layer.norm3));
    x = ag::add(x, ag::dropout(feed_forward(tape, layer.ff1, layer.ff2, h), p, dropout_rng));
  }
  if (config_.final_norm) x = ag::rms_norm(x, tape.param(*dec_final_));
  out.states = x;
  out.logits = ag::matmul_bt(x, tape.param(*embedding_));
  return out;
}

Var Recommender::project_sequence_state(Tape& tape, const EncodedBatch& encoded) const {
  return seq_proj_.forward(tape, ag::segment_mean(encoded.states, encoded.segments, encoded.mask));
}

Var Recommender::preference_state(Tape& tape, const DecodedBatch& decoded) const {
  std::vector<int> first_rows;
  for (const auto& s : decoded.segments) {
    if (s.length == 0) throw std::invalid_argument("preference_state: empty decoder segment");
    first_rows.push_back(static_cast<int>(s.offset));
  }
  return pref_proj_.forward(tape, ag::gather_rows(decoded.states, first_rows));
}

Var rec_loss(Var logits, const std::vector<int>& targets, int batch) {
  if (batch < 1) throw std::invalid_argument("rec_loss: batch must be positive");
  return ag::scale(ag::select_sum(ag::log_softmax_rows(logits), targets), -1.0 / static_cast<double>(batch));
}

}  // namespace etegrec::recommender
