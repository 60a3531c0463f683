#include "etegrec/alignment.hpp"

#include "etegrec/errors.hpp"

#include <numeric>
#include <stdexcept>

namespace etegrec::alignment {

void AlignmentConfig::validate() const {
  if (mu < 0.0 || lambda < 0.0) throw ConfigError("alignment weights must be non-negative");
  if (tau <= 0.0) throw ConfigError("temperature must be positive");
  if (probability_floor <= 0.0) throw ConfigError("probability floor must be positive");
  if (sia_sign != 1.0 && sia_sign != -1.0) throw ConfigError("sia_sign must be +1 or -1");
}

Var symmetric_kl(Var p, Var q, double floor) {
  // KL(p||q) + KL(q||p) = sum (p - q)(log p - log q)
  return ag::sum(ag::mul(ag::sub(p, q), ag::sub(ag::log_floor(p, floor), ag::log_floor(q, floor))));
}

Var sia_loss(Tape& tape, const tokenizer::Tokenizer& tok, Var z, Var z_seq, const AlignmentConfig& config) {
  if (z.rows() != z_seq.rows()) throw std::invalid_argument("sia_loss: batch size mismatch");
  tokenizer::QuantizeOptions chain;
  chain.detach_chain = false;
  const tokenizer::QuantizedBatch item = tok.quantize(tape, tok.encode(tape, z), chain);
  tokenizer::QuantizeOptions seq_options = chain;
  if (config.teacher_forcing) seq_options.forced_tokens = &item.tokens;
  const tokenizer::QuantizedBatch seq = tok.quantize(tape, tok.encode(tape, z_seq), seq_options);

  Var total;
  for (std::size_t l = 0; l < item.distributions.size(); ++l) {
    Var level = symmetric_kl(item.distributions[l], seq.distributions[l], config.probability_floor);
    total = l == 0 ? level : ag::add(total, level);
  }
  return ag::scale(total, config.sia_sign / static_cast<double>(z.rows()));
}

Var psa_loss(Var preference, Var reconstructed, double tau) {
  if (preference.rows() != reconstructed.rows() || preference.cols() != reconstructed.cols()) {
    throw std::invalid_argument("psa_loss: shape mismatch");
  }
  const auto batch = static_cast<int>(preference.rows());
  if (batch < 2) throw std::invalid_argument("psa_loss needs at least 2 rows for in-batch negatives");
  if (tau <= 0.0) throw std::invalid_argument("psa_loss: temperature must be positive");
  // sim(i, j) = s(z~_i, h_j) / tau
  Var sim = ag::scale(ag::matmul_bt(ag::l2_normalize_rows(reconstructed), ag::l2_normalize_rows(preference)), 1.0 / tau);
  std::vector<int> diagonal(static_cast<std::size_t>(batch));
  std::iota(diagonal.begin(), diagonal.end(), 0);
  Var item_to_pref = ag::select_sum(ag::log_softmax_rows(sim), diagonal);
  Var pref_to_item = ag::select_sum(ag::log_softmax_rows(ag::transpose(sim)), diagonal);
  return ag::scale(ag::add(item_to_pref, pref_to_item), -1.0 / static_cast<double>(batch));
}

double combine_tokenizer_objective(double sq, double sia, double psa, double mu, double lambda) {
  if (mu < 0.0 || lambda < 0.0) throw std::invalid_argument("alignment weights must be non-negative");
  return sq + mu * sia + lambda * psa;
}

double combine_recommender_objective(double rec, double sia, double psa, double mu, double lambda) {
  return combine_tokenizer_objective(rec, sia, psa, mu, lambda);
}

Var combine(Var base, Var sia, Var psa, double mu, double lambda) {
  Var out = base;
  if (sia.valid() && mu != 0.0) out = ag::add(out, ag::scale(sia, mu));
  if (psa.valid() && lambda != 0.0) out = ag::add(out, ag::scale(psa, lambda));
  return out;
}

}  // namespace etegrec::alignment
