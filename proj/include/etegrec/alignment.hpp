#pragma once

// Losses coupling the tokenizer and the recommender: sequence-item alignment
// (symmetric KL between per-level code distributions) and preference-semantic
// alignment (symmetric in-batch InfoNCE over cosine similarities).

#include "etegrec/autograd.hpp"
#include "etegrec/tokenizer.hpp"

namespace etegrec::alignment {

using ag::Tape;
using ag::Var;

struct AlignmentConfig {
  double mu = 1e-3;      // weight on the sequence-item term
  double lambda = 1e-3;  // weight on the preference-semantic term
  double tau = 0.07;
  double probability_floor = 1e-10;
  // The sequence-state path reuses the target's hard tokens instead of its
  // own argmax at every level.
  bool teacher_forcing = false;
  // +1 minimises the summed divergences so the two token distributions move
  // together. -1 is the negated form; with it training drives the divergence
  // up and the sequence-item term lowers recall on planted data.
  double sia_sign = 1.0;

  void validate() const;
};

// Sum over rows of KL(p||q) + KL(q||p), logs floored at `floor`.
Var symmetric_kl(Var p, Var q, double floor);

// Both inputs go through the tokenizer encoder and their own greedy residual
// path. Returns sia_sign * mean over rows of the per-level symmetric KL sum.
Var sia_loss(Tape& tape, const tokenizer::Tokenizer& tok, Var z, Var z_seq, const AlignmentConfig& config);

// Symmetric InfoNCE with in-batch negatives; averaged over the batch.
Var psa_loss(Var preference, Var reconstructed, double tau);

double combine_tokenizer_objective(double sq, double sia, double psa, double mu, double lambda);
double combine_recommender_objective(double rec, double sia, double psa, double mu, double lambda);
// Graph versions; an invalid Var term is treated as absent.
Var combine(Var base, Var sia, Var psa, double mu, double lambda);

}  // namespace etegrec::alignment
