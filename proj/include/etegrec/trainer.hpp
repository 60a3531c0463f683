#pragma once

// Tokenizer pretraining, alternating tokenizer/recommender cycles, corpus
// re-tokenisation between phases, convergence detection and the final
// recommender-only stage with early stopping.

#include "etegrec/alignment.hpp"
#include "etegrec/data.hpp"
#include "etegrec/evaldecode.hpp"
#include "etegrec/recommender.hpp"
#include "etegrec/tokenizer.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace etegrec::trainer {

enum class Variant { full, no_sia, no_psa, no_both, no_at, no_ete };
Variant parse_variant(const std::string& name);
const char* variant_name(Variant v);

enum class Phase { tokenizer, recommender, joint, final };
const char* phase_name(Phase p);

struct TrainSchedule {
  int cycle_length = 2;
  double tokenizer_lr = 1e-4;
  double recommender_lr = 1e-3;
  double weight_decay = 0.05;
  double epsilon = 0.01;  // max fraction of changed identifiers to call the tokenizer converged
  int min_cycles = 1;
  int max_cycles = 30;
  int patience = 3;
  int max_final_epochs = 50;
  int batch_size = 256;
  double clip_norm = 1.0;
  int eval_beam = 20;
  std::size_t max_valid_users = 0;  // 0 evaluates every validation user
  bool validate_each_cycle = true;

  void validate() const;
};

struct PretrainOptions {
  int epochs = 20;
  double lr = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 256;
  bool reseed_dead_codes = true;
  std::uint64_t seed = 1;
};

struct PretrainReport {
  std::vector<double> reconstruction;  // mean ||z - z~||^2 over the table after each epoch (index 0 = init)
  std::vector<std::vector<double>> utilization;  // per level: fraction of items on each code
  std::vector<int> used_codes;                   // per level
  std::vector<int> reseeded;                     // total dead codes reseeded per level
};

// Encodes every item and runs level-wise k-means to seed the codebooks.
void initialize_codebooks(tokenizer::Tokenizer& tok, const data::EmbeddingTable& table, std::uint64_t seed);
PretrainReport pretrain_tokenizer(tokenizer::Tokenizer& tok, const data::EmbeddingTable& table,
                                  const PretrainOptions& options);
double reconstruction_error(const tokenizer::Tokenizer& tok, const data::EmbeddingTable& table);
std::vector<std::vector<double>> code_utilization(const tokenizer::Tokenizer& tok, const data::EmbeddingTable& table);

bool check_convergence(const tokenizer::IdentifierMap& previous, const tokenizer::IdentifierMap& current,
                       double epsilon);

// Receives one JSON object per line-record (steps, epochs, events).
using MetricsSink = std::function<void(const std::string& json_line)>;

struct StepLosses {
  double base = 0.0;  // L_SQ, L_REC, or their sum in joint mode
  double sia = 0.0;
  double psa = 0.0;
  double combined = 0.0;
};

struct EpochSummary {
  Phase phase = Phase::recommender;
  int steps = 0;
  StepLosses mean;
};

struct TrainState {
  int cycle = 0;
  int epoch = 0;  // global epoch counter
  std::int64_t step = 0;
  Phase phase = Phase::tokenizer;
  tokenizer::IdentifierMap ids;
  double last_change = 1.0;
  std::vector<double> valid_history;  // recall@10 per validation pass
};

struct TrainerOptions {
  TrainSchedule schedule;
  alignment::AlignmentConfig alignment;
  Variant variant = Variant::full;
  std::uint64_t seed = 1;
};

struct TrainReport {
  int cycles = 0;
  bool converged = false;
  int final_epochs = 0;
  double best_valid_recall = 0.0;
  std::vector<double> change_fractions;  // per cycle
};

class Trainer {
 public:
  Trainer(tokenizer::Tokenizer& tok, recommender::Recommender& rec, const data::EmbeddingTable& table,
          std::vector<data::IndexedExample> train, std::vector<data::IndexedExample> valid, TrainerOptions options,
          MetricsSink sink = {});

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  const TrainerOptions& options() const { return options_; }

  EpochSummary tokenizer_epoch();
  EpochSummary recommender_epoch();
  EpochSummary joint_epoch();

  // One cycle; returns true when the identifier map has converged.
  bool run_cycle();
  // Freezes the tokenizer and trains the recommender with early stopping on
  // validation Recall@10; restores the best parameters.
  int finalize();
  // Cycles until convergence or max_cycles, then finalize.
  TrainReport run();

  double validate();
  // Mean L_REC over `examples` under the current identifiers, no dropout.
  double rec_loss_on(const std::vector<data::IndexedExample>& examples) const;

  // Called after each completed cycle (resume point).
  void set_cycle_hook(std::function<void(const Trainer&)> hook) { cycle_hook_ = std::move(hook); }

  nn::AdamW& tokenizer_optimizer() { return tok_opt_; }
  nn::AdamW& recommender_optimizer() { return rec_opt_; }
  std::string rng_state() const;
  void set_rng_state(const std::string& s);
  // Re-derive the identifier map from the current tokenizer (used on resume).
  void retokenize();

 private:
  StepLosses train_step(const std::vector<const data::IndexedExample*>& batch, Phase phase);
  EpochSummary run_epoch(Phase phase);
  void set_phase(Phase phase);
  void emit(const std::string& line) const;
  double mu() const;
  double lambda() const;

  tokenizer::Tokenizer& tok_;
  recommender::Recommender& rec_;
  const data::EmbeddingTable& table_;
  std::vector<data::IndexedExample> train_;
  std::vector<data::IndexedExample> valid_;
  TrainerOptions options_;
  MetricsSink sink_;
  std::function<void(const Trainer&)> cycle_hook_;
  nn::AdamW tok_opt_;
  nn::AdamW rec_opt_;
  std::mt19937_64 rng_;
  TrainState state_;
};

// Splits a root seed into independent per-component seeds.
std::uint64_t derive_seed(std::uint64_t root, std::uint64_t component);

}  // namespace etegrec::trainer
