#pragma once

// End-to-end glue shared by the CLI, the acceptance runner and the Python
// module: dataset assembly, pretraining, training and ablation runs.

#include "etegrec/data.hpp"
#include "etegrec/evaldecode.hpp"
#include "etegrec/recommender.hpp"
#include "etegrec/tokenizer.hpp"
#include "etegrec/trainer.hpp"

#include <memory>
#include <string>
#include <vector>

namespace etegrec::pipeline {

struct Dataset {
  std::string name;
  data::InteractionCorpus corpus;
  data::EmbeddingTable table;
  std::vector<data::IndexedExample> train;
  std::vector<data::IndexedExample> valid;
  std::vector<data::IndexedExample> test;
};

// Splits `corpus` leave-one-out and indexes examples against `table`.
Dataset build_dataset(std::string name, data::InteractionCorpus corpus, data::EmbeddingTable table, int max_len);

struct ExperimentConfig {
  tokenizer::TokenizerConfig tokenizer;
  recommender::RecommenderConfig recommender;
  trainer::PretrainOptions pretrain;
  trainer::TrainSchedule schedule;
  alignment::AlignmentConfig alignment;
  trainer::Variant variant = trainer::Variant::full;
  std::uint64_t seed = 1;
  std::vector<int> ks = {5, 10};

  // Copies the shared vocabulary fields from the tokenizer into the recommender.
  void sync();
  void validate() const;
};

// Small model sized for the planted synthetic corpus on one CPU core.
ExperimentConfig synthetic_config();
data::PlantedCorpusOptions synthetic_corpus_options();
// Planted corpus, 5-core filter, SVD embeddings from the training portion.
Dataset synthetic_dataset(const data::PlantedCorpusOptions& options, int embedding_dim, int max_len);

std::unique_ptr<tokenizer::Tokenizer> clone(const tokenizer::Tokenizer& tok);

// Fresh tokenizer, k-means codebooks, then L_SQ pretraining.
std::unique_ptr<tokenizer::Tokenizer> pretrain(const Dataset& ds, const ExperimentConfig& cfg,
                                               trainer::PretrainReport* report = nullptr);

struct ExperimentResult {
  std::unique_ptr<tokenizer::Tokenizer> tokenizer;
  std::unique_ptr<recommender::Recommender> recommender;
  tokenizer::IdentifierMap ids;
  trainer::TrainReport report;
  evaldecode::MetricsTable test;
};

// Trains from a copy of `pretrained` according to cfg.variant and evaluates on test.
ExperimentResult run_experiment(const Dataset& ds, const tokenizer::Tokenizer& pretrained, const ExperimentConfig& cfg,
                                const trainer::MetricsSink& sink = {});

}  // namespace etegrec::pipeline
