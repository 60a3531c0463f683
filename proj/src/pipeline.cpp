#include "etegrec/pipeline.hpp"

#include "etegrec/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>

namespace etegrec::pipeline {

Dataset build_dataset(std::string name, data::InteractionCorpus corpus, data::EmbeddingTable table, int max_len) {
  Dataset ds;
  ds.name = std::move(name);
  const auto examples = data::split_leave_one_out(corpus, max_len);
  ds.train = data::index_examples(examples, table.index, data::Split::train);
  ds.valid = data::index_examples(examples, table.index, data::Split::valid);
  ds.test = data::index_examples(examples, table.index, data::Split::test);
  ds.corpus = std::move(corpus);
  ds.table = std::move(table);
  return ds;
}

void ExperimentConfig::sync() {
  recommender.levels = tokenizer.levels;
  recommender.codebook_size = tokenizer.codebook_size;
  recommender.suffix_capacity = tokenizer.suffix_capacity;
  recommender.semantic_dim = tokenizer.input_dim;
}

void ExperimentConfig::validate() const {
  tokenizer.validate();
  recommender.validate();
  schedule.validate();
  alignment.validate();
  if (recommender.levels != tokenizer.levels || recommender.codebook_size != tokenizer.codebook_size ||
      recommender.suffix_capacity != tokenizer.suffix_capacity || recommender.semantic_dim != tokenizer.input_dim) {
    throw ConfigError("recommender vocabulary/semantic sizes disagree with the tokenizer");
  }
}

ExperimentConfig synthetic_config() {
  ExperimentConfig c;
  c.tokenizer.levels = 2;
  c.tokenizer.codebook_size = 16;
  c.tokenizer.code_dim = 16;
  c.tokenizer.hidden = {64, 32};
  c.tokenizer.input_dim = 32;
  c.recommender.encoder_layers = 2;
  c.recommender.decoder_layers = 2;
  c.recommender.d_model = 32;
  c.recommender.d_ff = 64;
  c.recommender.heads = 2;
  c.recommender.head_dim = 16;
  c.recommender.dropout = 0.1;
  c.recommender.max_len = 12;
  c.recommender.projection_hidden = {32};
  c.pretrain.epochs = 30;
  c.pretrain.lr = 1e-3;
  c.pretrain.batch_size = 64;
  c.schedule.cycle_length = 2;
  c.schedule.tokenizer_lr = 1e-4;
  c.schedule.recommender_lr = 3e-3;
  c.schedule.max_cycles = 10;
  c.schedule.patience = 2;
  c.schedule.max_final_epochs = 10;
  c.schedule.batch_size = 128;
  c.schedule.max_valid_users = 300;
  c.sync();
  return c;
}

data::PlantedCorpusOptions synthetic_corpus_options() { return data::PlantedCorpusOptions{}; }

Dataset synthetic_dataset(const data::PlantedCorpusOptions& options, int embedding_dim, int max_len) {
  const data::PlantedCorpus planted = data::make_planted_corpus(options);
  data::InteractionCorpus corpus = data::apply_k_core(planted.corpus, 5);
  const data::ItemIndex index = data::ItemIndex::from_corpus(corpus);
  data::EmbeddingTable table = data::derive_embeddings_svd(data::training_portion(corpus), index, embedding_dim);
  data::l2_normalize(table);
  return build_dataset("synthetic", std::move(corpus), std::move(table), max_len);
}

std::unique_ptr<tokenizer::Tokenizer> clone(const tokenizer::Tokenizer& tok) {
  auto out = std::make_unique<tokenizer::Tokenizer>(tok.config(), 0);
  out->parameters().assign_values(tok.parameters());
  return out;
}

std::unique_ptr<tokenizer::Tokenizer> pretrain(const Dataset& ds, const ExperimentConfig& cfg,
                                               trainer::PretrainReport* report) {
  auto tok = std::make_unique<tokenizer::Tokenizer>(cfg.tokenizer, trainer::derive_seed(cfg.seed, 1));
  trainer::initialize_codebooks(*tok, ds.table, trainer::derive_seed(cfg.seed, 2));
  trainer::PretrainOptions po = cfg.pretrain;
  po.seed = trainer::derive_seed(cfg.seed, 3);
  trainer::PretrainReport r = trainer::pretrain_tokenizer(*tok, ds.table, po);
  if (report != nullptr) *report = std::move(r);
  return tok;
}

namespace {

ExperimentResult train_once(const Dataset& ds, std::unique_ptr<tokenizer::Tokenizer> tok, const ExperimentConfig& cfg,
                            trainer::Variant variant, std::uint64_t rec_seed, bool cycles,
                            const trainer::MetricsSink& sink) {
  ExperimentResult res;
  res.tokenizer = std::move(tok);
  res.recommender = std::make_unique<recommender::Recommender>(cfg.recommender, rec_seed);
  trainer::TrainerOptions to;
  to.schedule = cfg.schedule;
  to.alignment = cfg.alignment;
  to.variant = variant;
  to.seed = trainer::derive_seed(cfg.seed, 5);
  trainer::Trainer t(*res.tokenizer, *res.recommender, ds.table, ds.train, ds.valid, to, sink);
  if (cycles) {
    res.report = t.run();
  } else {
    res.report.final_epochs = t.finalize();
    const auto& h = t.state().valid_history;
    res.report.best_valid_recall = h.empty() ? 0.0 : *std::max_element(h.begin(), h.end());
  }
  res.ids = t.state().ids;
  evaldecode::EvalOptions eo;
  eo.ks = cfg.ks;
  eo.beam = cfg.schedule.eval_beam;
  eo.dataset = ds.name;
  res.test = evaldecode::evaluate(*res.recommender, *res.tokenizer, res.ids, ds.test, eo);
  return res;
}

}  // namespace

ExperimentResult run_experiment(const Dataset& ds, const tokenizer::Tokenizer& pretrained, const ExperimentConfig& cfg,
                                const trainer::MetricsSink& sink) {
  cfg.validate();
  const std::uint64_t rec_seed = trainer::derive_seed(cfg.seed, 4);
  if (cfg.variant != trainer::Variant::no_ete) {
    return train_once(ds, clone(pretrained), cfg, cfg.variant, rec_seed, true, sink);
  }
  // Identifiers come from a complete full-variant run; a fresh recommender is
  // then trained against them with the tokenizer frozen.
  ExperimentResult full = train_once(ds, clone(pretrained), cfg, trainer::Variant::full, rec_seed, true, sink);
  spdlog::info("no_ete: retraining a fresh recommender on the final identifiers");
  return train_once(ds, std::move(full.tokenizer), cfg, trainer::Variant::no_ete,
                    trainer::derive_seed(cfg.seed, 6), false, sink);
}

}  // namespace etegrec::pipeline
