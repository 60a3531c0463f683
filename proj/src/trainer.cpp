#include "etegrec/trainer.hpp"

#include "etegrec/errors.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <utility>

namespace etegrec::trainer {

using ag::Matrix;
using ag::Tape;
using ag::Var;

Variant parse_variant(const std::string& name) {
  if (name == "full") return Variant::full;
  if (name == "no_sia") return Variant::no_sia;
  if (name == "no_psa") return Variant::no_psa;
  if (name == "no_both") return Variant::no_both;
  if (name == "no_at") return Variant::no_at;
  if (name == "no_ete") return Variant::no_ete;
  throw ConfigError("unknown variant '" + name + "' (expected full, no_sia, no_psa, no_both, no_at, no_ete)");
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_sia: return "no_sia";
    case Variant::no_psa: return "no_psa";
    case Variant::no_both: return "no_both";
    case Variant::no_at: return "no_at";
    case Variant::no_ete: return "no_ete";
  }
  return "?";
}

const char* phase_name(Phase p) {
  switch (p) {
    case Phase::tokenizer: return "tokenizer";
    case Phase::recommender: return "recommender";
    case Phase::joint: return "joint";
    case Phase::final: return "final";
  }
  return "?";
}

void TrainSchedule::validate() const {
  if (cycle_length < 2) throw ConfigError("cycle_length must be >= 2");
  if (tokenizer_lr <= 0.0 || recommender_lr <= 0.0) throw ConfigError("learning rates must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
  if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("epsilon must lie in [0, 1]");
  if (max_cycles < 1 || min_cycles < 0 || min_cycles > max_cycles) throw ConfigError("invalid cycle bounds");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (max_final_epochs < 0) throw ConfigError("max_final_epochs must be >= 0");
  if (batch_size < 2) throw ConfigError("batch_size must be >= 2 (in-batch negatives)");
  if (eval_beam < 1) throw ConfigError("eval_beam must be >= 1");
}

std::uint64_t derive_seed(std::uint64_t root, std::uint64_t component) {
  // splitmix64 finaliser over the pair
  std::uint64_t z = root + 0x9e3779b97f4a7c15ULL * (component + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// %.17g keeps logs exact and stable across runs.
std::string num(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Matrix gather(const Matrix& rows, const std::vector<int>& which) {
  Matrix out(static_cast<ag::Index>(which.size()), rows.cols());
  for (std::size_t i = 0; i < which.size(); ++i) out.row(static_cast<ag::Index>(i)) = rows.row(which[i]);
  return out;
}

struct TeacherBatch {
  std::vector<recommender::TokenSequence> inputs;
  std::vector<recommender::TokenSequence> prefixes;  // BOS + all but the last target token
  std::vector<int> targets;
  std::vector<int> target_rows;
};

TeacherBatch teacher_batch(const std::vector<const data::IndexedExample*>& batch, const tokenizer::IdentifierMap& ids,
                           const recommender::VocabLayout& vocab) {
  TeacherBatch tb;
  tb.inputs.reserve(batch.size());
  tb.prefixes.reserve(batch.size());
  for (const auto* ex : batch) {
    tb.inputs.push_back(recommender::history_tokens(ex->input, ids, vocab));
    const auto tokens = vocab.identifier_tokens(ids.items[static_cast<std::size_t>(ex->target)]);
    std::vector<int> prefix{recommender::VocabLayout::kBos};
    prefix.insert(prefix.end(), tokens.begin(), tokens.end() - 1);
    tb.prefixes.push_back(recommender::TokenSequence::from_ids(std::move(prefix)));
    tb.targets.insert(tb.targets.end(), tokens.begin(), tokens.end());
    tb.target_rows.push_back(ex->target);
  }
  return tb;
}

void check_finite(const char* what, double value, std::int64_t step) {
  if (!std::isfinite(value)) {
    throw DivergenceError(std::string(what) + " became non-finite at step " + std::to_string(step));
  }
}

}  // namespace

void initialize_codebooks(tokenizer::Tokenizer& tok, const data::EmbeddingTable& table, std::uint64_t seed) {
  tok.init_codebooks(tok.encode_all(table.rows), seed);
}

double reconstruction_error(const tokenizer::Tokenizer& tok, const data::EmbeddingTable& table) {
  Tape tape(false);
  Var z = tape.constant(table.rows);
  Var r = tok.encode(tape, z);
  const auto q = tok.quantize(tape, r);
  const Matrix diff = tok.reconstruct(tape, q.quantized).value() - table.rows;
  return diff.squaredNorm() / static_cast<double>(table.rows.rows());
}

std::vector<std::vector<double>> code_utilization(const tokenizer::Tokenizer& tok, const data::EmbeddingTable& table) {
  const auto& cfg = tok.config();
  const auto tokens = tok.assign_tokens(table.rows);
  std::vector<std::vector<double>> out(static_cast<std::size_t>(cfg.levels),
                                       std::vector<double>(static_cast<std::size_t>(cfg.codebook_size), 0.0));
  if (tokens.empty()) return out;
  for (const auto& t : tokens) {
    for (int l = 0; l < cfg.levels; ++l) out[static_cast<std::size_t>(l)][static_cast<std::size_t>(t[static_cast<std::size_t>(l)])] += 1.0;
  }
  for (auto& level : out) {
    for (double& f : level) f /= static_cast<double>(tokens.size());
  }
  return out;
}

PretrainReport pretrain_tokenizer(tokenizer::Tokenizer& tok, const data::EmbeddingTable& table,
                                  const PretrainOptions& options) {
  if (options.epochs < 0) throw ConfigError("pretrain epochs must be >= 0");
  if (options.batch_size < 1) throw ConfigError("pretrain batch size must be >= 1");
  const auto& cfg = tok.config();
  PretrainReport report;
  report.reseeded.assign(static_cast<std::size_t>(cfg.levels), 0);
  report.reconstruction.push_back(reconstruction_error(tok, table));

  tok.set_frozen(false);
  nn::AdamWOptions opt_options;
  opt_options.lr = options.lr;
  opt_options.weight_decay = options.weight_decay;
  nn::AdamW opt(opt_options);
  std::mt19937_64 rng(options.seed);
  const auto n = static_cast<int>(table.rows.rows());
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::int64_t step = 0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (int start = 0; start < n; start += options.batch_size) {
      const int end = std::min(n, start + options.batch_size);
      const std::vector<int> rows(order.begin() + start, order.begin() + end);
      tok.parameters().zero_grad();
      Tape tape(true);
      Var z = tape.constant(gather(table.rows, rows));
      Var r = tok.encode(tape, z);
      const auto q = tok.quantize(tape, r);
      Var z_tilde = tok.reconstruct(tape, tokenizer::Tokenizer::straight_through(r, q.quantized));
      const auto terms = tok.sq_loss(z, q, z_tilde);
      const double loss = terms.total.item();
      if (!std::isfinite(loss)) {
        throw DivergenceError("tokenizer pretraining diverged at epoch " + std::to_string(epoch + 1) + ", step " +
                              std::to_string(step) + ": recon=" + num(terms.recon.item()) + " rq=" + num(terms.rq.item()));
      }
      tape.backward(terms.total);
      opt.step(tok.parameters());
      ++step;
    }
    if (!tok.parameters().all_finite()) {
      throw DivergenceError("tokenizer parameters became non-finite in pretraining epoch " + std::to_string(epoch + 1));
    }
    if (options.reseed_dead_codes) {
      Tape tape(false);
      const auto q = tok.quantize(tape, tok.encode(tape, tape.constant(table.rows)));
      for (int l = 0; l < cfg.levels; ++l) {
        std::vector<std::int64_t> usage(static_cast<std::size_t>(cfg.codebook_size), 0);
        for (const auto& t : q.tokens) ++usage[static_cast<std::size_t>(t[static_cast<std::size_t>(l)])];
        report.reseeded[static_cast<std::size_t>(l)] +=
            tokenizer::reseed_unused_codes(tok.codebook(l).value, usage, q.residuals[static_cast<std::size_t>(l)].value());
      }
    }
    report.reconstruction.push_back(reconstruction_error(tok, table));
    spdlog::info("pretrain epoch {}/{}: reconstruction {:.6g}", epoch + 1, options.epochs, report.reconstruction.back());
  }

  report.utilization = code_utilization(tok, table);
  for (const auto& level : report.utilization) {
    report.used_codes.push_back(static_cast<int>(std::count_if(level.begin(), level.end(), [](double f) { return f > 0.0; })));
  }
  return report;
}

bool check_convergence(const tokenizer::IdentifierMap& previous, const tokenizer::IdentifierMap& current,
                       double epsilon) {
  return tokenizer::identifier_change_fraction(previous, current) <= epsilon;
}

Trainer::Trainer(tokenizer::Tokenizer& tok, recommender::Recommender& rec, const data::EmbeddingTable& table,
                 std::vector<data::IndexedExample> train, std::vector<data::IndexedExample> valid, TrainerOptions options,
                 MetricsSink sink)
    : tok_(tok),
      rec_(rec),
      table_(table),
      train_(std::move(train)),
      valid_(std::move(valid)),
      options_(std::move(options)),
      sink_(std::move(sink)),
      rng_(derive_seed(options_.seed, 17)) {
  options_.schedule.validate();
  options_.alignment.validate();
  if (train_.empty()) throw ConfigError("no training examples");
  nn::AdamWOptions t;
  t.lr = options_.schedule.tokenizer_lr;
  t.weight_decay = options_.schedule.weight_decay;
  t.clip_norm = options_.schedule.clip_norm;
  tok_opt_ = nn::AdamW(t);
  nn::AdamWOptions r = t;
  r.lr = options_.schedule.recommender_lr;
  rec_opt_ = nn::AdamW(r);
  state_.ids = tokenizer::tokenize_corpus(table_, tok_);
}

double Trainer::mu() const {
  const Variant v = options_.variant;
  return v == Variant::no_sia || v == Variant::no_both || v == Variant::no_ete ? 0.0 : options_.alignment.mu;
}

double Trainer::lambda() const {
  const Variant v = options_.variant;
  return v == Variant::no_psa || v == Variant::no_both || v == Variant::no_ete ? 0.0 : options_.alignment.lambda;
}

void Trainer::emit(const std::string& line) const {
  if (sink_) sink_(line);
}

void Trainer::set_phase(Phase phase) {
  state_.phase = phase;
  const bool tok_trains = phase == Phase::tokenizer || phase == Phase::joint;
  const bool rec_trains = phase != Phase::tokenizer;
  tok_.set_frozen(!tok_trains);
  rec_.set_frozen(!rec_trains);
}

StepLosses Trainer::train_step(const std::vector<const data::IndexedExample*>& batch, Phase phase) {
  const auto& vocab = rec_.vocab();
  const int b = static_cast<int>(batch.size());
  const bool rec_trains = phase != Phase::tokenizer;
  const bool tok_trains = phase == Phase::tokenizer || phase == Phase::joint;

  const TeacherBatch tb = teacher_batch(batch, state_.ids, vocab);
  const auto& inputs = tb.inputs;
  const auto& prefixes = tb.prefixes;
  const auto& targets = tb.targets;
  const auto& target_rows = tb.target_rows;

  tok_.parameters().zero_grad();
  rec_.parameters().zero_grad();
  Tape tape(true);
  // The frozen recommender runs in evaluation mode during tokenizer epochs.
  std::mt19937_64* dropout = rec_trains ? &rng_ : nullptr;
  const auto enc = rec_.embed_and_encode(tape, inputs, dropout);
  const auto dec = rec_.decode(tape, enc, prefixes, dropout);
  Var z_seq = rec_.project_sequence_state(tape, enc);
  Var pref = rec_.preference_state(tape, dec);
  if (!z_seq.value().allFinite() || !pref.value().allFinite()) {
    throw DivergenceError("recommender states became non-finite at step " + std::to_string(state_.step));
  }

  Var z = tape.constant(gather(table_.rows, target_rows));
  Var r = tok_.encode(tape, z);
  const auto q = tok_.quantize(tape, r);
  Var z_tilde = tok_.reconstruct(tape, tokenizer::Tokenizer::straight_through(r, q.quantized));

  Var sia = alignment::sia_loss(tape, tok_, z, z_seq, options_.alignment);
  Var psa;
  if (b >= 2) psa = alignment::psa_loss(pref, z_tilde, options_.alignment.tau);

  Var base;
  if (phase == Phase::tokenizer) {
    base = tok_.sq_loss(z, q, z_tilde).total;
  } else if (phase == Phase::joint) {
    base = ag::add(tok_.sq_loss(z, q, z_tilde).total, recommender::rec_loss(dec.logits, targets, b));
  } else {
    base = recommender::rec_loss(dec.logits, targets, b);
  }
  // Joint mode sums both objectives, each carrying its own alignment terms.
  const double weight = phase == Phase::joint ? 2.0 : 1.0;
  Var total = alignment::combine(base, sia, psa, weight * mu(), weight * lambda());

  StepLosses out;
  out.base = base.item();
  out.sia = sia.item();
  out.psa = psa.valid() ? psa.item() : 0.0;
  out.combined = total.item();
  check_finite("training loss", out.combined, state_.step);

  tape.backward(total);
  if (tok_trains) tok_opt_.step(tok_.parameters());
  if (rec_trains) rec_opt_.step(rec_.parameters());
  if (tok_trains && !tok_.parameters().all_finite()) {
    throw DivergenceError("tokenizer parameters became non-finite at step " + std::to_string(state_.step));
  }
  if (rec_trains && !rec_.parameters().all_finite()) {
    throw DivergenceError("recommender parameters became non-finite at step " + std::to_string(state_.step));
  }
  ++state_.step;

  std::ostringstream os;
  os << "{\"event\":\"step\",\"step\":" << state_.step << ",\"cycle\":" << state_.cycle << ",\"epoch\":" << state_.epoch
     << ",\"phase\":\"" << phase_name(phase) << "\",\"base\":" << num(out.base) << ",\"sia\":" << num(out.sia)
     << ",\"psa\":" << num(out.psa) << ",\"combined\":" << num(out.combined) << ",\"tokenizer_hash\":\""
     << hex64(tok_.hash()) << "\",\"recommender_hash\":\"" << hex64(rec_.hash()) << "\",\"ids_hash\":\""
     << hex64(state_.ids.hash()) << "\"}";
  emit(os.str());
  return out;
}

EpochSummary Trainer::run_epoch(Phase phase) {
  set_phase(phase);
  ++state_.epoch;
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng_);
  const auto bs = static_cast<std::size_t>(options_.schedule.batch_size);
  EpochSummary summary;
  summary.phase = phase;
  // Batch boundaries; a trailing singleton joins the previous batch so PSA always has negatives.
  std::vector<std::size_t> bounds;
  for (std::size_t start = 0; start < order.size(); start += bs) bounds.push_back(start);
  bounds.push_back(order.size());
  if (bounds.size() > 2 && bounds[bounds.size() - 1] - bounds[bounds.size() - 2] == 1) bounds.erase(bounds.end() - 2);
  for (std::size_t k = 0; k + 1 < bounds.size(); ++k) {
    std::vector<const data::IndexedExample*> batch;
    batch.reserve(bounds[k + 1] - bounds[k]);
    for (std::size_t i = bounds[k]; i < bounds[k + 1]; ++i) batch.push_back(&train_[order[i]]);
    const StepLosses l = train_step(batch, phase);
    summary.mean.base += l.base;
    summary.mean.sia += l.sia;
    summary.mean.psa += l.psa;
    summary.mean.combined += l.combined;
    ++summary.steps;
  }
  if (summary.steps > 0) {
    const double s = static_cast<double>(summary.steps);
    summary.mean.base /= s;
    summary.mean.sia /= s;
    summary.mean.psa /= s;
    summary.mean.combined /= s;
  }
  std::ostringstream os;
  os << "{\"event\":\"epoch\",\"cycle\":" << state_.cycle << ",\"epoch\":" << state_.epoch << ",\"phase\":\""
     << phase_name(phase) << "\",\"steps\":" << summary.steps << ",\"base\":" << num(summary.mean.base)
     << ",\"sia\":" << num(summary.mean.sia) << ",\"psa\":" << num(summary.mean.psa)
     << ",\"combined\":" << num(summary.mean.combined) << "}";
  emit(os.str());
  spdlog::info("cycle {} epoch {} [{}]: base {:.5g} sia {:.5g} psa {:.5g}", state_.cycle, state_.epoch, phase_name(phase),
               summary.mean.base, summary.mean.sia, summary.mean.psa);
  return summary;
}

EpochSummary Trainer::tokenizer_epoch() { return run_epoch(Phase::tokenizer); }
EpochSummary Trainer::recommender_epoch() { return run_epoch(Phase::recommender); }
EpochSummary Trainer::joint_epoch() { return run_epoch(Phase::joint); }

void Trainer::retokenize() {
  tokenizer::IdentifierMap next = tokenizer::tokenize_corpus(table_, tok_);
  state_.last_change = tokenizer::identifier_change_fraction(state_.ids, next);
  state_.ids = std::move(next);
  std::ostringstream os;
  os << "{\"event\":\"retokenize\",\"cycle\":" << state_.cycle << ",\"epoch\":" << state_.epoch
     << ",\"change_fraction\":" << num(state_.last_change) << ",\"tokenizer_hash\":\"" << hex64(tok_.hash())
     << "\",\"ids_hash\":\"" << hex64(state_.ids.hash()) << "\"}";
  emit(os.str());
}

double Trainer::rec_loss_on(const std::vector<data::IndexedExample>& examples) const {
  if (examples.empty()) throw ConfigError("rec_loss_on: no examples");
  const auto bs = static_cast<std::size_t>(options_.schedule.batch_size);
  double total = 0.0;
  for (std::size_t start = 0; start < examples.size(); start += bs) {
    std::vector<const data::IndexedExample*> batch;
    for (std::size_t i = start; i < std::min(examples.size(), start + bs); ++i) batch.push_back(&examples[i]);
    const TeacherBatch tb = teacher_batch(batch, state_.ids, rec_.vocab());
    Tape tape(false);
    const auto enc = rec_.embed_and_encode(tape, tb.inputs);
    const auto dec = rec_.decode(tape, enc, tb.prefixes);
    // rec_loss averages over the batch; undo that to weight batches by size
    total += recommender::rec_loss(dec.logits, tb.targets, static_cast<int>(batch.size())).item() *
             static_cast<double>(batch.size());
  }
  return total / static_cast<double>(examples.size());
}

double Trainer::validate() {
  std::vector<data::IndexedExample> subset = valid_;
  if (options_.schedule.max_valid_users > 0 && subset.size() > options_.schedule.max_valid_users) {
    subset.resize(options_.schedule.max_valid_users);
  }
  double recall = 0.0;
  if (!subset.empty()) {
    evaldecode::EvalOptions eo;
    eo.ks = {10};
    eo.beam = options_.schedule.eval_beam;
    recall = evaldecode::evaluate(rec_, tok_, state_.ids, subset, eo).recall.at(10);
  }
  state_.valid_history.push_back(recall);
  std::ostringstream os;
  os << "{\"event\":\"valid\",\"cycle\":" << state_.cycle << ",\"epoch\":" << state_.epoch << ",\"phase\":\""
     << phase_name(state_.phase) << "\",\"recall@10\":" << num(recall) << ",\"users\":" << subset.size() << "}";
  emit(os.str());
  spdlog::info("validation recall@10 = {:.4f} ({} users)", recall, subset.size());
  return recall;
}

bool Trainer::run_cycle() {
  ++state_.cycle;
  const int c = options_.schedule.cycle_length;
  if (options_.variant == Variant::no_at) {
    // No alternation: every epoch updates both components, identifiers refreshed after each.
    double change = 0.0;
    for (int e = 0; e < c; ++e) {
      joint_epoch();
      retokenize();
      change = std::max(change, state_.last_change);
    }
    state_.last_change = change;
  } else {
    tokenizer_epoch();
    retokenize();
    for (int e = 1; e < c; ++e) recommender_epoch();
  }
  if (options_.schedule.validate_each_cycle) validate();
  const bool converged = state_.cycle >= options_.schedule.min_cycles && state_.last_change <= options_.schedule.epsilon;
  std::ostringstream os;
  os << "{\"event\":\"cycle\",\"cycle\":" << state_.cycle << ",\"change_fraction\":" << num(state_.last_change)
     << ",\"converged\":" << (converged ? "true" : "false") << "}";
  emit(os.str());
  if (cycle_hook_) cycle_hook_(*this);
  return converged;
}

int Trainer::finalize() {
  set_phase(Phase::final);
  const std::uint64_t tok_hash = tok_.hash();
  double best = -1.0;
  std::vector<Matrix> best_params;
  std::vector<Matrix> best_m;
  std::vector<Matrix> best_v;
  std::int64_t best_steps = 0;
  auto snapshot = [&] {
    best_params.clear();
    for (const auto* p : std::as_const(rec_).parameters().all()) best_params.push_back(p->value);
    best_m = rec_opt_.first_moments();
    best_v = rec_opt_.second_moments();
    best_steps = rec_opt_.steps();
  };
  // The pre-finalize state counts as a candidate so the returned model is never worse on validation.
  best = validate();
  snapshot();
  int bad = 0;
  int epochs = 0;
  for (int e = 0; e < options_.schedule.max_final_epochs; ++e) {
    run_epoch(Phase::final);
    ++epochs;
    const double r = validate();
    if (r > best) {
      best = r;
      snapshot();
      bad = 0;
    } else if (++bad >= options_.schedule.patience) {
      break;
    }
  }
  auto params = rec_.parameters().all();
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best_params[i];
  rec_opt_.first_moments() = best_m;
  rec_opt_.second_moments() = best_v;
  rec_opt_.set_steps(best_steps);
  if (tok_.hash() != tok_hash) throw std::logic_error("tokenizer changed during finalize");
  std::ostringstream os;
  os << "{\"event\":\"finalize\",\"epochs\":" << epochs << ",\"best_recall@10\":" << num(best)
     << ",\"recommender_hash\":\"" << hex64(rec_.hash()) << "\"}";
  emit(os.str());
  return epochs;
}

TrainReport Trainer::run() {
  TrainReport report;
  while (state_.cycle < options_.schedule.max_cycles) {
    const bool converged = run_cycle();
    report.change_fractions.push_back(state_.last_change);
    if (converged) {
      report.converged = true;
      break;
    }
  }
  report.cycles = state_.cycle;
  report.final_epochs = finalize();
  report.best_valid_recall = state_.valid_history.empty()
                                 ? 0.0
                                 : *std::max_element(state_.valid_history.end() - (report.final_epochs + 1),
                                                     state_.valid_history.end());
  return report;
}

std::string Trainer::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void Trainer::set_rng_state(const std::string& s) {
  std::istringstream is(s);
  is >> rng_;
  if (!is) throw FormatError("corrupt trainer RNG state");
}

}  // namespace etegrec::trainer
