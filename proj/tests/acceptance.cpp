// Acceptance runner: one PASS/FAIL line per gated criterion.
//
//   acceptance [--only 1,2,5] [--quiet]

#include "etegrec/alignment.hpp"
#include "etegrec/evaldecode.hpp"
#include "etegrec/pipeline.hpp"
#include "etegrec/recommender.hpp"
#include "etegrec/tokenizer.hpp"
#include "etegrec/trainer.hpp"
#include "support.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace etegrec;
using ag::Matrix;
using ag::Tape;
using ag::Var;
using testsupport::numeric_gradient;
using testsupport::random_matrix;
using testsupport::relative_error;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------- 1

Outcome quantization_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2024);
  int mismatches = 0;
  for (int i = 0; i < 500; ++i) {
    tokenizer::TokenizerConfig c;
    c.levels = 1 + static_cast<int>(rng() % 3);
    c.codebook_size = 2 + static_cast<int>(rng() % 7);
    c.code_dim = 1 + static_cast<int>(rng() % 8);
    c.input_dim = c.code_dim;
    c.hidden = {};
    tokenizer::Tokenizer tok(c, rng());
    const tokenizer::Vector r = random_matrix(c.code_dim, 1, rng);
    const auto got = tok.quantize(r).tokens;
    tokenizer::Vector v = r;
    for (int l = 0; l < c.levels; ++l) {
      const Matrix& cb = tok.codebook(l).value;
      int best = 0;
      double best_d = (v - cb.row(0).transpose()).squaredNorm();
      for (int k = 1; k < cb.rows(); ++k) {
        const double d = (v - cb.row(k).transpose()).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      if (got[static_cast<std::size_t>(l)] != best) ++mismatches;
      v -= cb.row(best).transpose();
    }
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 10.0,
          std::to_string(mismatches) + " mismatches over 500 instances in " + fmt("%.3f", secs) + " s"};
}

// ---------------------------------------------------------------- 2

tokenizer::Tokenizer identity_tokenizer(int levels, int k, int dim) {
  tokenizer::TokenizerConfig c;
  c.levels = levels;
  c.codebook_size = k;
  c.code_dim = dim;
  c.input_dim = dim;
  c.hidden = {};
  tokenizer::Tokenizer tok(c, 1);
  for (const nn::Mlp* m : {&tok.encoder(), &tok.decoder()}) {
    m->layers[0].weight->value.setIdentity();
    m->layers[0].bias->value.setZero();
  }
  return tok;
}

Outcome loss_values() {
  std::vector<std::pair<std::string, double>> errs;
  Tape tape(false);
  {
    auto tok = identity_tokenizer(1, 2, 2);
    tok.codebook(0).value << 0, 0, 5, 5;
    Matrix z(1, 2);
    z << 1, 0;
    auto zv = tape.constant(z);
    auto q = tok.quantize(tape, tok.encode(tape, zv));
    auto t = tok.sq_loss(zv, q, tok.reconstruct(tape, q.quantized));
    errs.emplace_back("rq", std::abs(t.rq.item() - 1.25));
    Matrix hit(1, 2);
    hit << 5, 5;
    auto hv = tape.constant(hit);
    auto q2 = tok.quantize(tape, tok.encode(tape, hv));
    errs.emplace_back("sq_zero", std::abs(tok.sq_loss(hv, q2, tok.reconstruct(tape, q2.quantized)).total.item()));
  }
  {
    auto tok = identity_tokenizer(1, 2, 2);
    tok.codebook(0).value << 0, 0, 1, 0;
    Matrix a(1, 2), b(1, 2);
    a << 0, 0;
    b << 1, 0;
    alignment::AlignmentConfig cfg;
    cfg.sia_sign = -1.0;  // negated form, as the hand value is stated
    const double v = alignment::sia_loss(tape, tok, tape.constant(a), tape.constant(b), cfg).item();
    errs.emplace_back("sia", std::abs(v - (-0.9242)));
    errs.emplace_back("sia_zero", std::abs(alignment::sia_loss(tape, tok, tape.constant(a), tape.constant(a), cfg).item()));
  }
  {
    Matrix h(2, 2), zt(2, 2);
    h << 1, 0, 0, 1;
    zt << 2, 0, 0, 3;
    errs.emplace_back("psa", std::abs(alignment::psa_loss(tape.constant(h), tape.constant(zt), 1.0).item() - 0.6265));
    const Matrix same = Matrix::Constant(5, 3, 1.0);
    errs.emplace_back("psa_uniform",
                      std::abs(alignment::psa_loss(tape.constant(same), tape.constant(same), 0.07).item() - 2 * std::log(5.0)));
  }
  {
    errs.emplace_back("rec_uniform",
                      std::abs(recommender::rec_loss(tape.constant(Matrix::Zero(4, 50)), {1, 2, 3, 4}, 1).item() -
                               4 * std::log(50.0)));
    errs.emplace_back("rec_two_way", std::abs(recommender::rec_loss(tape.constant(Matrix::Zero(1, 2)), {1}, 1).item() - 0.6931));
    Matrix m = Matrix::Zero(1, 3);
    m(0, 2) = 20.0;
    const double margin = recommender::rec_loss(tape.constant(m), {2}, 1).item();
    errs.emplace_back("rec_margin", margin < 1e-6 ? 0.0 : margin);
  }
  errs.emplace_back("combine", std::abs(alignment::combine_tokenizer_objective(1.0, 2.0, 3.0, 0.1, 0.01) - 1.23));
  double worst = 0.0;
  std::string which;
  for (const auto& [n, e] : errs) {
    if (e > worst) {
      worst = e;
      which = n;
    }
  }
  return {worst <= 1e-4, std::to_string(errs.size()) + " values, max abs error " + fmt("%.2e", worst) +
                             (which.empty() ? "" : " (" + which + ")")};
}

// ---------------------------------------------------------------- 3

Outcome gradient_checks() {
  std::map<std::string, double> rel;
  bool zeros_ok = true;
  std::mt19937_64 rng(31);

  tokenizer::TokenizerConfig tc;
  tc.levels = 1;
  tc.codebook_size = 4;
  tc.code_dim = 3;
  tc.input_dim = 4;
  tc.hidden = {5};
  tokenizer::Tokenizer tok(tc, 21);
  const Matrix z = random_matrix(5, 4, rng);
  auto& enc_w = *tok.encoder().layers[0].weight;
  auto& cb = tok.codebook(0);
  // one hidden pre-activation of this draw sits ~4e-6 from the ReLU kink,
  // so encoder-side steps stay below that
  const double h_enc = 1e-6;

  // reconstruction through the straight-through path
  {
    tok.parameters().zero_grad();
    Tape tape(true);
    auto zv = tape.constant(z);
    auto r = tok.encode(tape, zv);
    auto q = tok.quantize(tape, r);
    const Matrix gap = q.quantized.value() - r.value();
    tape.backward(tok.sq_loss(zv, q, tok.reconstruct(tape, tokenizer::Tokenizer::straight_through(r, q.quantized))).recon);
    zeros_ok = zeros_ok && cb.grad.cwiseAbs().maxCoeff() == 0.0;
    auto f = [&] {
      Tape t(false);
      auto zz = t.constant(z);
      auto zt = tok.reconstruct(t, ag::add(tok.encode(t, zz), t.constant(gap)));
      return ag::square_sum(ag::sub(zz, zt)).item() / 5.0;
    };
    rel["recon"] = relative_error(enc_w.grad, numeric_gradient(enc_w.value, f, h_enc));
  }
  // both RQ terms
  auto rq_value = [&](double scale) {
    Tape t(false);
    auto q = tok.quantize(t, tok.encode(t, t.constant(z)));
    return scale * ag::square_sum(ag::sub(q.residuals[0], q.selected[0])).item() / 5.0;
  };
  {
    tok.parameters().zero_grad();
    Tape tape(true);
    auto q = tok.quantize(tape, tok.encode(tape, tape.constant(z)));
    tape.backward(ag::scale(ag::square_sum(ag::sub(ag::detach(q.residuals[0]), q.selected[0])), 0.2));
    zeros_ok = zeros_ok && enc_w.grad.cwiseAbs().maxCoeff() == 0.0;
    rel["rq_codebook"] = relative_error(cb.grad, numeric_gradient(cb.value, [&] { return rq_value(1.0); }, 1e-4));
  }
  {
    tok.parameters().zero_grad();
    Tape tape(true);
    auto q = tok.quantize(tape, tok.encode(tape, tape.constant(z)));
    tape.backward(ag::scale(ag::square_sum(ag::sub(q.residuals[0], ag::detach(q.selected[0]))), tc.beta / 5.0));
    zeros_ok = zeros_ok && cb.grad.cwiseAbs().maxCoeff() == 0.0;
    rel["rq_commit"] = relative_error(enc_w.grad, numeric_gradient(enc_w.value, [&] { return rq_value(tc.beta); }, h_enc));
  }
  // SIA over a two-level tokenizer, full residual chain
  {
    tokenizer::TokenizerConfig c2 = tc;
    c2.levels = 2;
    tokenizer::Tokenizer t2(c2, 5);
    const Matrix ze = random_matrix(5, 4, rng);
    alignment::AlignmentConfig ac;
    auto f = [&] {
      Tape t(false);
      return alignment::sia_loss(t, t2, t.constant(z), t.constant(ze), ac).item();
    };
    t2.parameters().zero_grad();
    Tape tape(true);
    tape.backward(alignment::sia_loss(tape, t2, tape.constant(z), tape.constant(ze), ac));
    double worst = 0.0;
    for (auto* p : t2.parameters().all()) {
      if (p->name.rfind("decoder", 0) == 0) continue;
      worst = std::max(worst, relative_error(p->grad, numeric_gradient(p->value, f, 1e-5)));
    }
    rel["sia"] = worst;
  }
  // PSA w.r.t. both inputs
  {
    Matrix h = random_matrix(4, 3, rng);
    Matrix zt = random_matrix(4, 3, rng);
    Tape tape(true);
    auto hv = tape.input(h);
    auto zv = tape.input(zt);
    tape.backward(alignment::psa_loss(hv, zv, 0.2));
    auto f = [&] {
      Tape t(false);
      return alignment::psa_loss(t.constant(h), t.constant(zt), 0.2).item();
    };
    rel["psa"] = std::max(relative_error(hv.grad(), numeric_gradient(h, f)), relative_error(zv.grad(), numeric_gradient(zt, f)));
  }
  // REC on a two-layer, width-8 model
  {
    recommender::RecommenderConfig rc;
    rc.encoder_layers = rc.decoder_layers = 2;
    rc.d_model = 8;
    rc.d_ff = 16;
    rc.heads = 2;
    rc.head_dim = 4;
    rc.dropout = 0.0;
    rc.max_len = 4;
    rc.levels = 2;
    rc.codebook_size = 3;
    rc.suffix_capacity = 2;
    rc.semantic_dim = 4;
    recommender::Recommender rec(rc, 3);
    const auto& v = rec.vocab();
    const std::vector<int> target{v.level_token(0, 2), v.level_token(1, 0), v.suffix_token(1)};
    const std::vector<recommender::TokenSequence> in{recommender::TokenSequence::from_ids({2, 7, 5, 3, 9})};
    const std::vector<recommender::TokenSequence> pre{
        recommender::TokenSequence::from_ids({recommender::VocabLayout::kBos, target[0], target[1]})};
    auto loss = [&](Tape& t) {
      auto e = rec.embed_and_encode(t, in);
      return recommender::rec_loss(rec.decode(t, e, pre).logits, target, 1);
    };
    rec.parameters().zero_grad();
    Tape tape(true);
    tape.backward(loss(tape));
    auto f = [&] {
      Tape t(false);
      return loss(t).item();
    };
    auto& emb = rec.parameters().get("embedding");
    Matrix row = emb.value.row(7);
    const Matrix analytic = emb.grad.row(7);
    const Matrix numeric = numeric_gradient(row, [&] {
      emb.value.row(7) = row;
      return f();
    }, 1e-3);
    emb.value.row(7) = row;
    double worst = relative_error(analytic, numeric);
    for (const char* name : {"encoder.0.self.q", "decoder.1.cross.v", "decoder.0.ff1", "encoder.1.norm2"}) {
      auto& p = rec.parameters().get(name);
      worst = std::max(worst, relative_error(p.grad, numeric_gradient(p.value, f, 1e-5)));
    }
    rel["rec"] = worst;
  }
  double worst = 0.0;
  std::ostringstream os;
  for (const auto& [n, e] : rel) {
    worst = std::max(worst, e);
    os << n << "=" << fmt("%.1e", e) << " ";
  }
  os << "stop-gradient zeros " << (zeros_ok ? "exact" : "VIOLATED");
  return {worst < 1e-3 && zeros_ok, os.str()};
}

// ---------------------------------------------------------------- 4

Outcome beam_exhaustive() {
  const int levels = 3, k = 3;
  std::vector<std::string> names;
  std::vector<std::vector<int>> toks;
  for (int i = 0; i < 27; ++i) {
    names.push_back("item" + std::to_string(10 + i));
    toks.push_back({i / 9, (i / 3) % 3, i % 3});
  }
  const auto ids = tokenizer::assign_suffixes(toks, data::ItemIndex(names), levels, k, 2);
  recommender::RecommenderConfig rc;
  rc.encoder_layers = rc.decoder_layers = 2;
  rc.d_model = 16;
  rc.d_ff = 32;
  rc.heads = 2;
  rc.head_dim = 8;
  rc.dropout = 0.0;
  rc.max_len = 5;
  rc.levels = levels;
  rc.codebook_size = k;
  rc.suffix_capacity = 2;
  rc.semantic_dim = 4;
  int identical = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    recommender::Recommender rec(rc, seed);
    const auto trie = evaldecode::PrefixTrie::build(ids, rec.vocab());
    std::mt19937_64 rng(seed * 7);
    std::vector<int> hist;
    for (int i = 0; i < 3; ++i) hist.push_back(static_cast<int>(rng() % 27));
    const auto input = recommender::history_tokens(hist, ids, rec.vocab());
    const auto beam = evaldecode::beam_search(rec, input, trie, 27);
    // exhaustive: score every identifier by its own stepwise log-probabilities
    evaldecode::RecommenderScorer scorer(rec, input);
    std::vector<std::tuple<double, std::vector<int>, int>> all;
    for (const auto& [tokens, item] : trie.enumerate()) {
      double s = 0.0;
      for (std::size_t j = 0; j < tokens.size(); ++j) {
        const std::vector<int> prefix(tokens.begin(), tokens.begin() + static_cast<long>(j));
        s += scorer.next_log_probs({prefix})[0](tokens[j]);
      }
      all.emplace_back(s, tokens, item);
    }
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      return std::get<1>(a) < std::get<1>(b);
    });
    std::vector<int> order;
    for (const auto& e : all) order.push_back(std::get<2>(e));
    if (order == beam.items) ++identical;
  }
  return {identical == 20, std::to_string(identical) + "/20 seeds give the exhaustive order"};
}

// ---------------------------------------------------------------- 5

Outcome metric_oracles() {
  std::mt19937_64 rng(77);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const int n = 1 + static_cast<int>(rng() % 30);
    std::vector<int> pool(60);
    std::iota(pool.begin(), pool.end(), 0);
    std::shuffle(pool.begin(), pool.end(), rng);
    evaldecode::RankingResult r;
    r.items.assign(pool.begin(), pool.begin() + n);
    const int target = static_cast<int>(rng() % 60);
    const int k = 1 + static_cast<int>(rng() % 25);
    int rank = 0;
    for (int j = 0; j < n; ++j) {
      if (r.items[static_cast<std::size_t>(j)] == target) rank = j + 1;
    }
    const int rec = rank > 0 && rank <= k ? 1 : 0;
    double ndcg = 0.0;
    if (rank > 0 && rank <= k) ndcg = 1.0 / (std::log(rank + 1.0) / std::log(2.0));
    if (evaldecode::recall_at_k(r, target, k) != rec) ++mismatches;
    if (std::abs(evaldecode::ndcg_at_k(r, target, k) - ndcg) > 1e-12) ++mismatches;
  }
  evaldecode::RankingResult two;
  two.items = {4, 9, 1};
  const double err = std::abs(evaldecode::ndcg_at_k(two, 9, 10) - 1.0 / std::log2(3.0));
  return {mismatches == 0 && err < 1e-6,
          std::to_string(mismatches) + " mismatches over 1000 rankings; rank-2 NDCG error " + fmt("%.1e", err)};
}

// ---------------------------------------------------------------- 6, 7, 9

struct SyntheticRuns {
  pipeline::Dataset ds;
  pipeline::ExperimentConfig cfg;
  std::map<std::uint64_t, std::unique_ptr<tokenizer::Tokenizer>> pretrained;

  SyntheticRuns() {
    cfg = pipeline::synthetic_config();
    ds = pipeline::synthetic_dataset(pipeline::synthetic_corpus_options(), cfg.tokenizer.input_dim, cfg.recommender.max_len);
  }
  const tokenizer::Tokenizer& tokenizer_for(std::uint64_t seed) {
    auto& slot = pretrained[seed];
    if (!slot) {
      auto c = cfg;
      c.seed = seed;
      slot = pipeline::pretrain(ds, c);
    }
    return *slot;
  }
  struct Run {
    double recall10 = 0.0;
    int cycles = 0;
    double seconds = 0.0;
    std::string log;
  };
  Run run(trainer::Variant v, std::uint64_t seed) {
    const auto t0 = Clock::now();
    auto c = cfg;
    c.seed = seed;
    c.variant = v;
    std::ostringstream log;
    const auto& tok = tokenizer_for(seed);
    auto res = pipeline::run_experiment(ds, tok, c, [&](const std::string& l) { log << l << '\n'; });
    Run out;
    out.recall10 = res.test.recall.at(10);
    out.cycles = res.report.cycles;
    out.seconds = seconds_since(t0);
    out.log = log.str();
    return out;
  }
};

SyntheticRuns& synthetic() {
  static SyntheticRuns s;
  return s;
}

std::map<std::pair<int, std::uint64_t>, SyntheticRuns::Run>& run_cache() {
  static std::map<std::pair<int, std::uint64_t>, SyntheticRuns::Run> c;
  return c;
}

const SyntheticRuns::Run& cached_run(trainer::Variant v, std::uint64_t seed) {
  auto key = std::make_pair(static_cast<int>(v), seed);
  auto it = run_cache().find(key);
  if (it == run_cache().end()) it = run_cache().emplace(key, synthetic().run(v, seed)).first;
  return it->second;
}

Outcome synthetic_end_to_end() {
  const auto t0 = Clock::now();
  auto& s = synthetic();
  const auto& r = cached_run(trainer::Variant::full, 1);
  const double secs = seconds_since(t0);
  const double baseline = 0.05;
  return {r.recall10 >= 3 * baseline && r.cycles <= 30 && secs < 1800.0,
          "Recall@10 " + fmt("%.4f", r.recall10) + " (threshold " + fmt("%.2f", 3 * baseline) + ") after " +
              std::to_string(r.cycles) + " cycles, " + fmt("%.0f", secs) + " s; " + std::to_string(s.ds.table.rows.rows()) +
              " items, " + std::to_string(s.ds.test.size()) + " test users"};
}

Outcome ablation_directionality() {
  const std::vector<std::pair<trainer::Variant, std::string>> variants{{trainer::Variant::full, "full"},
                                                                       {trainer::Variant::no_sia, "no_sia"},
                                                                       {trainer::Variant::no_psa, "no_psa"},
                                                                       {trainer::Variant::no_both, "no_both"}};
  std::map<std::string, double> mean;
  for (const auto& [v, name] : variants) {
    double sum = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) sum += cached_run(v, seed).recall10;
    mean[name] = sum / 3.0;
  }
  std::ostringstream os;
  for (const auto& [v, name] : variants) os << name << "=" << fmt("%.4f", mean[name]) << " ";
  const bool ok = mean["full"] >= mean["no_sia"] && mean["full"] >= mean["no_psa"] && mean["full"] >= mean["no_both"];
  os << "(mean Recall@10 over seeds 1-3; per seed";
  for (const auto& [v, name] : variants) {
    os << " " << name;
    for (std::uint64_t seed : {1, 2, 3}) os << (seed == 1 ? " " : "/") << fmt("%.4f", cached_run(v, seed).recall10);
  }
  os << ")";
  return {ok, os.str()};
}

Outcome determinism() {
  const auto& a = cached_run(trainer::Variant::full, 1);
  const auto b = synthetic().run(trainer::Variant::full, 1);
  const bool same = !a.log.empty() && a.log == b.log;
  return {same, std::to_string(a.log.size()) + " vs " + std::to_string(b.log.size()) + " log bytes, " +
                    (same ? "byte-identical" : "DIFFERENT")};
}

// ---------------------------------------------------------------- 8

Outcome schedule_audit() {
  auto& s = synthetic();
  auto c = s.cfg;
  c.seed = 11;
  c.schedule.min_cycles = 10;
  c.schedule.max_cycles = 10;
  c.schedule.max_final_epochs = 1;
  c.schedule.validate_each_cycle = false;
  std::vector<nlohmann::json> events;
  auto res = pipeline::run_experiment(s.ds, s.tokenizer_for(1), c,
                                      [&](const std::string& l) { events.push_back(nlohmann::json::parse(l)); });
  int violations = 0;
  int steps = 0;
  int retokenizations = 0;
  std::string prev_tok, prev_rec, ids;
  std::string phase_prev;
  for (const auto& e : events) {
    const std::string kind = e["event"];
    if (kind == "retokenize") {
      // only after a tokenizer epoch, i.e. at the cycle boundary
      if (phase_prev != "tokenizer") ++violations;
      ids = e["ids_hash"];
      ++retokenizations;
      continue;
    }
    if (kind != "step") continue;
    ++steps;
    const std::string th = e["tokenizer_hash"], rh = e["recommender_hash"], ih = e["ids_hash"], ph = e["phase"];
    if (!prev_tok.empty()) {
      const int changed = (th != prev_tok) + (rh != prev_rec);
      if (changed > 1) ++violations;
      if (ph == "tokenizer" && rh != prev_rec) ++violations;
      if ((ph == "recommender" || ph == "final") && th != prev_tok) ++violations;
    }
    if (!ids.empty() && ih != ids) ++violations;
    if (ids.empty()) ids = ih;
    prev_tok = th;
    prev_rec = rh;
    phase_prev = ph;
  }
  const bool ok = violations == 0 && res.report.cycles == 10 && retokenizations == 10 && steps > 0;
  return {ok, std::to_string(res.report.cycles) + " cycles, " + std::to_string(steps) + " steps, " +
                  std::to_string(retokenizations) + " re-tokenisations, " + std::to_string(violations) + " violations"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_flag("--verbose", verbose, "training progress on stderr");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::info : spdlog::level::err);

  const std::vector<std::pair<int, std::function<Outcome()>>> criteria{
      {1, quantization_oracle}, {2, loss_values},          {3, gradient_checks},
      {4, beam_exhaustive},     {5, metric_oracles},       {6, synthetic_end_to_end},
      {7, ablation_directionality}, {8, schedule_audit},   {9, determinism}};
  const std::map<int, std::string> titles{{1, "quantization oracle equivalence"},
                                          {2, "loss formula values"},
                                          {3, "gradient checks"},
                                          {4, "beam-exhaustive equivalence"},
                                          {5, "metric oracles"},
                                          {6, "synthetic end-to-end"},
                                          {7, "ablation directionality"},
                                          {8, "alternation schedule audit"},
                                          {9, "determinism"}};
  int failed = 0;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failed;
    std::printf("criterion %d [%s]: %s - %s\n", id, titles.at(id).c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str());
    std::fflush(stdout);
  }
  if (only.empty() || std::find(only.begin(), only.end(), 10) != only.end()) {
    std::printf("criterion 10 [full-scale reproduction]: SKIP - optional, non-gating; needs the external dataset and "
                "256-d embeddings\n");
  }
  return failed == 0 ? 0 : 1;
}
