// etegrec command-line driver: prepare, pretrain, train, evaluate,
// export-ids, plot, synth.

#include "etegrec/config.hpp"
#include "etegrec/data.hpp"
#include "etegrec/errors.hpp"
#include "etegrec/evaldecode.hpp"
#include "etegrec/io.hpp"
#include "etegrec/pipeline.hpp"
#include "etegrec/plot.hpp"
#include "etegrec/trainer.hpp"

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace etegrec;

namespace {

// A required input that does not exist; mapped to exit code 2.
class MissingFile : public std::runtime_error {
 public:
  explicit MissingFile(const fs::path& p) : std::runtime_error("no such file: " + p.string()) {}
};

void require_file(const fs::path& p) {
  if (!fs::exists(p)) throw MissingFile(p);
}

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string preset = "default";
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "JSON config file");
  cmd->add_option("--set", c.overrides, "override key.path=value (repeatable)");
  cmd->add_option("--preset", c.preset, "default or synthetic")->capture_default_str();
  cmd->add_flag("--force", c.force, "overwrite existing outputs");
}

config::RunConfig resolve(const Common& c, std::vector<std::string> extra) {
  std::optional<fs::path> file;
  if (!c.config_file.empty()) {
    require_file(c.config_file);
    file = c.config_file;
  }
  // Dedicated flags are applied after --set so they take precedence.
  std::vector<std::string> all = c.overrides;
  all.insert(all.end(), extra.begin(), extra.end());
  return config::resolve(file, all, c.preset);
}

void guard_outputs(const std::vector<fs::path>& outputs, bool force) {
  if (force) return;
  for (const auto& p : outputs) {
    if (fs::exists(p)) throw Error("refusing to overwrite " + p.string() + " (pass --force)");
  }
}

struct Prepared {
  fs::path dir;
  fs::path interactions() const { return dir / "interactions.tsv"; }
  fs::path embeddings() const { return dir / "embeddings.bin"; }
  fs::path splits() const { return dir / "splits.jsonl"; }
  fs::path summary() const { return dir / "summary.json"; }
};

pipeline::Dataset load_prepared(const fs::path& dir, config::RunConfig& cfg) {
  const Prepared p{dir};
  require_file(p.interactions());
  require_file(p.embeddings());
  data::InteractionCorpus corpus = data::load_interactions(p.interactions());
  data::EmbeddingLoadOptions eo;
  eo.format = data::EmbeddingFormat::binary;
  data::EmbeddingTable table = data::load_embeddings(p.embeddings(), corpus, eo);
  if (cfg.experiment.tokenizer.input_dim != table.dim) {
    spdlog::info("tokenizer.input_dim follows the embedding table: {}", table.dim);
    cfg.experiment.tokenizer.input_dim = table.dim;
    cfg.experiment.sync();
  }
  return pipeline::build_dataset(cfg.data.name, std::move(corpus), std::move(table), cfg.data.max_len);
}

std::string flag(const std::string& key, const std::string& value) { return key + "=" + value; }

int cmd_synth(int users, int items, int clusters, std::uint64_t seed, const std::string& out, bool force) {
  const fs::path path = config::resolve_output(out);
  guard_outputs({path}, force);
  data::PlantedCorpusOptions o;
  o.users = users;
  o.items = items;
  o.clusters = clusters;
  o.seed = seed;
  const auto pc = data::make_planted_corpus(o);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  data::write_interactions(path, pc.corpus);
  std::cout << "wrote " << pc.corpus.interaction_count() << " interactions for " << pc.corpus.users.size()
            << " users to " << path.string() << '\n';
  return 0;
}

int cmd_prepare(const Common& common, const std::string& interactions, const std::string& embeddings,
                const std::string& out) {
  std::vector<std::string> extra;
  if (!interactions.empty()) extra.push_back(flag("data.interactions", interactions));
  if (!embeddings.empty()) extra.push_back(flag("data.embeddings", embeddings));
  if (!out.empty()) extra.push_back(flag("output_dir", out));
  config::RunConfig cfg = resolve(common, extra);
  if (cfg.data.interactions.empty()) throw ConfigError("prepare needs --interactions");
  require_file(cfg.data.interactions);
  if (!cfg.data.embeddings.empty()) require_file(cfg.data.embeddings);
  const Prepared p{config::resolve_output(cfg.output_dir)};
  guard_outputs({p.interactions(), p.embeddings(), p.splits(), p.summary()}, common.force);
  config::echo(cfg, p.dir, "prepare");

  const data::InteractionCorpus raw = data::load_interactions(cfg.data.interactions);
  data::KCoreStats ks;
  const data::InteractionCorpus corpus = data::apply_k_core(raw, cfg.data.k_core, &ks);
  data::SplitStats ss;
  const auto examples = data::split_leave_one_out(corpus, cfg.data.max_len, &ss);
  const data::ItemIndex index = data::ItemIndex::from_corpus(corpus);
  data::EmbeddingTable table;
  if (cfg.data.embeddings.empty()) {
    table = data::derive_embeddings_svd(data::training_portion(corpus), index, cfg.experiment.tokenizer.input_dim,
                                        cfg.data.svd_window);
    if (cfg.data.l2_normalize) data::l2_normalize(table);
  } else {
    data::EmbeddingLoadOptions eo;
    eo.l2_normalize = cfg.data.l2_normalize;
    table = data::load_embeddings(cfg.data.embeddings, corpus, eo);
  }

  data::write_interactions(p.interactions(), corpus);
  data::write_split_manifest(p.splits(), examples);
  data::save_embeddings(p.embeddings(), table, data::EmbeddingFormat::binary);

  const double users = static_cast<double>(corpus.users.size());
  const double items = static_cast<double>(index.size());
  const double inter = static_cast<double>(corpus.interaction_count());
  const double sparsity = 1.0 - inter / (users * items);
  io::json summary{{"dataset", cfg.data.name},
                   {"users", corpus.users.size()},
                   {"items", index.size()},
                   {"interactions", corpus.interaction_count()},
                   {"sparsity", sparsity},
                   {"k_core_rounds", ks.rounds},
                   {"skipped_users", ss.skipped_users},
                   {"embedding_dim", table.dim},
                   {"embedding_source", cfg.data.embeddings.empty() ? "svd" : cfg.data.embeddings}};
  std::ofstream(p.summary()) << summary.dump(2) << '\n';
  std::printf("dataset       %s\nusers         %zu\nitems         %zu\ninteractions  %zu\nsparsity      %.3f%%\n",
              cfg.data.name.c_str(), corpus.users.size(), index.size(), corpus.interaction_count(), 100.0 * sparsity);
  std::printf("k-core rounds %d\nembeddings    %d-d (%s)\n", ks.rounds, table.dim,
              cfg.data.embeddings.empty() ? "svd" : "loaded");
  std::cout << "artifacts in " << p.dir.string() << '\n';
  return 0;
}

int cmd_pretrain(const Common& common, const std::string& data_dir, const std::string& out, int epochs) {
  std::vector<std::string> extra;
  if (!out.empty()) extra.push_back(flag("output_dir", out));
  if (epochs >= 0) extra.push_back(flag("pretrain.epochs", std::to_string(epochs)));
  config::RunConfig cfg = resolve(common, extra);
  const fs::path dir = config::resolve_output(cfg.output_dir);
  const fs::path ckpt = dir / "tokenizer.ckpt";
  pipeline::Dataset ds = load_prepared(config::resolve_output(data_dir), cfg);
  guard_outputs({ckpt, dir / "pretrain.json"}, common.force);
  config::echo(cfg, dir, "pretrain");

  trainer::PretrainReport report;
  auto tok = pipeline::pretrain(ds, cfg.experiment, &report);
  io::save_tokenizer(ckpt, *tok);

  const auto& tc = cfg.experiment.tokenizer;
  std::printf("tokenizer: L=%d K=%d code_dim=%d\n", tc.levels, tc.codebook_size, tc.code_dim);
  if (cfg.experiment.pretrain.epochs == 0) {
    std::printf("reconstruction error %.6g (init)\n", report.reconstruction.back());
  } else {
    std::printf("reconstruction error %.6g -> %.6g after %d epochs\n", report.reconstruction.front(),
                report.reconstruction.back(), cfg.experiment.pretrain.epochs);
  }
  io::json j{{"reconstruction", report.reconstruction},
             {"used_codes", report.used_codes},
             {"reseeded", report.reseeded},
             {"utilization", report.utilization},
             {"init_only", cfg.experiment.pretrain.epochs == 0}};
  for (std::size_t l = 0; l < report.utilization.size(); ++l) {
    double total = 0.0;
    for (double f : report.utilization[l]) total += f;
    std::printf("level %zu: %d/%d codes used, assigned fraction sum %.6f\n", l + 1, report.used_codes[l],
                tc.codebook_size, total);
  }
  std::ofstream(dir / "pretrain.json") << j.dump(2) << '\n';
  std::cout << "checkpoint " << ckpt.string() << '\n';
  return 0;
}

struct RunFiles {
  fs::path dir;
  fs::path tokenizer() const { return dir / "tokenizer.ckpt"; }
  fs::path recommender() const { return dir / "recommender.ckpt"; }
  fs::path ids() const { return dir / "ids.tsv"; }
  fs::path log() const { return dir / "metrics.jsonl"; }
  fs::path state() const { return dir / "state.json"; }
  fs::path test() const { return dir / "test_metrics.jsonl"; }
};

void save_boundary(const RunFiles& f, trainer::Trainer& t, const tokenizer::Tokenizer& tok,
                   const recommender::Recommender& rec, std::uint64_t cfg_hash, bool finished = false) {
  io::save_tokenizer(f.tokenizer(), tok, &t.tokenizer_optimizer());
  io::save_recommender(f.recommender(), rec, &t.state().ids, &t.recommender_optimizer());
  t.state().ids.write_text(f.ids());
  io::json s{{"config_hash", io::hex64(cfg_hash)},
             {"cycle", t.state().cycle},
             {"epoch", t.state().epoch},
             {"step", t.state().step},
             {"last_change", t.state().last_change},
             {"valid_history", t.state().valid_history},
             {"rng", t.rng_state()},
             {"finished", finished}};
  std::ofstream(f.state()) << s.dump(2) << '\n';
}

int cmd_train(const Common& common, const std::string& data_dir, const std::string& tokenizer_ckpt,
              const std::string& out, const std::string& variant, int cycle_length, long long seed, bool resume) {
  std::vector<std::string> extra;
  if (!out.empty()) extra.push_back(flag("output_dir", out));
  if (!variant.empty()) extra.push_back(flag("variant", "\"" + variant + "\""));
  if (cycle_length > 0) extra.push_back(flag("schedule.cycle_length", std::to_string(cycle_length)));
  if (seed >= 0) extra.push_back(flag("seed", std::to_string(seed)));
  config::RunConfig cfg = resolve(common, extra);
  require_file(tokenizer_ckpt);
  pipeline::Dataset ds = load_prepared(config::resolve_output(data_dir), cfg);
  const RunFiles f{config::resolve_output(cfg.output_dir)};
  const std::uint64_t cfg_hash = config::config_hash(cfg);

  auto tok = io::load_tokenizer(tokenizer_ckpt);
  if (tok->config().input_dim != ds.table.dim) throw ConfigError("tokenizer checkpoint does not match the embedding dimension");
  cfg.experiment.tokenizer = tok->config();
  cfg.experiment.sync();
  cfg.experiment.validate();

  if (cfg.experiment.variant == trainer::Variant::no_ete) {
    guard_outputs({f.log(), f.test()}, common.force);
    config::echo(cfg, f.dir, "train");
    std::ofstream log(f.log());
    auto res = pipeline::run_experiment(ds, *tok, cfg.experiment, [&](const std::string& l) { log << l << '\n'; });
    io::save_tokenizer(f.tokenizer(), *res.tokenizer);
    io::save_recommender(f.recommender(), *res.recommender, &res.ids);
    res.ids.write_text(f.ids());
    std::ofstream(f.test()) << res.test.to_json_line() << '\n';
    std::cout << res.test.to_text();
    return 0;
  }

  auto rec = std::make_unique<recommender::Recommender>(cfg.experiment.recommender,
                                                        trainer::derive_seed(cfg.experiment.seed, 4));
  trainer::TrainerOptions to;
  to.schedule = cfg.experiment.schedule;
  to.alignment = cfg.experiment.alignment;
  to.variant = cfg.experiment.variant;
  to.seed = trainer::derive_seed(cfg.experiment.seed, 5);

  std::ofstream log;
  trainer::MetricsSink sink = [&](const std::string& l) { log << l << '\n' << std::flush; };
  std::unique_ptr<trainer::Trainer> t;
  if (resume) {
    require_file(f.state());
    std::ifstream sin(f.state());
    const io::json s = io::json::parse(sin);
    if (s.at("config_hash").get<std::string>() != io::hex64(cfg_hash)) {
      throw ConfigError("resume refused: configuration differs from the run in " + f.dir.string());
    }
    if (s.value("finished", false)) throw ConfigError("resume refused: the run in " + f.dir.string() + " already finished");
    nn::AdamW tok_opt, rec_opt;
    tok = io::load_tokenizer(f.tokenizer(), &tok_opt);
    rec = io::load_recommender(f.recommender(), &rec_opt);
    t = std::make_unique<trainer::Trainer>(*tok, *rec, ds.table, ds.train, ds.valid, to, sink);
    auto restore = [](nn::AdamW& dst, nn::AdamW& src) {
      dst.first_moments() = src.first_moments();
      dst.second_moments() = src.second_moments();
      dst.set_steps(src.steps());
    };
    restore(t->tokenizer_optimizer(), tok_opt);
    restore(t->recommender_optimizer(), rec_opt);
    auto& st = t->state();
    st.cycle = s.at("cycle").get<int>();
    st.epoch = s.at("epoch").get<int>();
    st.step = s.at("step").get<std::int64_t>();
    st.last_change = s.at("last_change").get<double>();
    st.valid_history = s.at("valid_history").get<std::vector<double>>();
    t->set_rng_state(s.at("rng").get<std::string>());
    log.open(f.log(), std::ios::app);
    std::cout << "resuming " << f.dir.string() << " after cycle " << st.cycle << '\n';
  } else {
    guard_outputs({f.log(), f.state(), f.recommender(), f.test()}, common.force);
    config::echo(cfg, f.dir, "train");
    log.open(f.log());
    t = std::make_unique<trainer::Trainer>(*tok, *rec, ds.table, ds.train, ds.valid, to, sink);
  }
  t->set_cycle_hook([&](const trainer::Trainer&) { save_boundary(f, *t, *tok, *rec, cfg_hash); });
  const trainer::TrainReport report = t->run();
  save_boundary(f, *t, *tok, *rec, cfg_hash, true);

  evaldecode::EvalOptions eo;
  eo.ks = cfg.experiment.ks;
  eo.beam = cfg.experiment.schedule.eval_beam;
  eo.dataset = cfg.data.name;
  const auto table = evaldecode::evaluate(*rec, *tok, t->state().ids, ds.test, eo);
  std::ofstream(f.test()) << table.to_json_line() << '\n';
  std::printf("variant %s: %d cycles (%s), %d final epochs, best validation Recall@10 %.4f\n",
              trainer::variant_name(cfg.experiment.variant), report.cycles,
              report.converged ? "converged" : "cycle limit", report.final_epochs, report.best_valid_recall);
  std::cout << table.to_text();
  return 0;
}

int cmd_evaluate(const Common& common, const std::string& data_dir, const std::string& run_dir, int beam,
                 const std::string& ks, const std::string& split) {
  std::vector<std::string> extra;
  if (beam > 0) extra.push_back(flag("schedule.eval_beam", std::to_string(beam)));
  if (!ks.empty()) extra.push_back(flag("ks", "[" + ks + "]"));
  config::RunConfig cfg = resolve(common, extra);
  pipeline::Dataset ds = load_prepared(config::resolve_output(data_dir), cfg);
  const RunFiles f{config::resolve_output(run_dir)};
  require_file(f.tokenizer());
  require_file(f.recommender());
  auto tok = io::load_tokenizer(f.tokenizer());
  tokenizer::IdentifierMap ids;
  auto rec = io::load_recommender(f.recommender(), nullptr, &ids);
  if (fs::exists(f.ids())) ids = tokenizer::IdentifierMap::read_text(f.ids());
  evaldecode::EvalOptions eo;
  eo.ks = cfg.experiment.ks;
  eo.beam = cfg.experiment.schedule.eval_beam;
  eo.dataset = cfg.data.name;
  const auto& examples = split == "valid" ? ds.valid : ds.test;
  if (split != "valid" && split != "test") throw ConfigError("--split must be valid or test");
  const auto table = evaldecode::evaluate(*rec, *tok, ids, examples, eo);
  const fs::path record = f.dir / ("eval_" + split + ".jsonl");
  std::ofstream(record, std::ios::app) << table.to_json_line() << '\n';
  std::cout << table.to_text();
  return 0;
}

int cmd_export_ids(const Common& common, const std::string& data_dir, const std::string& tokenizer_ckpt,
                   const std::string& out) {
  config::RunConfig cfg = resolve(common, {});
  require_file(tokenizer_ckpt);
  pipeline::Dataset ds = load_prepared(config::resolve_output(data_dir), cfg);
  const fs::path path = config::resolve_output(out);
  guard_outputs({path}, common.force);
  auto tok = io::load_tokenizer(tokenizer_ckpt);
  const auto ids = tokenizer::tokenize_corpus(ds.table, *tok);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  ids.write_text(path);
  std::cout << "collision groups (size: count)\n";
  for (const auto& [size, count] : ids.collision_histogram()) std::cout << "  " << size << ": " << count << '\n';
  std::cout << "wrote " << ids.size() << " identifiers to " << path.string() << '\n';
  return 0;
}

int cmd_plot(const std::string& log, const std::string& out) {
  require_file(log);
  for (const auto& p : plot::plot_metrics_log(log, config::resolve_output(out))) std::cout << "wrote " << p.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"generative recommender with a jointly trained item tokenizer"};
  app.require_subcommand(1);
  std::string level = "info";
  app.add_option("--log-level", level, "trace, debug, info, warn, error");

  Common common;
  int synth_users = 2000, synth_items = 200, synth_clusters = 20;
  std::uint64_t synth_seed = 7;
  std::string synth_out = "synthetic/interactions.tsv";
  auto* synth = app.add_subcommand("synth", "write a planted-cluster synthetic interaction file");
  synth->add_option("--users", synth_users)->capture_default_str();
  synth->add_option("--items", synth_items)->capture_default_str();
  synth->add_option("--clusters", synth_clusters)->capture_default_str();
  synth->add_option("--seed", synth_seed)->capture_default_str();
  synth->add_option("--out", synth_out)->capture_default_str();
  synth->add_flag("--force", common.force);

  std::string interactions, embeddings, out, data_dir = "prepared", tokenizer_ckpt, variant, run_dir, ks, split = "test";
  int epochs = -1, cycle_length = 0, beam = 0;
  long long seed = -1;
  bool resume = false;

  auto* prepare = app.add_subcommand("prepare", "filter, split and embed an interaction file");
  add_common(prepare, common);
  prepare->add_option("--interactions", interactions, "user<TAB>item<TAB>timestamp file");
  prepare->add_option("--embeddings", embeddings, "item embedding table (text or .bin); SVD when omitted");
  prepare->add_option("--out", out, "output directory");

  auto* pretrain = app.add_subcommand("pretrain", "pretrain the item tokenizer");
  add_common(pretrain, common);
  pretrain->add_option("--data", data_dir, "prepared directory")->capture_default_str();
  pretrain->add_option("--out", out, "output directory");
  pretrain->add_option("--epochs", epochs, "pretraining epochs");

  auto* train = app.add_subcommand("train", "alternating training then final recommender training");
  add_common(train, common);
  train->add_option("--data", data_dir, "prepared directory")->capture_default_str();
  train->add_option("--tokenizer", tokenizer_ckpt, "pretrained tokenizer checkpoint")->required();
  train->add_option("--out", out, "run directory");
  train->add_option("--variant", variant, "full, no_sia, no_psa, no_both, no_at, no_ete");
  train->add_option("--cycle-length", cycle_length, "epochs per cycle");
  train->add_option("--seed", seed, "root seed");
  train->add_flag("--resume", resume, "continue from the last cycle boundary");

  auto* evaluate = app.add_subcommand("evaluate", "constrained beam search evaluation");
  add_common(evaluate, common);
  evaluate->add_option("--data", data_dir, "prepared directory")->capture_default_str();
  evaluate->add_option("--run", run_dir, "run directory with checkpoints")->required();
  evaluate->add_option("--beam", beam, "beam size (default 20)");
  evaluate->add_option("--ks", ks, "comma-separated cutoffs (default 5,10)");
  evaluate->add_option("--split", split, "valid or test")->capture_default_str();

  auto* export_ids = app.add_subcommand("export-ids", "write item identifiers for a tokenizer checkpoint");
  add_common(export_ids, common);
  export_ids->add_option("--data", data_dir, "prepared directory")->capture_default_str();
  export_ids->add_option("--tokenizer", tokenizer_ckpt, "tokenizer checkpoint")->required();
  export_ids->add_option("--out", out, "output file")->required();

  std::string log_path;
  auto* plot_cmd = app.add_subcommand("plot", "render loss and recall charts from a metrics log");
  plot_cmd->add_option("--log", log_path, "metrics.jsonl")->required();
  plot_cmd->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::from_str(level));

  try {
    if (*synth) return cmd_synth(synth_users, synth_items, synth_clusters, synth_seed, synth_out, common.force);
    if (*prepare) return cmd_prepare(common, interactions, embeddings, out);
    if (*pretrain) return cmd_pretrain(common, data_dir, out, epochs);
    if (*train) return cmd_train(common, data_dir, tokenizer_ckpt, out, variant, cycle_length, seed, resume);
    if (*evaluate) return cmd_evaluate(common, data_dir, run_dir, beam, ks, split);
    if (*export_ids) return cmd_export_ids(common, data_dir, tokenizer_ckpt, out);
    if (*plot_cmd) return cmd_plot(log_path, out);
  } catch (const MissingFile& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
