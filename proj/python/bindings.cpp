#include "etegrec/alignment.hpp"
#include "etegrec/config.hpp"
#include "etegrec/errors.hpp"
#include "etegrec/evaldecode.hpp"
#include "etegrec/io.hpp"
#include "etegrec/pipeline.hpp"
#include "etegrec/recommender.hpp"
#include "etegrec/tokenizer.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace etegrec;

namespace {

py::object to_py(const io::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

io::json from_py(const py::object& o) {
  return io::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

evaldecode::RankingResult ranking(const std::vector<int>& items) {
  evaldecode::RankingResult r;
  r.items = items;
  return r;
}

py::dict synthetic_experiment(int users, int items, int clusters, std::uint64_t corpus_seed,
                              const std::vector<std::string>& overrides) {
  auto cfg = config::resolve(std::nullopt, overrides, "synthetic");
  auto opts = pipeline::synthetic_corpus_options();
  opts.users = users;
  opts.items = items;
  opts.clusters = clusters;
  opts.seed = corpus_seed;
  pipeline::Dataset ds;
  trainer::PretrainReport pre;
  std::vector<std::string> log;
  pipeline::ExperimentResult res;
  {
    py::gil_scoped_release release;
    ds = pipeline::synthetic_dataset(opts, cfg.experiment.tokenizer.input_dim, cfg.data.max_len);
    cfg.experiment.variant = trainer::parse_variant(cfg.variant);
    cfg.experiment.seed = cfg.seed;
    cfg.experiment.sync();
    auto tok = pipeline::pretrain(ds, cfg.experiment, &pre);
    res = pipeline::run_experiment(ds, *tok, cfg.experiment, [&](const std::string& l) { log.push_back(l); });
  }
  py::dict out;
  out["recall"] = res.test.recall;
  out["ndcg"] = res.test.ndcg;
  out["users"] = res.test.users;
  out["cycles"] = res.report.cycles;
  out["converged"] = res.report.converged;
  out["best_valid_recall"] = res.report.best_valid_recall;
  out["pretrain_reconstruction"] = pre.reconstruction;
  out["log"] = log;
  return out;
}

}  // namespace

PYBIND11_MODULE(_etegrec, m) {
  m.doc() = "generative recommender with a jointly trained item tokenizer";

  py::register_exception<Error>(m, "EtegrecError", PyExc_RuntimeError);

  m.def("default_config", [](const std::string& preset) { return to_py(config::to_json(config::defaults(preset))); },
        py::arg("preset") = "default");
  m.def("resolve_config",
        [](const std::vector<std::string>& overrides, const std::string& preset) {
          return to_py(config::to_json(config::resolve(std::nullopt, overrides, preset)));
        },
        py::arg("overrides") = std::vector<std::string>{}, py::arg("preset") = "default");

  m.def("assignment_distribution", &tokenizer::assignment_distribution, py::arg("v"), py::arg("codebook"));

  m.def("psa_loss",
        [](const ag::Matrix& h, const ag::Matrix& z, double tau) {
          ag::Tape t(false);
          return alignment::psa_loss(t.constant(h), t.constant(z), tau).item();
        },
        py::arg("preference"), py::arg("reconstructed"), py::arg("tau"));
  m.def("rec_loss",
        [](const ag::Matrix& logits, const std::vector<int>& targets, int batch) {
          ag::Tape t(false);
          return recommender::rec_loss(t.constant(logits), targets, batch).item();
        },
        py::arg("logits"), py::arg("targets"), py::arg("batch") = 1);
  m.def("combine_tokenizer_objective", &alignment::combine_tokenizer_objective);

  m.def("recall_at_k", [](const std::vector<int>& items, int target, int k) {
    return evaldecode::recall_at_k(ranking(items), target, k);
  });
  m.def("ndcg_at_k", [](const std::vector<int>& items, int target, int k) {
    return evaldecode::ndcg_at_k(ranking(items), target, k);
  });

  py::class_<tokenizer::Tokenizer>(m, "Tokenizer")
      .def(py::init([](const py::object& cfg, std::uint64_t seed) {
             return std::make_unique<tokenizer::Tokenizer>(from_py(cfg).get<tokenizer::TokenizerConfig>(), seed);
           }),
           py::arg("config"), py::arg("seed") = 1)
      .def_static("load", [](const std::string& path) { return io::load_tokenizer(path); })
      .def("save", [](const tokenizer::Tokenizer& t, const std::string& path) { io::save_tokenizer(path, t); })
      .def_property_readonly("config", [](const tokenizer::Tokenizer& t) { return to_py(io::json(t.config())); })
      .def("hash", &tokenizer::Tokenizer::hash)
      .def("encode_all", &tokenizer::Tokenizer::encode_all)
      .def("assign_tokens", &tokenizer::Tokenizer::assign_tokens)
      .def("init_codebooks", &tokenizer::Tokenizer::init_codebooks)
      .def("codebook", [](const tokenizer::Tokenizer& t, int l) { return ag::Matrix(t.codebook(l).value); })
      .def("set_codebook", [](tokenizer::Tokenizer& t, int l, const ag::Matrix& v) {
        auto& cb = t.codebook(l).value;
        if (v.rows() != cb.rows() || v.cols() != cb.cols()) throw py::value_error("codebook shape mismatch");
        cb = v;
      });

  m.def("synthetic_experiment", &synthetic_experiment, py::arg("users") = 400, py::arg("items") = 60,
        py::arg("clusters") = 6, py::arg("corpus_seed") = 7, py::arg("overrides") = std::vector<std::string>{},
        "planted corpus, pretraining, training and test evaluation in one call");
}
