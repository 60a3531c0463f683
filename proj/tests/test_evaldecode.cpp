#include "etegrec/errors.hpp"
#include "etegrec/evaldecode.hpp"

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

using namespace etegrec;
using evaldecode::PrefixTrie;
using evaldecode::RankingResult;
using evaldecode::StepScorer;
using recommender::VocabLayout;

namespace {

// Every (L tokens, suffix 0) combination over K codes, items in lexicographic order.
tokenizer::IdentifierMap full_catalog(int levels, int k) {
  int n = 1;
  for (int l = 0; l < levels; ++l) n *= k;
  std::vector<std::string> ids;
  std::vector<std::vector<int>> toks;
  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "i%04d", i);
    ids.push_back(buf);
    std::vector<int> t(static_cast<std::size_t>(levels));
    int x = i;
    for (int l = levels - 1; l >= 0; --l) {
      t[static_cast<std::size_t>(l)] = x % k;
      x /= k;
    }
    toks.push_back(t);
  }
  return tokenizer::assign_suffixes(toks, data::ItemIndex(ids), levels, k, 2);
}

// Deterministic pseudo-random logits keyed by the prefix.
class HashScorer : public StepScorer {
 public:
  HashScorer(int vocab, std::uint64_t seed, double scale = 3.0) : vocab_(vocab), seed_(seed), scale_(scale) {}
  std::vector<Eigen::VectorXd> next_log_probs(const std::vector<std::vector<int>>& prefixes) override {
    std::vector<Eigen::VectorXd> out;
    for (const auto& p : prefixes) out.push_back(log_probs(p));
    return out;
  }
  Eigen::VectorXd log_probs(const std::vector<int>& prefix) const {
    std::uint64_t h = seed_ * 0x9E3779B97F4A7C15ULL + 1;
    for (int t : prefix) h = (h ^ static_cast<std::uint64_t>(t + 7)) * 0x100000001B3ULL;
    std::mt19937_64 rng(h);
    std::normal_distribution<double> n(0.0, scale_);
    Eigen::VectorXd logits(vocab_);
    for (int i = 0; i < vocab_; ++i) logits(i) = n(rng);
    const double m = logits.maxCoeff();
    return logits.array() - (m + std::log((logits.array() - m).exp().sum()));
  }

 private:
  int vocab_;
  std::uint64_t seed_;
  double scale_;
};

class UniformScorer : public StepScorer {
 public:
  explicit UniformScorer(int vocab) : vocab_(vocab) {}
  std::vector<Eigen::VectorXd> next_log_probs(const std::vector<std::vector<int>>& prefixes) override {
    return std::vector<Eigen::VectorXd>(prefixes.size(), Eigen::VectorXd::Constant(vocab_, -std::log(vocab_)));
  }

 private:
  int vocab_;
};

// Forces one path; everything else gets a tiny probability.
class OracleScorer : public StepScorer {
 public:
  OracleScorer(int vocab, std::vector<int> path) : vocab_(vocab), path_(std::move(path)) {}
  std::vector<Eigen::VectorXd> next_log_probs(const std::vector<std::vector<int>>& prefixes) override {
    std::vector<Eigen::VectorXd> out;
    for (const auto& p : prefixes) {
      Eigen::VectorXd v = Eigen::VectorXd::Constant(vocab_, -30.0);
      if (p.size() < path_.size()) v(path_[p.size()]) = 0.0;
      out.push_back(v);
    }
    return out;
  }

 private:
  int vocab_;
  std::vector<int> path_;
};

RankingResult exhaustive(const HashScorer& s, const PrefixTrie& trie) {
  std::vector<std::tuple<double, std::vector<int>, int>> all;
  for (const auto& [tokens, item] : trie.enumerate()) {
    double score = 0.0;
    std::vector<int> prefix;
    for (int t : tokens) {
      score += s.log_probs(prefix)(t);
      prefix.push_back(t);
    }
    all.emplace_back(score, tokens, item);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
    return std::get<1>(a) < std::get<1>(b);
  });
  RankingResult r;
  for (const auto& [score, tokens, item] : all) {
    r.items.push_back(item);
    r.tokens.push_back(tokens);
    r.scores.push_back(score);
  }
  return r;
}

}  // namespace

TEST_CASE("trie: singleton path, prefix sharing, leaf count, duplicates") {
  VocabLayout v(2, 3, 2);
  tokenizer::IdentifierMap one;
  one.levels = 2;
  one.codebook_size = 3;
  one.suffix_capacity = 2;
  one.items = {{{0, 1}, 0, "a"}};
  const auto t1 = PrefixTrie::build(one, v);
  CHECK(t1.leaf_count() == 1);
  CHECK(t1.node_count() == 4);
  CHECK(t1.depth() == 3);

  tokenizer::IdentifierMap two = one;
  two.items.push_back({{0, 2}, 0, "b"});
  const auto t2 = PrefixTrie::build(two, v);
  CHECK(t2.node(PrefixTrie::root()).children.size() == 1);
  const int shared = t2.node(PrefixTrie::root()).children.begin()->second;
  CHECK(t2.node(shared).children.size() == 2);
  CHECK(t2.find({v.level_token(0, 0), v.level_token(1, 2), v.suffix_token(0)}) == 1);

  tokenizer::IdentifierMap dup = one;
  dup.items.push_back({{0, 1}, 0, "b"});
  CHECK_THROWS(PrefixTrie::build(dup, v));

  const auto big = full_catalog(2, 32);
  VocabLayout vb(2, 32, 2);
  CHECK(PrefixTrie::build(big, vb).leaf_count() == 1024);
}

TEST_CASE("beam = catalogue size equals exhaustive scoring on a 9-item toy catalogue") {
  const auto ids = full_catalog(2, 3);
  VocabLayout v(2, 3, 2);
  const auto trie = PrefixTrie::build(ids, v);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    HashScorer s(v.size(), seed);
    const auto beam = evaldecode::beam_search(s, trie, 9);
    const auto ex = exhaustive(s, trie);
    CHECK(beam.items == ex.items);
    for (std::size_t i = 0; i < beam.scores.size(); ++i) {
      CHECK(std::abs(beam.scores[i] - ex.scores[i]) < 1e-6);
      if (i > 0) CHECK(beam.scores[i] <= beam.scores[i - 1]);
      CHECK(trie.find(beam.tokens[i]) == beam.items[i]);
    }
  }
  HashScorer s(v.size(), 1);
  CHECK(evaldecode::beam_search(s, trie, 50).items.size() == 9);
  CHECK_THROWS(evaldecode::beam_search(s, trie, 0));
}

TEST_CASE("beam 1 is greedy and equals the top exhaustive item on a peaked model") {
  const auto ids = full_catalog(2, 3);
  VocabLayout v(2, 3, 2);
  const auto trie = PrefixTrie::build(ids, v);
  const std::vector<int> path{v.level_token(0, 2), v.level_token(1, 1), v.suffix_token(0)};
  OracleScorer s(v.size(), path);
  const auto r = evaldecode::beam_search(s, trie, 1);
  REQUIRE(r.items.size() == 1);
  CHECK(r.tokens[0] == path);
  CHECK(r.items[0] == trie.find(path));
}

TEST_CASE("recall and NDCG hand cases") {
  RankingResult r;
  for (int i = 0; i < 10; ++i) r.items.push_back(100 + i);
  CHECK(evaldecode::recall_at_k(r, 100, 5) == 1);
  CHECK(evaldecode::recall_at_k(r, 105, 5) == 0);
  double total = 0.0;
  for (int target : {100, 102, 106, 999}) total += evaldecode::recall_at_k(r, target, 5);
  CHECK(total / 4.0 == 0.5);
  CHECK(evaldecode::ndcg_at_k(r, 100, 5) == 1.0);
  CHECK(std::abs(evaldecode::ndcg_at_k(r, 101, 5) - 1.0 / std::log2(3.0)) < 1e-6);
  CHECK(std::abs(evaldecode::ndcg_at_k(r, 101, 5) - 0.6309) < 1e-4);
  CHECK(evaldecode::ndcg_at_k(r, 107, 5) == 0.0);
  for (int target : {100, 103, 108, 999}) {
    CHECK(evaldecode::recall_at_k(r, target, 5) <= evaldecode::recall_at_k(r, target, 10));
    CHECK(evaldecode::ndcg_at_k(r, target, 5) <= evaldecode::ndcg_at_k(r, target, 10));
  }
}

TEST_CASE("evaluation harness: oracle model scores 1, uniform model sits near k/N") {
  const auto ids = full_catalog(2, 10);
  VocabLayout v(2, 10, 2);
  const auto trie = PrefixTrie::build(ids, v);
  std::mt19937_64 rng(5);
  std::vector<data::IndexedExample> ex;
  for (int u = 0; u < 500; ++u) ex.push_back({{0}, static_cast<int>(rng() % 100), data::Split::test, "u"});
  evaldecode::EvalOptions opt;
  opt.beam = 20;
  const auto oracle = evaldecode::evaluate_with(ex, trie, [&](const data::IndexedExample& e) {
    return std::make_unique<OracleScorer>(v.size(), v.identifier_tokens(ids.items[static_cast<std::size_t>(e.target)]));
  }, opt);
  CHECK(oracle.recall.at(5) == 1.0);
  CHECK(oracle.recall.at(10) == 1.0);
  CHECK(oracle.ndcg.at(10) == 1.0);
  CHECK(oracle.users == 500);

  const auto uni = evaldecode::evaluate_with(ex, trie, [&](const data::IndexedExample&) {
    return std::make_unique<UniformScorer>(v.size());
  }, opt);
  CHECK(std::abs(uni.recall.at(10) - 0.1) <= 0.05);
  CHECK(uni.recall.at(5) <= uni.recall.at(10));
  CHECK(oracle.to_json_line().find("\"recall@10\"") != std::string::npos);
}

TEST_CASE("evaluate refuses a stale identifier map") {
  tokenizer::TokenizerConfig tc;
  tc.levels = 2;
  tc.codebook_size = 4;
  tc.code_dim = 3;
  tc.input_dim = 3;
  tc.hidden = {};
  tokenizer::Tokenizer tok(tc, 1);
  data::EmbeddingTable table;
  table.dim = 3;
  table.index = data::ItemIndex({"a", "b", "c", "d"});
  table.rows = ag::Matrix::Identity(4, 3);
  auto ids = tokenizer::tokenize_corpus(table, tok);
  recommender::RecommenderConfig rc;
  rc.encoder_layers = rc.decoder_layers = 1;
  rc.d_model = 4;
  rc.d_ff = 4;
  rc.heads = 1;
  rc.head_dim = 4;
  rc.max_len = 3;
  rc.levels = 2;
  rc.codebook_size = 4;
  rc.suffix_capacity = tc.suffix_capacity;
  rc.semantic_dim = 3;
  recommender::Recommender rec(rc, 2);
  std::vector<data::IndexedExample> ex{{{0, 1}, 2, data::Split::test, "u"}};
  evaldecode::EvalOptions opt;
  opt.beam = 4;
  CHECK_NOTHROW(evaldecode::evaluate(rec, tok, ids, ex, opt));
  tok.codebook(0).value(0, 0) += 1.0;
  CHECK_THROWS_AS(evaldecode::evaluate(rec, tok, ids, ex, opt), StalenessError);
}
