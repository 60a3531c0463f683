#include "etegrec/evaldecode.hpp"

#include "etegrec/errors.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace etegrec::evaldecode {

PrefixTrie PrefixTrie::build(const tokenizer::IdentifierMap& ids, const recommender::VocabLayout& vocab) {
  PrefixTrie trie;
  trie.nodes_.emplace_back();
  trie.depth_ = vocab.identifier_length();
  for (std::size_t i = 0; i < ids.items.size(); ++i) {
    const auto tokens = vocab.identifier_tokens(ids.items[i]);
    int cur = 0;
    for (int t : tokens) {
      auto& children = trie.nodes_[static_cast<std::size_t>(cur)].children;
      auto it = children.find(t);
      if (it == children.end()) {
        const int next = static_cast<int>(trie.nodes_.size());
        trie.nodes_[static_cast<std::size_t>(cur)].children.emplace(t, next);
        trie.nodes_.emplace_back();
        cur = next;
      } else {
        cur = it->second;
      }
    }
    auto& leaf = trie.nodes_[static_cast<std::size_t>(cur)];
    if (leaf.item >= 0) {
      throw std::invalid_argument("duplicate identifier for items " + ids.items[static_cast<std::size_t>(leaf.item)].item_id +
                                  " and " + ids.items[i].item_id);
    }
    leaf.item = static_cast<int>(i);
    ++trie.leaves_;
  }
  return trie;
}

int PrefixTrie::find(const std::vector<int>& tokens) const {
  int cur = 0;
  for (int t : tokens) {
    const auto& children = nodes_[static_cast<std::size_t>(cur)].children;
    auto it = children.find(t);
    if (it == children.end()) return -1;
    cur = it->second;
  }
  return nodes_[static_cast<std::size_t>(cur)].item;
}

std::vector<std::pair<std::vector<int>, int>> PrefixTrie::enumerate() const {
  std::vector<std::pair<std::vector<int>, int>> out;
  std::vector<int> path;
  std::function<void(int)> walk = [&](int n) {
    const Node& node = nodes_[static_cast<std::size_t>(n)];
    if (node.item >= 0) out.emplace_back(path, node.item);
    for (const auto& [tok, child] : node.children) {
      path.push_back(tok);
      walk(child);
      path.pop_back();
    }
  };
  walk(0);
  return out;
}

RecommenderScorer::RecommenderScorer(const recommender::Recommender& model, const recommender::TokenSequence& input)
    : model_(model), tape_(false) {
  encoded_ = model_.embed_and_encode(tape_, {input});
}

std::vector<Eigen::VectorXd> RecommenderScorer::next_log_probs(const std::vector<std::vector<int>>& prefixes) {
  ag::Tape tape(false);
  // Re-home the cached encoder states on this step's tape.
  recommender::EncodedBatch enc = encoded_;
  enc.states = tape.constant(encoded_.states.value());
  std::vector<recommender::TokenSequence> seqs;
  seqs.reserve(prefixes.size());
  for (const auto& p : prefixes) {
    std::vector<int> ids{recommender::VocabLayout::kBos};
    ids.insert(ids.end(), p.begin(), p.end());
    seqs.push_back(recommender::TokenSequence::from_ids(std::move(ids)));
  }
  const std::vector<int> source(prefixes.size(), 0);
  const recommender::DecodedBatch dec = model_.decode(tape, enc, seqs, nullptr, source);
  std::vector<Eigen::VectorXd> out;
  out.reserve(prefixes.size());
  for (const auto& seg : dec.segments) {
    const auto row = dec.logits.value().row(seg.offset + seg.length - 1);
    const double m = row.maxCoeff();
    const double lse = m + std::log((row.array() - m).exp().sum());
    out.push_back((row.array() - lse).matrix().transpose());
  }
  return out;
}

namespace {

struct Hypothesis {
  std::vector<int> tokens;
  int node = 0;
  double score = 0.0;
};

bool better(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

}  // namespace

RankingResult beam_search(StepScorer& scorer, const PrefixTrie& trie, int beam) {
  if (beam < 1) throw std::invalid_argument("beam size must be >= 1");
  if (trie.leaf_count() == 0) throw std::invalid_argument("beam search over an empty trie");
  if (static_cast<std::size_t>(beam) > trie.leaf_count()) {
    spdlog::warn("beam {} exceeds catalogue size {}; ranking shortened", beam, trie.leaf_count());
  }
  std::vector<Hypothesis> hyps{Hypothesis{}};
  for (int step = 0; step < trie.depth(); ++step) {
    std::vector<std::vector<int>> prefixes;
    prefixes.reserve(hyps.size());
    for (const auto& h : hyps) prefixes.push_back(h.tokens);
    const auto log_probs = scorer.next_log_probs(prefixes);
    std::vector<Hypothesis> candidates;
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      for (const auto& [tok, child] : trie.node(hyps[i].node).children) {
        Hypothesis next;
        next.tokens = hyps[i].tokens;
        next.tokens.push_back(tok);
        next.node = child;
        next.score = hyps[i].score + log_probs[i](tok);
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > static_cast<std::size_t>(beam)) candidates.resize(static_cast<std::size_t>(beam));
    hyps = std::move(candidates);
  }
  RankingResult out;
  for (const auto& h : hyps) {
    const int item = trie.node(h.node).item;
    if (item < 0) throw std::logic_error("beam search ended on a non-leaf node");
    out.items.push_back(item);
    out.tokens.push_back(h.tokens);
    out.scores.push_back(h.score);
  }
  return out;
}

RankingResult beam_search(const recommender::Recommender& model, const recommender::TokenSequence& input,
                          const PrefixTrie& trie, int beam) {
  RecommenderScorer scorer(model, input);
  return beam_search(scorer, trie, beam);
}

namespace {

int rank_of(const RankingResult& ranked, int target) {
  for (std::size_t i = 0; i < ranked.items.size(); ++i) {
    if (ranked.items[i] == target) return static_cast<int>(i) + 1;
  }
  return 0;
}

}  // namespace

int recall_at_k(const RankingResult& ranked, int target, int k) {
  const int r = rank_of(ranked, target);
  return r > 0 && r <= k ? 1 : 0;
}

double ndcg_at_k(const RankingResult& ranked, int target, int k) {
  if (k < 1) throw std::invalid_argument("ndcg_at_k: k must be >= 1");
  const int r = rank_of(ranked, target);
  return r > 0 && r <= k ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

std::string MetricsTable::to_json_line() const {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  char hex[17];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(checkpoint_hash));
  j["checkpoint_hash"] = hex;
  for (const auto& [k, v] : recall) j["recall@" + std::to_string(k)] = v;
  for (const auto& [k, v] : ndcg) j["ndcg@" + std::to_string(k)] = v;
  j["users"] = users;
  j["beam"] = beam;
  return j.dump();
}

std::string MetricsTable::to_text() const {
  std::ostringstream os;
  char buf[64];
  os << "dataset: " << (dataset.empty() ? "-" : dataset) << "  users: " << users << "  beam: " << beam << '\n';
  for (const auto& [k, v] : recall) {
    std::snprintf(buf, sizeof(buf), "  Recall@%-3d %.4f", k, v);
    os << buf;
  }
  os << '\n';
  for (const auto& [k, v] : ndcg) {
    std::snprintf(buf, sizeof(buf), "  NDCG@%-5d %.4f", k, v);
    os << buf;
  }
  os << '\n';
  return os.str();
}

MetricsTable evaluate_with(const std::vector<data::IndexedExample>& examples, const PrefixTrie& trie,
                           const ScorerFactory& make_scorer, const EvalOptions& options) {
  MetricsTable table;
  table.dataset = options.dataset;
  table.beam = options.beam;
  for (int k : options.ks) {
    table.recall[k] = 0.0;
    table.ndcg[k] = 0.0;
  }
  for (const auto& ex : examples) {
    auto scorer = make_scorer(ex);
    const RankingResult ranked = beam_search(*scorer, trie, options.beam);
    for (int k : options.ks) {
      table.recall[k] += recall_at_k(ranked, ex.target, k);
      table.ndcg[k] += ndcg_at_k(ranked, ex.target, k);
    }
    ++table.users;
  }
  if (table.users > 0) {
    for (int k : options.ks) {
      table.recall[k] /= static_cast<double>(table.users);
      table.ndcg[k] /= static_cast<double>(table.users);
    }
  }
  return table;
}

MetricsTable evaluate(const recommender::Recommender& model, const tokenizer::Tokenizer& tok,
                      const tokenizer::IdentifierMap& ids, const std::vector<data::IndexedExample>& examples,
                      const EvalOptions& options) {
  if (ids.tokenizer_hash != tok.hash()) {
    throw StalenessError("identifier map was built by a different tokenizer state; re-run tokenization");
  }
  const PrefixTrie trie = PrefixTrie::build(ids, model.vocab());
  ScorerFactory factory = [&](const data::IndexedExample& ex) -> std::unique_ptr<StepScorer> {
    return std::make_unique<RecommenderScorer>(model, recommender::history_tokens(ex.input, ids, model.vocab()));
  };
  MetricsTable table = evaluate_with(examples, trie, factory, options);
  table.checkpoint_hash = model.hash() ^ (tok.hash() * 0x9e3779b97f4a7c15ULL);
  return table;
}

}  // namespace etegrec::evaldecode
