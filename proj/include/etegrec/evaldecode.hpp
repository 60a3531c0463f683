#pragma once

// Trie-constrained beam search over item identifiers and leave-one-out
// ranking metrics.

#include "etegrec/data.hpp"
#include "etegrec/recommender.hpp"
#include "etegrec/tokenizer.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace etegrec::evaldecode {

class PrefixTrie {
 public:
  struct Node {
    std::map<int, int> children;  // token id -> node index, ordered by token id
    int item = -1;                // leaf payload (dense item index)
  };

  static PrefixTrie build(const tokenizer::IdentifierMap& ids, const recommender::VocabLayout& vocab);

  const Node& node(int index) const { return nodes_.at(static_cast<std::size_t>(index)); }
  static constexpr int root() { return 0; }
  int depth() const { return depth_; }
  std::size_t leaf_count() const { return leaves_; }
  std::size_t node_count() const { return nodes_.size(); }
  // Item at the end of `tokens`, or -1.
  int find(const std::vector<int>& tokens) const;
  // Every stored identifier with its item, in lexicographic token order.
  std::vector<std::pair<std::vector<int>, int>> enumerate() const;

 private:
  std::vector<Node> nodes_;
  int depth_ = 0;
  std::size_t leaves_ = 0;
};

// Supplies next-token log-probabilities (over the full vocabulary) for a
// batch of decoder prefixes; prefixes exclude the leading BOS.
class StepScorer {
 public:
  virtual ~StepScorer() = default;
  virtual std::vector<Eigen::VectorXd> next_log_probs(const std::vector<std::vector<int>>& prefixes) = 0;
};

// Scores prefixes with a trained recommender for one encoded input.
class RecommenderScorer : public StepScorer {
 public:
  RecommenderScorer(const recommender::Recommender& model, const recommender::TokenSequence& input);
  std::vector<Eigen::VectorXd> next_log_probs(const std::vector<std::vector<int>>& prefixes) override;

 private:
  const recommender::Recommender& model_;
  ag::Tape tape_;
  recommender::EncodedBatch encoded_;
};

struct RankingResult {
  std::vector<int> items;             // dense item indices, best first
  std::vector<std::vector<int>> tokens;  // identifier token ids per item
  std::vector<double> scores;         // summed log-probabilities, non-increasing
};

// Length-(L+1) beam search restricted to trie children. Candidates are
// ordered by score, then by ascending token sequence.
RankingResult beam_search(StepScorer& scorer, const PrefixTrie& trie, int beam);
RankingResult beam_search(const recommender::Recommender& model, const recommender::TokenSequence& input,
                          const PrefixTrie& trie, int beam);

int recall_at_k(const RankingResult& ranked, int target, int k);
double ndcg_at_k(const RankingResult& ranked, int target, int k);

struct MetricsTable {
  std::string dataset;
  std::uint64_t checkpoint_hash = 0;
  int beam = 20;
  std::size_t users = 0;
  std::map<int, double> recall;
  std::map<int, double> ndcg;

  std::string to_json_line() const;
  std::string to_text() const;
};

struct EvalOptions {
  std::vector<int> ks = {5, 10};
  int beam = 20;
  std::string dataset;
};

using ScorerFactory = std::function<std::unique_ptr<StepScorer>(const data::IndexedExample&)>;

MetricsTable evaluate_with(const std::vector<data::IndexedExample>& examples, const PrefixTrie& trie,
                           const ScorerFactory& make_scorer, const EvalOptions& options);

// Full-catalogue evaluation. Throws StalenessError when the identifier map
// was produced by a different tokenizer state.
MetricsTable evaluate(const recommender::Recommender& model, const tokenizer::Tokenizer& tok,
                      const tokenizer::IdentifierMap& ids, const std::vector<data::IndexedExample>& examples,
                      const EvalOptions& options);

}  // namespace etegrec::evaldecode
