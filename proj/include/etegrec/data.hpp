#pragma once

#include "etegrec/autograd.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

namespace etegrec::data {

using ag::Matrix;

struct UserRecord {
  std::string user_id;
  std::vector<std::string> items;       // chronological
  std::vector<std::int64_t> timestamps;  // parallel to items, may be empty
};

struct InteractionCorpus {
  std::vector<UserRecord> users;

  std::size_t interaction_count() const;
  // Sorted, de-duplicated item ids referenced by any user.
  std::vector<std::string> item_vocabulary() const;
};

// Dense item numbering: index i is the i-th item id in ascending order.
class ItemIndex {
 public:
  ItemIndex() = default;
  explicit ItemIndex(std::vector<std::string> sorted_ids);
  static ItemIndex from_corpus(const InteractionCorpus& corpus);

  std::size_t size() const { return ids_.size(); }
  const std::string& id(int index) const { return ids_.at(static_cast<std::size_t>(index)); }
  const std::vector<std::string>& ids() const { return ids_; }
  int index(const std::string& id) const;  // throws if unknown
  bool contains(const std::string& id) const { return lookup_.count(id) != 0; }

 private:
  std::vector<std::string> ids_;
  std::unordered_map<std::string, int> lookup_;
};

// Tab-separated user_id, item_id, integer timestamp per line. Sequences are
// sorted by timestamp with ties kept in file order.
InteractionCorpus load_interactions(const std::filesystem::path& path);
InteractionCorpus parse_interactions(std::istream& in, const std::string& source = "<stream>");
void write_interactions(const std::filesystem::path& path, const InteractionCorpus& corpus);

struct KCoreStats {
  int rounds = 0;
  std::vector<std::size_t> removed_users;  // per round
  std::vector<std::size_t> removed_items;  // per round
};

InteractionCorpus apply_k_core(const InteractionCorpus& corpus, int k, KCoreStats* stats = nullptr);

enum class Split { train, valid, test };
const char* split_name(Split s);

struct SplitExample {
  std::string user_id;
  std::vector<std::string> input_items;
  std::string target_item;
  Split split = Split::train;
};

struct SplitStats {
  std::size_t skipped_users = 0;
};

// Leave-one-out: last item is test, second-to-last valid, every earlier
// next-item target is a train example. Inputs keep the last max_len items.
std::vector<SplitExample> split_leave_one_out(const InteractionCorpus& corpus, int max_len,
                                              SplitStats* stats = nullptr);
void write_split_manifest(const std::filesystem::path& path, const std::vector<SplitExample>& examples);

// Same examples over dense item indices, which is what the models consume.
struct IndexedExample {
  std::vector<int> input;
  int target = 0;
  Split split = Split::train;
  std::string user_id;
};
std::vector<IndexedExample> index_examples(const std::vector<SplitExample>& examples, const ItemIndex& index,
                                           Split which);

// Drops each user's last two interactions (the valid/test targets).
InteractionCorpus training_portion(const InteractionCorpus& corpus);

struct EmbeddingTable {
  int dim = 0;
  ItemIndex index;  // row i belongs to index.id(i)
  Matrix rows;      // index.size() x dim

  const auto row(const std::string& item_id) const { return rows.row(index.index(item_id)); }
};

enum class EmbeddingFormat { automatic, text, binary };

struct EmbeddingLoadOptions {
  bool l2_normalize = false;
  EmbeddingFormat format = EmbeddingFormat::automatic;  // automatic: ".bin" means binary
};

EmbeddingTable load_embeddings(const std::filesystem::path& path, const InteractionCorpus& corpus,
                               const EmbeddingLoadOptions& options = {});
void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table,
                     EmbeddingFormat format = EmbeddingFormat::automatic);
void l2_normalize(EmbeddingTable& table);

// Symmetric co-occurrence counts: pairs at distance 1..window-1 within a
// user sequence, plus each item's own interaction count on the diagonal.
Matrix cooccurrence_matrix(const InteractionCorpus& corpus, const ItemIndex& index, int window);

struct SvdFactors {
  Matrix factors;  // U * diag(sigma), truncated/padded to dim columns
  Matrix right;    // V, truncated/padded to dim columns
  Eigen::VectorXd singular;
  int rank = 0;
};
SvdFactors truncated_svd(const Matrix& m, int dim);

EmbeddingTable derive_embeddings_svd(const InteractionCorpus& corpus, int dim, int window = 5);
// Rows for every item of `index`; items absent from `corpus` get zero counts.
EmbeddingTable derive_embeddings_svd(const InteractionCorpus& corpus, const ItemIndex& index, int dim, int window = 5);

// Synthetic corpus with items in latent clusters and Markov transitions
// between clusters; used for tests and desk-scale experiments.
struct PlantedCorpusOptions {
  int users = 2000;
  int items = 200;
  int clusters = 20;
  int min_length = 7;
  int max_length = 12;
  double follow_probability = 0.8;  // jump to the successor cluster, else uniform
  std::uint64_t seed = 7;
};

struct PlantedCorpus {
  InteractionCorpus corpus;
  std::vector<std::string> item_ids;  // sorted
  std::vector<int> item_cluster;      // parallel to item_ids
  std::vector<int> successor;         // per cluster
};

PlantedCorpus make_planted_corpus(const PlantedCorpusOptions& options);

}  // namespace etegrec::data
