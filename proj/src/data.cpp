#include "etegrec/data.hpp"

#include "etegrec/errors.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace etegrec::data {

std::size_t InteractionCorpus::interaction_count() const {
  std::size_t n = 0;
  for (const auto& u : users) n += u.items.size();
  return n;
}

std::vector<std::string> InteractionCorpus::item_vocabulary() const {
  std::set<std::string> ids;
  for (const auto& u : users) ids.insert(u.items.begin(), u.items.end());
  return {ids.begin(), ids.end()};
}

ItemIndex::ItemIndex(std::vector<std::string> sorted_ids) : ids_(std::move(sorted_ids)) {
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    if (i > 0 && !(ids_[i - 1] < ids_[i])) throw std::invalid_argument("ItemIndex ids must be sorted and unique");
    lookup_.emplace(ids_[i], static_cast<int>(i));
  }
}

ItemIndex ItemIndex::from_corpus(const InteractionCorpus& corpus) { return ItemIndex(corpus.item_vocabulary()); }

int ItemIndex::index(const std::string& id) const {
  auto it = lookup_.find(id);
  if (it == lookup_.end()) throw std::out_of_range("unknown item id: " + id);
  return it->second;
}

namespace {

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> fields;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      fields.push_back(line.substr(start));
      break;
    }
    fields.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return fields;
}

}  // namespace

InteractionCorpus parse_interactions(std::istream& in, const std::string& source) {
  struct Row {
    std::string item;
    std::int64_t ts;
  };
  std::vector<std::string> user_order;
  std::unordered_map<std::string, std::vector<Row>> by_user;
  std::string line;
  std::size_t line_no = 0;
  std::size_t records = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty()) {
      throw IngestionError(source + ":" + std::to_string(line_no) +
                           ": expected user_id<TAB>item_id<TAB>timestamp");
    }
    std::int64_t ts = 0;
    const auto* end = fields[2].data() + fields[2].size();
    auto [ptr, ec] = std::from_chars(fields[2].data(), end, ts);
    if (ec != std::errc() || ptr != end) {
      throw IngestionError(source + ":" + std::to_string(line_no) + ": timestamp is not an integer");
    }
    std::string user(fields[0]);
    auto [it, inserted] = by_user.try_emplace(user);
    if (inserted) user_order.push_back(user);
    it->second.push_back({std::string(fields[1]), ts});
    ++records;
  }
  if (records == 0) throw EmptyCorpusError(source + ": no interactions found");

  InteractionCorpus corpus;
  corpus.users.reserve(user_order.size());
  for (const auto& user : user_order) {
    auto& rows = by_user[user];
    std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.ts < b.ts; });
    UserRecord rec;
    rec.user_id = user;
    for (auto& r : rows) {
      rec.items.push_back(std::move(r.item));
      rec.timestamps.push_back(r.ts);
    }
    corpus.users.push_back(std::move(rec));
  }
  return corpus;
}

InteractionCorpus load_interactions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestionError("cannot open interaction file: " + path.string());
  return parse_interactions(in, path.string());
}

void write_interactions(const std::filesystem::path& path, const InteractionCorpus& corpus) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  for (const auto& u : corpus.users) {
    for (std::size_t i = 0; i < u.items.size(); ++i) {
      const std::int64_t ts = u.timestamps.empty() ? static_cast<std::int64_t>(i) : u.timestamps[i];
      out << u.user_id << '\t' << u.items[i] << '\t' << ts << '\n';
    }
  }
}

InteractionCorpus apply_k_core(const InteractionCorpus& corpus, int k, KCoreStats* stats) {
  if (k < 1) throw std::invalid_argument("k-core needs k >= 1");
  InteractionCorpus current = corpus;
  KCoreStats local;
  while (true) {
    std::unordered_map<std::string, std::size_t> item_counts;
    for (const auto& u : current.users) {
      for (const auto& it : u.items) ++item_counts[it];
    }
    std::unordered_set<std::string> dropped_items;
    for (const auto& [id, n] : item_counts) {
      if (n < static_cast<std::size_t>(k)) dropped_items.insert(id);
    }
    std::size_t dropped_users = 0;
    for (const auto& u : current.users) {
      if (u.items.size() < static_cast<std::size_t>(k)) ++dropped_users;
    }
    if (dropped_items.empty() && dropped_users == 0) break;

    ++local.rounds;
    local.removed_users.push_back(dropped_users);
    local.removed_items.push_back(dropped_items.size());

    InteractionCorpus next;
    for (auto& u : current.users) {
      if (u.items.size() < static_cast<std::size_t>(k)) continue;
      UserRecord kept;
      kept.user_id = u.user_id;
      for (std::size_t i = 0; i < u.items.size(); ++i) {
        if (dropped_items.count(u.items[i])) continue;
        kept.items.push_back(u.items[i]);
        if (!u.timestamps.empty()) kept.timestamps.push_back(u.timestamps[i]);
      }
      if (!kept.items.empty()) next.users.push_back(std::move(kept));
    }
    current = std::move(next);
    if (current.users.empty()) {
      throw EmptyCorpusError("corpus is empty after " + std::to_string(k) + "-core filtering");
    }
  }
  if (stats != nullptr) *stats = local;
  return current;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::valid:
      return "valid";
    case Split::test:
      return "test";
  }
  return "?";
}

namespace {

std::vector<std::string> last_n(const std::vector<std::string>& items, std::size_t end, int max_len) {
  const std::size_t begin = end > static_cast<std::size_t>(max_len) ? end - static_cast<std::size_t>(max_len) : 0;
  return {items.begin() + static_cast<std::ptrdiff_t>(begin), items.begin() + static_cast<std::ptrdiff_t>(end)};
}

}  // namespace

std::vector<SplitExample> split_leave_one_out(const InteractionCorpus& corpus, int max_len, SplitStats* stats) {
  if (max_len < 1) throw std::invalid_argument("max_len must be positive");
  std::vector<SplitExample> out;
  SplitStats local;
  for (const auto& u : corpus.users) {
    const std::size_t n = u.items.size();
    if (n < 3) {
      ++local.skipped_users;
      continue;
    }
    for (std::size_t t = 1; t + 2 < n; ++t) {
      out.push_back({u.user_id, last_n(u.items, t, max_len), u.items[t], Split::train});
    }
    out.push_back({u.user_id, last_n(u.items, n - 2, max_len), u.items[n - 2], Split::valid});
    out.push_back({u.user_id, last_n(u.items, n - 1, max_len), u.items[n - 1], Split::test});
  }
  if (local.skipped_users > 0) {
    spdlog::warn("leave-one-out split skipped {} users with fewer than 3 interactions", local.skipped_users);
  }
  if (stats != nullptr) *stats = local;
  return out;
}

void write_split_manifest(const std::filesystem::path& path, const std::vector<SplitExample>& examples) {
  std::ofstream out(path);
  if (!out) throw IngestionError("cannot write " + path.string());
  for (const auto& ex : examples) {
    nlohmann::ordered_json rec;
    rec["user_id"] = ex.user_id;
    rec["split"] = split_name(ex.split);
    rec["input_length"] = ex.input_items.size();
    rec["target"] = ex.target_item;
    out << rec.dump() << '\n';
  }
}

std::vector<IndexedExample> index_examples(const std::vector<SplitExample>& examples, const ItemIndex& index,
                                           Split which) {
  std::vector<IndexedExample> out;
  std::size_t excluded = 0;
  for (const auto& ex : examples) {
    if (ex.split != which) continue;
    if (!index.contains(ex.target_item)) {
      ++excluded;
      continue;
    }
    IndexedExample ie;
    ie.split = ex.split;
    ie.user_id = ex.user_id;
    ie.target = index.index(ex.target_item);
    for (const auto& it : ex.input_items) {
      if (index.contains(it)) ie.input.push_back(index.index(it));
    }
    if (ie.input.empty()) {
      ++excluded;
      continue;
    }
    out.push_back(std::move(ie));
  }
  if (excluded > 0) spdlog::warn("{} {} examples reference items outside the catalog; excluded", excluded,
                                 split_name(which));
  return out;
}

InteractionCorpus training_portion(const InteractionCorpus& corpus) {
  InteractionCorpus out;
  for (const auto& u : corpus.users) {
    if (u.items.size() <= 2) continue;
    UserRecord r;
    r.user_id = u.user_id;
    r.items.assign(u.items.begin(), u.items.end() - 2);
    if (!u.timestamps.empty()) r.timestamps.assign(u.timestamps.begin(), u.timestamps.end() - 2);
    out.users.push_back(std::move(r));
  }
  return out;
}

namespace {

EmbeddingFormat resolve_format(const std::filesystem::path& path, EmbeddingFormat f) {
  if (f != EmbeddingFormat::automatic) return f;
  return path.extension() == ".bin" ? EmbeddingFormat::binary : EmbeddingFormat::text;
}

}  // namespace

void l2_normalize(EmbeddingTable& table) {
  for (ag::Index i = 0; i < table.rows.rows(); ++i) {
    const double n = table.rows.row(i).norm();
    if (n == 0.0) throw FormatError("embedding row for item " + table.index.id(static_cast<int>(i)) + " is all zeros");
    table.rows.row(i) /= n;
  }
}

EmbeddingTable load_embeddings(const std::filesystem::path& path, const InteractionCorpus& corpus,
                               const EmbeddingLoadOptions& options) {
  const EmbeddingFormat format = resolve_format(path, options.format);
  std::ifstream in(path, format == EmbeddingFormat::binary ? std::ios::binary : std::ios::in);
  if (!in) throw IngestionError("cannot open embedding file: " + path.string());

  std::string header;
  if (!std::getline(in, header)) throw FormatError(path.string() + ": missing header line");
  std::istringstream hs(header);
  long long n = 0;
  long long dim = 0;
  if (!(hs >> n >> dim) || n < 0 || dim <= 0) throw FormatError(path.string() + ": header must be \"N D\"");

  const ItemIndex index = ItemIndex::from_corpus(corpus);
  EmbeddingTable table;
  table.dim = static_cast<int>(dim);
  table.index = index;
  table.rows = Matrix::Zero(static_cast<ag::Index>(index.size()), dim);
  std::vector<bool> seen(index.size(), false);

  for (long long r = 0; r < n; ++r) {
    std::string id;
    std::vector<double> values(static_cast<std::size_t>(dim));
    if (format == EmbeddingFormat::binary) {
      static_assert(std::endian::native == std::endian::little, "binary embeddings assume a little-endian host");
      if (!std::getline(in, id)) throw FormatError(path.string() + ": truncated at row " + std::to_string(r));
      std::vector<float> buf(static_cast<std::size_t>(dim));
      in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(sizeof(float) * buf.size()));
      if (!in) throw FormatError(path.string() + ": truncated vector for item " + id);
      std::copy(buf.begin(), buf.end(), values.begin());
    } else {
      std::string line;
      if (!std::getline(in, line)) throw FormatError(path.string() + ": expected " + std::to_string(n) + " rows");
      std::istringstream ls(line);
      ls >> id;
      std::size_t got = 0;
      double x = 0.0;
      while (ls >> x) {
        if (got < values.size()) values[got] = x;
        ++got;
      }
      if (got != values.size()) {
        throw FormatError(path.string() + ": row for item " + id + " has " + std::to_string(got) +
                          " values, header says " + std::to_string(dim));
      }
    }
    if (!index.contains(id)) continue;
    const int row = index.index(id);
    if (seen[static_cast<std::size_t>(row)]) throw FormatError(path.string() + ": duplicate row for item " + id);
    seen[static_cast<std::size_t>(row)] = true;
    for (long long j = 0; j < dim; ++j) table.rows(row, j) = values[static_cast<std::size_t>(j)];
  }

  std::vector<std::string> missing;
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) missing.push_back(index.id(static_cast<int>(i)));
  }
  if (!missing.empty()) {
    std::string msg = std::to_string(missing.size()) + " corpus items have no embedding row:";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, missing.size()); ++i) msg += " " + missing[i];
    throw CoverageError(msg);
  }
  if (!table.rows.allFinite()) throw FormatError(path.string() + ": non-finite embedding values");
  if (options.l2_normalize) l2_normalize(table);
  return table;
}

void save_embeddings(const std::filesystem::path& path, const EmbeddingTable& table, EmbeddingFormat format) {
  format = resolve_format(path, format);
  std::ofstream out(path, format == EmbeddingFormat::binary ? std::ios::binary : std::ios::out);
  if (!out) throw IngestionError("cannot write " + path.string());
  out << table.index.size() << ' ' << table.dim << '\n';
  for (std::size_t i = 0; i < table.index.size(); ++i) {
    const auto row = table.rows.row(static_cast<ag::Index>(i));
    if (format == EmbeddingFormat::binary) {
      out << table.index.id(static_cast<int>(i)) << '\n';
      std::vector<float> buf(row.size());
      for (ag::Index j = 0; j < row.size(); ++j) buf[static_cast<std::size_t>(j)] = static_cast<float>(row(j));
      out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(sizeof(float) * buf.size()));
    } else {
      out << table.index.id(static_cast<int>(i));
      char num[32];
      for (ag::Index j = 0; j < row.size(); ++j) {
        auto [end, ec] = std::to_chars(num, num + sizeof(num), row(j));
        out << ' ' << std::string_view(num, static_cast<std::size_t>(end - num));
      }
      out << '\n';
    }
  }
}

Matrix cooccurrence_matrix(const InteractionCorpus& corpus, const ItemIndex& index, int window) {
  if (window < 2) throw std::invalid_argument("co-occurrence window must be >= 2");
  const auto n = static_cast<ag::Index>(index.size());
  Matrix c = Matrix::Zero(n, n);
  for (const auto& u : corpus.users) {
    std::vector<int> ids;
    ids.reserve(u.items.size());
    for (const auto& it : u.items) ids.push_back(index.index(it));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      c(ids[i], ids[i]) += 1.0;
      for (std::size_t j = i + 1; j < ids.size() && j - i < static_cast<std::size_t>(window); ++j) {
        if (ids[i] == ids[j]) continue;
        c(ids[i], ids[j]) += 1.0;
        c(ids[j], ids[i]) += 1.0;
      }
    }
  }
  return c;
}

SvdFactors truncated_svd(const Matrix& m, int dim) {
  if (dim < 1) throw std::invalid_argument("SVD dimension must be positive");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(m), Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double tol = s.size() > 0 ? s(0) * 1e-10 : 0.0;
  int rank = 0;
  while (rank < s.size() && s(rank) > tol) ++rank;

  SvdFactors out;
  out.rank = rank;
  out.singular = s;
  out.factors = Matrix::Zero(m.rows(), dim);
  out.right = Matrix::Zero(m.cols(), dim);
  const int keep = std::min(dim, rank);
  for (int j = 0; j < keep; ++j) {
    out.factors.col(j) = svd.matrixU().col(j) * s(j);
    out.right.col(j) = svd.matrixV().col(j);
  }
  if (dim > rank) spdlog::warn("requested {} SVD dimensions but matrix rank is {}; padding with zeros", dim, rank);
  return out;
}

EmbeddingTable derive_embeddings_svd(const InteractionCorpus& corpus, int dim, int window) {
  return derive_embeddings_svd(corpus, ItemIndex::from_corpus(corpus), dim, window);
}

EmbeddingTable derive_embeddings_svd(const InteractionCorpus& corpus, const ItemIndex& index, int dim, int window) {
  if (dim > static_cast<int>(index.size())) {
    throw std::invalid_argument("SVD dimension " + std::to_string(dim) + " exceeds item count " +
                                std::to_string(index.size()));
  }
  const Matrix c = cooccurrence_matrix(corpus, index, window);
  SvdFactors f = truncated_svd(c, dim);
  EmbeddingTable table;
  table.dim = dim;
  table.index = index;
  table.rows = std::move(f.factors);
  return table;
}

PlantedCorpus make_planted_corpus(const PlantedCorpusOptions& o) {
  if (o.clusters < 1 || o.items < o.clusters || o.min_length < 1 || o.max_length < o.min_length) {
    throw std::invalid_argument("invalid planted corpus options");
  }
  std::mt19937_64 rng(o.seed);
  PlantedCorpus pc;
  const int width = static_cast<int>(std::to_string(o.items - 1).size());
  for (int i = 0; i < o.items; ++i) {
    std::string num = std::to_string(i);
    pc.item_ids.push_back("i" + std::string(static_cast<std::size_t>(width) - num.size(), '0') + num);
    pc.item_cluster.push_back(i % o.clusters);
  }
  std::vector<std::vector<int>> members(static_cast<std::size_t>(o.clusters));
  for (int i = 0; i < o.items; ++i) members[static_cast<std::size_t>(pc.item_cluster[i])].push_back(i);

  std::vector<int> order(static_cast<std::size_t>(o.clusters));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  pc.successor.assign(static_cast<std::size_t>(o.clusters), 0);
  for (int i = 0; i < o.clusters; ++i) pc.successor[order[i]] = order[(i + 1) % o.clusters];

  std::uniform_int_distribution<int> length(o.min_length, o.max_length);
  std::uniform_int_distribution<int> any_cluster(0, o.clusters - 1);
  std::bernoulli_distribution follow(o.follow_probability);
  const int uwidth = static_cast<int>(std::to_string(o.users - 1).size());
  for (int u = 0; u < o.users; ++u) {
    UserRecord rec;
    std::string num = std::to_string(u);
    rec.user_id = "u" + std::string(static_cast<std::size_t>(uwidth) - num.size(), '0') + num;
    int cluster = any_cluster(rng);
    const int n = length(rng);
    for (int t = 0; t < n; ++t) {
      const auto& pool = members[static_cast<std::size_t>(cluster)];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      rec.items.push_back(pc.item_ids[static_cast<std::size_t>(pool[pick(rng)])]);
      rec.timestamps.push_back(1'600'000'000LL + 1000LL * u + 10LL * t);
      cluster = follow(rng) ? pc.successor[static_cast<std::size_t>(cluster)] : any_cluster(rng);
    }
    pc.corpus.users.push_back(std::move(rec));
  }
  return pc;
}

}  // namespace etegrec::data
