#include "etegrec/data.hpp"
#include "etegrec/errors.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

using namespace etegrec;
using data::InteractionCorpus;
using data::UserRecord;

namespace {

InteractionCorpus corpus_of(const std::vector<std::pair<std::string, std::vector<std::string>>>& users) {
  InteractionCorpus c;
  for (const auto& [u, items] : users) c.users.push_back({u, items, {}});
  return c;
}

std::filesystem::path temp_file(const std::string& name, const std::string& content) {
  const auto p = std::filesystem::temp_directory_path() / ("etegrec_test_" + name);
  std::ofstream(p) << content;
  return p;
}

// Brute-force degree counts.
std::pair<std::map<std::string, int>, std::map<std::string, int>> degrees(const InteractionCorpus& c) {
  std::map<std::string, int> u, i;
  for (const auto& r : c.users) {
    u[r.user_id] += static_cast<int>(r.items.size());
    for (const auto& it : r.items) ++i[it];
  }
  return {u, i};
}

}  // namespace

TEST_CASE("interaction loading groups by user and sorts by timestamp with stable ties") {
  std::istringstream in("u1\ta\t1\nu1\tb\t2\nu2\ta\t3\n");
  const auto c = data::parse_interactions(in);
  REQUIRE(c.users.size() == 2);
  CHECK(c.users[0].user_id == "u1");
  CHECK(c.users[0].items == std::vector<std::string>{"a", "b"});
  CHECK(c.users[1].items == std::vector<std::string>{"a"});

  std::istringstream shuffled("u\tc\t30\nu\ta\t10\nu\tx\t20\nu\ty\t20\n");
  const auto s = data::parse_interactions(shuffled);
  CHECK(s.users[0].items == std::vector<std::string>{"a", "x", "y", "c"});
  CHECK(s.users[0].timestamps == std::vector<std::int64_t>{10, 20, 20, 30});
}

TEST_CASE("malformed and empty interaction files are rejected") {
  std::istringstream bad("u1\ta\t1\nu1\tb\n");
  try {
    data::parse_interactions(bad, "f.tsv");
    FAIL("expected an ingestion error");
  } catch (const IngestionError& e) {
    CHECK(std::string(e.what()).find("f.tsv:2") != std::string::npos);
  }
  std::istringstream empty("");
  CHECK_THROWS_AS(data::parse_interactions(empty), EmptyCorpusError);
  CHECK_THROWS_AS(data::load_interactions("/nonexistent/file.tsv"), IngestionError);
}

TEST_CASE("k-core: identity at k=1, collapse to empty, idempotence") {
  const auto c = corpus_of({{"u1", {"a", "b"}}, {"u2", {"a"}}});
  const auto same = data::apply_k_core(c, 1);
  CHECK(same.users.size() == 2);
  CHECK(same.interaction_count() == 3);
  CHECK_THROWS_AS(data::apply_k_core(c, 2), EmptyCorpusError);
}

TEST_CASE("k-core removes exactly the under-supported item, then iterates to a fixed point") {
  // 6 users over items p..u; every item has >= 5 interactions except "weak" with 4.
  InteractionCorpus c;
  const std::vector<std::string> strong{"p", "q", "r", "s", "t"};
  for (int u = 0; u < 6; ++u) {
    UserRecord rec{"u" + std::to_string(u), strong, {}};
    if (u < 4) rec.items.push_back("weak");
    c.users.push_back(rec);
  }
  data::KCoreStats stats;
  const auto f = data::apply_k_core(c, 5, &stats);
  REQUIRE(!stats.removed_items.empty());
  CHECK(stats.removed_items[0] == 1);
  CHECK(stats.removed_users[0] == 0);
  const auto [ud, id] = degrees(f);
  CHECK(id.count("weak") == 0);
  CHECK(id.size() == 5);
  for (const auto& [k, v] : ud) CHECK(v >= 5);
  for (const auto& [k, v] : id) CHECK(v >= 5);
  const auto again = data::apply_k_core(f, 5);
  CHECK(again.interaction_count() == f.interaction_count());
}

TEST_CASE("k-core fixed point agrees with a brute-force recount on a planted corpus") {
  data::PlantedCorpusOptions o;
  o.users = 300;
  o.items = 120;
  o.clusters = 10;
  o.min_length = 3;
  o.max_length = 8;
  const auto planted = data::make_planted_corpus(o);
  const auto f = data::apply_k_core(planted.corpus, 5);
  const auto [ud, id] = degrees(f);
  for (const auto& [k, v] : ud) CHECK(v >= 5);
  for (const auto& [k, v] : id) CHECK(v >= 5);
  const auto g = data::apply_k_core(f, 5);
  CHECK(g.interaction_count() == f.interaction_count());
  CHECK(g.users.size() == f.users.size());
}

TEST_CASE("leave-one-out split enumerates prefixes and truncates to the most recent items") {
  const auto c = corpus_of({{"u", {"a", "b", "c", "d", "e"}}});
  const auto ex = data::split_leave_one_out(c, 50);
  std::vector<data::SplitExample> train, valid, test;
  for (const auto& e : ex) {
    (e.split == data::Split::train ? train : e.split == data::Split::valid ? valid : test).push_back(e);
  }
  REQUIRE(test.size() == 1);
  REQUIRE(valid.size() == 1);
  REQUIRE(train.size() == 2);
  CHECK(test[0].input_items == std::vector<std::string>{"a", "b", "c", "d"});
  CHECK(test[0].target_item == "e");
  CHECK(valid[0].input_items == std::vector<std::string>{"a", "b", "c"});
  CHECK(valid[0].target_item == "d");
  CHECK(train[0].input_items == std::vector<std::string>{"a"});
  CHECK(train[0].target_item == "b");
  CHECK(train[1].input_items == std::vector<std::string>{"a", "b"});
  CHECK(train[1].target_item == "c");

  for (const auto& e : data::split_leave_one_out(c, 2)) {
    CHECK(e.input_items.size() <= 2);
    if (e.split == data::Split::test) CHECK(e.input_items == std::vector<std::string>{"c", "d"});
  }

  data::SplitStats stats;
  const auto short_user = corpus_of({{"s", {"a", "b"}}, {"u", {"a", "b", "c"}}});
  const auto ex2 = data::split_leave_one_out(short_user, 50, &stats);
  CHECK(stats.skipped_users == 1);
  CHECK(ex2.size() == 2);
}

TEST_CASE("split properties: truncation keeps the suffix, targets are distinct positions") {
  data::PlantedCorpusOptions o;
  o.users = 50;
  const auto planted = data::make_planted_corpus(o);
  const int max_len = 4;
  const auto full = data::split_leave_one_out(planted.corpus, 1000);
  const auto cut = data::split_leave_one_out(planted.corpus, max_len);
  REQUIRE(full.size() == cut.size());
  for (std::size_t i = 0; i < full.size(); ++i) {
    const auto& a = full[i].input_items;
    const std::size_t keep = std::min<std::size_t>(a.size(), max_len);
    CHECK(cut[i].input_items == std::vector<std::string>(a.end() - static_cast<long>(keep), a.end()));
    CHECK(!cut[i].input_items.empty());
  }
  // per user: input lengths of test, valid and last train differ, so the targets are distinct positions
  std::map<std::string, std::map<data::Split, std::size_t>> longest;
  for (const auto& e : full) {
    auto& slot = longest[e.user_id][e.split];
    slot = std::max(slot, e.input_items.size());
  }
  for (const auto& [u, m] : longest) {
    CHECK(m.at(data::Split::test) == m.at(data::Split::valid) + 1);
    CHECK(m.at(data::Split::valid) == m.at(data::Split::train) + 1);
  }
}

TEST_CASE("embedding loading: text and binary formats, coverage and dimension errors") {
  const auto c = corpus_of({{"u", {"a", "b"}}});
  const auto p = temp_file("emb.txt", "2 4\na 1 2 3 4\nb 0 0 1 0\n");
  const auto t = data::load_embeddings(p, c);
  CHECK(t.dim == 4);
  CHECK(t.rows.rows() == 2);
  CHECK(t.row("a")(3) == 4.0);

  data::EmbeddingLoadOptions norm;
  norm.l2_normalize = true;
  const auto tn = data::load_embeddings(p, c, norm);
  CHECK(tn.row("a").norm() == doctest::Approx(1.0));

  const auto c3 = corpus_of({{"u", {"a", "b", "z"}}});
  CHECK_THROWS_AS(data::load_embeddings(p, c3), CoverageError);
  const auto bad = temp_file("emb_bad.txt", "2 4\na 1 2 3\nb 0 0 1 0\n");
  CHECK_THROWS_AS(data::load_embeddings(bad, c), FormatError);

  const auto bin = std::filesystem::temp_directory_path() / "etegrec_test_emb.bin";
  data::save_embeddings(bin, t);
  const auto tb = data::load_embeddings(bin, c);
  CHECK((tb.rows - t.rows).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("SVD embeddings: co-occurring items align, isolated items sit on their self count") {
  // a and b always appear together; c is alone in its own sequences.
  InteractionCorpus c = corpus_of({{"u1", {"a", "b"}}, {"u2", {"a", "b"}}, {"u3", {"c"}}, {"u4", {"c"}}});
  const auto idx = data::ItemIndex::from_corpus(c);
  const auto m = data::cooccurrence_matrix(c, idx, 5);
  CHECK(m(2, 0) == 0.0);
  CHECK(m(2, 1) == 0.0);
  CHECK(m(2, 2) == 2.0);
  const auto t = data::derive_embeddings_svd(c, 2);
  const auto a = t.row("a");
  const auto b = t.row("b");
  CHECK(a.dot(b) / (a.norm() * b.norm()) >= 0.99);

  const auto full = data::truncated_svd(m, 3);
  const data::Matrix back = full.factors * full.right.transpose();
  CHECK((back - m).cwiseAbs().maxCoeff() < 1e-6);

  // dim beyond the rank pads with zero columns
  const auto padded = data::truncated_svd(data::Matrix::Ones(3, 3), 3);
  CHECK(padded.rank == 1);
  CHECK(padded.factors.col(2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("SVD over a catalogue index covers every item") {
  const auto c = corpus_of({{"u", {"a", "b", "c", "d", "e"}}, {"v", {"e", "d", "c", "b", "a"}}});
  const auto train = data::training_portion(c);
  const auto idx = data::ItemIndex::from_corpus(c);
  const auto t = data::derive_embeddings_svd(train, idx, 3);
  CHECK(t.rows.rows() == 5);
  CHECK(t.index.ids() == idx.ids());
}
