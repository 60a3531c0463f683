#include "etegrec/io.hpp"

#include "etegrec/errors.hpp"

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

namespace etegrec::io {

namespace {

constexpr char kMagic[8] = {'E', 'T', 'G', 'R', 'C', 'K', 'P', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

void write_params(Archive& a, const nn::ParameterSet& params, const std::string& prefix) {
  for (const auto* p : params.all()) a.tensors.emplace_back(prefix + p->name, p->value);
}

void read_params(const Archive& a, nn::ParameterSet& params, const std::string& prefix) {
  for (auto* p : params.all()) {
    const auto& m = a.tensor(prefix + p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw FormatError("checkpoint tensor " + p->name + " has the wrong shape");
    }
    p->value = m;
  }
}

void write_optimizer(Archive& a, const nn::ParameterSet& params, const nn::AdamW& opt) {
  auto& o = const_cast<nn::AdamW&>(opt);
  o.ensure_state(params);
  a.meta["optimizer_steps"] = opt.steps();
  const auto all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    a.tensors.emplace_back("adam.m." + all[i]->name, o.first_moments()[i]);
    a.tensors.emplace_back("adam.v." + all[i]->name, o.second_moments()[i]);
  }
}

void read_optimizer(const Archive& a, const nn::ParameterSet& params, nn::AdamW& opt) {
  if (!a.meta.contains("optimizer_steps")) return;
  opt.ensure_state(params);
  opt.set_steps(a.meta["optimizer_steps"].get<std::int64_t>());
  const auto all = params.all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    opt.first_moments()[i] = a.tensor("adam.m." + all[i]->name);
    opt.second_moments()[i] = a.tensor("adam.v." + all[i]->name);
  }
}

}  // namespace

const ag::Matrix& Archive::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw FormatError("checkpoint has no tensor named " + name);
}

bool Archive::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.first == name) return true;
  }
  return false;
}

void save_archive(const std::filesystem::path& path, const Archive& archive) {
  json header = archive.meta;
  json index = json::array();
  for (const auto& [name, m] : archive.tensors) index.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  header["tensors"] = index;
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  write_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  static_assert(sizeof(double) == 8);
  for (const auto& [name, m] : archive.tensors) {
    // Row-major storage; doubles written in host (little-endian) order.
    out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  }
  if (!out) throw IngestionError("failed writing checkpoint " + path.string());
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open checkpoint " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw FormatError(path.string() + ": not a checkpoint");
  const std::uint64_t len = read_u64(in);
  if (len > (1ULL << 32)) throw FormatError(path.string() + ": corrupt header length");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw FormatError(path.string() + ": truncated header");
  Archive a;
  a.meta = json::parse(text);
  const json index = a.meta["tensors"];
  a.meta.erase("tensors");
  for (const auto& t : index) {
    ag::Matrix m(t["rows"].get<ag::Index>(), t["cols"].get<ag::Index>());
    in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
    if (!in) throw FormatError(path.string() + ": truncated tensor " + t["name"].get<std::string>());
    a.tensors.emplace_back(t["name"].get<std::string>(), std::move(m));
  }
  return a;
}

json identifier_map_to_json(const tokenizer::IdentifierMap& ids) {
  json j;
  j["levels"] = ids.levels;
  j["codebook_size"] = ids.codebook_size;
  j["suffix_capacity"] = ids.suffix_capacity;
  j["tokenizer_hash"] = hex64(ids.tokenizer_hash);
  json rows = json::array();
  for (const auto& it : ids.items) rows.push_back({{"item", it.item_id}, {"tokens", it.tokens}, {"suffix", it.suffix}});
  j["items"] = rows;
  return j;
}

tokenizer::IdentifierMap identifier_map_from_json(const json& j) {
  tokenizer::IdentifierMap ids;
  ids.levels = j.at("levels").get<int>();
  ids.codebook_size = j.at("codebook_size").get<int>();
  ids.suffix_capacity = j.at("suffix_capacity").get<int>();
  ids.tokenizer_hash = std::stoull(j.at("tokenizer_hash").get<std::string>(), nullptr, 16);
  for (const auto& r : j.at("items")) {
    tokenizer::ItemIdentifier it;
    it.item_id = r.at("item").get<std::string>();
    it.tokens = r.at("tokens").get<std::vector<int>>();
    it.suffix = r.at("suffix").get<int>();
    ids.items.push_back(std::move(it));
  }
  return ids;
}

json vocab_table(const recommender::VocabLayout& vocab) {
  json j;
  j["pad"] = recommender::VocabLayout::kPad;
  j["bos"] = recommender::VocabLayout::kBos;
  json levels = json::array();
  for (int l = 0; l < vocab.levels(); ++l) {
    levels.push_back({{"level", l}, {"first", vocab.level_token(l, 0)}, {"count", vocab.codebook_size()}});
  }
  j["levels"] = levels;
  j["suffix"] = {{"first", vocab.suffix_token(0)}, {"count", vocab.suffix_capacity()}};
  j["size"] = vocab.size();
  return j;
}

void save_tokenizer(const std::filesystem::path& path, const tokenizer::Tokenizer& tok, const nn::AdamW* opt) {
  Archive a;
  a.meta["kind"] = "tokenizer";
  a.meta["config"] = tok.config();
  a.meta["parameter_hash"] = hex64(tok.hash());
  write_params(a, tok.parameters(), "");
  if (opt != nullptr) write_optimizer(a, tok.parameters(), *opt);
  save_archive(path, a);
}

std::unique_ptr<tokenizer::Tokenizer> load_tokenizer(const std::filesystem::path& path, nn::AdamW* opt) {
  const Archive a = load_archive(path);
  if (a.meta.value("kind", "") != "tokenizer") throw FormatError(path.string() + " is not a tokenizer checkpoint");
  auto tok = std::make_unique<tokenizer::Tokenizer>(a.meta.at("config").get<tokenizer::TokenizerConfig>(), 0);
  read_params(a, tok->parameters(), "");
  if (opt != nullptr) read_optimizer(a, tok->parameters(), *opt);
  return tok;
}

void save_recommender(const std::filesystem::path& path, const recommender::Recommender& rec,
                      const tokenizer::IdentifierMap* ids, const nn::AdamW* opt) {
  Archive a;
  a.meta["kind"] = "recommender";
  a.meta["config"] = rec.config();
  a.meta["vocab"] = vocab_table(rec.vocab());
  a.meta["parameter_hash"] = hex64(rec.hash());
  if (ids != nullptr) a.meta["identifiers"] = identifier_map_to_json(*ids);
  write_params(a, rec.parameters(), "");
  if (opt != nullptr) write_optimizer(a, rec.parameters(), *opt);
  save_archive(path, a);
}

std::unique_ptr<recommender::Recommender> load_recommender(const std::filesystem::path& path, nn::AdamW* opt,
                                                           tokenizer::IdentifierMap* ids) {
  const Archive a = load_archive(path);
  if (a.meta.value("kind", "") != "recommender") throw FormatError(path.string() + " is not a recommender checkpoint");
  auto rec = std::make_unique<recommender::Recommender>(a.meta.at("config").get<recommender::RecommenderConfig>(), 0);
  read_params(a, rec->parameters(), "");
  if (opt != nullptr) read_optimizer(a, rec->parameters(), *opt);
  if (ids != nullptr) {
    if (!a.meta.contains("identifiers")) throw FormatError(path.string() + " carries no identifier map");
    *ids = identifier_map_from_json(a.meta["identifiers"]);
  }
  return rec;
}

std::uint64_t json_hash(const json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace etegrec::io
