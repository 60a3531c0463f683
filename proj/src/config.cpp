#include "etegrec/config.hpp"

#include "etegrec/errors.hpp"

#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace etegrec::config {

namespace {

json data_to_json(const DataConfig& d) {
  return json{{"name", d.name},          {"interactions", d.interactions}, {"embeddings", d.embeddings},
              {"k_core", d.k_core},      {"max_len", d.max_len},           {"svd_window", d.svd_window},
              {"l2_normalize", d.l2_normalize}};
}

std::vector<std::string> split_path(const std::string& path) {
  std::vector<std::string> parts;
  std::stringstream ss(path);
  std::string part;
  while (std::getline(ss, part, '.')) {
    if (part.empty()) throw ConfigError("malformed config key '" + path + "'");
    parts.push_back(part);
  }
  if (parts.empty()) throw ConfigError("empty config key");
  return parts;
}

}  // namespace

json to_json(const RunConfig& c) {
  json j;
  j["data"] = data_to_json(c.data);
  j["tokenizer"] = c.experiment.tokenizer;
  j["recommender"] = c.experiment.recommender;
  j["pretrain"] = c.experiment.pretrain;
  j["schedule"] = c.experiment.schedule;
  j["alignment"] = c.experiment.alignment;
  j["ks"] = c.experiment.ks;
  j["variant"] = c.variant;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  return j;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  try {
    const json& d = j.at("data");
    c.data.name = d.at("name").get<std::string>();
    c.data.interactions = d.at("interactions").get<std::string>();
    c.data.embeddings = d.at("embeddings").get<std::string>();
    c.data.k_core = d.at("k_core").get<int>();
    c.data.max_len = d.at("max_len").get<int>();
    c.data.svd_window = d.at("svd_window").get<int>();
    c.data.l2_normalize = d.at("l2_normalize").get<bool>();
    c.experiment.tokenizer = j.at("tokenizer").get<tokenizer::TokenizerConfig>();
    c.experiment.recommender = j.at("recommender").get<recommender::RecommenderConfig>();
    c.experiment.pretrain = j.at("pretrain").get<trainer::PretrainOptions>();
    c.experiment.schedule = j.at("schedule").get<trainer::TrainSchedule>();
    c.experiment.alignment = j.at("alignment").get<alignment::AlignmentConfig>();
    c.experiment.ks = j.at("ks").get<std::vector<int>>();
    c.variant = j.at("variant").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  c.experiment.variant = trainer::parse_variant(c.variant);
  c.experiment.seed = c.seed;
  c.experiment.recommender.max_len = c.data.max_len;
  c.experiment.sync();
  c.experiment.validate();
  return c;
}

RunConfig defaults(const std::string& preset) {
  RunConfig c;
  if (preset == "synthetic") {
    c.experiment = pipeline::synthetic_config();
    c.data.name = "synthetic";
    c.data.max_len = c.experiment.recommender.max_len;
    c.data.l2_normalize = true;
  } else if (preset != "default") {
    throw ConfigError("unknown preset '" + preset + "' (expected default or synthetic)");
  }
  c.experiment.recommender.max_len = c.data.max_len;
  c.experiment.sync();
  return c;
}

void apply_override(json& j, const std::string& path, const std::string& value) {
  const auto parts = split_path(path);
  json* cur = &j;
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!cur->is_object() || !cur->contains(parts[i])) throw ConfigError("unknown config key '" + path + "'");
    cur = &(*cur)[parts[i]];
  }
  if (!cur->is_object() || !cur->contains(parts.back())) throw ConfigError("unknown config key '" + path + "'");
  json& slot = (*cur)[parts.back()];
  json parsed = json::parse(value, nullptr, false);
  if (parsed.is_discarded() || (slot.is_string() && !parsed.is_string())) parsed = value;
  if (!slot.is_null() && parsed.type() != slot.type() && !(slot.is_number() && parsed.is_number())) {
    throw ConfigError("config key '" + path + "' expects " + std::string(slot.type_name()) + ", got '" + value + "'");
  }
  slot = parsed;
}

RunConfig resolve(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                  const std::string& preset) {
  json j = to_json(defaults(preset));
  if (file) {
    std::ifstream in(*file);
    if (!in) throw IngestionError("cannot open config file " + file->string());
    json f = json::parse(in, nullptr, false);
    if (f.is_discarded() || !f.is_object()) throw ConfigError(file->string() + " is not a JSON object");
    // Only known keys may appear in the file.
    std::function<void(const json&, const json&, const std::string&)> check = [&](const json& base, const json& over,
                                                                                 const std::string& prefix) {
      for (auto it = over.begin(); it != over.end(); ++it) {
        const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key())) throw ConfigError(file->string() + ": unknown config key '" + key + "'");
        if (it->is_object() && base[it.key()].is_object()) check(base[it.key()], *it, key);
      }
    };
    check(j, f, "");
    j.merge_patch(f);
  }
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' must look like key.path=value");
    apply_override(j, o.substr(0, eq), o.substr(eq + 1));
  }
  return from_json(j);
}

std::filesystem::path output_root() {
  const char* env = std::getenv("ETEGREC_OUTPUT_ROOT");
  return env != nullptr && *env != '\0' ? std::filesystem::path(env) : std::filesystem::current_path();
}

std::filesystem::path resolve_output(const std::string& dir) {
  const std::filesystem::path p(dir);
  return p.is_absolute() ? p : output_root() / p;
}

void echo(const RunConfig& c, const std::filesystem::path& dir, const std::string& command) {
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / ("config." + command + ".json"));
  if (!out) throw IngestionError("cannot write config echo in " + dir.string());
  out << to_json(c).dump(2) << '\n';
}

std::uint64_t config_hash(const RunConfig& c) {
  json j = to_json(c);
  // Training-relevant content only; output location and epochs budget of
  // later stages do not invalidate a resume.
  j.erase("output_dir");
  j["schedule"].erase("max_cycles");
  j["schedule"].erase("max_final_epochs");
  return io::json_hash(j);
}

}  // namespace etegrec::config
