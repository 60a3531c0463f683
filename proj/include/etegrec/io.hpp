#pragma once

// Binary checkpoints (magic, JSON header, raw little-endian doubles) and JSON
// conversions for every configuration struct.

#include "etegrec/alignment.hpp"
#include "etegrec/recommender.hpp"
#include "etegrec/tokenizer.hpp"
#include "etegrec/trainer.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace etegrec::tokenizer {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TokenizerConfig, levels, codebook_size, code_dim, hidden, beta,
                                                input_dim, suffix_capacity)
}
namespace etegrec::recommender {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RecommenderConfig, encoder_layers, decoder_layers, d_model, d_ff, heads,
                                                head_dim, dropout, max_len, levels, codebook_size, suffix_capacity,
                                                semantic_dim, projection_hidden, final_norm)
}
namespace etegrec::alignment {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AlignmentConfig, mu, lambda, tau, probability_floor, teacher_forcing,
                                                sia_sign)
}
namespace etegrec::trainer {
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainSchedule, cycle_length, tokenizer_lr, recommender_lr, weight_decay,
                                                epsilon, min_cycles, max_cycles, patience, max_final_epochs, batch_size,
                                                clip_norm, eval_beam, max_valid_users, validate_each_cycle)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PretrainOptions, epochs, lr, weight_decay, batch_size,
                                                reseed_dead_codes, seed)
}

namespace etegrec::io {

using json = nlohmann::json;

struct Archive {
  json meta;
  std::vector<std::pair<std::string, ag::Matrix>> tensors;

  const ag::Matrix& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_archive(const std::filesystem::path& path, const Archive& archive);
Archive load_archive(const std::filesystem::path& path);

json identifier_map_to_json(const tokenizer::IdentifierMap& ids);
tokenizer::IdentifierMap identifier_map_from_json(const json& j);
json vocab_table(const recommender::VocabLayout& vocab);

void save_tokenizer(const std::filesystem::path& path, const tokenizer::Tokenizer& tok, const nn::AdamW* opt = nullptr);
std::unique_ptr<tokenizer::Tokenizer> load_tokenizer(const std::filesystem::path& path, nn::AdamW* opt = nullptr);

void save_recommender(const std::filesystem::path& path, const recommender::Recommender& rec,
                      const tokenizer::IdentifierMap* ids = nullptr, const nn::AdamW* opt = nullptr);
std::unique_ptr<recommender::Recommender> load_recommender(const std::filesystem::path& path, nn::AdamW* opt = nullptr,
                                                           tokenizer::IdentifierMap* ids = nullptr);

// FNV-1a of a JSON document's compact dump.
std::uint64_t json_hash(const json& j);
std::string hex64(std::uint64_t v);

}  // namespace etegrec::io
