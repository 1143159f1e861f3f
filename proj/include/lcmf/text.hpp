#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "lcmf/nn.hpp"
#include "lcmf/sam.hpp"
#include "lcmf/tensor.hpp"

namespace lcmf {

// Closed-world vocabulary. Ids 0..4 are reserved control tokens; real words
// start at kReservedCount, in the order of the `words` list.
struct Vocab {
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kCls = 1;
  static constexpr int64_t kSep = 2;
  static constexpr int64_t kMask = 3;
  static constexpr int64_t kUnk = 4;
  static constexpr int64_t kReservedCount = 5;

  std::vector<std::string> words;
  std::unordered_map<std::string, int64_t> ids;

  int64_t size() const { return kReservedCount + static_cast<int64_t>(words.size()); }
  int64_t id_of(const std::string& word) const;

  static Vocab from_words(std::vector<std::string> unique_words);
  // Splits every text and keeps each distinct word, lexicographically sorted.
  static Vocab build(const std::vector<std::string>& texts);

  // One word per line, line number = id - kReservedCount.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

// Lowercased words; any character outside [a-z0-9] (bytes >= 0x80 pass
// through untouched) separates tokens. Idempotent on its own output.
std::vector<std::string> split_words(const std::string& text);

// [cls, word ids..., sep]; unknown words map to unk. "" -> [cls, sep].
std::vector<int64_t> tokenize(const std::string& text, const Vocab& vocab);

// Corruption record: parallel lists over the selected positions.
struct MlmPlan {
  enum Action { kMaskOut = 0, kRandomize = 1, kKeep = 2 };

  std::vector<int64_t> positions;  // ascending
  std::vector<int64_t> labels;     // original id at each selected position
  std::vector<int> actions;

  bool empty() const { return positions.empty(); }
};

struct MlmSplit {
  double mask = 0.8;
  double random = 0.1;
  double keep = 0.1;
};

// Each eligible position (anything but pad/cls/sep) is selected independently
// with probability p; selected positions are masked out, replaced by a
// uniform random real token, or kept, per the split. Deterministic per seed.
std::pair<std::vector<int64_t>, MlmPlan> mlm_corrupt(const std::vector<int64_t>& ids,
                                                     const Vocab& vocab, double p,
                                                     const MlmSplit& split, uint64_t seed);

struct TextEncoderConfig {
  int64_t vocab_size = 0;
  int64_t d_model = 64;
  int64_t heads = 4;
  int64_t mlp_ratio = 2;
  int64_t blocks = 2;
  int64_t max_len = 32;
};

// Token embedding + learned positional embedding + transformer-style blocks.
// The cls row doubles as the sequence summary downstream.
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(ParamStore& store, const std::string& name, const TextEncoderConfig& cfg);

  // ids -> [T, D]. Sequences longer than max_len are truncated with a
  // warning on stderr.
  Tensor operator()(const std::vector<int64_t>& ids) const;

  const TextEncoderConfig& config() const { return cfg_; }

 private:
  TextEncoderConfig cfg_;
  Tensor tok_embed_;  // [V, D]
  Tensor pos_embed_;  // [max_len, D]
  std::vector<VitBlock> blocks_;
};

// Mean cross-entropy of head(features) rows at the plan's positions against
// the plan's labels. An empty plan yields an exact 0.0 loss.
Tensor mlm_loss(const Tensor& features, const MlmPlan& plan, const Linear& head);

}  // namespace lcmf
