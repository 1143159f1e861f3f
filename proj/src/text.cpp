#include "lcmf/text.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <set>

#include "lcmf/rng.hpp"

namespace lcmf {

int64_t Vocab::id_of(const std::string& word) const {
  auto it = ids.find(word);
  return it == ids.end() ? kUnk : it->second;
}

Vocab Vocab::from_words(std::vector<std::string> unique_words) {
  Vocab v;
  v.words = std::move(unique_words);
  for (size_t i = 0; i < v.words.size(); ++i) {
    if (v.words[i].empty()) detail::fail("vocab: empty word");
    if (!v.ids.emplace(v.words[i], kReservedCount + static_cast<int64_t>(i)).second)
      detail::fail("vocab: duplicate word '" + v.words[i] + "'");
  }
  return v;
}

Vocab Vocab::build(const std::vector<std::string>& texts) {
  std::set<std::string> seen;
  for (const std::string& t : texts)
    for (std::string& w : split_words(t)) seen.insert(std::move(w));
  return from_words(std::vector<std::string>(seen.begin(), seen.end()));
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) detail::fail("vocab: cannot write " + path);
  for (const std::string& w : words) out << w << '\n';
  if (!out) detail::fail("vocab: write failed for " + path);
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) detail::fail("vocab: cannot read " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    words.push_back(line);
  }
  return from_words(std::move(words));
}

std::vector<std::string> split_words(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char ch : text) {
    const bool keep = (ch >= 'a' && ch <= 'z') || (ch >= '0' && ch <= '9') || ch >= 0x80;
    const bool upper = ch >= 'A' && ch <= 'Z';
    if (keep || upper) {
      cur.push_back(upper ? static_cast<char>(ch - 'A' + 'a') : static_cast<char>(ch));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

std::vector<int64_t> tokenize(const std::string& text, const Vocab& vocab) {
  std::vector<int64_t> ids{Vocab::kCls};
  for (const std::string& w : split_words(text)) ids.push_back(vocab.id_of(w));
  ids.push_back(Vocab::kSep);
  return ids;
}

std::pair<std::vector<int64_t>, MlmPlan> mlm_corrupt(const std::vector<int64_t>& ids,
                                                     const Vocab& vocab, double p,
                                                     const MlmSplit& split, uint64_t seed) {
  if (p < 0.0 || p > 1.0) detail::fail("mlm corrupt: p outside [0,1]");
  if (split.mask < 0.0 || split.random < 0.0 || split.keep < 0.0 ||
      std::abs(split.mask + split.random + split.keep - 1.0) > 1e-12)
    detail::fail("mlm corrupt: split must be a distribution");
  if (p > 0.0 && vocab.words.empty())
    detail::fail("mlm corrupt: vocabulary has no real tokens");

  Rng rng(seed_hash(seed));
  std::vector<int64_t> corrupted = ids;
  MlmPlan plan;
  for (size_t i = 0; i < ids.size(); ++i) {
    const int64_t id = ids[i];
    if (id == Vocab::kPad || id == Vocab::kCls || id == Vocab::kSep) continue;
    if (!rng.bernoulli(p)) continue;

    plan.positions.push_back(static_cast<int64_t>(i));
    plan.labels.push_back(id);
    const double u = rng.next_double();
    if (u < split.mask) {
      plan.actions.push_back(MlmPlan::kMaskOut);
      corrupted[i] = Vocab::kMask;
    } else if (u < split.mask + split.random) {
      plan.actions.push_back(MlmPlan::kRandomize);
      corrupted[i] = Vocab::kReservedCount +
                     static_cast<int64_t>(rng.below(static_cast<uint64_t>(vocab.words.size())));
    } else {
      plan.actions.push_back(MlmPlan::kKeep);
    }
  }
  return {std::move(corrupted), std::move(plan)};
}

TextEncoder::TextEncoder(ParamStore& store, const std::string& name,
                         const TextEncoderConfig& cfg)
    : cfg_(cfg) {
  if (cfg.vocab_size < Vocab::kReservedCount)
    detail::fail("text encoder: vocab size below the reserved range");
  if (cfg.blocks < 1 || cfg.max_len < 1) detail::fail("text encoder: bad depth or max length");
  tok_embed_ = store.uniform_fan_in(name + ".tok_embed", {cfg.vocab_size, cfg.d_model},
                                    cfg.d_model);
  pos_embed_ = store.uniform_fan_in(name + ".pos_embed", {cfg.max_len, cfg.d_model}, cfg.d_model);
  for (int64_t i = 0; i < cfg.blocks; ++i)
    blocks_.emplace_back(store, name + ".block" + std::to_string(i + 1),
                         VitBlockConfig{cfg.d_model, cfg.heads, cfg.mlp_ratio});
}

Tensor TextEncoder::operator()(const std::vector<int64_t>& ids) const {
  if (ids.empty()) detail::fail("text encoder: empty sequence");
  std::vector<int64_t> used = ids;
  if (static_cast<int64_t>(used.size()) > cfg_.max_len) {
    std::cerr << "text encoder: truncating sequence of " << used.size() << " tokens to "
              << cfg_.max_len << "\n";
    used.resize(static_cast<size_t>(cfg_.max_len));
  }
  for (int64_t id : used)
    if (id < 0 || id >= cfg_.vocab_size)
      detail::fail("text encoder: token id " + std::to_string(id) + " outside vocabulary");

  Tensor x = add(gather_rows(tok_embed_, used),
                 slice_rows(pos_embed_, 0, static_cast<int64_t>(used.size())));
  for (const VitBlock& b : blocks_) x = b(x);
  return x;
}

Tensor mlm_loss(const Tensor& features, const MlmPlan& plan, const Linear& head) {
  if (plan.empty()) return Tensor::scalar(0.0);
  std::vector<int64_t> targets(static_cast<size_t>(features.rows()), 0);
  for (size_t i = 0; i < plan.positions.size(); ++i) {
    const int64_t pos = plan.positions[i];
    if (pos < 0 || pos >= features.rows())
      detail::fail("mlm loss: plan position " + std::to_string(pos) + " outside the sequence");
    targets[static_cast<size_t>(pos)] = plan.labels[i];
  }
  return cross_entropy_mean(head(features), targets, plan.positions);
}

}  // namespace lcmf
