#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lcmf/cmm.hpp"
#include "lcmf/nn.hpp"
#include "lcmf/sam.hpp"
#include "lcmf/tensor.hpp"

namespace lcmf {

// Closed answer set in rank order (descending frequency, ties lexicographic).
struct AnswerVocab {
  std::vector<std::string> answers;
  std::unordered_map<std::string, int64_t> index;

  int64_t size() const { return static_cast<int64_t>(answers.size()); }
  int64_t id_of(const std::string& answer) const;  // -1 when out of vocabulary

  static AnswerVocab from_answers(std::vector<std::string> ranked);
  static AnswerVocab build(const std::vector<std::string>& golds, int64_t k);

  // "topk=<K>" header, then one answer per line in rank order.
  void save(const std::string& path) const;
  static AnswerVocab load(const std::string& path);
};

// (1 + gamma) * attends_other + beta, where [gamma, beta] is the film map of
// attends_host split into halves. The modulation parameters come from one
// side and act on the other side, exactly as the fusion equations are
// written.
Tensor film_modulate(const Tensor& attends_host, const Tensor& attends_other,
                     const Linear& film_map);

// joint = (v_mod + l_mod) / 2, gated by sigmoid(gate(joint)).
Tensor fuse_gate(const Tensor& v_mod, const Tensor& l_mod, const Linear& gate);

// depth x LayerNorm(x + mamba(x)) refinement, then a sigmoid gate and a
// final LayerNorm. Treats its input rows as a sequence, length 1 in the
// fusion head.
class MambaStack {
 public:
  MambaStack() = default;
  MambaStack(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
             int64_t depth);

  Tensor operator()(const Tensor& x) const;
  // the stack state before the output gate, exposed for white-box tests
  Tensor refine(const Tensor& x) const;

  int64_t depth() const { return static_cast<int64_t>(layers_.size()); }

 private:
  std::vector<MambaSublayer> layers_;
  Linear out_gate_;  // bias-free
  LayerNormLayer ln_final_;
};

struct EmfConfig {
  int64_t d_model = 64;
  int64_t answers = 16;
  int64_t depth = 2;
  MambaCoreConfig core;  // d_model is forced to match this->d_model
  // Ablation: false replaces the CLS cross-attention with the identity on
  // the CLS vectors and registers no attention parameters.
  bool cross_attention = true;
  // Literal equation reading: keys/values are the other side's single CLS
  // token instead of its full token sequence.
  bool literal_cls_kv = false;
};

// Fusion head: CLS extraction, mirrored CLS cross-attention, cross-applied
// FiLM modulation, gated averaging, Mamba refinement, answer logits. All
// state rows are [1, D].
class Emf {
 public:
  Emf() = default;
  Emf(ParamStore& store, const std::string& name, const EmfConfig& cfg);

  struct State {
    Tensor v_cls, l_cls;
    Tensor v_att, l_att;
    Tensor v_mod, l_mod;
    Tensor joint, gated;
    Tensor fused;   // [1, D]
    Tensor logits;  // [1, K]
  };

  // visual_feats [P, D] (P >= 1), text_feats [T, D] with the cls row first.
  State forward(const Tensor& visual_feats, const Tensor& text_feats) const;

  // mean of the visual rows plus a learned bias
  Tensor visual_cls(const Tensor& visual_feats) const;

  const EmfConfig& config() const { return cfg_; }

 private:
  EmfConfig cfg_;
  Tensor v_cls_bias_;  // [D]
  CrossAttention v_attend_, l_attend_;
  Linear film_v_, film_l_;  // D -> 2D, zero-initialized, bias-free
  Linear joint_gate_;       // bias-free
  MambaStack stack_;
  Linear head_;
};

// Analytic count under the shared conventions (normalization and residual
// adds excluded). Linear in both sequence lengths.
int64_t flops_emf(int64_t t_v, int64_t t_l, const EmfConfig& cfg);

}  // namespace lcmf
