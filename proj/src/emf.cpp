#include "lcmf/emf.hpp"

#include <algorithm>
#include <fstream>
#include <map>

namespace lcmf {

int64_t AnswerVocab::id_of(const std::string& answer) const {
  auto it = index.find(answer);
  return it == index.end() ? -1 : it->second;
}

AnswerVocab AnswerVocab::from_answers(std::vector<std::string> ranked) {
  AnswerVocab v;
  v.answers = std::move(ranked);
  for (size_t i = 0; i < v.answers.size(); ++i) {
    if (v.answers[i].empty()) detail::fail("answer vocab: empty answer");
    if (!v.index.emplace(v.answers[i], static_cast<int64_t>(i)).second)
      detail::fail("answer vocab: duplicate answer '" + v.answers[i] + "'");
  }
  return v;
}

AnswerVocab AnswerVocab::build(const std::vector<std::string>& golds, int64_t k) {
  if (k < 1) detail::fail("answer vocab: k must be positive");
  std::map<std::string, int64_t> counts;
  for (const std::string& g : golds) {
    if (g.empty()) detail::fail("answer vocab: empty answer");
    ++counts[g];
  }
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (static_cast<int64_t>(ranked.size()) > k) ranked.resize(static_cast<size_t>(k));
  std::vector<std::string> answers;
  answers.reserve(ranked.size());
  for (auto& [answer, count] : ranked) answers.push_back(std::move(answer));
  return from_answers(std::move(answers));
}

void AnswerVocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) detail::fail("answer vocab: cannot write " + path);
  out << "topk=" << size() << '\n';
  for (const std::string& a : answers) out << a << '\n';
  if (!out) detail::fail("answer vocab: write failed for " + path);
}

AnswerVocab AnswerVocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) detail::fail("answer vocab: cannot read " + path);
  std::string header;
  if (!std::getline(in, header) || header.rfind("topk=", 0) != 0)
    detail::fail("answer vocab: missing topk= header in " + path);
  int64_t k = 0;
  try {
    k = std::stoll(header.substr(5));
  } catch (const std::exception&) {
    detail::fail("answer vocab: bad header '" + header + "' in " + path);
  }
  std::vector<std::string> answers;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    answers.push_back(line);
  }
  if (static_cast<int64_t>(answers.size()) != k)
    detail::fail("answer vocab: header says " + std::to_string(k) + " answers, file has " +
                 std::to_string(answers.size()));
  return from_answers(std::move(answers));
}

Tensor film_modulate(const Tensor& attends_host, const Tensor& attends_other,
                     const Linear& film_map) {
  const int64_t d = attends_other.dim(1);
  if (film_map.out_dim() != 2 * d)
    detail::fail("film: map output " + std::to_string(film_map.out_dim()) +
                 " does not split into two halves of " + std::to_string(d));
  const Tensor gb = film_map(attends_host);
  const Tensor gamma = slice_cols(gb, 0, d);
  const Tensor beta = slice_cols(gb, d, 2 * d);
  return film(attends_other, gamma, beta);
}

Tensor fuse_gate(const Tensor& v_mod, const Tensor& l_mod, const Linear& gate) {
  const Tensor joint = scale(add(v_mod, l_mod), 0.5);
  return mul(joint, sigmoid(gate(joint)));
}

MambaStack::MambaStack(ParamStore& store, const std::string& name, const MambaCoreConfig& cfg,
                       int64_t depth) {
  if (depth < 1) detail::fail("mamba stack: depth must be positive");
  layers_.reserve(static_cast<size_t>(depth));
  for (int64_t i = 1; i <= depth; ++i)
    layers_.emplace_back(store, name + ".layer" + std::to_string(i), cfg);
  out_gate_ = Linear(store, name + ".out_gate", cfg.d_model, cfg.d_model, /*bias=*/false);
  ln_final_ = LayerNormLayer(store, name + ".ln_final", cfg.d_model);
}

Tensor MambaStack::refine(const Tensor& x) const {
  Tensor cur = x;
  for (const MambaSublayer& layer : layers_) cur = layer(cur);
  return cur;
}

Tensor MambaStack::operator()(const Tensor& x) const {
  const Tensor refined = refine(x);
  return ln_final_(mul(refined, sigmoid(out_gate_(refined))));
}

Emf::Emf(ParamStore& store, const std::string& name, const EmfConfig& cfg) : cfg_(cfg) {
  if (cfg_.d_model < 1 || cfg_.answers < 1 || cfg_.depth < 1)
    detail::fail("fusion head: all dimensions must be positive");
  cfg_.core.d_model = cfg_.d_model;
  const int64_t d = cfg_.d_model;
  v_cls_bias_ = store.uniform_fan_in(name + ".v_cls_bias", {d}, d);
  if (cfg_.cross_attention) {
    v_attend_ = CrossAttention(store, name + ".v_attend", d);
    l_attend_ = CrossAttention(store, name + ".l_attend", d);
  }
  film_v_ = Linear::zero_init(store, name + ".film_v", d, 2 * d, /*bias=*/false);
  film_l_ = Linear::zero_init(store, name + ".film_l", d, 2 * d, /*bias=*/false);
  joint_gate_ = Linear(store, name + ".joint_gate", d, d, /*bias=*/false);
  stack_ = MambaStack(store, name + ".stack", cfg_.core, cfg_.depth);
  head_ = Linear(store, name + ".head", d, cfg_.answers);
}

Tensor Emf::visual_cls(const Tensor& visual_feats) const {
  if (visual_feats.rank() != 2 || visual_feats.dim(0) < 1)
    detail::fail("fusion head: visual features must be a non-empty [P, D] matrix");
  const Tensor pooled = reshape(mean_rows(visual_feats), {1, cfg_.d_model});
  return add_rowvec(pooled, v_cls_bias_);
}

Emf::State Emf::forward(const Tensor& visual_feats, const Tensor& text_feats) const {
  if (text_feats.rank() != 2 || text_feats.dim(0) < 1)
    detail::fail("fusion head: text features must be a non-empty [T, D] matrix");
  if (visual_feats.dim(1) != cfg_.d_model || text_feats.dim(1) != cfg_.d_model)
    detail::fail("fusion head: feature width does not match d_model");

  State s;
  s.v_cls = visual_cls(visual_feats);
  s.l_cls = slice_rows(text_feats, 0, 1);
  if (cfg_.cross_attention) {
    s.v_att = v_attend_(s.v_cls, cfg_.literal_cls_kv ? s.l_cls : text_feats);
    s.l_att = l_attend_(s.l_cls, cfg_.literal_cls_kv ? s.v_cls : visual_feats);
  } else {
    s.v_att = s.v_cls;
    s.l_att = s.l_cls;
  }
  s.v_mod = film_modulate(s.v_att, s.l_att, film_v_);
  s.l_mod = film_modulate(s.l_att, s.v_att, film_l_);
  s.joint = scale(add(s.v_mod, s.l_mod), 0.5);
  s.gated = mul(s.joint, sigmoid(joint_gate_(s.joint)));
  s.fused = stack_(s.gated);
  s.logits = head_(s.fused);
  return s;
}

int64_t flops_emf(int64_t t_v, int64_t t_l, const EmfConfig& cfg) {
  const int64_t d = cfg.d_model;
  int64_t total = t_v * d;  // visual mean pool (adds; the divide is per output element)
  total += d;               // cls bias add
  if (cfg.cross_attention) {
    const int64_t kv_v = cfg.literal_cls_kv ? 1 : t_l;
    const int64_t kv_l = cfg.literal_cls_kv ? 1 : t_v;
    total += flops_cross_attention(1, kv_v, d) + flops_cross_attention(1, kv_l, d);
  }
  // film maps and their (1 + gamma) * x + beta application, both sides
  total += 2 * (2 * d * (2 * d)) + 2 * (3 * d);
  total += 2 * d;                  // joint average
  total += 2 * d * d + 4 * d + d;  // joint gate: map, sigmoid, mask
  MambaCoreConfig core = cfg.core;
  core.d_model = d;
  total += cfg.depth * flops_mamba_core(1, core);
  total += 2 * d * d + 4 * d + d;  // output gate
  total += 2 * d * cfg.answers + cfg.answers;
  return total;
}

}  // namespace lcmf
