#include "lcmf/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <utility>

#include "json.hpp"
#include "lcmf/rng.hpp"
#include "lcmf/weighter.hpp"

namespace fs = std::filesystem;

namespace lcmf {

namespace {

std::string trim(const std::string& s) {
  const size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void config_fail(const std::string& path, int line, const std::string& msg) {
  throw std::runtime_error("config: " + path + ":" + std::to_string(line) + ": " + msg);
}

int64_t parse_int(const std::string& path, int line, const std::string& v) {
  size_t used = 0;
  int64_t out = 0;
  try {
    out = std::stoll(v, &used);
  } catch (const std::exception&) {
    config_fail(path, line, "expected an integer, got '" + v + "'");
  }
  if (used != v.size()) config_fail(path, line, "trailing characters in integer '" + v + "'");
  return out;
}

uint64_t parse_u64(const std::string& path, int line, const std::string& v) {
  size_t used = 0;
  uint64_t out = 0;
  try {
    out = std::stoull(v, &used);
  } catch (const std::exception&) {
    config_fail(path, line, "expected an unsigned integer, got '" + v + "'");
  }
  if (used != v.size()) config_fail(path, line, "trailing characters in integer '" + v + "'");
  return out;
}

double parse_double(const std::string& path, int line, const std::string& v) {
  size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    config_fail(path, line, "expected a number, got '" + v + "'");
  }
  if (used != v.size()) config_fail(path, line, "trailing characters in number '" + v + "'");
  return out;
}

bool parse_bool(const std::string& path, int line, const std::string& v) {
  if (v == "true" || v == "on" || v == "1") return true;
  if (v == "false" || v == "off" || v == "0") return false;
  config_fail(path, line, "expected a boolean, got '" + v + "'");
}

std::string g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<int64_t> clipped_tokens(const std::string& text, const Vocab& vocab,
                                    int64_t max_len) {
  std::vector<int64_t> ids = tokenize(text, vocab);
  if (static_cast<int64_t>(ids.size()) > max_len) ids.resize(static_cast<size_t>(max_len));
  return ids;
}

void seeded_shuffle(std::vector<int64_t>& order, Rng& rng) {
  for (int64_t i = static_cast<int64_t>(order.size()) - 1; i > 0; --i) {
    const int64_t j = static_cast<int64_t>(rng.below(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
}

}  // namespace

void TrainConfig::validate() const {
  model.validate();
  if (!(lr >= 0.0) || !std::isfinite(lr))
    throw std::invalid_argument("train: lr must be finite and non-negative");
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("train: weight_decay must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be positive");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be non-negative");
  if (schedule != "1cycle" && schedule != "cosann")
    throw std::invalid_argument("train: unknown schedule '" + schedule + "'");
  if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
    throw std::invalid_argument("train: mask_ratio must lie in [0, 1)");
  if (!(mlm_prob >= 0.0 && mlm_prob <= 1.0))
    throw std::invalid_argument("train: mlm_prob must lie in [0, 1]");
  if (video_frames < 1) throw std::invalid_argument("train: video_frames must be positive");
  if (checkpoint_every < 0) throw std::invalid_argument("train: checkpoint_every must be >= 0");
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream in(path);
  if (!in.good()) throw std::runtime_error("config: cannot open " + path);
  TrainConfig cfg;
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    if (s.front() == '[') {
      if (s.back() != ']') config_fail(path, lineno, "unterminated section header");
      section = s.substr(1, s.size() - 2);
      if (section != "model" && section != "train")
        config_fail(path, lineno, "unknown section [" + section + "]");
      continue;
    }
    const size_t eq = s.find('=');
    if (eq == std::string::npos) config_fail(path, lineno, "expected key = value");
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (key.empty()) config_fail(path, lineno, "empty key");
    if (section == "model") {
      ModelConfig& m = cfg.model;
      if (key == "image_side") m.grid.image_side = parse_int(path, lineno, value);
      else if (key == "patch_size") m.grid.patch_size = parse_int(path, lineno, value);
      else if (key == "d_model") m.d_model = parse_int(path, lineno, value);
      else if (key == "heads") m.heads = parse_int(path, lineno, value);
      else if (key == "mlp_ratio") m.mlp_ratio = parse_int(path, lineno, value);
      else if (key == "encoder_blocks") m.encoder_blocks = parse_int(path, lineno, value);
      else if (key == "decoder_blocks") m.decoder_blocks = parse_int(path, lineno, value);
      else if (key == "text_blocks") m.text_blocks = parse_int(path, lineno, value);
      else if (key == "max_text_len") m.max_text_len = parse_int(path, lineno, value);
      else if (key == "interaction_layers") m.interaction_layers = parse_int(path, lineno, value);
      else if (key == "emf_depth") m.emf_depth = parse_int(path, lineno, value);
      else if (key == "vocab_size") m.vocab_size = parse_int(path, lineno, value);
      else if (key == "answers") m.answers = parse_int(path, lineno, value);
      else if (key == "d_inner") m.core.d_inner = parse_int(path, lineno, value);
      else if (key == "n_state") m.core.n_state = parse_int(path, lineno, value);
      else if (key == "conv_width") m.core.conv_width = parse_int(path, lineno, value);
      else if (key == "stable_mode") m.core.stable_mode = parse_bool(path, lineno, value);
      else if (key == "normalize_targets") m.normalize_targets = parse_bool(path, lineno, value);
      else if (key == "no_cmm") m.no_cmm = parse_bool(path, lineno, value);
      else if (key == "no_sam") m.no_sam = parse_bool(path, lineno, value);
      else if (key == "no_cross_attention")
        m.no_cross_attention = parse_bool(path, lineno, value);
      else if (key == "literal_cls_kv") m.literal_cls_kv = parse_bool(path, lineno, value);
      else config_fail(path, lineno, "unknown key '" + key + "' in [model]");
    } else if (section == "train") {
      if (key == "lr") cfg.lr = parse_double(path, lineno, value);
      else if (key == "weight_decay") cfg.weight_decay = parse_double(path, lineno, value);
      else if (key == "batch_size") cfg.batch_size = parse_int(path, lineno, value);
      else if (key == "epochs") cfg.epochs = parse_int(path, lineno, value);
      else if (key == "schedule") cfg.schedule = value;
      else if (key == "seed") cfg.seed = parse_u64(path, lineno, value);
      else if (key == "mask_ratio") cfg.mask_ratio = parse_double(path, lineno, value);
      else if (key == "mlm_prob") cfg.mlm_prob = parse_double(path, lineno, value);
      else if (key == "video_frames") cfg.video_frames = parse_int(path, lineno, value);
      else if (key == "checkpoint_every") cfg.checkpoint_every = parse_int(path, lineno, value);
      else config_fail(path, lineno, "unknown key '" + key + "' in [train]");
    } else {
      config_fail(path, lineno, "key '" + key + "' outside any section");
    }
  }
  cfg.validate();
  return cfg;
}

void save_train_config(const std::string& path, const TrainConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out.good()) throw std::runtime_error("config: cannot write " + path);
  const ModelConfig& m = cfg.model;
  out << "[model]\n";
  out << "image_side = " << m.grid.image_side << "\n";
  out << "patch_size = " << m.grid.patch_size << "\n";
  out << "d_model = " << m.d_model << "\n";
  out << "heads = " << m.heads << "\n";
  out << "mlp_ratio = " << m.mlp_ratio << "\n";
  out << "encoder_blocks = " << m.encoder_blocks << "\n";
  out << "decoder_blocks = " << m.decoder_blocks << "\n";
  out << "text_blocks = " << m.text_blocks << "\n";
  out << "max_text_len = " << m.max_text_len << "\n";
  out << "interaction_layers = " << m.interaction_layers << "\n";
  out << "emf_depth = " << m.emf_depth << "\n";
  out << "vocab_size = " << m.vocab_size << "\n";
  out << "answers = " << m.answers << "\n";
  out << "d_inner = " << m.core.d_inner << "\n";
  out << "n_state = " << m.core.n_state << "\n";
  out << "conv_width = " << m.core.conv_width << "\n";
  out << "stable_mode = " << (m.core.stable_mode ? "true" : "false") << "\n";
  out << "normalize_targets = " << (m.normalize_targets ? "true" : "false") << "\n";
  out << "no_cmm = " << (m.no_cmm ? "true" : "false") << "\n";
  out << "no_sam = " << (m.no_sam ? "true" : "false") << "\n";
  out << "no_cross_attention = " << (m.no_cross_attention ? "true" : "false") << "\n";
  out << "literal_cls_kv = " << (m.literal_cls_kv ? "true" : "false") << "\n";
  out << "\n[train]\n";
  out << "lr = " << g17(cfg.lr) << "\n";
  out << "weight_decay = " << g17(cfg.weight_decay) << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "epochs = " << cfg.epochs << "\n";
  out << "schedule = " << cfg.schedule << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "mask_ratio = " << g17(cfg.mask_ratio) << "\n";
  out << "mlm_prob = " << g17(cfg.mlm_prob) << "\n";
  out << "video_frames = " << cfg.video_frames << "\n";
  out << "checkpoint_every = " << cfg.checkpoint_every << "\n";
  if (!out.good()) throw std::runtime_error("config: write failed for " + path);
}

AdamW::AdamW(ParamStore& store, const AdamWConfig& cfg) : cfg_(cfg) {
  for (const auto& [name, info] : store.entries()) {
    params_.push_back(info.tensor);
    m_.emplace_back(static_cast<size_t>(info.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<size_t>(info.tensor.numel()), 0.0);
  }
}

void AdamW::step(double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t p = 0; p < params_.size(); ++p) {
    Tensor t = params_[p];
    if (!t.has_grad()) continue;
    double* x = t.data();
    const std::vector<double>& g = t.grad_data();
    std::vector<double>& m = m_[p];
    std::vector<double>& v = v_[p];
    for (int64_t i = 0; i < t.numel(); ++i) {
      const size_t u = static_cast<size_t>(i);
      m[u] = cfg_.beta1 * m[u] + (1.0 - cfg_.beta1) * g[u];
      v[u] = cfg_.beta2 * v[u] + (1.0 - cfg_.beta2) * g[u] * g[u];
      const double update = (m[u] / bc1) / (std::sqrt(v[u] / bc2) + cfg_.eps);
      x[i] -= lr * (update + cfg_.weight_decay * x[i]);
    }
  }
}

double one_cycle_lr(int64_t step, int64_t total_steps, double base_lr) {
  if (total_steps < 1) throw std::invalid_argument("schedule: total_steps must be positive");
  if (step < 0 || step >= total_steps) throw std::invalid_argument("schedule: step out of range");
  const int64_t warm = std::max<int64_t>(1, total_steps / 10);
  if (step < warm)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warm);
  const double floor = 0.01 * base_lr;
  if (total_steps == warm) return base_lr;
  const double t = static_cast<double>(step - warm) / static_cast<double>(total_steps - warm);
  return floor + 0.5 * (base_lr - floor) * (1.0 + std::cos(M_PI * t));
}

double cosine_lr(int64_t step, int64_t total_steps, double base_lr) {
  if (total_steps < 1) throw std::invalid_argument("schedule: total_steps must be positive");
  if (step < 0 || step >= total_steps) throw std::invalid_argument("schedule: step out of range");
  if (total_steps == 1) return base_lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return 0.5 * base_lr * (1.0 + std::cos(M_PI * t));
}

double schedule_lr(const std::string& tag, int64_t step, int64_t total_steps, double base_lr) {
  if (tag == "1cycle") return one_cycle_lr(step, total_steps, base_lr);
  if (tag == "cosann") return cosine_lr(step, total_steps, base_lr);
  throw std::invalid_argument("schedule: unknown tag '" + tag + "'");
}

PretrainResult pretrain(const TrainConfig& cfg_in, const DatasetManifest& data,
                        const std::string& out_dir) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (data.records.empty()) throw std::invalid_argument("pretrain: empty manifest");
  fs::create_directories(out_dir);

  std::vector<std::string> texts;
  texts.reserve(2 * data.records.size());
  for (const VqaRecord& r : data.records) {
    texts.push_back(r.caption);
    texts.push_back(r.question);
  }
  const Vocab vocab = Vocab::build(texts);
  vocab.save((fs::path(out_dir) / "words.txt").string());
  cfg.model.vocab_size = vocab.size();
  save_train_config((fs::path(out_dir) / "config.ini").string(), cfg);

  ParamStore store(cfg.seed);
  LcmfModel model(store, cfg.model, /*with_fusion=*/false);
  AdamW opt(store, {0.9, 0.999, 1e-8, cfg.weight_decay});
  LossWeighter weighter(2, {});

  const int64_t n = static_cast<int64_t>(data.records.size());
  const int64_t patch_count = cfg.model.grid.patch_count();
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = cfg.epochs * steps_per_epoch;

  std::vector<std::vector<int64_t>> tokens;
  tokens.reserve(static_cast<size_t>(n));
  for (const VqaRecord& r : data.records)
    tokens.push_back(clipped_tokens(r.caption, vocab, cfg.model.max_text_len));

  std::ofstream csv((fs::path(out_dir) / "metrics.csv").string(), std::ios::trunc);
  csv << "epoch,step,loss_img,loss_txt,w_img,w_txt,ema_img,ema_txt,lr\n";

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(seed_hash(cfg.seed, 0x51u));

  PretrainResult res;
  int64_t consecutive_bad = 0;
  int64_t gstep = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs && !res.aborted; ++epoch) {
    seeded_shuffle(order, shuffle_rng);
    double epoch_img = 0.0, epoch_txt = 0.0;
    for (int64_t b0 = 0; b0 < n && !res.aborted; b0 += cfg.batch_size, ++gstep) {
      const int64_t bsz = std::min(cfg.batch_size, n - b0);
      const double lr = schedule_lr(cfg.schedule, gstep, total_steps, cfg.lr);
      const std::vector<double> w = weighter.weights();
      store.zero_all_grads();
      double img_sum = 0.0, txt_sum = 0.0;
      for (int64_t k = 0; k < bsz; ++k) {
        const int64_t idx = order[static_cast<size_t>(b0 + k)];
        const VqaRecord& rec = data.records[static_cast<size_t>(idx)];
        // clips contribute their center frame as the pretraining still
        const Tensor image =
            rec.video ? load_record_frames(data, rec, 1)[0] : load_record_image(data, rec);
        const MaskPlan plan =
            sample_mask(patch_count, cfg.mask_ratio, seed_hash(cfg.seed, 0xA1u, gstep, k));
        const auto [corrupted, mlm] =
            mlm_corrupt(tokens[static_cast<size_t>(idx)], vocab, cfg.mlm_prob, MlmSplit{},
                        seed_hash(cfg.seed, 0xB2u, gstep, k));
        Tape tape;
        const LcmfModel::PretrainOut out = model.pretrain_forward(image, plan, corrupted, mlm);
        img_sum += out.image_loss.value();
        txt_sum += out.text_loss.value();
        const Tensor combined =
            add(scale(out.image_loss, w[0] / static_cast<double>(bsz)),
                scale(out.text_loss, w[1] / static_cast<double>(bsz)));
        tape.backward(combined);
      }
      const double img_mean = img_sum / static_cast<double>(bsz);
      const double txt_mean = txt_sum / static_cast<double>(bsz);
      const LossWeighter::Step wstep = weighter.step({img_mean, txt_mean});
      if (wstep.skipped) {
        ++res.skipped_steps;
        ++consecutive_bad;
        std::fprintf(stderr, "pretrain: non-finite loss at step %lld, skipped\n",
                     static_cast<long long>(gstep));
        if (consecutive_bad >= 3) {
          res.aborted = true;
          std::fprintf(stderr, "pretrain: aborting after 3 consecutive bad steps\n");
        }
      } else {
        consecutive_bad = 0;
        opt.step(lr);
      }
      csv << epoch << ',' << gstep << ',' << g17(img_mean) << ',' << g17(txt_mean) << ','
          << g17(w[0]) << ',' << g17(w[1]) << ',' << g17(wstep.emas[0]) << ','
          << g17(wstep.emas[1]) << ',' << g17(lr) << "\n";
      epoch_img += img_sum;
      epoch_txt += txt_sum;
    }
    if (epoch == 0) {
      res.first_epoch_image_loss = epoch_img / static_cast<double>(n);
      res.first_epoch_text_loss = epoch_txt / static_cast<double>(n);
    }
    res.final_epoch_image_loss = epoch_img / static_cast<double>(n);
    res.final_epoch_text_loss = epoch_txt / static_cast<double>(n);
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04lld.bin", static_cast<long long>(epoch + 1));
      save_checkpoint((fs::path(out_dir) / name).string(), store);
    }
    if (epoch == 0 || (epoch + 1) % std::max<int64_t>(1, cfg.epochs / 10) == 0)
      std::fprintf(stderr, "pretrain epoch %lld/%lld image %.4f text %.4f\n",
                   static_cast<long long>(epoch + 1), static_cast<long long>(cfg.epochs),
                   epoch_img / static_cast<double>(n), epoch_txt / static_cast<double>(n));
  }
  res.steps = gstep;
  save_checkpoint((fs::path(out_dir) / "model.bin").string(), store);
  return res;
}

FinetuneResult finetune(const TrainConfig& cfg_in, const DatasetManifest& data,
                        const std::string& init_dir, const std::string& out_dir) {
  TrainConfig cfg = cfg_in;
  cfg.validate();
  if (data.records.empty()) throw std::invalid_argument("finetune: empty manifest");
  fs::create_directories(out_dir);

  Vocab vocab;
  if (init_dir.empty()) {
    std::vector<std::string> texts;
    for (const VqaRecord& r : data.records) {
      texts.push_back(r.caption);
      texts.push_back(r.question);
    }
    vocab = Vocab::build(texts);
  } else {
    vocab = Vocab::load((fs::path(init_dir) / "words.txt").string());
  }
  vocab.save((fs::path(out_dir) / "words.txt").string());
  cfg.model.vocab_size = vocab.size();

  std::vector<std::string> golds;
  golds.reserve(data.records.size());
  for (const VqaRecord& r : data.records) golds.push_back(r.answer);
  const AnswerVocab answers = AnswerVocab::build(golds, cfg.model.answers);
  answers.save((fs::path(out_dir) / "answers.txt").string());
  cfg.model.answers = answers.size();
  save_train_config((fs::path(out_dir) / "config.ini").string(), cfg);

  ParamStore store(cfg.seed);
  LcmfModel model(store, cfg.model, /*with_fusion=*/true);
  if (!init_dir.empty())
    apply_checkpoint(store, load_checkpoint_file((fs::path(init_dir) / "model.bin").string()));
  AdamW opt(store, {0.9, 0.999, 1e-8, cfg.weight_decay});

  const int64_t n = static_cast<int64_t>(data.records.size());
  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = cfg.epochs * steps_per_epoch;

  std::vector<std::vector<int64_t>> tokens;
  std::vector<int64_t> gold_ids;
  for (const VqaRecord& r : data.records) {
    tokens.push_back(clipped_tokens(r.question, vocab, cfg.model.max_text_len));
    gold_ids.push_back(answers.id_of(r.answer));
  }

  std::ofstream csv((fs::path(out_dir) / "finetune.csv").string(), std::ios::trunc);
  csv << "epoch,step,loss,lr\n";

  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(seed_hash(cfg.seed, 0x52u));

  FinetuneResult res;
  int64_t consecutive_bad = 0;
  int64_t gstep = 0;
  for (int64_t epoch = 0; epoch < cfg.epochs && !res.aborted; ++epoch) {
    seeded_shuffle(order, shuffle_rng);
    double epoch_loss = 0.0;
    int64_t epoch_used = 0;
    for (int64_t b0 = 0; b0 < n && !res.aborted; b0 += cfg.batch_size, ++gstep) {
      const int64_t bsz = std::min(cfg.batch_size, n - b0);
      const double lr = schedule_lr(cfg.schedule, gstep, total_steps, cfg.lr);
      int64_t usable = 0;
      for (int64_t k = 0; k < bsz; ++k)
        if (gold_ids[static_cast<size_t>(order[static_cast<size_t>(b0 + k)])] >= 0) ++usable;
      store.zero_all_grads();
      double loss_sum = 0.0;
      for (int64_t k = 0; k < bsz; ++k) {
        const int64_t idx = order[static_cast<size_t>(b0 + k)];
        const VqaRecord& rec = data.records[static_cast<size_t>(idx)];
        const int64_t gold = gold_ids[static_cast<size_t>(idx)];
        if (gold < 0) {
          ++res.oov_skipped;
          continue;
        }
        Tape tape;
        const Emf::State state =
            rec.video
                ? model.vqa_forward_video(load_record_frames(data, rec, cfg.video_frames),
                                          tokens[static_cast<size_t>(idx)])
                : model.vqa_forward(load_record_image(data, rec),
                                    tokens[static_cast<size_t>(idx)]);
        const Tensor ce = cross_entropy_mean(state.logits, {gold}, {0});
        loss_sum += ce.value();
        tape.backward(scale(ce, 1.0 / static_cast<double>(usable)));
      }
      const double step_loss = usable > 0 ? loss_sum / static_cast<double>(usable) : 0.0;
      if (usable > 0 && !std::isfinite(step_loss)) {
        ++res.skipped_steps;
        ++consecutive_bad;
        std::fprintf(stderr, "finetune: non-finite loss at step %lld, skipped\n",
                     static_cast<long long>(gstep));
        if (consecutive_bad >= 3) {
          res.aborted = true;
          std::fprintf(stderr, "finetune: aborting after 3 consecutive bad steps\n");
        }
      } else if (usable > 0) {
        consecutive_bad = 0;
        opt.step(lr);
      }
      csv << epoch << ',' << gstep << ',' << g17(step_loss) << ',' << g17(lr) << "\n";
      epoch_loss += loss_sum;
      epoch_used += usable;
    }
    const double mean = epoch_used > 0 ? epoch_loss / static_cast<double>(epoch_used) : 0.0;
    if (epoch == 0) res.first_epoch_loss = mean;
    res.final_epoch_loss = mean;
    if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
      char name[48];
      std::snprintf(name, sizeof(name), "ckpt_epoch_%04lld.bin", static_cast<long long>(epoch + 1));
      save_checkpoint((fs::path(out_dir) / name).string(), store);
    }
    if (epoch == 0 || (epoch + 1) % std::max<int64_t>(1, cfg.epochs / 10) == 0)
      std::fprintf(stderr, "finetune epoch %lld/%lld loss %.4f\n",
                   static_cast<long long>(epoch + 1), static_cast<long long>(cfg.epochs), mean);
  }
  res.steps = gstep;
  save_checkpoint((fs::path(out_dir) / "model.bin").string(), store);
  return res;
}

EvalReport evaluate(const DatasetManifest& data, const std::string& run_dir,
                    const std::string& out_json) {
  if (data.records.empty()) throw std::invalid_argument("evaluate: empty manifest");
  const TrainConfig cfg = load_train_config((fs::path(run_dir) / "config.ini").string());
  const Vocab vocab = Vocab::load((fs::path(run_dir) / "words.txt").string());
  const AnswerVocab answers = AnswerVocab::load((fs::path(run_dir) / "answers.txt").string());
  if (cfg.model.vocab_size != vocab.size() || cfg.model.answers != answers.size())
    throw std::runtime_error("evaluate: vocab files disagree with the run's config");

  ParamStore store(cfg.seed);
  LcmfModel model(store, cfg.model, /*with_fusion=*/true);
  apply_checkpoint(store, load_checkpoint_file((fs::path(run_dir) / "model.bin").string()));

  EvalReport rep;
  rep.records = static_cast<int64_t>(data.records.size());
  rep.param_count = store.total_params();
  rep.text_len = 2;
  double total_ms = 0.0;
  for (const VqaRecord& rec : data.records) {
    const std::vector<int64_t> ids = clipped_tokens(rec.question, vocab, cfg.model.max_text_len);
    rep.text_len = std::max(rep.text_len, static_cast<int64_t>(ids.size()));
    std::vector<Tensor> frames;
    Tensor image;
    if (rec.video)
      frames = load_record_frames(data, rec, cfg.video_frames);
    else
      image = load_record_image(data, rec);
    const auto t0 = std::chrono::steady_clock::now();
    const Emf::State state =
        rec.video ? model.vqa_forward_video(frames, ids) : model.vqa_forward(image, ids);
    const auto t1 = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();

    const int64_t pred = argmax_row(state.logits);
    const int64_t gold = answers.id_of(rec.answer);
    if (gold < 0) ++rep.oov_golds;
    const bool ok = gold >= 0 && pred == gold;
    rep.type_total[rec.question_type] += 1;
    if (ok) {
      rep.type_correct[rec.question_type] += 1;
      ++rep.correct;
    }
  }
  rep.accuracy = static_cast<double>(rep.correct) / static_cast<double>(rep.records);
  double type_sum = 0.0;
  for (const auto& [type, total] : rep.type_total) {
    const int64_t good = rep.type_correct.count(type) ? rep.type_correct.at(type) : 0;
    rep.type_correct[type] = good;
    rep.type_accuracy[type] = static_cast<double>(good) / static_cast<double>(total);
    type_sum += rep.type_accuracy[type];
  }
  rep.maa = type_sum / static_cast<double>(rep.type_total.size());
  rep.forward_flops = flops_vqa_forward(cfg.model, rep.text_len);
  rep.mean_latency_ms = total_ms / static_cast<double>(rep.records);

  if (!out_json.empty()) {
    nlohmann::ordered_json j;
    j["records"] = rep.records;
    j["correct"] = rep.correct;
    j["accuracy"] = rep.accuracy;
    nlohmann::ordered_json types;
    for (const auto& [type, total] : rep.type_total) {
      types[type] = {{"total", total},
                     {"correct", rep.type_correct.at(type)},
                     {"accuracy", rep.type_accuracy.at(type)}};
    }
    j["per_type"] = types;
    j["maa"] = rep.maa;
    j["oov_golds"] = rep.oov_golds;
    j["param_count"] = rep.param_count;
    j["forward_flops"] = rep.forward_flops;
    j["text_len"] = rep.text_len;
    j["mean_latency_ms"] = rep.mean_latency_ms;
    std::ofstream out(out_json, std::ios::trunc);
    if (!out.good()) throw std::runtime_error("evaluate: cannot write " + out_json);
    out << j.dump(2) << "\n";
  }
  return rep;
}

}  // namespace lcmf
