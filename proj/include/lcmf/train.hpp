#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lcmf/data.hpp"
#include "lcmf/model.hpp"
#include "lcmf/nn.hpp"

namespace lcmf {

// Run settings around a ModelConfig. Serialized as "[section]" INI text with
// "key = value" lines; unknown sections or keys are load errors, so a typo
// cannot silently fall back to a default.
struct TrainConfig {
  ModelConfig model;
  double lr = 1e-3;
  double weight_decay = 0.01;
  int64_t batch_size = 8;
  int64_t epochs = 30;
  std::string schedule = "1cycle";  // or "cosann"
  uint64_t seed = 1;
  double mask_ratio = 0.75;
  double mlm_prob = 0.15;
  int64_t video_frames = 50;
  int64_t checkpoint_every = 0;  // epochs between snapshots; 0 keeps only the final

  void validate() const;
};

TrainConfig load_train_config(const std::string& path);
// Writes every key, so a saved file reloads to an identical config and a run
// directory always records its resolved settings.
void save_train_config(const std::string& path, const TrainConfig& cfg);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adaptive moments with decoupled weight decay: the decay term is scaled by
// the learning rate but bypasses the moment estimates, so lr = 0 leaves every
// parameter bitwise untouched. Parameters that never entered a backward pass
// have no gradient buffer and are skipped entirely.
class AdamW {
 public:
  AdamW(ParamStore& store, const AdamWConfig& cfg);
  void step(double lr);
  int64_t steps() const { return t_; }

 private:
  AdamWConfig cfg_;
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

// Linear warmup over the first tenth of the run, then cosine decay down to
// one percent of the base rate.
double one_cycle_lr(int64_t step, int64_t total_steps, double base_lr);
// Plain cosine annealing from the base rate to zero over the whole run.
double cosine_lr(int64_t step, int64_t total_steps, double base_lr);
double schedule_lr(const std::string& tag, int64_t step, int64_t total_steps, double base_lr);

struct PretrainResult {
  int64_t steps = 0;
  int64_t skipped_steps = 0;
  bool aborted = false;  // three consecutive non-finite steps
  double first_epoch_image_loss = 0.0;
  double first_epoch_text_loss = 0.0;
  double final_epoch_image_loss = 0.0;
  double final_epoch_text_loss = 0.0;
};

// Masked-patch reconstruction + masked-word prediction, combined by the
// adaptive loss weighter. Builds the closed word list from every caption and
// question in the corpus. Writes words.txt, config.ini (resolved), metrics.csv
// with header epoch,step,loss_img,loss_txt,w_img,w_txt,ema_img,ema_txt,lr,
// and model.bin into out_dir. Equal (config, seed) reruns produce
// byte-identical files.
PretrainResult pretrain(const TrainConfig& cfg, const DatasetManifest& data,
                        const std::string& out_dir);

struct FinetuneResult {
  int64_t steps = 0;
  int64_t skipped_steps = 0;
  bool aborted = false;
  int64_t oov_skipped = 0;  // training visits whose gold answer is out of vocabulary
  double first_epoch_loss = 0.0;
  double final_epoch_loss = 0.0;
};

// Answer classification on top of a prior run directory (model.bin +
// words.txt). init_dir may be empty to train from scratch, in which case the
// word list is built from this corpus. The answer vocabulary is built from
// the training golds. Writes words.txt, answers.txt, config.ini,
// finetune.csv with header epoch,step,loss,lr, and model.bin into out_dir.
FinetuneResult finetune(const TrainConfig& cfg, const DatasetManifest& data,
                        const std::string& init_dir, const std::string& out_dir);

struct EvalReport {
  int64_t records = 0;
  int64_t correct = 0;
  double accuracy = 0.0;
  std::map<std::string, int64_t> type_total;
  std::map<std::string, int64_t> type_correct;
  std::map<std::string, double> type_accuracy;
  double maa = 0.0;  // arithmetic mean of the per-type accuracies present
  int64_t oov_golds = 0;
  int64_t param_count = 0;
  int64_t forward_flops = 0;  // answering pipeline at the longest evaluated text
  int64_t text_len = 0;
  double mean_latency_ms = 0.0;  // the only non-deterministic field
};

// Exact-match evaluation of a finetuned run directory against a manifest.
// Out-of-vocabulary golds count as wrong. out_json may be empty to skip the
// report file.
EvalReport evaluate(const DatasetManifest& data, const std::string& run_dir,
                    const std::string& out_json);

}  // namespace lcmf
