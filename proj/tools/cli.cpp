#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "lcmf/bench.hpp"
#include "lcmf/data.hpp"
#include "lcmf/model.hpp"
#include "lcmf/train.hpp"

namespace fs = std::filesystem;

namespace {

// Flags shared by the three training-side commands. Ablations and overrides
// are applied to the loaded config, so the config written next to the outputs
// is always the one that actually ran.
struct RunFlags {
  std::string config;
  std::string data;
  std::string out;
  uint64_t seed = 0;
  bool seed_set = false;
  int64_t epochs = 0;
  bool epochs_set = false;
  std::vector<std::string> ablate;
  std::string stable_mode;  // "", "on", "off"
  bool paper_literal = false;
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool seed_opt) {
  cmd->add_option("--config", f.config, "training config (INI)")->required();
  cmd->add_option("--data", f.data, "dataset manifest (JSONL)")->required();
  cmd->add_option("--out", f.out, "output directory")->required();
  if (seed_opt) {
    cmd->add_option("--seed", f.seed, "override the config's seed")
        ->each([&f](const std::string&) { f.seed_set = true; });
    cmd->add_option("--epochs", f.epochs, "override the config's epoch count")
        ->each([&f](const std::string&) { f.epochs_set = true; });
  }
  cmd->add_option("--ablate", f.ablate, "drop a module: cross_attention, cmm, sam")
      ->check(CLI::IsMember({"cross_attention", "cmm", "sam"}));
  cmd->add_option("--stable-mode", f.stable_mode, "log-space discretization on or off")
      ->check(CLI::IsMember({"on", "off"}));
  cmd->add_flag("--paper-literal", f.paper_literal,
                "visual summary token uses the literal projected-key form");
}

lcmf::TrainConfig resolve_config(const RunFlags& f) {
  lcmf::TrainConfig cfg = lcmf::load_train_config(f.config);
  if (f.seed_set) cfg.seed = f.seed;
  if (f.epochs_set) cfg.epochs = f.epochs;
  for (const std::string& a : f.ablate) {
    if (a == "cross_attention") cfg.model.no_cross_attention = true;
    if (a == "cmm") cfg.model.no_cmm = true;
    if (a == "sam") cfg.model.no_sam = true;
  }
  if (!f.stable_mode.empty()) cfg.model.core.stable_mode = f.stable_mode == "on";
  if (f.paper_literal) cfg.model.literal_cls_kv = true;
  return cfg;
}

lcmf::DatasetManifest load_data(const std::string& path) {
  return lcmf::DatasetManifest::load(path);
}

int cmd_gen_data(const lcmf::GenConfig& gen) {
  const lcmf::DatasetManifest manifest = lcmf::gen_synthetic_vqa(gen);
  std::ofstream ini(fs::path(gen.out_dir) / "gen.ini", std::ios::trunc);
  ini << "[gen]\n"
      << "n = " << gen.n << "\n"
      << "image_side = " << gen.image_side << "\n"
      << "seed = " << gen.seed << "\n"
      << "video_frames = " << gen.video_frames << "\n"
      << "split = " << gen.split << "\n";
  if (!ini.flush()) throw std::runtime_error("gen-data: cannot write gen.ini");
  std::cout << "wrote " << manifest.records.size() << " records under " << gen.out_dir << "\n";
  return 0;
}

int cmd_pretrain(const RunFlags& f) {
  const lcmf::TrainConfig cfg = resolve_config(f);
  const lcmf::PretrainResult res = lcmf::pretrain(cfg, load_data(f.data), f.out);
  if (res.aborted) {
    std::cerr << "pretrain: aborted after repeated non-finite steps\n";
    return 1;
  }
  std::cout << "pretrain: " << res.steps << " steps";
  if (res.skipped_steps > 0) std::cout << " (" << res.skipped_steps << " skipped)";
  std::cout << "\nimage loss " << res.first_epoch_image_loss << " -> " << res.final_epoch_image_loss
            << "\ntext loss " << res.first_epoch_text_loss << " -> " << res.final_epoch_text_loss
            << "\n";
  return 0;
}

int cmd_finetune(const RunFlags& f, const std::string& init_dir) {
  const lcmf::TrainConfig cfg = resolve_config(f);
  const lcmf::FinetuneResult res = lcmf::finetune(cfg, load_data(f.data), init_dir, f.out);
  if (res.aborted) {
    std::cerr << "finetune: aborted after repeated non-finite steps\n";
    return 1;
  }
  std::cout << "finetune: " << res.steps << " steps";
  if (res.oov_skipped > 0) std::cout << " (" << res.oov_skipped << " answers out of vocabulary)";
  std::cout << "\nloss " << res.first_epoch_loss << " -> " << res.final_epoch_loss << "\n";
  return 0;
}

int cmd_eval(const std::string& data_path, const std::string& run_dir, std::string out_dir) {
  if (out_dir.empty()) out_dir = run_dir;
  fs::create_directories(out_dir);
  const lcmf::DatasetManifest data = load_data(data_path);
  const lcmf::EvalReport rep =
      lcmf::evaluate(data, run_dir, (fs::path(out_dir) / "eval.json").string());
  // the audited copy of the config that produced these numbers
  lcmf::save_train_config((fs::path(out_dir) / "config.ini").string(),
                          lcmf::load_train_config((fs::path(run_dir) / "config.ini").string()));
  std::cout << "records " << rep.records << ", correct " << rep.correct << ", accuracy "
            << rep.accuracy << ", mean-type accuracy " << rep.maa << "\n";
  for (const auto& [type, total] : rep.type_total)
    std::cout << "  " << type << ": " << rep.type_correct.at(type) << "/" << total << "\n";
  std::cout << "parameters " << rep.param_count << "\nforward flops " << rep.forward_flops
            << " at text length " << rep.text_len << "\nmean latency " << rep.mean_latency_ms
            << " ms\n";
  return 0;
}

int cmd_bench(const std::vector<int64_t>& lengths, int64_t d_model, int64_t repeats,
              const std::string& out_dir) {
  const lcmf::BenchReport rep = lcmf::run_bench(lengths, d_model, repeats);
  fs::create_directories(out_dir);
  lcmf::write_bench_csv(rep, (fs::path(out_dir) / "bench.csv").string());
  std::ofstream ini(fs::path(out_dir) / "bench.ini", std::ios::trunc);
  ini << "[bench]\nlengths =";
  for (const lcmf::BenchPoint& p : rep.points) ini << ' ' << p.length;
  ini << "\nd_model = " << d_model << "\nrepeats = " << repeats << "\n";
  if (!ini.flush()) throw std::runtime_error("bench: cannot write bench.ini");
  std::cout << lcmf::bench_summary(rep);
  return 0;
}

int cmd_flops(const std::string& config_path, double mask_ratio, int64_t t_text,
              const std::string& out_dir) {
  const lcmf::TrainConfig cfg = lcmf::load_train_config(config_path);
  const double ratio = mask_ratio < 0.0 ? cfg.mask_ratio : mask_ratio;
  const int64_t t = t_text < 0 ? cfg.model.max_text_len : t_text;
  const std::vector<lcmf::FlopsRow> table = lcmf::flops_table(cfg.model, ratio, t);
  for (const lcmf::FlopsRow& row : table)
    std::cout << row.module << "," << row.flops << "\n";
  std::cout << "total," << lcmf::flops_total(table) << "\n";
  std::cout << "vqa_forward," << lcmf::flops_vqa_forward(cfg.model, t) << "\n";
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream csv(fs::path(out_dir) / "flops.csv", std::ios::trunc);
    csv << "module,flops\n";
    for (const lcmf::FlopsRow& row : table) csv << row.module << ',' << row.flops << '\n';
    csv << "total," << lcmf::flops_total(table) << '\n';
    if (!csv.flush()) throw std::runtime_error("flops: cannot write flops.csv");
    lcmf::save_train_config((fs::path(out_dir) / "config.ini").string(), cfg);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale cross-modal VQA pipeline"};
  app.require_subcommand(1);

  lcmf::GenConfig gen;
  CLI::App* c_gen = app.add_subcommand("gen-data", "render a synthetic VQA corpus");
  c_gen->add_option("--seed", gen.seed, "generator seed");
  c_gen->add_option("--n", gen.n, "number of records")->check(CLI::PositiveNumber);
  c_gen->add_option("--out", gen.out_dir, "output directory")->required();
  c_gen->add_option("--image-side", gen.image_side, "square image side in pixels");
  c_gen->add_option("--video-frames", gen.video_frames, "frames per record, 0 for stills");
  c_gen->add_option("--split", gen.split, "split tag written into the manifest");

  RunFlags pre_f;
  CLI::App* c_pre = app.add_subcommand("pretrain", "masked-reconstruction pretraining");
  add_run_flags(c_pre, pre_f, true);

  RunFlags fin_f;
  std::string init_dir;
  CLI::App* c_fin = app.add_subcommand("finetune", "answer-head training");
  add_run_flags(c_fin, fin_f, true);
  c_fin->add_option("--init", init_dir, "pretrain run directory to start from");

  std::string eval_data, eval_run, eval_out;
  CLI::App* c_eval = app.add_subcommand("eval", "score a trained run on a manifest");
  c_eval->add_option("--data", eval_data, "dataset manifest (JSONL)")->required();
  c_eval->add_option("--run", eval_run, "trained run directory")->required();
  c_eval->add_option("--out", eval_out, "where eval.json goes (default: the run directory)");

  std::vector<int64_t> lengths = {256, 512, 1024, 2048, 4096, 8192};
  int64_t bench_d = 128, repeats = 3;
  std::string bench_out = ".";
  CLI::App* c_bench = app.add_subcommand("bench", "recurrence vs attention scaling");
  c_bench->add_option("--lengths", lengths, "sequence lengths, strictly increasing");
  c_bench->add_option("--d-model", bench_d, "feature width");
  c_bench->add_option("--repeats", repeats, "timed passes per length");
  c_bench->add_option("--out", bench_out, "output directory");

  std::string flops_config, flops_out;
  double mask_ratio = -1.0;
  int64_t t_text = -1;
  CLI::App* c_flops = app.add_subcommand("flops", "per-module analytic cost table");
  c_flops->add_option("--config", flops_config, "training config (INI)")->required();
  c_flops->add_option("--mask-ratio", mask_ratio, "mask ratio (default: from config)");
  c_flops->add_option("--t-text", t_text, "text length (default: model max)");
  c_flops->add_option("--out", flops_out, "also write flops.csv here");

  try {
    app.parse(argc, argv);
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_pre) return cmd_pretrain(pre_f);
    if (*c_fin) return cmd_finetune(fin_f, init_dir);
    if (*c_eval) return cmd_eval(eval_data, eval_run, eval_out);
    if (*c_bench) return cmd_bench(lengths, bench_d, repeats, bench_out);
    if (*c_flops) return cmd_flops(flops_config, mask_ratio, t_text, flops_out);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
