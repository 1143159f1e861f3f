#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lcmf/emf.hpp"
#include "lcmf/tensor.hpp"

namespace lcmf {

struct VqaRecord {
  std::string image;  // still: PPM path; video: frame directory. Relative to the manifest.
  std::string caption;
  std::string question;
  std::string answer;
  std::string question_type;  // yesno | number | other
  bool video = false;
};

// JSON-lines on disk, one record per line. Paths inside records are relative
// to the manifest's directory so a corpus can be moved as a unit.
struct DatasetManifest {
  std::vector<VqaRecord> records;
  std::string split = "train";
  std::string dir;  // set by load(); joined onto record paths

  std::string resolve(const std::string& rel_path) const;

  void save(const std::string& path) const;
  // check_files verifies every referenced image or frame directory exists
  static DatasetManifest load(const std::string& path, bool check_files = true);
};

// Prefix rules on the first words: is/are/does/do/was/were/can/could/has/have
// -> yesno; "how many" or "how much" -> number; anything else -> other.
std::string classify_question(const std::string& question);

// k equal spans over [0, video_len), center frame of each. Shorter videos
// repeat indices; the result always has exactly k non-decreasing entries.
std::vector<int64_t> stratified_frames(int64_t video_len, int64_t k);

// Top-k answers by frequency, ties lexicographic. coverage (optional out)
// is the fraction of occurrences the kept answers account for. k beyond the
// distinct count keeps everything and warns.
AnswerVocab topk_vocab(const std::vector<std::string>& answers, int64_t k,
                       double* coverage = nullptr);

// Binary PPM (P6, maxval 255). Tensors are [H, W, 3] with values in [0, 1];
// writing quantizes to bytes, so a round trip is exact only on the 256-level
// lattice.
void write_ppm(const std::string& path, const Tensor& image);
Tensor read_ppm(const std::string& path);

struct GenConfig {
  int64_t n = 64;
  int64_t image_side = 32;
  uint64_t seed = 1;
  int64_t video_frames = 0;  // 0 renders stills; > 0 renders frame directories
  std::string split = "train";
  std::string out_dir = ".";
};

// Renders scenes of 1..3 colored shapes (circle/square/triangle x 6 colors),
// emits templated captions and one question per record cycling through the
// three question types, and writes images plus manifest.jsonl under out_dir.
// Byte-identical output for equal configs.
DatasetManifest gen_synthetic_vqa(const GenConfig& cfg);

Tensor load_record_image(const DatasetManifest& manifest, const VqaRecord& record);
// Stratified k-frame sample of a video record, each frame as [H, W, 3].
std::vector<Tensor> load_record_frames(const DatasetManifest& manifest, const VqaRecord& record,
                                       int64_t k);

}  // namespace lcmf
