#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "lcmf/data.hpp"
#include "oracles.hpp"

using oracles::random_tensor;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::path("tmp_test") / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("question classification prefix rules") {
  CHECK(lcmf::classify_question("is there a dog") == "yesno");
  CHECK(lcmf::classify_question("Are the squares blue?") == "yesno");
  CHECK(lcmf::classify_question("does it move") == "yesno");
  CHECK(lcmf::classify_question("how many squares are there") == "number");
  CHECK(lcmf::classify_question("How much water") == "number");
  CHECK(lcmf::classify_question("what color is the circle") == "other");
  CHECK(lcmf::classify_question("canary yellow circle") == "other");  // word boundary, not prefix
  CHECK(lcmf::classify_question("however you like") == "other");
  CHECK(lcmf::classify_question("") == "other");
}

TEST_CASE("stratified frame sampling") {
  const std::vector<int64_t> centers = lcmf::stratified_frames(100, 50);
  REQUIRE(centers.size() == 50);
  for (int64_t i = 0; i < 50; ++i) CHECK(centers[static_cast<size_t>(i)] == 2 * i + 1);

  const std::vector<int64_t> ident = lcmf::stratified_frames(50, 50);
  for (int64_t i = 0; i < 50; ++i) CHECK(ident[static_cast<size_t>(i)] == i);

  const std::vector<int64_t> ones = lcmf::stratified_frames(1, 50);
  REQUIRE(ones.size() == 50);
  for (int64_t i : ones) CHECK(i == 0);

  CHECK(lcmf::stratified_frames(7, 3) == std::vector<int64_t>{1, 3, 5});

  // non-decreasing and in range for assorted lengths
  for (int64_t len : {2, 3, 13, 49, 51, 500}) {
    const std::vector<int64_t> idx = lcmf::stratified_frames(len, 50);
    REQUIRE(idx.size() == 50);
    for (size_t i = 0; i < idx.size(); ++i) {
      CHECK(idx[i] >= 0);
      CHECK(idx[i] < len);
      if (i > 0) CHECK(idx[i] >= idx[i - 1]);
    }
  }

  CHECK_THROWS(lcmf::stratified_frames(0, 50));
  CHECK_THROWS(lcmf::stratified_frames(10, 0));
}

TEST_CASE("topk vocab coverage") {
  double coverage = 0.0;
  lcmf::AnswerVocab v = lcmf::topk_vocab({"a", "a", "a", "b"}, 1, &coverage);
  CHECK(v.answers == std::vector<std::string>{"a"});
  CHECK(coverage == 0.75);

  v = lcmf::topk_vocab({"a", "a", "a", "b"}, 10, &coverage);
  CHECK(v.size() == 2);
  CHECK(coverage == 1.0);

  v = lcmf::topk_vocab({"b", "a", "b", "a"}, 1, &coverage);
  CHECK(v.answers == std::vector<std::string>{"a"});  // tie broken lexicographically
  CHECK(coverage == 0.5);
}

TEST_CASE("ppm round trip and header layout") {
  TempDir tmp("ppm");
  const std::string path = (tmp.path / "img.ppm").string();

  lcmf::Tensor img = random_tensor({6, 8, 3}, 31, 0.0, 1.0);
  img.data()[0] = 0.0;
  img.data()[1] = 1.0;
  lcmf::write_ppm(path, img);

  const std::string bytes = slurp(path);
  CHECK(bytes.rfind("P6\n8 6\n255\n", 0) == 0);
  CHECK(bytes.size() == 11 + 6 * 8 * 3);

  lcmf::Tensor back = lcmf::read_ppm(path);
  REQUIRE(back.shape() == img.shape());
  CHECK(back.data()[0] == 0.0);
  CHECK(back.data()[1] == 1.0);
  for (int64_t i = 0; i < img.numel(); ++i)
    CHECK(std::abs(back.data()[i] - img.data()[i]) <= 0.5 / 255.0 + 1e-12);

  // out-of-range values clamp instead of wrapping
  lcmf::Tensor wild = lcmf::Tensor::full({1, 1, 3}, 2.0);
  wild.data()[1] = -3.0;
  lcmf::write_ppm(path, wild);
  lcmf::Tensor clamped = lcmf::read_ppm(path);
  CHECK(clamped.data()[0] == 1.0);
  CHECK(clamped.data()[1] == 0.0);

  CHECK_THROWS(lcmf::write_ppm(path, lcmf::Tensor::zeros({4, 4})));
  CHECK_THROWS(lcmf::read_ppm((tmp.path / "missing.ppm").string()));
}

TEST_CASE("generator emits consistent records and valid files") {
  TempDir tmp("gen");
  lcmf::GenConfig cfg;
  cfg.n = 12;
  cfg.seed = 5;
  cfg.out_dir = (tmp.path / "corpus").string();
  const lcmf::DatasetManifest m = lcmf::gen_synthetic_vqa(cfg);
  REQUIRE(m.records.size() == 12);

  const std::set<std::string> digits{"0", "1", "2", "3"};
  for (const lcmf::VqaRecord& r : m.records) {
    CHECK(r.question_type == lcmf::classify_question(r.question));
    CHECK_FALSE(r.caption.empty());
    CHECK_FALSE(r.video);
    if (r.question_type == "yesno") CHECK((r.answer == "yes" || r.answer == "no"));
    if (r.question_type == "number") CHECK(digits.count(r.answer) == 1);
    const lcmf::Tensor img = lcmf::load_record_image(m, r);
    CHECK(img.shape() == std::vector<int64_t>{32, 32, 3});
  }
  // all three types appear under the cycling policy
  std::set<std::string> types;
  for (const lcmf::VqaRecord& r : m.records) types.insert(r.question_type);
  CHECK(types.size() == 3);

  // reload with file checking
  const lcmf::DatasetManifest back =
      lcmf::DatasetManifest::load((std::filesystem::path(cfg.out_dir) / "manifest.jsonl").string());
  REQUIRE(back.records.size() == 12);
  CHECK(back.split == "train");
  CHECK(back.records[3].question == m.records[3].question);
  CHECK(back.records[7].answer == m.records[7].answer);
}

TEST_CASE("equal seeds give byte-identical corpora") {
  TempDir tmp("det");
  lcmf::GenConfig cfg;
  cfg.n = 6;
  cfg.seed = 9;
  cfg.out_dir = (tmp.path / "a").string();
  lcmf::gen_synthetic_vqa(cfg);
  cfg.out_dir = (tmp.path / "b").string();
  lcmf::gen_synthetic_vqa(cfg);

  CHECK(slurp((tmp.path / "a" / "manifest.jsonl").string()) ==
        slurp((tmp.path / "b" / "manifest.jsonl").string()));
  for (int i = 0; i < 6; ++i) {
    char name[64];
    std::snprintf(name, sizeof(name), "images/img_%05d.ppm", i);
    CHECK(slurp((tmp.path / "a" / name).string()) == slurp((tmp.path / "b" / name).string()));
  }

  cfg.seed = 10;
  cfg.out_dir = (tmp.path / "c").string();
  lcmf::gen_synthetic_vqa(cfg);
  CHECK(slurp((tmp.path / "a" / "manifest.jsonl").string()) !=
        slurp((tmp.path / "c" / "manifest.jsonl").string()));
}

TEST_CASE("video corpora carry frame directories") {
  TempDir tmp("vid");
  lcmf::GenConfig cfg;
  cfg.n = 3;
  cfg.seed = 4;
  cfg.video_frames = 4;
  cfg.split = "eqa";
  cfg.out_dir = (tmp.path / "clips").string();
  const lcmf::DatasetManifest m = lcmf::gen_synthetic_vqa(cfg);

  for (const lcmf::VqaRecord& r : m.records) {
    CHECK(r.video);
    CHECK_THROWS(lcmf::load_record_image(m, r));
    const std::vector<lcmf::Tensor> frames = lcmf::load_record_frames(m, r, 50);
    REQUIRE(frames.size() == 50);
    CHECK(frames[0].shape() == std::vector<int64_t>{32, 32, 3});
  }
  CHECK(m.split == "eqa");

  // the moving shape changes pixels across source frames
  const std::vector<lcmf::Tensor> two = lcmf::load_record_frames(m, m.records[0], 2);
  double diff = 0.0;
  for (int64_t i = 0; i < two[0].numel(); ++i)
    diff += std::abs(two[0].data()[i] - two[1].data()[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("manifest loading validates files and structure") {
  TempDir tmp("man");
  lcmf::DatasetManifest m;
  m.split = "val";
  m.records.push_back({"images/missing.ppm", "cap", "is it", "yes", "yesno", false});
  const std::string path = (tmp.path / "manifest.jsonl").string();
  m.save(path);

  CHECK_THROWS(lcmf::DatasetManifest::load(path, /*check_files=*/true));
  const lcmf::DatasetManifest lazy = lcmf::DatasetManifest::load(path, /*check_files=*/false);
  REQUIRE(lazy.records.size() == 1);
  CHECK(lazy.split == "val");
  CHECK(lazy.dir == tmp.path.string());

  std::ofstream bad(path, std::ios::app);
  bad << "{not json\n";
  bad.close();
  CHECK_THROWS(lcmf::DatasetManifest::load(path, false));

  CHECK_THROWS(lcmf::DatasetManifest::load((tmp.path / "absent.jsonl").string()));
}
