#include "lcmf/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include "json.hpp"
#include "lcmf/rng.hpp"
#include "lcmf/text.hpp"

namespace fs = std::filesystem;

namespace lcmf {

std::string DatasetManifest::resolve(const std::string& rel_path) const {
  if (dir.empty()) return rel_path;
  return (fs::path(dir) / rel_path).string();
}

void DatasetManifest::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) detail::fail("manifest: cannot write " + path);
  for (const VqaRecord& r : records) {
    nlohmann::ordered_json j;
    j["image"] = r.image;
    j["caption"] = r.caption;
    j["question"] = r.question;
    j["answer"] = r.answer;
    j["type"] = r.question_type;
    j["video"] = r.video;
    j["split"] = split;
    out << j.dump() << '\n';
  }
  if (!out) detail::fail("manifest: write failed for " + path);
}

DatasetManifest DatasetManifest::load(const std::string& path, bool check_files) {
  std::ifstream in(path, std::ios::binary);
  if (!in) detail::fail("manifest: cannot read " + path);
  DatasetManifest m;
  m.dir = fs::path(path).parent_path().string();
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      detail::fail("manifest: bad json at " + path + ":" + std::to_string(line_no) + ": " +
                   e.what());
    }
    VqaRecord r;
    try {
      r.image = j.at("image").get<std::string>();
      r.caption = j.at("caption").get<std::string>();
      r.question = j.at("question").get<std::string>();
      r.answer = j.at("answer").get<std::string>();
      r.question_type = j.at("type").get<std::string>();
      r.video = j.at("video").get<bool>();
      const std::string split = j.at("split").get<std::string>();
      if (m.records.empty())
        m.split = split;
      else if (split != m.split)
        detail::fail("manifest: mixed split tags in " + path);
    } catch (const nlohmann::json::exception& e) {
      detail::fail("manifest: missing field at " + path + ":" + std::to_string(line_no) + ": " +
                   e.what());
    }
    if (check_files) {
      const std::string full = m.resolve(r.image);
      if (r.video) {
        if (!fs::is_directory(full))
          detail::fail("manifest: frame directory missing: " + full);
      } else if (!fs::is_regular_file(full)) {
        detail::fail("manifest: image missing: " + full);
      }
    }
    m.records.push_back(std::move(r));
  }
  return m;
}

std::string classify_question(const std::string& question) {
  const std::vector<std::string> words = split_words(question);
  if (words.size() >= 2 && words[0] == "how" && (words[1] == "many" || words[1] == "much"))
    return "number";
  static const std::set<std::string> yesno{"is",  "are", "does", "do",  "was",
                                           "were", "can", "could", "has", "have"};
  if (!words.empty() && yesno.count(words[0])) return "yesno";
  return "other";
}

std::vector<int64_t> stratified_frames(int64_t video_len, int64_t k) {
  if (video_len < 1) detail::fail("stratified_frames: empty video");
  if (k < 1) detail::fail("stratified_frames: k must be positive");
  std::vector<int64_t> idx(static_cast<size_t>(k));
  for (int64_t i = 0; i < k; ++i)
    idx[static_cast<size_t>(i)] = (2 * i + 1) * video_len / (2 * k);  // span center, floored
  return idx;
}

AnswerVocab topk_vocab(const std::vector<std::string>& answers, int64_t k, double* coverage) {
  if (k < 1) detail::fail("topk_vocab: k must be positive");
  if (answers.empty()) detail::fail("topk_vocab: no answers");
  AnswerVocab v = AnswerVocab::build(answers, k);
  if (v.size() < k)
    std::cerr << "topk_vocab: only " << v.size() << " distinct answers for k=" << k << "\n";
  if (coverage) {
    int64_t kept = 0;
    for (const std::string& a : answers)
      if (v.id_of(a) >= 0) ++kept;
    *coverage = static_cast<double>(kept) / static_cast<double>(answers.size());
  }
  return v;
}

void write_ppm(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(2) != 3)
    detail::fail("ppm: expects [H, W, 3], got " + detail::shape_str(image.shape()));
  std::ofstream out(path, std::ios::binary);
  if (!out) detail::fail("ppm: cannot write " + path);
  const int64_t h = image.dim(0), w = image.dim(1);
  out << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w * 3));
  const double* src = image.data();
  for (size_t i = 0; i < bytes.size(); ++i) {
    const long q = std::lround(src[i] * 255.0);
    bytes[i] = static_cast<unsigned char>(std::clamp(q, 0L, 255L));
  }
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) detail::fail("ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) detail::fail("ppm: cannot read " + path);
  std::string magic;
  int64_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || w < 1 || h < 1) detail::fail("ppm: bad header in " + path);
  if (maxval != 255) detail::fail("ppm: unsupported maxval in " + path);
  in.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<size_t>(h * w * 3));
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size()))
    detail::fail("ppm: truncated pixel data in " + path);
  Tensor img = Tensor::zeros({h, w, 3});
  double* dst = img.data();
  for (size_t i = 0; i < bytes.size(); ++i) dst[i] = static_cast<double>(bytes[i]) / 255.0;
  return img;
}

namespace {

const char* kShapeNames[3] = {"circle", "square", "triangle"};
const char* kColorNames[6] = {"red", "green", "blue", "yellow", "purple", "orange"};
const double kColorRgb[6][3] = {{0.90, 0.15, 0.15}, {0.15, 0.80, 0.20}, {0.20, 0.35, 0.95},
                                {0.95, 0.85, 0.20}, {0.65, 0.25, 0.85}, {0.95, 0.55, 0.15}};

struct Shape {
  int type = 0;   // index into kShapeNames
  int color = 0;  // index into kColorNames
  int64_t cx = 0, cy = 0, half = 0;
  int64_t cx_end = 0, cy_end = 0;  // video endpoint; equals (cx, cy) for stills
};

bool covers(const Shape& s, int64_t cx, int64_t cy, int64_t x, int64_t y) {
  const int64_t dx = x - cx, dy = y - cy;
  switch (s.type) {
    case 0:
      return dx * dx + dy * dy <= s.half * s.half;
    case 1:
      return std::abs(dx) <= s.half && std::abs(dy) <= s.half;
    default: {
      // upward triangle: apex at cy - half, base at cy + half
      if (dy < -s.half || dy > s.half) return false;
      const int64_t reach = (dy + s.half) / 2;
      return std::abs(dx) <= reach;
    }
  }
}

// frame t of n: shape centers interpolated toward their endpoints
Tensor render(const std::vector<Shape>& shapes, int64_t side, int64_t t, int64_t n_frames) {
  Tensor img = Tensor::full({side, side, 3}, 0.08);
  double* px = img.data();
  for (const Shape& s : shapes) {
    int64_t cx = s.cx, cy = s.cy;
    if (n_frames > 1) {
      cx = s.cx + (s.cx_end - s.cx) * t / (n_frames - 1);
      cy = s.cy + (s.cy_end - s.cy) * t / (n_frames - 1);
    }
    for (int64_t y = std::max<int64_t>(0, cy - s.half); y <= std::min(side - 1, cy + s.half); ++y)
      for (int64_t x = std::max<int64_t>(0, cx - s.half); x <= std::min(side - 1, cx + s.half); ++x)
        if (covers(s, cx, cy, x, y))
          for (int64_t c = 0; c < 3; ++c) px[(y * side + x) * 3 + c] = kColorRgb[s.color][c];
  }
  return img;
}

std::string count_phrase(int64_t n, const std::string& noun) {
  static const char* words[] = {"zero", "a", "two", "three", "four"};
  std::string out = words[n];
  out += ' ';
  out += noun;
  if (n != 1) out += 's';
  return out;
}

std::string caption_for(const std::vector<Shape>& shapes) {
  // group identical (color, type) pairs in first-appearance order
  std::vector<std::pair<std::pair<int, int>, int64_t>> groups;
  for (const Shape& s : shapes) {
    bool found = false;
    for (auto& g : groups)
      if (g.first == std::make_pair(s.color, s.type)) {
        ++g.second;
        found = true;
      }
    if (!found) groups.push_back({{s.color, s.type}, 1});
  }
  std::string text;
  for (size_t i = 0; i < groups.size(); ++i) {
    if (i > 0) text += (i + 1 == groups.size()) ? " and " : ", ";
    const auto& [key, count] = groups[i];
    text += count_phrase(count, std::string(kColorNames[key.first]) + ' ' + kShapeNames[key.second]);
  }
  return text;
}

}  // namespace

DatasetManifest gen_synthetic_vqa(const GenConfig& cfg) {
  if (cfg.n < 1) detail::fail("gen: n must be positive");
  if (cfg.image_side < 12) detail::fail("gen: image side too small to place shapes");
  const bool video = cfg.video_frames > 0;

  fs::create_directories(cfg.out_dir);
  const fs::path root(cfg.out_dir);
  if (!video) fs::create_directories(root / "images");

  Rng rng(seed_hash(cfg.seed));
  DatasetManifest manifest;
  manifest.split = cfg.split;
  manifest.dir = cfg.out_dir;

  for (int64_t idx = 0; idx < cfg.n; ++idx) {
    const int64_t side = cfg.image_side;
    const int64_t n_shapes = 1 + rng.below(3);
    std::vector<Shape> shapes(static_cast<size_t>(n_shapes));
    for (Shape& s : shapes) {
      s.type = static_cast<int>(rng.below(3));
      s.color = static_cast<int>(rng.below(6));
      const int64_t max_half = std::max<int64_t>(3, side / 6);
      s.half = 3 + rng.below(max_half - 2);
      s.cx = s.half + rng.below(side - 2 * s.half);
      s.cy = s.half + rng.below(side - 2 * s.half);
      if (video) {
        s.cx_end = s.half + rng.below(side - 2 * s.half);
        s.cy_end = s.half + rng.below(side - 2 * s.half);
      } else {
        s.cx_end = s.cx;
        s.cy_end = s.cy;
      }
    }
    if (video)  // only the first shape moves
      for (size_t i = 1; i < shapes.size(); ++i) {
        shapes[i].cx_end = shapes[i].cx;
        shapes[i].cy_end = shapes[i].cy;
      }

    int64_t type_counts[3] = {0, 0, 0};
    int64_t color_counts[6] = {0, 0, 0, 0, 0, 0};
    bool pair_present[6][3] = {};
    for (const Shape& s : shapes) {
      ++type_counts[s.type];
      ++color_counts[s.color];
      pair_present[s.color][s.type] = true;
    }

    VqaRecord r;
    r.caption = caption_for(shapes);
    r.video = video;

    switch (idx % 3) {
      case 0: {  // yesno
        if (rng.below(2) == 0) {
          const Shape& probe = shapes[static_cast<size_t>(rng.below(n_shapes))];
          r.question = std::string("is there a ") + kColorNames[probe.color] + ' ' +
                       kShapeNames[probe.type];
          r.answer = "yes";
        } else {
          int color = 0, type = 0;
          do {
            color = static_cast<int>(rng.below(6));
            type = static_cast<int>(rng.below(3));
          } while (pair_present[color][type]);
          r.question = std::string("is there a ") + kColorNames[color] + ' ' + kShapeNames[type];
          r.answer = "no";
        }
        break;
      }
      case 1: {  // number
        const int type = static_cast<int>(rng.below(3));
        r.question = std::string("how many ") + kShapeNames[type] + "s are there";
        r.answer = std::to_string(type_counts[type]);
        break;
      }
      default: {  // other, alternating color and shape questions
        if (idx % 6 == 2) {
          int unique_type = -1;
          for (int t = 0; t < 3; ++t)
            if (type_counts[t] == 1) unique_type = t;
          if (unique_type >= 0) {
            r.question = std::string("what color is the ") + kShapeNames[unique_type];
            for (const Shape& s : shapes)
              if (s.type == unique_type) r.answer = kColorNames[s.color];
          } else {
            const Shape* biggest = &shapes[0];
            for (const Shape& s : shapes)
              if (s.half > biggest->half) biggest = &s;
            r.question = "what color is the largest shape";
            r.answer = kColorNames[biggest->color];
          }
        } else {
          int unique_color = -1;
          for (int c = 0; c < 6; ++c)
            if (color_counts[c] == 1) unique_color = c;
          if (unique_color >= 0) {
            r.question = std::string("what shape is the ") + kColorNames[unique_color] + " one";
            for (const Shape& s : shapes)
              if (s.color == unique_color) r.answer = kShapeNames[s.type];
          } else {
            const Shape* biggest = &shapes[0];
            for (const Shape& s : shapes)
              if (s.half > biggest->half) biggest = &s;
            r.question = "what shape is the largest one";
            r.answer = kShapeNames[biggest->type];
          }
        }
        break;
      }
    }
    r.question_type = classify_question(r.question);

    char name[64];
    if (video) {
      std::snprintf(name, sizeof(name), "frames/rec_%05lld", static_cast<long long>(idx));
      fs::create_directories(root / name);
      for (int64_t f = 0; f < cfg.video_frames; ++f) {
        char frame[32];
        std::snprintf(frame, sizeof(frame), "frame_%03lld.ppm", static_cast<long long>(f));
        write_ppm((root / name / frame).string(), render(shapes, side, f, cfg.video_frames));
      }
    } else {
      std::snprintf(name, sizeof(name), "images/img_%05lld.ppm", static_cast<long long>(idx));
      write_ppm((root / name).string(), render(shapes, side, 0, 1));
    }
    r.image = name;
    manifest.records.push_back(std::move(r));
  }

  manifest.save((root / "manifest.jsonl").string());
  return manifest;
}

Tensor load_record_image(const DatasetManifest& manifest, const VqaRecord& record) {
  if (record.video) detail::fail("load_record_image: record is a video");
  return read_ppm(manifest.resolve(record.image));
}

std::vector<Tensor> load_record_frames(const DatasetManifest& manifest, const VqaRecord& record,
                                       int64_t k) {
  if (!record.video) detail::fail("load_record_frames: record is a still image");
  const std::string dir = manifest.resolve(record.image);
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".ppm")
      files.push_back(entry.path().string());
  if (files.empty()) detail::fail("load_record_frames: no frames in " + dir);
  std::sort(files.begin(), files.end());

  std::vector<Tensor> frames;
  frames.reserve(static_cast<size_t>(k));
  for (int64_t i : stratified_frames(static_cast<int64_t>(files.size()), k))
    frames.push_back(read_ppm(files[static_cast<size_t>(i)]));
  return frames;
}

}  // namespace lcmf
