#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "lcmf/tensor.hpp"

namespace lcmf {

struct ParamInfo {
  std::string name;
  Tensor tensor;
  std::string init_spec;
};

// Named parameter registry. Values are initialized from a hash of
// (store seed, parameter name), so creation order never affects contents,
// and traversal is name-ordered so checkpoints are laid out deterministically.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : seed_(seed) {}

  Tensor uniform_fan_in(const std::string& name, std::vector<int64_t> shape, int64_t fan_in);
  Tensor zeros(const std::string& name, std::vector<int64_t> shape);
  Tensor ones(const std::string& name, std::vector<int64_t> shape);

  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Tensor get(const std::string& name) const;
  const std::map<std::string, ParamInfo>& entries() const { return params_; }

  int64_t total_params() const;
  void zero_all_grads();
  uint64_t seed() const { return seed_; }

 private:
  Tensor insert(const std::string& name, Tensor t, std::string init_spec);
  std::map<std::string, ParamInfo> params_;
  uint64_t seed_;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, int64_t in, int64_t out, bool bias = true);
  // Zero-initialized weights (residual-branch outputs, FiLM maps).
  static Linear zero_init(ParamStore& store, const std::string& name, int64_t in, int64_t out,
                          bool bias = true);

  Tensor operator()(const Tensor& x) const;  // [T,in] -> [T,out]
  int64_t in_dim() const { return w_.dim(0); }
  int64_t out_dim() const { return w_.dim(1); }
  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor w_;  // [in, out]
  Tensor b_;  // [out] when present
};

class LayerNormLayer {
 public:
  LayerNormLayer() = default;
  LayerNormLayer(ParamStore& store, const std::string& name, int64_t dim);
  Tensor operator()(const Tensor& x) const;

 private:
  Tensor gain_, bias_;
  double eps_ = 1e-5;
};

// ---- checkpoint io ----
// Layout: "LCMF" magic, u32 version, u32 array count, then per array:
// u16 name length, UTF-8 name, u8 dtype (0 = f64, 1 = f32), u8 rank,
// u64 dims, raw little-endian payload. Arrays are written name-sorted.

inline constexpr uint32_t kCheckpointVersion = 1;

struct LoadedArray {
  std::string name;
  Tensor tensor;
};

void save_checkpoint(const std::string& path, const ParamStore& store, bool f32 = false);
std::vector<LoadedArray> load_checkpoint_file(const std::string& path);
// Copies arrays into existing parameters; unknown array names and shape
// mismatches are errors, parameters absent from the file keep their values.
void apply_checkpoint(ParamStore& store, const std::vector<LoadedArray>& arrays);

uint64_t fnv1a(const std::string& s);

}  // namespace lcmf
