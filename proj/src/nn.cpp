#include "lcmf/nn.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "lcmf/rng.hpp"

namespace lcmf {

using detail::fail;
using detail::shape_str;

uint64_t fnv1a(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

Tensor ParamStore::insert(const std::string& name, Tensor t, std::string init_spec) {
  auto it = params_.find(name);
  if (it != params_.end()) {
    if (it->second.tensor.shape() != t.shape())
      fail("parameter '" + name + "' re-registered with shape " + shape_str(t.shape()) +
           ", existing " + shape_str(it->second.tensor.shape()));
    return it->second.tensor;
  }
  t.set_requires_grad(true);
  params_.emplace(name, ParamInfo{name, t, std::move(init_spec)});
  return t;
}

Tensor ParamStore::uniform_fan_in(const std::string& name, std::vector<int64_t> shape,
                                  int64_t fan_in) {
  if (fan_in < 1) fail("uniform_fan_in: fan_in must be positive for '" + name + "'");
  auto it = params_.find(name);
  if (it != params_.end()) return insert(name, Tensor::zeros(std::move(shape)), "");
  Tensor t = Tensor::zeros(shape);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng(seed_hash(seed_, fnv1a(name)));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(-bound, bound);
  return insert(name, t, "uniform(+-1/sqrt(" + std::to_string(fan_in) + "))");
}

Tensor ParamStore::zeros(const std::string& name, std::vector<int64_t> shape) {
  return insert(name, Tensor::zeros(std::move(shape)), "zeros");
}

Tensor ParamStore::ones(const std::string& name, std::vector<int64_t> shape) {
  return insert(name, Tensor::full(std::move(shape), 1.0), "ones");
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) fail("unknown parameter '" + name + "'");
  return it->second.tensor;
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& [name, info] : params_) n += info.tensor.numel();
  return n;
}

void ParamStore::zero_all_grads() {
  for (auto& [name, info] : params_) info.tensor.zero_grad();
}

Linear::Linear(ParamStore& store, const std::string& name, int64_t in, int64_t out, bool bias) {
  w_ = store.uniform_fan_in(name + ".w", {in, out}, in);
  if (bias) b_ = store.zeros(name + ".b", {out});
}

Linear Linear::zero_init(ParamStore& store, const std::string& name, int64_t in, int64_t out,
                         bool bias) {
  Linear l;
  l.w_ = store.zeros(name + ".w", {in, out});
  if (bias) l.b_ = store.zeros(name + ".b", {out});
  return l;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = matmul(x, w_);
  if (b_.defined()) y = add_rowvec(y, b_);
  return y;
}

LayerNormLayer::LayerNormLayer(ParamStore& store, const std::string& name, int64_t dim) {
  gain_ = store.ones(name + ".gain", {dim});
  bias_ = store.zeros(name + ".bias", {dim});
}

Tensor LayerNormLayer::operator()(const Tensor& x) const {
  return layer_norm(x, gain_, bias_, eps_);
}

// ---- checkpoint io ----

namespace {

void wr(std::ofstream& f, const void* p, size_t n) {
  f.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void wr_pod(std::ofstream& f, T v) {
  wr(f, &v, sizeof(v));
}

template <class T>
T rd_pod(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store, bool f32) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
  wr(f, "LCMF", 4);
  wr_pod<uint32_t>(f, kCheckpointVersion);
  wr_pod<uint32_t>(f, static_cast<uint32_t>(store.entries().size()));
  for (const auto& [name, info] : store.entries()) {
    if (name.size() > UINT16_MAX) throw std::runtime_error("checkpoint: name too long");
    wr_pod<uint16_t>(f, static_cast<uint16_t>(name.size()));
    wr(f, name.data(), name.size());
    wr_pod<uint8_t>(f, f32 ? 1 : 0);
    const auto& shape = info.tensor.shape();
    wr_pod<uint8_t>(f, static_cast<uint8_t>(shape.size()));
    for (int64_t d : shape) wr_pod<uint64_t>(f, static_cast<uint64_t>(d));
    if (f32) {
      std::vector<float> buf(static_cast<size_t>(info.tensor.numel()));
      for (size_t i = 0; i < buf.size(); ++i)
        buf[i] = static_cast<float>(info.tensor.data()[i]);
      wr(f, buf.data(), buf.size() * sizeof(float));
    } else {
      wr(f, info.tensor.data(), static_cast<size_t>(info.tensor.numel()) * sizeof(double));
    }
  }
  if (!f) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

std::vector<LoadedArray> load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "LCMF", 4) != 0)
    throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
  const auto version = rd_pod<uint32_t>(f);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  const auto count = rd_pod<uint32_t>(f);
  std::vector<LoadedArray> out;
  out.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = rd_pod<uint16_t>(f);
    std::string name(name_len, '\0');
    f.read(name.data(), name_len);
    const auto dtype = rd_pod<uint8_t>(f);
    if (dtype > 1) throw std::runtime_error("checkpoint: unknown dtype tag in '" + name + "'");
    const auto rank = rd_pod<uint8_t>(f);
    std::vector<int64_t> shape(rank);
    int64_t numel = 1;
    for (auto& d : shape) {
      d = static_cast<int64_t>(rd_pod<uint64_t>(f));
      numel *= d;
    }
    std::vector<double> data(static_cast<size_t>(numel));
    if (dtype == 0) {
      f.read(reinterpret_cast<char*>(data.data()),
             static_cast<std::streamsize>(data.size() * sizeof(double)));
    } else {
      std::vector<float> buf(static_cast<size_t>(numel));
      f.read(reinterpret_cast<char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
      for (size_t j = 0; j < buf.size(); ++j) data[j] = static_cast<double>(buf[j]);
    }
    if (!f) throw std::runtime_error("checkpoint: truncated array '" + name + "'");
    out.push_back({std::move(name), Tensor::from(std::move(shape), std::move(data))});
  }
  return out;
}

void apply_checkpoint(ParamStore& store, const std::vector<LoadedArray>& arrays) {
  for (const auto& a : arrays) {
    if (!store.has(a.name))
      throw std::runtime_error("checkpoint: array '" + a.name + "' has no matching parameter");
    Tensor dst = store.get(a.name);
    if (dst.shape() != a.tensor.shape())
      throw std::runtime_error("checkpoint: shape mismatch for '" + a.name + "': file " +
                               shape_str(a.tensor.shape()) + ", model " + shape_str(dst.shape()));
    std::copy(a.tensor.data(), a.tensor.data() + a.tensor.numel(), dst.data());
  }
}

}  // namespace lcmf
