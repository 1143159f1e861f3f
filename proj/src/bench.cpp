#include "lcmf/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <stdexcept>

#include "lcmf/cmm.hpp"
#include "lcmf/parallel.hpp"
#include "lcmf/rng.hpp"
#include "lcmf/sam.hpp"

namespace lcmf {

namespace {

constexpr int64_t kBenchHeads = 4;

int64_t time_once(const std::function<void()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  body();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count();
}

int64_t median_ns(std::vector<int64_t> samples) {
  std::sort(samples.begin(), samples.end());
  const size_t n = samples.size();
  const int64_t mid = n % 2 ? samples[n / 2]
                            : (samples[n / 2 - 1] + samples[n / 2]) / 2;
  return std::max<int64_t>(1, mid);  // keeps the log fit defined on coarse clocks
}

// Restores the worker cap even if timing throws.
struct WorkerPin {
  int previous;
  explicit WorkerPin(int n) : previous(worker_count()) { set_worker_count(n); }
  ~WorkerPin() { set_worker_count(previous); }
};

}  // namespace

double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("slope: size mismatch");
  if (xs.size() < 2) throw std::invalid_argument("slope: need at least two points");
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i] <= 0.0 || ys[i] <= 0.0) throw std::invalid_argument("slope: points must be positive");
    const double lx = std::log(xs[i]), ly = std::log(ys[i]);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
  }
  const double n = static_cast<double>(xs.size());
  const double denom = n * sxx - sx * sx;
  if (denom == 0.0) throw std::invalid_argument("slope: degenerate abscissa");
  return (n * sxy - sx * sy) / denom;
}

BenchReport run_bench(const std::vector<int64_t>& lengths, int64_t d_model, int64_t repeats) {
  if (lengths.size() < 4) throw std::invalid_argument("bench: need at least 4 lengths");
  for (size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1) throw std::invalid_argument("bench: lengths must be positive");
    if (i > 0 && lengths[i] <= lengths[i - 1])
      throw std::invalid_argument("bench: lengths must be strictly increasing");
  }
  if (d_model < kBenchHeads || d_model % kBenchHeads != 0)
    throw std::invalid_argument("bench: d_model must be a positive multiple of 4");
  if (repeats < 1) throw std::invalid_argument("bench: repeats must be positive");

  MambaCoreConfig core;
  core.d_model = d_model;
  core.d_inner = 2 * d_model;

  ParamStore store(271828);
  const CmmBlock cmm(store, "cmm", core, 1.0);
  const MultiHeadAttention attn(store, "attn", d_model, kBenchHeads);

  std::vector<Tensor> inputs;
  inputs.reserve(lengths.size());
  for (size_t i = 0; i < lengths.size(); ++i) {
    Tensor x = Tensor::zeros({lengths[i], d_model});
    Rng rng(seed_hash(314159u, static_cast<uint64_t>(i)));
    for (int64_t j = 0; j < x.numel(); ++j) x.data()[j] = rng.uniform(-1.0, 1.0);
    inputs.push_back(x);
  }

  const WorkerPin pin(1);

  // Every timed result feeds the sink, so no forward can be elided.
  double sink = 0.0;
  const auto run_cmm = [&](const Tensor& x) { sink += cmm.forward(x, Tensor()).first.data()[0]; };
  const auto run_attn = [&](const Tensor& x) { sink += attn(x).data()[0]; };
  run_cmm(inputs.front());
  run_attn(inputs.front());

  std::vector<std::vector<int64_t>> cmm_times(lengths.size()), attn_times(lengths.size());
  for (int64_t r = 0; r < repeats; ++r) {
    for (size_t i = 0; i < lengths.size(); ++i) {
      cmm_times[i].push_back(time_once([&] { run_cmm(inputs[i]); }));
      attn_times[i].push_back(time_once([&] { run_attn(inputs[i]); }));
    }
  }
  if (!std::isfinite(sink)) throw std::runtime_error("bench: non-finite forward output");

  BenchReport report;
  report.d_model = d_model;
  report.repeats = repeats;
  std::vector<double> ls, cs, as;
  for (size_t i = 0; i < lengths.size(); ++i) {
    BenchPoint p;
    p.length = lengths[i];
    p.cmm_ns = median_ns(cmm_times[i]);
    p.attn_ns = median_ns(attn_times[i]);
    p.cmm_flops = flops_cmm(lengths[i], 0, core);
    p.attn_flops = flops_attention(lengths[i], d_model, kBenchHeads);
    report.points.push_back(p);
    ls.push_back(static_cast<double>(p.length));
    cs.push_back(static_cast<double>(p.cmm_ns));
    as.push_back(static_cast<double>(p.attn_ns));
    if (report.crossover < 0 && p.cmm_ns <= p.attn_ns) report.crossover = p.length;
  }
  report.cmm_slope = loglog_slope(ls, cs);
  report.attn_slope = loglog_slope(ls, as);
  return report;
}

void write_bench_csv(const BenchReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("bench: cannot write " + path);
  out << "length,cmm_ns,attn_ns,cmm_flops,attn_flops\n";
  for (const BenchPoint& p : report.points)
    out << p.length << ',' << p.cmm_ns << ',' << p.attn_ns << ',' << p.cmm_flops << ','
        << p.attn_flops << '\n';
  if (!out.flush()) throw std::runtime_error("bench: write failed for " + path);
}

std::string bench_summary(const BenchReport& report) {
  char line[256];
  std::string text;
  std::snprintf(line, sizeof(line), "bench: d_model %lld, %zu lengths, %lld repeats\n",
                static_cast<long long>(report.d_model), report.points.size(),
                static_cast<long long>(report.repeats));
  text += line;
  std::snprintf(line, sizeof(line),
                "wall-time log-log slope: recurrence %.3f, attention %.3f\n", report.cmm_slope,
                report.attn_slope);
  text += line;
  if (report.points.size() >= 2) {
    const BenchPoint& a = report.points[report.points.size() - 2];
    const BenchPoint& b = report.points.back();
    std::snprintf(line, sizeof(line),
                  "flops ratio %lld -> %lld: recurrence %.3f, attention %.3f\n",
                  static_cast<long long>(a.length), static_cast<long long>(b.length),
                  static_cast<double>(b.cmm_flops) / static_cast<double>(a.cmm_flops),
                  static_cast<double>(b.attn_flops) / static_cast<double>(a.attn_flops));
    text += line;
  }
  if (report.crossover >= 0)
    std::snprintf(line, sizeof(line), "recurrence is faster from length %lld\n",
                  static_cast<long long>(report.crossover));
  else
    std::snprintf(line, sizeof(line), "attention stayed faster over the measured lengths\n");
  text += line;
  return text;
}

}  // namespace lcmf
