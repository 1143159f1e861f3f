#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace lcmf {

struct BenchPoint {
  int64_t length = 0;
  int64_t cmm_ns = 0;   // median forward wall time
  int64_t attn_ns = 0;  // same, multi-head attention
  int64_t cmm_flops = 0;
  int64_t attn_flops = 0;
};

struct BenchReport {
  std::vector<BenchPoint> points;  // one per requested length, same order
  int64_t d_model = 0;
  int64_t repeats = 0;
  double cmm_slope = 0.0;  // log-log wall-time slope over the measured lengths
  double attn_slope = 0.0;
  int64_t crossover = -1;  // first measured length where the recurrence wins, -1 if none
};

// Least-squares slope of ln(y) against ln(x). Needs matching sizes, at least
// two points, everything positive.
double loglog_slope(const std::vector<double>& xs, const std::vector<double>& ys);

// Times forward passes of one cross-modal recurrence block against one
// multi-head attention block on a single [length, d_model] stream. Median of
// `repeats` passes per length, repeats interleaved across lengths so slow
// drift spreads evenly. Runs single-worker. Lengths must be strictly
// increasing with at least four entries; d_model must be divisible by the
// four attention heads.
BenchReport run_bench(const std::vector<int64_t>& lengths, int64_t d_model, int64_t repeats);

// Columns: length,cmm_ns,attn_ns,cmm_flops,attn_flops
void write_bench_csv(const BenchReport& report, const std::string& path);

std::string bench_summary(const BenchReport& report);

}  // namespace lcmf
