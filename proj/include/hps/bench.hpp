#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hps/model.hpp"
#include "hps/postprocess.hpp"

namespace hps {

struct StageTiming {
  std::string stage;
  double mean_ms = 0;
  double std_ms = 0;  // sample standard deviation
  std::vector<double> samples_ms;
};

struct TimingReport {
  std::vector<StageTiming> stages;  // backbone, head, postprocess
  double total_ms = 0;              // mean wall time of a whole frame
  double total_std_ms = 0;
  double fps = 0;                   // 1000 / total_ms
  std::string config;               // variant and dimensions
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t warmup = 0;
  std::size_t iters = 0;
  std::string note;

  bool empty() const { return stages.empty(); }
};

struct BenchOptions {
  std::size_t warmup = 10;  // >= 1
  std::size_t iters = 100;  // >= 10
  std::uint64_t seed = 0;   // of the random input frame
  InferenceConfig inference;
  // Called after every iteration (warmup included) with its index.
  std::function<void(std::size_t)> on_iteration;
};

// Times the backbone, head (pixel decoder, transformer decoder,
// segmentation modules and mask upsampling) and postprocess stages on one
// random frame reused for every iteration. Warmup iterations are discarded.
// Throws ConfigError on bad counts or dimensions, and std::runtime_error
// when another benchmark is already running in this process.
TimingReport time_stages(const Model<float>& model, std::size_t height,
                         std::size_t width, const BenchOptions& options = {});

enum class ReportFormat { csv, json };

// CSV: `stage,mean_ms,std_ms`, one row per stage then a `total` row; an
// empty report gives the header only. JSON carries the same rows plus the
// metadata. Throws DataError when the file cannot be written.
std::string format_report(const TimingReport& report, ReportFormat format);
void emit_report(const TimingReport& report, const std::filesystem::path& path,
                 ReportFormat format = ReportFormat::csv);

}  // namespace hps
