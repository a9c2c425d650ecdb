#include "hps/bench.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <Eigen/Core>
#include "json.hpp"

#include "hps/errors.hpp"
#include "hps/rng.hpp"

namespace hps {
namespace {

std::atomic<bool> g_running{false};

struct RunGuard {
  RunGuard() {
    if (g_running.exchange(true)) {
      throw std::runtime_error("a benchmark is already running in this process");
    }
  }
  ~RunGuard() { g_running.store(false); }
  RunGuard(const RunGuard&) = delete;
  RunGuard& operator=(const RunGuard&) = delete;
};

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

void summarize(const std::vector<double>& xs, double& mean, double& std_dev) {
  mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  double ss = 0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  std_dev = xs.size() > 1 ? std::sqrt(ss / static_cast<double>(xs.size() - 1)) : 0.0;
}

std::string fixed(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

TimingReport time_stages(const Model<float>& model, std::size_t height,
                         std::size_t width, const BenchOptions& options) {
  if (options.warmup < 1) throw ConfigError("bench warmup must be at least 1");
  if (options.iters < 10) throw ConfigError("bench iterations must be at least 10");
  if (height == 0 || width == 0 || height % 32 || width % 32) {
    throw ConfigError("bench input size must be a positive multiple of 32");
  }
  options.inference.validate();
  RunGuard guard;
  const int threads = Eigen::nbThreads();
  Eigen::setNbThreads(1);

  Tensor<float> image({3, height, width});
  Rng rng(options.seed);
  for (auto& v : image.values()) v = static_cast<float>(rng.normal());

  std::vector<double> backbone, head, post, total;
  const std::size_t rounds = options.warmup + options.iters;
  for (std::size_t it = 0; it < rounds; ++it) {
    const auto t0 = Clock::now();
    Graph<float> g(false);
    BackboneFeatures<float> features = run_backbone(model, g, image);
    const auto t1 = Clock::now();
    HeadResult h = run_head(model, g, features, height, width, options.inference);
    const auto t2 = Clock::now();
    PanopticMap map = run_postprocess(h, options.inference);
    const auto t3 = Clock::now();
    if (map.semantic.size() != height * width) {
      throw ShapeError("bench: postprocess produced a map of the wrong size");
    }
    if (options.on_iteration) options.on_iteration(it);
    if (it < options.warmup) continue;
    backbone.push_back(ms_between(t0, t1));
    head.push_back(ms_between(t1, t2));
    post.push_back(ms_between(t2, t3));
    total.push_back(ms_between(t0, t3));
  }
  Eigen::setNbThreads(threads);

  TimingReport r;
  const char* names[3] = {"backbone", "head", "postprocess"};
  std::vector<double>* series[3] = {&backbone, &head, &post};
  for (int s = 0; s < 3; ++s) {
    StageTiming st;
    st.stage = names[s];
    st.samples_ms = std::move(*series[s]);
    summarize(st.samples_ms, st.mean_ms, st.std_ms);
    r.stages.push_back(std::move(st));
  }
  summarize(total, r.total_ms, r.total_std_ms);
  r.fps = 1000.0 / r.total_ms;
  const ModelConfig& c = model.config();
  r.config = c.variant() + " N=" + std::to_string(c.num_queries) +
             " C=" + std::to_string(c.embed_dim) + " ffn=" + std::to_string(c.ffn_dim) +
             " heads=" + std::to_string(c.heads);
  r.height = height;
  r.width = width;
  r.warmup = options.warmup;
  r.iters = options.iters;
  r.note = "single-threaded timed path; batch size 1; mask upsampling timed in head";
  return r;
}

std::string format_report(const TimingReport& report, ReportFormat format) {
  if (format == ReportFormat::csv) {
    std::string out = "stage,mean_ms,std_ms\n";
    if (report.empty()) return out;
    for (const auto& s : report.stages) {
      out += s.stage + "," + fixed(s.mean_ms) + "," + fixed(s.std_ms) + "\n";
    }
    out += "total," + fixed(report.total_ms) + "," + fixed(report.total_std_ms) + "\n";
    return out;
  }
  nlohmann::ordered_json j;
  j["rows"] = nlohmann::ordered_json::array();
  if (!report.empty()) {
    for (const auto& s : report.stages) {
      j["rows"].push_back({{"stage", s.stage}, {"mean_ms", s.mean_ms}, {"std_ms", s.std_ms}});
    }
    j["rows"].push_back(
        {{"stage", "total"}, {"mean_ms", report.total_ms}, {"std_ms", report.total_std_ms}});
    j["fps"] = report.fps;
    j["config"] = report.config;
    j["height"] = report.height;
    j["width"] = report.width;
    j["warmup"] = report.warmup;
    j["iters"] = report.iters;
    j["note"] = report.note;
  }
  return j.dump(2) + "\n";
}

void emit_report(const TimingReport& report, const std::filesystem::path& path,
                 ReportFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write benchmark report " + path.string());
  out << format_report(report, format);
  if (!out) throw DataError("failed writing benchmark report " + path.string());
}

}  // namespace hps
