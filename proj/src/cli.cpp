#include "hps/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "hps/bench.hpp"
#include "hps/checkpoint.hpp"
#include "hps/dataset.hpp"
#include "hps/errors.hpp"
#include "hps/metrics.hpp"
#include "hps/model.hpp"
#include "hps/postprocess.hpp"
#include "hps/run_config.hpp"
#include "hps/synth.hpp"
#include "hps/trainer.hpp"

namespace hps {
namespace {

namespace fs = std::filesystem;

std::size_t default_workers() {
  return std::max(1u, std::thread::hardware_concurrency());
}

std::string describe(const ModelConfig& m) {
  return m.variant() + " N=" + std::to_string(m.num_queries) +
         " C=" + std::to_string(m.embed_dim);
}

void echo_to_stderr(const RunConfig& cfg) {
  std::cerr << "# resolved config\n" << echo_config(cfg) << std::flush;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<HierarchicalSample> load_split(const fs::path& dir) {
  const DatasetIndex index = DatasetIndex::open_dir(dir);
  if (!index.has_images()) throw DataError("split has no images/: " + dir.string());
  std::vector<HierarchicalSample> out;
  out.reserve(index.size());
  std::vector<std::string> warnings;
  for (const std::string& name : index.names()) {
    out.push_back(load_sample_dir(dir, name, {}, &warnings));
  }
  for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
  return out;
}

struct TrainArgs {
  std::string config, data, out;
};

int run_train(const TrainArgs& a) {
  const RunConfig cfg = parse_config(a.config);
  const std::string resolved = echo_config(cfg);
  echo_to_stderr(cfg);

  const fs::path root(a.data);
  const std::vector<HierarchicalSample> train = load_split(root / cfg.train_split);
  std::vector<HierarchicalSample> val;
  if (fs::is_directory(root / cfg.val_split)) {
    val = load_split(root / cfg.val_split);
  } else {
    std::cerr << "no " << cfg.val_split << " split; keeping the final weights\n";
  }
  if (train.empty()) throw DataError("no training samples in " + (root / cfg.train_split).string());

  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.txt", resolved);

  Model<float> model(cfg.model, cfg.model_seed);
  const std::size_t total =
      cfg.train.max_steps ? cfg.train.max_steps : cfg.train.epochs * train.size();
  const std::size_t every = std::max<std::size_t>(1, total / 20);
  std::cerr << "model " << describe(cfg.model) << ", " << train.size()
            << " training samples, " << val.size() << " validation samples, "
            << total << " steps\n";

  FitOptions opts;
  opts.out_dir = a.out;
  opts.config_text = resolved;
  opts.loss_weights = cfg.loss;
  opts.inference = cfg.inference;
  opts.pool = cfg.gt_pool;
  opts.target_stride = cfg.target_stride;
  opts.on_step = [&](const TrainRecord& r) {
    if (r.step % every == 0 || r.step + 1 == total) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %zu/%zu loss %.5f lr %.3g\n", r.step + 1,
                    total, r.loss.total, r.lr_head);
      std::cerr << buf;
    }
  };
  opts.on_eval = [](std::size_t step, const MetricReport& m) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "eval @%zu: PQ %.2f PQ_dagger %.2f\n", step, m.pq,
                  m.pq_dagger);
    std::cerr << buf;
  };
  const FitResult r = fit(model, train, val, cfg.train, opts);
  std::cerr << "checkpoint " << r.checkpoint.string() << " (step " << r.best_step << ")\n";
  return kExitOk;
}

struct InferArgs {
  std::string checkpoint, images, out;
  std::size_t workers = default_workers();
};

// Images come from <dir>/images/ when present, otherwise from <dir>.
std::vector<fs::path> list_images(const fs::path& dir) {
  const fs::path src = fs::is_directory(dir / "images") ? dir / "images" : dir;
  if (!fs::is_directory(src)) throw DataError("not a directory: " + src.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(src)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no .png images in " + src.string());
  return out;
}

int run_infer(const InferArgs& a) {
  const RunConfig cfg = parse_config_text(read_checkpoint_config(a.checkpoint), a.checkpoint);
  echo_to_stderr(cfg);
  Model<float> model(cfg.model, cfg.model_seed);
  load_checkpoint(a.checkpoint, model.parameters());
  const std::vector<fs::path> images = list_images(a.images);
  fs::create_directories(a.out);
  write_text(fs::path(a.out) / "config.txt", echo_config(cfg));
  std::cerr << "model " << describe(cfg.model) << ", " << images.size() << " images\n";

  // Inference graphs do not record, so the model is only read.
  const std::size_t workers = std::max<std::size_t>(1, std::min(a.workers, images.size()));
  std::exception_ptr error;
  std::mutex mu;
  auto work = [&](std::size_t first) {
    for (std::size_t i = first; i < images.size(); i += workers) {
      try {
        std::size_t h = 0, w = 0;
        const auto rgb = read_rgb_image(images[i], h, w);
        const PanopticMap map = infer(model, image_to_tensor<float>(rgb, h, w), cfg.inference);
        write_prediction(a.out, images[i].stem().string(), map);
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
        return;
      }
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work, t);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);
  return kExitOk;
}

struct EvalArgs {
  std::string pred, gt, report;
  std::size_t workers = default_workers();
};

int run_eval(const EvalArgs& a) {
  const MetricReport r = evaluate_dirs(a.pred, a.gt, std::max<std::size_t>(1, a.workers));
  const fs::path report(a.report);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  write_report_csv(report, r);
  fs::path tally = report;
  tally.replace_filename(report.stem().string() + "_tally.csv");
  write_tally_csv(tally, r);
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "PQ_dagger %.2f\nPQ %.2f\nPQ_crop %.2f\nPQ_leaf %.2f\nIoU_weed %.2f\nIoU_soil %.2f\n",
                round_half_even(r.pq_dagger, 2), round_half_even(r.pq, 2),
                round_half_even(r.pq_crop, 2), round_half_even(r.pq_leaf, 2),
                round_half_even(r.iou_weed, 2), round_half_even(r.iou_soil, 2));
  std::cout << buf << std::flush;
  return kExitOk;
}

struct BenchArgs {
  std::string config, report;
  std::size_t size = 1024, warmup = 10, iters = 100;
  bool json = false;
};

int run_bench(const BenchArgs& a) {
  const RunConfig cfg = parse_config(a.config);
  echo_to_stderr(cfg);
  const Model<float> model(cfg.model, cfg.model_seed);
  BenchOptions opts;
  opts.warmup = a.warmup;
  opts.iters = a.iters;
  opts.inference = cfg.inference;
  std::cerr << "bench " << describe(cfg.model) << " at " << a.size << "x" << a.size << "\n";
  const TimingReport r = time_stages(model, a.size, a.size, opts);
  emit_report(r, a.report, a.json ? ReportFormat::json : ReportFormat::csv);
  std::cout << format_report(r, ReportFormat::csv);
  char buf[64];
  std::snprintf(buf, sizeof buf, "fps %.3f\n", r.fps);
  std::cout << buf << std::flush;
  return kExitOk;
}

struct SynthArgs {
  std::string out;
  SynthOptions opts;
};

int run_synth(const SynthArgs& a) {
  synth_generate(a.out, a.opts);
  std::cerr << "wrote " << a.opts.count << " samples to "
            << (fs::path(a.out) / a.opts.split).string() << "\n";
  return kExitOk;
}

}  // namespace

int dispatch(int argc, const char* const* argv) {
  CLI::App app{"Hierarchical plant and leaf panoptic segmentation", "hps"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model on <data>/<train_split>");
  t->add_option("--config", train.config, "Run config file")->required();
  t->add_option("--data", train.data, "Dataset root holding the split directories")->required();
  t->add_option("--out", train.out, "Output directory for log, config and checkpoint")->required();

  InferArgs inf;
  auto* i = app.add_subcommand("infer", "Predict panoptic maps for a directory of images");
  i->add_option("--checkpoint", inf.checkpoint, "Checkpoint written by train")->required();
  i->add_option("--images", inf.images, "Image directory, or a split directory with images/")
      ->required();
  i->add_option("--out", inf.out, "Prediction directory")->required();
  i->add_option("--workers", inf.workers, "Parallel images")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score predictions against a ground-truth split");
  e->add_option("--pred", ev.pred, "Prediction directory")->required();
  e->add_option("--gt", ev.gt, "Ground-truth split directory")->required();
  e->add_option("--report", ev.report, "Metric CSV; tallies go to <stem>_tally.csv")->required();
  e->add_option("--workers", ev.workers, "Parallel images")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Time backbone, head and postprocess on one frame");
  b->add_option("--config", bench.config, "Run config file")->required();
  b->add_option("--size", bench.size, "Square input size, a multiple of 32")->capture_default_str();
  b->add_option("--warmup", bench.warmup, "Discarded iterations")->capture_default_str();
  b->add_option("--iters", bench.iters, "Timed iterations")->capture_default_str();
  b->add_option("--report", bench.report, "Timing report path")->required();
  b->add_flag("--json", bench.json, "Write the report as JSON instead of CSV");

  SynthArgs syn;
  auto* s = app.add_subcommand("synth", "Generate a synthetic labeled split");
  s->add_option("--out", syn.out, "Dataset root")->required();
  s->add_option("--count", syn.opts.count, "Images")->capture_default_str();
  s->add_option("--size", syn.opts.size, "Square size, a multiple of 32")->capture_default_str();
  s->add_option("--seed", syn.opts.seed, "Base seed")->capture_default_str();
  s->add_option("--split", syn.opts.split, "Split directory name")->capture_default_str();
  s->add_option("--max-leaves", syn.opts.max_leaves, "Leaf cap per image")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err, std::cout, std::cerr);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err, std::cout, std::cerr);
  } catch (const CLI::ParseError& err) {
    app.exit(err, std::cerr, std::cerr);
    std::cerr << app.help();
    return kExitUsage;
  }

  try {
    if (*t) return run_train(train);
    if (*i) return run_infer(inf);
    if (*e) return run_eval(ev);
    if (*b) return run_bench(bench);
    if (*s) return run_synth(syn);
  } catch (const ConfigError& err) {
    std::cerr << "config error: " << err.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& err) {
    std::cerr << "numeric error: " << err.what() << "\n";
    return kExitNumeric;
  } catch (const DataError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitData;
  } catch (const ShapeError& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "data error: " << err.what() << "\n";
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace hps
