#include <cmath>
#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "doctest.h"
#include "hps/errors.hpp"
#include "hps/metrics.hpp"
#include "hps/synth.hpp"
#include "pq_oracle.hpp"

using namespace hps;

namespace {

Mask range_mask(std::size_t n, std::size_t from, std::size_t to) {
  Mask m(n, 0);
  for (std::size_t i = from; i < to; ++i) m[i] = 1;
  return m;
}

}  // namespace

TEST_CASE("iou examples") {
  Mask a = range_mask(200, 0, 100);
  CHECK(iou(a, a) == 1.0);
  // pred 50 px, GT 100 px, 40 overlapping.
  Mask pred = range_mask(200, 60, 110);
  CHECK(iou(pred, a) == doctest::Approx(40.0 / 110.0));
  CHECK(iou(range_mask(200, 0, 10), range_mask(200, 10, 20)) == 0.0);
  CHECK(iou(Mask(9, 0), Mask(9, 0)) == 1.0);
  CHECK(iou(Mask(9, 0), range_mask(9, 0, 1)) == 0.0);
  CHECK_THROWS_AS(iou(Mask(3, 0), Mask(4, 0)), ShapeError);
}

TEST_CASE("pq_class examples") {
  const std::size_t n = 300;
  Mask gt = range_mask(n, 0, 100);
  CHECK(pq_class({gt}, {gt}).pq == 100.0);
  auto r = pq_class({range_mask(n, 20, 120)}, {gt});
  CHECK(r.pq == doctest::Approx(100.0 * 80.0 / 120.0));
  CHECK(r.matches.tp.size() == 1);
  auto s = pq_class({range_mask(n, 40, 140)}, {gt});
  CHECK(s.pq == 0.0);
  CHECK(s.matches.fp.size() == 1);
  CHECK(s.matches.fn.size() == 1);
  CHECK(pq_class({}, {}).pq == 100.0);
  CHECK(pq_class({}, {gt}).pq == 0.0);
  CHECK(pq_class({gt}, {}).pq == 0.0);
  CHECK_THROWS_AS(pq_class({range_mask(n, 0, 10), range_mask(n, 5, 15)}, {gt}), DataError);
}

TEST_CASE("pq_class equals the exhaustive oracle") {
  Rng rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 8));
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 8));
    auto pred = testing::random_instances(rng, h, w, 4);
    auto gt = testing::random_instances(rng, h, w, 4);
    auto got = pq_class(pred, gt);
    auto want = testing::pq_oracle(pred, gt);
    CHECK(got.pq == want.pq);
    CHECK(got.matches.tp.size() == want.tp);
    for (const auto& pair : got.matches.tp) {
      CHECK(want.gt_to_pred[pair.gt - 1u] == static_cast<int>(pair.pred) - 1);
    }
    CHECK(got.pq >= 0.0);
    CHECK(got.pq <= 100.0);
  }
}

TEST_CASE("pq is invariant under instance relabeling") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto pred = testing::random_instances(rng, 6, 6, 4);
    auto gt = testing::random_instances(rng, 6, 6, 4);
    auto base = pq_class(pred, gt).pq;
    std::reverse(pred.begin(), pred.end());
    rng.shuffle(gt);
    CHECK(pq_class(pred, gt).pq == doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("ignore rule") {
  // 12 x 1 strip: GT 1 (visible) on 0..5, GT 2 (ignored) on 6..11.
  std::vector<std::uint16_t> gt = {1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2};
  Mask region = {0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1};
  // Prediction 7 has 3 of 5 pixels (60%) inside the region.
  std::vector<std::uint16_t> pred = {1, 1, 1, 1, 7, 7, 7, 7, 7, 0, 0, 0};
  auto r = apply_ignore_rule(gt, pred, region);
  CHECK(r.ignored_gt == std::vector<std::uint16_t>{2});
  CHECK(r.removed_pred == std::vector<std::uint16_t>{7});
  auto m = match_instances(r.pred, r.gt);
  CHECK(m.fp.empty());
  CHECK(m.fn.empty());
  CHECK(m.tp.size() == 1);

  auto id = apply_ignore_rule(gt, pred, {});
  CHECK(id.gt == gt);
  CHECK(id.pred == pred);
}

TEST_CASE("ignore region from partial labels and visibility") {
  HierarchicalSample s;
  s.height = 1;
  s.width = 5;
  s.semantics = {0, 3, 1, 1, 2};
  s.plant_instances = {0, 4, 5, 5, 6};
  s.leaf_instances = {0, 1, 2, 0, 0};
  CHECK(ignore_region_of(s) == Mask{0, 1, 0, 0, 0});
  s.visibility = {{5, 0.3}, {6, 0.9}};
  CHECK(ignore_region_of(s) == Mask{0, 1, 1, 1, 0});
  s.semantics = {0, 1, 1, 1, 2};
  s.visibility.clear();
  CHECK(ignore_region_of(s).empty());
}

TEST_CASE("aggregate from components") {
  auto a = aggregate_components(71.1, 66.91, 66.58, 99.36);
  CHECK(std::abs(a.pq_dagger - 75.99) <= 0.005 + 1e-9);
  CHECK(std::abs(a.pq - 69.0) <= 0.005 + 1e-9);
  auto b = aggregate_components(70.16, 64.61, 65.94, 99.34);
  CHECK(std::abs(b.pq_dagger - 75.01) <= 0.005 + 1e-9);
  CHECK(std::abs(b.pq - 67.38) <= 0.005 + 1e-9);
  CHECK(aggregate_components(0, 0, 0, 0).pq_dagger == 0.0);
}

TEST_CASE("round half even") {
  CHECK(round_half_even(67.385, 2) == doctest::Approx(67.38));
  CHECK(round_half_even(67.395, 2) == doctest::Approx(67.40));
  CHECK(round_half_even(75.9875, 2) == doctest::Approx(75.99));
  CHECK(round_half_even(0.125, 2) == doctest::Approx(0.12));
  CHECK(round_half_even(-0.125, 2) == doctest::Approx(-0.12));
  CHECK(round_half_even(2.5, 0) == 2.0);
  CHECK(round_half_even(3.5, 0) == 4.0);
}

TEST_CASE("dataset aggregation is shard invariant") {
  std::vector<EvalTally> all;
  for (std::uint64_t seed = 0; seed < 6; ++seed) {
    HierarchicalSample gt = synth_sample(32, seed);
    HierarchicalSample pred = synth_sample(32, seed + 100);
    all.push_back(evaluate_image(gt, pred));
  }
  MetricReport whole = aggregate(all);
  EvalTally left, right;
  for (std::size_t i = 0; i < all.size(); ++i) (i < 2 ? left : right).merge(all[i]);
  MetricReport sharded = aggregate({aggregate({left}).tally, aggregate({right}).tally});
  CHECK(sharded.pq_dagger == doctest::Approx(whole.pq_dagger).epsilon(1e-12));
  CHECK(sharded.tally.crop.tp == whole.tally.crop.tp);
  CHECK(sharded.tally.leaf.fn == whole.tally.leaf.fn);
}

TEST_CASE("ground truth against itself is perfect") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    HierarchicalSample gt = synth_sample(64, seed);
    MetricReport r = aggregate({evaluate_image(gt, gt)});
    CHECK(r.pq_crop == 100.0);
    CHECK(r.pq_leaf == 100.0);
    CHECK(r.iou_weed == 100.0);
    CHECK(r.iou_soil == 100.0);
  }
}

TEST_CASE("report files") {
  const auto dir = std::filesystem::temp_directory_path() /
                   ("hps_metrics_" + std::to_string(::getpid()));
  std::filesystem::create_directories(dir);
  MetricReport r = aggregate_components(70.16, 64.61, 65.94, 99.34);
  write_report_csv(dir / "r.csv", r);
  write_tally_csv(dir / "t.csv", r);
  std::ifstream in(dir / "r.csv");
  std::string text((std::istreambuf_iterator<char>(in)), {});
  CHECK(text ==
        "metric,value\nPQ_dagger,75.01\nPQ,67.38\nPQ_crop,70.16\nPQ_leaf,64.61\n"
        "IoU_weed,65.94\nIoU_soil,99.34\n");
  std::ifstream tin(dir / "t.csv");
  std::string header;
  std::getline(tin, header);
  CHECK(header == "class,tp,fp,fn,iou_sum,intersection,union");
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(write_report_csv(dir / "missing" / "r.csv", r), DataError);
}
