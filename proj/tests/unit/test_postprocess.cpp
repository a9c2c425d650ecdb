#include "doctest.h"
#include "hps/dataset.hpp"
#include "hps/postprocess.hpp"

using namespace hps;

namespace {

Tensor<float> mask_rows(std::size_t n, const std::vector<std::vector<float>>& rows) {
  Tensor<float> t({rows.size(), n});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t p = 0; p < n; ++p) t.at(r, p) = rows[r][p];
  }
  return t;
}

std::vector<float> ranged(std::size_t n, std::size_t from, std::size_t to, float v) {
  std::vector<float> m(n, 0.0f);
  for (std::size_t i = from; i < to; ++i) m[i] = v;
  return m;
}

}  // namespace

TEST_CASE("inference config") {
  InferenceConfig c;
  CHECK(c.mask_confidence_threshold == 0.5);
  CHECK(c.overlap_threshold == 0.8);
  c.overlap_threshold = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("filter_queries") {
  InferenceConfig cfg;
  // columns: soil, crop, weed, no-object
  Tensor<double> p({3, 4}, {0.9, 0.05, 0.0, 0.05,
                            0.1, 0.45, 0.1, 0.35,
                            0.05, 0.0, 0.05, 0.9});
  auto kept = filter_queries(p, cfg);
  REQUIRE(kept.size() == 1);
  CHECK(kept[0].query == 0);
  CHECK(kept[0].label == 0);
  CHECK(kept[0].score == doctest::Approx(0.9));

  Tensor<double> none({2, 2}, {0.1, 0.9, 0.4, 0.6});
  CHECK(filter_queries(none, cfg).empty());

  SUBCASE("raising the threshold never keeps more queries") {
    Rng rng(1);
    Tensor<double> q({30, 4});
    for (std::size_t i = 0; i < 30; ++i) {
      double s = 0;
      for (std::size_t c = 0; c < 4; ++c) s += q.at(i, c) = rng.uniform();
      for (std::size_t c = 0; c < 4; ++c) q.at(i, c) /= s;
    }
    std::size_t prev = 31;
    for (double t = 0.0; t <= 1.0; t += 0.05) {
      InferenceConfig c;
      c.mask_confidence_threshold = t;
      auto k = filter_queries(q, c).size();
      CHECK(k <= prev);
      prev = k;
    }
  }
}

TEST_CASE("assemble examples") {
  InferenceConfig cfg;
  const std::size_t n = 12;

  SUBCASE("one confident query covers the image") {
    auto m = panoptic_assemble({{0, 1, 0.9}}, mask_rows(n, {std::vector<float>(n, 0.9f)}),
                               3, 4, Stream::plant, cfg);
    REQUIRE(m.segments.size() == 1);
    CHECK(m.segments[0].area == n);
    CHECK(m.segments[0].id == 1);
    for (auto v : m.instance) CHECK(v == 1);
  }

  SUBCASE("an occluded query is dropped") {
    // A: 0.9 on pixels 1..10, score 0.9. B: 0.8 on pixels 6..10, score 0.6.
    auto probs = mask_rows(n, {ranged(n, 1, 11, 0.9f), ranged(n, 6, 11, 0.8f)});
    auto m = panoptic_assemble({{0, 1, 0.9}, {1, 1, 0.6}}, probs, 1, n, Stream::plant, cfg);
    REQUIRE(m.segments.size() == 1);
    CHECK(m.segments[0].score == 0.9);
    CHECK(m.segments[0].area == 10);
    CHECK(m.label[0] == StreamMap::kNone);
    CHECK(m.label[11] == StreamMap::kNone);
  }

  SUBCASE("disjoint queries both survive, ids by score") {
    auto probs = mask_rows(n, {ranged(n, 0, 4, 0.9f), ranged(n, 6, 12, 0.9f)});
    auto m = panoptic_assemble({{2, 0, 0.7}, {5, 0, 0.95}}, probs, 1, n, Stream::leaf, cfg);
    REQUIRE(m.segments.size() == 2);
    CHECK(m.segments[0].score == 0.95);
    CHECK(m.segments[0].id == 1);
    CHECK(m.instance[7] == 1);
    CHECK(m.instance[1] == 2);
  }

  SUBCASE("stuff classes merge, soil keeps id zero") {
    auto probs = mask_rows(n, {ranged(n, 0, 3, 0.9f), ranged(n, 3, 6, 0.9f),
                               ranged(n, 6, 9, 0.9f), ranged(n, 9, 12, 0.9f)});
    auto m = panoptic_assemble({{0, 2, 0.8}, {1, 2, 0.9}, {2, 1, 0.85}, {3, 0, 0.7}},
                               probs, 1, n, Stream::plant, cfg);
    REQUIRE(m.segments.size() == 3);
    CHECK(m.segments[0].label == 2);
    CHECK(m.segments[0].area == 6);
    CHECK(m.segments[0].id == 1);
    CHECK(m.segments[1].label == 1);
    CHECK(m.segments[1].id == 2);
    CHECK(m.segments[2].label == 0);
    CHECK(m.segments[2].id == 0);
    CHECK(m.instance[10] == 0);
    CHECK(m.label[10] == 0);
  }

  SUBCASE("equal weighted scores go to the higher score, then the lower index") {
    auto probs = mask_rows(n, {std::vector<float>(n, 0.75f), std::vector<float>(n, 0.5f),
                               std::vector<float>(n, 0.75f)});
    // 0.5 * 0.75 == 0.75 * 0.5 exactly: query 1 has the higher score.
    auto m = panoptic_assemble({{0, 0, 0.5}, {1, 0, 0.75}, {2, 0, 0.5}}, probs, 1, n,
                               Stream::leaf, cfg);
    REQUIRE(m.segments.size() == 1);
    CHECK(m.segments[0].score == 0.75);
    CHECK(m.segments[0].area == n);
    auto t = panoptic_assemble({{0, 0, 0.5}, {2, 0, 0.5}},
                               mask_rows(n, {std::vector<float>(n, 0.8f), std::vector<float>(n, 0.8f)}),
                               1, n, Stream::leaf, cfg);
    REQUIRE(t.segments.size() == 1);
    CHECK(t.instance[0] == 1);
  }

  SUBCASE("empty input") {
    auto m = panoptic_assemble({}, Tensor<float>({0, n}), 1, n, Stream::plant, cfg);
    CHECK(m.segments.empty());
    auto h = hierarchical_output(m, panoptic_assemble({}, Tensor<float>({0, n}), 1, n, Stream::leaf, cfg));
    for (auto s : h.semantic) CHECK(s == kSoil);
  }

  CHECK_THROWS_AS(panoptic_assemble({{0, 0, 0.9}}, Tensor<float>({1, 5}), 1, n,
                                    Stream::plant, cfg),
                  ShapeError);
}

TEST_CASE("segment table matches the maps") {
  Rng rng(9);
  InferenceConfig cfg;
  const std::size_t h = 8, w = 8, n = h * w;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<KeptQuery> kept;
    std::vector<std::vector<float>> rows;
    const int k = rng.uniform_int(0, 6);
    for (int i = 0; i < k; ++i) {
      kept.push_back({static_cast<std::size_t>(i), rng.uniform_int(0, 2), rng.uniform(0.5, 1.0)});
      std::vector<float> r(n);
      const double cx = rng.uniform(0, 8), cy = rng.uniform(0, 8), rad = rng.uniform(1, 4);
      for (std::size_t p = 0; p < n; ++p) {
        const double dx = static_cast<double>(p % w) - cx, dy = static_cast<double>(p / w) - cy;
        r[p] = static_cast<float>(1.0 / (1.0 + std::exp(dx * dx + dy * dy - rad * rad)));
      }
      rows.push_back(r);
    }
    Tensor<float> probs = k ? mask_rows(n, rows) : Tensor<float>({0, n});
    StreamMap m = panoptic_assemble(kept, probs, h, w, Stream::plant, cfg);
    StreamMap again = panoptic_assemble(kept, probs, h, w, Stream::plant, cfg);
    CHECK(m.instance == again.instance);
    std::vector<std::uint16_t> ids;
    for (const auto& s : m.segments) {
      std::size_t area = 0;
      for (std::size_t p = 0; p < n; ++p) {
        area += m.label[p] == s.label && m.instance[p] == s.id;
      }
      CHECK(area == s.area);
      if (s.id) ids.push_back(s.id);
    }
    std::sort(ids.begin(), ids.end());
    for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == i + 1);
    for (std::size_t p = 0; p < n; ++p) {
      if (m.instance[p]) CHECK((m.label[p] == kCrop || m.label[p] == kWeed));
    }
  }
}

TEST_CASE("hierarchical output") {
  StreamMap plant, leaf;
  plant.height = leaf.height = 1;
  plant.width = leaf.width = 4;
  plant.label = {StreamMap::kNone, 1, 1, 2};
  plant.instance = {0, 1, 1, 2};
  plant.segments = {{1, 0, 1, 0.9, 2}, {2, 0, 2, 0.8, 1}};
  leaf.label = {0, 0, StreamMap::kNone, StreamMap::kNone};
  leaf.instance = {1, 1, 0, 0};
  leaf.segments = {{1, 1, 0, 0.7, 2}};
  PanopticMap m = hierarchical_output(plant, leaf);
  CHECK(m.semantic == std::vector<std::uint8_t>{0, 1, 1, 2});
  CHECK(m.plant_instance == plant.instance);
  // A leaf reaching past its crop stays as predicted.
  CHECK(m.leaf_instance == leaf.instance);
  CHECK(m.segments.size() == 3);
  leaf.width = 2;
  CHECK_THROWS_AS(hierarchical_output(plant, leaf), ShapeError);
}

TEST_CASE("pipeline produces a full-resolution map") {
  ModelConfig c = ModelConfig::desk();
  c.layers_per_level = 1;
  Model<float> m(c, 3);
  Tensor<float> img({3, 64, 64});
  Rng rng(4);
  for (auto& v : img.values()) v = static_cast<float>(rng.normal());
  InferenceConfig cfg;
  cfg.mask_confidence_threshold = 0.0;
  cfg.overlap_threshold = 0.0;
  PanopticMap a = infer(m, img, cfg);
  CHECK(a.height == 64);
  CHECK(a.semantic.size() == 64 * 64);
  PanopticMap b = infer(m, img, cfg);
  CHECK(a.semantic == b.semantic);
  CHECK(a.leaf_instance == b.leaf_instance);
  cfg.overlap_threshold = 2.0;
  CHECK_THROWS_AS(infer(m, img, cfg), ConfigError);
}

TEST_CASE("segment count is not monotone in the confidence threshold") {
  // A (score 0.55, prob 1.0) outbids B and C (score 0.6, prob 0.9) on every
  // pixel, so only A survives at 0.5. At 0.58 A is filtered and B and C
  // both appear.
  const std::size_t n = 8;
  Tensor<double> cls({3, 3}, {0.55, 0.0, 0.45, 0.6, 0.0, 0.4, 0.6, 0.0, 0.4});
  Tensor<float> masks = mask_rows(n, {ranged(n, 0, 8, 1.0f), ranged(n, 0, 4, 0.9f),
                                      ranged(n, 4, 8, 0.9f)});
  auto segments_at = [&](double t) {
    InferenceConfig cfg;
    cfg.mask_confidence_threshold = t;
    auto kept = filter_queries(cls, cfg);
    Tensor<float> probs({kept.size(), n});
    for (std::size_t r = 0; r < kept.size(); ++r) {
      for (std::size_t p = 0; p < n; ++p) probs.at(r, p) = masks.at(kept[r].query, p);
    }
    return panoptic_assemble(kept, probs, 1, n, Stream::leaf, cfg).segments.size();
  };
  CHECK(segments_at(0.5) == 1);
  CHECK(segments_at(0.58) == 2);
}
