#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "oracles.hpp"
#include "pivit/error.hpp"
#include "pivit/evalkit.hpp"

using namespace pivit;
using namespace pivit::evalkit;

namespace {

std::vector<Prediction> random_predictions(Rng& rng, std::size_t n, std::size_t classes, bool balanced) {
  std::vector<Prediction> out;
  for (std::size_t i = 0; i < n; ++i) {
    Prediction p{"s" + std::to_string(i), balanced ? i % classes : rng.index(classes), {}};
    for (std::size_t c = 0; c < classes; ++c) p.logits.push_back(rng.normal());
    if (rng.uniform() < 0.5) p.logits[p.label] += 2.0;
    out.push_back(p);
  }
  return out;
}

std::vector<std::vector<double>> split(const std::vector<Prediction>& ps, std::vector<std::size_t>* labels) {
  std::vector<std::vector<double>> logits;
  for (const auto& p : ps) {
    labels->push_back(p.label);
    logits.push_back(p.logits);
  }
  return logits;
}

}  // namespace

TEST_CASE("report matches an independent recount") {
  Rng rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const auto preds = random_predictions(rng, 40, 5, false);
    std::vector<std::size_t> labels;
    const auto logits = split(preds, &labels);
    const auto want = oracle::recount(labels, logits, 5);
    const auto got = report_from_predictions(preds, 5);
    CHECK(got.top1 == doctest::Approx(want.top1).epsilon(1e-14));
    CHECK(got.mca == doctest::Approx(want.mca).epsilon(1e-14));
    CHECK(got.confusion == want.confusion);
  }
}

TEST_CASE("balanced splits have top1 equal to mCA") {
  Rng rng(2);
  for (int trial = 0; trial < 30; ++trial) {
    const auto r = report_from_predictions(random_predictions(rng, 48, 4, true), 4);
    CHECK(r.top1 == doctest::Approx(r.mca).epsilon(1e-14));
  }
}

TEST_CASE("absent classes are excluded from mCA") {
  std::vector<Prediction> p{{"a", 0, {1, 0, 0}}, {"b", 0, {0, 1, 0}}, {"c", 2, {0, 0, 1}}};
  const auto r = report_from_predictions(p, 3);
  CHECK(r.absent_classes == std::vector<std::size_t>{1});
  CHECK(std::isnan(r.per_class_recall[1]));
  CHECK(r.mca == doctest::Approx(0.75));
  CHECK(r.top1 == doctest::Approx(2.0 / 3.0));
  CHECK(r.to_json()["absent_classes"].size() == 1);
  CHECK_THROWS_AS(report_from_predictions({{"x", 3, {1, 0, 0}}}, 3), ContractError);
}

TEST_CASE("ties resolve to the first maximum") {
  CHECK(Prediction{"t", 0, {1.0, 3.0, 3.0}}.predicted() == 1);
}

TEST_CASE("compare_runs") {
  std::vector<Prediction> a{{"1", 0, {0, 1}}, {"2", 1, {0, 1}}, {"3", 0, {0, 1}}};
  std::vector<Prediction> b{{"1", 0, {1, 0}}, {"2", 1, {0, 1}}, {"3", 0, {1, 0}}};
  const auto cmp = compare_runs(report_from_predictions(a, 2), report_from_predictions(b, 2));
  REQUIRE(cmp.deltas.size() == 2);
  CHECK(cmp.deltas[0].cls == 0);
  CHECK(cmp.deltas[0].delta == 1.0);
  CHECK(cmp.pairs[0].from == 0);
  CHECK(cmp.pairs[0].to == 1);
  CHECK(cmp.pairs[0].improvement == 2);
  CHECK_THROWS_AS(compare_runs(report_from_predictions(a, 2), report_from_predictions({{"x", 0, {1, 0, 0}}}, 3)),
                  ContractError);
}

TEST_CASE("auc") {
  CHECK(binary_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == 1.0);
  CHECK(binary_auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}) == 0.0);
  CHECK(binary_auc({0.5, 0.5}, {0, 1}) == 0.5);
  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    std::vector<double> s;
    std::vector<int> l;
    for (int i = 0; i < 25; ++i) {
      s.push_back(std::round(rng.normal() * 3.0) / 3.0);
      l.push_back(i % 3 == 0 || rng.uniform() < 0.3);
    }
    CHECK(binary_auc(s, l) == doctest::Approx(oracle::pairwise_auc(s, l)).epsilon(1e-14));
  }
  CHECK_THROWS_AS(binary_auc({0.1, 0.2}, {1, 1}), ContractError);
}

TEST_CASE("pairwise distance") {
  const Tensor t({3, 2}, std::vector<double>{0, 0, 3, 4, 0, 0});
  CHECK(mean_pairwise_distance(t, {0, 1}) == 5.0);
  CHECK(mean_pairwise_distance(t, {0, 1, 2}) == doctest::Approx(10.0 / 3.0));
  CHECK(mean_pairwise_distance(t, {1}) == 0.0);
}

TEST_CASE("distance profile has one entry per layer") {
  backbone::PatchConfig c;
  c.d_v = 16;
  c.heads = 2;
  c.layers = 3;
  backbone::VideoTransformer m(c, 1);
  data::SyntheticSpec spec;
  spec.clips_per_class = 1;
  const auto profile = joint_token_distance_profile(m, data::generate_synthetic(spec));
  REQUIRE(profile.size() == 3);
  for (double v : profile) CHECK(v > 0.0);
}

TEST_CASE("predictions round-trip and parallel prediction keeps order") {
  backbone::PatchConfig c;
  c.d_v = 16;
  c.heads = 2;
  c.layers = 1;
  backbone::VideoTransformer m(c, 4);
  data::SyntheticSpec spec;
  spec.clips_per_class = 2;
  const auto samples = data::generate_synthetic(spec);
  const auto one = predict(m, samples, 1), many = predict(m, samples, 3);
  REQUIRE(one.size() == samples.size());
  for (std::size_t i = 0; i < one.size(); ++i) {
    CHECK(one[i].id == samples[i].clip.id);
    CHECK(one[i].logits == many[i].logits);
  }
  const auto path = std::filesystem::temp_directory_path() / "pivit_test_predictions.jsonl";
  write_predictions(path, one);
  const auto back = read_predictions(path);
  REQUIRE(back.size() == one.size());
  for (std::size_t i = 0; i < one.size(); ++i) CHECK(back[i].logits == one[i].logits);
}
