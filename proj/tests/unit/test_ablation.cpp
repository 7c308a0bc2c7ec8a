#include <map>

#include "doctest.h"
#include "pivit/ablation.hpp"
#include "pivit/error.hpp"

using namespace pivit;

namespace {

trainer::TrainConfig tiny() {
  trainer::TrainConfig c;
  c.model.d_v = 8;
  c.model.heads = 2;
  c.model.layers = 3;
  c.sim3d_layers = {3};
  c.sim3d.d_s = 8;
  c.optim.epochs = 1;
  return c;
}

}  // namespace

TEST_CASE("every axis fills its grid") {
  data::SyntheticSpec spec;
  spec.clips_per_class = 3;
  auto [train, hold] = trainer::split_holdout(data::generate_synthetic(spec), 1);
  sim3d::ReferenceProviderConfig pc;
  pc.d_s = 8;
  const sim3d::ReferenceProvider provider(pc);
  ablation::Inputs in;
  in.base = tiny();
  in.train = &train;
  in.holdout = &hold;
  in.provider = &provider;

  const std::map<std::string, std::pair<std::size_t, std::size_t>> shape = {
      {"head", {2, 3}},           {"kd", {6, 1}},          {"placement-3dsim", {3, 5}},
      {"map-variant", {3, 1}},    {"3dsim-classifier", {2, 2}}, {"placement-2dsim", {1, 5}}};
  REQUIRE(ablation::axis_names().size() == 6);
  for (const auto& axis : ablation::axis_names()) {
    const auto t = ablation::run(axis, in);
    INFO(axis);
    CHECK(t.complete());
    CHECK(t.rows.size() == shape.at(axis).first);
    CHECK(t.columns.size() == shape.at(axis).second);
    CHECK(t.to_json()["cells"].size() == t.rows.size());
    CHECK(t.to_text().find(t.title) == 0);
  }
  CHECK_THROWS_AS(ablation::run("depth", in), ConfigError);
}

TEST_CASE("table completeness") {
  ablation::Table t;
  t.rows = {"a"};
  t.columns = {"x"};
  t.cells = {{""}};
  CHECK_FALSE(t.complete());
  t.cells = {{"50.0"}};
  CHECK(t.complete());
}
