#pragma once

#include <functional>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "pivit/data.hpp"
#include "pivit/sim3d.hpp"
#include "pivit/trainer.hpp"

namespace pivit::ablation {

/// One ablation grid. Every cell holds held-out mCA in percent.
struct Table {
  std::string axis;
  std::string title;
  std::string row_header;
  std::vector<std::string> columns;
  std::vector<std::string> rows;
  std::vector<std::vector<std::string>> cells;  // rows x columns

  bool complete() const;
  nlohmann::json to_json() const;
  std::string to_text() const;
};

struct Inputs {
  trainer::TrainConfig base;
  const std::vector<data::LabeledSample>* train = nullptr;
  const std::vector<data::LabeledSample>* holdout = nullptr;
  const sim3d::SkeletonFeatureProvider* provider = nullptr;
  std::size_t workers = 1;
  std::function<void(const std::string&)> progress;
};

/// head, kd, placement-3dsim, map-variant, 3dsim-classifier, placement-2dsim
const std::vector<std::string>& axis_names();

/// Trains one model per cell from `base` and fills the grid.
Table run(const std::string& axis, const Inputs& in);

/// Held-out mCA of one configuration (trained from scratch).
double train_and_score(const trainer::TrainConfig& cfg, const Inputs& in);

}  // namespace pivit::ablation
