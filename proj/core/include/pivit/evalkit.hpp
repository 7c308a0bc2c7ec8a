#pragma once

#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "pivit/backbone.hpp"
#include "pivit/data.hpp"

namespace pivit::evalkit {

struct Prediction {
  std::string id;
  std::size_t label = 0;
  std::vector<double> logits;

  /// First index of the maximum logit.
  std::size_t predicted() const;
};

struct EvalReport {
  std::size_t classes = 0;
  std::size_t samples = 0;
  double top1 = 0.0;
  /// Mean recall over classes present in the split.
  double mca = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_recall;             // NaN for absent classes
  std::vector<std::size_t> absent_classes;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

EvalReport report_from_predictions(const std::vector<Prediction>& predictions, std::size_t classes);

/// Backbone-only inference; `workers` > 1 splits samples across threads,
/// results stay in input order.
std::vector<Prediction> predict(const backbone::VideoTransformer& model, const std::vector<data::LabeledSample>& samples,
                                std::size_t workers = 1);
EvalReport evaluate(const backbone::VideoTransformer& model, const std::vector<data::LabeledSample>& samples,
                    std::size_t workers = 1);

struct ClassDelta {
  std::size_t cls = 0;
  double delta = 0.0;  // recall_b - recall_a
};

struct PairImprovement {
  std::size_t from = 0;  // true class
  std::size_t to = 0;    // predicted class
  long long improvement = 0;  // confusions in A minus confusions in B
};

struct Comparison {
  std::vector<ClassDelta> deltas;       // sorted by delta, descending
  std::vector<PairImprovement> pairs;   // off-diagonal pairs, sorted descending
  nlohmann::json to_json(std::size_t top = 5) const;
  std::string to_text(std::size_t top = 5) const;
};

/// Throws ContractError unless both reports share a class set.
Comparison compare_runs(const EvalReport& a, const EvalReport& b);

/// Per layer 1..L: mean Euclidean distance over all pairs of tokens that
/// hold at least one joint, averaged over samples with two or more such
/// tokens. Uses post-block token features.
std::vector<double> joint_token_distance_profile(const backbone::VideoTransformer& model,
                                                 const std::vector<data::LabeledSample>& samples);
/// Mean pairwise distance among the given rows of one token matrix.
double mean_pairwise_distance(const Tensor& tokens, const std::vector<std::size_t>& rows);

/// Area under the ROC curve; ties count one half.
double binary_auc(const std::vector<double>& scores, const std::vector<int>& labels);

void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& predictions);
std::vector<Prediction> read_predictions(const std::filesystem::path& path);

}  // namespace pivit::evalkit
