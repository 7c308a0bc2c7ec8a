#include "pivit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "parallel.hpp"
#include "pivit/error.hpp"
#include "pivit/skelmap.hpp"

namespace pivit::evalkit {

using nlohmann::json;

std::size_t Prediction::predicted() const {
  if (logits.empty()) throw ContractError("prediction '" + id + "' has no logits");
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

EvalReport report_from_predictions(const std::vector<Prediction>& predictions, std::size_t classes) {
  EvalReport r;
  r.classes = classes;
  r.samples = predictions.size();
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (const auto& p : predictions) {
    if (p.label >= classes || p.logits.size() != classes)
      throw ContractError("prediction '" + p.id + "' does not match " + std::to_string(classes) + " classes");
    const std::size_t k = p.predicted();
    ++r.confusion[p.label][k];
    correct += k == p.label;
  }
  r.top1 = predictions.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(predictions.size());
  r.per_class_recall.assign(classes, std::numeric_limits<double>::quiet_NaN());
  double sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t n = std::accumulate(r.confusion[c].begin(), r.confusion[c].end(), std::size_t{0});
    if (n == 0) {
      r.absent_classes.push_back(c);
      continue;
    }
    r.per_class_recall[c] = static_cast<double>(r.confusion[c][c]) / static_cast<double>(n);
    sum += r.per_class_recall[c];
    ++present;
  }
  r.mca = present == 0 ? 0.0 : sum / static_cast<double>(present);
  return r;
}

json EvalReport::to_json() const {
  json recall = json::array();
  for (double v : per_class_recall) recall.push_back(std::isnan(v) ? json(nullptr) : json(v));
  return {{"classes", classes},   {"samples", samples},         {"top1", top1},
          {"mca", mca},           {"confusion", confusion},     {"per_class_recall", recall},
          {"absent_classes", absent_classes}};
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "samples " << samples << "  top1 " << top1 << "  mCA " << mca << "\n";
  if (!absent_classes.empty()) {
    out << "classes absent from split (excluded from mCA):";
    for (auto c : absent_classes) out << ' ' << c;
    out << "\n";
  }
  out << "\n" << std::setw(6) << "class" << std::setw(9) << "recall" << "  confusion (predicted ->)\n";
  for (std::size_t c = 0; c < classes; ++c) {
    out << std::setw(6) << c;
    if (std::isnan(per_class_recall[c]))
      out << std::setw(9) << "-";
    else
      out << std::setw(9) << per_class_recall[c];
    out << " ";
    for (auto v : confusion[c]) out << std::setw(6) << v;
    out << "\n";
  }
  return out.str();
}

std::vector<Prediction> predict(const backbone::VideoTransformer& model, const std::vector<data::LabeledSample>& samples,
                                std::size_t workers) {
  std::vector<Prediction> out(samples.size());
  detail::parallel_for(samples.size(), workers, [&](std::size_t i) {
    const auto& clip = samples[i].clip;
    out[i] = {clip.id, clip.label, model.logits(clip)};
  });
  return out;
}

EvalReport evaluate(const backbone::VideoTransformer& model, const std::vector<data::LabeledSample>& samples,
                    std::size_t workers) {
  return report_from_predictions(predict(model, samples, workers), model.config().classes);
}

Comparison compare_runs(const EvalReport& a, const EvalReport& b) {
  if (a.classes != b.classes) throw ContractError("compare_runs: reports have different class counts");
  Comparison c;
  for (std::size_t k = 0; k < a.classes; ++k) {
    const double ra = a.per_class_recall[k], rb = b.per_class_recall[k];
    if (std::isnan(ra) != std::isnan(rb)) throw ContractError("compare_runs: reports cover different class sets");
    if (!std::isnan(ra)) c.deltas.push_back({k, rb - ra});
  }
  std::stable_sort(c.deltas.begin(), c.deltas.end(),
                   [](const ClassDelta& x, const ClassDelta& y) { return x.delta > y.delta; });
  for (std::size_t i = 0; i < a.classes; ++i)
    for (std::size_t j = 0; j < a.classes; ++j)
      if (i != j)
        c.pairs.push_back({i, j, static_cast<long long>(a.confusion[i][j]) - static_cast<long long>(b.confusion[i][j])});
  std::stable_sort(c.pairs.begin(), c.pairs.end(),
                   [](const PairImprovement& x, const PairImprovement& y) { return x.improvement > y.improvement; });
  return c;
}

json Comparison::to_json(std::size_t top) const {
  json d = json::array(), p = json::array();
  for (const auto& x : deltas) d.push_back({{"class", x.cls}, {"delta", x.delta}});
  for (std::size_t i = 0; i < std::min(top, pairs.size()); ++i)
    p.push_back({{"from", pairs[i].from}, {"to", pairs[i].to}, {"improvement", pairs[i].improvement}});
  return {{"per_class_delta", d}, {"top_pairs", p}};
}

std::string Comparison::to_text(std::size_t top) const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "Top classes improved\n" << std::setw(6) << "class" << std::setw(10) << "delta" << "\n";
  for (std::size_t i = 0; i < std::min(top, deltas.size()); ++i)
    out << std::setw(6) << deltas[i].cls << std::setw(10) << deltas[i].delta << "\n";
  out << "\nTop class pairs improved\n" << std::setw(6) << "true" << std::setw(6) << "pred" << std::setw(8) << "fixed"
      << "\n";
  for (std::size_t i = 0; i < std::min(top, pairs.size()); ++i)
    out << std::setw(6) << pairs[i].from << std::setw(6) << pairs[i].to << std::setw(8) << pairs[i].improvement << "\n";
  return out.str();
}

double mean_pairwise_distance(const Tensor& tokens, const std::vector<std::size_t>& rows) {
  if (rows.size() < 2) return 0.0;
  const std::size_t D = tokens.cols();
  double sum = 0.0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < rows.size(); ++a)
    for (std::size_t b = a + 1; b < rows.size(); ++b, ++pairs) {
      double sq = 0.0;
      for (std::size_t c = 0; c < D; ++c) {
        const double d = tokens(rows[a], c) - tokens(rows[b], c);
        sq += d * d;
      }
      sum += std::sqrt(sq);
    }
  return sum / static_cast<double>(pairs);
}

std::vector<double> joint_token_distance_profile(const backbone::VideoTransformer& model,
                                                 const std::vector<data::LabeledSample>& samples) {
  const auto& cfg = model.config();
  std::set<std::size_t> all;
  for (std::size_t l = 1; l <= cfg.layers; ++l) all.insert(l);
  std::vector<double> sum(cfg.layers, 0.0);
  std::size_t used = 0;
  for (const auto& s : samples) {
    if (!s.pose2d) throw DataError("sample '" + s.clip.id + "' has no 2D pose for the distance profile");
    const auto map = skelmap::build_token_map(*s.pose2d, cfg);
    std::vector<std::size_t> rows;
    for (std::size_t t : map.joint_tokens()) rows.push_back(1 + t);
    if (rows.size() < 2) continue;
    const auto out = model.forward_with_taps(s.clip, all);
    for (std::size_t l = 1; l <= cfg.layers; ++l) sum[l - 1] += mean_pairwise_distance(out.taps.at(l).tokens, rows);
    ++used;
  }
  if (used == 0) throw DataError("no sample has two or more joint-bearing tokens");
  for (double& v : sum) v /= static_cast<double>(used);
  return sum;
}

double binary_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ContractError("binary_auc: size mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);  // average 1-based rank of the tie block
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        pos_rank_sum += rank;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw ContractError("binary_auc needs both positive and negative labels");
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

void write_predictions(const std::filesystem::path& path, const std::vector<Prediction>& predictions) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  for (const auto& p : predictions) out << json{{"id", p.id}, {"label", p.label}, {"logits", p.logits}}.dump() << "\n";
}

std::vector<Prediction> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read '" + path.string() + "'");
  std::vector<Prediction> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("id").get<std::string>(), j.at("label").get<std::size_t>(),
                     j.at("logits").get<std::vector<double>>()});
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ": " + e.what(), n);
    }
  }
  return out;
}

}  // namespace pivit::evalkit
