#include "pivit/ablation.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "pivit/error.hpp"
#include "pivit/evalkit.hpp"

namespace pivit::ablation {

using nlohmann::json;
using trainer::KdBaseline;
using trainer::TrainConfig;

namespace {

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
  return buf;
}

TrainConfig only_2d(TrainConfig c) {
  c.sim3d_layers.clear();
  if (c.sim2d_layers.empty()) c.sim2d_layers = {1};
  return c;
}

TrainConfig only_3d(TrainConfig c) {
  c.sim2d_layers.clear();
  if (c.sim3d_layers.empty()) c.sim3d_layers = {c.model.layers};
  return c;
}

TrainConfig baseline(TrainConfig c) {
  c.sim2d_layers.clear();
  c.sim3d_layers.clear();
  c.kd = KdBaseline::None;
  return c;
}

std::vector<std::size_t> unique_layers(std::vector<std::size_t> v) {
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

std::string join(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

}  // namespace

const std::vector<std::string>& axis_names() {
  static const std::vector<std::string> names = {"head",         "kd", "placement-3dsim", "map-variant",
                                                 "3dsim-classifier", "placement-2dsim"};
  return names;
}

bool Table::complete() const {
  if (rows.size() != cells.size()) return false;
  for (const auto& r : cells)
    if (r.size() != columns.size() || std::any_of(r.begin(), r.end(), [](const std::string& s) { return s.empty(); }))
      return false;
  return !rows.empty() && !columns.empty();
}

json Table::to_json() const {
  return {{"axis", axis}, {"title", title}, {"row_header", row_header},
          {"columns", columns}, {"rows", rows}, {"cells", cells}, {"metric", "held-out mCA (%)"}};
}

std::string Table::to_text() const {
  std::vector<std::size_t> width(columns.size() + 1, 0);
  width[0] = row_header.size();
  for (const auto& r : rows) width[0] = std::max(width[0], r.size());
  for (std::size_t c = 0; c < columns.size(); ++c) {
    width[c + 1] = columns[c].size();
    for (const auto& r : cells)
      if (c < r.size()) width[c + 1] = std::max(width[c + 1], r[c].size());
  }
  auto pad = [](const std::string& s, std::size_t w) { return s + std::string(w - s.size(), ' '); };
  std::ostringstream out;
  out << title << "  [held-out mCA, %]\n";
  std::string line = pad(row_header, width[0]);
  for (std::size_t c = 0; c < columns.size(); ++c) line += " | " + pad(columns[c], width[c + 1]);
  out << line << "\n" << std::string(line.size(), '-') << "\n";
  for (std::size_t r = 0; r < rows.size(); ++r) {
    out << pad(rows[r], width[0]);
    for (std::size_t c = 0; c < columns.size(); ++c) out << " | " << pad(c < cells[r].size() ? cells[r][c] : "", width[c + 1]);
    out << "\n";
  }
  return out.str();
}

double train_and_score(const TrainConfig& cfg, const Inputs& in) {
  if (!in.train || !in.holdout || in.holdout->empty()) throw DataError("ablation needs train and held-out samples");
  trainer::Trainer t(cfg, cfg.needs_provider() ? in.provider : nullptr);
  const auto prepared = t.prepare(*in.train, in.workers);
  t.fit(prepared);
  const auto model = trainer::strip(t.model());
  return evalkit::evaluate(model, *in.holdout, in.workers).mca;
}

Table run(const std::string& axis, const Inputs& in) {
  const TrainConfig& base = in.base;
  const std::size_t L = base.model.layers, mid = (L + 1) / 2;
  Table t;
  t.axis = axis;
  std::size_t done = 0;
  auto score = [&](const TrainConfig& c, const std::string& label) {
    const std::string v = percent(train_and_score(c, in));
    ++done;
    if (in.progress) in.progress(axis + " [" + std::to_string(done) + "] " + label + ": " + v);
    return v;
  };

  if (axis == "head") {
    t.title = "Choice of parameterised module";
    t.row_header = "Module";
    t.columns = {"FC", "MLP", "Transformer"};
    t.rows = {"2D-SIM", "3D-SIM"};
    for (std::size_t r = 0; r < 2; ++r) {
      std::vector<std::string> row;
      for (auto kind : {HeadKind::FC, HeadKind::MLP, HeadKind::Transformer}) {
        TrainConfig c = r == 0 ? only_2d(base) : only_3d(base);
        (r == 0 ? c.sim2d.head_kind : c.sim3d.head_kind) = kind;
        row.push_back(score(c, t.rows[r] + "/" + to_string(kind)));
      }
      t.cells.push_back(row);
    }
  } else if (axis == "kd") {
    t.title = "Comparison of 3D-SIM with traditional distillation";
    t.row_header = "Approach";
    t.columns = {"desk"};
    t.rows = {"Baseline", "+ FD with class token", "+ FD with distillation token", "+ LD with class token",
              "+ LD with distillation token", "+ 3D-SIM"};
    const KdBaseline kinds[] = {KdBaseline::FDClass, KdBaseline::FDDistill, KdBaseline::LDClass, KdBaseline::LDDistill};
    t.cells.push_back({score(baseline(base), "baseline")});
    for (auto k : kinds) {
      TrainConfig c = baseline(base);
      c.kd = k;
      t.cells.push_back({score(c, trainer::to_string(k))});
    }
    t.cells.push_back({score(only_3d(base), "3d-sim")});
  } else if (axis == "placement-3dsim") {
    t.title = "Alignment level and position of 3D-SIM";
    t.row_header = "Alignment level";
    const std::vector<std::vector<std::size_t>> placements = {{1}, {mid}, {L}, unique_layers({1, mid, L})};
    t.columns = {"Baseline"};
    for (const auto& p : placements) t.columns.push_back(join(p));
    t.rows = {"Global", "Local", "Global+Local"};
    const std::string base_score = score(baseline(base), "baseline");
    for (auto level : {sim3d::AlignmentLevel::Global, sim3d::AlignmentLevel::Local, sim3d::AlignmentLevel::GlobalLocal}) {
      std::vector<std::string> row{base_score};
      for (const auto& p : placements) {
        TrainConfig c = only_3d(base);
        c.sim3d.alignment = level;
        c.sim3d_layers = p;
        row.push_back(score(c, sim3d::to_string(level) + "@" + join(p)));
      }
      t.cells.push_back(row);
    }
  } else if (axis == "map-variant") {
    t.title = "Token-skeleton map variants";
    t.row_header = "Variant";
    t.columns = {"desk"};
    t.rows = {"Token-Skeleton Map", "Flat Variant", "Depth Variant"};
    for (auto v : {skelmap::MapVariant::Full, skelmap::MapVariant::Flat, skelmap::MapVariant::Depth}) {
      TrainConfig c = only_2d(base);
      c.sim2d.variant = v;
      t.cells.push_back({score(c, skelmap::to_string(v))});
    }
  } else if (axis == "3dsim-classifier") {
    t.title = "Classification task of 3D-SIM";
    t.row_header = "Alignment level";
    t.columns = {"with classifier", "without classifier"};
    t.rows = {"Global", "Local"};
    for (auto level : {sim3d::AlignmentLevel::Global, sim3d::AlignmentLevel::Local}) {
      std::vector<std::string> row;
      for (bool on : {true, false}) {
        TrainConfig c = only_3d(base);
        c.sim3d.alignment = level;
        c.sim3d.with_classifier = on;
        row.push_back(score(c, sim3d::to_string(level) + (on ? "+cls" : "-cls")));
      }
      t.cells.push_back(row);
    }
  } else if (axis == "placement-2dsim") {
    t.title = "Position of 2D-SIM";
    t.row_header = "Dataset";
    const std::vector<std::vector<std::size_t>> placements = {{1}, {mid}, {L}, unique_layers({1, mid}),
                                                              unique_layers({1, L})};
    for (const auto& p : placements) t.columns.push_back(join(p));
    t.rows = {"desk"};
    std::vector<std::string> row;
    for (const auto& p : placements) {
      TrainConfig c = only_2d(base);
      c.sim2d_layers = p;
      row.push_back(score(c, "2d@" + join(p)));
    }
    t.cells.push_back(row);
  } else {
    std::string known;
    for (const auto& n : axis_names()) known += (known.empty() ? "" : "|") + n;
    throw ConfigError("unknown ablation axis '" + axis + "' (expected " + known + ")");
  }
  return t;
}

}  // namespace pivit::ablation
