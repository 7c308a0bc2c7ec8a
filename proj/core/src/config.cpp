#include <cmath>
#include <set>

#include "pivit/error.hpp"
#include "pivit/trainer.hpp"

namespace pivit::trainer {

using nlohmann::json;

namespace {

// Reads one JSON object, rejecting keys nobody asked for.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("config section '" + path_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (auto it = doc_.begin(); it != doc_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError("unknown config key '" + qualified(it.key()) + "'");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = doc_.find(key);
    if (it == doc_.end()) return;
    try {
      out = it->get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config key '" + qualified(key) + "' has the wrong type");
    }
  }
  const json* child(const std::string& key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }
  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

std::vector<std::size_t> parse_layers(const json& v, std::size_t layers, const std::string& key) {
  if (!v.is_array()) throw ConfigError("'" + key + "' must be a list of layers");
  std::vector<std::size_t> out;
  for (const auto& e : v) {
    if (e.is_number_integer() && e.get<long long>() >= 0) {
      out.push_back(e.get<std::size_t>());
    } else if (e.is_string() && e.get<std::string>() == "L") {
      out.push_back(layers);
    } else if (e.is_string() && e.get<std::string>() == "L/2") {
      out.push_back((layers + 1) / 2);
    } else {
      throw ConfigError("'" + key + "' entries must be layer numbers, \"L\" or \"L/2\"");
    }
  }
  return out;
}

backbone::AttentionKind parse_attention(const std::string& s) {
  if (s == "divided") return backbone::AttentionKind::Divided;
  if (s == "joint") return backbone::AttentionKind::Joint;
  throw ConfigError("unknown attention '" + s + "' (expected divided|joint)");
}

template <class F>
auto converting(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

}  // namespace

std::string to_string(KdBaseline k) {
  switch (k) {
    case KdBaseline::None:
      return "none";
    case KdBaseline::FDClass:
      return "fd-class";
    case KdBaseline::FDDistill:
      return "fd-distill";
    case KdBaseline::LDClass:
      return "ld-class";
    case KdBaseline::LDDistill:
      return "ld-distill";
  }
  return "none";
}

KdBaseline parse_kd(const std::string& name) {
  for (auto k : {KdBaseline::None, KdBaseline::FDClass, KdBaseline::FDDistill, KdBaseline::LDClass,
                 KdBaseline::LDDistill})
    if (to_string(k) == name) return k;
  throw ConfigError("unknown kd baseline '" + name + "' (expected none|fd-class|fd-distill|ld-class|ld-distill)");
}

backbone::PatchConfig TrainConfig::effective_model() const {
  backbone::PatchConfig m = model;
  m.distill_token = kd == KdBaseline::FDDistill || kd == KdBaseline::LDDistill;
  return m;
}

void TrainConfig::validate() const {
  model.validate();
  if (joints == 0) throw ConfigError("joints must be >= 1");
  for (const auto* list : {&sim2d_layers, &sim3d_layers}) {
    for (std::size_t l : *list)
      if (l < 1 || l > model.layers)
        throw ConfigError("placement layer " + std::to_string(l) + " outside 1.." + std::to_string(model.layers));
    if (std::set<std::size_t>(list->begin(), list->end()).size() != list->size())
      throw ConfigError("placement lists must not repeat a layer");
  }
  if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be >= 1");
  if (!(optim.lr > 0.0)) throw ConfigError("optim.lr must be > 0");
  if (optim.momentum < 0.0 || optim.momentum >= 1.0) throw ConfigError("optim.momentum must be in [0, 1)");
  for (double w : {weights.cls, weights.sim2d, weights.sim3d, weights.kd})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and >= 0");
  if (!(noise.pixel >= 0.0) || !(noise.feature >= 0.0)) throw ConfigError("noise levels must be >= 0");
  if (sim3d.d_s == 0) throw ConfigError("sim3d.d_s must be >= 1");
  if (provider.temporal_layers > 16) throw ConfigError("provider.temporal_layers too large");
}

json to_json(const backbone::PatchConfig& c) {
  return {{"frames", c.frames},
          {"height", c.height},
          {"width", c.width},
          {"tau", c.tau},
          {"patch", c.patch},
          {"d_v", c.d_v},
          {"layers", c.layers},
          {"heads", c.heads},
          {"classes", c.classes},
          {"mlp_ratio", c.mlp_ratio},
          {"attention", c.attention == backbone::AttentionKind::Divided ? "divided" : "joint"},
          {"final_norm", c.final_norm},
          {"distill_token", c.distill_token}};
}

backbone::PatchConfig patch_config_from_json(const json& doc) {
  backbone::PatchConfig c;
  Section s(doc, "model");
  s.get("frames", c.frames);
  s.get("height", c.height);
  s.get("width", c.width);
  s.get("tau", c.tau);
  s.get("patch", c.patch);
  s.get("d_v", c.d_v);
  s.get("layers", c.layers);
  s.get("heads", c.heads);
  s.get("classes", c.classes);
  s.get("mlp_ratio", c.mlp_ratio);
  std::string attention = "divided";
  s.get("attention", attention);
  c.attention = parse_attention(attention);
  s.get("final_norm", c.final_norm);
  s.get("distill_token", c.distill_token);
  return c;
}

namespace {

json document(const TrainConfig& c, json sim2d_layers, json sim3d_layers) {
  return {{"seed", c.seed},
          {"joints", c.joints},
          {"model", to_json(c.model)},
          {"optim",
           {{"epochs", c.optim.epochs},
            {"batch_size", c.optim.batch_size},
            {"lr", c.optim.lr},
            {"momentum", c.optim.momentum},
            {"weight_decay", c.optim.weight_decay},
            {"warmup_steps", c.optim.warmup_steps},
            {"grad_clip", c.optim.grad_clip},
            {"cosine", c.optim.cosine}}},
          {"sim2d",
           {{"layers", std::move(sim2d_layers)},
            {"head", to_string(c.sim2d.head_kind)},
            {"d_b", c.sim2d.d_b},
            {"variant", skelmap::to_string(c.sim2d.variant)},
            {"reduction", to_string(c.sim2d.reduction)},
            {"depth_weight", c.sim2d.depth_weight}}},
          {"sim3d",
           {{"layers", std::move(sim3d_layers)},
            {"alignment", sim3d::to_string(c.sim3d.alignment)},
            {"classifier", c.sim3d.with_classifier},
            {"d_s", c.sim3d.d_s},
            {"head", to_string(c.sim3d.head_kind)},
            {"mse_inner", to_string(c.sim3d.mse_inner)},
            {"provider", c.sim3d.provider}}},
          {"weights", {{"cls", c.weights.cls}, {"sim2d", c.weights.sim2d}, {"sim3d", c.weights.sim3d}, {"kd", c.weights.kd}}},
          {"kd", to_string(c.kd)},
          {"noise", {{"pixel", c.noise.pixel}, {"feature", c.noise.feature}}},
          {"map_dilation", c.map_dilation},
          {"provider",
           {{"temporal_layers", c.provider.temporal_layers},
            {"epochs", c.provider.epochs},
            {"batch_size", c.provider.batch_size},
            {"lr", c.provider.lr},
            {"momentum", c.provider.momentum}}}};
}

}  // namespace

json default_config_document() { return document(TrainConfig{}, json::array({1}), json::array({"L"})); }

json to_json(const TrainConfig& c) { return document(c, c.sim2d_layers, c.sim3d_layers); }

TrainConfig train_config_from_json(const json& doc) {
  TrainConfig c;
  Section root(doc, "");
  root.get("seed", c.seed);
  root.get("joints", c.joints);
  if (const json* m = root.child("model")) c.model = patch_config_from_json(*m);
  c.sim3d_layers = {c.model.layers};

  if (const json* o = root.child("optim")) {
    Section s(*o, "optim");
    s.get("epochs", c.optim.epochs);
    s.get("batch_size", c.optim.batch_size);
    s.get("lr", c.optim.lr);
    s.get("momentum", c.optim.momentum);
    s.get("weight_decay", c.optim.weight_decay);
    s.get("warmup_steps", c.optim.warmup_steps);
    s.get("grad_clip", c.optim.grad_clip);
    s.get("cosine", c.optim.cosine);
  }
  if (const json* o = root.child("sim2d")) {
    Section s(*o, "sim2d");
    if (const json* l = s.child("layers")) c.sim2d_layers = parse_layers(*l, c.model.layers, "sim2d.layers");
    std::string head = to_string(c.sim2d.head_kind), variant = "full", reduction = "mean";
    s.get("head", head);
    s.get("d_b", c.sim2d.d_b);
    s.get("variant", variant);
    s.get("reduction", reduction);
    s.get("depth_weight", c.sim2d.depth_weight);
    c.sim2d.head_kind = converting("sim2d.head", [&] { return parse_head_kind(head); });
    c.sim2d.variant = converting("sim2d.variant", [&] { return skelmap::parse_variant(variant); });
    c.sim2d.reduction = converting("sim2d.reduction", [&] { return parse_reduction(reduction); });
  }
  if (const json* o = root.child("sim3d")) {
    Section s(*o, "sim3d");
    if (const json* l = s.child("layers")) c.sim3d_layers = parse_layers(*l, c.model.layers, "sim3d.layers");
    std::string alignment = "global", head = "fc", inner = "mean";
    s.get("alignment", alignment);
    s.get("classifier", c.sim3d.with_classifier);
    s.get("d_s", c.sim3d.d_s);
    s.get("head", head);
    s.get("mse_inner", inner);
    s.get("provider", c.sim3d.provider);
    c.sim3d.alignment = converting("sim3d.alignment", [&] { return sim3d::parse_level(alignment); });
    c.sim3d.head_kind = converting("sim3d.head", [&] { return parse_head_kind(head); });
    c.sim3d.mse_inner = converting("sim3d.mse_inner", [&] { return parse_reduction(inner); });
  }
  if (const json* o = root.child("weights")) {
    Section s(*o, "weights");
    s.get("cls", c.weights.cls);
    s.get("sim2d", c.weights.sim2d);
    s.get("sim3d", c.weights.sim3d);
    s.get("kd", c.weights.kd);
  }
  std::string kd = "none";
  root.get("kd", kd);
  c.kd = parse_kd(kd);
  if (const json* o = root.child("noise")) {
    Section s(*o, "noise");
    s.get("pixel", c.noise.pixel);
    s.get("feature", c.noise.feature);
  }
  root.get("map_dilation", c.map_dilation);
  if (const json* o = root.child("provider")) {
    Section s(*o, "provider");
    s.get("temporal_layers", c.provider.temporal_layers);
    s.get("epochs", c.provider.epochs);
    s.get("batch_size", c.provider.batch_size);
    s.get("lr", c.provider.lr);
    s.get("momentum", c.provider.momentum);
  }
  c.provider.d_s = c.sim3d.d_s;
  c.provider.classes = c.model.classes;
  c.provider.joints = c.joints;
  c.provider.seed = c.seed;
  if (!c.sim2d_layers.empty()) c.sim2d.tap_layer = c.sim2d_layers.front();
  if (!c.sim3d_layers.empty()) c.sim3d.tap_layer = c.sim3d_layers.front();
  c.validate();
  return c;
}

void apply_override(json& doc, const std::string& assignment, bool allow_new) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("override path '" + path + "' has an empty component");
    if (allow_new && node->is_null()) *node = json::object();
    if (!node->is_object()) throw ConfigError("override path '" + path + "' descends into a non-object");
    if (!allow_new && !node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

}  // namespace pivit::trainer
