#include "pivit/checkpoint.hpp"

#include <algorithm>

#include "pivit/binio.hpp"
#include "pivit/error.hpp"

namespace pivit::ckpt {

using nlohmann::json;

namespace {
constexpr char kMagic[9] = "PIVITCK1";
}

const Entry* Checkpoint::find(const std::string& name) const {
  auto it = std::find_if(entries.begin(), entries.end(), [&](const Entry& e) { return e.name == name; });
  return it == entries.end() ? nullptr : &*it;
}

bool Checkpoint::has_train_only() const {
  return std::any_of(entries.begin(), entries.end(), [](const Entry& e) { return e.train_only; });
}

void Checkpoint::apply_to(nn::ParamList& dst) const {
  for (auto& p : dst) {
    const Entry* e = find(p.name);
    if (!e) throw ContractError("checkpoint has no tensor '" + p.name + "'");
    if (e->value.shape() != p.var.shape())
      throw ContractError("checkpoint tensor '" + p.name + "' has shape " + shape_string(e->value.shape()) +
                          ", expected " + shape_string(p.var.shape()));
    p.var.mutable_value() = e->value;
  }
}

Checkpoint from_params(std::string kind, json config, const nn::ParamList& params, bool include_train_only) {
  Checkpoint c{std::move(kind), std::move(config), {}};
  for (const auto& p : params)
    if (include_train_only || !p.train_only) c.entries.push_back({p.name, p.var.value(), p.train_only});
  return c;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header = {{"format", kFormatTag}, {"kind", ckpt.kind}, {"config", ckpt.config}, {"tensors", json::array()}};
  for (const auto& e : ckpt.entries)
    header["tensors"].push_back({{"name", e.name}, {"shape", e.value.shape()}, {"train_only", e.train_only}});
  const std::string text = header.dump();
  auto out = binio::open_out(path);
  binio::put_magic(out, kMagic);
  binio::put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& e : ckpt.entries)
    out.write(reinterpret_cast<const char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(double)));
  if (!out) throw Error("failed writing checkpoint '" + path.string() + "'");
}

Checkpoint load(const std::filesystem::path& path) {
  auto in = binio::open_in(path);
  binio::expect_magic(in, kMagic, "checkpoint");
  const auto n = binio::get<std::uint64_t>(in);
  if (n > (1ULL << 30)) throw ParseError("checkpoint header too large");
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw ParseError("checkpoint header truncated");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint header: ") + e.what());
  }
  if (header.value("format", "") != kFormatTag)
    throw ParseError("unsupported checkpoint format '" + header.value("format", "") + "'");
  Checkpoint c;
  c.kind = header.value("kind", "");
  c.config = header.value("config", json::object());
  for (const auto& t : header.at("tensors")) {
    Entry e{t.at("name").get<std::string>(), Tensor(t.at("shape").get<Shape>()), t.value("train_only", false)};
    in.read(reinterpret_cast<char*>(e.value.data()), static_cast<std::streamsize>(e.value.size() * sizeof(double)));
    if (!in) throw ParseError("checkpoint payload truncated at '" + e.name + "'");
    c.entries.push_back(std::move(e));
  }
  return c;
}

std::uint64_t weight_hash(const nn::ParamList& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params) {
    h = binio::fnv1a(p.name.data(), p.name.size(), h);
    for (auto d : p.var.shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      h = binio::fnv1a(&d64, sizeof(d64), h);
    }
    h = binio::fnv1a(p.var.value().data(), p.var.value().size() * sizeof(double), h);
  }
  return h;
}

}  // namespace pivit::ckpt
