#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "pivit/backbone.hpp"
#include "pivit/checkpoint.hpp"
#include "pivit/error.hpp"

using namespace pivit;
namespace fs = std::filesystem;

namespace {

backbone::PatchConfig tiny() {
  backbone::PatchConfig c;
  c.frames = 2;
  c.height = c.width = 8;
  c.patch = 4;
  c.d_v = 8;
  c.heads = 2;
  c.layers = 1;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "pivit_test_ckpt";
  fs::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("save and load preserve names, shapes, flags and values") {
  backbone::VideoTransformer m(tiny(), 3);
  auto params = m.parameters();
  params.back().train_only = true;
  const auto c = ckpt::from_params("test", {{"k", 1}}, params);
  ckpt::save(scratch("a.ckpt"), c);
  const auto back = ckpt::load(scratch("a.ckpt"));
  CHECK(back.kind == "test");
  CHECK(back.config == c.config);
  REQUIRE(back.entries.size() == c.entries.size());
  for (std::size_t i = 0; i < c.entries.size(); ++i) {
    CHECK(back.entries[i].name == c.entries[i].name);
    CHECK(back.entries[i].value == c.entries[i].value);
    CHECK(back.entries[i].train_only == c.entries[i].train_only);
  }
  CHECK(back.has_train_only());
  CHECK(ckpt::from_params("test", {}, params, false).entries.size() == params.size() - 1);
}

TEST_CASE("apply_to restores weights and the hash") {
  backbone::VideoTransformer a(tiny(), 1), b(tiny(), 2);
  const auto ha = ckpt::weight_hash(a.parameters());
  CHECK(ha != ckpt::weight_hash(b.parameters()));
  auto dst = b.parameters();
  ckpt::from_params("x", {}, a.parameters()).apply_to(dst);
  CHECK(ckpt::weight_hash(b.parameters()) == ha);

  auto c = ckpt::from_params("x", {}, a.parameters());
  c.entries.pop_back();
  CHECK_THROWS(c.apply_to(dst));
  c = ckpt::from_params("x", {}, a.parameters());
  c.entries[0].value = Tensor({1}, 0.0);
  CHECK_THROWS(c.apply_to(dst));
}

TEST_CASE("damaged files are rejected") {
  backbone::VideoTransformer m(tiny(), 3);
  ckpt::save(scratch("b.ckpt"), ckpt::from_params("test", {}, m.parameters()));
  fs::resize_file(scratch("b.ckpt"), fs::file_size(scratch("b.ckpt")) - 8);
  CHECK_THROWS_AS(ckpt::load(scratch("b.ckpt")), ParseError);

  std::ofstream(scratch("c.ckpt")) << "not a checkpoint at all";
  CHECK_THROWS_AS(ckpt::load(scratch("c.ckpt")), ParseError);
  CHECK_THROWS(ckpt::load(scratch("missing.ckpt")));
}
