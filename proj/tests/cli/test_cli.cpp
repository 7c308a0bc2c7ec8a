#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>

#include "doctest.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

Result run(const std::string& args) {
  const std::string cmd = std::string(PIVIT_CLI) + " " + args + " 2>/dev/null";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), p)) r.out += buf.data();
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

const fs::path& workdir() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "pivit_test_cli";
    fs::remove_all(d);
    fs::create_directories(d);
    std::ofstream(d / "tiny.json") << json{{"model", {{"d_v", 8}, {"heads", 2}, {"layers", 2}}},
                                           {"optim", {{"epochs", 1}}},
                                           {"sim3d", {{"d_s", 8}}},
                                           {"provider", {{"epochs", 2}}}}
                                          .dump();
    return d;
  }();
  return dir;
}

std::string tiny() { return "--config " + (workdir() / "tiny.json").string(); }

const fs::path& dataset() {
  static const fs::path d = [] {
    const auto out = workdir() / "data";
    REQUIRE(run("synth --out " + out.string() + " --clips-per-class 3 --holdout-per-class 2 --seed 4").code == 0);
    return out;
  }();
  return d;
}

}  // namespace

TEST_CASE("synth is deterministic per seed") {
  const auto a = workdir() / "s1", b = workdir() / "s2", c = workdir() / "s3";
  REQUIRE(run("synth --out " + a.string() + " --clips-per-class 2 --holdout-per-class 1 --seed 7").code == 0);
  REQUIRE(run("synth --out " + b.string() + " --clips-per-class 2 --holdout-per-class 1 --seed 7").code == 0);
  REQUIRE(run("synth --out " + c.string() + " --clips-per-class 2 --holdout-per-class 1 --seed 8").code == 0);
  std::size_t files = 0;
  bool any_diff = false;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    CHECK(slurp(e.path()) == slurp(b / rel));
    any_diff |= slurp(e.path()) != slurp(c / rel);
    ++files;
  }
  CHECK(files > 0);
  CHECK(any_diff);
}

TEST_CASE("exit codes") {
  CHECK(run("--help").code == 0);
  CHECK(run("train --no-such-flag").code == 2);
  CHECK(run("").code == 2);
  CHECK(run("train --data " + dataset().string() + "/train --out x.ckpt --set optim.nope=1").code == 2);
  CHECK(run("train --data " + dataset().string() + "/train --out x.ckpt --set optim.lr=-1").code == 2);
  CHECK(run("ablate --axis depth --data " + dataset().string() + "/train").code == 2);
  CHECK(run("eval " + (workdir() / "missing.ckpt").string() + " --data " + dataset().string() + "/eval").code == 1);
  CHECK(run("train --data " + (workdir() / "nowhere").string() + " --out x.ckpt " + tiny()).code == 1);
}

TEST_CASE("train, strip, then evaluate without poses") {
  const auto ckpt = workdir() / "m.ckpt", slim = workdir() / "m.slim.ckpt", provider = workdir() / "p.ckpt";
  const auto train = dataset() / "train", eval = dataset() / "eval";
  REQUIRE(run("pretrain-provider --data " + train.string() + " --out " + provider.string() + " " + tiny()).code == 0);
  const auto r = run("train --data " + train.string() + " --out " + ckpt.string() + " --provider " +
                     provider.string() + " " + tiny());
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out).contains("train_top1"));
  REQUIRE(run("strip " + ckpt.string() + " " + slim.string()).code == 0);
  CHECK(fs::file_size(slim) < fs::file_size(ckpt));

  const auto no_poses = workdir() / "eval_clips";
  fs::remove_all(no_poses);
  fs::copy(eval, no_poses, fs::copy_options::recursive);
  fs::remove_all(no_poses / "poses");
  const auto full_preds = workdir() / "full.jsonl", slim_preds = workdir() / "slim.jsonl";
  CHECK(run("eval " + ckpt.string() + " --data " + no_poses.string() + " --predictions " + full_preds.string()).code ==
        0);
  CHECK(run("eval " + slim.string() + " --data " + no_poses.string() + " --predictions " + slim_preds.string()).code ==
        0);
  CHECK(slurp(full_preds) == slurp(slim_preds));
  CHECK(run("analyze --compare " + full_preds.string() + " " + slim_preds.string()).code == 0);
}

TEST_CASE("--seed reproduces a training run") {
  const auto train = dataset() / "train";
  const auto a = workdir() / "a.ckpt", b = workdir() / "b.ckpt", c = workdir() / "c.ckpt";
  const std::string common = " --baseline " + tiny();
  REQUIRE(run("train --data " + train.string() + " --out " + a.string() + " --seed 3" + common).code == 0);
  REQUIRE(run("train --data " + train.string() + " --out " + b.string() + " --seed 3" + common).code == 0);
  REQUIRE(run("train --data " + train.string() + " --out " + c.string() + " --seed 4" + common).code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a) != slurp(c));
}

TEST_CASE("ablate prints a complete placement table") {
  const auto out = workdir() / "table.json";
  const auto r = run("ablate --axis placement-3dsim --data " + (dataset() / "train").string() + " --holdout " +
                     (dataset() / "eval").string() + " --out " + out.string() + " " + tiny());
  REQUIRE(r.code == 0);
  const auto t = json::parse(slurp(out));
  CHECK(t["columns"] == json{"Baseline", "1", "1", "2", "1,2"});
  CHECK(t["rows"].size() == 3);
  for (const auto& row : t["cells"]) CHECK(row.size() == 5);
}
