#include <catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "homoseg/cli.hpp"
#include "homoseg/config.hpp"

using namespace homoseg;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("homoseg_test_config_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
  return p.string();
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

struct CliResult {
  int code;
  std::string out;
  std::string err;
};

CliResult run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "homoseg");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

// Runs the installed executable and returns its exit status.
int run_binary(const std::string& args) {
  const std::string cmd = std::string("\"") + HOMOSEG_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("empty configuration yields defaults") {
  const auto dir = temp_dir("empty");
  const auto cfg = parse_config(write_file(dir / "empty.ini", ""), {});
  const RunConfig def;
  CHECK(cfg.seed == def.seed);
  CHECK(cfg.train.steps == def.train.steps);
  CHECK(cfg.train.lambda_div == def.train.lambda_div);
  CHECK(cfg.episode.frames == def.episode.frames);
  CHECK(render_config(cfg) == render_config(def));
}

TEST_CASE("file values, then overrides in order") {
  const auto dir = temp_dir("precedence");
  const auto path = write_file(dir / "c.ini",
                               "# comment\n[train]\nsteps = 100\nlr = 0.002\n; other comment\n[sim]\nlayout = lane\n"
                               "eyes = false\n[run]\nseed = 9\n");
  const auto file_only = parse_config(path, {});
  CHECK(file_only.train.steps == 100);
  CHECK(file_only.train.lr == 0.002);
  CHECK(file_only.episode.layout == sim::Layout::lane);
  CHECK_FALSE(file_only.episode.eyes);
  CHECK(file_only.seed == 9);
  const auto over = parse_config(path, {"train.steps=200", "train.steps=300"});
  CHECK(over.train.steps == 300);
  CHECK(parse_config(path, {"train.steps = 200"}).train.steps == 200);
}

TEST_CASE("resolved configuration renders and re-parses to the same values") {
  const auto dir = temp_dir("render");
  auto cfg = parse_config("", {"train.lambda_div=0.0125", "sim.layout=lane", "eval.rel_datasets=a,b", "run.seed=7"});
  const auto text = render_config(cfg);
  const auto back = parse_config(write_file(dir / "r.ini", text), {});
  CHECK(render_config(back) == text);
  CHECK(back.train.lambda_div == 0.0125);
  CHECK(back.eval.rel_datasets == "a,b");
}

TEST_CASE("configuration errors name the key and the expected type") {
  const auto dir = temp_dir("errors");
  const auto unknown = error_of([&] { parse_config(write_file(dir / "u.ini", "[train]\nstepz = 5\n"), {}); });
  CHECK(unknown.find("train.stepz") != std::string::npos);
  CHECK(error_of([&] { parse_config("", {"nosuch.key=1"}); }).find("nosuch.key") != std::string::npos);

  const auto type = error_of([&] { parse_config("", {"train.steps=many"}); });
  CHECK(type.find("train.steps") != std::string::npos);
  CHECK(type.find("integer") != std::string::npos);
  CHECK(error_of([&] { parse_config("", {"train.lr=fast"}); }).find("number") != std::string::npos);
  CHECK(error_of([&] { parse_config("", {"sim.eyes=maybe"}); }).find("boolean") != std::string::npos);
  CHECK(error_of([&] { parse_config("", {"train.steps=12abc"}); }).find("integer") != std::string::npos);
  CHECK_FALSE(error_of([&] { parse_config("", {"train.steps"}); }).empty());
  CHECK_FALSE(error_of([&] { parse_config(write_file(dir / "h.ini", "[train\nsteps=1\n"), {}); }).empty());
  CHECK_FALSE(error_of([&] { parse_config((dir / "absent.ini").string(), {}); }).empty());
}

TEST_CASE("shipped desk configuration parses and validates") {
  const auto cfg = parse_config(std::string(HOMOSEG_SOURCE_DIR) + "/configs/desk.ini", {});
  CHECK_NOTHROW(cfg.train.validate());
  CHECK(cfg.train.steps == 3000);
  CHECK(cfg.train.seg_delay == 500);
  CHECK(cfg.train.seg_ramp(499) == 0.0);
  CHECK(cfg.train.seg_ramp(1500) == 1.0);
  CHECK(cfg.train.rel_steps == 3000);
}

TEST_CASE("cli exit codes") {
  const auto dir = temp_dir("cli");
  SECTION("unknown subcommand and missing subcommand") {
    CHECK(run_cli({"frobnicate"}).code != 0);
    CHECK(run_cli({}).code == cli::config_error);
  }
  SECTION("unknown key and bad type") {
    const auto r = run_cli({"generate", "--set", "sim.nope=1", "--out", (dir / "g").string()});
    CHECK(r.code == cli::config_error);
    CHECK(r.err.find("sim.nope") != std::string::npos);
    CHECK(run_cli({"generate", "--set", "sim.frames=ten", "--out", (dir / "g").string()}).code == cli::config_error);
  }
  SECTION("generate writes a dataset, the resolved config, and echoes it") {
    const auto out = dir / "data";
    const auto r = run_cli({"generate", "--seed", "4", "--out", out.string(), "--set", "sim.episodes=2", "--set",
                            "sim.frames=6", "--set", "sim.render_w=32", "--set", "sim.render_h=32"});
    REQUIRE(r.code == cli::ok);
    CHECK(std::filesystem::exists(out / "manifest.json"));
    CHECK(std::filesystem::exists(out / "resolved_config.ini"));
    CHECK(r.err.find("resolved configuration") != std::string::npos);
    const auto ds = read_dataset(out);
    CHECK(ds.episodes.size() == 2);
    CHECK(ds.episodes[0].length() == 6);
    const auto again = parse_config((out / "resolved_config.ini").string(), {});
    CHECK(again.seed == 4);
    CHECK(again.episodes == 2);
  }
  SECTION("missing input artifacts") {
    CHECK(run_cli({"eval", "--set", "eval.checkpoint=" + (dir / "none.hsck").string(), "--out",
                   (dir / "e").string()})
              .code == cli::missing_input);
    CHECK(run_cli({"train-rel", "--set", "relational.checkpoint=" + (dir / "none.hsck").string(), "--out",
                   (dir / "r").string()})
              .code == cli::missing_input);
    CHECK(run_cli({"train", "--set", "train.dataset=" + (dir / "nodata").string(), "--out", (dir / "t").string()})
              .code == cli::missing_input);
    CHECK(run_cli({"viz", "--set", "viz.metrics=" + (dir / "none.json").string(), "--out", (dir / "v").string()})
              .code == cli::missing_input);
  }
  SECTION("executable exit statuses") {
    CHECK(run_binary("generate --set train.stepz=1") == 2);
    CHECK(run_binary("eval --set eval.checkpoint=" + (dir / "none.hsck").string() + " --out " +
                     (dir / "x").string()) == 3);
    CHECK(run_binary("generate --out " + (dir / "bin").string() +
                     " --set sim.episodes=1 --set sim.frames=4 --set sim.render_w=32 --set sim.render_h=32") == 0);
    CHECK(std::filesystem::exists(dir / "bin" / "manifest.json"));
  }
}
