#include <catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <iterator>

#include "homoseg/eval.hpp"
#include "homoseg/train.hpp"

using namespace homoseg;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("homoseg_test_artifacts_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<char> bytes_of(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.steps = 4;
  c.batch = 2;
  c.base_width = 2;
  c.depth = 2;
  c.checkpoint_every = 0;
  c.seed = 11;
  return c;
}

Checkpoint tiny_checkpoint() {
  Trainer tr(tiny_config(), 32, 32);
  return tr.checkpoint();
}

MetricsReport sample_report() {
  MetricsReport r;
  r.checkpoint = "phase2.hsck";
  r.checkpoint_hash = "0123456789abcdef";
  r.config = nlohmann::json{{"steps", 10}};
  r.episodes.push_back({0, 0.75, {0.5, 0.25}, 0.125});
  r.episodes.push_back({1, std::nullopt, {0.0, 0.0}, 0.0});
  r.ari = 0.75;
  r.iou = {0.25, 0.125};
  r.degeneracy = 0.0625;
  r.homo_residual = 1.5e-3;
  r.identity_norm = 0.01;
  RelationMetrics rel;
  rel.layout = "lane";
  rel.samples = 5;
  rel.spearman = -0.875;
  rel.sign_accuracy = 0.8;
  rel.s = {0.1, -0.2, 0.3, -0.4, 0.5};
  rel.delta_distance = {-1, 2, -3, 4, -5};
  rel.pca_coords = std::vector<std::array<double, 2>>{{0, 1}, {1, 0}, {2, 2}, {-1, 0.5}, {0.25, -3}};
  rel.pca_explained = std::array<double, 2>{0.75, 0.25};
  r.relations.push_back(rel);
  RelationMetrics bare = rel;
  bare.layout = "random";
  bare.pca_coords.reset();
  bare.pca_explained.reset();
  r.relations.push_back(bare);
  return r;
}

bool is_png(const std::filesystem::path& p) {
  const auto b = bytes_of(p);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (b.size() < 8 + 25 + 12) return false;
  for (int i = 0; i < 8; ++i)
    if (static_cast<unsigned char>(b[i]) != sig[i]) return false;
  const std::string tail(b.end() - 8, b.end() - 4);
  return tail == "IEND";
}

}  // namespace

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  const auto dir = temp_dir("ckpt");
  Checkpoint c = tiny_checkpoint();
  c.slot_roles = {2, 0, 1};
  c.rng_state = "state";
  c.final_homo_residual = 0.25;
  save_checkpoint(c, dir / "a.hsck");
  const Checkpoint back = load_checkpoint(dir / "a.hsck");
  save_checkpoint(back, dir / "b.hsck");
  CHECK(bytes_of(dir / "a.hsck") == bytes_of(dir / "b.hsck"));
  CHECK(back.slot_roles == c.slot_roles);
  CHECK(back.final_homo_residual == 0.25);
  REQUIRE(back.params.size() == c.params.size());
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    CHECK(back.params[i].first == c.params[i].first);
    CHECK(back.params[i].second == c.params[i].second);
  }
}

TEST_CASE("checkpoint version mismatch and truncation are reported distinctly") {
  const auto dir = temp_dir("ckpt_bad");
  save_checkpoint(tiny_checkpoint(), dir / "c.hsck");
  auto bytes = bytes_of(dir / "c.hsck");

  auto versioned = bytes;
  versioned[4] = static_cast<char>(99);
  std::ofstream(dir / "v.hsck", std::ios::binary).write(versioned.data(), static_cast<std::streamsize>(versioned.size()));
  CHECK_THROWS_AS(load_checkpoint(dir / "v.hsck"), io::VersionError);

  std::ofstream(dir / "t.hsck", std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  CHECK_THROWS_AS(load_checkpoint(dir / "t.hsck"), io::CorruptError);

  auto flipped = bytes;
  flipped[bytes.size() - 3] ^= 0x40;
  std::ofstream(dir / "f.hsck", std::ios::binary).write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
  CHECK_THROWS_AS(load_checkpoint(dir / "f.hsck"), io::CorruptError);

  CHECK_THROWS(load_checkpoint(dir / "missing.hsck"));
}

TEST_CASE("metrics JSON round-trips and rejects other schema versions") {
  const auto dir = temp_dir("metrics");
  const auto rep = sample_report();
  write_metrics(rep, dir / "m.json");
  const auto back = read_metrics(dir / "m.json");
  CHECK(back == rep);

  auto j = nlohmann::json::parse(std::ifstream(dir / "m.json"));
  j["schema_version"] = kMetricsSchemaVersion + 1;
  std::ofstream(dir / "n.json") << j.dump();
  CHECK_THROWS_AS(read_metrics(dir / "n.json"), io::VersionError);
}

TEST_CASE("emit_report writes metrics and one scatter per section with PCA data") {
  const auto dir = temp_dir("emit");
  const auto rep = sample_report();
  const auto files = emit_report(rep, dir / "report");
  CHECK(std::filesystem::exists(files.metrics));
  REQUIRE(files.scatters.size() == 1);
  CHECK(files.scatters[0].filename() == "pca_scatter_lane.png");
  CHECK(is_png(files.scatters[0]));
  CHECK_FALSE(std::filesystem::exists(dir / "report" / "pca_scatter_random.png"));
  CHECK(read_metrics(files.metrics) == rep);
}

TEST_CASE("scatter plot draws one marker per point") {
  const std::vector<std::array<double, 2>> pts{{0, 0}, {10, 0}, {0, 10}, {10, 10}};
  const auto img = scatter_plot(pts, {-1, -0.5, 0.5, 1});
  REQUIRE(img.width > 0);
  REQUIRE(img.height > 0);
  // count connected blobs of coloured pixels (neither white background nor black frame)
  auto marker = [&](int x, int y) {
    const std::uint8_t* p = &img.rgb[3 * (static_cast<std::size_t>(y) * img.width + x)];
    const bool white = p[0] == 255 && p[1] == 255 && p[2] == 255;
    const bool black = p[0] == 0 && p[1] == 0 && p[2] == 0;
    return !white && !black;
  };
  std::vector<char> seen(static_cast<std::size_t>(img.width) * img.height, 0);
  int blobs = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * img.width + x;
      if (seen[i] || !marker(x, y)) continue;
      ++blobs;
      std::vector<std::pair<int, int>> stack{{x, y}};
      seen[i] = 1;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        for (auto [dx, dy] : {std::pair{1, 0}, {-1, 0}, {0, 1}, {0, -1}}) {
          const int nx = cx + dx, ny = cy + dy;
          if (nx < 0 || ny < 0 || nx >= img.width || ny >= img.height) continue;
          const std::size_t j = static_cast<std::size_t>(ny) * img.width + nx;
          if (seen[j] || !marker(nx, ny)) continue;
          seen[j] = 1;
          stack.push_back({nx, ny});
        }
      }
    }
  CHECK(blobs == 4);
}

TEST_CASE("mask strips are valid PNG files") {
  const auto dir = temp_dir("strips");
  sim::EpisodeConfig ec;
  ec.frames = 12;
  ec.render_w = 32;
  ec.render_h = 32;
  ec.seed = 5;
  Dataset ds{ec, sim::generate_dataset(ec, 1)};
  const auto ckpt = tiny_checkpoint();
  const auto model = model_from_checkpoint(ckpt);
  const auto files = emit_mask_strips(model, ds, dir, 2, 4);
  REQUIRE(files.size() == 1);
  CHECK(is_png(files[0]));
}
