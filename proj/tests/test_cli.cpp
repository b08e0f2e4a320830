// Drives the installed command-line binary end to end. Expects two
// arguments ahead of the doctest flags: the binary path and the directory
// holding the shipped config files.
#define DOCTEST_CONFIG_IMPLEMENT
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "doctest.h"

namespace {

std::string g_binary;
std::string g_configs;

struct RunResult {
  int exit_code = -1;
  std::string output;
};

RunResult run(const std::string& args) {
  std::string cmd = g_binary + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult r;
  std::array<char, 4096> buf;
  std::size_t n;
  while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0)
    r.output.append(buf.data(), n);
  int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is.good());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::filesystem::path fresh_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("clstm-cli-" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// exit codes and argument validation
// ---------------------------------------------------------------------------

TEST_CASE("bad usage exits with code 2") {
  CHECK(run("").exit_code == 2);
  CHECK(run("frobnicate").exit_code == 2);
  CHECK(run("train").exit_code == 2);  // missing required options
  CHECK(run("train --config x.cfg").exit_code == 2);
}

TEST_CASE("a missing config file exits 2 and names the path") {
  auto dir = fresh_dir("missingcfg");
  RunResult r = run("verify --config /no/such/file.cfg");
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("/no/such/file.cfg") != std::string::npos);
  std::filesystem::remove_all(dir);
}

TEST_CASE("a malformed config file exits 2") {
  auto dir = fresh_dir("badcfg");
  auto path = dir / "bad.cfg";
  std::ofstream(path) << "this line has no equals sign\n";
  RunResult r = run("train --config " + path.string() + " --out " +
                    (dir / "out").string() + " --seed 1");
  CHECK(r.exit_code == 2);
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

TEST_CASE("verify runs every suite and passes") {
  RunResult r = run("verify --config " + g_configs + "/reduced.cfg --seed 5");
  CHECK(r.exit_code == 0);
  for (const char* suite : {"gradients", "ctc_oracle", "tbptt", "census"}) {
    std::string want = std::string("suite=") + suite + " status=pass";
    CHECK(r.output.find(want) != std::string::npos);
  }
  CHECK(r.output.find("status=fail") == std::string::npos);
}

// ---------------------------------------------------------------------------
// train / eval / probe
// ---------------------------------------------------------------------------

TEST_CASE("training writes metrics and a checkpoint, deterministically") {
  auto dir = fresh_dir("train");
  std::string cfg = g_configs + "/train_smoke.cfg";

  RunResult a = run("train --config " + cfg + " --out " +
                    (dir / "a").string() + " --seed 3");
  CHECK(a.exit_code == 0);
  REQUIRE(std::filesystem::exists(dir / "a" / "metrics.csv"));
  REQUIRE(std::filesystem::exists(dir / "a" / "checkpoint.ckpt"));
  std::string metrics_a = slurp(dir / "a" / "metrics.csv");
  CHECK(metrics_a.rfind("step,loss,val_accuracy,lr,phase\n", 0) == 0);
  CHECK(count_lines(metrics_a) == 1 + 4);  // header + one row per step

  // identical seed => byte-identical metrics
  RunResult b = run("train --config " + cfg + " --out " +
                    (dir / "b").string() + " --seed 3");
  CHECK(b.exit_code == 0);
  CHECK(slurp(dir / "b" / "metrics.csv") == metrics_a);

  // different seed => different trajectory
  RunResult c = run("train --config " + cfg + " --out " +
                    (dir / "c").string() + " --seed 4");
  CHECK(c.exit_code == 0);
  CHECK(slurp(dir / "c" / "metrics.csv") != metrics_a);

  SUBCASE("evaluating the checkpoint reports top-k accuracies") {
    RunResult e = run("eval --config " + cfg + " --checkpoint " +
                      (dir / "a" / "checkpoint.ckpt").string() + " --seed 3");
    CHECK(e.exit_code == 0);
    CHECK(e.output.find("top1=") != std::string::npos);
  }

  SUBCASE("probing the checkpoint emits the plot table unchanged by limit") {
    RunResult p = run("probe --config " + cfg + " --checkpoint " +
                      (dir / "a" / "checkpoint.ckpt").string() +
                      " --seed 3 --limit 2 --periods 1 --periods 8 --out " +
                      (dir / "probe.csv").string());
    CHECK(p.exit_code == 0);
    std::string table = slurp(dir / "probe.csv");
    CHECK(table.rfind("scale,T,accuracy,drop_points\n", 0) == 0);
    // reduced arch: recurrent scales are s/2 and final-lstm, two periods
    CHECK(count_lines(table) == 1 + 2 * 2);
    CHECK(table.find("s/2,1,") != std::string::npos);
    CHECK(table.find("final-lstm,8,") != std::string::npos);
  }

  SUBCASE("probing an unknown scale exits 2") {
    RunResult p = run("probe --config " + cfg + " --checkpoint " +
                      (dir / "a" / "checkpoint.ckpt").string() +
                      " --seed 3 --scales s/64");
    CHECK(p.exit_code == 2);
  }

  SUBCASE("loading the checkpoint under a different arch exits 3") {
    auto cfg2 = dir / "other.cfg";
    std::ofstream(cfg2) << "include " << cfg << "\nlstm_hidden = 16\n";
    RunResult e = run("eval --config " + cfg2.string() + " --checkpoint " +
                      (dir / "a" / "checkpoint.ckpt").string() + " --seed 3");
    CHECK(e.exit_code == 3);
  }

  std::filesystem::remove_all(dir);
}

TEST_CASE("resuming from a checkpoint reproduces the full trajectory") {
  auto dir = fresh_dir("resume");
  std::string base = g_configs + "/train_smoke.cfg";

  RunResult full = run("train --config " + base + " --out " +
                       (dir / "full").string() + " --seed 9");
  REQUIRE(full.exit_code == 0);
  std::string metrics_full = slurp(dir / "full" / "metrics.csv");

  // stop after two steps, then resume to the configured four
  auto short_cfg = dir / "short.cfg";
  std::ofstream(short_cfg) << "include " << base << "\nsteps = 2\n";
  RunResult part = run("train --config " + short_cfg.string() + " --out " +
                       (dir / "part").string() + " --seed 9");
  REQUIRE(part.exit_code == 0);
  RunResult rest = run("train --config " + base + " --out " +
                       (dir / "rest").string() + " --seed 9 --resume " +
                       (dir / "part" / "checkpoint.ckpt").string());
  REQUIRE(rest.exit_code == 0);

  // rows written after the resume point must match the uninterrupted run
  std::string metrics_rest = slurp(dir / "rest" / "metrics.csv");
  std::istringstream fs(metrics_full), rs(metrics_rest);
  std::string fline, rline;
  std::getline(fs, fline);  // headers
  std::getline(rs, rline);
  CHECK(fline == rline);
  std::getline(fs, fline);  // steps 1 and 2 only exist in the full run
  std::getline(fs, fline);
  while (std::getline(rs, rline)) {
    REQUIRE(std::getline(fs, fline));
    CHECK(fline == rline);
  }
  CHECK(!std::getline(fs, fline));  // both end at step 4
  std::filesystem::remove_all(dir);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

TEST_CASE("gen-data writes a loadable frame directory") {
  auto dir = fresh_dir("gendata");
  auto cfg = dir / "gen.cfg";
  std::ofstream(cfg) << "synthetic_frames = 3\nsynthetic_extent = 48\n"
                     << "synthetic_train = 4\nsynthetic_val = 2\n"
                     << "synthetic_test = 2\n";
  RunResult g = run("gen-data --config " + cfg.string() + " --out " +
                    (dir / "data").string() + " --seed 2");
  CHECK(g.exit_code == 0);
  for (const char* split : {"train", "val", "test"})
    CHECK(std::filesystem::exists(dir / "data" / split / "manifest.tsv"));
  CHECK(std::filesystem::exists(dir / "data" / "dataset.cfg"));

  // the written directory round-trips through the directory data source
  auto train_cfg = dir / "train.cfg";
  std::ofstream(train_cfg) << "include " << g_configs << "/train_smoke.cfg\n"
                           << "data = dir\n"
                           << "data_dir = " << (dir / "data").string() << "\n"
                           << "num_classes = 2\nsteps = 1\n"
                           << "eval_interval = 1\nwindow = 3\n";
  RunResult t = run("train --config " + train_cfg.string() + " --out " +
                    (dir / "out").string() + " --seed 2");
  CHECK(t.exit_code == 0);
  CHECK(count_lines(slurp(dir / "out" / "metrics.csv")) == 2);
  std::filesystem::remove_all(dir);
}

int main(int argc, char** argv) {
  if (argc < 3) {
    std::fprintf(stderr,
                 "usage: test_cli <clstm-binary> <configs-dir> [doctest args]\n");
    return 1;
  }
  g_binary = std::filesystem::absolute(argv[1]).string();
  g_configs = std::filesystem::absolute(argv[2]).string();
  doctest::Context ctx;
  ctx.applyCommandLine(argc - 2, argv + 2);
  return ctx.run();
}
