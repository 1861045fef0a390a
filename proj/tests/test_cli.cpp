#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "dopq/tensor.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kBin = DOPQ_BIN;

struct CmdResult {
  int exit_code = -1;
  std::string output;
};

CmdResult run_cmd(const std::string& args) {
  const fs::path tmp = fs::temp_directory_path() / "dopq_cli_out.txt";
  const std::string cmd = kBin + " " + args + " > " + tmp.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  CmdResult res;
  res.exit_code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  std::ifstream in(tmp);
  std::stringstream ss;
  ss << in.rdbuf();
  res.output = ss.str();
  return res;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "dopq_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_config(const fs::path& path, const std::string& body) {
  std::ofstream out(path);
  out << body;
}

}  // namespace

TEST_CASE("gen-data softmax rows: shape, concentration, determinism") {
  const fs::path dir = work_dir("gen1");
  const std::string out1 = (dir / "a").string();
  const std::string out2 = (dir / "b").string();
  CHECK(run_cmd("gen-data softmax-rows --rows 512 --cols 16 --sigma 3 --seed 9 --out " + out1)
            .exit_code == 0);
  CHECK(run_cmd("gen-data softmax-rows --rows 512 --cols 16 --sigma 3 --seed 9 --out " + out2)
            .exit_code == 0);

  const dopq::Tensor t = dopq::read_dqt1_f64(out1 + "/softmax_rows.dqt1");
  CHECK(t.shape() == std::vector<std::size_t>{512, 16});

  // Rows sum to one; mass concentrates near zero at sigma = 3.
  std::size_t below_small = 0, below_2_over_n = 0;
  bool any_above_half = false;
  for (std::size_t r = 0; r < 512; ++r) {
    double sum = 0;
    for (std::size_t c = 0; c < 16; ++c) {
      const double v = t.at2(r, c);
      sum += v;
      if (v < 0.1) ++below_small;
      if (v < 2.0 / 16.0) ++below_2_over_n;
      if (v > 0.5) any_above_half = true;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
  CHECK(static_cast<double>(below_small) / t.size() > 0.8);
  CHECK(static_cast<double>(below_2_over_n) / t.size() >= 0.8);
  CHECK(any_above_half);

  // Byte-identical regeneration.
  CHECK(slurp(out1 + "/softmax_rows.dqt1") == slurp(out2 + "/softmax_rows.dqt1"));
}

TEST_CASE("gen-data sigma zero gives uniform rows") {
  const fs::path dir = work_dir("gen2");
  CHECK(run_cmd("gen-data softmax-rows --rows 8 --cols 10 --sigma 0 --seed 1 --out " +
                dir.string()).exit_code == 0);
  const dopq::Tensor t = dopq::read_dqt1_f64((dir / "softmax_rows.dqt1").string());
  for (std::size_t i = 0; i < t.size(); ++i)
    CHECK(t[i] == doctest::Approx(0.1).epsilon(1e-12));
}

TEST_CASE("gen-data postln channels and token sequences") {
  const fs::path dir = work_dir("gen3");
  CHECK(run_cmd("gen-data postln-channels --rows 128 --cols 24 --outlier-channels 2 "
                "--outlier-factor 40 --seed 3 --out " + dir.string()).exit_code == 0);
  const dopq::Tensor t = dopq::read_dqt1_f64((dir / "postln_channels.dqt1").string());
  CHECK(t.shape() == std::vector<std::size_t>{128, 24});
  const dopq::ChannelStats cs = dopq::channel_minmax(t, 1);
  double widest_outlier = 0, widest_rest = 0;
  for (std::size_t c = 0; c < 24; ++c) {
    const double w = cs.max[c] - cs.min[c];
    if (c < 2) widest_outlier = std::max(widest_outlier, w);
    else widest_rest = std::max(widest_rest, w);
  }
  CHECK(widest_outlier > 5.0 * widest_rest);

  CHECK(run_cmd("gen-data token-sequences --rows 8 --cols 32 --seed 4 --out " +
                (dir / "tok").string()).exit_code == 0);
  const dopq::Tensor seq = dopq::read_dqt1_f64((dir / "tok" / "seq0.dqt1").string());
  CHECK(seq.shape() == std::vector<std::size_t>{8, 32});
}

TEST_CASE("gen-data unknown kind exits with usage error") {
  CHECK(run_cmd("gen-data nonsense --out /tmp/dopq_nope").exit_code == 2);
}

TEST_CASE("sweep-quantizers: CSV contract and error ordering") {
  const fs::path dir = work_dir("sweep");
  const CmdResult res =
      run_cmd("sweep-quantizers --rows 2048 --cols 16 --sigma 3 --seed 5 --bits 3 4 6 8 --out " +
              dir.string());
  CHECK(res.exit_code == 0);
  const std::string csv = slurp(dir / "sweep.csv");
  std::istringstream lines(csv);
  std::string header;
  std::getline(lines, header);
  CHECK(header == "quantizer,bitwidth,mse,max_err,d1,d2,d3,d4,d5,d6,d7,d8,d9,d10");

  struct Row {
    std::string name;
    int bits;
    double mse;
  };
  std::vector<Row> rows;
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    std::istringstream cells(line);
    Row r;
    std::string cell;
    std::getline(cells, r.name, ',');
    std::getline(cells, cell, ',');
    r.bits = std::stoi(cell);
    std::getline(cells, cell, ',');
    r.mse = std::stod(cell);
    int extra = 0;
    while (std::getline(cells, cell, ',')) ++extra;
    CHECK(extra == 11);  // max_err + 10 deciles
    rows.push_back(r);
  }
  CHECK(rows.size() == 20);  // 5 quantizers x 4 bitwidths

  auto mse_of = [&](const std::string& name, int bits) {
    for (const auto& r : rows)
      if (r.name == name && r.bits == bits) return r.mse;
    FAIL("missing row");
    return 0.0;
  };
  // Refinement monotonicity per quantizer.
  for (const std::string name : {"uniform", "log2", "logsqrt2", "sulq", "tanq"})
    CHECK(mse_of(name, 8) < mse_of(name, 3));
  // Fig. 2 analogue at b = 4 on the softmax corpus.
  CHECK(mse_of("tanq", 4) <= mse_of("uniform", 4));
}

TEST_CASE("run + report: determinism, artifacts, exit codes") {
  const fs::path dir = work_dir("run");
  const fs::path cfg = dir / "config.json";
  write_config(cfg, R"({
  "schema": 1,
  "seed": 11,
  "bits_w": 4,
  "bits_a": 4,
  "blocks": 1,
  "tokens": 8,
  "dim": 32,
  "heads": 4,
  "mlp_ratio": 2,
  "calib_sequences": 32,
  "eval_sequences": 64,
  "recon_passes": 1,
  "recon_sequences": 8
})");

  const std::string out1 = (dir / "r1").string();
  const std::string out2 = (dir / "r2").string();
  CHECK(run_cmd("run --config " + cfg.string() + " --out " + out1).exit_code == 0);
  CHECK(run_cmd("run --config " + cfg.string() + " --out " + out2).exit_code == 0);

  for (const char* f : {"report.json", "blocks.csv", "mad_tables.csv", "manifest.json"})
    CHECK(fs::exists(fs::path(out1) / f));
  CHECK(slurp(fs::path(out1) / "report.json") == slurp(fs::path(out2) / "report.json"));
  CHECK(slurp(fs::path(out1) / "blocks.csv") == slurp(fs::path(out2) / "blocks.csv"));

  const CmdResult rep = run_cmd("report " + out1);
  CHECK(rep.exit_code == 0);
  CHECK(rep.output.find("top-1 agreement") != std::string::npos);

  // CSVs parse as strict rectangles.
  std::istringstream lines(slurp(fs::path(out1) / "blocks.csv"));
  std::string line;
  std::getline(lines, line);
  CHECK(line == "block,stage,step,loss");
  while (std::getline(lines, line)) {
    if (line.empty()) continue;
    CHECK(std::count(line.begin(), line.end(), ',') == 3);
  }
  std::istringstream mad_lines(slurp(fs::path(out1) / "mad_tables.csv"));
  std::getline(mad_lines, line);
  CHECK(line == "block,site,statistic,value,mad");
  std::size_t mad_rows = 0;
  while (std::getline(mad_lines, line)) {
    if (line.empty()) continue;
    CHECK(std::count(line.begin(), line.end(), ',') == 4);
    ++mad_rows;
  }
  CHECK(mad_rows == 2 * 5);  // one table per post-LN site, five statistics each
}

TEST_CASE("run accepts command-line overrides of config fields") {
  const fs::path dir = work_dir("runover");
  const fs::path cfg = dir / "config.json";
  write_config(cfg, R"({
  "schema": 1,
  "seed": 11,
  "blocks": 1,
  "tokens": 8,
  "dim": 32,
  "heads": 4,
  "mlp_ratio": 2,
  "calib_sequences": 24,
  "eval_sequences": 32,
  "recon_passes": 1,
  "recon_sequences": 6
})");
  const std::string out1 = (dir / "base").string();
  const std::string out2 = (dir / "override").string();
  CHECK(run_cmd("run --config " + cfg.string() + " --out " + out1).exit_code == 0);
  CHECK(run_cmd("run --config " + cfg.string() +
                " --seed 12 --bits-w 3 --bits-a 3 --quantizer log2 --out " + out2)
            .exit_code == 0);
  const std::string rep = slurp(fs::path(out2) / "report.json");
  CHECK(rep.find("\"bits_w\": 3") != std::string::npos);
  CHECK(rep.find("\"softmax_quantizer\": \"log2\"") != std::string::npos);
  CHECK(rep.find("\"model_seed\": 12") != std::string::npos);
  CHECK(slurp(fs::path(out1) / "report.json") != rep);
  CHECK(run_cmd("run --config " + cfg.string() + " --quantizer bogus --out " +
                out2).exit_code == 2);
}

TEST_CASE("ablation subcommands produce their reports (smoke)") {
  const fs::path dir = work_dir("ablation");
  // Tiny sizes: this exercises the CLI wrapper, not the science.
  const CmdResult tanq = run_cmd(
      "ablation-tanq --seed 1 --calib-sequences 16 --eval-sequences 16 "
      "--recon-passes 1 --recon-sequences 4 --out " + (dir / "t").string());
  CHECK(tanq.exit_code == 0);
  CHECK(fs::exists(dir / "t" / "ablation_tanq.json"));
  CHECK(tanq.output.find("tanq") != std::string::npos);

  const CmdResult mosf = run_cmd(
      "ablation-mosf --seed 1 --outlier-factor 50 --calib-sequences 16 "
      "--eval-sequences 16 --recon-passes 1 --recon-sequences 4 --out " +
      (dir / "m").string());
  CHECK(mosf.exit_code == 0);
  CHECK(fs::exists(dir / "m" / "ablation_mosf.json"));
  CHECK(mosf.output.find("median") != std::string::npos);
}

TEST_CASE("run config validation names the missing field") {
  const fs::path dir = work_dir("badcfg");
  const fs::path cfg = dir / "config.json";
  write_config(cfg, R"({"schema": 1})");
  const CmdResult res = run_cmd("run --config " + cfg.string() + " --out " + dir.string());
  CHECK(res.exit_code == 2);
  CHECK(res.output.find("seed") != std::string::npos);

  write_config(cfg, R"({"seed": 1})");
  const CmdResult res2 = run_cmd("run --config " + cfg.string() + " --out " + dir.string());
  CHECK(res2.exit_code == 2);
  CHECK(res2.output.find("schema") != std::string::npos);

  write_config(cfg, "{ not json");
  CHECK(run_cmd("run --config " + cfg.string() + " --out " + dir.string()).exit_code == 2);
}

TEST_CASE("missing files produce data errors") {
  CHECK(run_cmd("run --config /nonexistent/config.json --out /tmp/dopq_x").exit_code == 3);
  CHECK(run_cmd("sweep-quantizers --corpus /nonexistent.dqt1 --out /tmp/dopq_x").exit_code == 3);
  CHECK(run_cmd("report /nonexistent_dir").exit_code == 3);
}

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cmd("").exit_code != 0);
  CHECK(run_cmd("run").exit_code != 0);  // missing required --config
}
