// dopq: experiment driver for the desk-scale PTQ laboratory.
//
// Subcommands: gen-data, sweep-quantizers, ablation-tanq, ablation-mosf,
// run, report. Exit codes: 0 success, 2 usage error, 3 data error,
// 4 internal invariant violation.

#include <filesystem>
#include <optional>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dopq/experiments.hpp"
#include "dopq/pipeline.hpp"
#include "dopq/toyvit.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitInternal = 4;

void write_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << content;
  if (!out) throw dopq::DataError("cannot write " + path.string());
}

void write_manifest(const fs::path& dir, const std::string& subcommand,
                    std::uint64_t seed, const std::string& config_path) {
  json j{{"subcommand", subcommand},
         {"seed", seed},
         {"config", config_path},
         {"out", dir.string()},
         {"version", dopq::kVersion}};
  write_file(dir / "manifest.json", j.dump(2) + "\n");
}

// -- gen-data -----------------------------------------------------------------

int cmd_gen_data(const std::string& kind, std::uint64_t seed, std::size_t rows,
                 std::size_t cols, double sigma, int outlier_channels,
                 double outlier_factor, const std::string& out) {
  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  if (kind == "softmax-rows") {
    const dopq::Tensor t = dopq::make_softmax_rows(rows, cols, sigma, seed);
    dopq::write_dqt1((out_dir / "softmax_rows.dqt1").string(), t);
  } else if (kind == "postln-channels") {
    const dopq::Tensor t = dopq::make_postln_channels(rows, cols, seed,
                                                      outlier_channels, outlier_factor);
    dopq::write_dqt1((out_dir / "postln_channels.dqt1").string(), t);
  } else if (kind == "token-sequences") {
    dopq::ViTConfig cfg;
    cfg.tokens = static_cast<int>(rows);
    cfg.dim = static_cast<int>(cols);
    const auto corpus = dopq::make_token_corpus(cfg, 256, seed);
    for (std::size_t i = 0; i < corpus.size(); ++i)
      dopq::write_dqt1((out_dir / ("seq" + std::to_string(i) + ".dqt1")).string(),
                       corpus[i]);
  } else {
    std::cerr << "gen-data: unknown kind '" << kind << "'\n";
    return kExitUsage;
  }
  write_manifest(out_dir, "gen-data", seed, "");
  return 0;
}

// -- run config ----------------------------------------------------------------

dopq::PipelineConfig parse_run_config(const json& j) {
  dopq::PipelineConfig cfg;
  if (!j.contains("schema"))
    throw dopq::ConfigError("config: missing required field 'schema'");
  if (j.at("schema").get<int>() != 1)
    throw dopq::ConfigError("config: unsupported schema version");
  if (!j.contains("seed")) throw dopq::ConfigError("config: missing required field 'seed'");

  const std::uint64_t seed = j.at("seed").get<std::uint64_t>();
  cfg.model.seed = seed;
  cfg.data_seed = seed ^ 0x64617461ULL;

  auto get_int = [&](const char* key, int dflt) {
    return j.contains(key) ? j.at(key).get<int>() : dflt;
  };
  cfg.bits_w = get_int("bits_w", 4);
  cfg.bits_a = get_int("bits_a", 4);
  cfg.model.blocks = get_int("blocks", cfg.model.blocks);
  cfg.model.tokens = get_int("tokens", cfg.model.tokens);
  cfg.model.dim = get_int("dim", cfg.model.dim);
  cfg.model.heads = get_int("heads", cfg.model.heads);
  cfg.model.mlp_ratio = get_int("mlp_ratio", cfg.model.mlp_ratio);
  cfg.calib_sequences = static_cast<std::size_t>(
      get_int("calib_sequences", static_cast<int>(cfg.calib_sequences)));
  cfg.eval_sequences = static_cast<std::size_t>(
      get_int("eval_sequences", static_cast<int>(cfg.eval_sequences)));
  cfg.recon.passes = get_int("recon_passes", cfg.recon.passes);
  cfg.recon.max_sequences = static_cast<std::size_t>(
      get_int("recon_sequences", static_cast<int>(cfg.recon.max_sequences)));

  if (j.contains("quantizer")) {
    const auto kind = dopq::quant_kind_from_name(j.at("quantizer").get<std::string>());
    if (!kind) throw dopq::ConfigError("config: unknown field value for 'quantizer'");
    cfg.softmax_quantizer = *kind;
  }
  if (j.contains("select")) {
    const std::string sel = j.at("select").get<std::string>();
    if (sel == "median") cfg.select = dopq::ScaleSelect::kMedian;
    else if (sel == "mean") cfg.select = dopq::ScaleSelect::kMean;
    else throw dopq::ConfigError("config: field 'select' must be median or mean");
  }
  if (j.contains("recalibrate_after_reparam"))
    cfg.recalibrate_after_reparam = j.at("recalibrate_after_reparam").get<bool>();
  if (j.contains("stage3_tune_activations"))
    cfg.stage3_tune_activations = j.at("stage3_tune_activations").get<bool>();
  if (j.contains("quantized_input_recon"))
    cfg.quantized_input_recon = j.at("quantized_input_recon").get<bool>();

  const double factor = j.contains("outlier_factor")
                            ? j.at("outlier_factor").get<double>()
                            : 1.0;
  cfg.outliers = dopq::OutlierSpec::standard(factor, cfg.model.dim);
  if (j.contains("outlier_beta_shift"))
    cfg.outliers.beta_shift = j.at("outlier_beta_shift").get<double>();
  if (j.contains("outlier_channels"))
    cfg.outliers.channels_per_site = j.at("outlier_channels").get<int>();
  cfg.model.validate();
  return cfg;
}

struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> bits_w, bits_a;
  std::optional<std::string> quantizer;
  std::optional<double> outlier_factor;
};

int cmd_run(const std::string& config_path, const std::string& out,
            const RunOverrides& over) {
  std::ifstream in(config_path);
  if (!in) {
    std::cerr << "run: cannot open config " << config_path << "\n";
    return kExitData;
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    std::cerr << "run: config parse error: " << e.what() << "\n";
    return kExitUsage;
  }
  if (over.seed) j["seed"] = *over.seed;
  if (over.bits_w) j["bits_w"] = *over.bits_w;
  if (over.bits_a) j["bits_a"] = *over.bits_a;
  if (over.quantizer) j["quantizer"] = *over.quantizer;
  if (over.outlier_factor) j["outlier_factor"] = *over.outlier_factor;
  dopq::PipelineConfig cfg;
  try {
    cfg = parse_run_config(j);
  } catch (const dopq::ConfigError& e) {
    std::cerr << "run: " << e.what() << "\n";
    return kExitUsage;
  }

  const dopq::ModelWeights model = dopq::init_weights(cfg.model, cfg.outliers);
  const auto corpus =
      dopq::make_token_corpus(cfg.model, cfg.calib_sequences, cfg.data_seed);
  const dopq::RunReport report = dopq::run_dopq(model, corpus, cfg);

  const fs::path out_dir(out);
  fs::create_directories(out_dir);
  write_file(out_dir / "report.json", dopq::run_report_json(report));
  write_file(out_dir / "blocks.csv", dopq::blocks_csv(report));
  write_file(out_dir / "mad_tables.csv", dopq::mad_tables_csv(report));
  write_manifest(out_dir, "run", cfg.model.seed, config_path);

  std::cout << "run complete: top-1 agreement "
            << report.top1_agreement << ", block mse total "
            << report.block_mse_total << "\n";
  return 0;
}

int cmd_report(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "report.json");
  if (!in) {
    std::cerr << "report: no report.json under " << dir << "\n";
    return kExitData;
  }
  const json j = json::parse(in);
  std::cout << "dopq run report (" << j.value("version", "?") << ")\n"
            << "  W" << j.value("bits_w", 0) << "A" << j.value("bits_a", 0)
            << "  softmax=" << j.value("softmax_quantizer", "?")
            << "  select=" << j.value("select", "?") << "\n"
            << "  top-1 agreement: " << j.value("top1_agreement", 0.0) << "\n"
            << "  block mse total: " << j.value("block_mse_total", 0.0) << "\n";
  for (const auto& t : j.value("stage1", json::array()))
    std::cout << "  stage1 block " << t.value("block", 0) << ": "
              << t.value("initial_loss", 0.0) << " -> " << t.value("final_loss", 0.0)
              << "\n";
  for (const auto& t : j.value("stage3", json::array()))
    std::cout << "  stage3 block " << t.value("block", 0) << ": "
              << t.value("initial_loss", 0.0) << " -> " << t.value("final_loss", 0.0)
              << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dopq: desk-scale post-training quantization laboratory"};
  app.require_subcommand(1);

  std::uint64_t seed = 1;
  std::string out = "out";

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate synthetic corpora");
  std::string gen_kind;
  std::size_t gen_rows = 4096, gen_cols = 16;
  double gen_sigma = 3.0;
  int gen_outlier_channels = 0;
  double gen_outlier_factor = 1.0;
  gen->add_option("kind", gen_kind, "softmax-rows | postln-channels | token-sequences")
      ->required();
  gen->add_option("--rows", gen_rows, "rows (or tokens for token-sequences)");
  gen->add_option("--cols", gen_cols, "columns (or dim for token-sequences)");
  gen->add_option("--sigma", gen_sigma, "logit standard deviation");
  gen->add_option("--outlier-channels", gen_outlier_channels);
  gen->add_option("--outlier-factor", gen_outlier_factor);
  gen->add_option("--seed", seed);
  gen->add_option("--out", out);

  // sweep-quantizers
  auto* sweep = app.add_subcommand("sweep-quantizers",
                                   "round-trip error sweep over the quantizer suite");
  std::string sweep_corpus;
  std::vector<int> sweep_bits{3, 4, 6, 8};
  double sweep_sigma = 3.0;
  std::size_t sweep_rows = 4096, sweep_cols = 16;
  sweep->add_option("--corpus", sweep_corpus, "DQT1 corpus path (generated when absent)");
  sweep->add_option("--bits", sweep_bits, "bitwidths");
  sweep->add_option("--sigma", sweep_sigma);
  sweep->add_option("--rows", sweep_rows);
  sweep->add_option("--cols", sweep_cols);
  sweep->add_option("--seed", seed);
  sweep->add_option("--out", out);

  // shared sizing knobs for the ablation drivers
  int abl_calib = 128, abl_eval = 512, abl_passes = 2, abl_recon_seq = 12;

  // ablation-tanq
  auto* abl_tanq = app.add_subcommand("ablation-tanq",
                                      "post-Softmax quantizer ablation (FP weights)");
  int tanq_bits_a = 3;
  abl_tanq->add_option("--bits-a", tanq_bits_a);
  abl_tanq->add_option("--seed", seed);
  abl_tanq->add_option("--calib-sequences", abl_calib);
  abl_tanq->add_option("--eval-sequences", abl_eval);
  abl_tanq->add_option("--recon-passes", abl_passes);
  abl_tanq->add_option("--recon-sequences", abl_recon_seq);
  abl_tanq->add_option("--out", out);

  // ablation-mosf
  auto* abl_mosf = app.add_subcommand("ablation-mosf",
                                      "median vs mean scaling-factor comparison");
  std::vector<double> mosf_factors{1.0, 10.0, 50.0};
  int mosf_bits = 4;
  abl_mosf->add_option("--outlier-factor", mosf_factors, "outlier factors");
  abl_mosf->add_option("--bits", mosf_bits, "W and A bitwidth");
  abl_mosf->add_option("--seed", seed);
  abl_mosf->add_option("--calib-sequences", abl_calib);
  abl_mosf->add_option("--eval-sequences", abl_eval);
  abl_mosf->add_option("--recon-passes", abl_passes);
  abl_mosf->add_option("--recon-sequences", abl_recon_seq);
  abl_mosf->add_option("--out", out);

  // run
  auto* run = app.add_subcommand("run", "full three-stage pipeline from a config file");
  std::string run_config;
  RunOverrides over;
  std::uint64_t run_seed = 0;
  int run_bits_w = 0, run_bits_a = 0;
  std::string run_quantizer;
  double run_outlier_factor = -1.0;
  run->add_option("--config", run_config)->required();
  auto* o_seed = run->add_option("--seed", run_seed, "override the config seed");
  auto* o_bw = run->add_option("--bits-w", run_bits_w);
  auto* o_ba = run->add_option("--bits-a", run_bits_a);
  auto* o_q = run->add_option("--quantizer", run_quantizer,
                              "post-Softmax quantizer override");
  auto* o_of = run->add_option("--outlier-factor", run_outlier_factor);
  run->add_option("--out", out);

  // report
  auto* rep = app.add_subcommand("report", "summarize a run directory");
  std::string rep_dir;
  rep->add_option("dir", rep_dir)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_kind, seed, gen_rows, gen_cols, gen_sigma,
                          gen_outlier_channels, gen_outlier_factor, out);
    if (sweep->parsed()) {
      dopq::Tensor corpus;
      if (!sweep_corpus.empty()) {
        corpus = dopq::read_dqt1_f64(sweep_corpus);
      } else {
        corpus = dopq::make_softmax_rows(sweep_rows, sweep_cols, sweep_sigma, seed);
      }
      const auto rows = dopq::sweep_quantizers(corpus, sweep_bits);
      const fs::path out_dir(out);
      write_file(out_dir / "sweep.csv", dopq::sweep_csv(rows));
      write_manifest(out_dir, "sweep-quantizers", seed, sweep_corpus);
      std::cout << dopq::sweep_csv(rows);
      return 0;
    }
    if (abl_tanq->parsed()) {
      dopq::PipelineConfig base;
      base.calib_sequences = static_cast<std::size_t>(abl_calib);
      base.eval_sequences = static_cast<std::size_t>(abl_eval);
      base.recon.passes = abl_passes;
      base.recon.grid_points = 17;
      base.recon.max_sequences = static_cast<std::size_t>(abl_recon_seq);
      const auto report = dopq::ablation_tanq(seed, tanq_bits_a, &base);
      const fs::path out_dir(out);
      write_file(out_dir / "ablation_tanq.json", dopq::tanq_ablation_json(report));
      write_manifest(out_dir, "ablation-tanq", seed, "");
      std::cout << dopq::tanq_ablation_json(report);
      return 0;
    }
    if (abl_mosf->parsed()) {
      dopq::PipelineConfig base;
      base.bits_w = mosf_bits;
      base.bits_a = mosf_bits;
      base.calib_sequences = static_cast<std::size_t>(abl_calib);
      base.eval_sequences = static_cast<std::size_t>(abl_eval);
      base.recon.passes = abl_passes;
      base.recon.grid_points = 17;
      base.recon.max_sequences = static_cast<std::size_t>(abl_recon_seq);
      const auto report = dopq::ablation_mosf(seed, mosf_factors, &base);
      const fs::path out_dir(out);
      write_file(out_dir / "ablation_mosf.json", dopq::mosf_ablation_json(report));
      write_manifest(out_dir, "ablation-mosf", seed, "");
      for (const auto& e : report.entries) {
        std::cout << "factor " << e.factor << ": median mse "
                  << e.ab.median_run.block_mse_total << ", mean mse "
                  << e.ab.mean_run.block_mse_total << ", median<=mean "
                  << (e.ab.median_leq_mean ? "yes" : "no") << "\n";
      }
      return 0;
    }
    if (run->parsed()) {
      if (o_seed->count()) over.seed = run_seed;
      if (o_bw->count()) over.bits_w = run_bits_w;
      if (o_ba->count()) over.bits_a = run_bits_a;
      if (o_q->count()) over.quantizer = run_quantizer;
      if (o_of->count()) over.outlier_factor = run_outlier_factor;
      return cmd_run(run_config, out, over);
    }
    if (rep->parsed()) return cmd_report(rep_dir);
  } catch (const dopq::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const dopq::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const dopq::DomainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const dopq::DimensionError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitUsage;
}
