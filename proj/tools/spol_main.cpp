#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "spol/pipeline.hpp"

namespace {

using spol::pipeline::PipelineConfig;

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> fusion;
  std::optional<std::size_t> fuse_k;
  std::optional<std::string> records;
  std::vector<std::string> sets;
  bool no_mca = false, no_aux = false, no_gauss = false, no_seg = false, quiet = false;
};

void add_flags(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config_path, "flat 'key = value' config file")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "run seed");
  app->add_option("--out", o.out, "output directory");
  app->add_option("--fusion", o.fusion, "fusion kind")->check(CLI::IsMember({"mul", "add", "concat"}));
  app->add_option("--fuse-k", o.fuse_k, "number of fused stages")->check(CLI::Range(1, 4));
  app->add_flag("--no-mca", o.no_mca, "disable multiplicative channel attention");
  app->add_flag("--no-aux", o.no_aux, "disable the auxiliary loss");
  app->add_flag("--no-gauss", o.no_gauss, "disable Gaussian enhancement of CAMs");
  app->add_flag("--no-seg", o.no_seg, "skip the segmentation stage; boxes come from CAMs");
  app->add_option("--set", o.sets, "extra override, key=value (repeatable)");
  app->add_flag("-q,--quiet", o.quiet, "no progress output");
}

PipelineConfig build_config(const Overrides& o) {
  PipelineConfig c;
  if (!o.config_path.empty()) {
    std::ifstream in(o.config_path);
    std::stringstream ss;
    ss << in.rdbuf();
    c = PipelineConfig::from_text(ss.str(), c);
  }
  for (const auto& kv : o.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out_dir = *o.out;
  if (o.fusion) c.set("fusion", *o.fusion);
  if (o.fuse_k) c.fuse_k = *o.fuse_k;
  if (o.records) c.records = *o.records;
  if (o.no_mca) c.use_mca = false;
  if (o.no_aux) c.aux_loss = false;
  if (o.no_gauss) c.gauss = false;
  if (o.no_seg) c.seg = false;
  if (o.quiet) c.verbose = false;
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"spol: weakly supervised localization on synthetic shapes"};
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print every config key with its default and exit");

  Overrides pipe_o, stage_o;
  auto* pipe = app.add_subcommand("pipeline", "run every stage in order");
  add_flags(pipe, pipe_o);

  std::string stage_name;
  auto* stage = app.add_subcommand("stage", "run a single stage");
  stage->add_option("name", stage_name, "stage name")
      ->required()
      ->check(CLI::IsMember(spol::pipeline::stage_names()));
  add_flags(stage, stage_o);
  stage->add_option("--records", stage_o.records, "eval: hand-written records file instead of inference outputs");

  CLI11_PARSE(app, argc, argv);

  if (print_defaults) {
    std::cout << PipelineConfig{}.to_text();
    return 0;
  }
  if (!pipe->parsed() && !stage->parsed()) {
    std::cerr << app.help();
    return 2;
  }

  PipelineConfig config;
  try {
    config = build_config(pipe->parsed() ? pipe_o : stage_o);
    config.validate();
  } catch (const std::exception& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  }

  try {
    if (pipe->parsed()) {
      const auto m = spol::pipeline::run_pipeline(config);
      std::cout << spol::localization::metrics_to_text(m);
    } else {
      spol::pipeline::run_stage(stage_name, config);
      if (stage_name == "eval") {
        std::ifstream in(config.out_dir / spol::pipeline::paths::kReportText);
        std::cout << in.rdbuf();
      }
    }
  } catch (const spol::pipeline::StageError& e) {
    std::cerr << "error: stage " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
