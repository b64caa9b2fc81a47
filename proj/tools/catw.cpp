// catw: workbench command line.
//
//   catw run fig3-desk --seed 0
//   catw train-ae --config my.ini --force
//
// Exit codes: 0 success, 1 config error, 2 stage failure.

#include <CLI11.hpp>
#include <iostream>

#include "catw/workbench/pipeline.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> stages;
  bool force = false;
};

int run_stages(catw::WorkbenchConfig cfg, std::vector<std::string> stages, const Flags& f) {
  if (f.seed) cfg.report.seed = *f.seed;
  if (!f.stages.empty()) {
    std::vector<std::string> picked;
    for (const auto& s : f.stages)
      for (const auto& part : catw::detail::split_list(s)) picked.push_back(part);
    stages = picked;
  }
  catw::RunOptions opt;
  opt.out_root = catw::resolve_out_root(f.out);
  opt.force = f.force;
  const auto res = catw::run_pipeline(cfg, stages, opt);
  if (!res.ok) {
    std::cerr << "catw: stage '" << res.failed_stage << "' failed: " << res.error << "\n";
    return res.config_error ? 1 : 2;
  }
  std::cout << "run directory: " << res.run_dir.string() << "\n";
  for (const auto& s : res.stages) std::cout << "  " << s.name << ": " << s.status << "\n";
  return 0;
}

catw::WorkbenchConfig base_config(const Flags& f) {
  return f.config.empty() ? catw::WorkbenchConfig{} : catw::load_config(f.config);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale workbench for contrastive adversarial training of latent autoencoders"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "INI config file");
    sub->add_option("--seed", f.seed, "global seed (overrides [report] seed)");
    sub->add_option("--out", f.out, "output root (default: $CATW_OUT or ./catw-out)");
    sub->add_option("--stage", f.stages, "restrict to these stages (comma separated)");
    sub->add_flag("--force", f.force, "re-run stages even when cached");
  };

  const std::vector<std::pair<std::string, std::string>> single{
      {"synth", "corpus"},       {"train-ae", "train-ae"},   {"train-ldm", "train-ldm"}, {"attack", "attack"},
      {"diagnose", "diagnose"},  {"cat", "cat"},             {"customize", "customize"}, {"purify", "purify"},
      {"report", "report"},      {"rank-sweep", "rank-sweep"}};
  std::map<CLI::App*, std::string> stage_of;
  for (const auto& [cmd, stage] : single) {
    auto* sub = app.add_subcommand(cmd, "run the " + stage + " stage");
    add_common(sub);
    stage_of[sub] = stage;
  }

  std::string ingest_path;
  auto* ingest = app.add_subcommand("ingest", "ingest an image folder as the corpus");
  ingest->add_option("path", ingest_path, "folder of PNG/PPM images (one subfolder per identity)")->required();
  add_common(ingest);

  std::string target;
  auto* run = app.add_subcommand("run", "run a preset or a config file");
  run->add_option("target", target, "preset name (fig3-desk, fig4-desk, full-desk, rank-sweep) or config path")->required();
  add_common(run);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (run->parsed()) {
      catw::WorkbenchConfig cfg = catw::is_preset(target) ? catw::preset_config(target) : catw::load_config(target);
      if (!f.config.empty()) throw catw::ConfigError("run takes its config as the positional argument; drop --config");
      return run_stages(cfg, cfg.report.stages, f);
    }
    if (ingest->parsed()) {
      auto cfg = base_config(f);
      cfg.corpus.kind = "folder";
      cfg.corpus.path = ingest_path;
      catw::validate_config(cfg);
      return run_stages(cfg, {"corpus"}, f);
    }
    for (const auto& [sub, stage] : stage_of)
      if (sub->parsed()) return run_stages(base_config(f), {stage}, f);
  } catch (const catw::ConfigError& e) {
    std::cerr << "catw: config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "catw: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
