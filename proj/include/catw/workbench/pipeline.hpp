#pragma once

// Stage registry, memoized sequential runner, manifests and presets.
//
// A stage's digest hashes its name, stage seed, the config keys it consumes
// and the digests of its upstream stages, so it is a pure function of the
// config. A stage is cached when its stage.json carries the expected digest
// and every recorded output still matches its sha256.

#include <chrono>
#include <map>
#include <optional>

#include "catw/workbench/stages.hpp"

namespace catw {

struct StageDef {
  std::string name;
  std::string dir;
  std::function<std::vector<std::string>(const WorkbenchConfig&)> keys;      // consumed config keys
  std::function<std::vector<std::string>(const WorkbenchConfig&)> upstream;  // required stages
  std::vector<std::string> optional_upstream;                                // used when current
  // Read allow-list (run-relative prefixes); nullopt means unrestricted.
  std::function<std::optional<std::vector<std::string>>(const WorkbenchConfig&)> allowed;
  std::function<void(StageContext&)> run;
};

namespace detail {

inline std::vector<std::string> section_keys(const std::string& section) {
  std::vector<std::string> out;
  for (const auto& b : config_keys())
    if (b.section == section) out.push_back(b.path());
  return out;
}

inline std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline auto fixed(std::vector<std::string> v) {
  return [v](const WorkbenchConfig&) { return v; };
}

inline auto unrestricted() {
  return [](const WorkbenchConfig&) -> std::optional<std::vector<std::string>> { return std::nullopt; };
}

inline const std::vector<std::string> kScheduleKeys{"diffusion.T", "diffusion.beta_start", "diffusion.beta_end"};

}  // namespace detail

inline const std::vector<StageDef>& stage_defs() {
  using namespace detail;
  static const std::vector<StageDef> defs{
      {"corpus", "corpus", fixed(section_keys("corpus")), fixed({}), {}, unrestricted(), stage_corpus},
      {"train-ae", "ae", fixed(section_keys("ae")), fixed({"corpus"}), {}, unrestricted(), stage_train_ae},
      {"train-ldm", "ldm",
       fixed(concat(kScheduleKeys, {"corpus.protect_identities", "diffusion.width", "diffusion.time_dim", "diffusion.attention",
                                    "diffusion.pretrain_steps", "diffusion.pretrain_batch", "diffusion.pretrain_lr"})),
       fixed({"corpus", "train-ae"}), {}, unrestricted(), stage_train_ldm},
      {"attack", "attack", fixed(concat(concat(section_keys("attack"), kScheduleKeys), {"corpus.protect_identities"})),
       [](const WorkbenchConfig& c) {
         std::vector<std::string> up{"corpus", "train-ae"};
         for (const auto& n : objective_names(c))
           if (needs_diffusion(parse_objective(n))) {
             up.push_back("train-ldm");
             break;
           }
         return up;
       },
       {}, unrestricted(), stage_attack},
      {"diagnose", "diagnose",
       [](const WorkbenchConfig& c) {
         std::vector<std::string> k{"report.pca", "diffusion.learnability"};
         if (c.diffusion.learnability)
           k = concat(concat(k, kScheduleKeys), {"diffusion.memorize_steps", "diffusion.memorize_lr", "diffusion.adapter_rank",
                                                 "diffusion.adapter_lr"});
         return k;
       },
       [](const WorkbenchConfig& c) {
         std::vector<std::string> up{"corpus", "train-ae", "attack"};
         if (c.diffusion.learnability) up.push_back("train-ldm");
         return up;
       },
       {}, unrestricted(), stage_diagnose},
      {"cat", "cat", fixed({"cat.settings", "cat.rank_both", "cat.rank_single", "cat.batch", "cat.steps", "cat.lr"}),
       fixed({"train-ae", "attack"}), {},
       [](const WorkbenchConfig& c) { return attack_reads(objective_names(c), {"ae/"}); }, stage_cat},
      {"purify", "purify", fixed({"cat.purify_ksize", "cat.purify_sigma"}), fixed({"attack"}), {},
       [](const WorkbenchConfig& c) { return attack_reads(objective_names(c), {}); }, stage_purify},
      {"customize", "customize",
       fixed(concat(kScheduleKeys, {"diffusion.customize_steps", "diffusion.customize_batch", "diffusion.customize_seeds",
                                    "diffusion.samples_per_identity", "diffusion.customize_lr", "cat.customize_setting"})),
       fixed({"train-ae", "train-ldm", "attack", "cat"}), {"purify"},
       [](const WorkbenchConfig& c) {
         std::vector<std::string> extra{"ae/", "ldm/", "cat/" + c.cat.customize_setting + "/"};
         for (const auto& o : objective_names(c)) extra.push_back("purify/" + o + "/");
         return attack_reads(objective_names(c), extra);
       },
       stage_customize},
      {"rank-sweep", "ranksweep",
       fixed({"cat.sweep_ranks", "cat.sweep_setting", "cat.sweep_objectives", "cat.batch", "cat.steps", "cat.lr"}),
       fixed({"train-ae", "attack"}), {},
       [](const WorkbenchConfig& c) { return attack_reads(sweep_objectives(c), {"ae/"}); }, stage_rank_sweep},
      {"report", "report", fixed({}), fixed({"corpus", "train-ae", "attack"}),
       {"train-ldm", "diagnose", "cat", "purify", "customize", "rank-sweep"}, unrestricted(), stage_report},
  };
  return defs;
}

inline const StageDef& stage_def(const std::string& name) {
  for (const auto& d : stage_defs())
    if (d.name == name) return d;
  throw ConfigError("unknown stage '" + name + "'");
}

inline std::vector<std::string> all_stage_names() {
  std::vector<std::string> out;
  for (const auto& d : stage_defs()) out.push_back(d.name);
  return out;
}

/// Expands "all", validates names and returns them in pipeline order.
inline std::vector<std::string> resolve_stages(const std::vector<std::string>& requested) {
  std::set<std::string> want;
  for (const auto& s : requested) {
    if (s == "all") {
      for (const auto& n : all_stage_names()) want.insert(n);
      continue;
    }
    stage_def(s);
    want.insert(s);
  }
  std::vector<std::string> out;
  for (const auto& n : all_stage_names())
    if (want.count(n)) out.push_back(n);
  if (out.empty()) throw ConfigError("no stages requested");
  return out;
}

inline std::string config_digest(const WorkbenchConfig& c) { return sha256_hex(canonical_ini(c)); }

struct StageRecord {
  std::string name;
  std::string status;  // ran | cached | failed
  std::string digest;
  std::vector<ArtifactRef> inputs, outputs;
  double wall_seconds = 0.0;
  std::string error;
};

inline ojson stage_record_json(const StageRecord& r) {
  ojson ins = ojson::array(), outs = ojson::array();
  for (const auto& a : r.inputs) ins.push_back(ojson{{"path", a.path}, {"sha256", a.sha256}});
  for (const auto& a : r.outputs) outs.push_back(ojson{{"path", a.path}, {"sha256", a.sha256}});
  ojson j{{"name", r.name}, {"status", r.status}, {"digest", r.digest}, {"inputs", ins}, {"outputs", outs},
          {"wall_seconds", r.wall_seconds}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

struct RunOptions {
  fs::path out_root = "catw-out";
  bool force = false;
  std::ostream* log = &std::cerr;
};

struct PipelineResult {
  bool ok = true;
  bool config_error = false;
  std::string failed_stage;
  std::string error;
  fs::path run_dir;
  std::vector<StageRecord> stages;
  ojson manifest_entry;

  const StageRecord* stage(const std::string& n) const {
    for (const auto& s : stages)
      if (s.name == n) return &s;
    return nullptr;
  }
};

/// Digest and cache bookkeeping for one run directory and config.
class StageLedger {
 public:
  StageLedger(const WorkbenchConfig& cfg, fs::path run_dir) : cfg_(cfg), run_dir_(std::move(run_dir)) {}

  std::uint64_t stage_seed(const std::string& name) const { return seed_for(cfg_.report.seed, name); }

  std::string digest(const std::string& name) {
    const auto& d = stage_def(name);
    if (d.optional_upstream.empty())
      if (auto it = memo_.find(name); it != memo_.end()) return it->second;
    Sha256 h;
    h.field("stage").field(name).field(std::to_string(stage_seed(name)));
    for (const auto& k : d.keys(cfg_)) h.field(k).field(config_value(cfg_, k));
    for (const auto& u : d.upstream(cfg_)) h.field(u).field(digest(u));
    for (const auto& u : d.optional_upstream)
      if (current(u)) h.field("optional:" + u).field(digest(u));
    if (name == "report") h.field("config").field(config_digest(cfg_));
    const std::string out = h.hex();
    if (d.optional_upstream.empty()) memo_[name] = out;
    return out;
  }

  fs::path stage_json(const std::string& name) const { return run_dir_ / stage_def(name).dir / "stage.json"; }

  /// Recorded stage.json, if it exists and parses.
  std::optional<nlohmann::json> recorded(const std::string& name) const {
    const auto p = stage_json(name);
    if (!fs::exists(p)) return std::nullopt;
    try {
      return nlohmann::json::parse(detail::read_file(p));
    } catch (const std::exception&) {
      return std::nullopt;
    }
  }

  /// True when the stage's outputs on disk match the digest the config implies.
  bool current(const std::string& name) {
    const auto rec = recorded(name);
    if (!rec || rec->value("digest", "") != digest(name)) return false;
    for (const auto& o : rec->at("outputs")) {
      const fs::path p = run_dir_ / o.at("path").get<std::string>();
      if (!fs::exists(p) || sha256_file(p) != o.at("sha256").get<std::string>()) return false;
    }
    return true;
  }

 private:
  const WorkbenchConfig& cfg_;
  fs::path run_dir_;
  std::map<std::string, std::string> memo_;
};

namespace detail {

inline std::vector<ArtifactRef> scan_outputs(const fs::path& dir, const std::string& prefix) {
  std::vector<ArtifactRef> out;
  if (!fs::exists(dir)) return out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) {
      const std::string rel = fs::path(e.path()).lexically_relative(dir).generic_string();
      if (rel == "stage.json") continue;
      out.push_back({prefix + "/" + rel, sha256_file(e.path())});
    }
  std::sort(out.begin(), out.end(), [](const ArtifactRef& a, const ArtifactRef& b) { return a.path < b.path; });
  return out;
}

inline std::vector<ArtifactRef> refs_from_json(const nlohmann::json& j) {
  std::vector<ArtifactRef> out;
  for (const auto& e : j) out.push_back(e.get<ArtifactRef>());
  return out;
}

/// Appends one entry to <run>/manifest.json.
inline void append_manifest(const fs::path& run_dir, const ojson& entry) {
  const fs::path p = run_dir / "manifest.json";
  ojson m{{"schema", "manifest/1"}, {"runs", ojson::array()}};
  if (fs::exists(p)) {
    try {
      m = ojson::parse(read_file(p));
    } catch (const std::exception& e) {
      throw LoadError("existing manifest " + p.string() + " is unreadable: " + e.what());
    }
  }
  m["runs"].push_back(entry);
  write_file_atomic(p, m.dump(1) + "\n");
}

}  // namespace detail

/// Runs the requested stages in pipeline order under <out_root>/<report.name>.
inline PipelineResult run_pipeline(const WorkbenchConfig& cfg, const std::vector<std::string>& requested, const RunOptions& opt = {}) {
  validate_config(cfg);
  const auto stages = resolve_stages(requested);
  PipelineResult res;
  res.run_dir = opt.out_root / cfg.report.name;
  fs::create_directories(res.run_dir);
  std::ostream& log = *opt.log;
  StageLedger ledger(cfg, res.run_dir);
  const std::string cdigest = config_digest(cfg);

  for (const auto& name : stages) {
    const auto& def = stage_def(name);
    StageRecord rec;
    rec.name = name;
    try {
      rec.digest = ledger.digest(name);
      for (const auto& u : def.upstream(cfg))
        if (!ledger.current(u))
          throw std::runtime_error("stage '" + name + "' needs current outputs of '" + u + "'; run that stage first");
      if (!opt.force && ledger.current(name)) {
        const auto j = *ledger.recorded(name);
        rec.status = "cached";
        rec.inputs = detail::refs_from_json(j.at("inputs"));
        rec.outputs = detail::refs_from_json(j.at("outputs"));
        log << "[" << name << "] cached\n";
        res.stages.push_back(rec);
        continue;
      }
      log << "[" << name << "] running\n";
      const fs::path final_dir = res.run_dir / def.dir;
      const fs::path partial = res.run_dir / (def.dir + ".partial");
      fs::remove_all(partial);
      fs::create_directories(partial);
      StageIO io(res.run_dir, def.allowed(cfg));
      StageContext ctx{cfg,
                       res.run_dir,
                       partial,
                       ledger.stage_seed(name),
                       io,
                       log,
                       [&](const std::string& s) { return ledger.current(s); },
                       [&](const std::string& s) { return ledger.digest(s); },
                       cdigest};
      const auto t0 = std::chrono::steady_clock::now();
      try {
        def.run(ctx);
      } catch (...) {
        fs::remove_all(partial);
        throw;
      }
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      rec.inputs = io.inputs();
      rec.outputs = detail::scan_outputs(partial, def.dir);
      fs::remove_all(final_dir);
      fs::rename(partial, final_dir);
      nlohmann::json sj{{"stage", name}, {"digest", rec.digest}, {"inputs", rec.inputs}, {"outputs", rec.outputs}};
      detail::write_file_atomic(final_dir / "stage.json", sj.dump(1) + "\n");
      rec.status = "ran";
      log << "[" << name << "] done in " << rec.wall_seconds << " s\n";
      res.stages.push_back(rec);
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = e.what();
      res.ok = false;
      res.config_error = dynamic_cast<const ConfigError*>(&e) != nullptr;
      res.failed_stage = name;
      res.error = e.what();
      log << "[" << name << "] failed: " << e.what() << "\n";
      res.stages.push_back(rec);
      break;
    }
  }

  ojson st = ojson::array();
  for (const auto& r : res.stages) st.push_back(stage_record_json(r));
  res.manifest_entry = ojson{{"seed", cfg.report.seed},
                             {"config_digest", cdigest},
                             {"config", canonical_ini(cfg)},
                             {"environment", environment_note()},
                             {"thresholds", pilot_thresholds()},
                             {"stages", st}};
  detail::append_manifest(res.run_dir, res.manifest_entry);
  return res;
}

// ---------------------------------------------------------------------------
// Presets.

inline const std::map<std::string, std::string>& preset_table() {
  static const std::map<std::string, std::string> p{
      {"fig3-desk",
       "[report]\nname = fig3-desk\nstages = corpus, train-ae, train-ldm, attack, diagnose, cat, report\n"},
      {"fig4-desk",
       "[diffusion]\nlearnability = true\n[report]\nname = fig4-desk\n"
       "stages = corpus, train-ae, train-ldm, attack, diagnose, report\n"},
      {"full-desk", "[diffusion]\nlearnability = true\n[report]\nname = full-desk\nstages = all\n"},
      {"rank-sweep",
       "[report]\nname = rank-sweep\nstages = corpus, train-ae, train-ldm, attack, rank-sweep, report\n"},
  };
  return p;
}

inline bool is_preset(const std::string& name) { return preset_table().count(name) > 0; }

inline WorkbenchConfig preset_config(const std::string& name) {
  auto it = preset_table().find(name);
  if (it == preset_table().end()) throw ConfigError("unknown preset '" + name + "'");
  return parse_config(it->second);
}

/// Output root: explicit flag, then CATW_OUT, then ./catw-out.
inline fs::path resolve_out_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("CATW_OUT"); env && *env) return env;
  return "catw-out";
}

}  // namespace catw
