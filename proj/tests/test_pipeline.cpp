#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "catw/workbench/pipeline.hpp"

using namespace catw;
namespace fs = std::filesystem;

namespace {

const char* kTiny = R"(
[corpus]
identities = 6
images_per_identity = 6
size = 16
protect_identities = 2
split = 2,2,2
[ae]
image_size = 16
base_channels = 8
steps = 60
[diffusion]
T = 20
width = 16
pretrain_steps = 30
learnability = true
memorize_steps = 20
customize_steps = 10
customize_seeds = 2
samples_per_identity = 2
[attack]
steps = 3
[cat]
steps = 20
sweep_ranks = 2,4
[report]
name = tiny
stages = all
)";

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("catw_pipe_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

PipelineResult run_quiet(const WorkbenchConfig& cfg, const fs::path& root, bool force = false) {
  static std::ostringstream sink;
  RunOptions opt;
  opt.out_root = root;
  opt.force = force;
  opt.log = &sink;
  return run_pipeline(cfg, cfg.report.stages, opt);
}

std::set<std::string> with_status(const PipelineResult& r, const std::string& status) {
  std::set<std::string> out;
  for (const auto& s : r.stages)
    if (s.status == status) out.insert(s.name);
  return out;
}

std::set<std::string> all_stages() {
  auto v = all_stage_names();
  return {v.begin(), v.end()};
}

int run_cli(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + CATW_CLI_PATH + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

// Shared run so the expensive first pass happens once.
class Pipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = fresh_dir("shared");
    cfg_ = parse_config(kTiny);
    first_ = run_quiet(cfg_, root_);
  }
  static inline fs::path root_;
  static inline WorkbenchConfig cfg_;
  static inline PipelineResult first_;
};

}  // namespace

TEST_F(Pipeline, FirstRunExecutesEveryStage) {
  ASSERT_TRUE(first_.ok) << first_.error;
  EXPECT_EQ(with_status(first_, "ran"), all_stages());
  const fs::path rep = first_.run_dir / "report";
  EXPECT_TRUE(fs::exists(rep / "report.json"));
  EXPECT_TRUE(fs::exists(rep / "synthetic.csv"));
  EXPECT_TRUE(fs::exists(rep / "synthetic_distance_bars.png"));
  EXPECT_TRUE(fs::exists(rep / "learnability_ratio_bands.png"));
  bool pca = false;
  for (const auto& e : fs::directory_iterator(rep)) pca |= e.path().filename().string().rfind("pca_", 0) == 0;
  EXPECT_TRUE(pca);
  for (const auto& d : fs::directory_iterator(first_.run_dir))
    EXPECT_EQ(d.path().string().find(".partial"), std::string::npos) << d.path();
}

TEST_F(Pipeline, ReportRowsCarrySeedAndDigest) {
  auto j = ojson::parse(slurp(first_.run_dir / "report" / "report.json"));
  ASSERT_FALSE(j["tables"].empty());
  for (const auto& t : j["tables"])
    for (const auto& r : t["rows"]) {
      EXPECT_EQ(r["corpus_digest"].get<std::string>().size(), 64u);
      EXPECT_TRUE(r.contains("seed"));
    }
}

TEST_F(Pipeline, RerunIsFullyCachedWithEqualDigests) {
  auto again = run_quiet(cfg_, root_);
  ASSERT_TRUE(again.ok) << again.error;
  EXPECT_EQ(with_status(again, "cached"), all_stages());
  for (const auto& s : again.stages) EXPECT_EQ(s.digest, first_.stage(s.name)->digest) << s.name;
  auto m = ojson::parse(slurp(root_ / "tiny" / "manifest.json"));
  EXPECT_GE(m["runs"].size(), 2u);
  EXPECT_EQ(m["runs"][0]["config_digest"], m["runs"][1]["config_digest"]);
}

TEST_F(Pipeline, ManifestOutputsMatchFiles) {
  auto m = ojson::parse(slurp(root_ / "tiny" / "manifest.json"));
  for (const auto& st : m["runs"].back()["stages"])
    for (const auto& o : st["outputs"]) {
      const fs::path p = root_ / "tiny" / o["path"].get<std::string>();
      ASSERT_TRUE(fs::exists(p)) << p;
      EXPECT_EQ(sha256_file(p), o["sha256"].get<std::string>()) << p;
    }
}

TEST_F(Pipeline, ThreatModelStagesNeverReadCleanData) {
  for (const std::string name : {"cat", "customize", "rank-sweep", "purify"}) {
    const auto* s = first_.stage(name);
    ASSERT_NE(s, nullptr);
    ASSERT_FALSE(s->inputs.empty()) << name;
    for (const auto& in : s->inputs) {
      EXPECT_NE(in.path.rfind("corpus/", 0), 0u) << name << " read " << in.path;
      EXPECT_NE(in.path.rfind("attack/noisy/", 0), 0u) << name << " read " << in.path;
    }
    // The allow-list itself rejects clean files.
    StageIO io(first_.run_dir, stage_def(name).allowed(cfg_));
    EXPECT_THROW(io.read(first_.run_dir / "corpus" / "index.json"), AccessViolation) << name;
    EXPECT_THROW(io.read(first_.run_dir / "attack" / "noisy" / "index.json"), AccessViolation) << name;
  }
}

TEST_F(Pipeline, EditingUpstreamKeysInvalidatesExactlyDownstream) {
  struct Case {
    std::string ini;
    std::set<std::string> reran;
  };
  const std::set<std::string> after_attack{"attack", "diagnose", "cat", "purify", "customize", "rank-sweep", "report"};
  std::set<std::string> after_ae = all_stages();
  after_ae.erase("corpus");
  const std::vector<Case> cases{
      {"[attack]\nsteps = 4\n", after_attack},
      {"[cat]\nlr = 0.0002\n", {"cat", "customize", "rank-sweep", "report"}},
      {"[cat]\npurify_sigma = 1.5\n", {"purify", "customize", "report"}},
      {"[cat]\nsweep_ranks = 2\n", {"rank-sweep", "report"}},
      {"[diffusion]\ncustomize_lr = 0.002\n", {"customize", "report"}},
      {"[ae]\nsteps = 61\n", after_ae},
  };
  for (const auto& c : cases) {
    const auto root = fresh_dir("edit");
    fs::copy(root_ / "tiny", root / "tiny", fs::copy_options::recursive);
    auto cfg = parse_config(c.ini, cfg_);
    auto r = run_quiet(cfg, root);
    ASSERT_TRUE(r.ok) << c.ini << r.error;
    EXPECT_EQ(with_status(r, "ran"), c.reran) << c.ini;
    std::set<std::string> cached = all_stages();
    for (const auto& s : c.reran) cached.erase(s);
    EXPECT_EQ(with_status(r, "cached"), cached) << c.ini;
  }
}

TEST_F(Pipeline, TamperedOutputForcesRerun) {
  const auto root = fresh_dir("tamper");
  fs::copy(root_ / "tiny", root / "tiny", fs::copy_options::recursive);
  ASSERT_FALSE(first_.stage("cat")->outputs.empty());
  std::ofstream(root / "tiny" / first_.stage("cat")->outputs.front().path, std::ios::app) << " ";
  auto r = run_quiet(cfg_, root);
  ASSERT_TRUE(r.ok) << r.error;
  EXPECT_EQ(r.stage("cat")->status, "ran");
  EXPECT_EQ(r.stage("attack")->status, "cached");
}

TEST_F(Pipeline, ForceRerunsAndReproducesBytes) {
  const auto root = fresh_dir("force");
  auto r = run_quiet(cfg_, root, true);
  ASSERT_TRUE(r.ok) << r.error;
  EXPECT_EQ(with_status(r, "ran"), all_stages());
  for (const auto& s : r.stages)
    for (const auto& o : s.outputs) {
      const auto* ref = first_.stage(s.name);
      auto it = std::find_if(ref->outputs.begin(), ref->outputs.end(), [&](const ArtifactRef& a) { return a.path == o.path; });
      ASSERT_NE(it, ref->outputs.end()) << o.path;
      EXPECT_EQ(it->sha256, o.sha256) << o.path;
    }
}

TEST(PipelineFailure, MissingUpstreamFailsAndKeepsPriorArtifacts) {
  const auto root = fresh_dir("fail");
  auto cfg = parse_config(kTiny);
  RunOptions opt;
  opt.out_root = root;
  std::ostringstream sink;
  opt.log = &sink;
  ASSERT_TRUE(run_pipeline(cfg, {"corpus"}, opt).ok);
  auto r = run_pipeline(cfg, {"cat"}, opt);
  EXPECT_FALSE(r.ok);
  EXPECT_FALSE(r.config_error);
  EXPECT_EQ(r.failed_stage, "cat");
  EXPECT_TRUE(fs::exists(root / "tiny" / "corpus" / "index.json"));
  EXPECT_FALSE(fs::exists(root / "tiny" / "cat"));
  auto m = ojson::parse(slurp(root / "tiny" / "manifest.json"));
  EXPECT_EQ(m["runs"].back()["stages"][0]["status"], "failed");
  EXPECT_FALSE(m["runs"].back()["stages"][0]["error"].get<std::string>().empty());
}

TEST(PipelineFailure, UnknownStageIsConfigError) {
  EXPECT_THROW(resolve_stages({"bogus"}), ConfigError);
  EXPECT_EQ(resolve_stages({"report", "corpus"}), (std::vector<std::string>{"corpus", "report"}));
}

TEST(Presets, AllParseAndValidate) {
  for (const auto& [name, text] : preset_table()) {
    auto c = preset_config(name);
    EXPECT_EQ(c.report.name, name);
    EXPECT_NO_THROW(resolve_stages(c.report.stages));
  }
  EXPECT_EQ(preset_config("fig3-desk").cat.rank_both, 128u);
  EXPECT_EQ(preset_config("rank-sweep").cat.sweep_ranks, (std::vector<std::size_t>{4, 8, 16, 32, 64, 128}));
  EXPECT_THROW(preset_config("fig9"), ConfigError);
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  std::ofstream(dir / "tiny.ini") << kTiny;
  std::ofstream(dir / "bad.ini") << "[attack]\nbudjet = 1\n";
  const std::string out = " --out " + (dir / "out").string();
  EXPECT_EQ(run_cli("synth --config " + (dir / "tiny.ini").string() + out), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "tiny" / "corpus" / "index.json"));
  EXPECT_EQ(run_cli("synth --config " + (dir / "bad.ini").string() + out), 1);
  EXPECT_EQ(run_cli("run no-such-preset" + out), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  // Stage failure: CAT before its upstream exists.
  EXPECT_EQ(run_cli("cat --config " + (dir / "tiny.ini").string() + out), 2);
}

TEST(Cli, OutputRootFromEnvironmentAndFlagPrecedence) {
  const auto dir = fresh_dir("cli_env");
  std::ofstream(dir / "tiny.ini") << kTiny;
  const std::string cfg = " --config " + (dir / "tiny.ini").string();
  EXPECT_EQ(run_cli("synth" + cfg, "CATW_OUT=" + (dir / "env").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "env" / "tiny" / "corpus" / "index.json"));
  EXPECT_EQ(run_cli("synth" + cfg + " --out " + (dir / "flag").string(), "CATW_OUT=" + (dir / "env2").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "flag" / "tiny" / "corpus"));
  EXPECT_FALSE(fs::exists(dir / "env2"));
}

TEST(Cli, SeedFlagChangesCorpus) {
  const auto dir = fresh_dir("cli_seed");
  std::ofstream(dir / "tiny.ini") << kTiny;
  const std::string cfg = " --config " + (dir / "tiny.ini").string();
  ASSERT_EQ(run_cli("synth" + cfg + " --seed 1 --out " + (dir / "a").string()), 0);
  ASSERT_EQ(run_cli("synth" + cfg + " --seed 2 --out " + (dir / "b").string()), 0);
  EXPECT_NE(slurp(dir / "a" / "tiny" / "corpus" / "images" / "id0_0.png"),
            slurp(dir / "b" / "tiny" / "corpus" / "images" / "id0_0.png"));
}

TEST(Ingest, CliIngestsFolderAsCorpus) {
  const auto dir = fresh_dir("cli_ingest");
  auto src = synth_corpus(CorpusSpec{"synthetic", 2, 3, 16, "", {1, 1, 1}}, 5);
  for (std::size_t n = 0; n < 6; ++n)
    write_png(dir / "faces" / ("p" + std::to_string(src.items[n].identity)) / (std::to_string(n) + ".png"),
              to_image8(src.images, n));
  std::ofstream(dir / "c.ini") << "[corpus]\nsize = 16\nimages_per_identity = 3\nsplit = 1,1,1\n"
                                  "[ae]\nimage_size = 16\n[report]\nname = ing\n";
  ASSERT_EQ(run_cli("ingest " + (dir / "faces").string() + " --config " + (dir / "c.ini").string() + " --out " +
                    (dir / "out").string()),
            0);
  auto c = read_corpus(dir / "out" / "ing" / "corpus");
  EXPECT_EQ(c.items.size(), 6u);
  EXPECT_TRUE(c.images.bit_equal(src.images));
}
