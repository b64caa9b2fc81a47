#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "catw/metrics/report.hpp"

using namespace catw;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("catw_report_" + name);
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

MetricTable sample_table() {
  MetricTable t;
  t.name = "synthetic";
  for (std::string a : {"encoder_away", "recon"}) {
    auto& none = t.row(a, "none");
    none.seed = 7;
    none.corpus_digest = "abc";
    none.values = {{"d_a", 0.2}, {"d_r", 0.03}, {"abs_da_dr", 0.17}, {"s_c", 0.05}, {"s_r", 0.09}, {"s_a", 0.11}};
    auto& both = t.row(a, "both");
    both.seed = 7;
    both.corpus_digest = "abc";
    both.values = {{"d_a", 0.2}, {"d_r", 0.03}, {"d_a_cat", 0.1 / 3.0}, {"frechet", 1e-300}, {"psnr", 27.25}};
  }
  return t;
}

}  // namespace

TEST(Report, EmptyTableGivesHeaderOnlyCsv) {
  MetricTable t;
  t.name = "empty";
  const std::string csv = table_to_csv(t);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1);
  EXPECT_EQ(csv.rfind("attack,setting,seed,corpus_digest,d_a,", 0), 0u);
  auto j = ojson::parse(table_to_json(t).dump());
  EXPECT_TRUE(j.at("rows").is_array());
  EXPECT_TRUE(j.at("rows").empty());
}

TEST(Report, CsvOneRowPerKeyAndBlankForMissing) {
  auto t = sample_table();
  const std::string csv = table_to_csv(t);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  // Every line has the full column count.
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) EXPECT_EQ(std::count(line.begin(), line.end(), ','), 4 + 13 - 1);
  EXPECT_NE(csv.find("recon,both,7,abc,0.2,0.03,0.03333333333333333,"), std::string::npos);
}

TEST(Report, TableJsonRoundTripIsByteIdentical) {
  auto t = sample_table();
  const std::string a = table_to_json(t).dump(2);
  const std::string b = table_to_json(table_from_json(ojson::parse(a))).dump(2);
  EXPECT_EQ(a, b);
  // Values survive bit-exactly, including extreme magnitudes.
  auto back = table_from_json(ojson::parse(a));
  EXPECT_EQ(*back.find("recon", "both")->get("d_a_cat"), 0.1 / 3.0);
  EXPECT_EQ(*back.find("recon", "both")->get("frechet"), 1e-300);
  EXPECT_FALSE(back.find("recon", "both")->get("s_c").has_value());
}

TEST(Report, ReportJsonRoundTripIsByteIdentical) {
  Report r;
  r.manifest = ojson{{"seed", 3}, {"config_digest", "ff"}};
  r.tables.push_back(sample_table());
  r.extras["pca"]["latents"]["points"] = ojson::array({ojson::array({0.5, -1.0, 0}), ojson::array({1.5, 2.0, 1})});
  const std::string a = report_to_json(r).dump(2);
  EXPECT_EQ(report_to_json(report_from_json(ojson::parse(a))).dump(2), a);
  EXPECT_EQ(ojson::parse(a).at("schema"), "report/1");
}

TEST(Report, WrongSchemaRejected) {
  EXPECT_THROW(report_from_json(ojson{{"schema", "report/0"}}), LoadError);
}

TEST(Report, NonFiniteBecomesNullAndBlank) {
  MetricTable t;
  t.name = "nf";
  t.row("recon", "none").values = {{"d_a", NAN}, {"d_r", INFINITY}};
  EXPECT_TRUE(table_to_json(t)["rows"][0]["values"]["d_a"].is_null());
  EXPECT_EQ(table_to_csv(t).find("nan"), std::string::npos);
  EXPECT_EQ(table_to_csv(t).find("inf"), std::string::npos);
}

TEST(Report, MakeReportEmitsAllPlotFamilies) {
  Report r;
  r.tables.push_back(sample_table());
  r.extras["pca"]["latents"]["points"] = ojson::array({ojson::array({0.5, -1.0, 0}), ojson::array({1.5, 2.0, 1})});
  auto dir = fresh_dir("full");
  auto files = make_report(r, dir);
  for (const char* f : {"synthetic.csv", "report.json", "synthetic_distance_bars.png", "synthetic_ratio_bands.png",
                        "pca_latents.png"}) {
    ASSERT_TRUE(fs::exists(dir / f)) << f;
    EXPECT_GT(fs::file_size(dir / f), 0u) << f;
  }
  EXPECT_EQ(files.size(), 5u);
  for (const char* f : {"synthetic_distance_bars.png", "synthetic_ratio_bands.png", "pca_latents.png"}) {
    const Image8 img = read_image(dir / f);
    EXPECT_GT(img.width, 0u);
    EXPECT_GT(img.height, 0u);
  }
  EXPECT_EQ(slurp(dir / "synthetic.csv"), table_to_csv(r.tables[0]));
}

TEST(Report, DeterministicBytes) {
  Report r;
  r.tables.push_back(sample_table());
  auto d1 = fresh_dir("det1"), d2 = fresh_dir("det2");
  auto f1 = make_report(r, d1);
  make_report(r, d2);
  for (const auto& p : f1) EXPECT_EQ(slurp(p), slurp(d2 / p.filename())) << p.filename();
}

TEST(Report, EmptyReportHasNoPlots) {
  Report r;
  MetricTable t;
  t.name = "empty";
  r.tables.push_back(t);
  EXPECT_TRUE(r.empty());
  auto dir = fresh_dir("empty");
  EXPECT_TRUE(emit_plots(r, dir).empty());
  auto files = make_report(r, dir);
  EXPECT_EQ(files.size(), 2u);
  EXPECT_EQ(std::count_if(fs::directory_iterator(dir), fs::directory_iterator(), [](auto&) { return true; }), 2);
}

TEST(Report, DistanceGroupsFollowFigureLayout) {
  std::vector<std::string> legend;
  auto g = distance_groups(sample_table(), &legend);
  ASSERT_EQ(g.size(), 2u);
  EXPECT_EQ(legend, (std::vector<std::string>{"encoder_away", "recon"}));
  ASSERT_EQ(g[0].values.size(), 3u);
  EXPECT_EQ(g[0].values[0], 0.03);
  EXPECT_EQ(g[0].values[1], 0.2);
  EXPECT_EQ(g[0].values[2], 0.1 / 3.0);
}

TEST(Report, RatioBandsUseWidenedRange) {
  auto b = ratio_bands(sample_table());
  ASSERT_EQ(b.size(), 2u);
  EXPECT_NEAR(b[0].lo, 0.01, 1e-15);
  EXPECT_NEAR(b[0].hi, 0.09, 1e-15);
  EXPECT_NEAR(b[0].lo_wide, -0.01, 1e-15);
  EXPECT_NEAR(b[0].hi_wide, 0.11, 1e-15);
  EXPECT_EQ(b[0].markers, std::vector<double>{0.11});
}

TEST(Report, MethodMappingCoversObjectives) {
  auto m = method_mapping_json();
  EXPECT_FALSE(m.empty());
  for (const auto& [k, v] : m.items()) EXPECT_FALSE(v.empty()) << k;
}
