#pragma once

// Metric tables, their CSV/JSON forms ("report/1") and report emission.

#include <charconv>
#include <filesystem>
#include <json.hpp>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "catw/attacks/pgd.hpp"
#include "catw/metrics/metrics.hpp"
#include "catw/metrics/plot.hpp"

namespace catw {

using ojson = nlohmann::ordered_json;

inline constexpr const char* kReportSchema = "report/1";

inline const std::vector<std::string>& metric_columns() {
  static const std::vector<std::string> cols{"d_a",   "d_r", "d_a_cat", "abs_da_dr", "abs_dacat_dr", "ratio_da_dr",
                                             "s_c",   "s_r", "s_a",     "s_a_cat",   "frechet",      "psnr",
                                             "ssim"};
  return cols;
}

/// One (attack, setting) row. Absent values are simply missing from `values`.
struct MetricRow {
  std::string attack;
  std::string setting;
  std::uint64_t seed = 0;
  std::string corpus_digest;
  std::map<std::string, double> values;

  std::optional<double> get(const std::string& col) const {
    auto it = values.find(col);
    return it == values.end() ? std::nullopt : std::optional<double>(it->second);
  }
};

struct MetricTable {
  std::string name;
  std::vector<MetricRow> rows;

  MetricRow& row(const std::string& attack, const std::string& setting) {
    for (auto& r : rows)
      if (r.attack == attack && r.setting == setting) return r;
    rows.push_back(MetricRow{attack, setting, 0, "", {}});
    return rows.back();
  }
  const MetricRow* find(const std::string& attack, const std::string& setting) const {
    for (const auto& r : rows)
      if (r.attack == attack && r.setting == setting) return &r;
    return nullptr;
  }
  bool has_column(const std::string& col) const {
    for (const auto& r : rows)
      if (r.values.count(col)) return true;
    return false;
  }
};

inline ojson table_to_json(const MetricTable& t) {
  ojson rows = ojson::array();
  for (const auto& r : t.rows) {
    ojson vals = ojson::object();
    for (const auto& c : metric_columns()) {
      auto v = r.get(c);
      vals[c] = v && std::isfinite(*v) ? ojson(*v) : ojson(nullptr);
    }
    rows.push_back(ojson{{"attack", r.attack},
                         {"setting", r.setting},
                         {"seed", r.seed},
                         {"corpus_digest", r.corpus_digest},
                         {"values", vals}});
  }
  return ojson{{"name", t.name}, {"columns", metric_columns()}, {"rows", rows}};
}

inline MetricTable table_from_json(const ojson& j) {
  MetricTable t;
  t.name = j.at("name").get<std::string>();
  for (const auto& r : j.at("rows")) {
    MetricRow row;
    row.attack = r.at("attack").get<std::string>();
    row.setting = r.at("setting").get<std::string>();
    row.seed = r.at("seed").get<std::uint64_t>();
    row.corpus_digest = r.at("corpus_digest").get<std::string>();
    for (const auto& [k, v] : r.at("values").items())
      if (!v.is_null()) row.values[k] = v.get<double>();
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Shortest round-trip decimal form.
inline std::string format_number(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string table_to_csv(const MetricTable& t) {
  std::string out = "attack,setting,seed,corpus_digest";
  for (const auto& c : metric_columns()) out += "," + c;
  out += "\n";
  for (const auto& r : t.rows) {
    out += r.attack + "," + r.setting + "," + std::to_string(r.seed) + "," + r.corpus_digest;
    for (const auto& c : metric_columns()) {
      auto v = r.get(c);
      out += ",";
      if (v && std::isfinite(*v)) out += format_number(*v);
    }
    out += "\n";
  }
  return out;
}

struct Report {
  ojson manifest = ojson::object();
  std::vector<MetricTable> tables;
  ojson extras = ojson::object();  // pca point sets, audits, notes

  bool empty() const {
    for (const auto& t : tables)
      if (!t.rows.empty()) return false;
    return !extras.contains("pca") || extras["pca"].empty();
  }
};

inline ojson method_mapping_json() {
  ojson j = ojson::object();
  const auto mapping = method_mapping();
  for (const auto& [k, v] : mapping.items()) j[k] = v;
  return j;
}

inline ojson report_to_json(const Report& r) {
  ojson tables = ojson::array();
  for (const auto& t : r.tables) tables.push_back(table_to_json(t));
  return ojson{{"schema", kReportSchema},
               {"manifest", r.manifest},
               {"method_mapping", method_mapping_json()},
               {"tables", tables},
               {"extras", r.extras}};
}

inline Report report_from_json(const ojson& j) {
  if (j.value("schema", "") != kReportSchema) throw LoadError("report schema is not " + std::string(kReportSchema));
  Report r;
  r.manifest = j.at("manifest");
  for (const auto& t : j.at("tables")) r.tables.push_back(table_from_json(t));
  r.extras = j.at("extras");
  return r;
}

/// Bars per attack: d_r, d_a, then d_a_cat of each setting row in order.
inline std::vector<BarGroup> distance_groups(const MetricTable& t, std::vector<std::string>* legend = nullptr) {
  std::vector<std::string> attacks;
  for (const auto& r : t.rows)
    if (std::find(attacks.begin(), attacks.end(), r.attack) == attacks.end()) attacks.push_back(r.attack);
  std::vector<BarGroup> groups;
  for (const auto& a : attacks) {
    BarGroup g;
    double dr = NAN, da = NAN;
    std::vector<double> cat;
    for (const auto& r : t.rows) {
      if (r.attack != a) continue;
      if (auto v = r.get("d_r")) dr = *v;
      if (auto v = r.get("d_a")) da = *v;
      if (auto v = r.get("d_a_cat")) cat.push_back(*v);
    }
    g.values = {dr, da};
    g.values.insert(g.values.end(), cat.begin(), cat.end());
    groups.push_back(g);
  }
  if (legend) *legend = attacks;
  return groups;
}

inline std::vector<RatioBand> ratio_bands(const MetricTable& t) {
  std::vector<RatioBand> out;
  for (const auto& r : t.rows) {
    auto sc = r.get("s_c"), sr = r.get("s_r"), sa = r.get("s_a");
    if (!sc || !sr || !sa) continue;
    const Interval in = sr_range(*sc, *sr), wide = in.widened(0.5);
    RatioBand b{wide.lo, wide.hi, in.lo, in.hi, {*sa}};
    if (auto v = r.get("s_a_cat")) b.markers.push_back(*v);
    out.push_back(b);
  }
  return out;
}

/// Renders every figure the report supports. Returns the written paths.
inline std::vector<std::filesystem::path> emit_plots(const Report& r, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& t : r.tables) {
    if (t.rows.empty()) continue;
    if (t.has_column("d_a")) {
      auto p = dir / (t.name + "_distance_bars.png");
      write_png(p, plot_grouped_bars(distance_groups(t)));
      out.push_back(p);
    }
    auto bands = ratio_bands(t);
    if (!bands.empty()) {
      auto p = dir / (t.name + "_ratio_bands.png");
      write_png(p, plot_ratio_bands(bands));
      out.push_back(p);
    }
  }
  if (r.extras.contains("pca"))
    for (const auto& [name, set] : r.extras["pca"].items()) {
      std::vector<ScatterPoint> pts;
      for (const auto& p : set.at("points")) pts.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<std::size_t>()});
      if (pts.empty()) continue;
      auto path = dir / ("pca_" + name + ".png");
      write_png(path, plot_scatter(pts));
      out.push_back(path);
    }
  return out;
}

/// Writes one CSV per table, the JSON mirror and the plots.
inline std::vector<std::filesystem::path> make_report(const Report& r, const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> out;
  for (const auto& t : r.tables) {
    auto p = dir / (t.name + ".csv");
    detail::write_file_atomic(p, table_to_csv(t));
    out.push_back(p);
  }
  auto j = dir / "report.json";
  detail::write_file_atomic(j, report_to_json(r).dump(2) + "\n");
  out.push_back(j);
  for (auto& p : emit_plots(r, dir)) out.push_back(p);
  return out;
}

}  // namespace catw
