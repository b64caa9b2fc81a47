#pragma once

// Workbench configuration: INI sections [corpus] [ae] [diffusion] [attack]
// [cat] [report]. Every key is registered; unknown keys are errors.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "catw/ae/autoencoder.hpp"
#include "catw/attacks/pgd.hpp"
#include "catw/workbench/corpus.hpp"

namespace catw {

struct DiffusionSettings {
  std::size_t T = 200;
  double beta_start = 1e-4, beta_end = 0.02;
  std::size_t width = 64, time_dim = 32;
  bool attention = true;
  std::size_t pretrain_steps = 3000, pretrain_batch = 16;
  double pretrain_lr = 1e-3;
  // Memorization (learnability) fine-tunes.
  bool learnability = false;
  std::size_t memorize_steps = 4000;
  double memorize_lr = 1e-3;
  std::size_t adapter_rank = 32;
  double adapter_lr = 3e-3;
  // Customization fine-tunes.
  std::size_t customize_steps = 500, customize_batch = 4, customize_seeds = 3, samples_per_identity = 4;
  double customize_lr = 1e-3;
};

struct AttackSettings {
  std::vector<std::string> objectives{"all"};
  double budget = 16.0 / 255.0;
  std::size_t steps = 40;
  double step_size = 0.0;
  bool random_start = false;
  double weight_encoder = 1.0, weight_denoise = 1.0;
  std::size_t draws_per_step = 1;
};

struct CatSettings {
  std::vector<std::string> settings{"both", "encoder_only", "decoder_only"};
  std::size_t rank_both = 128, rank_single = 256;
  std::size_t batch = 4, steps = 1000;
  double lr = 1e-4;
  std::vector<std::size_t> sweep_ranks{4, 8, 16, 32, 64, 128};
  std::string sweep_setting = "both";
  std::vector<std::string> sweep_objectives{"encoder_away", "joint"};
  std::size_t purify_ksize = 5;
  double purify_sigma = 1.0;
  std::string customize_setting = "both";
};

struct ReportSettings {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::vector<std::string> stages{"all"};
  bool pca = true;
};

struct WorkbenchConfig {
  CorpusSpec corpus{"synthetic", 8, 12, 32, "", {4, 4, 4}};
  std::size_t protect_identities = 4;
  AutoencoderConfig ae{32, 3, 16, 4, 4, true};
  TrainHParams ae_train{1e-3, 8, 3000, 0};
  DiffusionSettings diffusion;
  AttackSettings attack;
  CatSettings cat;
  ReportSettings report;
};

namespace detail {

inline std::string trim(std::string s) {
  const char* ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

inline std::string join_list(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

inline std::string fmt_double(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

/// Accepts plain decimals and "a/b" fractions (budgets are often written 16/255).
inline double parse_double(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  try {
    if (auto slash = s.find('/'); slash != std::string::npos) {
      std::size_t p1 = 0, p2 = 0;
      const std::string a = trim(s.substr(0, slash)), b = trim(s.substr(slash + 1));
      const double num = std::stod(a, &p1), den = std::stod(b, &p2);
      if (p1 != a.size() || p2 != b.size() || den == 0.0) throw std::invalid_argument("bad fraction");
      return num / den;
    }
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key " + key + ": expected a number, got '" + s + "'");
  }
}

inline std::size_t parse_size(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  std::size_t v = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (s.empty() || r.ec != std::errc() || r.ptr != s.data() + s.size())
    throw ConfigError("key " + key + ": expected a non-negative integer, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "on" || s == "yes" || s == "1") return true;
  if (s == "false" || s == "off" || s == "no" || s == "0") return false;
  throw ConfigError("key " + key + ": expected a boolean, got '" + s + "'");
}

struct KeyBinding {
  std::string section, key;
  std::function<void(WorkbenchConfig&, const std::string&)> set;
  std::function<std::string(const WorkbenchConfig&)> get;
  std::string path() const { return section + "." + key; }
};

template <class F, class G>
KeyBinding bind(std::string sec, std::string key, F set, G get) {
  return {std::move(sec), std::move(key), std::move(set), std::move(get)};
}

#define CATW_SIZE(sec, key, field)                                                                       \
  bind(sec, key, [](WorkbenchConfig& c, const std::string& v) { c.field = parse_size(sec "." key, v); }, \
       [](const WorkbenchConfig& c) { return std::to_string(c.field); })
#define CATW_DOUBLE(sec, key, field)                                                                       \
  bind(sec, key, [](WorkbenchConfig& c, const std::string& v) { c.field = parse_double(sec "." key, v); }, \
       [](const WorkbenchConfig& c) { return fmt_double(c.field); })
#define CATW_BOOL(sec, key, field)                                                                       \
  bind(sec, key, [](WorkbenchConfig& c, const std::string& v) { c.field = parse_bool(sec "." key, v); }, \
       [](const WorkbenchConfig& c) { return std::string(c.field ? "true" : "false"); })
#define CATW_STRING(sec, key, field)                                                         \
  bind(sec, key, [](WorkbenchConfig& c, const std::string& v) { c.field = trim(v); }, \
       [](const WorkbenchConfig& c) { return c.field; })
#define CATW_LIST(sec, key, field)                                                                 \
  bind(sec, key, [](WorkbenchConfig& c, const std::string& v) { c.field = split_list(v); }, \
       [](const WorkbenchConfig& c) { return join_list(c.field); })

}  // namespace detail

/// All recognised keys in canonical order.
inline const std::vector<detail::KeyBinding>& config_keys() {
  using namespace detail;
  static const std::vector<KeyBinding> keys{
      CATW_STRING("corpus", "kind", corpus.kind),
      CATW_SIZE("corpus", "identities", corpus.identities),
      CATW_SIZE("corpus", "images_per_identity", corpus.images_per_identity),
      CATW_SIZE("corpus", "size", corpus.size),
      CATW_STRING("corpus", "path", corpus.path),
      bind(
          "corpus", "split",
          [](WorkbenchConfig& c, const std::string& v) {
            auto parts = split_list(v);
            if (parts.size() != 3) throw ConfigError("key corpus.split: expected three comma-separated sizes");
            for (int i = 0; i < 3; ++i) c.corpus.split[i] = parse_size("corpus.split", parts[i]);
          },
          [](const WorkbenchConfig& c) {
            return std::to_string(c.corpus.split[0]) + "," + std::to_string(c.corpus.split[1]) + "," +
                   std::to_string(c.corpus.split[2]);
          }),
      CATW_SIZE("corpus", "protect_identities", protect_identities),

      CATW_SIZE("ae", "image_size", ae.image_size),
      CATW_SIZE("ae", "base_channels", ae.base_channels),
      CATW_SIZE("ae", "latent_channels", ae.latent_channels),
      CATW_SIZE("ae", "downsample_factor", ae.downsample_factor),
      CATW_BOOL("ae", "attention", ae.attention_at_bottleneck),
      CATW_DOUBLE("ae", "lr", ae_train.lr),
      CATW_SIZE("ae", "batch", ae_train.batch),
      CATW_SIZE("ae", "steps", ae_train.steps),

      CATW_SIZE("diffusion", "T", diffusion.T),
      CATW_DOUBLE("diffusion", "beta_start", diffusion.beta_start),
      CATW_DOUBLE("diffusion", "beta_end", diffusion.beta_end),
      CATW_SIZE("diffusion", "width", diffusion.width),
      CATW_SIZE("diffusion", "time_dim", diffusion.time_dim),
      CATW_BOOL("diffusion", "attention", diffusion.attention),
      CATW_SIZE("diffusion", "pretrain_steps", diffusion.pretrain_steps),
      CATW_SIZE("diffusion", "pretrain_batch", diffusion.pretrain_batch),
      CATW_DOUBLE("diffusion", "pretrain_lr", diffusion.pretrain_lr),
      CATW_BOOL("diffusion", "learnability", diffusion.learnability),
      CATW_SIZE("diffusion", "memorize_steps", diffusion.memorize_steps),
      CATW_DOUBLE("diffusion", "memorize_lr", diffusion.memorize_lr),
      CATW_SIZE("diffusion", "adapter_rank", diffusion.adapter_rank),
      CATW_DOUBLE("diffusion", "adapter_lr", diffusion.adapter_lr),
      CATW_SIZE("diffusion", "customize_steps", diffusion.customize_steps),
      CATW_SIZE("diffusion", "customize_batch", diffusion.customize_batch),
      CATW_SIZE("diffusion", "customize_seeds", diffusion.customize_seeds),
      CATW_SIZE("diffusion", "samples_per_identity", diffusion.samples_per_identity),
      CATW_DOUBLE("diffusion", "customize_lr", diffusion.customize_lr),

      CATW_LIST("attack", "objectives", attack.objectives),
      CATW_DOUBLE("attack", "budget", attack.budget),
      CATW_SIZE("attack", "steps", attack.steps),
      CATW_DOUBLE("attack", "step_size", attack.step_size),
      CATW_BOOL("attack", "random_start", attack.random_start),
      CATW_DOUBLE("attack", "weight_encoder", attack.weight_encoder),
      CATW_DOUBLE("attack", "weight_denoise", attack.weight_denoise),
      CATW_SIZE("attack", "draws_per_step", attack.draws_per_step),

      CATW_LIST("cat", "settings", cat.settings),
      CATW_SIZE("cat", "rank_both", cat.rank_both),
      CATW_SIZE("cat", "rank_single", cat.rank_single),
      CATW_SIZE("cat", "batch", cat.batch),
      CATW_SIZE("cat", "steps", cat.steps),
      CATW_DOUBLE("cat", "lr", cat.lr),
      bind(
          "cat", "sweep_ranks",
          [](WorkbenchConfig& c, const std::string& v) {
            c.cat.sweep_ranks.clear();
            for (const auto& p : split_list(v)) c.cat.sweep_ranks.push_back(parse_size("cat.sweep_ranks", p));
          },
          [](const WorkbenchConfig& c) {
            std::vector<std::string> s;
            for (auto r : c.cat.sweep_ranks) s.push_back(std::to_string(r));
            return join_list(s);
          }),
      CATW_STRING("cat", "sweep_setting", cat.sweep_setting),
      CATW_LIST("cat", "sweep_objectives", cat.sweep_objectives),
      CATW_SIZE("cat", "purify_ksize", cat.purify_ksize),
      CATW_DOUBLE("cat", "purify_sigma", cat.purify_sigma),
      CATW_STRING("cat", "customize_setting", cat.customize_setting),

      CATW_STRING("report", "name", report.name),
      bind(
          "report", "seed",
          [](WorkbenchConfig& c, const std::string& v) { c.report.seed = parse_size("report.seed", v); },
          [](const WorkbenchConfig& c) { return std::to_string(c.report.seed); }),
      CATW_LIST("report", "stages", report.stages),
      CATW_BOOL("report", "pca", report.pca),
  };
  return keys;
}

#undef CATW_SIZE
#undef CATW_DOUBLE
#undef CATW_BOOL
#undef CATW_STRING
#undef CATW_LIST

inline const std::vector<std::string>& config_sections() {
  static const std::vector<std::string> s{"corpus", "ae", "diffusion", "attack", "cat", "report"};
  return s;
}

/// Semantic checks across keys.
inline void validate_config(const WorkbenchConfig& c) {
  c.corpus.validate();
  c.ae.validate();
  if (c.ae.image_size != c.corpus.size)
    throw ConfigError("ae.image_size " + std::to_string(c.ae.image_size) + " differs from corpus.size " +
                      std::to_string(c.corpus.size));
  if (c.corpus.kind == "synthetic" && (c.protect_identities == 0 || c.protect_identities >= c.corpus.identities))
    throw ConfigError("corpus.protect_identities must leave at least one public identity");
  if (c.diffusion.T == 0) throw ConfigError("diffusion.T must be positive");
  if (!(c.diffusion.beta_start > 0 && c.diffusion.beta_start <= c.diffusion.beta_end && c.diffusion.beta_end < 1))
    throw ConfigError("diffusion betas must satisfy 0 < beta_start <= beta_end < 1");
  if (c.diffusion.customize_seeds == 0) throw ConfigError("diffusion.customize_seeds must be positive");
  if (!(c.attack.budget >= 0 && c.attack.budget <= 1)) throw ConfigError("attack.budget must lie in [0, 1]");
  for (const auto& o : c.attack.objectives)
    if (o != "all") parse_objective(o);
  for (const auto& o : c.cat.sweep_objectives) parse_objective(o);
  if (c.cat.batch == 0 || !(c.cat.lr > 0)) throw ConfigError("cat.batch and cat.lr must be positive");
  if (c.cat.purify_ksize % 2 == 0) throw ConfigError("cat.purify_ksize must be odd");
  if (!(c.cat.purify_sigma > 0)) throw ConfigError("cat.purify_sigma must be positive");
  if (c.report.name.empty() || c.report.name.find_first_of("/\\") != std::string::npos)
    throw ConfigError("report.name must be a plain directory name");
}

/// Applies INI text on top of `base`. Unknown sections or keys are errors.
inline WorkbenchConfig parse_config(const std::string& ini_text, WorkbenchConfig base = {}) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  // '#' starts a comment line; the ini parser itself only knows ';'.
  std::string cleaned, line;
  std::istringstream lines(ini_text);
  while (std::getline(lines, line)) {
    const std::string t = detail::trim(line);
    if (!t.empty() && t[0] == '#') continue;
    cleaned += line + "\n";
  }
  std::istringstream is(cleaned);
  try {
    pt::ini_parser::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (std::find(config_sections().begin(), config_sections().end(), section) == config_sections().end()) {
      if (body.empty()) throw ConfigError("config key '" + section + "' outside any section");
      throw ConfigError("unknown config section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      auto it = std::find_if(config_keys().begin(), config_keys().end(),
                             [&](const detail::KeyBinding& b) { return b.section == section && b.key == key; });
      if (it == config_keys().end()) throw ConfigError("unknown config key " + section + "." + key);
      // Strip trailing inline comments.
      std::string v = value.get_value<std::string>();
      if (auto h = v.find(" #"); h != std::string::npos) v.erase(h);
      it->set(base, v);
    }
  }
  validate_config(base);
  return base;
}

inline WorkbenchConfig load_config(const std::filesystem::path& path, WorkbenchConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  return parse_config(std::string(std::istreambuf_iterator<char>(is), {}), std::move(base));
}

inline std::string config_value(const WorkbenchConfig& c, const std::string& path) {
  for (const auto& b : config_keys())
    if (b.path() == path) return b.get(c);
  throw ConfigError("unknown config key " + path);
}

/// Canonical INI rendering of the fully resolved config.
inline std::string canonical_ini(const WorkbenchConfig& c) {
  std::string out, section;
  for (const auto& b : config_keys()) {
    if (b.section != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + b.section + "]\n";
      section = b.section;
    }
    out += b.key + " = " + b.get(c) + "\n";
  }
  return out;
}

}  // namespace catw
