#pragma once

// Run configuration: a small sectioned key = value file format, the typed
// application config it populates, and the JSON run manifest each command
// writes before doing any work.

#include <cctype>
#include <cstdint>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pal/data.hpp"
#include "pal/error.hpp"
#include "pal/trainer.hpp"

namespace pal {

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Sectioned key = value text
// ---------------------------------------------------------------------------
//
//   [stage2]
//   lr = 0.0001          # comments start with '#' or ';'
//   decay_epochs = 5,7,9
//
// Keys are addressed as "section.key". Every key a file provides must be
// consumed by the loader; leftovers are reported as unknown-key errors so a
// typo never silently falls back to a default.
class ConfigFile {
 public:
  static ConfigFile parse(const std::string& text, const std::string& origin = "<string>") {
    ConfigFile cf;
    cf.origin_ = origin;
    std::istringstream in(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      const std::size_t comment = line.find_first_of("#;");
      if (comment != std::string::npos) line.erase(comment);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError(cf.where(line_no) + "unterminated section header: " + line);
        section = trim(line.substr(1, line.size() - 2));
        if (section.empty()) throw ConfigError(cf.where(line_no) + "empty section name");
        continue;
      }
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError(cf.where(line_no) + "expected 'key = value', got: " + line);
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(cf.where(line_no) + "empty key");
      if (section.empty())
        throw ConfigError(cf.where(line_no) + "key '" + key + "' appears before any [section]");
      const std::string full = section + "." + key;
      if (cf.values_.count(full))
        throw ConfigError(cf.where(line_no) + "duplicate key '" + full + "'");
      cf.values_[full] = value;
    }
    return cf;
  }

  static ConfigFile load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    return it->second;
  }

  double get_double(const std::string& key, double fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    try {
      std::size_t pos = 0;
      const double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a number, got '" + it->second + "'");
    }
  }

  std::size_t get_size(const std::string& key, std::size_t fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    try {
      std::size_t pos = 0;
      const unsigned long long v = std::stoull(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing characters");
      if (!it->second.empty() && it->second.front() == '-') throw std::invalid_argument("negative");
      return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "': expected a non-negative integer, got '" +
                        it->second + "'");
    }
  }

  bool get_bool(const std::string& key, bool fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    const std::string& v = it->second;
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
  }

  std::vector<std::size_t> get_size_list(const std::string& key,
                                         std::vector<std::size_t> fallback) {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    consumed_.insert(key);
    std::vector<std::size_t> out;
    std::istringstream ss(it->second);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      try {
        std::size_t pos = 0;
        out.push_back(static_cast<std::size_t>(std::stoull(item, &pos)));
        if (pos != item.size()) throw std::invalid_argument("trailing characters");
      } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': expected comma-separated integers, got '" +
                          it->second + "'");
      }
    }
    return out;
  }

  // Call after all known keys were read; any untouched key is a config error.
  void reject_unknown_keys() const {
    std::vector<std::string> unknown;
    for (const auto& [key, value] : values_)
      if (!consumed_.count(key)) unknown.push_back(key);
    if (!unknown.empty()) {
      std::string msg = "unknown config key";
      if (unknown.size() > 1) msg += "s";
      msg += ":";
      for (const auto& k : unknown) msg += " '" + k + "'";
      msg += " (in " + origin_ + ")";
      throw ConfigError(msg);
    }
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
  }

  std::string where(std::size_t line_no) const {
    return origin_ + ":" + std::to_string(line_no) + ": ";
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> consumed_;
  std::string origin_;
};

// ---------------------------------------------------------------------------
// Typed application config
// ---------------------------------------------------------------------------

// Everything a run needs: how to synthesize the three splits, the model and
// both training stages, and the evaluation / ablation settings. Defaults are
// the synthetic benchmark the acceptance checks run against.
struct AppConfig {
  // [data] synthetic generator; one spec per split, disjoint class ids
  std::size_t classes_train = 20;
  std::size_t classes_val = 5;
  std::size_t classes_test = 5;
  std::size_t per_class = 40;
  std::size_t d_raw = 64;
  std::size_t frames = 8;
  double sigma_between = 1.0;
  double sigma_within = 0.4;
  double outlier_fraction = 0.2;
  double outlier_scale = 6.0;

  // [model] / [stage1] / [stage2] / [episode] / [objective]
  TrainConfig train;

  // [eval]
  std::size_t eval_episodes = 1000;

  // [ablate]
  std::size_t ablate_seeds = 5;
  std::size_t ablate_episodes = 600;

  static AppConfig from_file(ConfigFile& cf) {
    AppConfig a;
    a.classes_train = cf.get_size("data.classes_train", a.classes_train);
    a.classes_val = cf.get_size("data.classes_val", a.classes_val);
    a.classes_test = cf.get_size("data.classes_test", a.classes_test);
    a.per_class = cf.get_size("data.per_class", a.per_class);
    a.d_raw = cf.get_size("data.d_raw", a.d_raw);
    a.frames = cf.get_size("data.frames", a.frames);
    a.sigma_between = cf.get_double("data.sigma_between", a.sigma_between);
    a.sigma_within = cf.get_double("data.sigma_within", a.sigma_within);
    a.outlier_fraction = cf.get_double("data.outlier_fraction", a.outlier_fraction);
    a.outlier_scale = cf.get_double("data.outlier_scale", a.outlier_scale);

    TrainConfig& t = a.train;
    t.d = cf.get_size("model.d", t.d);
    t.hidden = cf.get_size("model.hidden", t.hidden);
    t.bias = cf.get_bool("model.bias", t.bias);
    t.clf_scale = cf.get_double("model.clf_scale", t.clf_scale);

    t.stage1.lr0 = cf.get_double("stage1.lr", t.stage1.lr0);
    t.stage1.decay_factor = cf.get_double("stage1.decay_factor", t.stage1.decay_factor);
    t.stage1.decay_epochs = cf.get_size_list("stage1.decay_epochs", t.stage1.decay_epochs);
    t.stage1.epochs = cf.get_size("stage1.epochs", t.stage1.epochs);
    t.batch_size = cf.get_size("stage1.batch_size", t.batch_size);

    t.stage2.lr0 = cf.get_double("stage2.lr", t.stage2.lr0);
    t.stage2.decay_factor = cf.get_double("stage2.decay_factor", t.stage2.decay_factor);
    t.stage2.decay_epochs = cf.get_size_list("stage2.decay_epochs", t.stage2.decay_epochs);
    t.stage2.epochs = cf.get_size("stage2.epochs", t.stage2.epochs);
    t.episodes_per_epoch = cf.get_size("stage2.episodes_per_epoch", t.episodes_per_epoch);
    t.val_episodes = cf.get_size("stage2.val_episodes", t.val_episodes);

    t.way = cf.get_size("episode.way", t.way);
    t.shot = cf.get_size("episode.shot", t.shot);
    t.query = cf.get_size("episode.query", t.query);
    t.segments = cf.get_size("episode.segments", t.segments);

    t.lambda = cf.get_double("objective.lambda", t.lambda);
    t.scale = cf.get_double("objective.scale", t.scale);
    t.pcc_mode = pcc_mode_from_name(
        cf.get_string("objective.pcc_mode", pcc_mode_name(t.pcc_mode)));
    t.hal = cf.get_bool("objective.hal", t.hal);

    a.eval_episodes = cf.get_size("eval.episodes", a.eval_episodes);
    a.ablate_seeds = cf.get_size("ablate.seeds", a.ablate_seeds);
    a.ablate_episodes = cf.get_size("ablate.episodes", a.ablate_episodes);

    cf.reject_unknown_keys();
    a.validate();
    return a;
  }

  static AppConfig load(const std::string& path) {
    ConfigFile cf = ConfigFile::load(path);
    return from_file(cf);
  }

  void validate() const {
    train.validate();
    if (classes_train == 0 || classes_val == 0 || classes_test == 0)
      throw ConfigError("every split needs at least one class");
    if (per_class == 0) throw ConfigError("per_class must be positive");
    if (d_raw == 0 || frames == 0) throw ConfigError("d_raw and frames must be positive");
    if (ablate_seeds == 0) throw ConfigError("ablate.seeds must be positive");
    if (eval_episodes == 0 || ablate_episodes == 0)
      throw ConfigError("episode counts must be positive");
  }

  SyntheticSpec split_spec(Split split) const {
    SyntheticSpec s;
    s.per_class = per_class;
    s.d_raw = d_raw;
    s.frames = frames;
    s.sigma_between = sigma_between;
    s.sigma_within = sigma_within;
    s.outlier_fraction = outlier_fraction;
    s.outlier_scale = outlier_scale;
    s.split = split;
    switch (split) {
      case Split::MetaTrain:
        s.classes = classes_train;
        s.class_id_offset = 0;
        s.sample_id_offset = 0;
        break;
      case Split::MetaVal:
        s.classes = classes_val;
        s.class_id_offset = static_cast<std::uint32_t>(classes_train);
        s.sample_id_offset = static_cast<std::uint64_t>(classes_train) * per_class;
        break;
      case Split::MetaTest:
        s.classes = classes_test;
        s.class_id_offset = static_cast<std::uint32_t>(classes_train + classes_val);
        s.sample_id_offset =
            static_cast<std::uint64_t>(classes_train + classes_val) * per_class;
        break;
    }
    return s;
  }

  // Full snapshot in file syntax; diffable and reloadable.
  std::string echo() const {
    std::ostringstream out;
    out.precision(17);
    out << "[data]\n"
        << "classes_train = " << classes_train << "\n"
        << "classes_val = " << classes_val << "\n"
        << "classes_test = " << classes_test << "\n"
        << "per_class = " << per_class << "\n"
        << "d_raw = " << d_raw << "\n"
        << "frames = " << frames << "\n"
        << "sigma_between = " << sigma_between << "\n"
        << "sigma_within = " << sigma_within << "\n"
        << "outlier_fraction = " << outlier_fraction << "\n"
        << "outlier_scale = " << outlier_scale << "\n\n";
    out << "[model]\n"
        << "d = " << train.d << "\n"
        << "hidden = " << train.hidden << "\n"
        << "bias = " << (train.bias ? "true" : "false") << "\n"
        << "clf_scale = " << train.clf_scale << "\n\n";
    auto stage = [&out](const char* name, const StageConfig& s) {
      out << "[" << name << "]\n"
          << "lr = " << s.lr0 << "\n"
          << "decay_factor = " << s.decay_factor << "\n"
          << "decay_epochs = ";
      for (std::size_t i = 0; i < s.decay_epochs.size(); ++i)
        out << (i ? "," : "") << s.decay_epochs[i];
      out << "\n"
          << "epochs = " << s.epochs << "\n";
    };
    stage("stage1", train.stage1);
    out << "batch_size = " << train.batch_size << "\n\n";
    stage("stage2", train.stage2);
    out << "episodes_per_epoch = " << train.episodes_per_epoch << "\n"
        << "val_episodes = " << train.val_episodes << "\n\n";
    out << "[episode]\n"
        << "way = " << train.way << "\n"
        << "shot = " << train.shot << "\n"
        << "query = " << train.query << "\n"
        << "segments = " << train.segments << "\n\n";
    out << "[objective]\n"
        << "lambda = " << train.lambda << "\n"
        << "scale = " << train.scale << "\n"
        << "pcc_mode = " << pcc_mode_name(train.pcc_mode) << "\n"
        << "hal = " << (train.hal ? "true" : "false") << "\n\n";
    out << "[eval]\n"
        << "episodes = " << eval_episodes << "\n\n";
    out << "[ablate]\n"
        << "seeds = " << ablate_seeds << "\n"
        << "episodes = " << ablate_episodes << "\n";
    return out.str();
  }
};

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

// Written to <out>/manifest.json before a command starts real work, so a
// crashed run still leaves a record of what was attempted. Results land in
// separate files (summary.json, logs, reports); the manifest is never
// rewritten after the command begins.
struct RunManifest {
  std::string command;
  std::vector<std::uint64_t> seeds;
  AppConfig config;
  std::vector<std::string> outputs;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["command"] = command;
    j["code_version"] = kVersion;
    j["started_utc"] = timestamp_utc();
    j["seeds"] = seeds;
    j["outputs"] = outputs;
    j["config"] = config.echo();
    // Choices the config controls but a reader of results needs up front.
    j["decisions"] = {{"pcc_mode", pcc_mode_name(config.train.pcc_mode)},
                      {"cosine_scale", config.train.scale},
                      {"query_per_class", config.train.query}};
    return j;
  }

  static std::string timestamp_utc() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
#if defined(_WIN32)
    gmtime_s(&tm, &now);
#else
    gmtime_r(&now, &tm);
#endif
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }
};

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw Error("failed writing '" + path + "'");
}

}  // namespace pal
