#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tide/data.hpp"
#include "tide/eval.hpp"
#include "tide/loss.hpp"
#include "tide/model.hpp"

namespace tide {

// Every tunable of a run. Text form is flat UTF-8 `key = value` lines;
// `#` starts a comment. Precedence: command-line flag > config file >
// built-in default.
struct RunConfig {
  ModelConfig model;
  LossWeights loss;
  EpisodeConfig episode;
  std::size_t min_side = 32;

  std::uint64_t seed = 0;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double grad_clip = 0.1;
  std::size_t steps = 1000;
  std::size_t batch_size = 1;  // episodes per optimizer step
  double lr_drop = 0.0;        // fraction of steps after which lr is scaled by 0.1; 0 disables
  std::size_t log_every = 50;

  std::string dataset = "synthetic";  // "synthetic" or a COCO annotation file
  std::string image_root;
  std::vector<std::string> novel_classes;  // empty: synthetic defaults
  std::size_t synthetic_images = 16;
  std::size_t synthetic_size = 64;
  std::uint64_t synthetic_seed = 7;

  std::size_t ways = 2;
  std::size_t shots = 1;
  std::size_t eval_seeds = 1;  // seeds seed, seed+1, ...
  double score_threshold = 0.0;
  std::string score_aggregation = "sum";
  bool nms = false;
  double nms_iou = 0.5;

  void validate() const;
};

namespace detail {

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seed fields are parsed as size_t");

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
T parse_value(const std::string& key, const std::string& v);

template <>
inline bool parse_value<bool>(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

template <>
inline double parse_value<double>(const std::string& key, const std::string& v) {
  try {
    std::size_t n;
    const double x = std::stod(v, &n);
    if (n != v.size() || !std::isfinite(x)) throw std::invalid_argument(v);
    return x;
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

template <>
inline std::size_t parse_value<std::size_t>(const std::string& key, const std::string& v) {
  try {
    std::size_t n;
    if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
    const auto x = std::stoull(v, &n);
    if (n != v.size()) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::logic_error&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
}

template <>
inline std::string parse_value<std::string>(const std::string&, const std::string& v) {
  return v;
}

template <>
inline std::vector<std::string> parse_value<std::vector<std::string>>(const std::string&, const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(std::size_t v) { return std::to_string(v); }
inline std::string to_text(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}
inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + v[i];
  return s;
}

template <typename T>
Field field(T RunConfig::*member) {
  return {[member](RunConfig& c, const std::string& v) { c.*member = parse_value<T>("", v); },
          [member](const RunConfig& c) { return to_text(c.*member); }};
}

template <typename S, typename T>
Field field(S RunConfig::*outer, T S::*member) {
  return {[outer, member](RunConfig& c, const std::string& v) { (c.*outer).*member = parse_value<T>("", v); },
          [outer, member](const RunConfig& c) { return to_text((c.*outer).*member); }};
}

inline const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"d", field(&RunConfig::model, &ModelConfig::d)},
      {"heads", field(&RunConfig::model, &ModelConfig::heads)},
      {"layers", field(&RunConfig::model, &ModelConfig::layers)},
      {"num_queries", field(&RunConfig::model, &ModelConfig::num_queries)},
      {"select_k", field(&RunConfig::model, &ModelConfig::select_k)},
      {"dmsa_points", field(&RunConfig::model, &ModelConfig::dmsa_points)},
      {"ffn_dim", field(&RunConfig::model, &ModelConfig::ffn_dim)},
      {"query_patch", field(&RunConfig::model, &ModelConfig::query_patch)},
      {"query_levels", field(&RunConfig::model, &ModelConfig::query_levels)},
      {"query_blocks", field(&RunConfig::model, &ModelConfig::query_blocks)},
      {"support_patch", field(&RunConfig::model, &ModelConfig::support_patch)},
      {"support_blocks", field(&RunConfig::model, &ModelConfig::support_blocks)},
      {"box_layers", field(&RunConfig::model, &ModelConfig::box_layers)},
      {"enable_bmha", field(&RunConfig::model, &ModelConfig::enable_bmha)},
      {"enable_dcc", field(&RunConfig::model, &ModelConfig::enable_dcc)},
      {"support_pos_embed", field(&RunConfig::model, &ModelConfig::support_pos_embed)},
      {"use_multiscale", field(&RunConfig::model, &ModelConfig::use_multiscale)},
      {"select_with_raw_support", field(&RunConfig::model, &ModelConfig::select_with_raw_support)},
      {"lambda_class", field(&RunConfig::loss, &LossWeights::cls)},
      {"lambda_l1", field(&RunConfig::loss, &LossWeights::l1)},
      {"lambda_giou", field(&RunConfig::loss, &LossWeights::giou)},
      {"no_object_weight", field(&RunConfig::loss, &LossWeights::no_object)},
      {"aux_loss", field(&RunConfig::loss, &LossWeights::aux_loss)},
      {"negative_ratio", field(&RunConfig::episode, &EpisodeConfig::negative_ratio)},
      {"augment_support", field(&RunConfig::episode, &EpisodeConfig::augment_support)},
      {"query_size", field(&RunConfig::episode, &EpisodeConfig::query_size)},
      {"train_on_novel", field(&RunConfig::episode, &EpisodeConfig::train_on_novel)},
      {"withhold_prob", field(&RunConfig::episode, &EpisodeConfig::withhold_prob)},
      {"jitter", {[](RunConfig& c, const std::string& v) { c.episode.augment.jitter = parse_value<double>("", v); },
                  [](const RunConfig& c) { return to_text(c.episode.augment.jitter); }}},
      {"flip_prob", {[](RunConfig& c, const std::string& v) { c.episode.augment.flip_prob = parse_value<double>("", v); },
                     [](const RunConfig& c) { return to_text(c.episode.augment.flip_prob); }}},
      {"min_side", field(&RunConfig::min_side)},
      {"seed", field(&RunConfig::seed)},
      {"lr", field(&RunConfig::lr)},
      {"weight_decay", field(&RunConfig::weight_decay)},
      {"grad_clip", field(&RunConfig::grad_clip)},
      {"steps", field(&RunConfig::steps)},
      {"batch_size", field(&RunConfig::batch_size)},
      {"lr_drop", field(&RunConfig::lr_drop)},
      {"log_every", field(&RunConfig::log_every)},
      {"dataset", field(&RunConfig::dataset)},
      {"image_root", field(&RunConfig::image_root)},
      {"novel_classes", field(&RunConfig::novel_classes)},
      {"synthetic_images", field(&RunConfig::synthetic_images)},
      {"synthetic_size", field(&RunConfig::synthetic_size)},
      {"synthetic_seed", field(&RunConfig::synthetic_seed)},
      {"ways", field(&RunConfig::ways)},
      {"shots", field(&RunConfig::shots)},
      {"eval_seeds", field(&RunConfig::eval_seeds)},
      {"score_threshold", field(&RunConfig::score_threshold)},
      {"score_aggregation", field(&RunConfig::score_aggregation)},
      {"nms", field(&RunConfig::nms)},
      {"nms_iou", field(&RunConfig::nms_iou)},
  };
  return table;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : detail::fields()) out.push_back(k);
  return out;
}

inline void set_config_value(RunConfig& cfg, const std::string& key_in, const std::string& value_in) {
  const std::string key = detail::trim(key_in), value = detail::trim(value_in);
  auto it = detail::fields().find(key);
  if (it == detail::fields().end()) throw ConfigError("unknown config key '" + key + "'");
  try {
    it->second.set(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError("field '" + key + "': invalid value '" + value + "'");
  }
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& key) {
  auto it = detail::fields().find(key);
  if (it == detail::fields().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second.get(cfg);
}

// "key=value" as given to --set.
inline void apply_assignment(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + assignment + "'");
  set_config_value(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

inline void apply_config_text(RunConfig& cfg, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (detail::trim(line).empty()) continue;
    if (line.find('=') == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    apply_assignment(cfg, line);
  }
}

inline void apply_config_file(RunConfig& cfg, const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IOError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  apply_config_text(cfg, ss.str());
}

inline std::string config_to_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(cfg) + "\n";
  return out;
}

inline void RunConfig::validate() const {
  model.validate();
  auto require = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw ConfigError(std::string("field '") + field + "': " + why);
  };
  require(lr > 0, "lr", "must be positive");
  require(weight_decay >= 0, "weight_decay", "must be non-negative");
  require(grad_clip >= 0, "grad_clip", "must be non-negative");
  require(loss.cls >= 0 && loss.l1 >= 0 && loss.giou >= 0, "lambda_*", "loss weights must be non-negative");
  require(loss.no_object >= 0, "no_object_weight", "must be non-negative");
  require(episode.negative_ratio >= 0, "negative_ratio", "must be non-negative");
  require(episode.augment.jitter >= 0 && episode.augment.jitter < 1, "jitter", "must lie in [0,1)");
  require(episode.augment.flip_prob >= 0 && episode.augment.flip_prob <= 1, "flip_prob", "must lie in [0,1]");
  require(episode.withhold_prob >= 0 && episode.withhold_prob < 1, "withhold_prob", "must lie in [0,1)");
  require(episode.query_size >= model.query_patch, "query_size", "must be at least query_patch");
  require(lr_drop >= 0 && lr_drop <= 1, "lr_drop", "must lie in [0,1]");
  require(batch_size >= 1, "batch_size", "must be positive");
  require(log_every >= 1, "log_every", "must be positive");
  require(ways >= 1, "ways", "must be positive");
  require(shots >= 1, "shots", "must be positive");
  require(eval_seeds >= 1, "eval_seeds", "must be positive");
  require(score_aggregation == "sum" || score_aggregation == "max", "score_aggregation", "must be sum or max");
  require(synthetic_images >= 4, "synthetic_images", "must be at least 4");
  require(synthetic_size >= 32, "synthetic_size", "must be at least 32");
  require(!dataset.empty(), "dataset", "must name 'synthetic' or a COCO annotation file");
}

inline ProtocolConfig protocol_config(const RunConfig& cfg) {
  ProtocolConfig p;
  p.ways = cfg.ways;
  p.shots = cfg.shots;
  p.seeds.clear();
  for (std::size_t i = 0; i < cfg.eval_seeds; ++i) p.seeds.push_back(cfg.seed + i);
  p.query_size = cfg.episode.query_size;
  p.decode.score_threshold = cfg.score_threshold;
  p.decode.aggregation = cfg.score_aggregation == "max" ? ScoreAggregation::Max : ScoreAggregation::Sum;
  p.decode.nms = cfg.nms;
  p.decode.nms_iou = cfg.nms_iou;
  return p;
}

inline Dataset load_dataset(const RunConfig& cfg) {
  if (cfg.dataset == "synthetic") {
    SyntheticConfig sc;
    sc.num_images = cfg.synthetic_images;
    sc.image_size = cfg.synthetic_size;
    sc.seed = cfg.synthetic_seed;
    if (!cfg.novel_classes.empty()) sc.novel = cfg.novel_classes;
    return make_synthetic_dataset(sc);
  }
  return load_coco(cfg.dataset, cfg.image_root, cfg.novel_classes, cfg.min_side);
}

}  // namespace tide
