#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tide/config.hpp"
#include "tide/eval.hpp"
#include "tide/train.hpp"

namespace tide {

inline std::unique_ptr<TideModel> build_model(const RunConfig& cfg) {
  cfg.validate();
  return std::make_unique<TideModel>(cfg.model, cfg.seed);
}

inline std::unique_ptr<TideModel> load_model(const RunConfig& cfg, const std::string& checkpoint) {
  auto model = build_model(cfg);
  load_checkpoint(*model, checkpoint);
  return model;
}

// Trains from the seeded initialization and writes the final checkpoint.
inline TrainResult cmd_train(const RunConfig& cfg, const std::string& checkpoint, std::ostream* log = nullptr) {
  auto model = build_model(cfg);
  const Dataset ds = load_dataset(cfg);
  TrainResult res = train(*model, ds, cfg, log);
  save_checkpoint(*model, checkpoint);
  return res;
}

// Runs the few-shot protocol with frozen parameters. With `oracle` the
// checkpoint is ignored and the ground-truth detector is scored instead.
inline nlohmann::json cmd_eval(const RunConfig& cfg, const std::string& checkpoint, bool oracle = false) {
  cfg.validate();
  const Dataset ds = load_dataset(cfg);
  const ProtocolConfig pc = protocol_config(cfg);
  if (oracle) {
    const auto rep = run_protocol(OracleDetector(cfg.model.num_queries), ds, pc);
    auto j = rep.to_json();
    j["detector"] = "oracle";
    return j;
  }
  auto model = load_model(cfg, checkpoint);
  const std::uint64_t before = model->params().checksum();
  const auto rep = run_protocol(ModelDetector(*model), ds, pc);
  const std::uint64_t after = model->params().checksum();
  if (before != after) throw Error("parameters changed during evaluation");
  auto j = rep.to_json();
  j["detector"] = "model";
  j["parameter_checksum"] = before;
  return j;
}

inline bool is_all_zero(const Image& img) {
  return std::all_of(img.px.begin(), img.px.end(), [](double v) { return v == 0.0; });
}

// Support rows from user-supplied crops, position i -> class id i+1, then
// the null row. An all-zero crop is the null image itself and maps to no
// class.
inline SupportSet support_from_images(const std::vector<Image>& crops) {
  if (crops.empty()) throw ConfigError("detect needs at least one support image");
  SupportSet s;
  for (std::size_t i = 0; i < crops.size(); ++i) {
    SupportRow r;
    r.image = resize_bilinear(crops[i], kSupportSize, kSupportSize);
    if (is_all_zero(r.image))
      r.is_null = true;
    else
      r.class_id = static_cast<Id>(i + 1);
    s.rows.push_back(std::move(r));
  }
  s.rows.push_back(null_support_row());
  return s;
}

inline std::size_t appended_null_index(const SupportSet& s) { return s.size() - 1; }

// Detections JSON:
// {"query": {"path", "width", "height"},
//  "support": [{"position", "path", "class_id" (null for zero images)}],
//  "null_index": m-1,
//  "parameter_checksum": u64,
//  "detections": [{"class_id", "support_position", "score", "bbox": [x0, y0, x1, y1]}]}
// Boxes are absolute pixels of the original query image.
inline nlohmann::json detect_json(const TideModel& model, const RunConfig& cfg, const std::string& query_path,
                                  const std::vector<std::string>& support_paths) {
  const Image raw = read_image(query_path);
  std::vector<Image> crops;
  for (const auto& p : support_paths) crops.push_back(read_image(p));
  const SupportSet support = support_from_images(crops);
  const std::size_t null_index = appended_null_index(support);
  const Image query = resize_bilinear(raw, cfg.episode.query_size, cfg.episode.query_size);

  const DetectionSet set = model.detect(query, support.images(), null_index);
  const ImageSize size{static_cast<double>(raw.width), static_cast<double>(raw.height)};
  const auto dets = decode_detections(set, support.position_to_class(), size, protocol_config(cfg).decode);

  nlohmann::json j;
  j["query"] = {{"path", query_path}, {"width", raw.width}, {"height", raw.height}};
  j["support"] = nlohmann::json::array();
  for (std::size_t i = 0; i < support_paths.size(); ++i) {
    const auto& r = support.rows[i];
    j["support"].push_back({{"position", i},
                            {"path", support_paths[i]},
                            {"class_id", r.class_id ? nlohmann::json(*r.class_id) : nlohmann::json(nullptr)}});
  }
  j["null_index"] = null_index;
  j["detections"] = nlohmann::json::array();
  for (const auto& d : dets)
    j["detections"].push_back({{"class_id", d.class_id},
                               {"support_position", static_cast<std::size_t>(d.class_id - 1)},
                               {"score", d.score},
                               {"bbox", {d.box.v[0], d.box.v[1], d.box.v[2], d.box.v[3]}}});
  return j;
}

inline nlohmann::json cmd_detect(const RunConfig& cfg, const std::string& checkpoint, const std::string& query_path,
                                 const std::vector<std::string>& support_paths) {
  auto model = load_model(cfg, checkpoint);
  const std::uint64_t before = model->params().checksum();
  auto j = detect_json(*model, cfg, query_path, support_paths);
  if (model->params().checksum() != before) throw Error("parameters changed during detection");
  j["parameter_checksum"] = before;
  return j;
}

// Min-max normalization; an all-equal map becomes all zeros.
inline std::vector<double> min_max_normalize(std::vector<double> v) {
  if (v.empty()) return v;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double a = *lo, b = *hi;
  for (auto& x : v) x = b > a ? (x - a) / (b - a) : 0.0;
  return v;
}

struct HeatmapFile {
  std::size_t layer = 0, support_row = 0;
  std::string path;
  std::vector<double> pixels;  // height x width, in [0,1]
};

// One grayscale map per (fusion layer, support row): the BMHA attention of
// every level-0 query token onto that row, on the level-0 grid, min-max
// normalized and resized to the original query size.
inline std::vector<HeatmapFile> attention_heatmaps(const TideModel& model, const Image& raw_query,
                                                   const SupportSet& support, std::size_t query_size) {
  if (!model.config().enable_bmha) throw ConfigError("enable_bmha: attention export needs BMHA");
  NoGradGuard ng;
  const Image query = resize_bilinear(raw_query, query_size, query_size);
  const auto feats = model.query_encoder()(query);
  const std::size_t gh = feats.levels[0].h, gw = feats.levels[0].w;
  const auto out = model.forward(query, support.images(), appended_null_index(support));
  const std::size_t m = support.size();
  std::vector<HeatmapFile> maps;
  for (std::size_t l = 0; l < out.fusion.bmha_attention.size(); ++l) {
    const Tensor& a = out.fusion.bmha_attention[l];
    for (std::size_t j = 0; j < m; ++j) {
      std::vector<double> grid(gh * gw);
      for (std::size_t t = 0; t < gh * gw; ++t) grid[t] = a[t * m + j];
      Image g(1, gh, gw);
      g.px = min_max_normalize(std::move(grid));
      const Image up = resize_bilinear(g, raw_query.height, raw_query.width);
      HeatmapFile f;
      f.layer = l;
      f.support_row = j;
      f.pixels = up.px;
      for (auto& v : f.pixels) v = std::clamp(v, 0.0, 1.0);
      maps.push_back(std::move(f));
    }
  }
  return maps;
}

inline std::vector<HeatmapFile> write_heatmaps(std::vector<HeatmapFile> maps, const std::string& out_dir,
                                               std::size_t height, std::size_t width) {
  std::filesystem::create_directories(out_dir);
  for (auto& f : maps) {
    f.path = (std::filesystem::path(out_dir) /
              ("attn_layer" + std::to_string(f.layer) + "_support" + std::to_string(f.support_row) + ".pgm"))
                 .string();
    write_pgm(f.path, f.pixels, height, width);
  }
  return maps;
}

// Episode given as files.
inline std::vector<HeatmapFile> cmd_export_attn(const RunConfig& cfg, const std::string& checkpoint,
                                                const std::string& query_path,
                                                const std::vector<std::string>& support_paths,
                                                const std::string& out_dir) {
  auto model = load_model(cfg, checkpoint);
  const Image raw = read_image(query_path);
  std::vector<Image> crops;
  for (const auto& p : support_paths) crops.push_back(read_image(p));
  auto maps = attention_heatmaps(*model, raw, support_from_images(crops), cfg.episode.query_size);
  return write_heatmaps(std::move(maps), out_dir, raw.height, raw.width);
}

// Episode drawn from the dataset: the seed's 1-way-per-class test support
// (cfg.ways x cfg.shots) and the given query image.
inline std::vector<HeatmapFile> cmd_export_attn(const RunConfig& cfg, const std::string& checkpoint, Id image_id,
                                                const std::string& out_dir) {
  auto model = load_model(cfg, checkpoint);
  const Dataset ds = load_dataset(cfg);
  if (!ds.images.count(image_id)) throw ConfigError("image_id: unknown image " + std::to_string(image_id));
  Rng rng(cfg.seed);
  auto classes = ds.classes(Split::Novel);
  if (classes.size() < cfg.ways) throw ConfigError("ways: dataset has too few novel classes");
  rng.shuffle(classes);
  classes.resize(cfg.ways);
  std::sort(classes.begin(), classes.end());
  std::map<Id, std::vector<Id>> shots;
  for (Id c : classes) {
    std::vector<Id> anns;
    for (Id a : ds.annotations_of_class(c))
      if (ds.annotations.at(a).image_id != image_id) anns.push_back(a);
    rng.shuffle(anns);
    if (anns.size() < cfg.shots) throw SamplingError("class " + std::to_string(c) + " has too few shots");
    anns.resize(cfg.shots);
    shots[c] = anns;
  }
  const Image raw = ds.load_image(image_id);
  auto maps = attention_heatmaps(*model, raw, build_test_support(ds, shots), cfg.episode.query_size);
  return write_heatmaps(std::move(maps), out_dir, raw.height, raw.width);
}

}  // namespace tide
