#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tide/geometry.hpp"
#include "tide/image.hpp"
#include "tide/rng.hpp"

namespace tide {

using Id = std::int64_t;

inline constexpr std::size_t kSupportSize = 128;

struct ImageInfo {
  Id id = 0;
  std::string path;
  std::size_t width = 0, height = 0;
};

struct Annotation {
  Id id = 0, image_id = 0, category_id = 0;
  BoundingBox box;  // CornerAbs, pixels
};

enum class Split { Base, Novel };

struct Category {
  Id id = 0;
  std::string name;
  Split split = Split::Base;
};

// Immutable after construction (finalize()). Images are read from disk on
// demand unless an in-memory copy was attached.
class Dataset {
 public:
  std::map<Id, ImageInfo> images;
  std::map<Id, Annotation> annotations;
  std::map<Id, Category> categories;
  std::map<Id, Image> pixels;  // optional in-memory images
  std::string image_root;

  void finalize() {
    by_image_.clear();
    by_class_.clear();
    images_of_class_.clear();
    for (const auto& [id, a] : annotations) {
      if (!images.count(a.image_id))
        throw DataError("annotation " + std::to_string(id) + " references unknown image " + std::to_string(a.image_id));
      if (!categories.count(a.category_id))
        throw DataError("annotation " + std::to_string(id) + " references unknown category " +
                        std::to_string(a.category_id));
      by_image_[a.image_id].push_back(id);
      by_class_[a.category_id].push_back(id);
      images_of_class_[a.category_id].insert(a.image_id);
    }
  }

  const std::vector<Id>& annotations_of_image(Id image) const { return lookup(by_image_, image); }
  const std::vector<Id>& annotations_of_class(Id cls) const { return lookup(by_class_, cls); }
  std::set<Id> images_of_class(Id cls) const {
    auto it = images_of_class_.find(cls);
    return it == images_of_class_.end() ? std::set<Id>{} : it->second;
  }

  std::vector<Id> classes(Split s) const {
    std::vector<Id> out;
    for (const auto& [id, c] : categories)
      if (c.split == s) out.push_back(id);
    return out;
  }

  std::optional<Id> category_by_name(const std::string& name) const {
    for (const auto& [id, c] : categories)
      if (c.name == name) return id;
    return std::nullopt;
  }

  Image load_image(Id id) const {
    if (auto it = pixels.find(id); it != pixels.end()) return it->second;
    auto it = images.find(id);
    if (it == images.end()) throw DataError("unknown image id " + std::to_string(id));
    const std::filesystem::path p = image_root.empty() ? std::filesystem::path(it->second.path)
                                                       : std::filesystem::path(image_root) / it->second.path;
    return read_image(p.string());
  }

  ImageSize size_of(Id id) const {
    const auto& info = images.at(id);
    return {static_cast<double>(info.width), static_cast<double>(info.height)};
  }

 private:
  static const std::vector<Id>& lookup(const std::map<Id, std::vector<Id>>& m, Id k) {
    static const std::vector<Id> empty;
    auto it = m.find(k);
    return it == m.end() ? empty : it->second;
  }
  std::map<Id, std::vector<Id>> by_image_, by_class_;
  std::map<Id, std::set<Id>> images_of_class_;
};

// ---------------------------------------------------------------- COCO ingestion

inline Dataset parse_coco(const nlohmann::json& j, const std::vector<std::string>& novel_class_names,
                          std::size_t min_side = 0) {
  Dataset ds;
  try {
    for (const auto& c : j.at("categories"))
      ds.categories[c.at("id").get<Id>()] = {c.at("id").get<Id>(), c.at("name").get<std::string>(), Split::Base};
    for (const auto& im : j.at("images")) {
      ImageInfo info{im.at("id").get<Id>(), im.at("file_name").get<std::string>(), im.at("width").get<std::size_t>(),
                     im.at("height").get<std::size_t>()};
      if (std::min(info.width, info.height) < min_side) continue;
      ds.images[info.id] = info;
    }
    for (const auto& a : j.at("annotations")) {
      const auto& bb = a.at("bbox");
      if (!bb.is_array() || bb.size() != 4) throw ParseError("bbox must be [x,y,w,h]");
      const double x = bb[0].get<double>(), y = bb[1].get<double>(), w = bb[2].get<double>(), h = bb[3].get<double>();
      Annotation ann{a.at("id").get<Id>(), a.at("image_id").get<Id>(), a.at("category_id").get<Id>(),
                     BoundingBox::corner_abs(x, y, x + w, y + h)};
      if (w <= 0 || h <= 0) continue;
      if (!ds.images.count(ann.image_id)) continue;  // image filtered out as too small
      ds.annotations[ann.id] = ann;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("COCO annotations: ") + e.what());
  }
  for (const auto& name : novel_class_names) {
    auto id = ds.category_by_name(name);
    if (!id) throw ConfigError("novel class '" + name + "' is not a category of the dataset");
    ds.categories[*id].split = Split::Novel;
  }
  ds.finalize();
  return ds;
}

inline Dataset load_coco(const std::string& annotation_file, const std::string& image_root,
                         const std::vector<std::string>& novel_class_names, std::size_t min_side = 0) {
  std::ifstream f(annotation_file);
  if (!f) throw IOError("cannot open '" + annotation_file + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid JSON in '") + annotation_file + "': " + e.what());
  }
  Dataset ds = parse_coco(j, novel_class_names, min_side);
  ds.image_root = image_root;
  return ds;
}

// Writes images as PPM plus a COCO-style annotation file into `dir`.
inline void save_coco(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["images"] = nlohmann::json::array();
  for (const auto& [id, info] : ds.images) {
    std::string file = info.path.empty() ? "img_" + std::to_string(id) + ".ppm" : info.path;
    write_ppm((std::filesystem::path(dir) / file).string(), ds.load_image(id));
    j["images"].push_back({{"id", id}, {"file_name", file}, {"width", info.width}, {"height", info.height}});
  }
  j["annotations"] = nlohmann::json::array();
  for (const auto& [id, a] : ds.annotations)
    j["annotations"].push_back({{"id", id},
                                {"image_id", a.image_id},
                                {"category_id", a.category_id},
                                {"bbox", {a.box.v[0], a.box.v[1], a.box.v[2] - a.box.v[0], a.box.v[3] - a.box.v[1]}}});
  j["categories"] = nlohmann::json::array();
  for (const auto& [id, c] : ds.categories) j["categories"].push_back({{"id", id}, {"name", c.name}});
  std::ofstream f((std::filesystem::path(dir) / "annotations.json").string());
  if (!f) throw IOError("cannot write annotations into '" + dir + "'");
  f << j.dump(1);
}

// ---------------------------------------------------------------- support images

struct AugmentConfig {
  double jitter = 0.2;     // per-channel gain drawn from U(1-j, 1+j)
  double flip_prob = 0.5;  // horizontal flip probability
};

inline Image augment(const Image& img, Rng& rng, const AugmentConfig& cfg) {
  Image out = rng.bernoulli(cfg.flip_prob) ? flip_horizontal(img) : img;
  if (cfg.jitter > 0.0) {
    for (std::size_t c = 0; c < out.channels; ++c) {
      const double g = rng.uniform(1.0 - cfg.jitter, 1.0 + cfg.jitter);
      for (std::size_t i = 0; i < out.height * out.width; ++i) {
        double& v = out.px[c * out.height * out.width + i];
        v = std::clamp(v * g, 0.0, 1.0);
      }
    }
  }
  return out;
}

inline Image support_crop(const Dataset& ds, Id annotation_id) {
  const auto& a = ds.annotations.at(annotation_id);
  return resize_bilinear(crop(ds.load_image(a.image_id), a.box), kSupportSize, kSupportSize);
}

// Crop of a uniformly drawn annotation of `class_id`, resized to 128x128.
inline Image crop_support(const Dataset& ds, Id class_id, Rng& rng, Id* chosen = nullptr) {
  const auto& anns = ds.annotations_of_class(class_id);
  if (anns.empty()) throw SamplingError("class " + std::to_string(class_id) + " has no annotations");
  const Id a = anns[rng.below(anns.size())];
  if (chosen) *chosen = a;
  return support_crop(ds, a);
}

// Resizes to 64, 128 and 256 squares, then each back to 128x128.
inline std::array<Image, 3> multiscale_support(const Image& img) {
  std::array<Image, 3> out;
  constexpr std::array<std::size_t, 3> scales{64, 128, 256};
  for (std::size_t i = 0; i < 3; ++i)
    out[i] = resize_bilinear(resize_bilinear(img, scales[i], scales[i]), kSupportSize, kSupportSize);
  return out;
}

// ---------------------------------------------------------------- episodes

struct SupportRow {
  Image image;
  std::optional<Id> class_id;
  bool is_negative = false;
  bool is_null = false;
  std::optional<Id> source_annotation;
};

struct SupportSet {
  std::vector<SupportRow> rows;

  std::size_t size() const { return rows.size(); }

  std::size_t null_index() const {
    for (std::size_t i = 0; i < rows.size(); ++i)
      if (rows[i].is_null) return i;
    throw DataError("support set has no null row");
  }

  // Class per position; nullopt for the null row and for negatives.
  std::vector<std::optional<Id>> position_to_class() const {
    std::vector<std::optional<Id>> out;
    for (const auto& r : rows) out.push_back(r.is_null || r.is_negative ? std::nullopt : r.class_id);
    return out;
  }

  std::vector<Image> images() const {
    std::vector<Image> out;
    for (const auto& r : rows) out.push_back(r.image);
    return out;
  }
};

inline SupportRow null_support_row() {
  SupportRow r;
  r.image = Image(3, kSupportSize, kSupportSize, 0.0);
  r.is_null = true;
  return r;
}

struct Target {
  std::size_t position = 0;  // index into the support rows
  BoundingBox box;           // CenterNorm
};

struct Episode {
  Id query_image_id = 0;
  Image query;
  SupportSet support;
  std::vector<Target> targets;
};

struct EpisodeConfig {
  double negative_ratio = 1.0;
  AugmentConfig augment;
  bool augment_support = true;
  std::size_t query_size = 64;
  bool train_on_novel = false;  // also draw novel classes as training positives
  double withhold_prob = 0.0;   // chance a present class gets no support row (its objects become background)
};

inline Image prepare_query(const Dataset& ds, Id image_id, std::size_t query_size) {
  return resize_bilinear(ds.load_image(image_id), query_size, query_size);
}

inline std::vector<Id> training_classes(const Dataset& ds, const EpisodeConfig& cfg) {
  std::vector<Id> out;
  for (const auto& [id, c] : ds.categories)
    if (c.split == Split::Base || cfg.train_on_novel) out.push_back(id);
  return out;
}

// Positives: one crop per training class in the query, each from another
// image of that class. Negatives: round(ratio * positives) crops of classes
// absent from the query. Plus the null row; rows are shuffled. With
// withhold_prob > 0 some present classes (never all) get no row, and their
// objects are left out of the targets.
inline Episode sample_training_episode(const Dataset& ds, Id query_image_id, Rng& rng, const EpisodeConfig& cfg) {
  const auto eligible_v = training_classes(ds, cfg);
  const std::set<Id> eligible(eligible_v.begin(), eligible_v.end());
  std::set<Id> present;
  for (Id a : ds.annotations_of_image(query_image_id)) {
    const Id c = ds.annotations.at(a).category_id;
    if (eligible.count(c)) present.insert(c);
  }
  if (present.empty())
    throw SamplingError("image " + std::to_string(query_image_id) + " has no training-class annotations");

  std::set<Id> supported = present;
  if (cfg.withhold_prob > 0.0) {
    for (Id c : present)
      if (rng.bernoulli(cfg.withhold_prob)) supported.erase(c);
    if (supported.empty()) supported.insert(*present.begin());
  }

  Episode ep;
  ep.query_image_id = query_image_id;
  ep.query = prepare_query(ds, query_image_id, cfg.query_size);

  auto make_row = [&](Id ann, bool negative) {
    SupportRow r;
    r.image = support_crop(ds, ann);
    if (cfg.augment_support) r.image = augment(r.image, rng, cfg.augment);
    r.class_id = ds.annotations.at(ann).category_id;
    r.is_negative = negative;
    r.source_annotation = ann;
    return r;
  };

  std::vector<SupportRow> rows;
  for (Id c : supported) {
    std::vector<Id> candidates;
    for (Id a : ds.annotations_of_class(c))
      if (ds.annotations.at(a).image_id != query_image_id) candidates.push_back(a);
    if (candidates.empty())
      throw SamplingError("class " + std::to_string(c) + " has no source image besides the query");
    rows.push_back(make_row(candidates[rng.below(candidates.size())], false));
  }

  std::vector<Id> absent;
  for (Id c : eligible_v)
    if (!present.count(c) && !ds.annotations_of_class(c).empty()) absent.push_back(c);
  const auto n_neg = static_cast<std::size_t>(std::llround(cfg.negative_ratio * static_cast<double>(supported.size())));
  if (!absent.empty())
    for (std::size_t i = 0; i < n_neg; ++i) {
      const Id c = absent[rng.below(absent.size())];
      const auto& anns = ds.annotations_of_class(c);
      rows.push_back(make_row(anns[rng.below(anns.size())], true));
    }
  rows.push_back(null_support_row());
  rng.shuffle(rows);
  ep.support.rows = std::move(rows);

  std::map<Id, std::size_t> position_of;
  for (std::size_t i = 0; i < ep.support.rows.size(); ++i) {
    const auto& r = ep.support.rows[i];
    if (!r.is_null && !r.is_negative) position_of[*r.class_id] = i;
  }
  const ImageSize size = ds.size_of(query_image_id);
  for (Id a : ds.annotations_of_image(query_image_id)) {
    const auto& ann = ds.annotations.at(a);
    auto it = position_of.find(ann.category_id);
    if (it == position_of.end()) continue;
    BoundingBox b = convert(ann.box, BoxFormat::CenterNorm, size);
    for (auto& v : b.v) v = std::clamp(v, 0.0, 1.0);
    ep.targets.push_back({it->second, b});
  }
  return ep;
}

// Test-time support: K rows per class, in map order, then the null row.
inline SupportSet build_test_support(const Dataset& ds, const std::map<Id, std::vector<Id>>& class_to_shot_annotations) {
  if (class_to_shot_annotations.empty()) throw ConfigError("test support needs at least one class");
  SupportSet s;
  for (const auto& [cls, anns] : class_to_shot_annotations) {
    if (anns.empty()) throw ConfigError("class " + std::to_string(cls) + " has no shots");
    for (Id a : anns) {
      SupportRow r;
      r.image = support_crop(ds, a);
      r.class_id = cls;
      r.source_annotation = a;
      s.rows.push_back(std::move(r));
    }
  }
  s.rows.push_back(null_support_row());
  return s;
}

// One line of the episode manifest (line-delimited JSON).
inline nlohmann::json episode_manifest_line(const Episode& ep, std::uint64_t seed, std::uint64_t index) {
  nlohmann::json j;
  j["seed"] = seed;
  j["episode"] = index;
  j["query_image_id"] = ep.query_image_id;
  j["support"] = nlohmann::json::array();
  for (const auto& r : ep.support.rows) {
    nlohmann::json row{{"is_null", r.is_null}, {"is_negative", r.is_negative}};
    row["class_id"] = r.class_id ? nlohmann::json(*r.class_id) : nlohmann::json(nullptr);
    row["annotation_id"] = r.source_annotation ? nlohmann::json(*r.source_annotation) : nlohmann::json(nullptr);
    j["support"].push_back(row);
  }
  j["targets"] = nlohmann::json::array();
  for (const auto& t : ep.targets)
    j["targets"].push_back({{"position", t.position}, {"box", {t.box.v[0], t.box.v[1], t.box.v[2], t.box.v[3]}}});
  return j;
}

// ---------------------------------------------------------------- synthetic shapes

struct SyntheticConfig {
  std::size_t num_images = 16;
  std::size_t image_size = 64;
  std::size_t min_objects = 1, max_objects = 2;
  double min_extent = 16, max_extent = 26;
  std::vector<std::string> novel = {"circle", "square"};
  std::uint64_t seed = 7;
};

// Colored circles, squares and triangles on a dark noisy background, with
// exact ground-truth boxes. Image i's first object has class i mod 3, so
// every class appears in several images.
inline Dataset make_synthetic_dataset(const SyntheticConfig& cfg) {
  static const std::array<const char*, 3> names{"circle", "square", "triangle"};
  static const std::array<std::array<double, 3>, 3> colors{{{0.9, 0.2, 0.2}, {0.2, 0.85, 0.3}, {0.25, 0.35, 0.95}}};
  Dataset ds;
  for (Id c = 0; c < 3; ++c) ds.categories[c + 1] = {c + 1, names[c], Split::Base};
  for (const auto& n : cfg.novel) {
    auto id = ds.category_by_name(n);
    if (!id) throw ConfigError("synthetic dataset has no class '" + n + "'");
    ds.categories[*id].split = Split::Novel;
  }
  Rng rng(cfg.seed);
  const auto S = static_cast<double>(cfg.image_size);
  Id next_ann = 1;
  for (std::size_t i = 0; i < cfg.num_images; ++i) {
    const Id img_id = static_cast<Id>(i + 1);
    Image img(3, cfg.image_size, cfg.image_size);
    for (auto& v : img.px) v = 0.08 + 0.04 * rng.uniform();
    const std::size_t n_obj = cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
    std::vector<std::array<double, 4>> placed;
    for (std::size_t k = 0; k < n_obj; ++k) {
      const std::size_t cls = k == 0 ? i % 3 : rng.below(3);
      std::array<double, 4> box{};
      bool ok = false;
      for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
        const double e = std::round(rng.uniform(cfg.min_extent, cfg.max_extent));
        const double x1 = std::round(rng.uniform(1.0, S - e - 1.0)), y1 = std::round(rng.uniform(1.0, S - e - 1.0));
        box = {x1, y1, x1 + e, y1 + e};
        ok = true;
        for (const auto& p : placed)
          if (box[0] < p[2] + 2 && p[0] < box[2] + 2 && box[1] < p[3] + 2 && p[1] < box[3] + 2) ok = false;
      }
      if (!ok) continue;
      placed.push_back(box);
      const double gain = rng.uniform(0.85, 1.1);
      const double cx = (box[0] + box[2]) / 2, cy = (box[1] + box[3]) / 2, r = (box[2] - box[0]) / 2;
      for (std::size_t y = static_cast<std::size_t>(box[1]); y < static_cast<std::size_t>(box[3]); ++y)
        for (std::size_t x = static_cast<std::size_t>(box[0]); x < static_cast<std::size_t>(box[2]); ++x) {
          const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
          bool inside = false;
          if (cls == 0) {
            inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
          } else if (cls == 1) {
            inside = true;
          } else {
            // apex at top-center, base along the bottom edge
            const double t = (py - box[1]) / (box[3] - box[1]);
            inside = std::fabs(px - cx) <= t * r;
          }
          if (inside)
            for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = std::clamp(colors[cls][c] * gain, 0.0, 1.0);
        }
      ds.annotations[next_ann] = {next_ann, img_id, static_cast<Id>(cls + 1),
                                  BoundingBox::corner_abs(box[0], box[1], box[2], box[3])};
      ++next_ann;
    }
    ds.images[img_id] = {img_id, "synthetic_" + std::to_string(img_id) + ".ppm", cfg.image_size, cfg.image_size};
    ds.pixels[img_id] = std::move(img);
  }
  ds.finalize();
  return ds;
}

}  // namespace tide
