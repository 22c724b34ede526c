#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tide/tide.hpp"

namespace {

struct Common {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> sets;
  std::string dataset;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_file, "key=value config file");
  app->add_option("--seed", c.seed, "global seed");
  app->add_option("--set", c.sets, "override a config key (key=value), repeatable");
  app->add_option("--dataset", c.dataset, "'synthetic' or a COCO annotation file");
}

// default < file < flags
tide::RunConfig resolve(const Common& c) {
  tide::RunConfig cfg;
  if (!c.config_file.empty()) tide::apply_config_file(cfg, c.config_file);
  if (!c.dataset.empty()) cfg.dataset = c.dataset;
  for (const auto& s : c.sets) tide::apply_assignment(cfg, s);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

void emit(const nlohmann::json& j, const std::string& out) {
  if (out.empty()) {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(out);
  if (!f) throw tide::IOError("cannot open '" + out + "' for writing");
  f << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tide: few-shot transformer detector"};
  app.require_subcommand(1);

  Common tc, ec, dc, ac;
  std::string train_ckpt = "tide.ckpt", train_log;
  auto* train = app.add_subcommand("train", "train from scratch and write a checkpoint");
  add_common(train, tc);
  train->add_option("--checkpoint,-o", train_ckpt, "output checkpoint");
  train->add_option("--log", train_log, "line-delimited JSON loss log (default: stderr)");

  std::string eval_ckpt, eval_out;
  bool oracle = false;
  auto* eval = app.add_subcommand("eval", "few-shot evaluation with frozen parameters");
  add_common(eval, ec);
  eval->add_option("--checkpoint,-c", eval_ckpt, "checkpoint to evaluate");
  eval->add_option("--out", eval_out, "write the report here instead of stdout");
  eval->add_flag("--oracle", oracle, "score the ground-truth oracle instead of a model");

  std::string det_ckpt, det_query, det_out;
  std::vector<std::string> det_support;
  auto* detect = app.add_subcommand("detect", "detect support classes in one query image");
  add_common(detect, dc);
  detect->add_option("--checkpoint,-c", det_ckpt, "checkpoint")->required();
  detect->add_option("--query,-q", det_query, "query image (PNG/PPM/PGM)")->required();
  detect->add_option("--support,-s", det_support, "support crops, one per class")->required();
  detect->add_option("--out", det_out, "write JSON here instead of stdout");

  std::string attn_ckpt, attn_query, attn_dir = "attn";
  std::vector<std::string> attn_support;
  std::optional<tide::Id> attn_image;
  auto* attn = app.add_subcommand("export-attn", "write BMHA attention heatmaps as PGM");
  add_common(attn, ac);
  attn->add_option("--checkpoint,-c", attn_ckpt, "checkpoint")->required();
  attn->add_option("--query,-q", attn_query, "query image");
  attn->add_option("--support,-s", attn_support, "support crops");
  attn->add_option("--image-id", attn_image, "dataset image to use as query (support drawn by seed)");
  attn->add_option("--out-dir", attn_dir, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      const auto cfg = resolve(tc);
      std::ofstream logf;
      std::ostream* log = &std::cerr;
      if (!train_log.empty()) {
        logf.open(train_log);
        if (!logf) throw tide::IOError("cannot open '" + train_log + "'");
        log = &logf;
      }
      tide::cmd_train(cfg, train_ckpt, log);
    } else if (eval->parsed()) {
      const auto cfg = resolve(ec);
      if (!oracle && eval_ckpt.empty()) throw tide::ConfigError("eval needs --checkpoint or --oracle");
      emit(tide::cmd_eval(cfg, eval_ckpt, oracle), eval_out);
    } else if (detect->parsed()) {
      emit(tide::cmd_detect(resolve(dc), det_ckpt, det_query, det_support), det_out);
    } else if (attn->parsed()) {
      const auto cfg = resolve(ac);
      std::vector<tide::HeatmapFile> files;
      if (attn_image)
        files = tide::cmd_export_attn(cfg, attn_ckpt, *attn_image, attn_dir);
      else if (!attn_query.empty() && !attn_support.empty())
        files = tide::cmd_export_attn(cfg, attn_ckpt, attn_query, attn_support, attn_dir);
      else
        throw tide::ConfigError("export-attn needs --image-id or --query with --support");
      for (const auto& f : files) std::cout << f.path << "\n";
    }
  } catch (const tide::Error& e) {
    std::cerr << "tide: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "tide: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
