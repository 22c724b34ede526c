// Acceptance suite: one PASS/FAIL line per criterion, exit code 1 if any
// fails. Optional arguments select criteria by number, e.g. `acceptance 2 3`.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "testing.hpp"

using namespace tide;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::string read_file(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Small detector trained on the synthetic set; shared by criteria 6 and 7.
RunConfig training_config(std::uint64_t seed, std::size_t steps) {
  RunConfig cfg;
  cfg.seed = seed;
  cfg.model.d = 32;
  cfg.model.heads = 4;
  cfg.model.layers = 2;
  cfg.model.num_queries = 16;
  cfg.model.select_k = 8;
  cfg.model.box_layers = 3;
  cfg.model.query_blocks = 1;
  cfg.model.support_blocks = 1;
  cfg.model.support_pos_embed = false;
  cfg.loss.no_object = 0.5;
  cfg.episode.train_on_novel = true;
  cfg.episode.withhold_prob = 0.3;
  cfg.lr = 3e-4;
  cfg.grad_clip = 1.0;
  cfg.steps = steps;
  cfg.batch_size = 4;
  cfg.lr_drop = 0.7;
  return cfg;
}

struct TrainedRun {
  double initial_loss = 0, final_loss = 0, ap50 = 0, seconds = 0;
};

TrainedRun train_and_evaluate(const RunConfig& cfg) {
  const auto t0 = Clock::now();
  const Dataset ds = load_dataset(cfg);
  TideModel model(cfg.model, cfg.seed);
  EpisodeStream probe(ds, cfg.episode, 12345);
  std::vector<Episode> eps;
  for (int i = 0; i < 16; ++i) eps.push_back(probe.next());
  TrainedRun r;
  r.initial_loss = mean_episode_loss(model, eps, cfg.loss);
  train(model, ds, cfg);
  r.final_loss = mean_episode_loss(model, eps, cfg.loss);
  r.ap50 = run_protocol(ModelDetector(model), ds, protocol_config(cfg)).ap50;
  r.seconds = seconds_since(t0);
  return r;
}

std::optional<TrainedRun> full_seed0;  // criterion 6 run, reused by criterion 7
constexpr std::size_t kTrainSteps = 2000;

// An m = 3 episode (two classes and the null row) on a 64x64 query.
Episode three_row_episode(const Dataset& ds) {
  for (std::uint64_t seed = 0;; ++seed) {
    Episode ep = tide::testing::tiny_episode(ds, seed, 64);
    if (ep.support.size() == 3) return ep;
  }
}

// ---------------------------------------------------------------- criteria

void gradients(Outcome& o) {
  const auto t0 = Clock::now();
  const ModelConfig mc = tide::testing::tiny_model_config();
  TideModel model(mc, 1);
  tide::testing::jitter_parameters(model.params(), 2, 0.02);
  const Dataset ds = tide::testing::tiny_dataset();
  const Episode ep = three_row_episode(ds);
  const auto checks = tide::testing::check_parameter_gradients(
      model.params(), [&] { return episode_loss(model, ep, LossWeights{}); }, 24, 3);
  double worst = 0;
  for (const auto& c : checks) worst = std::max(worst, c.rel_error);
  const double t = seconds_since(t0);
  o.detail << "d=" << mc.d << " N=" << mc.num_queries << " L=" << mc.layers << " m=" << ep.support.size()
           << " params=" << checks.size() << " max_rel_err=" << worst << " time=" << t << "s";
  o.require(mc.d == 16 && mc.num_queries == 8 && mc.layers == 2 && ep.support.size() == 3, "setup");
  o.require(checks.size() >= 20, ">=20 parameters");
  o.require(worst < 1e-3, "rel err < 1e-3");
  o.require(t < 120, "< 2 min");
}

void hungarian_oracle(Outcome& o) {
  const auto t0 = Clock::now();
  Rng rng(11);
  std::size_t wrong = 0, instances = 250;
  for (std::size_t k = 0; k < instances; ++k) {
    const std::size_t n_tgt = 1 + rng.below(6);
    const std::size_t n_pred = n_tgt + rng.below(7 - n_tgt);
    std::vector<double> cost(n_pred * n_tgt);
    for (auto& c : cost) c = k % 4 == 0 ? static_cast<double>(rng.below(3)) : rng.uniform(-3, 3);
    const auto m = hungarian(cost, n_pred, n_tgt);
    double got = 0;
    for (auto [p, t] : m.pairs) got += cost[p * n_tgt + t];
    if (m.pairs.size() != n_tgt || std::abs(got - tide::testing::brute_force_assignment_cost(cost, n_pred, n_tgt)) > 1e-9)
      ++wrong;
  }
  const double t = seconds_since(t0);
  o.detail << "instances=" << instances << " mismatches=" << wrong << " time=" << t << "s";
  o.require(wrong == 0, "optimal on every instance");
  o.require(t < 10, "< 10 s");
}

void giou_cases(Outcome& o) {
  const double g1 = giou(BoundingBox::corner_abs(0, 0, 1, 1), BoundingBox::corner_abs(1, 1, 2, 2));
  const double g2 = giou(BoundingBox::corner_abs(0, 0, 2, 2), BoundingBox::corner_abs(1, 1, 3, 3));
  Rng rng(12);
  double worst = 0;
  const int pairs = 120;
  for (int i = 0; i < pairs; ++i) {
    const auto a = convert(tide::testing::random_center_box(rng), BoxFormat::CornerAbs, {1, 1});
    const auto b = convert(tide::testing::random_center_box(rng), BoxFormat::CornerAbs, {1, 1});
    worst = std::max(worst, std::abs(iou(a, b) - tide::testing::raster_iou(a.v, b.v)));
  }
  o.detail << "giou_disjoint=" << g1 << " giou_overlap=" << g2 << " mc_pairs=" << pairs << " max_mc_err=" << worst;
  o.require(std::abs(g1 + 0.5) <= 1e-12, "disjoint case -0.5");
  o.require(std::abs(g2 - (1.0 / 7 - 2.0 / 9)) <= 1e-12, "overlap case 1/7-2/9");
  o.require(worst <= 5e-3, "Monte-Carlo IoU within 5e-3");
}

void equivariance(Outcome& o) {
  Rng rng(13);
  ParameterStore ps;
  Linear proj(ps, "proj", 16, 16, rng);
  const Tensor c = tide::testing::random_tensor({8, 16}, rng, -1, 1, false);
  const Tensor s = tide::testing::random_tensor({5, 16}, rng, -1, 1, false);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  const Tensor a = contrastive_logits(c, s, proj), b = contrastive_logits(c, index_select(s, perm), proj);
  bool exact = true;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 5; ++j) exact &= b[i * 5 + j] == a[i * 5 + perm[j]];

  ModelConfig mc = tide::testing::tiny_model_config();
  mc.support_pos_embed = false;
  TideModel model(mc, 14);
  tide::testing::jitter_parameters(model.params(), 15);
  const Dataset ds = tide::testing::tiny_dataset();
  const Episode ep = three_row_episode(ds);
  const auto imgs = ep.support.images();
  const std::size_t m = imgs.size(), ni = ep.support.null_index();
  std::vector<std::size_t> p(m);
  std::vector<Image> shuffled;
  std::size_t new_null = 0;
  for (std::size_t j = 0; j < m; ++j) {
    p[j] = (j + 1) % m;
    shuffled.push_back(imgs[p[j]]);
    if (p[j] == ni) new_null = j;
  }
  NoGradGuard ng;
  const auto fa = model.forward(ep.query, imgs, ni), fb = model.forward(ep.query, shuffled, new_null);
  const Tensor sa = index_select(fa.fusion.s, p);
  double worst = 0;
  for (std::size_t i = 0; i < sa.size(); ++i) worst = std::max(worst, std::abs(sa[i] - fb.fusion.s[i]));
  o.detail << "dcc_columns_exact=" << (exact ? "yes" : "no") << " support_state_max_dev=" << worst;
  o.require(exact, "DCC column permutation exact");
  o.require(worst <= 1e-9, "S^L equivariant within 1e-9");
}

void output_contract(Outcome& o) {
  const Dataset ds = tide::testing::tiny_dataset();
  const ModelConfig mc = tide::testing::tiny_model_config();
  TideModel model(mc, 16);
  const auto before = model.params().checksum();
  double worst = 0;
  bool fixed_n = true;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    const Episode ep = tide::testing::tiny_episode(ds, seed);
    const DetectionSet d = model.detect(ep.query, ep.support.images(), ep.support.null_index());
    const std::size_t m = d.class_dist.dim(1);
    fixed_n &= d.class_dist.dim(0) == mc.num_queries && d.boxes.dim(0) == mc.num_queries;
    for (std::size_t i = 0; i < d.class_dist.dim(0); ++i) {
      double s = 0;
      for (std::size_t j = 0; j < m; ++j) s += d.class_dist[i * m + j];
      worst = std::max(worst, std::abs(s - 1));
    }
  }
  const DetectionSet blank = model.detect(Image(3, 64, 64, 0.0), {Image(3, 128, 128, 0.0)}, 0);
  fixed_n &= blank.class_dist.dim(0) == mc.num_queries;
  run_protocol(ModelDetector(model), ds, {});
  const bool unchanged = model.params().checksum() == before;
  o.detail << "max_row_sum_dev=" << worst << " fixed_N=" << (fixed_n ? "yes" : "no")
           << " checksum_unchanged=" << (unchanged ? "yes" : "no");
  o.require(worst <= 1e-6, "rows sum to 1");
  o.require(fixed_n, "N outputs");
  o.require(unchanged, "checksum unchanged");
}

void synthetic_training(Outcome& o) {
  const RunConfig cfg = training_config(0, kTrainSteps);
  const TrainedRun r = train_and_evaluate(cfg);
  full_seed0 = r;
  const double ratio = r.initial_loss / r.final_loss;
  o.detail << "steps=" << cfg.steps << " loss " << r.initial_loss << " -> " << r.final_loss << " (" << ratio
           << "x) AP50=" << r.ap50 << " time=" << r.seconds << "s";
  o.require(cfg.steps <= 2000, "<= 2000 steps");
  o.require(ratio >= 10, "loss drops >= 10x");
  o.require(r.ap50 >= 0.9, "AP50 >= 0.9");
  o.require(r.seconds < 900, "< 15 min");
}

void ablations(Outcome& o) {
  double full = 0, no_bmha = 0, no_dcc = 0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    RunConfig cfg = training_config(seed, kTrainSteps);
    full += (seed == 0 && full_seed0 ? *full_seed0 : train_and_evaluate(cfg)).ap50 / 3;
    cfg.model.enable_bmha = false;
    no_bmha += train_and_evaluate(cfg).ap50 / 3;
    cfg.model.enable_bmha = true;
    cfg.model.enable_dcc = false;
    no_dcc += train_and_evaluate(cfg).ap50 / 3;
  }
  o.detail << "mean AP50 over 3 seeds: full=" << full << " w/o_BMHA=" << no_bmha << " w/o_DCC=" << no_dcc;
  o.require(full >= no_bmha, "full >= w/o BMHA");
  o.require(full >= no_dcc, "full >= w/o DCC");
}

void multiscale(Outcome& o) {
  Rng rng(17);
  const Image img = tide::testing::random_image(128, 128, rng);
  const auto out = multiscale_support(img);
  bool shapes = true;
  for (const auto& s : out) shapes &= s.channels == 3 && s.height == 128 && s.width == 128;
  const auto other = multiscale_support(tide::testing::random_image(40, 90, rng));
  for (const auto& s : other) shapes &= s.channels == 3 && s.height == 128 && s.width == 128;
  const bool identity = out[1].px == img.px;
  o.detail << "outputs=" << out.size() << " shapes_3x128x128=" << (shapes ? "yes" : "no")
           << " middle_identity=" << (identity ? "yes" : "no");
  o.require(out.size() == 3 && shapes, "three 3x128x128 outputs");
  o.require(identity, "identity middle path");
}

void reproducibility(Outcome& o) {
  const fs::path dir = fs::temp_directory_path() / "tide_acceptance_repro";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const Dataset ds = tide::testing::tiny_dataset();
  const Image q = ds.load_image(2);
  write_ppm((dir / "query.ppm").string(), q);
  Image crop(3, 32, 32);
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) crop.px[(c * 32 + y) * 32 + x] = q.px[(c * q.height + 8 + y) * q.width + 8 + x];
  write_ppm((dir / "support.ppm").string(), crop);
  const std::string common =
      " --seed 5 --set steps=15 --set d=16 --set heads=2 --set num_queries=8 --set select_k=4 --set dmsa_points=2"
      " --set ffn_dim=32 --set layers=2 --set box_layers=2 --set query_blocks=1"
      " --set support_blocks=1 --set eval_seeds=2";
  auto run = [&](const std::string& args) {
    const std::string cmd = std::string(TIDE_CLI_PATH) + " " + args + common + " 2>/dev/null";
    return std::system(cmd.c_str()) == 0;
  };
  bool ok = true;
  for (const std::string r : {"1", "2"}) {
    const std::string ck = (dir / ("run" + r + ".ckpt")).string();
    ok &= run("train -o " + ck + " --log " + (dir / ("train" + r + ".log")).string());
    ok &= run("eval -c " + ck + " --out " + (dir / ("eval" + r + ".json")).string());
    ok &= run("detect -c " + ck + " -q " + (dir / "query.ppm").string() + " -s " + (dir / "support.ppm").string() +
              " --out " + (dir / ("detect" + r + ".json")).string());
  }
  auto same = [&](const std::string& a, const std::string& b) {
    const std::string x = read_file(dir / a), y = read_file(dir / b);
    return !x.empty() && x == y;
  };
  const bool ck = same("run1.ckpt", "run2.ckpt"), ev = same("eval1.json", "eval2.json"),
             det = same("detect1.json", "detect2.json");
  o.detail << "commands_ok=" << (ok ? "yes" : "no") << " checkpoint=" << (ck ? "identical" : "differs")
           << " eval=" << (ev ? "identical" : "differs") << " detect=" << (det ? "identical" : "differs");
  o.require(ok, "CLI runs succeed");
  o.require(ck && ev && det, "bit-identical artifacts");
  fs::remove_all(dir);
}

void average_precision_oracle(Outcome& o) {
  Rng rng(18);
  std::size_t wrong = 0, instances = 500;
  for (std::size_t k = 0; k < instances; ++k) {
    std::vector<GroundTruth> g;
    const std::size_t n_img = 1 + rng.below(3);
    for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) {
      const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
      g.push_back({static_cast<Id>(rng.below(n_img)),
                   BoundingBox::corner_abs(x, y, x + rng.uniform(5, 30), y + rng.uniform(5, 30))});
    }
    std::vector<ScoredDetection> d;
    for (std::size_t i = 0, n = rng.below(11); i < n; ++i) {
      const auto& t = g[rng.below(g.size())];
      BoundingBox b = t.box;
      for (auto& v : b.v) v += rng.uniform(-6, 6);
      const Id im = rng.bernoulli(0.8) ? t.image_id : static_cast<Id>(rng.below(n_img));
      d.push_back({im, 1, rng.uniform(), b});
    }
    for (double thr : {0.5, 0.75})
      if (std::abs(average_precision(d, g, thr) - tide::testing::brute_force_ap(d, g, thr)) > 1e-12) ++wrong;
  }
  const std::vector<ScoredDetection> hand{{0, 1, 0.95, BoundingBox::corner_abs(50, 50, 60, 60)},
                                          {0, 1, 0.90, BoundingBox::corner_abs(0, 0, 10, 10)}};
  const double ap = average_precision(hand, {{0, BoundingBox::corner_abs(0, 0, 10, 10)}}, 0.5);
  o.detail << "instances=" << instances << " mismatches=" << wrong << " hand_AP50=" << ap;
  o.require(wrong == 0, "matches brute force");
  o.require(std::abs(ap - 0.5) <= 1e-12, "hand case 0.5");
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, void (*)(Outcome&)>> criteria{
      {"finite-difference gradients", gradients},
      {"Hungarian vs exhaustive search", hungarian_oracle},
      {"GIoU hand cases and Monte-Carlo IoU", giou_cases},
      {"DCC and fusion permutation equivariance", equivariance},
      {"output contract", output_contract},
      {"synthetic few-shot training", synthetic_training},
      {"ablations over 3 seeds", ablations},
      {"multiscale support", multiscale},
      {"bit-identical reruns", reproducibility},
      {"AP vs threshold enumeration", average_precision_oracle},
  };
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  bool all_pass = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    all_pass &= o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail.str() << " ("
              << seconds_since(t0) << "s)" << std::endl;
  }
  return all_pass ? 0 : 1;
}
