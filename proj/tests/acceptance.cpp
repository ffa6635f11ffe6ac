// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mamt4/checkpoint.hpp"
#include "mamt4/cli.hpp"
#include "mamt4/gradcheck.hpp"
#include "mamt4/layers.hpp"
#include "mamt4/loss_metrics.hpp"
#include "mamt4/models.hpp"
#include "mamt4/synth.hpp"
#include "mamt4/training.hpp"
#include "support.hpp"

using namespace mamt4;
using mamt4::testing::file_bytes;
using mamt4::testing::random_tensor;
using mamt4::testing::TempDir;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), f, a, b);
  return buf;
}

std::string fmt(const char* f, double a, double b, double c) {
  char buf[200];
  std::snprintf(buf, sizeof(buf), f, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Desk training defaults shared by the benchmark runs.
TrainConfig desk_config() {
  TrainConfig c;
  c.lr0 = 1e-3;
  c.batch_size = 16;
  return c;
}

struct SynthData {
  TempDir dir;
  std::filesystem::path manifest;
  ImageBank bank;
  Dataset data;

  SynthData(const std::string& tag, std::size_t exams, Scenario scenario, std::uint64_t seed) : dir(tag) {
    manifest = synth_generate(exams, scenario, seed, dir.path()).manifest;
    bank = ImageBank::load(manifest, 64);
    data = Dataset::from_bank(bank, BiradsMode::Standard);
  }
};

double logit_of(double p) { return std::log(p / (1.0 - p)); }

// ---------------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto cases = run_gradcheck_suite(7);
  std::size_t passed = 0;
  std::size_t largest = 0;
  std::string worst;
  double worst_ratio = 0.0;
  for (const auto& c : cases) {
    if (c.passed()) ++passed;
    largest = std::max(largest, c.elements);
    const double ratio = c.result.max_relative_error / c.tolerance;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst = c.name;
    }
  }
  // Every required op or composite appears by name.
  std::size_t covered = 0;
  const std::vector<std::string> required{"linear", "conv2d", "pool", "layer_norm", "softmax", "msa",
                                          "te_block", "focal_loss", "unet", "single_view", "mamt4"};
  for (const auto& op : required) {
    if (std::any_of(cases.begin(), cases.end(), [&](const GradCheckCase& c) { return c.name.starts_with(op); }))
      ++covered;
  }
  const double secs = seconds_since(t0);
  Verdict v;
  v.pass = passed == cases.size() && !cases.empty() && covered == required.size() && largest <= 64 && secs < 120.0;
  v.detail = std::to_string(passed) + "/" + std::to_string(cases.size()) + " checks within tolerance, " +
             std::to_string(covered) + "/" + std::to_string(required.size()) + " ops covered, largest input " +
             std::to_string(largest) + ", worst " + worst +
             fmt(" at %.2g of its bound, %.1f s", worst_ratio, secs);
  return v;
}

Verdict focal_exactness() {
  const FocalConfig cfg{0.95, 2.0};
  const double hand = focal_loss_value(0.0, Label::Cancer, cfg);
  bool ok = std::abs(hand - 0.164622) < 1e-6;
  double worst_bce = 0.0;
  for (int i = 1; i <= 99; ++i) {
    const double p = i / 100.0;
    const double z = logit_of(p);
    const double ps = 1.0 / (1.0 + std::exp(-z));
    worst_bce = std::max(worst_bce, std::abs(focal_loss_value(z, Label::Cancer, FocalConfig{1.0, 0.0}) + std::log(ps)));
    worst_bce =
        std::max(worst_bce, std::abs(focal_loss_value(z, Label::Normal, FocalConfig{0.0, 0.0}) + std::log(1.0 - ps)));
  }
  ok = ok && worst_bce < 1e-12;
  Rng rng(2024);
  double worst_alpha = 0.0;
  for (int i = 0; i < 10; ++i) {
    const auto n = static_cast<std::size_t>(rng.integer(2, 100000));
    const auto c = static_cast<std::size_t>(rng.integer(1, static_cast<std::int64_t>(n) - 1));
    const double expected = 1.0 - static_cast<double>(c) / static_cast<double>(n);
    worst_alpha = std::max(worst_alpha, std::abs(alpha_from_counts(c, n).alpha1 - expected));
  }
  ok = ok && worst_alpha < 1e-15;
  return {ok, fmt("L(p=0.5, cancer) = %.6f, BCE reduction max err %.1e, alpha max err %.1e", hand, worst_bce,
                  worst_alpha)};
}

Verdict tokenization_shapes() {
  const auto cfg = MamT4Config::full();
  const auto bb = BackboneConfig::full();
  MamT4Model model(bb, cfg, 1);
  Rng rng(3);
  std::vector<Tensor> views;
  for (int i = 0; i < 4; ++i) views.push_back(random_tensor({bb.feature_dim}, rng));
  const Tensor tokens = model.tokenize(views);
  const bool ok = cfg.tokens_per_view == 8 && cfg.token_dim() == 192 && bb.feature_dim == 1536 &&
                  tokens.shape() == Shape{32, 192} && model.class_token().shape() == Shape{1, 192} &&
                  model.positional_embedding().shape() == Shape{33, 192} && cfg.seq_len() == 33 &&
                  model.forward(views).shape() == Shape{1};
  std::ostringstream d;
  d << "per view " << cfg.tokens_per_view << "x" << cfg.token_dim() << ", fused " << tokens.dim(0) << "x"
    << tokens.dim(1) << ", sequence " << model.positional_embedding().dim(0);
  return {ok, d.str()};
}

Verdict te_invariants() {
  const auto t0 = std::chrono::steady_clock::now();
  const TEConfig cfg = TEConfig::desk();
  Rng rng(44);

  // Zero weight matrices reduce both residual branches to zero.
  ParameterSet zero_set;
  ParamBuilder zb(zero_set, 1);
  const auto zero_block = make_te_block(zb, "te", cfg);
  for (auto& p : zero_set.items()) {
    if (p.name.find(".w_") != std::string::npos || p.name.ends_with(".weight")) {
      auto v = p.tensor.mutable_values();
      std::fill(v.begin(), v.end(), 0.0);
    }
  }
  const Tensor x = random_tensor({33, cfg.token_dim}, rng);
  const Tensor y = te_block(x, zero_block, cfg);
  const auto xv = x.values();
  const auto yv = y.values();
  const bool identity = std::equal(xv.begin(), xv.end(), yv.begin(), yv.end());

  // Class token first, 32 tokens permuted, no positional embedding.
  ParameterSet set;
  ParamBuilder pb(set, 2);
  std::vector<TeBlockParams> blocks;
  for (std::size_t i = 0; i < cfg.num_blocks; ++i) blocks.push_back(make_te_block(pb, "te" + std::to_string(i), cfg));
  auto stack = [&](Tensor t) {
    for (const auto& b : blocks) t = te_block(t, b, cfg);
    return t;
  };
  const std::size_t n = 32;
  const std::size_t d = cfg.token_dim;
  const Tensor cls = random_tensor({1, d}, rng);
  const Tensor body = random_tensor({n, d}, rng);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::vector<Tensor> rows;
  for (auto i : perm) rows.push_back(slice(body, 0, i, i + 1));
  const Tensor out = stack(concat({cls, body}, 0));
  const Tensor out_p = stack(concat({cls, concat(rows, 0)}, 0));
  bool equivariant = true;
  for (std::size_t c = 0; c < d; ++c) equivariant = equivariant && out_p[c] == out[c];
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < d; ++c) equivariant = equivariant && out_p[(1 + j) * d + c] == out[(1 + perm[j]) * d + c];

  double worst_row = 0.0;
  const Tensor maps = te_block_attention(random_tensor({33, d}, rng, -5, 5), blocks[0], cfg);
  for (std::size_t r = 0; r < cfg.num_heads * 33; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 33; ++c) total += maps[r * 33 + c];
    worst_row = std::max(worst_row, std::abs(total - 1.0));
  }
  const double secs = seconds_since(t0);
  const bool ok = identity && equivariant && worst_row < 1e-9 && secs < 60.0;
  return {ok, std::string("identity ") + (identity ? "exact" : "broken") + ", permutation " +
                  (equivariant ? "bit-exact" : "differs") + fmt(", row sums within %.1e, %.2f s", worst_row, secs)};
}

// One stage-1 + long stage-2 run shared by the freezing and EmptyImage checks.
struct FreezeRun {
  TrainResult s1;
  TrainResult s2;
  EmptyImageCounter extra_eval;
  bool backbone_identical = false;
  std::size_t backbone_tensors = 0;
};

const FreezeRun& freeze_run() {
  static const FreezeRun run = [] {
    FreezeRun r;
    SynthData d("acc_freeze", 60, Scenario::Asymmetry, 5);
    auto cfg = desk_config();
    cfg.max_epochs = 2;
    r.s1 = train_stage1(cfg, d.data, 1);
    cfg.stage = 2;
    cfg.max_epochs = 20;
    cfg.early_stop_patience = 20;
    cfg.augment.empty_image_prob = 0.2;
    r.s2 = train_stage2(cfg, d.data, r.s1.state, 1);
    r.backbone_identical = true;
    for (const auto& p : r.s2.state.params.items()) {
      if (!p.name.starts_with("backbone.")) continue;
      ++r.backbone_tensors;
      const auto got = p.tensor.values();
      const auto want = r.s1.state.params.at(p.name).tensor.values();
      r.backbone_identical = r.backbone_identical && std::equal(got.begin(), got.end(), want.begin(), want.end());
    }
    MamT4Model model(cfg.backbone, cfg.mamt4, 0);
    model.state().params.restore(r.s2.state.params.snapshot());
    evaluate_mamt4(model, d.data, d.data.test, false, nullptr, &r.extra_eval);
    evaluate_mamt4(model, d.data, d.data.train, false, nullptr, &r.extra_eval);
    return r;
  }();
  return run;
}

Verdict freezing() {
  const auto& r = freeze_run();
  const bool ok = r.backbone_identical && r.backbone_tensors > 0 && r.s2.history.size() >= 20;
  return {ok, std::to_string(r.backbone_tensors) + " backbone tensors " +
                  (r.backbone_identical ? "bit-identical" : "changed") + " after " +
                  std::to_string(r.s2.history.size()) + " stage-2 epochs"};
}

Verdict single_view_benchmark() {
  const auto t0 = std::chrono::steady_clock::now();
  SynthData d("acc_single", 250, Scenario::SingleView, 6);
  auto cfg = desk_config();
  cfg.max_epochs = 30;
  const auto r = train_stage1(cfg, d.data, 1);
  const double secs = seconds_since(t0);
  const std::size_t train_exams = d.data.train.size() / 4;
  const std::size_t test_exams = d.data.test.size() / 4;
  const bool ok = r.best_report.roc_auc >= 0.90 && r.history.size() <= 30 && secs < 600.0 && train_exams == 200 &&
                  test_exams == 50;
  return {ok, std::to_string(train_exams) + "/" + std::to_string(test_exams) + " exams, " +
                  fmt("test ROC-AUC %.4f at epoch %.0f", r.best_report.roc_auc, static_cast<double>(r.best_epoch)) +
                  fmt(" of %.0f, %.0f s", static_cast<double>(r.history.size()), secs)};
}

Verdict multi_view_gain() {
  const auto t0 = std::chrono::steady_clock::now();
  SynthData d("acc_asym", 500, Scenario::Asymmetry, 7);
  double s1_sum = 0.0;
  double s2_sum = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto cfg = desk_config();
    cfg.max_epochs = 10;
    const auto s1 = train_stage1(cfg, d.data, seed);
    cfg.stage = 2;
    cfg.max_epochs = 30;
    cfg.augment.empty_image_prob = 0.2;
    const auto s2 = train_stage2(cfg, d.data, s1.state, seed);
    s1_sum += s1.best_report.roc_auc;
    s2_sum += s2.best_report.roc_auc;
    per_seed += fmt(" [%.3f -> %.3f]", s1.best_report.roc_auc, s2.best_report.roc_auc);
  }
  const double s1 = s1_sum / 3.0;
  const double s2 = s2_sum / 3.0;
  const double secs = seconds_since(t0);
  const bool ok = s1 <= 0.75 && s2 >= s1 + 0.10 && secs < 1800.0;
  return {ok, fmt("single-view %.4f, four-view %.4f, %.0f s;", s1, s2, secs) + per_seed};
}

Verdict cropping_gain() {
  SynthData d("acc_artifact", 500, Scenario::Artifact, 8);
  double plain_sum = 0.0;
  double crop_sum = 0.0;
  std::string per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    auto cfg = desk_config();
    cfg.max_epochs = 15;
    const auto plain = train_stage1(cfg, d.data, seed);
    cfg.augment.crop_prob = 1.0;
    const auto cropped = train_stage1(cfg, d.data, seed);
    plain_sum += plain.best_report.roc_auc;
    crop_sum += cropped.best_report.roc_auc;
    per_seed += fmt(" [%.3f vs %.3f]", plain.best_report.roc_auc, cropped.best_report.roc_auc);
  }
  const double plain = plain_sum / 3.0;
  const double crop = crop_sum / 3.0;
  return {crop >= plain + 0.05, fmt("no crop %.4f, threshold crop %.4f;", plain, crop) + per_seed};
}

Verdict unet_segmentation() {
  TempDir dir("acc_unet");
  const auto manifest = synth_generate(50, Scenario::SingleView, 9, dir.path()).manifest;
  auto cfg = desk_config();
  cfg.lr0 = 3e-3;
  cfg.batch_size = 8;
  cfg.max_epochs = 15;
  const auto r = train_unet(cfg, manifest, 1);
  const bool ok = r.mean_iou >= 0.95 && r.epoch_iou.size() <= 50;
  return {ok, fmt("mean IoU %.4f on %.0f held-out images", r.mean_iou, static_cast<double>(r.holdout_images)) +
                  fmt(" (%.0f train) after %.0f epochs", static_cast<double>(r.train_images),
                      static_cast<double>(r.epoch_iou.size()))};
}

Verdict metric_oracles() {
  Rng rng(10);
  std::size_t auc_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto n = static_cast<std::size_t>(rng.integer(2, 50));
    std::vector<double> s(n);
    std::vector<Label> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.integer(0, 15)) / 15.0;
      y[i] = rng.bernoulli(0.4) ? Label::Cancer : Label::Normal;
    }
    y[0] = Label::Cancer;
    y[1] = Label::Normal;
    double wins = 0.0;
    double pairs = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (y[i] != Label::Cancer || y[j] != Label::Normal) continue;
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
    if (roc_auc(s, y) == wins / pairs) ++auc_ok;
  }

  std::size_t f1_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p(40);
    std::vector<Label> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
      p[i] = rng.uniform();
      y[i] = rng.bernoulli(0.3) ? Label::Cancer : Label::Normal;
    }
    const auto f = f1_scores(p, y);
    if (f.f1_macro == (f.f1_cancer + f.f1_normal) / 2.0) ++f1_ok;
  }

  std::size_t invariant_ok = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(40);
    std::vector<Label> y(40);
    for (std::size_t i = 0; i < 40; ++i) {
      s[i] = rng.uniform(-3.0, 3.0);
      y[i] = i % 4 == 0 ? Label::Cancer : Label::Normal;
    }
    const double a = rng.uniform(0.1, 5.0);
    const double b = rng.uniform(-2.0, 2.0);
    const int kind = trial % 3;
    std::vector<double> t(40);
    for (std::size_t i = 0; i < 40; ++i) {
      if (kind == 0) t[i] = a * s[i] + b;
      else if (kind == 1) t[i] = std::exp(a * s[i]);
      else t[i] = std::atan(s[i]) + b;
    }
    if (roc_auc(t, y) == roc_auc(s, y)) ++invariant_ok;
  }
  const bool ok = auc_ok == 100 && f1_ok == 100 && invariant_ok == 20;
  return {ok, "AUC vs pair count " + std::to_string(auc_ok) + "/100, F1-macro " + std::to_string(f1_ok) +
                  "/100, monotone invariance " + std::to_string(invariant_ok) + "/20"};
}

// synth -> stage 1 -> stage 2 -> eval through the command-line front end.
std::vector<std::string> pipeline(const std::filesystem::path& root, std::vector<int>& codes) {
  const std::string r = root.string();
  {
    std::ofstream cfg(root / "desk.cfg");
    cfg << "lr0=0.001\nbatch_size=16\nmax_epochs=3\nseeds=1\naugment.empty_image_prob=0.2\n";
  }
  const std::vector<std::vector<std::string>> steps{
      {"synth", "--scenario", "asymmetry", "--exams", "20", "--seed", "12", "--out", r + "/data"},
      {"train", "--stage", "1", "--manifest", r + "/data/manifest.csv", "--config", r + "/desk.cfg", "--out",
       r + "/runs/s1.ckpt"},
      {"train", "--stage", "2", "--manifest", r + "/data/manifest.csv", "--config", r + "/desk.cfg", "--backbone",
       r + "/runs/s1.ckpt", "--out", r + "/runs/s2.ckpt"},
      {"eval", "--mode", "mamt4", "--ckpt", r + "/runs/s2.ckpt", "--manifest", r + "/data/manifest.csv", "--config",
       r + "/desk.cfg", "--out", r + "/runs/eval.metrics.txt"},
  };
  std::vector<std::string> outputs;
  for (const auto& args : steps) {
    std::ostringstream out, err;
    codes.push_back(cli::run(args, out, err));
    outputs.push_back(out.str());
  }
  return {"runs/s1.ckpt", "runs/s1.log.csv", "runs/s1.metrics.txt", "runs/s2.ckpt",
          "runs/s2.log.csv", "runs/s2.metrics.txt", "runs/eval.metrics.txt", "data/manifest.csv"};
}

Verdict reproducibility() {
  TempDir a("acc_repro_a");
  TempDir b("acc_repro_b");
  std::vector<int> codes;
  const auto files = pipeline(a.path(), codes);
  pipeline(b.path(), codes);
  const bool ran = std::all_of(codes.begin(), codes.end(), [](int c) { return c == 0; });
  std::size_t identical = 0;
  for (const auto& f : files) {
    if (std::filesystem::exists(a / f) && file_bytes(a / f) == file_bytes(b / f)) ++identical;
  }

  // Load, re-save, compare; then corrupt one byte.
  const auto cfg = TrainConfig::load(a / "desk.cfg");
  bool round_trip = false;
  bool crc_rejects = false;
  if (ran) {
    const MamT4Model model = load_mamt4(cfg, a / "runs" / "s2.ckpt");
    save_checkpoint(model.state(), a / "again.ckpt");
    round_trip = file_bytes(a / "runs" / "s2.ckpt") == file_bytes(a / "again.ckpt");
    auto bytes = encode_checkpoint(model.state());
    bytes[bytes.size() / 2] ^= 0x01;
    try {
      decode_checkpoint(bytes);
    } catch (const Error& e) {
      crc_rejects = e.kind() == ErrorKind::CorruptCheckpoint;
    }
  }
  const bool ok = ran && identical == files.size() && round_trip && crc_rejects;
  return {ok, std::to_string(identical) + "/" + std::to_string(files.size()) + " pipeline outputs byte-identical, " +
                  "reload+resave " + (round_trip ? "identical" : "differs") + ", corrupted file " +
                  (crc_rejects ? "rejected" : "accepted")};
}

Verdict empty_image_contract() {
  const auto& r = freeze_run();
  const double rate = r.s2.train_empty.rate();
  const std::size_t eval_blackouts = r.s2.eval_empty.blackouts + r.extra_eval.blackouts;
  const bool ok = r.s2.train_empty.draws >= 10000 && rate >= 0.18 && rate <= 0.22 && eval_blackouts == 0 &&
                  r.s2.eval_empty.draws > 0 && r.extra_eval.draws > 0;
  return {ok, fmt("train rate %.4f over %.0f draws, ", rate, static_cast<double>(r.s2.train_empty.draws)) +
                  fmt("eval blackouts %.0f over %.0f draws", static_cast<double>(eval_blackouts),
                      static_cast<double>(r.s2.eval_empty.draws + r.extra_eval.draws))};
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"focal loss exactness", focal_exactness},
      {"tokenization shape law", tokenization_shapes},
      {"TE invariants", te_invariants},
      {"backbone freezing", freezing},
      {"single-view benchmark", single_view_benchmark},
      {"multi-view gain", multi_view_gain},
      {"cropping gain", cropping_gain},
      {"U-Net segmentation", unet_segmentation},
      {"metric oracles", metric_oracles},
      {"reproducibility", reproducibility},
      {"EmptyImage contract", empty_image_contract},
  };
  std::size_t passed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    passed += v.pass ? 1 : 0;
    std::printf("%s %2zu %-24s %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu/%zu criteria passed\n", passed, criteria.size());
  return passed == criteria.size() ? 0 : 1;
}
