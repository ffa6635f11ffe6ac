#include "mamt4/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <regex>
#include <sstream>

#include "mamt4/checkpoint.hpp"
#include "mamt4/gradcheck.hpp"
#include "mamt4/synth.hpp"
#include "mamt4/training.hpp"

namespace mamt4::cli {

namespace {

namespace fs = std::filesystem;

// Thrown for flag combinations CLI11 cannot express; maps to exit 2.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void ensure_writable(const fs::path& path, bool force) {
  if (fs::exists(path) && !force) {
    throw Error(ErrorKind::IoError, path.string() + " already exists (pass --force to overwrite)");
  }
}

fs::path sibling(const fs::path& ckpt, const std::string& suffix) {
  fs::path p = ckpt;
  p.replace_extension(suffix);
  return p;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot read " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      seeds.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      throw UsageError("--seeds expects a comma-separated list of integers, got '" + text + "'");
    }
  }
  if (seeds.empty()) throw UsageError("--seeds is empty");
  return seeds;
}

std::string metrics_line(const MetricsReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "roc_auc=%.4f f1=%.4f f1_macro=%.4f tp=%zu fp=%zu tn=%zu fn=%zu", r.roc_auc, r.f1,
                r.f1_macro, r.tp, r.fp, r.tn, r.fn);
  return buf;
}

TrainConfig config_or_default(const std::string& path) {
  return path.empty() ? TrainConfig{} : TrainConfig::load(path);
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string scenario;
  std::size_t exams = 0;
  std::uint64_t seed = 0;
  std::string out;
  double train_fraction = 0.8;
  bool force = false;
};

int do_synth(const SynthArgs& a, std::ostream& out) {
  const fs::path dir(a.out);
  ensure_writable(dir / "manifest.csv", a.force);
  const auto result = synth_generate(a.exams, parse_scenario(a.scenario), a.seed, dir, a.train_fraction);
  const auto n_test = std::count_if(result.exams.begin(), result.exams.end(),
                                    [](const Exam& e) { return e.split == Split::Test; });
  out << "synth: " << result.exams.size() << " exams (" << result.exams.size() - n_test << " train, " << n_test
      << " test) -> " << result.manifest.string() << "\n";
  return kExitOk;
}

struct PreprocessArgs {
  std::string manifest;
  std::string method = "threshold";
  std::string unet_ckpt;
  std::string config;
  std::string out;
  std::size_t size = 64;
  bool force = false;
};

int do_preprocess(const PreprocessArgs& a, std::ostream& out) {
  if (a.method == "unet" && a.unet_ckpt.empty()) throw UsageError("--method unet requires --unet-ckpt");
  const fs::path dir(a.out);
  ensure_writable(dir / "manifest.csv", a.force);
  const TrainConfig cfg = config_or_default(a.config);
  std::optional<MiniUNet> unet;
  if (a.method == "unet") unet.emplace(load_unet(cfg, a.unet_ckpt));
  auto exams = load_manifest(a.manifest);
  std::size_t written = 0;
  for (auto& exam : exams) {
    for (auto& [key, entry] : exam.views) {
      const fs::path src = resolve_image_path(a.manifest, entry.path);
      const GrayImage raw = read_image(src);
      const GrayImage cropped = unet ? crop_with_mask(raw, predict_mask(*unet, raw)) : crop_breast_threshold(raw);
      const std::string rel = "images/" + src.filename().string();
      const fs::path dst = dir / rel;
      ensure_writable(dst, a.force);
      write_image(dst, resize_bilinear(cropped, a.size, a.size));
      entry.path = rel;
      ++written;
    }
  }
  write_manifest(dir / "manifest.csv", exams);
  out << "preprocess: " << written << " images (" << a.method << ", " << a.size << "x" << a.size << ") -> "
      << (dir / "manifest.csv").string() << "\n";
  return kExitOk;
}

struct TrainUnetArgs {
  std::string manifest;
  std::string config;
  std::string out;
  bool force = false;
};

int do_train_unet(const TrainUnetArgs& a, std::ostream& out) {
  const TrainConfig cfg = TrainConfig::load(a.config);
  const fs::path ckpt(expand_seed(a.out, cfg.seeds.front()));
  ensure_writable(ckpt, a.force);
  std::string log = "epoch,loss,iou\n";
  const auto result = train_unet(cfg, a.manifest, cfg.seeds.front(), [&](std::size_t e, double loss, double iou) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g\n", e, loss, iou);
    log += buf;
    out << "epoch " << e << " loss " << loss << " iou " << iou << "\n" << std::flush;
  });
  save_checkpoint(result.state, ckpt);
  write_text(sibling(ckpt, ".log.csv"), log);
  char buf[128];
  std::snprintf(buf, sizeof(buf), "mean IoU %.4f on %zu held-out images\n", result.mean_iou, result.holdout_images);
  out << buf;
  return kExitOk;
}

struct TrainArgs {
  int stage = 1;
  std::string manifest;
  std::string config;
  std::string backbone;
  std::string out;
  bool force = false;
};

int do_train(const TrainArgs& a, std::ostream& out) {
  TrainConfig cfg = TrainConfig::load(a.config);
  cfg.stage = a.stage;
  if (a.stage == 2 && a.backbone.empty()) throw UsageError("--stage 2 requires --backbone");
  if (cfg.seeds.size() > 1 && a.out.find("{seed}") == std::string::npos) {
    throw UsageError("config lists several seeds; --out must contain {seed}");
  }
  const ImageBank bank = ImageBank::load(a.manifest, cfg.backbone.input_size);
  const Dataset data = Dataset::from_bank(bank, cfg.birads_mode);
  for (const std::uint64_t seed : cfg.seeds) {
    const fs::path ckpt(expand_seed(a.out, seed));
    ensure_writable(ckpt, a.force);
    auto progress = [&](const EpochRecord& r) {
      char buf[160];
      std::snprintf(buf, sizeof(buf), "seed %llu epoch %zu loss %.5f roc_auc %.4f f1 %.4f lr %.3g\n",
                    static_cast<unsigned long long>(seed), r.epoch, r.train_loss, r.roc_auc, r.f1, r.lr);
      out << buf << std::flush;
    };
    TrainResult result;
    if (a.stage == 1) {
      result = train_stage1(cfg, data, seed, progress);
    } else {
      const SingleViewModel backbone = load_single_view(cfg, expand_seed(a.backbone, seed));
      result = train_stage2(cfg, data, backbone.state(), seed, progress);
    }
    save_checkpoint(result.state, ckpt);
    write_epoch_log(sibling(ckpt, ".log.csv"), result.history);
    write_text(sibling(ckpt, ".metrics.txt"), result.best_report.to_key_value());
    out << "seed " << seed << " best epoch " << result.best_epoch << ": " << metrics_line(result.best_report)
        << " -> " << ckpt.string() << "\n";
    if (a.stage == 2) {
      out << "empty_image train_rate=" << result.train_empty.rate() << " eval_blackouts=" << result.eval_empty.blackouts
          << "\n";
    }
  }
  return kExitOk;
}

struct EvalArgs {
  std::string mode;
  std::string ckpt;
  std::string manifest;
  std::string seeds;
  std::string config;
  std::string out;
  bool force = false;
};

int do_eval(const EvalArgs& a, std::ostream& out) {
  const TrainConfig cfg = config_or_default(a.config);
  std::vector<std::uint64_t> seeds{0};
  const bool templated = a.ckpt.find("{seed}") != std::string::npos;
  if (!a.seeds.empty()) seeds = parse_seed_list(a.seeds);
  if (seeds.size() > 1 && !templated) throw UsageError("--seeds with several values needs {seed} in --ckpt");
  const ImageBank bank = ImageBank::load(a.manifest, cfg.backbone.input_size);
  const Dataset data = Dataset::from_bank(bank, cfg.birads_mode);
  std::vector<MetricsReport> reports;
  for (const std::uint64_t seed : seeds) {
    const std::string ckpt = expand_seed(a.ckpt, seed);
    EvalResult r;
    if (a.mode == "single") {
      r = evaluate_single(load_single_view(cfg, ckpt), data, data.test, cfg.augment.crop_at_test());
    } else {
      const MamT4Model model = load_mamt4(cfg, ckpt);
      EmptyImageCounter counter;
      r = evaluate_mamt4(model, data, data.test, cfg.augment.crop_at_test(), nullptr, &counter,
                         Stage2Options{cfg.augment.empty_image_prob > 0.0});
      if (counter.blackouts != 0) throw Error(ErrorKind::InvalidConfig, "EmptyImage fired during evaluation");
    }
    reports.push_back(r.report);
    out << (templated ? "seed " + std::to_string(seed) + ": " : std::string()) << metrics_line(r.report) << "\n";
    if (!a.out.empty()) {
      const fs::path dst(expand_seed(a.out, seed));
      ensure_writable(dst, a.force);
      write_text(dst, r.report.to_key_value());
    }
  }
  if (reports.size() > 1) out << format_seed_summary(reports);
  return kExitOk;
}

int do_gradcheck(std::uint64_t seed, std::ostream& out) {
  const auto cases = run_gradcheck_suite(seed);
  std::size_t failed = 0;
  for (const auto& c : cases) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%-4s %-28s max_rel_err=%.3e tol=%.0e\n", c.passed() ? "ok" : "FAIL",
                  c.name.c_str(), c.result.max_relative_error, c.tolerance);
    out << buf;
    failed += c.passed() ? 0 : 1;
  }
  out << cases.size() - failed << "/" << cases.size() << " gradient checks passed\n";
  return failed == 0 ? kExitOk : kExitFailure;
}

int do_report(const std::string& logs, std::ostream& out) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(logs)) {
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && name.size() > 12 && name.ends_with(".metrics.txt")) files.push_back(entry.path());
  }
  if (files.empty()) throw Error(ErrorKind::IoError, "no *.metrics.txt files under " + logs);
  std::sort(files.begin(), files.end());
  std::map<std::string, std::vector<MetricsReport>> groups;
  for (const auto& f : files) {
    std::string stem = fs::relative(f, logs).string();
    stem.resize(stem.size() - std::string(".metrics.txt").size());
    groups[experiment_key(stem)].push_back(MetricsReport::from_key_value(read_text(f)));
  }
  out << format_report_table(groups);
  return kExitOk;
}

}  // namespace

std::string experiment_key(const std::string& stem) {
  static const std::regex seed_token("[_\\-.]?seed[0-9]+");
  std::string key = std::regex_replace(stem, seed_token, "");
  return key.empty() ? stem : key;
}

std::string format_seed_summary(const std::vector<MetricsReport>& reports) {
  std::vector<double> auc;
  std::vector<double> f1;
  std::vector<double> macro;
  for (const auto& r : reports) {
    auc.push_back(r.roc_auc);
    f1.push_back(r.f1);
    macro.push_back(r.f1_macro);
  }
  return "ROC-AUC mean ± std: " + format_mean_std(auc) + "\nF1 mean ± std: " + format_mean_std(f1) +
         "\nF1-macro mean ± std: " + format_mean_std(macro) + "\n";
}

std::string format_report_table(const std::map<std::string, std::vector<MetricsReport>>& groups) {
  std::size_t width = 6;
  for (const auto& [name, _] : groups) width = std::max(width, name.size());
  auto pad = [](std::string s, std::size_t n) {
    // "±" is two bytes but one column.
    const std::size_t shown = s.size() - static_cast<std::size_t>(std::count(s.begin(), s.end(), '\xb1'));
    if (shown < n) s.append(n - shown, ' ');
    return s;
  };
  std::string out = pad("Method", width) + "  " + pad("ROC-AUC", 13) + "  " + pad("F1", 13) + "  " +
                    pad("F1-macro", 13) + "  seeds\n";
  for (const auto& [name, reports] : groups) {
    std::vector<double> auc;
    std::vector<double> f1;
    std::vector<double> macro;
    for (const auto& r : reports) {
      auc.push_back(r.roc_auc);
      f1.push_back(r.f1);
      macro.push_back(r.f1_macro);
    }
    out += pad(name, width) + "  " + pad(format_mean_std(auc), 13) + "  " + pad(format_mean_std(f1), 13) + "  " +
           pad(format_mean_std(macro), 13) + "  " + std::to_string(reports.size()) + "\n";
  }
  return out;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Four-view mammography classifier: synthetic data, preprocessing, two-stage training, evaluation."};
  app.name("mamt4");
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic four-view dataset with masks and a manifest");
  synth->add_option("--scenario", sa.scenario, "single_view | asymmetry | artifact")
      ->required()
      ->check(CLI::IsMember({"single_view", "asymmetry", "artifact"}));
  synth->add_option("--exams", sa.exams, "Number of exams (>= 10)")->required()->check(CLI::Range(10, 1000000));
  synth->add_option("--seed", sa.seed, "Generator seed")->required();
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--train-fraction", sa.train_fraction, "Share of studies in the train split")
      ->default_val(0.8)
      ->check(CLI::Range(0.01, 0.99));
  synth->add_flag("--force", sa.force, "Overwrite existing outputs");

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Crop to the breast and resize every image of a manifest");
  pre->add_option("--manifest", pa.manifest, "Input manifest CSV")->required()->check(CLI::ExistingFile);
  pre->add_option("--method", pa.method, "threshold | unet")
      ->default_val("threshold")
      ->check(CLI::IsMember({"threshold", "unet"}));
  pre->add_option("--unet-ckpt", pa.unet_ckpt, "U-Net checkpoint (method unet)");
  pre->add_option("--config", pa.config, "Training config naming the U-Net shape");
  pre->add_option("--size", pa.size, "Output side length in pixels")->default_val(64)->check(CLI::Range(8, 4096));
  pre->add_option("--out", pa.out, "Output directory")->required();
  pre->add_flag("--force", pa.force, "Overwrite existing outputs");

  TrainUnetArgs ua;
  auto* tu = app.add_subcommand("train-unet", "Train the breast segmenter on sidecar masks (80/20 split)");
  tu->add_option("--manifest", ua.manifest, "Manifest CSV; masks sit next to images as *.mask.pgm")
      ->required()
      ->check(CLI::ExistingFile);
  tu->add_option("--config", ua.config, "Training config (key=value)")->required()->check(CLI::ExistingFile);
  tu->add_option("--out", ua.out, "Checkpoint path")->required();
  tu->add_flag("--force", ua.force, "Overwrite existing outputs");

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "Train stage 1 (single view) or stage 2 (four-view fusion)");
  tr->add_option("--stage", ta.stage, "1 or 2")->required()->check(CLI::IsMember({1, 2}));
  tr->add_option("--manifest", ta.manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  tr->add_option("--config", ta.config, "Training config (key=value)")->required()->check(CLI::ExistingFile);
  tr->add_option("--backbone", ta.backbone, "Stage-1 checkpoint for stage 2; may contain {seed}");
  tr->add_option("--out", ta.out, "Checkpoint path; may contain {seed}")->required();
  tr->add_flag("--force", ta.force, "Overwrite existing outputs");

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints on the test split");
  ev->add_option("--mode", ea.mode, "single | mamt4")->required()->check(CLI::IsMember({"single", "mamt4"}));
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint path; may contain {seed}")->required();
  ev->add_option("--manifest", ea.manifest, "Manifest CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--seeds", ea.seeds, "Comma-separated seeds substituted into {seed}, e.g. \"1,2,3,4,5\"");
  ev->add_option("--config", ea.config, "Training config used for the checkpoints (model shape, cropping)");
  ev->add_option("--out", ea.out, "Write the metrics report here; may contain {seed}");
  ev->add_flag("--force", ea.force, "Overwrite existing outputs");

  std::uint64_t gc_seed = 7;
  auto* gc = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  gc->add_option("--seed", gc_seed, "Seed for the random inputs")->default_val(7);

  std::string logs;
  auto* rep = app.add_subcommand("report", "Summarize *.metrics.txt files as mean ± std per experiment");
  rep->add_option("--logs", logs, "Directory searched recursively")->required()->check(CLI::ExistingDirectory);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (synth->parsed()) return do_synth(sa, out);
    if (pre->parsed()) return do_preprocess(pa, out);
    if (tu->parsed()) return do_train_unet(ua, out);
    if (tr->parsed()) return do_train(ta, out);
    if (ev->parsed()) return do_eval(ea, out);
    if (gc->parsed()) return do_gradcheck(gc_seed, out);
    if (rep->parsed()) return do_report(logs, out);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace mamt4::cli
