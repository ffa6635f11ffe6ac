#include "mamt4/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "mamt4/checkpoint.hpp"
#include "mamt4/rng.hpp"

namespace mamt4 {

// ---------------------------------------------------------------------------
// Config

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw Error(ErrorKind::ParseError, "config " + key + ": not a number: '" + v + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw Error(ErrorKind::ParseError, "config " + key + ": not a non-negative integer: '" + v + "'");
  }
  return out;
}

std::vector<std::uint64_t> parse_uint_list(const std::string& key, const std::string& v) {
  std::vector<std::uint64_t> out;
  std::istringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) out.push_back(parse_uint(key, trim(item)));
  if (out.empty()) throw Error(ErrorKind::ParseError, "config " + key + ": empty list");
  return out;
}

std::string join(const std::vector<std::uint64_t>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr0 > 0.0)) throw Error(ErrorKind::InvalidConfig, "lr0 must be > 0");
  if (plateau_patience == 0 || early_stop_patience == 0) {
    throw Error(ErrorKind::InvalidConfig, "patience values must be positive");
  }
  if (!(plateau_factor > 0.0 && plateau_factor <= 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "plateau_factor must lie in (0, 1]");
  }
  if (batch_size == 0) throw Error(ErrorKind::InvalidConfig, "batch_size must be positive");
  if (max_epochs == 0) throw Error(ErrorKind::InvalidConfig, "max_epochs must be positive");
  if (seeds.empty()) throw Error(ErrorKind::InvalidConfig, "at least one seed is required");
  if (stage != 1 && stage != 2) throw Error(ErrorKind::InvalidConfig, "stage must be 1 or 2");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 1.0)) {
    throw Error(ErrorKind::InvalidConfig, "holdout_fraction must lie in (0, 1)");
  }
  focal.validate();
  augment.validate();
  backbone.validate();
  mamt4.validate();
  if (mamt4.feature_dim != backbone.feature_dim) {
    throw Error(ErrorKind::InvalidConfig, "fusion feature_dim differs from backbone feature_dim");
  }
  unet.validate();
}

TrainConfig TrainConfig::parse(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorKind::ParseError, "config line " + std::to_string(line_no) + ": expected key=value");
    }
    const std::string k = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (k == "lr0") c.lr0 = parse_double(k, v);
    else if (k == "max_epochs") c.max_epochs = parse_uint(k, v);
    else if (k == "plateau_patience") c.plateau_patience = parse_uint(k, v);
    else if (k == "plateau_factor") c.plateau_factor = parse_double(k, v);
    else if (k == "early_stop_patience") c.early_stop_patience = parse_uint(k, v);
    else if (k == "improvement_tolerance") c.improvement_tolerance = parse_double(k, v);
    else if (k == "batch_size") c.batch_size = parse_uint(k, v);
    else if (k == "seeds") c.seeds = parse_uint_list(k, v);
    else if (k == "stage") c.stage = static_cast<int>(parse_uint(k, v));
    else if (k == "focal.alpha1") {
      c.auto_alpha = v == "auto";
      if (!c.auto_alpha) c.focal.alpha1 = parse_double(k, v);
    } else if (k == "focal.gamma") c.focal.gamma = parse_double(k, v);
    else if (k == "augment.crop_prob") c.augment.crop_prob = parse_double(k, v);
    else if (k == "augment.empty_image_prob") c.augment.empty_image_prob = parse_double(k, v);
    else if (k == "augment.hflip_prob") c.augment.hflip_prob = parse_double(k, v);
    else if (k == "augment.noise_sigma") c.augment.noise_sigma = parse_double(k, v);
    else if (k == "augment.dropout_count") c.augment.dropout_count = parse_uint(k, v);
    else if (k == "augment.dropout_size") c.augment.dropout_size = parse_uint(k, v);
    else if (k == "augment.seed") c.augment.seed = parse_uint(k, v);
    else if (k == "birads_mode") {
      if (v == "standard") c.birads_mode = BiradsMode::Standard;
      else if (v == "alt") c.birads_mode = BiradsMode::Alt;
      else throw Error(ErrorKind::ParseError, "config birads_mode must be standard or alt");
    } else if (k == "max_train_images") c.max_train_images = parse_uint(k, v);
    else if (k == "holdout_fraction") c.holdout_fraction = parse_double(k, v);
    else if (k == "backbone.widths") {
      const auto ws = parse_uint_list(k, v);
      c.backbone.widths.assign(ws.begin(), ws.end());
    } else if (k == "backbone.feature_dim") c.backbone.feature_dim = parse_uint(k, v);
    else if (k == "backbone.input_size") c.backbone.input_size = parse_uint(k, v);
    else if (k == "mamt4.tokens_per_view") c.mamt4.tokens_per_view = parse_uint(k, v);
    else if (k == "te.num_blocks") c.mamt4.te.num_blocks = parse_uint(k, v);
    else if (k == "te.num_heads") c.mamt4.te.num_heads = parse_uint(k, v);
    else if (k == "te.mlp_hidden") c.mamt4.te.mlp_hidden = parse_uint(k, v);
    else if (k == "unet.depth") c.unet.depth = parse_uint(k, v);
    else if (k == "unet.base_width") c.unet.base_width = parse_uint(k, v);
    else if (k == "unet.input_size") c.unet.input_size = parse_uint(k, v);
    else throw Error(ErrorKind::ParseError, "config line " + std::to_string(line_no) + ": unknown key '" + k + "'");
  }
  c.mamt4.feature_dim = c.backbone.feature_dim;
  if (c.mamt4.tokens_per_view > 0) c.mamt4.te.token_dim = c.mamt4.feature_dim / c.mamt4.tokens_per_view;
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::IoError, "cannot read config " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

std::string TrainConfig::to_text() const {
  std::ostringstream o;
  std::vector<std::uint64_t> widths(backbone.widths.begin(), backbone.widths.end());
  o << "lr0=" << fmt(lr0) << "\nmax_epochs=" << max_epochs << "\nplateau_patience=" << plateau_patience
    << "\nplateau_factor=" << fmt(plateau_factor) << "\nearly_stop_patience=" << early_stop_patience
    << "\nimprovement_tolerance=" << fmt(improvement_tolerance) << "\nbatch_size=" << batch_size
    << "\nseeds=" << join(seeds) << "\nstage=" << stage
    << "\nfocal.alpha1=" << (auto_alpha ? std::string("auto") : fmt(focal.alpha1))
    << "\nfocal.gamma=" << fmt(focal.gamma) << "\naugment.crop_prob=" << fmt(augment.crop_prob)
    << "\naugment.empty_image_prob=" << fmt(augment.empty_image_prob)
    << "\naugment.hflip_prob=" << fmt(augment.hflip_prob) << "\naugment.noise_sigma=" << fmt(augment.noise_sigma)
    << "\naugment.dropout_count=" << augment.dropout_count << "\naugment.dropout_size=" << augment.dropout_size
    << "\naugment.seed=" << augment.seed << "\nbirads_mode=" << (birads_mode == BiradsMode::Standard ? "standard" : "alt")
    << "\nmax_train_images=" << max_train_images << "\nholdout_fraction=" << fmt(holdout_fraction)
    << "\nbackbone.widths=" << join(widths) << "\nbackbone.feature_dim=" << backbone.feature_dim
    << "\nbackbone.input_size=" << backbone.input_size << "\nmamt4.tokens_per_view=" << mamt4.tokens_per_view
    << "\nte.num_blocks=" << mamt4.te.num_blocks << "\nte.num_heads=" << mamt4.te.num_heads
    << "\nte.mlp_hidden=" << mamt4.te.mlp_hidden << "\nunet.depth=" << unet.depth
    << "\nunet.base_width=" << unet.base_width << "\nunet.input_size=" << unet.input_size << "\n";
  return o.str();
}

// ---------------------------------------------------------------------------
// Epoch log

std::string format_epoch_log(const std::vector<EpochRecord>& history) {
  std::string out = std::string(kEpochLogHeader) + "\n";
  char buf[256];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss, r.roc_auc, r.f1,
                  r.f1_macro, r.lr);
    out += buf;
  }
  return out;
}

void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochRecord>& history) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
  out << format_epoch_log(history);
}

std::vector<EpochRecord> parse_epoch_log(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<EpochRecord> out;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      if (line != kEpochLogHeader) throw Error(ErrorKind::ParseError, "epoch log: bad header");
      header = false;
      continue;
    }
    EpochRecord r;
    char tail = 0;
    if (std::sscanf(line.c_str(), "%zu,%lf,%lf,%lf,%lf,%lf%c", &r.epoch, &r.train_loss, &r.roc_auc, &r.f1,
                    &r.f1_macro, &r.lr, &tail) != 6) {
      throw Error(ErrorKind::ParseError, "epoch log: malformed row '" + line + "'");
    }
    out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

double lr_schedule(const std::vector<EpochRecord>& history, const TrainConfig& cfg) {
  double lr = cfg.lr0;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t bad = 0;
  std::size_t cooldown = 0;
  for (const auto& r : history) {
    if (r.f1 > best + cfg.improvement_tolerance) {
      best = r.f1;
      bad = 0;
    } else {
      ++bad;
    }
    if (cooldown > 0) {
      --cooldown;
      bad = 0;
    }
    if (bad >= cfg.plateau_patience) {
      lr *= cfg.plateau_factor;
      cooldown = cfg.plateau_patience;
      bad = 0;
    }
  }
  return lr;
}

void Adam::step(ParameterSet& params, double lr) {
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-8;
  for (const auto& p : params.items()) {
    if (p.trainable && !p.tensor.has_grad()) {
      throw Error(ErrorKind::MissingGradient, "no gradient for trainable parameter " + p.name);
    }
  }
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(steps_));
  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    auto& mom = moments_[p.name];
    const std::size_t n = p.tensor.numel();
    if (mom.m.size() != n) {
      mom.m.assign(n, 0.0);
      mom.v.assign(n, 0.0);
    }
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_values();
    for (std::size_t i = 0; i < n; ++i) {
      mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g[i];
      mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g[i] * g[i];
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      w[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
  params.zero_grad();
}

// ---------------------------------------------------------------------------
// Data

std::size_t view_slot(ViewKey key) {
  for (std::size_t k = 0; k < kAllViews.size(); ++k) {
    if (kAllViews[k] == key) return k;
  }
  return 0;
}

ImageBank ImageBank::load(const std::filesystem::path& manifest, std::size_t input_size) {
  ImageBank bank;
  bank.manifest = manifest;
  bank.exams = load_manifest(manifest);
  bank.views.resize(bank.exams.size());
  for (std::size_t e = 0; e < bank.exams.size(); ++e) {
    for (const auto& [key, entry] : bank.exams[e].views) {
      const GrayImage raw = read_image(resolve_image_path(manifest, entry.path));
      bank.views[e][view_slot(key)] = ViewImages{prepare_view(raw, input_size, false), prepare_view(raw, input_size, true)};
    }
  }
  return bank;
}

ImageBank ImageBank::from_exams(std::vector<Exam> exams, const std::vector<std::array<GrayImage, 4>>& raw,
                                std::size_t input_size) {
  ImageBank bank;
  bank.exams = std::move(exams);
  bank.views.resize(bank.exams.size());
  for (std::size_t e = 0; e < bank.exams.size(); ++e) {
    for (const auto& [key, entry] : bank.exams[e].views) {
      const GrayImage& img = raw.at(e)[view_slot(key)];
      bank.views[e][view_slot(key)] = ViewImages{prepare_view(img, input_size, false), prepare_view(img, input_size, true)};
    }
  }
  return bank;
}

const ViewImages* ImageBank::find(std::size_t exam, ViewKey key) const {
  const auto& slot = views.at(exam)[view_slot(key)];
  return slot ? &*slot : nullptr;
}

Dataset Dataset::from_bank(const ImageBank& bank, BiradsMode mode) {
  Dataset d;
  d.bank = &bank;
  d.samples = make_samples(bank.exams, mode);
  for (std::size_t i = 0; i < d.samples.size(); ++i) {
    (bank.exams[d.samples[i].exam].split == Split::Train ? d.train : d.test).push_back(i);
  }
  return d;
}

std::size_t Dataset::count_cancer(const std::vector<std::size_t>& subset) const {
  return static_cast<std::size_t>(
      std::count_if(subset.begin(), subset.end(), [&](std::size_t i) { return samples[i].label == Label::Cancer; }));
}

// ---------------------------------------------------------------------------
// Shared loop machinery

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348;
constexpr std::uint64_t kInitStream = 0x494e;

FocalConfig focal_for(const TrainConfig& cfg, const Dataset& data) {
  if (!cfg.auto_alpha) return cfg.focal;
  return alpha_from_counts(data.count_cancer(data.train), data.train.size(), cfg.focal.gamma);
}

std::vector<std::size_t> epoch_order(const std::vector<std::size_t>& train, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order = train;
  Rng rng(derive_seed({seed, kShuffleStream, epoch}));
  std::shuffle(order.begin(), order.end(), rng.engine());
  return order;
}

bool better(const MetricsReport& a, const MetricsReport& b) {
  return a.f1 > b.f1 || (a.f1 == b.f1 && a.roc_auc > b.roc_auc);
}

// Runs epochs until max_epochs or early stop. `train_epoch` returns the mean
// training loss; `eval` the test report.
template <typename TrainEpoch, typename Eval>
void run_epochs(const TrainConfig& cfg, ParameterSet& params, TrainResult& result, TrainEpoch&& train_epoch,
                Eval&& eval, const EpochCallback& on_epoch) {
  double lr = cfg.lr0;
  double reference = -std::numeric_limits<double>::infinity();
  std::size_t since_improvement = 0;
  bool have_best = false;
  ParameterSet::Snapshot best;
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    rec.train_loss = train_epoch(epoch, lr);
    const MetricsReport report = eval();
    rec.roc_auc = report.roc_auc;
    rec.f1 = report.f1;
    rec.f1_macro = report.f1_macro;
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (!have_best || better(report, result.best_report)) {
      have_best = true;
      result.best_report = report;
      result.best_epoch = epoch;
      best = params.snapshot();
    }
    if (report.f1 > reference + cfg.improvement_tolerance) {
      reference = report.f1;
      since_improvement = 0;
    } else if (++since_improvement >= cfg.early_stop_patience) {
      break;
    }
    lr = lr_schedule(result.history, cfg);
  }
  params.restore(best);
}

}  // namespace

// ---------------------------------------------------------------------------
// Stage 1

EvalResult evaluate_single(const SingleViewModel& model, const Dataset& data, const std::vector<std::size_t>& subset,
                           bool crop) {
  NoGradGuard no_grad;
  EvalResult out;
  const std::size_t size = model.config().input_size;
  for (std::size_t i : subset) {
    const auto& s = data.samples[i];
    const ViewImages* v = data.bank->find(s.exam, s.primary);
    const Tensor x = to_model_tensor(crop ? v->cropped : v->full, size, model.config().channels);
    out.probabilities.push_back(sigmoid_value(model.logit(x).item()));
    out.labels.push_back(s.label);
  }
  out.report = make_report(out.probabilities, out.labels);
  return out;
}

TrainResult train_stage1(const TrainConfig& cfg, const Dataset& data, std::uint64_t seed,
                         const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.train.empty() || data.test.empty()) throw Error(ErrorKind::EmptyDataset, "stage 1 needs train and test samples");
  SingleViewModel model(cfg.backbone, derive_seed({seed, kInitStream, 1}));
  const FocalConfig focal = focal_for(cfg, data);
  AugmentConfig aug = cfg.augment;
  aug.seed = derive_seed({cfg.augment.seed, seed});
  Adam adam;
  TrainResult result;
  const std::size_t size = cfg.backbone.input_size;

  auto train_epoch = [&](std::size_t epoch, double lr) {
    const auto order = epoch_order(data.train, seed, epoch);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t idx = order[j];
        const auto& s = data.samples[idx];
        const ViewImages* v = data.bank->find(s.exam, s.primary);
        const bool crop = draw_crop(aug, idx, epoch);
        const GrayImage img = augment_pixels(crop ? v->cropped : v->full, aug, idx, epoch, 0);
        const Tensor loss = focal_loss(model.logit(to_model_tensor(img, size, cfg.backbone.channels)), s.label, focal);
        total += loss.item();
        backward(scale(loss, inv_b));
      }
      adam.step(model.state().params, lr);
    }
    return total / static_cast<double>(order.size());
  };
  auto eval = [&]() { return evaluate_single(model, data, data.test, aug.crop_at_test()).report; };
  run_epochs(cfg, model.state().params, result, train_epoch, eval, on_epoch);
  result.state.fingerprint = model.state().fingerprint;
  result.state.params = model.state().params;
  return result;
}

// ---------------------------------------------------------------------------
// Stage 2

FeatureCache::FeatureCache(const MamT4Model& model, const ImageBank& bank, bool with_crops) {
  const auto& bc = model.backbone_config();
  zero_ = model.extract_feature(Tensor::zeros({bc.channels, bc.input_size, bc.input_size}));
  features_.resize(bank.exams.size());
  for (std::size_t e = 0; e < bank.exams.size(); ++e) {
    for (std::size_t k = 0; k < 4; ++k) {
      const auto& v = bank.views[e][k];
      if (!v) continue;
      features_[e][2 * k] = model.extract_feature(to_model_tensor(v->full, bc.input_size, bc.channels));
      if (with_crops) {
        features_[e][2 * k + 1] = model.extract_feature(to_model_tensor(v->cropped, bc.input_size, bc.channels));
      }
    }
  }
}

const Tensor& FeatureCache::feature(std::size_t exam, ViewKey key, bool cropped) const {
  const Tensor& t = features_.at(exam)[2 * view_slot(key) + (cropped ? 1 : 0)];
  if (!t.defined()) throw Error(ErrorKind::MissingView, "no cached feature for exam " + std::to_string(exam) + " " + to_string(key));
  return t;
}

namespace {

std::vector<Tensor> sample_features(const MamT4Model& model, const Dataset& data, std::size_t idx,
                                    const AugmentConfig& aug, std::uint64_t epoch, bool crop,
                                    const std::array<bool, 3>& blacked, const FeatureCache& cache,
                                    const Stage2Options& opts) {
  const auto& s = data.samples[idx];
  const auto& bc = model.backbone_config();
  std::vector<Tensor> views;
  views.reserve(4);
  for (std::size_t slot = 0; slot < 4; ++slot) {
    const ViewKey key = slot == 0 ? s.primary : s.companions[slot - 1];
    if (slot > 0 && !s.companion_present[slot - 1]) {
      if (!opts.substitute_missing) {
        throw Error(ErrorKind::MissingView, data.bank->exams[s.exam].study_id + " lacks " + to_string(key));
      }
      views.push_back(cache.zero_feature());
      continue;
    }
    if (slot > 0 && blacked[slot - 1]) {
      views.push_back(cache.zero_feature());
      continue;
    }
    if (aug.has_pixel_ops()) {
      const ViewImages* v = data.bank->find(s.exam, key);
      const GrayImage img = augment_pixels(crop ? v->cropped : v->full, aug, idx, epoch, slot);
      views.push_back(model.extract_feature(to_model_tensor(img, bc.input_size, bc.channels)));
    } else {
      views.push_back(cache.feature(s.exam, key, crop));
    }
  }
  return views;
}

}  // namespace

EvalResult evaluate_mamt4(const MamT4Model& model, const Dataset& data, const std::vector<std::size_t>& subset,
                          bool crop, const FeatureCache* cache, EmptyImageCounter* counter,
                          const Stage2Options& opts) {
  std::optional<FeatureCache> own;
  if (!cache) cache = &own.emplace(model, *data.bank, crop);
  NoGradGuard no_grad;
  AugmentConfig eval_aug;  // no pixel ops, EmptyImage probability 0
  EvalResult out;
  for (std::size_t i : subset) {
    const auto& s = data.samples[i];
    const auto blacked = draw_empty_image(eval_aug, i, 0, s.companion_present, counter);
    const auto views = sample_features(model, data, i, eval_aug, 0, crop, blacked, *cache, opts);
    out.probabilities.push_back(sigmoid_value(model.forward(views).item()));
    out.labels.push_back(s.label);
  }
  out.report = make_report(out.probabilities, out.labels);
  return out;
}

TrainResult train_stage2(const TrainConfig& cfg, const Dataset& data, const ModelState& backbone_state,
                         std::uint64_t seed, const EpochCallback& on_epoch) {
  cfg.validate();
  if (data.train.empty() || data.test.empty()) throw Error(ErrorKind::EmptyDataset, "stage 2 needs train and test samples");
  MamT4Model model(cfg.backbone, cfg.mamt4, derive_seed({seed, kInitStream, 2}));
  model.load_backbone(backbone_state);
  const FocalConfig focal = focal_for(cfg, data);
  AugmentConfig aug = cfg.augment;
  aug.seed = derive_seed({cfg.augment.seed, seed});
  const Stage2Options opts{cfg.augment.empty_image_prob > 0.0};
  const FeatureCache cache(model, *data.bank, aug.crop_prob > 0.0);
  Adam adam;
  TrainResult result;

  auto train_epoch = [&](std::size_t epoch, double lr) {
    const auto order = epoch_order(data.train, seed, epoch);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t idx = order[j];
        const auto& s = data.samples[idx];
        const bool crop = draw_crop(aug, idx, epoch);
        const auto blacked = draw_empty_image(aug, idx, epoch, s.companion_present, &result.train_empty);
        const auto views = sample_features(model, data, idx, aug, epoch, crop, blacked, cache, opts);
        const Tensor loss = focal_loss(model.forward(views), s.label, focal);
        total += loss.item();
        backward(scale(loss, inv_b));
      }
      adam.step(model.state().params, lr);
    }
    return total / static_cast<double>(order.size());
  };
  auto eval = [&]() {
    return evaluate_mamt4(model, data, data.test, aug.crop_at_test(), &cache, &result.eval_empty, opts).report;
  };
  run_epochs(cfg, model.state().params, result, train_epoch, eval, on_epoch);
  result.state.fingerprint = model.state().fingerprint;
  result.state.params = model.state().params;
  return result;
}

// ---------------------------------------------------------------------------
// U-Net

BreastMask predict_mask(const MiniUNet& unet, const GrayImage& image) {
  NoGradGuard no_grad;
  const std::size_t n = unet.config().input_size;
  const GrayImage input = resize_bilinear(image, n, n);
  const Tensor logits = unet.forward(to_single_channel_tensor(input));
  BreastMask m(n, n);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = logits[i] > 0.0 ? 1 : 0;
  return resize_nearest(m, image.width, image.height);
}

GrayImage crop_with_mask(const GrayImage& image, const BreastMask& predicted) {
  const BreastMask region = largest_component(predicted);
  if (region.count() == 0) return image;
  return centered_crop(image, region);
}

UNetResult train_unet(const TrainConfig& cfg, const std::filesystem::path& manifest, std::uint64_t seed,
                      const std::function<void(std::size_t, double, double)>& on_epoch) {
  cfg.validate();
  const auto exams = load_manifest(manifest);
  if (exams.size() < 2) throw Error(ErrorKind::EmptyDataset, "U-Net training needs at least two studies");
  const auto [train_exams, hold_exams] = split_by_study(exams, 1.0 - cfg.holdout_fraction, derive_seed({seed, 0x554e}));
  const std::size_t n = cfg.unet.input_size;

  struct Pair {
    Tensor image;
    std::vector<double> target;
    BreastMask mask;
  };
  auto load_pairs = [&](const std::vector<Exam>& subset, std::size_t limit) {
    std::vector<Pair> out;
    for (const auto& exam : subset) {
      for (const auto& [key, entry] : exam.views) {
        if (limit > 0 && out.size() >= limit) return out;
        const auto path = resolve_image_path(manifest, entry.path);
        const GrayImage img = resize_bilinear(read_image(path), n, n);
        const BreastMask mask = resize_nearest(read_mask(mask_path_for(path)), n, n);
        std::vector<double> target(mask.bits.begin(), mask.bits.end());
        out.push_back(Pair{to_single_channel_tensor(img), std::move(target), mask});
      }
    }
    return out;
  };
  const auto train = load_pairs(train_exams, cfg.max_train_images);
  const auto hold = load_pairs(hold_exams, 0);
  if (train.empty() || hold.empty()) throw Error(ErrorKind::EmptyDataset, "U-Net split left an empty half");

  MiniUNet unet(cfg.unet, derive_seed({seed, kInitStream, 3}));
  Adam adam;
  UNetResult result;
  result.train_images = train.size();
  result.holdout_images = hold.size();
  std::vector<std::size_t> all(train.size());
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto order = epoch_order(all, seed, epoch);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv_b = 1.0 / static_cast<double>(end - start);
      for (std::size_t j = start; j < end; ++j) {
        const Pair& p = train[order[j]];
        const Tensor loss = bce_with_logits(unet.forward(p.image), p.target);
        total += loss.item();
        backward(scale(loss, inv_b));
      }
      adam.step(unet.state().params, cfg.lr0);
    }
    double iou_sum = 0.0;
    {
      NoGradGuard no_grad;
      for (const Pair& p : hold) {
        const Tensor logits = unet.forward(p.image);
        BreastMask pred(n, n);
        for (std::size_t i = 0; i < pred.bits.size(); ++i) pred.bits[i] = logits[i] > 0.0 ? 1 : 0;
        iou_sum += iou(pred, p.mask);
      }
    }
    result.epoch_loss.push_back(total / static_cast<double>(order.size()));
    result.epoch_iou.push_back(iou_sum / static_cast<double>(hold.size()));
    if (on_epoch) on_epoch(epoch, result.epoch_loss.back(), result.epoch_iou.back());
  }
  result.mean_iou = result.epoch_iou.empty() ? 0.0 : result.epoch_iou.back();
  result.state.fingerprint = unet.state().fingerprint;
  result.state.params = unet.state().params;
  return result;
}

// ---------------------------------------------------------------------------
// Loading

SingleViewModel load_single_view(const TrainConfig& cfg, const std::filesystem::path& ckpt) {
  SingleViewModel model(cfg.backbone, 0);
  load_checkpoint(model.state(), ckpt);
  return model;
}

MamT4Model load_mamt4(const TrainConfig& cfg, const std::filesystem::path& ckpt) {
  MamT4Model model(cfg.backbone, cfg.mamt4, 0);
  load_checkpoint(model.state(), ckpt);
  return model;
}

MiniUNet load_unet(const TrainConfig& cfg, const std::filesystem::path& ckpt) {
  MiniUNet model(cfg.unet, 0);
  load_checkpoint(model.state(), ckpt);
  return model;
}

std::string expand_seed(const std::string& pattern, std::uint64_t seed) {
  std::string out = pattern;
  const std::string token = "{seed}";
  for (auto pos = out.find(token); pos != std::string::npos; pos = out.find(token, pos)) {
    out.replace(pos, token.size(), std::to_string(seed));
  }
  return out;
}

}  // namespace mamt4
