#pragma once

// Two-stage training: the single-view classifier first, then the four-view
// fusion head on frozen backbone features. Adam, reduce-on-plateau on test
// F1, early stopping, evaluation and the mini U-Net segmenter.

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mamt4/data.hpp"
#include "mamt4/loss_metrics.hpp"
#include "mamt4/models.hpp"

namespace mamt4 {

struct TrainConfig {
  double lr0 = 1e-5;
  std::size_t max_epochs = 200;
  std::size_t plateau_patience = 5;
  double plateau_factor = 0.1;
  std::size_t early_stop_patience = 10;
  double improvement_tolerance = 1e-4;  // on test F1
  std::size_t batch_size = 16;
  std::vector<std::uint64_t> seeds{1};
  int stage = 1;
  FocalConfig focal;
  bool auto_alpha = false;  // alpha1 = 1 - N_c/N from the training labels
  AugmentConfig augment;
  BiradsMode birads_mode = BiradsMode::Standard;
  std::size_t max_train_images = 0;  // U-Net only; 0 = all
  double holdout_fraction = 0.2;     // U-Net only

  BackboneConfig backbone = BackboneConfig::desk();
  MamT4Config mamt4 = MamT4Config::desk();
  UNetConfig unet = UNetConfig::desk();

  void validate() const;
  // key=value lines; '#' starts a comment. Unknown keys are errors.
  static TrainConfig parse(const std::string& text);
  static TrainConfig load(const std::filesystem::path& path);
  std::string to_text() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double roc_auc = 0.0;
  double f1 = 0.0;
  double f1_macro = 0.0;
  double lr = 0.0;
};

inline constexpr const char* kEpochLogHeader = "epoch,loss,roc_auc,f1,f1_macro,lr";
std::string format_epoch_log(const std::vector<EpochRecord>& history);
void write_epoch_log(const std::filesystem::path& path, const std::vector<EpochRecord>& history);
std::vector<EpochRecord> parse_epoch_log(const std::string& text);

// Learning rate for the epoch after `history` under reduce-on-plateau:
// after plateau_patience epochs without an F1 gain above the tolerance the
// rate is multiplied by plateau_factor, then a cooldown of plateau_patience
// epochs suspends counting.
double lr_schedule(const std::vector<EpochRecord>& history, const TrainConfig& cfg);

// Adam (beta1 0.9, beta2 0.999, eps 1e-8) with bias correction. Updates
// trainable parameters only, then clears every gradient.
class Adam {
 public:
  void step(ParameterSet& params, double lr);
  std::size_t steps() const { return steps_; }

 private:
  struct Moments {
    std::vector<double> m;
    std::vector<double> v;
  };
  std::map<std::string, Moments, std::less<>> moments_;
  std::size_t steps_ = 0;
};

// ---------------------------------------------------------------------------
// Data held in memory for training

// Every view of every exam, resized to the model input size, plain and
// threshold-cropped.
struct ImageBank {
  std::filesystem::path manifest;
  std::vector<Exam> exams;
  std::vector<std::array<std::optional<ViewImages>, 4>> views;  // kAllViews order

  static ImageBank load(const std::filesystem::path& manifest, std::size_t input_size);
  static ImageBank from_exams(std::vector<Exam> exams, const std::vector<std::array<GrayImage, 4>>& raw,
                              std::size_t input_size);
  const ViewImages* find(std::size_t exam, ViewKey key) const;
};

std::size_t view_slot(ViewKey key);

struct Dataset {
  const ImageBank* bank = nullptr;
  std::vector<LabeledSample> samples;
  std::vector<std::size_t> train;  // indices into samples
  std::vector<std::size_t> test;

  static Dataset from_bank(const ImageBank& bank, BiradsMode mode);
  std::size_t count_cancer(const std::vector<std::size_t>& subset) const;
};

// ---------------------------------------------------------------------------
// Runs

using EpochCallback = std::function<void(const EpochRecord&)>;

struct TrainResult {
  ModelState state;  // best-F1 parameters
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;
  MetricsReport best_report;
  EmptyImageCounter train_empty;
  EmptyImageCounter eval_empty;
};

struct EvalResult {
  MetricsReport report;
  std::vector<double> probabilities;
  std::vector<Label> labels;
};

EvalResult evaluate_single(const SingleViewModel& model, const Dataset& data, const std::vector<std::size_t>& subset,
                           bool crop);

TrainResult train_stage1(const TrainConfig& cfg, const Dataset& data, std::uint64_t seed,
                         const EpochCallback& on_epoch = {});

// Per-view backbone features for stage 2; computed once when no pixel
// augmentation needs fresh images.
class FeatureCache {
 public:
  FeatureCache(const MamT4Model& model, const ImageBank& bank, bool with_crops);
  const Tensor& feature(std::size_t exam, ViewKey key, bool cropped) const;
  const Tensor& zero_feature() const { return zero_; }

 private:
  std::vector<std::array<Tensor, 8>> features_;
  Tensor zero_;
};

struct Stage2Options {
  // Missing companions become black images; otherwise MissingView.
  bool substitute_missing = true;
};

EvalResult evaluate_mamt4(const MamT4Model& model, const Dataset& data, const std::vector<std::size_t>& subset,
                          bool crop, const FeatureCache* cache, EmptyImageCounter* counter,
                          const Stage2Options& opts = {});

TrainResult train_stage2(const TrainConfig& cfg, const Dataset& data, const ModelState& backbone_state,
                         std::uint64_t seed, const EpochCallback& on_epoch = {});

struct UNetResult {
  ModelState state;
  std::vector<double> epoch_loss;
  std::vector<double> epoch_iou;  // mean held-out IoU after each epoch
  double mean_iou = 0.0;
  std::size_t train_images = 0;
  std::size_t holdout_images = 0;
};

// Pairs every image of the manifest with its sidecar mask; 80/20 split by
// study; per-pixel BCE.
UNetResult train_unet(const TrainConfig& cfg, const std::filesystem::path& manifest, std::uint64_t seed,
                      const std::function<void(std::size_t, double, double)>& on_epoch = {});

// Predicted breast mask (logit > 0) at the image's own resolution.
BreastMask predict_mask(const MiniUNet& unet, const GrayImage& image);
GrayImage crop_with_mask(const GrayImage& image, const BreastMask& predicted);

// Loads a checkpoint into a freshly built model of the configured shape.
SingleViewModel load_single_view(const TrainConfig& cfg, const std::filesystem::path& ckpt);
MamT4Model load_mamt4(const TrainConfig& cfg, const std::filesystem::path& ckpt);
MiniUNet load_unet(const TrainConfig& cfg, const std::filesystem::path& ckpt);

// "{seed}" in a path template is replaced by the seed.
std::string expand_seed(const std::string& pattern, std::uint64_t seed);

}  // namespace mamt4
