#pragma once

// Exams, manifests, BI-RADS label mapping, primary/companion sample
// construction, augmentation (including EmptyImage) and study-level splits.

#include <array>
#include <compare>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mamt4/imaging.hpp"
#include "mamt4/loss_metrics.hpp"

namespace mamt4 {

enum class Laterality { L, R };
enum class Projection { CC, MLO };
enum class Split { Train, Test };

struct ViewKey {
  Laterality laterality = Laterality::L;
  Projection projection = Projection::CC;
  auto operator<=>(const ViewKey&) const = default;
};

inline constexpr std::array<ViewKey, 4> kAllViews{{
    {Laterality::L, Projection::CC},
    {Laterality::L, Projection::MLO},
    {Laterality::R, Projection::CC},
    {Laterality::R, Projection::MLO},
}};

std::string to_string(Laterality l);
std::string to_string(Projection p);
std::string to_string(Split s);
std::string to_string(ViewKey v);  // e.g. "L/CC"

// (ipsilateral, bilateral, bilateral-ipsilateral) for the given primary.
std::array<ViewKey, 3> companions_of(ViewKey primary);

struct ViewEntry {
  std::string path;  // as written in the manifest
  int birads = 1;
};

struct Exam {
  std::string study_id;
  Split split = Split::Train;
  std::map<ViewKey, ViewEntry> views;
};

// ---------------------------------------------------------------------------
// Labels

enum class BiradsMode { Standard, Alt };
enum class Target { Normal, Cancer, Excluded };

// Standard: {1,2} normal, {4,5} cancer, 3 excluded.
// Alt:   {2} normal, {4,5} cancer, {1,3} excluded.
Target map_birads(int birads, BiradsMode mode);
std::optional<Label> label_of(Target t);

// An exam counts as cancer when any of its views maps to cancer.
bool exam_has_cancer(const Exam& exam, BiradsMode mode = BiradsMode::Standard);

// ---------------------------------------------------------------------------
// Manifest CSV: study_id,laterality,view,birads,split,path

inline constexpr const char* kManifestHeader = "study_id,laterality,view,birads,split,path";

std::vector<Exam> parse_manifest(const std::string& text);
std::string format_manifest(const std::vector<Exam>& exams);
std::vector<Exam> load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<Exam>& exams);

// Relative image paths are relative to the manifest's directory.
std::filesystem::path resolve_image_path(const std::filesystem::path& manifest, const std::string& entry);
// Sidecar breast mask of an image: "x.pgm" -> "x.mask.pgm".
std::filesystem::path mask_path_for(const std::filesystem::path& image);

// ---------------------------------------------------------------------------
// Samples

struct LabeledSample {
  std::size_t exam = 0;  // index into the exam list
  ViewKey primary;
  std::array<ViewKey, 3> companions;
  std::array<bool, 3> companion_present{};
  Label label = Label::Normal;
};

// One sample per non-excluded image. Excluded images still count as
// present companions.
std::vector<LabeledSample> make_samples(const std::vector<Exam>& exams, BiradsMode mode);

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double crop_prob = 0.0;         // 0 off, 0.5 crop augmentation, 1 crop everything
  double empty_image_prob = 0.0;  // companions only
  double hflip_prob = 0.0;
  double noise_sigma = 0.0;
  std::size_t dropout_count = 0;
  std::size_t dropout_size = 0;
  std::uint64_t seed = 0;

  void validate() const;
  // Test images are always cropped when cropping is on at all.
  bool crop_at_test() const { return crop_prob > 0.0; }
  bool has_pixel_ops() const { return hflip_prob > 0.0 || noise_sigma > 0.0 || (dropout_count > 0 && dropout_size > 0); }
};

// Counts EmptyImage decisions; one draw per present companion.
struct EmptyImageCounter {
  std::size_t draws = 0;
  std::size_t blackouts = 0;
  double rate() const { return draws == 0 ? 0.0 : static_cast<double>(blackouts) / static_cast<double>(draws); }
};

// Per-sample decisions, all derived from (seed, sample index, epoch) alone.
bool draw_crop(const AugmentConfig& cfg, std::uint64_t sample_index, std::uint64_t epoch);
std::array<bool, 3> draw_empty_image(const AugmentConfig& cfg, std::uint64_t sample_index, std::uint64_t epoch,
                                     const std::array<bool, 3>& present, EmptyImageCounter* counter);

// hflip, Gaussian noise (clipped to [0, 1]) and coarse dropout on one view.
GrayImage augment_pixels(const GrayImage& img, const AugmentConfig& cfg, std::uint64_t sample_index,
                         std::uint64_t epoch, std::size_t view_slot);

// A view as stored for training: the plain image and its cropped version,
// both already at model input size.
struct ViewImages {
  GrayImage full;
  GrayImage cropped;
};

struct AugmentedSample {
  std::array<GrayImage, 4> views;  // primary, ipsilateral, bilateral, bilateral-ipsilateral
  std::array<bool, 3> blacked{};
  bool cropped = false;
};

// views[0] is the primary and must be non-null; a null companion is missing
// and becomes a black image. Black images keep the model input size.
AugmentedSample augment(const std::array<const ViewImages*, 4>& views, const AugmentConfig& cfg,
                        std::uint64_t sample_index, std::uint64_t epoch, EmptyImageCounter* counter);

// Crop (threshold pipeline) then resize to size x size.
GrayImage prepare_view(const GrayImage& raw, std::size_t size, bool crop);

// ---------------------------------------------------------------------------
// Splits

// Stratified by exam_has_cancer; no study lands in both halves. The train
// half gets round(fraction * n) exams. Returned exams carry the new split.
std::pair<std::vector<Exam>, std::vector<Exam>> split_by_study(const std::vector<Exam>& exams, double fraction,
                                                               std::uint64_t seed);

}  // namespace mamt4
