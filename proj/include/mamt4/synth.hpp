#pragma once

// Synthetic four-view "mammograms": a bright half-ellipse breast anchored at
// the chest-wall edge on a dark background, with optional lesion blobs and
// corner label tags.
//
//   single_view  40% of exams have one affected breast whose two views
//                both carry a blob; only those images are cancer.
//   asymmetry    40% of exams have a blob in one breast only (that breast's
//                images are cancer); the rest have blobs in both breasts and
//                are normal throughout. A lone view is ambiguous, the
//                bilateral comparison is not.
//   artifact     single_view labels with fainter blobs and bright tags
//                outside the breast in both classes.
//
// Either way about 20% of images are cancer.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mamt4/data.hpp"
#include "mamt4/imaging.hpp"

namespace mamt4 {

enum class Scenario { SingleView, Asymmetry, Artifact };

std::string to_string(Scenario s);
Scenario parse_scenario(const std::string& name);

struct SynthGeometry {
  std::size_t image_size = 64;
  double axis_min = 0.40;  // horizontal semi-axis, fraction of width
  double axis_max = 0.60;
  double blob_radius_min = 3.0;
  double blob_radius_max = 5.0;
  double blob_contrast = 0.25;
  double artifact_blob_contrast = 0.12;
  double background = 0.02;
  double affected_exam_fraction = 0.4;

  std::string describe() const;
};

struct SynthView {
  GrayImage image;
  BreastMask mask;
  bool blob = false;
  bool tag = false;
  int birads = 1;
};

struct SynthExam {
  std::string study_id;
  std::array<SynthView, 4> views;  // in kAllViews order
  bool cancer = false;             // any cancer view
};

// Pure function of (scenario, seed, index); images are already quantized
// to 8 bits so they survive a file round trip unchanged.
SynthExam generate_exam(Scenario scenario, std::uint64_t seed, std::size_t index,
                        const SynthGeometry& geometry = {});

struct SynthOutput {
  std::filesystem::path manifest;
  std::vector<Exam> exams;
};

// Writes images/<study>_<lat>_<view>.pgm plus .mask.pgm siblings, a
// manifest.csv split 80/20 by study, and synth.txt recording the scenario,
// seed and geometry constants. Requires n_exams >= 10.
SynthOutput synth_generate(std::size_t n_exams, Scenario scenario, std::uint64_t seed,
                           const std::filesystem::path& out_dir, double train_fraction = 0.8,
                           const SynthGeometry& geometry = {});

}  // namespace mamt4
