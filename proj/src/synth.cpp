#include "mamt4/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mamt4/rng.hpp"

namespace mamt4 {

std::string to_string(Scenario s) {
  switch (s) {
    case Scenario::SingleView: return "single_view";
    case Scenario::Asymmetry: return "asymmetry";
    case Scenario::Artifact: return "artifact";
  }
  return "?";
}

Scenario parse_scenario(const std::string& name) {
  if (name == "single_view") return Scenario::SingleView;
  if (name == "asymmetry") return Scenario::Asymmetry;
  if (name == "artifact") return Scenario::Artifact;
  throw Error(ErrorKind::InvalidConfig, "unknown scenario '" + name + "' (single_view|asymmetry|artifact)");
}

std::string SynthGeometry::describe() const {
  char buf[512];
  std::snprintf(buf, sizeof(buf),
                "image_size=%zu\naxis_fraction=%.2f-%.2f\nblob_radius_px=%.1f-%.1f\nblob_contrast=%.2f\n"
                "artifact_blob_contrast=%.2f\nbackground=%.2f\naffected_exam_fraction=%.2f\n",
                image_size, axis_min, axis_max, blob_radius_min, blob_radius_max, blob_contrast,
                artifact_blob_contrast, background, affected_exam_fraction);
  return buf;
}

namespace {

struct ViewPlan {
  Laterality laterality;
  Projection projection;
  bool blob;
  double blob_contrast;
  bool allow_tag;
};

void add_disc(GrayImage& img, double cx, double cy, double radius, double amount) {
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const double d = std::hypot(static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy);
      // One-pixel antialiased rim.
      const double cover = std::clamp(radius - d + 0.5, 0.0, 1.0);
      if (cover > 0.0) img.at(x, y) += amount * cover;
    }
  }
}

SynthView render_view(const ViewPlan& plan, std::uint64_t seed, const SynthGeometry& g) {
  Rng rng(seed);
  const std::size_t n = g.image_size;
  const double size = static_cast<double>(n);
  SynthView v;
  v.blob = plan.blob;
  v.image = GrayImage(n, n);
  v.mask = BreastMask(n, n);

  for (auto& p : v.image.pixels) p = g.background + rng.gaussian(0.0, 0.004);

  // Smooth tissue texture: white noise through a 3x3 box filter.
  std::vector<double> noise(n * n);
  for (auto& z : noise) z = rng.gaussian(0.0, 0.06);
  std::vector<double> texture(n * n, 0.0);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      double s = 0.0;
      int count = 0;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          const auto yy = static_cast<std::ptrdiff_t>(y) + dy;
          const auto xx = static_cast<std::ptrdiff_t>(x) + dx;
          if (yy < 0 || xx < 0 || yy >= static_cast<std::ptrdiff_t>(n) || xx >= static_cast<std::ptrdiff_t>(n)) continue;
          s += noise[static_cast<std::size_t>(yy) * n + static_cast<std::size_t>(xx)];
          ++count;
        }
      }
      texture[y * n + x] = s / count;
    }
  }

  const double a = rng.uniform(g.axis_min, g.axis_max) * size;
  const double b = (plan.projection == Projection::CC ? rng.uniform(0.34, 0.42) : rng.uniform(0.38, 0.46)) * size;
  const double cy = size / 2.0 + rng.uniform(-3.0, 3.0);
  const bool left = plan.laterality == Laterality::L;
  auto wall_distance = [&](double px) { return left ? px : size - px; };
  auto radius2 = [&](double px, double py) {
    const double u = wall_distance(px) / a;
    const double w = (py - cy) / b;
    return u * u + w * w;
  };
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double r2 = radius2(static_cast<double>(x) + 0.5, static_cast<double>(y) + 0.5);
      if (r2 > 1.0) continue;
      v.mask.set(x, y, true);
      v.image.at(x, y) = 0.30 + 0.15 * (1.0 - r2) + texture[y * n + x];
    }
  }

  if (plan.blob) {
    const double radius = rng.uniform(g.blob_radius_min, g.blob_radius_max);
    double bx = 0.0;
    double by = 0.0;
    do {
      const double t = rng.uniform(0.15, 0.75);
      bx = left ? t * a : size - t * a;
      by = cy + rng.uniform(-0.7, 0.7) * b;
    } while (radius2(bx, by) > 0.5);
    add_disc(v.image, bx, by, radius, plan.blob_contrast);
  }

  if (plan.allow_tag && rng.bernoulli(0.7)) {
    // Marker in a corner on the side away from the chest wall, clear of the
    // breast so thresholding isolates it as a separate component.
    v.tag = true;
    const double radius = rng.uniform(g.blob_radius_min, g.blob_radius_max);
    const double tx = left ? size - 6.0 - rng.uniform(0.0, 2.0) : 6.0 + rng.uniform(0.0, 2.0);
    const double ty = rng.bernoulli(0.5) ? 7.0 + rng.uniform(0.0, 3.0) : size - 7.0 - rng.uniform(0.0, 3.0);
    add_disc(v.image, tx, ty, radius, rng.uniform(0.35, 0.7));
  }

  for (auto& p : v.image.pixels) p = std::clamp(p, 0.0, 1.0);
  v.image = quantize_u8(v.image);
  return v;
}

}  // namespace

SynthExam generate_exam(Scenario scenario, std::uint64_t seed, std::size_t index, const SynthGeometry& g) {
  Rng rng(derive_seed({seed, index}));
  const bool affected = rng.bernoulli(g.affected_exam_fraction);
  const Laterality side = rng.bernoulli(0.5) ? Laterality::L : Laterality::R;

  SynthExam exam;
  char id[32];
  std::snprintf(id, sizeof(id), "S%05zu", index);
  exam.study_id = id;
  for (std::size_t k = 0; k < 4; ++k) {
    const ViewKey key = kAllViews[k];
    const bool on_side = key.laterality == side;
    bool blob = false;
    bool cancer = false;
    switch (scenario) {
      case Scenario::SingleView:
      case Scenario::Artifact:
        blob = affected && on_side;
        cancer = blob;
        break;
      case Scenario::Asymmetry:
        blob = !affected || on_side;
        cancer = affected && on_side;
        break;
    }
    const ViewPlan plan{key.laterality, key.projection, blob,
                        scenario == Scenario::Artifact ? g.artifact_blob_contrast : g.blob_contrast,
                        scenario == Scenario::Artifact};
    exam.views[k] = render_view(plan, derive_seed({seed, index, 1 + k}), g);
    exam.views[k].birads = cancer ? 4 + static_cast<int>(rng.integer(0, 1)) : 1 + static_cast<int>(rng.integer(0, 1));
    exam.cancer = exam.cancer || cancer;
  }
  return exam;
}

SynthOutput synth_generate(std::size_t n_exams, Scenario scenario, std::uint64_t seed,
                           const std::filesystem::path& out_dir, double train_fraction, const SynthGeometry& g) {
  if (n_exams < 10) throw Error(ErrorKind::InvalidConfig, "synth needs at least 10 exams");
  std::filesystem::create_directories(out_dir / "images");
  std::vector<Exam> exams;
  exams.reserve(n_exams);
  for (std::size_t i = 0; i < n_exams; ++i) {
    const SynthExam se = generate_exam(scenario, seed, i, g);
    Exam exam{se.study_id, Split::Train, {}};
    for (std::size_t k = 0; k < 4; ++k) {
      const ViewKey key = kAllViews[k];
      const std::string rel = "images/" + se.study_id + "_" + to_string(key.laterality) + "_" +
                              to_string(key.projection) + ".pgm";
      write_image(out_dir / rel, se.views[k].image);
      write_mask(mask_path_for(out_dir / rel), se.views[k].mask);
      exam.views[key] = ViewEntry{rel, se.views[k].birads};
    }
    exams.push_back(std::move(exam));
  }
  auto [train, test] = split_by_study(exams, train_fraction, derive_seed({seed, 0x5b117}));
  // Keep generation order in the manifest; only the split tags change.
  std::vector<Split> split_of(n_exams, Split::Train);
  for (const auto& e : test) split_of[static_cast<std::size_t>(std::stoul(e.study_id.substr(1)))] = Split::Test;
  for (std::size_t i = 0; i < n_exams; ++i) exams[i].split = split_of[i];

  SynthOutput out;
  out.manifest = out_dir / "manifest.csv";
  write_manifest(out.manifest, exams);
  std::ofstream side(out_dir / "synth.txt", std::ios::trunc);
  if (!side) throw Error(ErrorKind::IoError, "cannot write " + (out_dir / "synth.txt").string());
  side << "scenario=" << to_string(scenario) << "\nseed=" << seed << "\nexams=" << n_exams
       << "\ntrain_fraction=" << train_fraction << "\n"
       << g.describe();
  out.exams = std::move(exams);
  return out;
}

}  // namespace mamt4
