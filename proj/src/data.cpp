#include "mamt4/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "mamt4/rng.hpp"

namespace mamt4 {

std::string to_string(Laterality l) { return l == Laterality::L ? "L" : "R"; }
std::string to_string(Projection p) { return p == Projection::CC ? "CC" : "MLO"; }
std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }
std::string to_string(ViewKey v) { return to_string(v.laterality) + "/" + to_string(v.projection); }

std::array<ViewKey, 3> companions_of(ViewKey primary) {
  const Laterality other_lat = primary.laterality == Laterality::L ? Laterality::R : Laterality::L;
  const Projection other_proj = primary.projection == Projection::CC ? Projection::MLO : Projection::CC;
  return {{{primary.laterality, other_proj}, {other_lat, primary.projection}, {other_lat, other_proj}}};
}

Target map_birads(int birads, BiradsMode mode) {
  if (birads < 1 || birads > 5) throw Error(ErrorKind::InvalidLabel, "BI-RADS must be 1..5, got " + std::to_string(birads));
  if (birads >= 4) return Target::Cancer;
  if (birads == 3) return Target::Excluded;
  if (mode == BiradsMode::Alt && birads == 1) return Target::Excluded;
  return Target::Normal;
}

std::optional<Label> label_of(Target t) {
  switch (t) {
    case Target::Normal: return Label::Normal;
    case Target::Cancer: return Label::Cancer;
    case Target::Excluded: break;
  }
  return std::nullopt;
}

bool exam_has_cancer(const Exam& exam, BiradsMode mode) {
  return std::any_of(exam.views.begin(), exam.views.end(),
                     [&](const auto& kv) { return map_birads(kv.second.birads, mode) == Target::Cancer; });
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::vector<Exam> parse_manifest(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool saw_header = false;
  std::vector<Exam> exams;
  std::unordered_map<std::string, std::size_t> index;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fail = [&](const std::string& why) {
      return Error(ErrorKind::ParseError, "manifest line " + std::to_string(line_no) + ": " + why);
    };
    if (!saw_header) {
      if (line != kManifestHeader) throw fail("expected header '" + std::string(kManifestHeader) + "'");
      saw_header = true;
      continue;
    }
    const auto f = split_csv(line);
    if (f.size() != 6) throw fail("expected 6 fields, got " + std::to_string(f.size()));
    if (f[0].empty()) throw fail("empty study_id");
    ViewKey key;
    if (f[1] == "L") key.laterality = Laterality::L;
    else if (f[1] == "R") key.laterality = Laterality::R;
    else throw fail("laterality must be L or R, got '" + f[1] + "'");
    if (f[2] == "CC") key.projection = Projection::CC;
    else if (f[2] == "MLO") key.projection = Projection::MLO;
    else throw fail("view must be CC or MLO, got '" + f[2] + "'");
    int birads = 0;
    const auto [ptr, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), birads);
    if (ec != std::errc{} || ptr != f[3].data() + f[3].size()) throw fail("birads is not an integer: '" + f[3] + "'");
    if (birads < 1 || birads > 5) throw fail("birads out of range 1..5: " + f[3]);
    Split split;
    if (f[4] == "train") split = Split::Train;
    else if (f[4] == "test") split = Split::Test;
    else throw fail("split must be train or test, got '" + f[4] + "'");
    if (f[5].empty()) throw fail("empty path");

    auto it = index.find(f[0]);
    if (it == index.end()) {
      it = index.emplace(f[0], exams.size()).first;
      exams.push_back(Exam{f[0], split, {}});
    }
    Exam& exam = exams[it->second];
    if (exam.split != split) throw fail("study " + f[0] + " appears in both splits");
    if (exam.views.count(key)) {
      throw Error(ErrorKind::DuplicateView, "study " + f[0] + " has two " + to_string(key) + " images (line " +
                                                std::to_string(line_no) + ")");
    }
    exam.views[key] = ViewEntry{f[5], birads};
  }
  if (!saw_header) throw Error(ErrorKind::ParseError, "manifest line 1: missing header");
  return exams;
}

std::string format_manifest(const std::vector<Exam>& exams) {
  std::string out = std::string(kManifestHeader) + "\n";
  for (const auto& exam : exams) {
    for (const auto& [key, entry] : exam.views) {
      out += exam.study_id + "," + to_string(key.laterality) + "," + to_string(key.projection) + "," +
             std::to_string(entry.birads) + "," + to_string(exam.split) + "," + entry.path + "\n";
    }
  }
  return out;
}

std::vector<Exam> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot read manifest " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_manifest(buf.str());
}

void write_manifest(const std::filesystem::path& path, const std::vector<Exam>& exams) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::IoError, "cannot write manifest " + path.string());
  out << format_manifest(exams);
}

std::filesystem::path resolve_image_path(const std::filesystem::path& manifest, const std::string& entry) {
  std::filesystem::path p(entry);
  if (p.is_absolute()) return p;
  return manifest.parent_path() / p;
}

std::filesystem::path mask_path_for(const std::filesystem::path& image) {
  std::filesystem::path out = image;
  out.replace_extension();
  out += ".mask" + image.extension().string();
  return out;
}

// ---------------------------------------------------------------------------
// Samples

std::vector<LabeledSample> make_samples(const std::vector<Exam>& exams, BiradsMode mode) {
  std::vector<LabeledSample> out;
  for (std::size_t e = 0; e < exams.size(); ++e) {
    for (const ViewKey key : kAllViews) {
      const auto it = exams[e].views.find(key);
      if (it == exams[e].views.end()) continue;
      const auto label = label_of(map_birads(it->second.birads, mode));
      if (!label) continue;
      LabeledSample s;
      s.exam = e;
      s.primary = key;
      s.companions = companions_of(key);
      for (std::size_t c = 0; c < 3; ++c) s.companion_present[c] = exams[e].views.count(s.companions[c]) > 0;
      s.label = *label;
      out.push_back(s);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

namespace {

enum Stream : std::uint64_t { kCropStream = 0x43, kEmptyStream = 0x45, kPixelStream = 0x50 };

bool is_probability(double p) { return p >= 0.0 && p <= 1.0; }

}  // namespace

void AugmentConfig::validate() const {
  if (!is_probability(crop_prob) || !is_probability(empty_image_prob) || !is_probability(hflip_prob)) {
    throw Error(ErrorKind::InvalidConfig, "augmentation probabilities must lie in [0, 1]");
  }
  if (!(noise_sigma >= 0.0)) throw Error(ErrorKind::InvalidConfig, "noise_sigma must be >= 0");
}

bool draw_crop(const AugmentConfig& cfg, std::uint64_t sample_index, std::uint64_t epoch) {
  if (cfg.crop_prob <= 0.0) return false;
  if (cfg.crop_prob >= 1.0) return true;
  Rng rng(derive_seed({cfg.seed, sample_index, epoch, kCropStream}));
  return rng.bernoulli(cfg.crop_prob);
}

std::array<bool, 3> draw_empty_image(const AugmentConfig& cfg, std::uint64_t sample_index, std::uint64_t epoch,
                                     const std::array<bool, 3>& present, EmptyImageCounter* counter) {
  std::array<bool, 3> out{};
  Rng rng(derive_seed({cfg.seed, sample_index, epoch, kEmptyStream}));
  for (std::size_t c = 0; c < 3; ++c) {
    // Always draw so one companion's presence does not shift the others.
    const bool black = rng.bernoulli(cfg.empty_image_prob);
    if (!present[c]) continue;
    out[c] = black;
    if (counter) {
      ++counter->draws;
      counter->blackouts += black ? 1 : 0;
    }
  }
  return out;
}

GrayImage augment_pixels(const GrayImage& img, const AugmentConfig& cfg, std::uint64_t sample_index,
                         std::uint64_t epoch, std::size_t view_slot) {
  if (!cfg.has_pixel_ops()) return img;
  Rng rng(derive_seed({cfg.seed, sample_index, epoch, kPixelStream, view_slot}));
  GrayImage out = rng.bernoulli(cfg.hflip_prob) ? hflip(img) : img;
  if (cfg.noise_sigma > 0.0) {
    for (auto& v : out.pixels) v = std::clamp(v + rng.gaussian(0.0, cfg.noise_sigma), 0.0, 1.0);
  }
  if (cfg.dropout_count > 0 && cfg.dropout_size > 0) {
    const std::size_t size = std::min({cfg.dropout_size, out.width, out.height});
    for (std::size_t d = 0; d < cfg.dropout_count; ++d) {
      const auto x0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(out.width - size)));
      const auto y0 = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(out.height - size)));
      for (std::size_t y = y0; y < y0 + size; ++y) {
        for (std::size_t x = x0; x < x0 + size; ++x) out.at(x, y) = 0.0;
      }
    }
  }
  return out;
}

AugmentedSample augment(const std::array<const ViewImages*, 4>& views, const AugmentConfig& cfg,
                        std::uint64_t sample_index, std::uint64_t epoch, EmptyImageCounter* counter) {
  if (!views[0]) throw Error(ErrorKind::MissingView, "augment needs a primary view");
  AugmentedSample out;
  out.cropped = draw_crop(cfg, sample_index, epoch);
  const std::array<bool, 3> present{views[1] != nullptr, views[2] != nullptr, views[3] != nullptr};
  out.blacked = draw_empty_image(cfg, sample_index, epoch, present, counter);
  const std::size_t w = views[0]->full.width;
  const std::size_t h = views[0]->full.height;
  for (std::size_t slot = 0; slot < 4; ++slot) {
    const ViewImages* v = views[slot];
    if (!v || (slot > 0 && out.blacked[slot - 1])) {
      out.views[slot] = GrayImage(w, h, 0.0);
      continue;
    }
    out.views[slot] = augment_pixels(out.cropped ? v->cropped : v->full, cfg, sample_index, epoch, slot);
  }
  return out;
}

GrayImage prepare_view(const GrayImage& raw, std::size_t size, bool crop) {
  const GrayImage base = crop ? crop_breast_threshold(raw) : raw;
  return resize_bilinear(base, size, size);
}

// ---------------------------------------------------------------------------
// Splits

std::pair<std::vector<Exam>, std::vector<Exam>> split_by_study(const std::vector<Exam>& exams, double fraction,
                                                               std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw Error(ErrorKind::InvalidConfig, "split fraction must lie in (0, 1)");
  std::array<std::vector<std::size_t>, 2> strata;
  for (std::size_t i = 0; i < exams.size(); ++i) strata[exam_has_cancer(exams[i]) ? 1 : 0].push_back(i);

  // Largest-remainder allocation so the total hits round(fraction * n).
  const auto total_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(exams.size())));
  std::array<std::size_t, 2> quota{};
  std::array<double, 2> remainder{};
  for (std::size_t s = 0; s < 2; ++s) {
    const double exact = fraction * static_cast<double>(strata[s].size());
    quota[s] = static_cast<std::size_t>(std::floor(exact));
    remainder[s] = exact - std::floor(exact);
  }
  while (quota[0] + quota[1] < total_train) {
    const std::size_t s = remainder[1] > remainder[0] ? 1 : 0;
    ++quota[s];
    remainder[s] = -1.0;
  }

  std::vector<bool> to_train(exams.size(), false);
  for (std::size_t s = 0; s < 2; ++s) {
    Rng rng(derive_seed({seed, s}));
    std::shuffle(strata[s].begin(), strata[s].end(), rng.engine());
    for (std::size_t k = 0; k < quota[s]; ++k) to_train[strata[s][k]] = true;
  }
  std::pair<std::vector<Exam>, std::vector<Exam>> out;
  for (std::size_t i = 0; i < exams.size(); ++i) {
    Exam e = exams[i];
    e.split = to_train[i] ? Split::Train : Split::Test;
    (to_train[i] ? out.first : out.second).push_back(std::move(e));
  }
  return out;
}

}  // namespace mamt4
