#include "mamt4/imaging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mamt4 {

std::size_t BreastMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

BreastMask threshold_mask(const GrayImage& img) {
  if (img.empty()) throw Error(ErrorKind::InvalidShape, "threshold_mask on empty image");
  const double mean = std::accumulate(img.pixels.begin(), img.pixels.end(), 0.0) / static_cast<double>(img.pixels.size());
  const double t = mean / 4.0;
  BreastMask m(img.width, img.height);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.bits[i] = img.pixels[i] > t ? 1 : 0;
  return m;
}

BreastMask largest_component(const BreastMask& mask) {
  const std::size_t w = mask.width;
  const std::size_t h = mask.height;
  std::vector<std::int32_t> label(mask.bits.size(), -1);
  std::vector<std::size_t> stack;
  std::int32_t best_label = -1;
  std::size_t best_area = 0;
  std::int32_t next = 0;
  for (std::size_t start = 0; start < mask.bits.size(); ++start) {
    if (!mask.bits[start] || label[start] >= 0) continue;
    const std::int32_t id = next++;
    std::size_t area = 0;
    label[start] = id;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++area;
      const std::size_t x = p % w;
      const std::size_t y = p / w;
      auto visit = [&](std::size_t q) {
        if (mask.bits[q] && label[q] < 0) {
          label[q] = id;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
    }
    // Components are discovered in order of their first row-major pixel,
    // so strict > keeps the earliest on ties.
    if (area > best_area) {
      best_area = area;
      best_label = id;
    }
  }
  BreastMask out(w, h);
  if (best_label < 0) return out;
  for (std::size_t i = 0; i < label.size(); ++i) out.bits[i] = label[i] == best_label ? 1 : 0;
  return out;
}

BBox mask_bbox(const BreastMask& mask) {
  BBox box{mask.width, mask.height, 0, 0};
  bool any = false;
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      any = true;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  }
  if (!any) throw Error(ErrorKind::EmptyMask, "mask has no true pixels");
  return box;
}

GrayImage centered_crop(const GrayImage& img, const BreastMask& mask) {
  if (mask.width != img.width || mask.height != img.height) {
    throw Error(ErrorKind::ShapeMismatch, "mask and image dimensions differ");
  }
  const BBox box = mask_bbox(mask);
  const std::size_t side = std::max(box.width(), box.height());
  const auto left = static_cast<std::ptrdiff_t>(box.x0) - static_cast<std::ptrdiff_t>((side - box.width()) / 2);
  const auto top = static_cast<std::ptrdiff_t>(box.y0) - static_cast<std::ptrdiff_t>((side - box.height()) / 2);
  GrayImage out(side, side, 0.0);
  for (std::size_t y = 0; y < side; ++y) {
    const std::ptrdiff_t sy = top + static_cast<std::ptrdiff_t>(y);
    if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(img.height)) continue;
    for (std::size_t x = 0; x < side; ++x) {
      const std::ptrdiff_t sx = left + static_cast<std::ptrdiff_t>(x);
      if (sx < 0 || sx >= static_cast<std::ptrdiff_t>(img.width)) continue;
      out.at(x, y) = img.at(static_cast<std::size_t>(sx), static_cast<std::size_t>(sy));
    }
  }
  return out;
}

GrayImage resize_bilinear(const GrayImage& img, std::size_t out_w, std::size_t out_h) {
  if (out_w == 0 || out_h == 0) throw Error(ErrorKind::InvalidShape, "resize target must be at least 1x1");
  if (img.empty()) throw Error(ErrorKind::InvalidShape, "resize of empty image");
  if (out_w == img.width && out_h == img.height) return img;
  GrayImage out(out_w, out_h);
  const double sx = static_cast<double>(img.width) / static_cast<double>(out_w);
  const double sy = static_cast<double>(img.height) / static_cast<double>(out_h);
  const double max_x = static_cast<double>(img.width - 1);
  const double max_y = static_cast<double>(img.height - 1);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto y0 = static_cast<std::size_t>(std::floor(fy));
    const std::size_t y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto x0 = static_cast<std::size_t>(std::floor(fx));
      const std::size_t x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - static_cast<double>(x0);
      const double top = img.at(x0, y0) * (1.0 - wx) + img.at(x1, y0) * wx;
      const double bottom = img.at(x0, y1) * (1.0 - wx) + img.at(x1, y1) * wx;
      out.at(x, y) = top * (1.0 - wy) + bottom * wy;
    }
  }
  return out;
}

BreastMask resize_nearest(const BreastMask& mask, std::size_t out_w, std::size_t out_h) {
  if (out_w == 0 || out_h == 0) throw Error(ErrorKind::InvalidShape, "resize target must be at least 1x1");
  BreastMask out(out_w, out_h);
  for (std::size_t y = 0; y < out_h; ++y) {
    const std::size_t sy = std::min(mask.height - 1, (2 * y + 1) * mask.height / (2 * out_h));
    for (std::size_t x = 0; x < out_w; ++x) {
      const std::size_t sx = std::min(mask.width - 1, (2 * x + 1) * mask.width / (2 * out_w));
      out.set(x, y, mask.at(sx, sy));
    }
  }
  return out;
}

double iou(const BreastMask& a, const BreastMask& b) {
  if (a.width != b.width || a.height != b.height) throw Error(ErrorKind::ShapeMismatch, "iou of masks with different dims");
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    inter += (a.bits[i] & b.bits[i]) ? 1 : 0;
    uni += (a.bits[i] | b.bits[i]) ? 1 : 0;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

GrayImage hflip(const GrayImage& img) {
  GrayImage out(img.width, img.height);
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) out.at(img.width - 1 - x, y) = img.at(x, y);
  }
  return out;
}

GrayImage crop_breast_threshold(const GrayImage& img) {
  BreastMask mask = largest_component(threshold_mask(img));
  if (mask.count() == 0) return img;
  return centered_crop(img, mask);
}

Tensor to_model_tensor(const GrayImage& img, std::size_t expected_size, std::size_t channels) {
  if (img.width != expected_size || img.height != expected_size) {
    throw Error(ErrorKind::InvalidShape, "image is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                                             ", model expects " + std::to_string(expected_size) + "x" +
                                             std::to_string(expected_size));
  }
  std::vector<double> values;
  values.reserve(channels * img.pixels.size());
  for (std::size_t c = 0; c < channels; ++c) values.insert(values.end(), img.pixels.begin(), img.pixels.end());
  return Tensor::from({channels, img.height, img.width}, std::move(values));
}

Tensor to_single_channel_tensor(const GrayImage& img) {
  return Tensor::from({1, img.height, img.width}, img.pixels);
}

GrayImage quantize_u8(const GrayImage& img) {
  GrayImage out = img;
  for (auto& v : out.pixels) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

}  // namespace mamt4
