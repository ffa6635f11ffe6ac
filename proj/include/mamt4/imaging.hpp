#pragma once

// Breast-region preprocessing: quarter-of-mean thresholding, largest
// 4-connected component, centered square crop, bilinear resize, IoU and
// conversion to model tensors.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "mamt4/tensor.hpp"

namespace mamt4 {

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;  // row-major, values in [0, 1]

  GrayImage() = default;
  GrayImage(std::size_t w, std::size_t h, double fill = 0.0) : width(w), height(h), pixels(w * h, fill) {}

  double at(std::size_t x, std::size_t y) const { return pixels[y * width + x]; }
  double& at(std::size_t x, std::size_t y) { return pixels[y * width + x]; }
  bool empty() const { return pixels.empty(); }
  bool operator==(const GrayImage&) const = default;
};

struct BreastMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1, row-major

  BreastMask() = default;
  BreastMask(std::size_t w, std::size_t h, bool fill = false) : width(w), height(h), bits(w * h, fill ? 1 : 0) {}

  bool at(std::size_t x, std::size_t y) const { return bits[y * width + x] != 0; }
  void set(std::size_t x, std::size_t y, bool v) { bits[y * width + x] = v ? 1 : 0; }
  std::size_t count() const;
  bool operator==(const BreastMask&) const = default;
};

// Half-open pixel box [x0, x1) x [y0, y1).
struct BBox {
  std::size_t x0 = 0;
  std::size_t y0 = 0;
  std::size_t x1 = 0;
  std::size_t y1 = 0;

  std::size_t width() const { return x1 - x0; }
  std::size_t height() const { return y1 - y0; }
  bool operator==(const BBox&) const = default;
};

// True where pixel > mean(pixels) / 4.
BreastMask threshold_mask(const GrayImage& img);

// Keeps the largest 4-connected component; on equal areas the component
// whose first pixel comes first in row-major order wins.
BreastMask largest_component(const BreastMask& mask);

BBox mask_bbox(const BreastMask& mask);

// Square window centered on the mask's bounding box, side = max(w, h).
// Parts of the window outside the image are zero.
GrayImage centered_crop(const GrayImage& img, const BreastMask& mask);

// Half-pixel-center bilinear interpolation with edge clamping.
GrayImage resize_bilinear(const GrayImage& img, std::size_t out_w, std::size_t out_h);
BreastMask resize_nearest(const BreastMask& mask, std::size_t out_w, std::size_t out_h);

// |a ∩ b| / |a ∪ b|; two empty masks give 1.
double iou(const BreastMask& a, const BreastMask& b);

GrayImage hflip(const GrayImage& img);

// threshold -> largest component -> centered crop. Images whose threshold
// mask is empty (e.g. all black) come back unchanged.
GrayImage crop_breast_threshold(const GrayImage& img);

// [channels, size, size] with the gray values replicated per channel.
Tensor to_model_tensor(const GrayImage& img, std::size_t expected_size, std::size_t channels = 3);
// [1, H, W]
Tensor to_single_channel_tensor(const GrayImage& img);

// 8-bit grayscale PGM (P5) or PNG, chosen by extension. A stored byte v maps
// to v / 255.
GrayImage read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const GrayImage& img);
BreastMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const BreastMask& mask);

// Rounds every pixel to the nearest multiple of 1/255, as a write/read
// round trip would.
GrayImage quantize_u8(const GrayImage& img);

}  // namespace mamt4
