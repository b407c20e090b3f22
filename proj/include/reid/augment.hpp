#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "reid/errors.hpp"
#include "reid/rng.hpp"

namespace reid {

/// H x W x 3 interleaved 8-bit RGB.
class RgbImage {
 public:
  RgbImage() = default;
  RgbImage(int height, int width);
  RgbImage(int height, int width, std::vector<std::uint8_t> pixels);

  int height() const { return height_; }
  int width() const { return width_; }
  std::uint8_t& at(int row, int col, int channel) {
    return pixels_[(static_cast<std::size_t>(row) * width_ + col) * 3 + channel];
  }
  std::uint8_t at(int row, int col, int channel) const {
    return pixels_[(static_cast<std::size_t>(row) * width_ + col) * 3 + channel];
  }
  const std::vector<std::uint8_t>& pixels() const { return pixels_; }

  bool operator==(const RgbImage&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> pixels_;
};

struct AugmentConfig {
  double p_flip = 0.5;
  double p_global = 0.05;
  double p_local = 0.4;
  double p_erase = 0.0;
  double s_min = 0.02;
  double s_max = 0.4;
  double r_local = 0.3;
  int pad = 10;

  void validate() const;
};

/// Pixel rectangle [x, x + width) x [y, y + height).
struct Region {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;
};

constexpr int kRegionRetryLimit = 100;

std::uint8_t ntsc_gray(std::uint8_t r, std::uint8_t g, std::uint8_t b);
RgbImage rgb_to_grayscale_ntsc(const RgbImage& img);

RgbImage global_grayscale(const RgbImage& img, double p_global, Pcg32& rng);

/// Samples a rectangle the way the local grayscale transform does; throws
/// AugmentationError after kRegionRetryLimit rejected proposals.
Region sample_region(int height, int width, const AugmentConfig& cfg, Pcg32& rng);

/// `applied` (when given) receives the transformed rectangle, or nullopt when
/// the Bernoulli draw left the image unchanged.
RgbImage local_grayscale(const RgbImage& img, const AugmentConfig& cfg, Pcg32& rng,
                         std::optional<Region>* applied = nullptr);

RgbImage horizontal_flip(const RgbImage& img);
RgbImage pad_and_random_crop(const RgbImage& img, int pad, Pcg32& rng);
RgbImage random_erasing(const RgbImage& img, double p_erase, const AugmentConfig& cfg, Pcg32& rng,
                        std::optional<Region>* applied = nullptr);

/// Data-adapter chain: pad+crop, flip, global grayscale, local grayscale,
/// random erasing (skipped when p_erase == 0).
RgbImage augment_image(const RgbImage& img, const AugmentConfig& cfg, Pcg32& rng);

RgbImage read_ppm(const std::filesystem::path& path);
void write_ppm(const RgbImage& img, const std::filesystem::path& path);

}  // namespace reid
