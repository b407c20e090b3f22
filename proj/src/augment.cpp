#include "reid/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

namespace reid {

RgbImage::RgbImage(int height, int width)
    : height_(height), width_(width), pixels_(static_cast<std::size_t>(height) * width * 3, 0) {
  if (height < 1 || width < 1) throw ShapeError("image dimensions must be positive");
}

RgbImage::RgbImage(int height, int width, std::vector<std::uint8_t> pixels)
    : height_(height), width_(width), pixels_(std::move(pixels)) {
  if (height < 1 || width < 1) throw ShapeError("image dimensions must be positive");
  if (pixels_.size() != static_cast<std::size_t>(height) * width * 3) {
    throw ShapeError("pixel buffer does not match H*W*3");
  }
}

void AugmentConfig::validate() const {
  for (double p : {p_flip, p_global, p_local, p_erase}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("augmentation probabilities must lie in [0,1]");
  }
  if (!(s_min > 0.0 && s_min <= s_max && s_max < 1.0)) {
    throw ConfigError("area ratios must satisfy 0 < s_min <= s_max < 1");
  }
  if (!(r_local > 0.0 && r_local <= 1.0)) throw ConfigError("r_local must lie in (0,1]");
  if (pad < 0) throw ConfigError("pad must be non-negative");
}

std::uint8_t ntsc_gray(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  const double y = 0.299 * r + 0.587 * g + 0.114 * b;
  // std::round is half-away-from-zero.
  return static_cast<std::uint8_t>(std::clamp(std::round(y), 0.0, 255.0));
}

namespace {

void gray_region(RgbImage& img, const Region& region) {
  for (int row = region.y; row < region.y + region.height; ++row) {
    for (int col = region.x; col < region.x + region.width; ++col) {
      const auto v = ntsc_gray(img.at(row, col, 0), img.at(row, col, 1), img.at(row, col, 2));
      for (int ch = 0; ch < 3; ++ch) img.at(row, col, ch) = v;
    }
  }
}

}  // namespace

RgbImage rgb_to_grayscale_ntsc(const RgbImage& img) {
  RgbImage out = img;
  gray_region(out, {0, 0, img.width(), img.height()});
  return out;
}

RgbImage global_grayscale(const RgbImage& img, double p_global, Pcg32& rng) {
  const double p_t = rng.uniform();
  if (p_t >= p_global) return img;
  return rgb_to_grayscale_ntsc(img);
}

Region sample_region(int height, int width, const AugmentConfig& cfg, Pcg32& rng) {
  const double area = static_cast<double>(height) * width;
  for (int attempt = 0; attempt < kRegionRetryLimit; ++attempt) {
    const double target_area = rng.uniform(cfg.s_min, cfg.s_max) * area;
    const double ratio = rng.uniform(cfg.r_local, 1.0 / cfg.r_local);
    const int w = static_cast<int>(std::floor(std::sqrt(target_area / ratio)));
    const int h = static_cast<int>(std::floor(std::sqrt(target_area * ratio)));
    const int x = static_cast<int>(rng.below(static_cast<std::uint32_t>(width)));
    const int y = static_cast<int>(rng.below(static_cast<std::uint32_t>(height)));
    if (w == 0 || h == 0) continue;
    // The integer rectangle itself must honour the area and aspect bounds.
    const double got_area = static_cast<double>(w) * h;
    const double aspect = static_cast<double>(w) / h;
    if (got_area < cfg.s_min * area || got_area > cfg.s_max * area) continue;
    if (aspect < cfg.r_local || aspect > 1.0 / cfg.r_local) continue;
    if (x + w <= width && y + h <= height) return {x, y, w, h};
  }
  throw AugmentationError("no rectangle fitted after " + std::to_string(kRegionRetryLimit) +
                          " proposals");
}

RgbImage local_grayscale(const RgbImage& img, const AugmentConfig& cfg, Pcg32& rng,
                         std::optional<Region>* applied) {
  if (applied) applied->reset();
  const double p_t = rng.uniform();
  if (p_t >= cfg.p_local) return img;
  const Region region = sample_region(img.height(), img.width(), cfg, rng);
  RgbImage out = img;
  gray_region(out, region);
  if (applied) *applied = region;
  return out;
}

RgbImage horizontal_flip(const RgbImage& img) {
  RgbImage out = img;
  const int w = img.width();
  for (int row = 0; row < img.height(); ++row) {
    for (int col = 0; col < w; ++col) {
      for (int ch = 0; ch < 3; ++ch) out.at(row, col, ch) = img.at(row, w - 1 - col, ch);
    }
  }
  return out;
}

RgbImage pad_and_random_crop(const RgbImage& img, int pad, Pcg32& rng) {
  if (pad < 0) throw ConfigError("pad must be non-negative");
  if (pad == 0) return img;
  const auto span = static_cast<std::uint32_t>(2 * pad + 1);
  const int dx = static_cast<int>(rng.below(span)) - pad;
  const int dy = static_cast<int>(rng.below(span)) - pad;
  RgbImage out(img.height(), img.width());
  for (int row = 0; row < img.height(); ++row) {
    const int src_row = std::clamp(row + dy, 0, img.height() - 1);
    for (int col = 0; col < img.width(); ++col) {
      const int src_col = std::clamp(col + dx, 0, img.width() - 1);
      for (int ch = 0; ch < 3; ++ch) out.at(row, col, ch) = img.at(src_row, src_col, ch);
    }
  }
  return out;
}

RgbImage random_erasing(const RgbImage& img, double p_erase, const AugmentConfig& cfg, Pcg32& rng,
                        std::optional<Region>* applied) {
  if (applied) applied->reset();
  const double p_t = rng.uniform();
  if (p_t >= p_erase) return img;
  const Region region = sample_region(img.height(), img.width(), cfg, rng);
  RgbImage out = img;
  for (int row = region.y; row < region.y + region.height; ++row) {
    for (int col = region.x; col < region.x + region.width; ++col) {
      for (int ch = 0; ch < 3; ++ch) out.at(row, col, ch) = static_cast<std::uint8_t>(rng.below(256));
    }
  }
  if (applied) *applied = region;
  return out;
}

RgbImage augment_image(const RgbImage& img, const AugmentConfig& cfg, Pcg32& rng) {
  cfg.validate();
  RgbImage out = pad_and_random_crop(img, cfg.pad, rng);
  if (rng.uniform() < cfg.p_flip) out = horizontal_flip(out);
  out = global_grayscale(out, cfg.p_global, rng);
  out = local_grayscale(out, cfg, rng);
  if (cfg.p_erase > 0.0) out = random_erasing(out, cfg.p_erase, cfg, rng);
  return out;
}

namespace {

// Next whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& in) {
  std::string token;
  char c = 0;
  while (in.get(c)) {
    if (c == '#') {
      std::string discard;
      std::getline(in, discard);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(c);
  }
  return token;
}

}  // namespace

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  if (ppm_token(in) != "P6") throw FormatError("PPM: only binary P6 is supported");
  int width = 0;
  int height = 0;
  int maxval = 0;
  try {
    width = std::stoi(ppm_token(in));
    height = std::stoi(ppm_token(in));
    maxval = std::stoi(ppm_token(in));
  } catch (const std::exception&) {
    throw FormatError("PPM: malformed header in " + path.string());
  }
  if (maxval != 255 || width < 1 || height < 1) throw FormatError("PPM: unsupported header");
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * height * 3);
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(pixels.size())) {
    throw FormatError("PPM: truncated pixel data");
  }
  return RgbImage(height, width, std::move(pixels));
}

void write_ppm(const RgbImage& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels().data()),
            static_cast<std::streamsize>(img.pixels().size()));
}

}  // namespace reid
