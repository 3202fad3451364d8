#pragma once

// Proxy images: natural images perturbed in the frequency or spatial domain
// so they can stand in for anomalies during training.
//
// Spectral conventions: bins are addressed in the centered spectrum
// (DC at row h/2, column w/2). A bin's Chebyshev radius is
// max(|row - h/2|, |col - w/2|). With m = min(w, h) the default bands are
//   low  : r <  m/8
//   mid  : m/8 <= r < m/4
//   high : r >= m/4

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "clipflow/error.hpp"

namespace clipflow {

/// RGB raster with interleaved channels, values nominally in [0, 255].
struct RasterImage {
  int width = 0;
  int height = 0;
  std::vector<double> pixels;  // (y * width + x) * 3 + c

  static constexpr int kChannels = 3;

  RasterImage() = default;
  RasterImage(int w, int h, double fill = 0.0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * kChannels, fill) {}

  double& at(int x, int y, int c) { return pixels[index(x, y, c)]; }
  double at(int x, int y, int c) const { return pixels[index(x, y, c)]; }

  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * kChannels +
           static_cast<std::size_t>(c);
  }
};

inline void validate_image(const RasterImage& img) {
  if (img.width < 8 || img.height < 8) throw ConfigError("image must be at least 8x8");
  if (img.pixels.size() != static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) * 3)
    throw ConfigError("image must have exactly 3 channels");
}

enum class Band { low, mid, high };

inline std::string_view to_string(Band b) {
  switch (b) {
    case Band::low: return "low";
    case Band::mid: return "mid";
    case Band::high: return "high";
  }
  return "?";
}

inline Band parse_band(std::string_view s) {
  if (s == "low") return Band::low;
  if (s == "mid") return Band::mid;
  if (s == "high") return Band::high;
  throw ConfigError("unknown band \"" + std::string(s) + "\" (expected low, mid or high)");
}

/// Band edges as fractions of min(width, height).
struct BandGeometry {
  double low_edge = 1.0 / 8.0;
  double mid_edge = 1.0 / 4.0;
};

struct SpectralMaskSpec {
  Band band = Band::low;
  double ratio = 1.0;
  bool phase_only = false;
  std::uint64_t seed = 0;
  BandGeometry geometry;
};

/// Boolean grid over centered frequency bins, row-major (height x width).
struct BinGrid {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> cells;

  BinGrid() = default;
  BinGrid(int w, int h, std::uint8_t fill)
      : width(w), height(h), cells(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), fill) {}

  std::uint8_t& at(int row, int col) { return cells[static_cast<std::size_t>(row) * width + col]; }
  std::uint8_t at(int row, int col) const { return cells[static_cast<std::size_t>(row) * width + col]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(cells.begin(), cells.end(), std::uint8_t{1})); }
};

/// Frequency mask: 1 passes a bin, 0 masks it.
using FrequencyMask = BinGrid;

inline int chebyshev_radius(int row, int col, int width, int height) {
  return std::max(std::abs(row - height / 2), std::abs(col - width / 2));
}

/// Centered coordinates of the bin holding the complex conjugate.
inline std::pair<int, int> conjugate_bin(int row, int col, int width, int height) {
  return {(2 * (height / 2) - row + height) % height, (2 * (width / 2) - col + width) % width};
}

/// Bins with inner <= r < outer.
inline BinGrid annulus_region(int width, int height, double inner, double outer) {
  if (width < 8 || height < 8) throw ConfigError("spectrum must be at least 8x8");
  BinGrid g(width, height, 0);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const double rad = chebyshev_radius(r, c, width, height);
      g.at(r, c) = (rad >= inner && rad < outer) ? 1 : 0;
    }
  return g;
}

inline BinGrid band_region(int width, int height, Band band, const BandGeometry& geom = {}) {
  const double m = std::min(width, height);
  const double lo = geom.low_edge * m;
  const double hi = geom.mid_edge * m;
  switch (band) {
    case Band::low: return annulus_region(width, height, -1.0, lo);
    case Band::mid: return annulus_region(width, height, lo, hi);
    case Band::high: return annulus_region(width, height, hi, std::numeric_limits<double>::infinity());
  }
  throw ConfigError("unknown band");
}

/// Independently masks each in-region bin with probability `ratio`. A bin and
/// its conjugate share the decision of whichever comes first in row-major
/// order, so the mask is conjugate-symmetric.
inline FrequencyMask sample_region_mask(const BinGrid& region, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("masking ratio must lie in [0, 1]");
  FrequencyMask mask(region.width, region.height, 1);
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution drop(ratio);
  for (int r = 0; r < region.height; ++r)
    for (int c = 0; c < region.width; ++c) {
      if (!region.at(r, c)) continue;
      const auto [cr, cc] = conjugate_bin(r, c, region.width, region.height);
      if (cr < r || (cr == r && cc < c)) {
        mask.at(r, c) = mask.at(cr, cc);
      } else {
        mask.at(r, c) = drop(rng) ? 0 : 1;
      }
    }
  return mask;
}

inline FrequencyMask sample_mask(const SpectralMaskSpec& spec, int width, int height) {
  return sample_region_mask(band_region(width, height, spec.band, spec.geometry), spec.ratio, spec.seed);
}

/// Diagnostics from one spectral filtering pass.
struct SpectralStats {
  double max_imag_residue = 0.0;  // before taking the real part / clamping
  double energy_before = 0.0;
  double energy_after = 0.0;
};

namespace detail {

struct FftwFree {
  void operator()(fftw_complex* p) const { fftw_free(p); }
};
struct FftwPlanDestroy {
  void operator()(fftw_plan_s* p) const { fftw_destroy_plan(p); }
};
using FftwBuffer = std::unique_ptr<fftw_complex, FftwFree>;
using FftwPlan = std::unique_ptr<fftw_plan_s, FftwPlanDestroy>;

}  // namespace detail

/// Per-channel forward FFT, masking in the centered spectrum, inverse FFT,
/// real part, clamp to [0, 255]. Masked bins are zeroed, or with
/// `phase_only` replaced by their magnitude (phase set to zero).
inline RasterImage filter_spectrum(const RasterImage& image, const FrequencyMask& mask, bool phase_only,
                                   SpectralStats* stats = nullptr) {
  validate_image(image);
  if (mask.width != image.width || mask.height != image.height)
    throw ConfigError("frequency mask does not match image size");
  const int w = image.width;
  const int h = image.height;
  const std::size_t n = static_cast<std::size_t>(w) * static_cast<std::size_t>(h);

  detail::FftwBuffer buf(fftw_alloc_complex(n));
  if (!buf) throw NumericError("FFT buffer allocation failed");
  // FFTW_ESTIMATE plans without touching the buffer and is deterministic.
  detail::FftwPlan fwd(fftw_plan_dft_2d(h, w, buf.get(), buf.get(), FFTW_FORWARD, FFTW_ESTIMATE));
  detail::FftwPlan inv(fftw_plan_dft_2d(h, w, buf.get(), buf.get(), FFTW_BACKWARD, FFTW_ESTIMATE));

  SpectralStats local;
  RasterImage out(w, h);
  auto* data = buf.get();
  for (int ch = 0; ch < 3; ++ch) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        auto& v = data[static_cast<std::size_t>(y) * w + x];
        v[0] = image.at(x, y, ch);
        v[1] = 0.0;
      }
    fftw_execute(fwd.get());
    for (int u = 0; u < h; ++u)
      for (int v = 0; v < w; ++v) {
        auto& bin = data[static_cast<std::size_t>(u) * w + v];
        const double e = bin[0] * bin[0] + bin[1] * bin[1];
        local.energy_before += e;
        const int row = (u + h / 2) % h;
        const int col = (v + w / 2) % w;
        if (!mask.at(row, col)) {
          if (phase_only) {
            bin[0] = std::sqrt(e);
            bin[1] = 0.0;
          } else {
            bin[0] = 0.0;
            bin[1] = 0.0;
          }
        }
        local.energy_after += bin[0] * bin[0] + bin[1] * bin[1];
      }
    fftw_execute(inv.get());
    const double scale = 1.0 / static_cast<double>(n);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const auto& v = data[static_cast<std::size_t>(y) * w + x];
        local.max_imag_residue = std::max(local.max_imag_residue, std::abs(v[1] * scale));
        out.at(x, y, ch) = std::clamp(v[0] * scale, 0.0, 255.0);
      }
  }
  if (stats) *stats = local;
  return out;
}

inline RasterImage apply_frequency_mask(const RasterImage& image, const SpectralMaskSpec& spec,
                                        SpectralStats* stats = nullptr) {
  validate_image(image);
  return filter_spectrum(image, sample_mask(spec, image.width, image.height), spec.phase_only, stats);
}

/// Zeroes every bin with inner <= r < outer. Used to build validation
/// negatives that differ from the random training masks.
inline RasterImage apply_band_stop(const RasterImage& image, double inner, double outer) {
  validate_image(image);
  BinGrid region = annulus_region(image.width, image.height, inner, outer);
  FrequencyMask mask(image.width, image.height, 1);
  for (std::size_t i = 0; i < mask.cells.size(); ++i) mask.cells[i] = region.cells[i] ? 0 : 1;
  return filter_spectrum(image, mask, false);
}

// ---------------------------------------------------------------------------
// Spatial operations

inline RasterImage gaussian_blur(const RasterImage& image, double sigma) {
  validate_image(image);
  if (sigma < 0.0) throw ConfigError("blur sigma must be non-negative");
  if (sigma == 0.0) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[static_cast<std::size_t>(i + radius)] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[static_cast<std::size_t>(i + radius)];
  }
  for (auto& k : kernel) k /= sum;

  // Reflect-101 border handling.
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i : 2 * (n - 1) - i;
    return i;
  };
  RasterImage tmp(image.width, image.height);
  RasterImage out(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k)
          acc += kernel[static_cast<std::size_t>(k + radius)] * image.at(reflect(x + k, image.width), y, c);
        tmp.at(x, y, c) = acc;
      }
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k)
          acc += kernel[static_cast<std::size_t>(k + radius)] * tmp.at(x, reflect(y + k, image.height), c);
        out.at(x, y, c) = std::clamp(acc, 0.0, 255.0);
      }
  return out;
}

/// out = in + amount * (in - blur(in))
inline RasterImage unsharp_mask(const RasterImage& image, double blur_sigma, double amount) {
  const RasterImage blurred = gaussian_blur(image, blur_sigma);
  RasterImage out = image;
  for (std::size_t i = 0; i < out.pixels.size(); ++i)
    out.pixels[i] = std::clamp(image.pixels[i] + amount * (image.pixels[i] - blurred.pixels[i]), 0.0, 255.0);
  return out;
}

inline RasterImage add_gaussian_noise(const RasterImage& image, double sigma, std::uint64_t seed) {
  validate_image(image);
  if (sigma < 0.0) throw ConfigError("noise sigma must be non-negative");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma > 0.0 ? sigma : 1.0);
  RasterImage out = image;
  if (sigma == 0.0) return out;
  for (auto& p : out.pixels) p = std::clamp(p + dist(rng), 0.0, 255.0);
  return out;
}

/// Maximum deviations for color jitter. Brightness, contrast and saturation
/// factors are drawn from [1 - x, 1 + x]; hue shift from [-hue, hue] turns.
struct ColorJitter {
  double brightness = 0.0;
  double contrast = 0.0;
  double saturation = 0.0;
  double hue = 0.0;
};

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d == 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d + 6.0, 6.0) / 6.0;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0) / 6.0;
  } else {
    h = ((r - g) / d + 4.0) / 6.0;
  }
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = (h - std::floor(h)) * 6.0;
  const int i = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (i) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

}  // namespace detail

/// Brightness, contrast, saturation, then hue, each with a seeded factor.
inline RasterImage color_jitter(const RasterImage& image, const ColorJitter& jit, std::uint64_t seed) {
  validate_image(image);
  if (jit.brightness < 0 || jit.contrast < 0 || jit.saturation < 0 || jit.hue < 0 || jit.hue > 0.5)
    throw ConfigError("jitter ranges must be non-negative (hue at most 0.5)");
  std::mt19937_64 rng(seed);
  auto factor = [&](double range) { return std::uniform_real_distribution<double>(1.0 - range, 1.0 + range)(rng); };
  const double fb = factor(jit.brightness);
  const double fc = factor(jit.contrast);
  const double fs = factor(jit.saturation);
  const double fh = std::uniform_real_distribution<double>(-jit.hue, jit.hue)(rng);

  RasterImage out = image;
  auto& px = out.pixels;
  const std::size_t n = px.size() / 3;
  for (auto& p : px) p = std::clamp(p * fb, 0.0, 255.0);

  double mean_gray = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean_gray += detail::luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
  mean_gray /= static_cast<double>(n);
  for (auto& p : px) p = std::clamp(mean_gray + fc * (p - mean_gray), 0.0, 255.0);

  for (std::size_t i = 0; i < n; ++i) {
    const double g = detail::luma(px[3 * i], px[3 * i + 1], px[3 * i + 2]);
    for (int c = 0; c < 3; ++c) px[3 * i + c] = std::clamp(g + fs * (px[3 * i + c] - g), 0.0, 255.0);
  }

  if (fh != 0.0) {
    for (std::size_t i = 0; i < n; ++i) {
      double h, s, v;
      detail::rgb_to_hsv(px[3 * i] / 255.0, px[3 * i + 1] / 255.0, px[3 * i + 2] / 255.0, h, s, v);
      double r, g, b;
      detail::hsv_to_rgb(h + fh, s, v, r, g, b);
      px[3 * i] = std::clamp(r * 255.0, 0.0, 255.0);
      px[3 * i + 1] = std::clamp(g * 255.0, 0.0, 255.0);
      px[3 * i + 2] = std::clamp(b * 255.0, 0.0, 255.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dispatch

enum class ProxyOperation { frequency_mask, smoothing, sharpening, gaussian_noise, color_jitter, band_stop };

inline ProxyOperation parse_proxy_operation(std::string_view s) {
  if (s == "frequency_mask" || s == "frequency-mask") return ProxyOperation::frequency_mask;
  if (s == "smoothing") return ProxyOperation::smoothing;
  if (s == "sharpening") return ProxyOperation::sharpening;
  if (s == "gaussian_noise" || s == "gaussian-noise") return ProxyOperation::gaussian_noise;
  if (s == "color_jitter" || s == "color-jitter") return ProxyOperation::color_jitter;
  if (s == "band_stop" || s == "band-stop") return ProxyOperation::band_stop;
  throw ConfigError("unknown proxy operation \"" + std::string(s) + "\"");
}

struct ProxyConfig {
  ProxyOperation operation = ProxyOperation::frequency_mask;
  std::optional<SpectralMaskSpec> spectral;
  double noise_sigma = 5.0;
  std::optional<double> blur_sigma;
  std::optional<double> sharpen_amount;
  std::optional<ColorJitter> jitter;
  double band_stop_inner = 30.0;
  double band_stop_outer = 100.0;
  std::uint64_t seed = 0;  // spatial noise / jitter; spectral masks use spectral->seed
};

/// Checks that every parameter the chosen operation consults is present and
/// in range.
inline void validate_proxy_config(const ProxyConfig& cfg) {
  switch (cfg.operation) {
    case ProxyOperation::frequency_mask:
      if (!cfg.spectral) throw ConfigError("frequency_mask requires a spectral mask spec");
      if (!(cfg.spectral->ratio >= 0.0 && cfg.spectral->ratio <= 1.0))
        throw ConfigError("masking ratio must lie in [0, 1]");
      return;
    case ProxyOperation::smoothing:
      if (!cfg.blur_sigma) throw ConfigError("smoothing requires blur_sigma");
      if (*cfg.blur_sigma < 0.0) throw ConfigError("blur sigma must be non-negative");
      return;
    case ProxyOperation::sharpening:
      if (!cfg.sharpen_amount) throw ConfigError("sharpening requires sharpen_amount");
      if (cfg.blur_sigma && *cfg.blur_sigma < 0.0) throw ConfigError("blur sigma must be non-negative");
      return;
    case ProxyOperation::gaussian_noise:
      if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("noise sigma must be non-negative");
      return;
    case ProxyOperation::color_jitter:
      if (!cfg.jitter) throw ConfigError("color_jitter requires jitter ranges");
      return;
    case ProxyOperation::band_stop:
      if (!(cfg.band_stop_inner < cfg.band_stop_outer)) throw ConfigError("band_stop needs inner < outer radius");
      return;
  }
  throw ConfigError("unknown proxy operation");
}

inline RasterImage make_proxy(const RasterImage& image, const ProxyConfig& cfg) {
  validate_proxy_config(cfg);
  switch (cfg.operation) {
    case ProxyOperation::frequency_mask: return apply_frequency_mask(image, *cfg.spectral);
    case ProxyOperation::smoothing: return gaussian_blur(image, *cfg.blur_sigma);
    case ProxyOperation::sharpening: return unsharp_mask(image, cfg.blur_sigma.value_or(1.0), *cfg.sharpen_amount);
    case ProxyOperation::gaussian_noise: return add_gaussian_noise(image, cfg.noise_sigma, cfg.seed);
    case ProxyOperation::color_jitter: return color_jitter(image, *cfg.jitter, cfg.seed);
    case ProxyOperation::band_stop: return apply_band_stop(image, cfg.band_stop_inner, cfg.band_stop_outer);
  }
  throw ConfigError("unknown proxy operation");
}

}  // namespace clipflow
