#include "vesca/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "vesca/errors.hpp"

namespace vesca {

double quantize_pixel(double v) {
  const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return static_cast<double>(static_cast<float>(q));
}

namespace {

using Color = std::array<double, 3>;

double color_distance(const Color& a, const Color& b) {
  double s = 0.0;
  for (int c = 0; c < 3; ++c) s += (a[c] - b[c]) * (a[c] - b[c]);
  return std::sqrt(s);
}

bool inside_triangle(double px, double py, const std::array<double, 6>& t) {
  auto cross = [](double ax, double ay, double bx, double by, double cx, double cy) {
    return (bx - ax) * (cy - ay) - (by - ay) * (cx - ax);
  };
  const double d1 = cross(t[0], t[1], t[2], t[3], px, py);
  const double d2 = cross(t[2], t[3], t[4], t[5], px, py);
  const double d3 = cross(t[4], t[5], t[0], t[1], px, py);
  const bool neg = d1 < 0 || d2 < 0 || d3 < 0;
  const bool pos = d1 > 0 || d2 > 0 || d3 > 0;
  return !(neg && pos);
}

// Draws one clean scene: textured background plus 1-3 shapes.
void draw_scene(std::size_t side, Rng& rng, Tensor& image, std::vector<char>& mask) {
  image = Tensor::image(side, side, 3);
  mask.assign(side * side, 0);
  // Muted, near-gray background; shapes are saturated.
  Color bg;
  const double gray = rng.uniform(0.3, 0.7);
  for (auto& c : bg) c = gray + rng.uniform(-0.06, 0.06);
  const double freq = rng.uniform(0.3, 0.8);
  const double angle = rng.uniform(0.0, 3.14159265358979);
  const double phase = rng.uniform(0.0, 6.28318530717959);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double t = std::sin(freq * (static_cast<double>(x) * std::cos(angle) +
                                        static_cast<double>(y) * std::sin(angle)) + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        image.at(y, x, c) = bg[c] + 0.08 * t + 0.02 * rng.normal();
      }
    }
  }

  const std::size_t shapes = 1 + rng.uniform_index(3);
  const double s = static_cast<double>(side);
  for (std::size_t n = 0; n < shapes; ++n) {
    const auto kind = rng.uniform_index(3);
    const double cx = rng.uniform(0.15 * s, 0.85 * s);
    const double cy = rng.uniform(0.15 * s, 0.85 * s);
    const double r = rng.uniform(0.12 * s, 0.28 * s);
    const double aspect = rng.uniform(0.6, 1.4);
    std::array<double, 6> tri{};
    for (int v = 0; v < 3; ++v) {
      const double a = rng.uniform(0.0, 6.28318530717959);
      tri[2 * v] = cx + r * 1.3 * std::cos(a);
      tri[2 * v + 1] = cy + r * 1.3 * std::sin(a);
    }
    Color col;
    for (int tries = 0; tries < 16; ++tries) {
      const auto hi = rng.uniform_index(3);
      for (std::size_t c = 0; c < 3; ++c) {
        col[c] = c == hi ? rng.uniform(0.75, 1.0) : rng.uniform(0.0, 0.3);
      }
      if (color_distance(col, bg) > 0.45) break;
    }
    for (std::size_t y = 0; y < side; ++y) {
      for (std::size_t x = 0; x < side; ++x) {
        const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
        bool in = false;
        if (kind == 0) {
          in = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
        } else if (kind == 1) {
          in = std::abs(px - cx) <= r * aspect && std::abs(py - cy) <= r / aspect;
        } else {
          in = inside_triangle(px, py, tri);
        }
        if (!in) continue;
        mask[y * side + x] = 1;
        for (std::size_t c = 0; c < 3; ++c) image.at(y, x, c) = col[c] + 0.03 * rng.normal();
      }
    }
  }
}

// Fixed color/texture shift that defines the target domain.
void apply_target_shift(Tensor& image) {
  constexpr Color kOffset{0.30, 0.12, 0.02};
  for (std::size_t y = 0; y < image.height(); ++y) {
    const double stripe = std::sin(1.3 * static_cast<double>(y)) > 0.0 ? 0.07 : -0.07;
    for (std::size_t x = 0; x < image.width(); ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        double& v = image.at(y, x, c);
        v = 0.6 * v + kOffset[c] + stripe;
      }
    }
  }
}

std::vector<int> token_labels(const std::vector<char>& mask, std::size_t side,
                              std::size_t patch) {
  const std::size_t g = side / patch;
  std::vector<int> labels(g * g);
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      std::size_t hits = 0;
      for (std::size_t dy = 0; dy < patch; ++dy) {
        for (std::size_t dx = 0; dx < patch; ++dx) {
          hits += mask[(gy * patch + dy) * side + gx * patch + dx] != 0;
        }
      }
      labels[gy * g + gx] = 2 * hits >= patch * patch ? 1 : 0;
    }
  }
  return labels;
}

LabeledImages draw_split(const SynthParams& p, std::size_t count, bool target, Rng rng) {
  LabeledImages out;
  Tensor image;
  std::vector<char> mask;
  for (std::size_t i = 0; i < count; ++i) {
    draw_scene(p.image_side, rng, image, mask);
    if (target) apply_target_shift(image);
    for (double& v : image.values()) v = quantize_pixel(v);
    out.images.push_back(image);
    out.labels.push_back(token_labels(mask, p.image_side, p.patch_side));
  }
  return out;
}

}  // namespace

Dataset synth_dataset(const SynthParams& params, const Rng& rng) {
  if (params.patch_side == 0 || params.image_side % params.patch_side != 0) {
    throw ParameterError("synth_dataset: patch_side must divide image_side");
  }
  Dataset d;
  d.params = params;
  d.source = draw_split(params, params.num_source, false, rng.derive({0x50}));
  d.train = draw_split(params, params.num_train, true, rng.derive({0x71}));
  d.test = draw_split(params, params.num_test, true, rng.derive({0x72}));
  return d;
}

}  // namespace vesca
