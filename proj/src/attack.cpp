#include "vesca/attack.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vesca/errors.hpp"
#include "vesca/numerics.hpp"
#include "vesca/parallel.hpp"

namespace vesca {

std::string to_string(SeedAugmentation a) {
  return a == SeedAugmentation::par ? "par" : "jitter";
}

SeedAugmentation parse_seed_augmentation(const std::string& s) {
  if (s == "par") return SeedAugmentation::par;
  if (s == "jitter") return SeedAugmentation::jitter;
  throw ParameterError("unknown seed augmentation '" + s + "'");
}

double AttackConfig::step() const {
  if (step_size) return *step_size;
  return iterations > 0 ? epsilon / static_cast<double>(iterations) : epsilon;
}

void AttackConfig::validate(std::size_t image_side) const {
  auto fail = [](const std::string& m) { throw ConfigError("attack config: " + m); };
  if (!(epsilon > 0.0 && epsilon <= 1.0)) fail("epsilon must lie in (0, 1]");
  if (step_size && !(*step_size > 0.0)) fail("step_size must be positive");
  if (!(momentum >= 0.0)) fail("momentum must be nonnegative");
  if (num_simplices < 1) fail("num_simplices must be at least 1");
  if (num_vertices < 1) fail("num_vertices must be at least 1");
  if (num_vertices > kMaxCmVertices) fail("num_vertices exceeds the supported maximum");
  if (mc_samples < 1) fail("mc_samples must be at least 1");
  if (!(lambda_star >= 0.0)) fail("lambda_star must be nonnegative");
  if (lambda_star > 0.0 && num_vertices < 3) {
    fail("lambda_star > 0 needs at least 3 vertices per simplex");
  }
  if (ns == 0 || image_side % ns != 0) fail("ns must divide the image side");
}

Tensor project(const Tensor& image, const Tensor& original, double epsilon) {
  require_same_shape(image, original, "project");
  Tensor out(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double lo = std::max(original[i] - epsilon, 0.0);
    const double hi = std::min(original[i] + epsilon, 1.0);
    out[i] = std::clamp(image[i], lo, hi);
  }
  return out;
}

double adaptive_lambda(double lambda_star, double volume) {
  if (!(volume >= 0.0)) throw ParameterError("adaptive_lambda: volume must be nonnegative");
  const double lambda = lambda_star / std::max(volume, std::sqrt(kVolumeFloor));
  return std::min(lambda, lambda_star * 1e6);
}

namespace {

void check_gradient(const Tensor& g, const char* where) {
  if (!g.all_finite()) throw NumericError(std::string(where) + ": non-finite gradient");
}

// momentum <- mu * momentum + grad / |grad|_1; x <- project(x + step * sign(momentum))
void momentum_sign_step(Tensor& x, Tensor& momentum, const Tensor& grad, const Tensor& base,
                        const AttackConfig& cfg, double epsilon) {
  double norm = 0.0;
  for (double g : grad.values()) norm += std::abs(g);
  for (std::size_t i = 0; i < momentum.size(); ++i) {
    momentum[i] = cfg.momentum * momentum[i] + (norm > 0.0 ? grad[i] / norm : 0.0);
  }
  const double step = cfg.step();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double m = momentum[i];
    x[i] += m > 0.0 ? step : (m < 0.0 ? -step : 0.0);
  }
  x = project(x, base, epsilon);
}

}  // namespace

Tensor init_vertex(const Network& encoder, const Tensor& base, const Embedding& clean_embedding,
                   const Embedding* reference_mean, const AttackConfig& cfg, Rng& rng,
                   bool use_dra, std::vector<TraceRecord>* trace) {
  if (!(cfg.epsilon >= 0.0)) throw ParameterError("init_vertex: epsilon must be nonnegative");
  if (use_dra && !reference_mean) {
    throw ParameterError("init_vertex: domain re-adaptation needs a reference mean");
  }
  if (cfg.init_iterations == 0 || cfg.epsilon == 0.0) return base;

  // The feature distance has a zero subgradient at x = base, so start from a
  // random point inside one step of it.
  const double step = std::min(cfg.step(), cfg.epsilon);
  Tensor x = base;
  for (double& v : x.values()) v += rng.uniform(-step, step);
  x = project(x, base, cfg.epsilon);

  std::vector<LossTerm> terms{{cfg.loss, &clean_embedding, 1.0}};
  if (use_dra) terms.push_back({LossKind::neg_l1, reference_mean, 1.0});

  Tensor momentum(base.shape());
  for (std::size_t it = 0; it < cfg.init_iterations; ++it) {
    const LossGrad lg = encoder.objective_and_input_grad(x, terms);
    check_gradient(lg.grad, "init_vertex");
    if (trace) trace->push_back({"init", 0, 0, it, lg.loss, 0.0, 0.0, false});
    momentum_sign_step(x, momentum, lg.grad, base, cfg, cfg.epsilon);
  }
  return x;
}

Tensor par_apply(const Tensor& image, std::size_t ns, std::span<const std::size_t> perm,
                 std::span<const int> quarter_turns) {
  if (image.rank() != 3) throw ShapeError("par_augment: expected an H x W x C image");
  const std::size_t h = image.height(), w = image.width(), c = image.channels();
  if (ns == 0 || h % ns != 0 || w % ns != 0 || h / ns != w / ns) {
    throw ParameterError("par_augment: ns=" + std::to_string(ns) +
                         " does not split the image into square patches");
  }
  const std::size_t cells = ns * ns, p = h / ns;
  if (perm.size() != cells || quarter_turns.size() != cells) {
    throw ParameterError("par_augment: permutation or rotation list has the wrong length");
  }
  std::vector<char> seen(cells, 0);
  for (std::size_t src : perm) {
    if (src >= cells || seen[src]) throw ParameterError("par_augment: not a permutation of the grid");
    seen[src] = 1;
  }
  Tensor out(image.shape());
  for (std::size_t dst = 0; dst < cells; ++dst) {
    const std::size_t src = perm[dst];
    const std::size_t sy = (src / ns) * p, sx = (src % ns) * p;
    const std::size_t dy = (dst / ns) * p, dx = (dst % ns) * p;
    const int q = ((quarter_turns[dst] % 4) + 4) % 4;
    for (std::size_t y = 0; y < p; ++y) {
      for (std::size_t x = 0; x < p; ++x) {
        std::size_t iy = y, ix = x;
        switch (q) {
          case 1: iy = x; ix = p - 1 - y; break;
          case 2: iy = p - 1 - y; ix = p - 1 - x; break;
          case 3: iy = p - 1 - x; ix = y; break;
          default: break;
        }
        for (std::size_t ch = 0; ch < c; ++ch) {
          out.at(dy + y, dx + x, ch) = image.at(sy + iy, sx + ix, ch);
        }
      }
    }
  }
  return out;
}

Tensor par_augment(const Tensor& image, std::size_t ns, Rng& rng) {
  if (ns == 0) throw ParameterError("par_augment: ns must be positive");
  const std::size_t cells = ns * ns;
  std::vector<std::size_t> perm(cells);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = cells; i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_index(i)]);
  std::vector<int> turns(cells);
  for (auto& t : turns) t = static_cast<int>(rng.uniform_index(4));
  return par_apply(image, ns, perm, turns);
}

RefineResult refine_vertex(const Network& encoder, const Simplex& prefix,
                           const Embedding& clean_embedding, const AttackConfig& cfg, Rng& rng,
                           std::size_t simplex_index, std::vector<TraceRecord>* trace) {
  if (prefix.vertices.empty()) throw ParameterError("refine_vertex: empty simplex prefix");
  const std::size_t k = prefix.size();
  const std::size_t free = k;  // index of the candidate in the provisional simplex
  std::vector<Tensor> prov = prefix.vertices;
  prov.push_back(centroid(prefix.vertices));
  const bool volume_term = prov.size() >= 3 && cfg.lambda_star > 0.0;

  RefineResult result;
  result.degenerate_throughout = volume_term && cfg.iterations > 0;
  Tensor momentum(prefix.base_image.shape());
  const LossTerm term{cfg.loss, &clean_embedding, 1.0};

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    Tensor grad(prefix.base_image.shape());
    double mc_loss = 0.0;
    for (std::size_t h = 0; h < cfg.mc_samples; ++h) {
      const Vector omega = dirichlet_uniform(prov.size(), rng);
      const Tensor sample = barycentric(prov, omega);
      const LossGrad lg = encoder.objective_and_input_grad(sample, std::span(&term, 1));
      check_gradient(lg.grad, "refine_vertex");
      mc_loss += lg.loss;
      // d sample / d candidate = omega_free * I
      const double wf = omega[free];
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += wf * lg.grad[i];
    }
    const double inv_h = 1.0 / static_cast<double>(cfg.mc_samples);
    mc_loss *= inv_h;
    for (double& g : grad.values()) g *= inv_h;
    result.mc_losses.push_back(mc_loss);

    TraceRecord rec{"refine", simplex_index, free, it, mc_loss, 0.0, 0.0, false};
    if (volume_term) {
      const CmReport cm = cm_volume(prov);
      rec.volume = cm.volume;
      rec.lambda = adaptive_lambda(cfg.lambda_star, cm.volume);
      if (!cm.degenerate) {
        result.degenerate_throughout = false;
        const Tensor vg = log_volume_grad(prov, free);
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += rec.lambda * vg[i];
      } else {
        rec.degenerate = true;
      }
    }
    if (trace) trace->push_back(rec);
    momentum_sign_step(prov[free], momentum, grad, prefix.base_image, cfg, prefix.epsilon);
  }
  result.vertex = std::move(prov[free]);
  return result;
}

SimplicialComplex build_complex(const Network& encoder, const Tensor& base,
                                const Embedding* reference_mean, const AttackConfig& cfg,
                                const Rng& rng, const BuildOptions& options) {
  if (base.rank() != 3) throw ShapeError("build_complex: expected an H x W x C image");
  cfg.validate(base.height());
  const Embedding clean = encoder.forward(base);

  Rng init_rng = rng.derive({0});
  std::vector<TraceRecord> init_trace;
  const Tensor first = init_vertex(encoder, base, clean, reference_mean, cfg, init_rng,
                                   cfg.use_dra, options.trace ? &init_trace : nullptr);

  const std::size_t n_simplices = cfg.num_simplices;
  std::vector<Simplex> simplices(n_simplices);
  std::vector<std::vector<TraceRecord>> traces(n_simplices);
  std::vector<std::vector<std::string>> warnings(n_simplices);

  parallel_for(n_simplices, options.jobs, [&](std::size_t n) {
    Rng srng = rng.derive({1, n});
    Simplex& s = simplices[n];
    s.base_image = base;
    s.epsilon = cfg.epsilon;
    if (n == 0) {
      s.vertices.push_back(first);
    } else if (cfg.augmentation == SeedAugmentation::par) {
      s.vertices.push_back(project(par_augment(first, cfg.ns, srng), base, cfg.epsilon));
    } else {
      Tensor j = first;
      const double a = cfg.epsilon / 100.0;
      for (double& v : j.values()) v += srng.uniform(-a, a);
      s.vertices.push_back(project(j, base, cfg.epsilon));
    }
    while (s.size() < cfg.num_vertices) {
      RefineResult r = refine_vertex(encoder, s, clean, cfg, srng, n,
                                     options.trace ? &traces[n] : nullptr);
      if (r.degenerate_throughout) {
        warnings[n].push_back("simplex " + std::to_string(n) + " vertex " +
                              std::to_string(s.size()) +
                              ": volume clamp active for every iteration");
      }
      s.vertices.push_back(std::move(r.vertex));
    }
  });

  if (options.trace) {
    options.trace->insert(options.trace->end(), init_trace.begin(), init_trace.end());
    for (auto& t : traces) options.trace->insert(options.trace->end(), t.begin(), t.end());
  }
  if (options.warnings) {
    for (auto& w : warnings) options.warnings->insert(options.warnings->end(), w.begin(), w.end());
  }
  SimplicialComplex k{std::move(simplices)};
  validate(k);
  return k;
}

std::vector<Tensor> generate_adversarial(const SimplicialComplex& k, Rng& rng,
                                         std::size_t count) {
  return sample_complex(k, rng, count);
}

}  // namespace vesca
