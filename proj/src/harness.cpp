#include "vesca/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "vesca/errors.hpp"
#include "vesca/numerics.hpp"
#include "vesca/parallel.hpp"

namespace vesca {

namespace {

constexpr std::uint64_t kImageStream = 0xA7;
constexpr std::uint64_t kSampleStream = 0x5A;
constexpr std::uint64_t kNoiseStream = 0x401;
constexpr std::uint64_t kDeclineStream = 0xDEC;

std::vector<Embedding> embed_all(std::span<const Tensor> images, const Network& encoder,
                                 std::size_t jobs) {
  std::vector<Embedding> out(images.size());
  parallel_for(images.size(), jobs, [&](std::size_t i) { out[i] = encoder.forward(images[i]); });
  return out;
}

// Per-image accuracies, in image order.
std::vector<double> accuracies(std::span<const Tensor> images,
                               std::span<const std::vector<int>> labels, const Network& net,
                               std::size_t jobs) {
  std::vector<double> acc(images.size());
  parallel_for(images.size(), jobs,
               [&](std::size_t i) { acc[i] = patch_accuracy(net, images[i], labels[i]); });
  return acc;
}

double mean(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

MetricPair evaluate_transfer(std::span<const Tensor> adv, std::span<const Tensor> clean,
                             std::span<const std::vector<int>> labels,
                             const DownstreamModel& model, std::size_t jobs) {
  if (adv.size() != clean.size() || adv.size() != labels.size()) {
    throw ShapeError("evaluate_transfer: adversarial, clean and label lists differ in length");
  }
  if (adv.empty()) throw ParameterError("evaluate_transfer: no images");
  for (std::size_t i = 0; i < adv.size(); ++i) require_same_shape(adv[i], clean[i], "evaluate_transfer");
  MetricPair m;
  m.clean = mean(accuracies(clean, labels, model.net, jobs));
  m.adversarial = mean(accuracies(adv, labels, model.net, jobs));
  return m;
}

double feature_shift(std::span<const Tensor> adv, std::span<const Tensor> clean,
                     const Network& encoder, std::size_t jobs) {
  if (adv.size() != clean.size()) throw ShapeError("feature_shift: lists differ in length");
  if (adv.empty()) return 0.0;
  std::vector<double> d(adv.size());
  parallel_for(adv.size(), jobs, [&](std::size_t i) {
    d[i] = l2_distance(encoder.forward(adv[i]), encoder.forward(clean[i]));
  });
  return mean(d);
}

double domain_gap(std::span<const Tensor> adv, std::span<const Tensor> references,
                  const Network& encoder, std::size_t jobs) {
  const auto a = embed_all(adv, encoder, jobs);
  const auto r = embed_all(references, encoder, jobs);
  return rbf_mmd2(a, r);
}

double decline_rate(std::span<const SimplicialComplex> complexes,
                    std::span<const std::vector<int>> labels, const DownstreamModel& model,
                    Rng& rng, std::size_t num_samples, std::size_t jobs) {
  if (complexes.size() != labels.size()) {
    throw ShapeError("decline_rate: complexes and labels differ in length");
  }
  if (complexes.empty()) throw ParameterError("decline_rate: no complexes");
  if (num_samples == 0) throw ParameterError("decline_rate: num_samples must be positive");
  bool all_single = true;
  for (const auto& k : complexes) {
    validate(k);
    for (const auto& s : k.simplices) all_single = all_single && s.size() == 1;
  }
  if (all_single) return 0.0;

  // Draw every point first so the result does not depend on `jobs`.
  struct Probe {
    std::size_t image;
    bool center;
    Tensor point;
  };
  std::vector<Probe> probes;
  for (std::size_t i = 0; i < complexes.size(); ++i) {
    for (const auto& s : complexes[i].simplices) {
      probes.push_back({i, true, centroid(s.vertices)});
      for (std::size_t j = 0; j < num_samples; ++j) probes.push_back({i, false, sample_point(s, rng)});
    }
  }
  std::vector<double> clean_acc(complexes.size());
  parallel_for(complexes.size(), jobs, [&](std::size_t i) {
    clean_acc[i] = patch_accuracy(model.net, complexes[i].simplices.front().base_image, labels[i]);
  });
  std::vector<double> deg(probes.size());
  parallel_for(probes.size(), jobs, [&](std::size_t p) {
    const Probe& pr = probes[p];
    deg[p] = clean_acc[pr.image] - patch_accuracy(model.net, pr.point, labels[pr.image]);
  });
  double center = 0.0, random = 0.0;
  std::size_t nc = 0, nr = 0;
  for (std::size_t p = 0; p < probes.size(); ++p) {
    if (probes[p].center) {
      center += deg[p];
      ++nc;
    } else {
      random += deg[p];
      ++nr;
    }
  }
  center /= static_cast<double>(nc);
  random /= static_cast<double>(nr);
  if (center == 0.0) {
    throw UndefinedRateError("decline_rate: centroid samples cause zero degradation");
  }
  return (center - random) / center * 100.0;
}

std::string to_string(RowKind r) {
  switch (r) {
    case RowKind::vesca: return "vesca";
    case RowKind::no_dra: return "no_dra";
    case RowKind::no_par: return "no_par";
    case RowKind::mim: return "mim";
    case RowKind::noise: return "noise";
  }
  return "?";
}

RowKind parse_row_kind(const std::string& s) {
  for (RowKind r : kAllRows) {
    if (to_string(r) == s) return r;
  }
  throw ParameterError("unknown ablation row '" + s + "'");
}

AttackConfig row_config(RowKind row, const AttackConfig& base) {
  AttackConfig c = base;
  switch (row) {
    case RowKind::vesca:
      break;
    case RowKind::no_dra:
      c.use_dra = false;
      break;
    case RowKind::no_par:
      c.augmentation = SeedAugmentation::jitter;
      break;
    case RowKind::mim:
      c.use_dra = false;
      break;
    case RowKind::noise:
      break;
  }
  return c;
}

Rng image_stream(const Rng& root, std::size_t image_index) {
  return root.derive({kImageStream, image_index});
}

RowArtifacts attack_images(RowKind row, const Network& encoder, std::span<const Tensor> clean,
                           const Embedding& reference_mean, const AttackConfig& cfg,
                           const Rng& root, std::size_t samples_per_image, std::size_t jobs) {
  if (samples_per_image == 0) throw ParameterError("samples_per_image must be positive");
  const AttackConfig c = row_config(row, cfg);
  if (!clean.empty()) c.validate(clean.front().height());
  const bool builds = row == RowKind::vesca || row == RowKind::no_dra || row == RowKind::no_par;
  const std::size_t n = clean.size();
  RowArtifacts out;
  out.samples.resize(n);
  out.traces.resize(n);
  out.warnings.resize(n);
  if (builds) out.complexes.resize(n);

  parallel_for(n, jobs, [&](std::size_t i) {
    const Rng rng = image_stream(root, i);
    if (builds) {
      BuildOptions opts;
      opts.trace = &out.traces[i];
      opts.warnings = &out.warnings[i];
      out.complexes[i] = build_complex(encoder, clean[i], &reference_mean, c, rng, opts);
      Rng srng = rng.derive({kSampleStream});
      out.samples[i] = generate_adversarial(out.complexes[i], srng, samples_per_image);
    } else if (row == RowKind::mim) {
      // Same stream as the first vertex of a complex row.
      Rng irng = rng.derive({0});
      const Embedding e = encoder.forward(clean[i]);
      out.samples[i].push_back(
          init_vertex(encoder, clean[i], e, nullptr, c, irng, false, &out.traces[i]));
    } else {
      Rng nrng = rng.derive({kNoiseStream});
      for (std::size_t s = 0; s < samples_per_image; ++s) {
        Tensor x = clean[i];
        for (double& v : x.values()) v += nrng.uniform() < 0.5 ? -c.epsilon : c.epsilon;
        out.samples[i].push_back(project(x, clean[i], c.epsilon));
      }
    }
  });
  return out;
}

double TransferReport::mean_degradation() const {
  if (models.empty()) return 0.0;
  double s = 0.0;
  for (const auto& m : models) s += m.metrics.degradation();
  return s / static_cast<double>(models.size());
}

const ModelResult& TransferReport::model(Variant v) const {
  for (const auto& m : models) {
    if (m.variant == v) return m;
  }
  throw ParameterError("report row has no model '" + to_string(v) + "'");
}

TransferReport evaluate_row(RowKind row, const RowArtifacts& artifacts, const EvalContext& ctx,
                            double epsilon) {
  if (!ctx.encoder) throw ParameterError("evaluate_row: encoder missing");
  if (artifacts.samples.size() != ctx.clean.size() || ctx.labels.size() != ctx.clean.size()) {
    throw ShapeError("evaluate_row: artifacts, clean images and labels differ in length");
  }
  const auto start = std::chrono::steady_clock::now();
  std::vector<Tensor> adv, clean;
  std::vector<std::vector<int>> labels;
  for (std::size_t i = 0; i < ctx.clean.size(); ++i) {
    for (const auto& x : artifacts.samples[i]) {
      require_same_shape(x, ctx.clean[i], "evaluate_row");
      if (!is_feasible(x, ctx.clean[i], epsilon)) {
        throw ParameterError("evaluate_row: " + to_string(row) + " sample of image " +
                             std::to_string(i) + " leaves the epsilon ball");
      }
      adv.push_back(x);
      clean.push_back(ctx.clean[i]);
      labels.push_back(ctx.labels[i]);
    }
  }

  TransferReport r;
  r.row = row;
  r.seed = ctx.seed;
  const Rng root(ctx.seed);
  for (const auto& m : ctx.models) {
    ModelResult res;
    res.variant = m.variant;
    res.metrics = evaluate_transfer(adv, clean, labels, m, ctx.jobs);
    if (artifacts.complexes.empty()) {
      res.decline_note = "no complex";
    } else {
      Rng drng = root.derive({kDeclineStream, static_cast<std::uint64_t>(row)});
      try {
        res.decline_rate = decline_rate(artifacts.complexes, ctx.labels, m, drng,
                                        ctx.decline_samples, ctx.jobs);
      } catch (const UndefinedRateError&) {
        res.decline_note = "undefined: zero centroid degradation";
      }
    }
    r.models.push_back(std::move(res));
  }
  r.feature_shift = feature_shift(adv, clean, *ctx.encoder, ctx.jobs);
  r.domain_gap = domain_gap(adv, ctx.references, *ctx.encoder, ctx.jobs);
  r.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

std::vector<TransferReport> run_ablation(const EvalContext& ctx, const AttackConfig& cfg,
                                         const Embedding& reference_mean,
                                         std::size_t samples_per_image) {
  if (!ctx.encoder) throw ParameterError("run_ablation: encoder missing");
  const Rng root(ctx.seed);
  std::vector<TransferReport> rows;
  for (RowKind row : kAllRows) {
    const auto start = std::chrono::steady_clock::now();
    const RowArtifacts a = attack_images(row, *ctx.encoder, ctx.clean, reference_mean, cfg,
                                         root, samples_per_image, ctx.jobs);
    const double attack_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    TransferReport r = evaluate_row(row, a, ctx, cfg.epsilon);
    r.wall_seconds += attack_seconds;
    rows.push_back(std::move(r));
  }
  return rows;
}

const TransferReport& ReportTable::row(RowKind r) const {
  for (const auto& x : rows) {
    if (x.row == r) return x;
  }
  throw ParameterError("report has no row '" + to_string(r) + "'");
}

nlohmann::json to_json(const ReportTable& table) {
  using nlohmann::json;
  json rows = json::array();
  for (const auto& r : table.rows) {
    json models = json::array();
    for (const auto& m : r.models) {
      json jm = {{"variant", to_string(m.variant)},
                 {"clean", m.metrics.clean},
                 {"adversarial", m.metrics.adversarial},
                 {"degradation", m.metrics.degradation()}};
      jm["decline_rate"] = m.decline_rate ? json(*m.decline_rate) : json(nullptr);
      if (!m.decline_note.empty()) jm["decline_note"] = m.decline_note;
      models.push_back(std::move(jm));
    }
    rows.push_back({{"row", to_string(r.row)},
                    {"seed", r.seed},
                    {"feature_shift", r.feature_shift},
                    {"domain_gap", r.domain_gap},
                    {"models", std::move(models)}});
  }
  return {{"schema_version", table.schema_version},
          {"decline_protocol", table.decline_protocol},
          {"seed", table.seed},
          {"config", table.config},
          {"reference_mean", table.reference_mean},
          {"rows", std::move(rows)}};
}

ReportTable report_from_json(const nlohmann::json& j) {
  try {
    ReportTable t;
    t.schema_version = j.at("schema_version").get<int>();
    if (t.schema_version != kReportSchemaVersion) {
      throw ConfigError("unsupported report schema_version " +
                        std::to_string(t.schema_version));
    }
    t.decline_protocol = j.at("decline_protocol").get<std::string>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.config = j.at("config");
    t.reference_mean = j.at("reference_mean").get<Embedding>();
    for (const auto& jr : j.at("rows")) {
      TransferReport r;
      r.row = parse_row_kind(jr.at("row").get<std::string>());
      r.seed = jr.at("seed").get<std::uint64_t>();
      r.feature_shift = jr.at("feature_shift").get<double>();
      r.domain_gap = jr.at("domain_gap").get<double>();
      for (const auto& jm : jr.at("models")) {
        ModelResult m;
        m.variant = parse_variant(jm.at("variant").get<std::string>());
        m.metrics.clean = jm.at("clean").get<double>();
        m.metrics.adversarial = jm.at("adversarial").get<double>();
        if (!jm.at("decline_rate").is_null()) m.decline_rate = jm.at("decline_rate").get<double>();
        if (jm.contains("decline_note")) m.decline_note = jm.at("decline_note").get<std::string>();
        r.models.push_back(std::move(m));
      }
      t.rows.push_back(std::move(r));
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed report: ") + e.what());
  }
}

std::string to_csv(const ReportTable& table) {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "row,model,clean,adversarial,degradation,decline_rate,feature_shift,domain_gap,seed\n";
  for (const auto& r : table.rows) {
    for (const auto& m : r.models) {
      out << to_string(r.row) << ',' << to_string(m.variant) << ',' << m.metrics.clean << ','
          << m.metrics.adversarial << ',' << m.metrics.degradation() << ',';
      if (m.decline_rate) out << *m.decline_rate;
      out << ',' << r.feature_shift << ',' << r.domain_gap << ',' << r.seed << '\n';
    }
  }
  return out.str();
}

}  // namespace vesca
