#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "vesca/errors.hpp"
#include "vesca/geometry.hpp"
#include "vesca/io.hpp"
#include "vesca/pipeline.hpp"

namespace vesca {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kGradStream = 0x6C;
constexpr std::uint64_t kVolStream = 0x70;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::size_t jobs = 1;
  std::string out;
  bool ablation = false;
  std::size_t cases = 0;
  bool corrupt = false;
};

std::vector<Tensor> random_simplex(std::size_t m, std::size_t dim, Rng& rng) {
  std::vector<Tensor> v;
  for (std::size_t i = 0; i < m; ++i) {
    Tensor t({dim});
    for (double& x : t.values()) x = rng.uniform(-1.0, 1.0);
    v.push_back(std::move(t));
  }
  return v;
}

double rel_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

int gradcheck(const Options& o, std::ostream& out) {
  const std::size_t cases = o.cases ? o.cases : 10;
  const Rng root(o.seed.value_or(0));
  constexpr LossKind kinds[] = {LossKind::l1, LossKind::l2, LossKind::neg_l1};
  bool ok = true;
  out << std::setprecision(3);
  for (std::size_t c = 0; c < cases; ++c) {
    Rng rng = root.derive({kGradStream, 0, c});
    Network net = Network::seeded(EncoderSpec{}, rng);
    net.inject_backward_fault(o.corrupt);
    Tensor image(EncoderSpec{}.image_shape());
    for (double& x : image.values()) x = rng.uniform();
    GradCheckOptions go;
    go.kind = kinds[c % 3];
    go.seed = rng.next_u64();
    const GradCheckReport r = grad_check(net, image, 1e-3, go);
    ok = ok && r.passed;
    out << "encoder case " << c << " loss=" << to_string(go.kind)
        << " max_rel=" << r.max_rel_error << (r.passed ? " PASS" : " FAIL") << '\n';
    for (const auto& p : r.pixels) {
      if (!p.pass) {
        out << "  pixel " << p.index << ": analytic " << p.analytic << " numeric " << p.numeric
            << " rel " << p.rel_error << '\n';
      }
    }
  }
  for (std::size_t c = 0; c < cases; ++c) {
    Rng rng = root.derive({kGradStream, 1, c});
    const std::size_t m = 3 + rng.uniform_index(3);
    const std::size_t dim = m - 1 + rng.uniform_index(17 - m + 1);
    std::vector<Tensor> v = random_simplex(m, dim, rng);
    const std::size_t f = rng.uniform_index(m);
    const Tensor g = log_volume_grad(v, f);
    double worst = 0.0;
    constexpr double h = 1e-6;
    for (std::size_t i = 0; i < dim; ++i) {
      const double x0 = v[f][i];
      v[f][i] = x0 + h;
      const double up = std::log(cm_volume(v).volume);
      v[f][i] = x0 - h;
      const double down = std::log(cm_volume(v).volume);
      v[f][i] = x0;
      worst = std::max(worst, rel_error(g[i], (up - down) / (2 * h), 1e-6));
    }
    const bool pass = worst <= 1e-4;
    ok = ok && pass;
    out << "log-volume case " << c << " M=" << m << " dim=" << dim << " max_rel=" << worst
        << (pass ? " PASS" : " FAIL") << '\n';
  }
  out << (ok ? "gradcheck: all cases passed\n" : "gradcheck: FAILED\n");
  return ok ? 0 : 1;
}

int volcheck(const Options& o, std::ostream& out) {
  const std::size_t cases = o.cases ? o.cases : 100;
  const Rng root(o.seed.value_or(0));
  bool ok = true;
  std::size_t failures = 0;
  double worst = 0.0;
  out << std::setprecision(3);
  for (std::size_t c = 0; c < cases; ++c) {
    Rng rng = root.derive({kVolStream, c});
    const std::size_t m = 3 + rng.uniform_index(3);
    const std::size_t dim = m - 1 + rng.uniform_index(17 - m + 1);
    const auto v = random_simplex(m, dim, rng);
    const double cm = cm_volume(v).volume, gram = gram_volume(v);
    const double rel = rel_error(cm, gram, 1e-300);
    worst = std::max(worst, rel);
    if (rel > 1e-8) {
      ok = false;
      ++failures;
      out << "case " << c << " M=" << m << " dim=" << dim << ": cayley-menger " << cm
          << " gram " << gram << " rel " << rel << " FAIL\n";
    }
  }
  out << cases - failures << "/" << cases << " random simplices agree (max rel " << worst
      << ")\n";
  const std::vector<Tensor> right{Tensor({2}, {0.0, 0.0}), Tensor({2}, {1.0, 0.0}),
                                  Tensor({2}, {0.0, 1.0})};
  const double rv = cm_volume(right).volume;
  const bool right_ok = std::abs(rv - 0.5) <= 1e-12;
  out << "unit right triangle: " << std::setprecision(17) << rv
      << (right_ok ? " PASS" : " FAIL") << '\n';
  const std::vector<Tensor> line{Tensor({2}, {0.0, 0.0}), Tensor({2}, {1.0, 1.0}),
                                 Tensor({2}, {2.0, 2.0})};
  const double lv = cm_volume(line).volume;
  const bool line_ok = lv == 0.0;
  out << "collinear points: " << lv << (line_ok ? " PASS" : " FAIL") << '\n';
  ok = ok && right_ok && line_ok;
  out << (ok ? "volcheck: all cases passed\n" : "volcheck: FAILED\n");
  return ok ? 0 : 1;
}

int report(const RunConfig& c, std::ostream& out) {
  const fs::path path = c.report_path() / "report.json";
  if (!fs::exists(path)) throw IoError("no report at " + path.string() + "; run evaluate first");
  const Bytes b = read_bytes(path);
  const ReportTable t = report_from_json(nlohmann::json::parse(b.begin(), b.end()));
  out << "schema_version " << t.schema_version << ", seed " << t.seed << '\n';
  out << std::left << std::setw(8) << "row" << std::setw(9) << "model" << std::right
      << std::setw(9) << "clean" << std::setw(9) << "adv" << std::setw(9) << "degr"
      << std::setw(10) << "decline%" << std::setw(10) << "shift" << std::setw(10) << "mmd2"
      << '\n';
  out << std::fixed;
  for (const auto& r : t.rows) {
    for (const auto& m : r.models) {
      out << std::left << std::setw(8) << to_string(r.row) << std::setw(9)
          << to_string(m.variant) << std::right << std::setprecision(4) << std::setw(9)
          << m.metrics.clean << std::setw(9) << m.metrics.adversarial << std::setw(9)
          << m.metrics.degradation();
      if (m.decline_rate) {
        out << std::setprecision(2) << std::setw(10) << *m.decline_rate;
      } else {
        out << std::setw(10) << "-";
      }
      out << std::setprecision(4) << std::setw(10) << r.feature_shift << std::setw(10)
          << r.domain_gap << '\n';
    }
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Transferable adversarial attacks with adversarial simplicial complexes", "vesca"};
  app.require_subcommand(1);
  Options o;
  auto add_common = [&](CLI::App* sub, bool config, bool jobs) {
    if (config) sub->add_option("--config", o.config, "JSON run configuration");
    sub->add_option("--seed", o.seed, "Override the configured seed");
    if (jobs) sub->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
    if (config) sub->add_option("--out", o.out, "Override the output directory");
  };
  CLI::App* synth = app.add_subcommand("synth", "Generate the dataset and train the models");
  add_common(synth, true, true);
  CLI::App* attack = app.add_subcommand("attack", "Build adversarial complexes for test images");
  add_common(attack, true, true);
  CLI::App* evaluate = app.add_subcommand("evaluate", "Measure transfer to downstream models");
  add_common(evaluate, true, true);
  evaluate->add_flag("--ablation", o.ablation, "Add the baseline and ablation rows");
  CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  add_common(grad, false, false);
  grad->add_option("--cases", o.cases, "Number of cases per suite (default 10)");
  grad->add_flag("--corrupt", o.corrupt, "Break the attention backward pass (negative control)");
  CLI::App* vol = app.add_subcommand("volcheck", "Simplex volume checks against a Gram oracle");
  add_common(vol, false, false);
  vol->add_option("--cases", o.cases, "Number of random simplices (default 100)");
  CLI::App* rep = app.add_subcommand("report", "Print a stored transfer report");
  add_common(rep, true, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (grad->parsed()) return gradcheck(o, out);
    if (vol->parsed()) return volcheck(o, out);

    if (o.config.empty()) {
      CLI::App* used = app.get_subcommands().front();
      err << "error: --config is required\n\n" << used->help();
      return 2;
    }
    RunConfig c = load_run_config(o.config);
    if (o.seed) c.seed = *o.seed;
    if (!o.out.empty()) c.out_dir = o.out;
    RunContext ctx;
    ctx.jobs = o.jobs;
    ctx.log = log_level_from_env();
    ctx.log_stream = &err;

    if (synth->parsed()) {
      run_synth(c, ctx);
    } else if (attack->parsed()) {
      run_attack(c, ctx);
    } else if (evaluate->parsed()) {
      run_evaluate(c, ctx, o.ablation);
      out << "report written to " << c.report_path().string() << '\n';
    } else {
      return report(c, out);
    }
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace vesca
