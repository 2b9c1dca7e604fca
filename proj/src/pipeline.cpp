#include "vesca/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

#include "vesca/errors.hpp"
#include "vesca/io.hpp"
#include "vesca/parallel.hpp"

namespace vesca {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;
constexpr std::uint64_t kSynthStream = 0xD5;
constexpr std::uint64_t kSurrogateStream = 0x5E;
constexpr std::uint64_t kDownstreamStream = 0xD0;
constexpr std::uint64_t kReferenceStream = 0x2EF;

std::string indexed(const char* prefix, std::size_t i, const char* ext) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s%04zu%s", prefix, i, ext);
  return buf;
}

std::string adv_name(std::size_t image, std::size_t sample) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "adv_%04zu_%02zu.vtns", image, sample);
  return buf;
}

class Log {
 public:
  explicit Log(const RunContext& ctx)
      : level_(ctx.log), os_(ctx.log_stream ? *ctx.log_stream : std::cerr) {}
  bool debug_on() const { return level_ == LogLevel::debug; }
  void info(const std::string& msg) const {
    if (level_ != LogLevel::off) os_ << "[vesca] " << msg << '\n';
  }
  void debug(const std::string& msg) const {
    if (level_ == LogLevel::debug) os_ << "[vesca:debug] " << msg << '\n';
  }

 private:
  LogLevel level_;
  std::ostream& os_;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  std::string str() const {
    std::ostringstream s;
    s.precision(3);
    s << std::fixed << seconds() << " s";
    return s.str();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

json read_json(const fs::path& path) {
  const Bytes b = read_bytes(path);
  try {
    return json::parse(b.begin(), b.end());
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), e.byte);
  }
}

// Config without filesystem locations, so snapshots do not depend on where a
// run writes its files.
json config_snapshot(const RunConfig& c) {
  json j = to_json(c);
  j.erase("out_dir");
  j.erase("data_dir");
  j.erase("checkpoint");
  return j;
}

json trace_json(std::size_t image, const TraceRecord& t) {
  return {{"image", image},        {"stage", t.stage},   {"simplex", t.simplex},
          {"vertex", t.vertex},    {"iteration", t.iteration}, {"loss", t.loss},
          {"volume", t.volume},    {"lambda", t.lambda}, {"degenerate", t.degenerate}};
}

TrainOptions train_options(const RunConfig& c, std::size_t epochs) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = c.batch_size;
  o.learning_rate = c.learning_rate;
  return o;
}

std::string variant_file(Variant v) { return to_string(v) + ".vsck"; }

struct Loaded {
  Dataset data;
  Network encoder;
  std::vector<DownstreamModel> models;
  std::vector<Tensor> references;
  std::vector<std::size_t> reference_ids;
};

void require_files(const std::vector<fs::path>& paths, const char* stage) {
  std::string missing;
  for (const auto& p : paths) {
    if (!fs::exists(p)) missing += "\n  " + p.string();
  }
  if (!missing.empty()) {
    throw IoError(std::string(stage) + ": missing required files (run the earlier stages first):" +
                  missing);
  }
}

Loaded load_inputs(const RunConfig& c, bool with_models) {
  std::vector<fs::path> need{c.data_path() / "manifest.json", c.checkpoint_path()};
  if (with_models) {
    for (Variant v : kAllVariants) need.push_back(c.models_path() / variant_file(v));
  }
  require_files(need, "inputs");
  Loaded in;
  in.data = load_dataset(c.data_path());
  in.encoder = strip_to_encoder(load_checkpoint(c.checkpoint_path()).net);
  if (in.encoder.spec().image_shape() != in.data.test.images.front().shape()) {
    throw ConfigError("checkpoint image shape does not match the dataset");
  }
  if (with_models) {
    for (Variant v : kAllVariants) {
      Checkpoint ck = load_checkpoint(c.models_path() / variant_file(v));
      if (ck.variant != v) {
        throw ParseError(variant_file(v) + ": checkpoint holds a different variant", 0);
      }
      in.models.push_back({v, std::move(ck.net)});
    }
  }
  in.reference_ids = reference_indices(c, in.data.source.images.size());
  for (std::size_t i : in.reference_ids) in.references.push_back(in.data.source.images[i]);
  return in;
}

// Target images to attack: the first num_test of the stored test split.
std::span<const Tensor> targets(const RunConfig& c, const Dataset& d) {
  if (d.test.images.size() < c.synth.num_test) {
    throw ConfigError("dataset has " + std::to_string(d.test.images.size()) +
                      " test images, config asks for " + std::to_string(c.synth.num_test));
  }
  return std::span<const Tensor>(d.test.images).first(c.synth.num_test);
}

}  // namespace

fs::path RunConfig::data_path() const { return data_dir ? *data_dir : out_dir / "data"; }
fs::path RunConfig::models_path() const { return data_path() / "models"; }
fs::path RunConfig::checkpoint_path() const {
  return checkpoint ? *checkpoint : models_path() / "surrogate.vsck";
}
fs::path RunConfig::attack_path() const { return out_dir / "attack"; }
fs::path RunConfig::report_path() const { return out_dir / "report"; }

void RunConfig::validate() const {
  attack.validate(synth.image_side);
  if (synth.image_side != EncoderSpec{}.image_side || synth.patch_side != EncoderSpec{}.patch_side) {
    throw ConfigError("image_side and patch_side must match the built-in encoder (32 and 4)");
  }
  if (reference_size < 2) throw ConfigError("reference_size must be at least 2");
  if (synth.num_source < reference_size) {
    throw ConfigError("num_source must be at least reference_size");
  }
  if (synth.num_train == 0 || synth.num_test == 0) {
    throw ConfigError("num_train and num_test must be positive");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (samples_per_image == 0) throw ConfigError("samples_per_image must be positive");
  if (decline_samples == 0) throw ConfigError("decline_samples must be positive");
}

RunConfig parse_run_config(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  auto count = [](const json& v, const std::string& k) -> std::size_t {
    // Non-negative literals built in code are stored as signed integers.
    if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<std::int64_t>() < 0)) {
      throw ConfigError("'" + k + "' must be a non-negative integer");
    }
    return v.get<std::size_t>();
  };
  auto real = [](const json& v, const std::string& k) {
    if (!v.is_number()) throw ConfigError("'" + k + "' must be a number");
    return v.get<double>();
  };
  auto text = [](const json& v, const std::string& k) {
    if (!v.is_string()) throw ConfigError("'" + k + "' must be a string");
    return v.get<std::string>();
  };
  using Setter = std::function<void(const json&, const std::string&)>;
  const std::map<std::string, Setter> setters{
      {"epsilon", [&](const json& v, const std::string& k) { c.attack.epsilon = real(v, k); }},
      {"step_size",
       [&](const json& v, const std::string& k) {
         if (v.is_null()) {
           c.attack.step_size.reset();
         } else {
           c.attack.step_size = real(v, k);
         }
       }},
      {"momentum", [&](const json& v, const std::string& k) { c.attack.momentum = real(v, k); }},
      {"iterations", [&](const json& v, const std::string& k) { c.attack.iterations = count(v, k); }},
      {"init_iterations",
       [&](const json& v, const std::string& k) { c.attack.init_iterations = count(v, k); }},
      {"num_simplices",
       [&](const json& v, const std::string& k) { c.attack.num_simplices = count(v, k); }},
      {"num_vertices",
       [&](const json& v, const std::string& k) { c.attack.num_vertices = count(v, k); }},
      {"mc_samples", [&](const json& v, const std::string& k) { c.attack.mc_samples = count(v, k); }},
      {"lambda_star", [&](const json& v, const std::string& k) { c.attack.lambda_star = real(v, k); }},
      {"ns", [&](const json& v, const std::string& k) { c.attack.ns = count(v, k); }},
      {"loss",
       [&](const json& v, const std::string& k) {
         try {
           c.attack.loss = parse_loss_kind(text(v, k));
         } catch (const ParameterError& e) {
           throw ConfigError(e.what());
         }
       }},
      {"use_dra",
       [&](const json& v, const std::string& k) {
         if (!v.is_boolean()) throw ConfigError("'" + k + "' must be a boolean");
         c.attack.use_dra = v.get<bool>();
       }},
      {"augmentation",
       [&](const json& v, const std::string& k) {
         try {
           c.attack.augmentation = parse_seed_augmentation(text(v, k));
         } catch (const ParameterError& e) {
           throw ConfigError(e.what());
         }
       }},
      {"image_side", [&](const json& v, const std::string& k) { c.synth.image_side = count(v, k); }},
      {"patch_side", [&](const json& v, const std::string& k) { c.synth.patch_side = count(v, k); }},
      {"num_source", [&](const json& v, const std::string& k) { c.synth.num_source = count(v, k); }},
      {"num_train", [&](const json& v, const std::string& k) { c.synth.num_train = count(v, k); }},
      {"num_test", [&](const json& v, const std::string& k) { c.synth.num_test = count(v, k); }},
      {"reference_size",
       [&](const json& v, const std::string& k) { c.reference_size = count(v, k); }},
      {"seed",
       [&](const json& v, const std::string& k) { c.seed = static_cast<std::uint64_t>(count(v, k)); }},
      {"out_dir", [&](const json& v, const std::string& k) { c.out_dir = text(v, k); }},
      {"data_dir", [&](const json& v, const std::string& k) { c.data_dir = text(v, k); }},
      {"checkpoint", [&](const json& v, const std::string& k) { c.checkpoint = text(v, k); }},
      {"pretrain_epochs",
       [&](const json& v, const std::string& k) { c.pretrain_epochs = count(v, k); }},
      {"downstream_epochs",
       [&](const json& v, const std::string& k) { c.downstream_epochs = count(v, k); }},
      {"batch_size", [&](const json& v, const std::string& k) { c.batch_size = count(v, k); }},
      {"learning_rate", [&](const json& v, const std::string& k) { c.learning_rate = real(v, k); }},
      {"samples_per_image",
       [&](const json& v, const std::string& k) { c.samples_per_image = count(v, k); }},
      {"decline_samples",
       [&](const json& v, const std::string& k) { c.decline_samples = count(v, k); }},
  };
  for (const auto& [key, value] : j.items()) {
    const auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(value, key);
  }
  // The PAR grid defaults to one cell per encoder patch.
  if (!j.contains("ns")) c.attack.ns = c.synth.image_side / std::max<std::size_t>(1, c.synth.patch_side);
  c.validate();
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file '" + path.string() + "' not found");
  json j;
  try {
    j = read_json(path);
  } catch (const ParseError& e) {
    throw ConfigError(e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  const AttackConfig& a = c.attack;
  json j = {{"epsilon", a.epsilon},
            {"step_size", a.step_size ? json(*a.step_size) : json(nullptr)},
            {"momentum", a.momentum},
            {"iterations", a.iterations},
            {"init_iterations", a.init_iterations},
            {"num_simplices", a.num_simplices},
            {"num_vertices", a.num_vertices},
            {"mc_samples", a.mc_samples},
            {"lambda_star", a.lambda_star},
            {"ns", a.ns},
            {"loss", to_string(a.loss)},
            {"use_dra", a.use_dra},
            {"augmentation", to_string(a.augmentation)},
            {"image_side", c.synth.image_side},
            {"patch_side", c.synth.patch_side},
            {"num_source", c.synth.num_source},
            {"num_train", c.synth.num_train},
            {"num_test", c.synth.num_test},
            {"reference_size", c.reference_size},
            {"seed", c.seed},
            {"out_dir", c.out_dir.string()},
            {"pretrain_epochs", c.pretrain_epochs},
            {"downstream_epochs", c.downstream_epochs},
            {"batch_size", c.batch_size},
            {"learning_rate", c.learning_rate},
            {"samples_per_image", c.samples_per_image},
            {"decline_samples", c.decline_samples}};
  if (c.data_dir) j["data_dir"] = c.data_dir->string();
  if (c.checkpoint) j["checkpoint"] = c.checkpoint->string();
  return j;
}

LogLevel log_level_from_env() {
  const char* v = std::getenv("VESCA_LOG");
  if (!v) return LogLevel::off;
  const std::string s(v);
  if (s == "info") return LogLevel::info;
  if (s == "debug") return LogLevel::debug;
  return LogLevel::off;
}

void save_dataset(const fs::path& dir, const Dataset& d) {
  json splits = json::object();
  auto put = [&](const char* name, const LabeledImages& li) {
    fs::create_directories(dir / name);
    json entries = json::array();
    for (std::size_t i = 0; i < li.images.size(); ++i) {
      const std::string file = std::string(name) + "/" + indexed("", i, ".vtns");
      save_tensor(dir / file, li.images[i], DType::f32);
      entries.push_back({{"file", file}, {"labels", li.labels[i]}});
    }
    splits[name] = std::move(entries);
  };
  put("source", d.source);
  put("train", d.train);
  put("test", d.test);
  const json m = {{"schema_version", kManifestVersion},
                  {"image_side", d.params.image_side},
                  {"patch_side", d.params.patch_side},
                  {"splits", std::move(splits)}};
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

Dataset load_dataset(const fs::path& dir) {
  const json m = read_json(dir / "manifest.json");
  Dataset d;
  try {
    if (m.at("schema_version").get<int>() != kManifestVersion) {
      throw ConfigError("unsupported dataset manifest version");
    }
    d.params.image_side = m.at("image_side").get<std::size_t>();
    d.params.patch_side = m.at("patch_side").get<std::size_t>();
    if (d.params.patch_side == 0 || d.params.image_side % d.params.patch_side != 0) {
      throw ConfigError("dataset manifest: patch_side must divide image_side");
    }
    const std::size_t grid = d.params.image_side / d.params.patch_side;
    const Shape shape{d.params.image_side, d.params.image_side, 3};
    auto get = [&](const char* name, LabeledImages& li) {
      for (const auto& e : m.at("splits").at(name)) {
        const fs::path file = dir / e.at("file").get<std::string>();
        Tensor img = load_image(file);
        if (img.shape() != shape) {
          throw ShapeError(file.string() + ": image shape " + shape_string(img.shape()) +
                           ", expected " + shape_string(shape));
        }
        auto labels = e.at("labels").get<std::vector<int>>();
        if (labels.size() != grid * grid) {
          throw ShapeError(file.string() + ": label count does not match the patch grid");
        }
        li.images.push_back(std::move(img));
        li.labels.push_back(std::move(labels));
      }
    };
    get("source", d.source);
    get("train", d.train);
    get("test", d.test);
  } catch (const json::exception& e) {
    throw ConfigError("malformed dataset manifest: " + std::string(e.what()));
  }
  d.params.num_source = d.source.images.size();
  d.params.num_train = d.train.images.size();
  d.params.num_test = d.test.images.size();
  if (d.source.images.empty() || d.train.images.empty() || d.test.images.empty()) {
    throw ConfigError("dataset splits must be nonempty");
  }
  return d;
}

std::vector<std::size_t> reference_indices(const RunConfig& c, std::size_t pool_size) {
  if (c.reference_size > pool_size) {
    throw ConfigError("reference_size " + std::to_string(c.reference_size) +
                      " exceeds the source pool (" + std::to_string(pool_size) + ")");
  }
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = Rng(c.seed).derive({kReferenceStream});
  for (std::size_t i = 0; i < c.reference_size; ++i) {
    std::swap(idx[i], idx[i + rng.uniform_index(pool_size - i)]);
  }
  idx.resize(c.reference_size);
  return idx;
}

void run_synth(const RunConfig& c, const RunContext& ctx) {
  const Log log(ctx);
  const Stopwatch total;
  const Rng root(c.seed);
  const Dataset d = synth_dataset(c.synth, root.derive({kSynthStream}));
  fs::create_directories(c.models_path());
  save_dataset(c.data_path(), d);
  log.info("dataset: " + std::to_string(d.source.images.size()) + " source, " +
           std::to_string(d.train.images.size()) + " train, " +
           std::to_string(d.test.images.size()) + " test images");

  // Surrogate: encoder plus a temporary head, trained on the source domain.
  const Stopwatch pre;
  Rng srng = root.derive({kSurrogateStream});
  NetworkOptions opts;
  opts.head_classes = 2;
  Network surrogate = Network::seeded(EncoderSpec{}, srng, opts);
  const bool all[3] = {true, true, true};
  const auto losses = train_network(surrogate, all, d.source,
                                    train_options(c, c.pretrain_epochs), srng);
  const Network encoder = strip_to_encoder(surrogate);
  save_checkpoint(c.models_path() / "surrogate.vsck", encoder);
  log.info("surrogate pretrained in " + pre.str() +
           (losses.empty() ? std::string() : ", final loss " + std::to_string(losses.back())));

  std::vector<TrainResult> results(std::size(kAllVariants));
  parallel_for(results.size(), ctx.jobs, [&](std::size_t i) {
    const Variant v = kAllVariants[i];
    Rng vrng = root.derive({kDownstreamStream, i});
    results[i] = make_downstream(encoder, v, d.train, train_options(c, c.downstream_epochs), vrng);
  });
  for (const auto& r : results) {
    save_checkpoint(c.models_path() / variant_file(r.model.variant), r.model.net, r.model.variant);
    log.info(to_string(r.model.variant) + " model trained" +
             (r.epoch_losses.empty() ? std::string()
                                     : ", final loss " + std::to_string(r.epoch_losses.back())));
  }
  log.info("synth done in " + total.str());
}

void run_attack(const RunConfig& c, const RunContext& ctx) {
  const Log log(ctx);
  const Stopwatch total;
  const Loaded in = load_inputs(c, false);
  const auto clean = targets(c, in.data);
  const Embedding ref_mean = mean_reference_embedding(in.encoder, in.references);

  const RowArtifacts a = attack_images(RowKind::vesca, in.encoder, clean, ref_mean, c.attack,
                                       Rng(c.seed), c.samples_per_image, ctx.jobs);
  log.info("attacked " + std::to_string(clean.size()) + " images in " + total.str());

  const fs::path dir = c.attack_path();
  fs::create_directories(dir);
  std::string trace;
  json warnings = json::array();
  for (std::size_t i = 0; i < clean.size(); ++i) {
    save_complex(dir / indexed("complex_", i, ".vscx"), a.complexes[i]);
    for (std::size_t s = 0; s < a.samples[i].size(); ++s) {
      save_tensor(dir / adv_name(i, s), a.samples[i][s], DType::f64);
    }
    for (const auto& t : a.traces[i]) {
      const json line = trace_json(i, t);
      trace += line.dump() + "\n";
      if (log.debug_on()) log.debug(line.dump());
    }
    for (const auto& w : a.warnings[i]) {
      warnings.push_back("image " + std::to_string(i) + ": " + w);
      log.info("warning: image " + std::to_string(i) + ": " + w);
    }
  }
  write_text(dir / "trace.jsonl", trace);
  const json manifest = {{"schema_version", kManifestVersion},
                         {"config", config_snapshot(c)},
                         {"images", clean.size()},
                         {"samples_per_image", c.samples_per_image},
                         {"reference_indices", in.reference_ids},
                         {"reference_mean", ref_mean},
                         {"warnings", warnings}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  log.info("attack artifacts written to " + dir.string() + " (" + total.str() + ")");
}

ReportTable run_evaluate(const RunConfig& c, const RunContext& ctx, bool ablation) {
  const Log log(ctx);
  const Stopwatch total;
  const fs::path dir = c.attack_path();
  require_files({dir / "manifest.json"}, "evaluate");
  const json manifest = read_json(dir / "manifest.json");
  json expected = config_snapshot(c), recorded = manifest.at("config");
  expected.erase("decline_samples");
  recorded.erase("decline_samples");
  if (expected != recorded) {
    throw ConfigError("attack artifacts in " + dir.string() +
                      " were produced with a different config; rerun attack");
  }
  const std::size_t n = c.synth.num_test;
  std::vector<fs::path> need;
  for (std::size_t i = 0; i < n; ++i) {
    need.push_back(dir / indexed("complex_", i, ".vscx"));
    for (std::size_t s = 0; s < c.samples_per_image; ++s) need.push_back(dir / adv_name(i, s));
  }
  require_files(need, "evaluate");

  const Loaded in = load_inputs(c, true);
  const auto clean = targets(c, in.data);
  const auto labels = std::span<const std::vector<int>>(in.data.test.labels).first(n);
  const Embedding ref_mean = mean_reference_embedding(in.encoder, in.references);

  RowArtifacts vesca;
  for (std::size_t i = 0; i < n; ++i) {
    vesca.complexes.push_back(load_complex(dir / indexed("complex_", i, ".vscx")));
    if (vesca.complexes.back().simplices.front().base_image != clean[i]) {
      throw ConfigError("complex " + std::to_string(i) + " was built for a different image");
    }
    std::vector<Tensor> samples;
    for (std::size_t s = 0; s < c.samples_per_image; ++s) {
      samples.push_back(load_tensor(dir / adv_name(i, s)));
    }
    vesca.samples.push_back(std::move(samples));
  }

  EvalContext ectx;
  ectx.encoder = &in.encoder;
  ectx.models = in.models;
  ectx.clean = clean;
  ectx.labels = labels;
  ectx.references = in.references;
  ectx.seed = c.seed;
  ectx.decline_samples = c.decline_samples;
  ectx.jobs = ctx.jobs;

  ReportTable table;
  table.config = config_snapshot(c);
  table.seed = c.seed;
  table.reference_mean = ref_mean;
  for (RowKind row : kAllRows) {
    if (row != RowKind::vesca && !ablation) continue;
    const Stopwatch sw;
    TransferReport r;
    if (row == RowKind::vesca) {
      r = evaluate_row(row, vesca, ectx, c.attack.epsilon);
    } else {
      const RowArtifacts a = attack_images(row, in.encoder, clean, ref_mean, c.attack,
                                           Rng(c.seed), c.samples_per_image, ctx.jobs);
      r = evaluate_row(row, a, ectx, c.attack.epsilon);
    }
    r.wall_seconds = sw.seconds();
    std::ostringstream msg;
    msg << "row " << to_string(row) << ": mean degradation " << r.mean_degradation()
        << ", domain gap " << r.domain_gap << " (" << sw.str() << ")";
    log.info(msg.str());
    table.rows.push_back(std::move(r));
  }

  const fs::path out = c.report_path();
  fs::create_directories(out);
  write_text(out / "report.json", to_json(table).dump(2) + "\n");
  write_text(out / "report.csv", to_csv(table));
  log.info("report written to " + out.string() + " (" + total.str() + ")");
  return table;
}

}  // namespace vesca
