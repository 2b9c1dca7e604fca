#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vesca/attack.hpp"
#include "vesca/dataset.hpp"
#include "vesca/harness.hpp"

namespace vesca {

// Everything a run depends on besides the worker count. JSON keys mirror the
// field names; AttackConfig fields sit at the top level next to the rest.
struct RunConfig {
  AttackConfig attack;
  SynthParams synth;
  std::size_t reference_size = 40;
  std::uint64_t seed = 0;
  std::filesystem::path out_dir = "vesca_out";
  std::optional<std::filesystem::path> data_dir;    // default: out_dir / "data"
  std::optional<std::filesystem::path> checkpoint;  // default: surrogate under data_dir
  std::size_t pretrain_epochs = 20;
  std::size_t downstream_epochs = 20;
  std::size_t batch_size = 2;
  double learning_rate = 0.05;
  std::size_t samples_per_image = 1;
  std::size_t decline_samples = 5;

  std::filesystem::path data_path() const;
  std::filesystem::path models_path() const;
  std::filesystem::path checkpoint_path() const;
  std::filesystem::path attack_path() const;
  std::filesystem::path report_path() const;

  // Throws ConfigError.
  void validate() const;
};

// Unknown keys and ill-typed values raise ConfigError.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

enum class LogLevel : std::uint8_t { off, info, debug };
// Reads VESCA_LOG (off | info | debug); unset or unknown means off.
LogLevel log_level_from_env();

struct RunContext {
  std::size_t jobs = 1;
  LogLevel log = LogLevel::off;
  std::ostream* log_stream = nullptr;  // defaults to std::cerr
};

// On-disk dataset: `manifest.json` plus one image file per entry. Images may
// be raw tensors or PPM files.
void save_dataset(const std::filesystem::path& dir, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& dir);

// Indices of the reference subset drawn from the source pool.
std::vector<std::size_t> reference_indices(const RunConfig& c, std::size_t pool_size);

// synth: dataset, pretrained surrogate encoder and the three downstream
// models under data_dir.
void run_synth(const RunConfig& c, const RunContext& ctx);
// attack: one complex, the sampled adversarial images and the trace per
// target test image under out_dir/attack.
void run_attack(const RunConfig& c, const RunContext& ctx);
// evaluate: transfer report under out_dir/report. With `ablation` every
// baseline row is added; otherwise only the VeSCA row is measured.
ReportTable run_evaluate(const RunConfig& c, const RunContext& ctx, bool ablation);

// Entry point of the command-line tool. Returns the process exit code:
// 0 success, 1 failure, 2 usage error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace vesca
