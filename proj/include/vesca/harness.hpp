#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vesca/attack.hpp"
#include "vesca/encoder.hpp"
#include "vesca/geometry.hpp"
#include "vesca/rng.hpp"
#include "vesca/tensor.hpp"

namespace vesca {

inline constexpr int kReportSchemaVersion = 1;
inline constexpr const char* kDeclineProtocol = "fig4-protocol-reconstructed";

// Mean patch accuracy of one model on clean and adversarial inputs.
struct MetricPair {
  double clean = 0.0;
  double adversarial = 0.0;
  double degradation() const { return clean - adversarial; }
};

// adv[i] is evaluated against labels[i]; clean[i] is its unperturbed source.
MetricPair evaluate_transfer(std::span<const Tensor> adv, std::span<const Tensor> clean,
                             std::span<const std::vector<int>> labels,
                             const DownstreamModel& model, std::size_t jobs = 1);

// Mean l2 distance between encoder embeddings of aligned pairs.
double feature_shift(std::span<const Tensor> adv, std::span<const Tensor> clean,
                     const Network& encoder, std::size_t jobs = 1);

// Unbiased RBF MMD^2 (median bandwidth) between embeddings of the two sets.
double domain_gap(std::span<const Tensor> adv, std::span<const Tensor> references,
                  const Network& encoder, std::size_t jobs = 1);

// Relative gap, in percent, between the degradation of per-simplex centroid
// samples and of `num_samples` random interior samples per simplex, pooled
// over all complexes. labels[i] belongs to complexes[i]. Complexes made only
// of single-vertex simplices have no interior and give exactly 0. Throws
// UndefinedRateError when the centroid degradation is zero.
double decline_rate(std::span<const SimplicialComplex> complexes,
                    std::span<const std::vector<int>> labels, const DownstreamModel& model,
                    Rng& rng, std::size_t num_samples = 5, std::size_t jobs = 1);

// Rows of the ablation table.
enum class RowKind : std::uint8_t { vesca, no_dra, no_par, mim, noise };
inline constexpr RowKind kAllRows[] = {RowKind::vesca, RowKind::no_dra, RowKind::no_par,
                                       RowKind::mim, RowKind::noise};
std::string to_string(RowKind r);
RowKind parse_row_kind(const std::string& s);

// Attack config used by a complex-building row (vesca, no_dra, no_par).
AttackConfig row_config(RowKind row, const AttackConfig& base);

// Per-image random stream shared by every row, so rows are paired.
Rng image_stream(const Rng& root, std::size_t image_index);

struct RowArtifacts {
  std::vector<SimplicialComplex> complexes;   // empty for mim and noise
  std::vector<std::vector<Tensor>> samples;   // per image
  std::vector<std::vector<TraceRecord>> traces;
  std::vector<std::vector<std::string>> warnings;
};

// Produces the adversarial images of one row for every clean image.
// Complex rows draw `samples_per_image` points from each complex; mim yields
// its single point; noise draws `samples_per_image` sign-noise images of
// radius epsilon.
RowArtifacts attack_images(RowKind row, const Network& encoder, std::span<const Tensor> clean,
                           const Embedding& reference_mean, const AttackConfig& cfg,
                           const Rng& root, std::size_t samples_per_image,
                           std::size_t jobs = 1);

struct ModelResult {
  Variant variant = Variant::frozen;
  MetricPair metrics;
  std::optional<double> decline_rate;  // absent when undefined or not applicable
  std::string decline_note;            // reason when absent
};

struct TransferReport {
  RowKind row = RowKind::vesca;
  std::vector<ModelResult> models;
  double feature_shift = 0.0;
  double domain_gap = 0.0;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;  // timing side channel, not serialized

  double mean_degradation() const;
  const ModelResult& model(Variant v) const;
};

struct EvalContext {
  const Network* encoder = nullptr;
  std::span<const DownstreamModel> models;
  std::span<const Tensor> clean;
  std::span<const std::vector<int>> labels;
  std::span<const Tensor> references;
  std::uint64_t seed = 0;
  std::size_t decline_samples = 5;
  std::size_t jobs = 1;
};

// Measures one row. Every adversarial image is re-checked against the
// epsilon ball of its clean image before evaluation.
TransferReport evaluate_row(RowKind row, const RowArtifacts& artifacts, const EvalContext& ctx,
                            double epsilon);

// Builds and evaluates every row.
std::vector<TransferReport> run_ablation(const EvalContext& ctx, const AttackConfig& cfg,
                                         const Embedding& reference_mean,
                                         std::size_t samples_per_image = 1);

struct ReportTable {
  int schema_version = kReportSchemaVersion;
  std::string decline_protocol = kDeclineProtocol;
  nlohmann::json config = nlohmann::json::object();
  std::uint64_t seed = 0;
  Embedding reference_mean;
  std::vector<TransferReport> rows;

  const TransferReport& row(RowKind r) const;
};

nlohmann::json to_json(const ReportTable& table);
ReportTable report_from_json(const nlohmann::json& j);
// One line per (row, model) pair after a header line.
std::string to_csv(const ReportTable& table);

}  // namespace vesca
