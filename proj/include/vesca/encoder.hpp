#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "vesca/rng.hpp"
#include "vesca/tensor.hpp"

namespace vesca {

using Embedding = Vector;

// Desk-scale ViT: patchify -> linear embed + positions -> `num_blocks` x
// (LN -> single-head attention -> residual -> LN -> GELU MLP -> residual)
// -> mean pool over tokens.
struct EncoderSpec {
  std::size_t image_side = 32;
  std::size_t channels = 3;
  std::size_t patch_side = 4;
  std::size_t embed_dim = 32;
  std::size_t num_blocks = 2;
  std::size_t mlp_hidden = 64;

  std::size_t grid() const { return image_side / patch_side; }
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_side * patch_side * channels; }
  Shape image_shape() const { return {image_side, image_side, channels}; }

  // Throws ParameterError on a non-divisible patch size or zero dimensions.
  void validate() const;

  friend bool operator==(const EncoderSpec&, const EncoderSpec&) = default;
};

// Optional parts attached to the encoder trunk.
struct NetworkOptions {
  bool adapters = false;          // residual MLP after every block
  std::size_t adapter_hidden = 8;
  std::size_t head_classes = 0;   // 0 = no per-patch head

  friend bool operator==(const NetworkOptions&, const NetworkOptions&) = default;
};

enum class ParamGroup : std::uint8_t { encoder, adapter, head };

// A named contiguous range inside the flat parameter buffer.
struct ParamSlice {
  std::string name;
  ParamGroup group;
  std::size_t offset;
  std::size_t rows;
  std::size_t cols;
  std::size_t size() const { return rows * cols; }
};

enum class LossKind : std::uint8_t { l1, l2, neg_l1 };

LossKind parse_loss_kind(const std::string& s);
std::string to_string(LossKind k);

// One term of an embedding-space objective: weight * metric(f(x), anchor).
struct LossTerm {
  LossKind kind;
  const Embedding* anchor;
  double weight = 1.0;
};

struct LossGrad {
  double loss = 0.0;
  Tensor grad;
};

// Activations kept from a forward pass for the backward pass.
struct ForwardCache;

// Encoder trunk with optional adapters and segmentation head. Parameters are
// stored once as 32-bit floats (the checkpoint representation) and mirrored
// in 64-bit for computation. All const methods are thread-safe.
class Network {
 public:
  Network() = default;
  Network(EncoderSpec spec, NetworkOptions options = {});

  // Fresh seeded initialization.
  static Network seeded(EncoderSpec spec, Rng& rng, NetworkOptions options = {});

  const EncoderSpec& spec() const noexcept { return spec_; }
  const NetworkOptions& options() const noexcept { return options_; }
  const std::vector<ParamSlice>& layout() const noexcept { return layout_; }
  const ParamSlice& slice(const std::string& name) const;

  std::span<const float> params() const noexcept { return params_; }
  void set_params(std::span<const float> values);
  // Number of leading parameters that belong to the plain encoder trunk.
  std::size_t encoder_param_count() const noexcept { return encoder_params_; }

  Embedding forward(const Tensor& image) const;
  // Final token embeddings, tokens() x embed_dim row-major.
  Vector token_features(const Tensor& image) const;
  // Per-token class logits; requires a head.
  Vector logits(const Tensor& image) const;
  std::vector<int> predict(const Tensor& image) const;

  // Weighted sum of embedding metrics and its exact input gradient.
  LossGrad objective_and_input_grad(const Tensor& image,
                                    std::span<const LossTerm> terms) const;

  // Mean per-token cross-entropy of the head on `labels`. Accumulates the
  // parameter gradient into `param_grad` (sized params().size()); with
  // `head_only` the trunk backward pass is skipped.
  double segmentation_loss_and_grad(const Tensor& image, std::span<const int> labels,
                                    std::span<double> param_grad,
                                    bool head_only = false) const;

  // Test hook: drops the softmax Jacobian in the attention backward pass.
  void inject_backward_fault(bool on) noexcept { fault_ = on; }

 private:
  void build_layout();
  void check_image(const Tensor& image) const;
  std::size_t final_norm_slot() const noexcept;
  void run_forward(const Tensor& image, ForwardCache& cache) const;
  // Backpropagates d(loss)/d(final tokens). Returns the pixel gradient when
  // `want_input` is set; accumulates parameter gradients when given.
  Tensor run_backward(const ForwardCache& cache, std::vector<double> d_tokens,
                      bool want_input, std::span<double> param_grad) const;
  const double* w(std::size_t slice_index) const {
    return weights_.data() + layout_[slice_index].offset;
  }

  EncoderSpec spec_;
  NetworkOptions options_;
  std::vector<ParamSlice> layout_;
  std::size_t encoder_params_ = 0;
  std::vector<float> params_;
  std::vector<double> weights_;
  std::vector<double> weights_t_;  // each slice transposed, same offsets
  bool fault_ = false;
};

double embedding_loss(LossKind kind, std::span<const double> e,
                      std::span<const double> anchor);

// loss = metric(f(image), anchor); grad is d loss / d pixels.
LossGrad loss_and_input_grad(const Network& net, const Tensor& image,
                             const Embedding& anchor, LossKind kind);

Embedding mean_reference_embedding(const Network& net,
                                   std::span<const Tensor> references);

struct PixelCheck {
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
  bool pass;
};

struct GradCheckReport {
  std::vector<PixelCheck> pixels;
  double max_rel_error = 0.0;
  bool passed = true;
};

struct GradCheckOptions {
  std::size_t num_pixels = 20;
  double step = 1e-4;
  LossKind kind = LossKind::l1;
  std::uint64_t seed = 0;
};

// Compares the analytic input gradient with central differences at randomly
// chosen pixels, against a seeded random anchor. Relative error is
// |a - n| / max(|a|, |n|, 1e-6).
GradCheckReport grad_check(const Network& net, const Tensor& image, double tolerance,
                           GradCheckOptions options = {});

enum class Variant : std::uint8_t { frozen, adapter, full };

Variant parse_variant(const std::string& s);
std::string to_string(Variant v);
inline constexpr Variant kAllVariants[] = {Variant::frozen, Variant::adapter,
                                           Variant::full};

struct DownstreamModel {
  Variant variant = Variant::frozen;
  Network net;
};

struct LabeledImages {
  std::vector<Tensor> images;
  std::vector<std::vector<int>> labels;  // one label per token
};

struct TrainOptions {
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  double learning_rate = 0.1;
  std::size_t head_classes = 2;
  std::size_t adapter_hidden = 8;
};

struct TrainResult {
  DownstreamModel model;
  std::vector<double> epoch_losses;  // mean training loss per epoch
};

// Attaches a head (and adapters for Variant::adapter) to a copy of the
// surrogate and trains the variant's parameter groups with seeded
// mini-batch gradient descent.
TrainResult make_downstream(const Network& surrogate, Variant mode,
                            const LabeledImages& train, const TrainOptions& options,
                            Rng& rng);

// Trains every parameter of `net` in place on `train`. Used for both
// downstream fine-tuning and surrogate pretraining.
std::vector<double> train_network(Network& net, std::span<const bool> trainable_groups,
                                  const LabeledImages& train,
                                  const TrainOptions& options, Rng& rng);

// Encoder trunk of `net` without adapters or head.
Network strip_to_encoder(const Network& net);

// Fraction of tokens whose argmax matches the label.
double patch_accuracy(const Network& net, const Tensor& image, std::span<const int> labels);

}  // namespace vesca
