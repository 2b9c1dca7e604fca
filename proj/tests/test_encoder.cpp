#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "test_support.hpp"
#include "vesca/dataset.hpp"
#include "vesca/encoder.hpp"
#include "vesca/errors.hpp"

namespace vesca {
namespace {

using testing::random_tensor;

Network seeded_net(std::uint64_t seed, NetworkOptions opts = {}) {
  Rng rng(seed);
  return Network::seeded(EncoderSpec{}, rng, opts);
}

Tensor random_image(std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor(EncoderSpec{}.image_shape(), rng);
}

void set_slice(std::vector<float>& p, const ParamSlice& s, std::span<const double> values) {
  for (std::size_t i = 0; i < s.size(); ++i) p[s.offset + i] = static_cast<float>(values[i]);
}

LabeledImages toy_train(std::size_t n, std::uint64_t seed) {
  SynthParams sp;
  sp.num_source = 2;
  sp.num_train = n;
  sp.num_test = 1;
  return synth_dataset(sp, Rng(seed)).train;
}

TEST(Forward, DeterministicFiniteAndNonzero) {
  const Network net = seeded_net(1);
  const Tensor img = random_image(2);
  const Embedding a = net.forward(img), b = net.forward(img);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), EncoderSpec{}.embed_dim);
  double norm = 0.0;
  for (double v : a) {
    EXPECT_TRUE(std::isfinite(v));
    norm += v * v;
  }
  EXPECT_GT(norm, 0.0);
}

TEST(Forward, ShapeIsIndependentOfInput) {
  const Network net = seeded_net(1);
  for (std::uint64_t s = 0; s < 5; ++s) EXPECT_EQ(net.forward(random_image(s)).size(), 32u);
}

TEST(Forward, ZeroWeightsCollapseToBiasPath) {
  Network net(EncoderSpec{});
  std::vector<float> p(net.params().size(), 0.0f);
  Rng rng(4);
  // Constant MLP bias in the last block makes every token equal to c; the
  // final norm then maps c to (c - mean c) / sqrt(var c + 1e-5) * g + b.
  Vector c(32), g(32), b(32);
  for (auto* v : {&c, &g, &b}) {
    for (double& x : *v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
  set_slice(p, net.slice("block1.b2"), c);
  set_slice(p, net.slice("lnf_g"), g);
  set_slice(p, net.slice("lnf_b"), b);
  net.set_params(p);
  double mean = 0.0, var = 0.0;
  for (double x : c) mean += x / 32.0;
  for (double x : c) var += (x - mean) * (x - mean) / 32.0;
  const Embedding e = net.forward(Tensor(EncoderSpec{}.image_shape()));
  for (std::size_t j = 0; j < 32; ++j) {
    EXPECT_NEAR(e[j], (c[j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j], 1e-12);
  }
}

TEST(Forward, RejectsWrongShape) {
  const Network net = seeded_net(1);
  EXPECT_THROW(net.forward(Tensor({16, 16, 3})), ShapeError);
  EXPECT_THROW(net.forward(Tensor({32, 32, 1})), ShapeError);
}

TEST(InputGrad, MatchesFiniteDifferencesForEveryLoss) {
  for (LossKind kind : {LossKind::l1, LossKind::l2, LossKind::neg_l1}) {
    for (std::uint64_t c = 0; c < 10; ++c) {
      const Network net = seeded_net(100 + c);
      GradCheckOptions o;
      o.kind = kind;
      o.seed = 7 * c + 1;
      const GradCheckReport r = grad_check(net, random_image(200 + c), 1e-3, o);
      EXPECT_TRUE(r.passed) << to_string(kind) << " case " << c << " max rel "
                            << r.max_rel_error;
      EXPECT_EQ(r.pixels.size(), 20u);
    }
  }
}

TEST(InputGrad, L1AtAnchorIsZero) {
  const Network net = seeded_net(3);
  const Tensor img = random_image(4);
  const LossGrad lg = loss_and_input_grad(net, img, net.forward(img), LossKind::l1);
  EXPECT_EQ(lg.loss, 0.0);
  for (double g : lg.grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(InputGrad, L2GrowsWithAnchorShift) {
  const Network net = seeded_net(3);
  const Tensor img = random_image(4);
  const Embedding e = net.forward(img);
  Rng rng(9);
  Vector u(e.size());
  double n = 0.0;
  for (double& x : u) {
    x = rng.normal();
    n += x * x;
  }
  for (double& x : u) x /= std::sqrt(n);
  for (double t : {0.1, 0.5, 2.0}) {
    Embedding a = e;
    for (std::size_t j = 0; j < a.size(); ++j) a[j] += t * u[j];
    EXPECT_NEAR(loss_and_input_grad(net, img, a, LossKind::l2).loss, t, 1e-12);
  }
}

TEST(InputGrad, NegL1IsNegatedL1) {
  const Network net = seeded_net(5);
  const Tensor img = random_image(6);
  Embedding a(32, 0.3);
  const LossGrad p = loss_and_input_grad(net, img, a, LossKind::l1);
  const LossGrad m = loss_and_input_grad(net, img, a, LossKind::neg_l1);
  EXPECT_EQ(m.loss, -p.loss);
  for (std::size_t i = 0; i < p.grad.size(); ++i) EXPECT_EQ(m.grad[i], -p.grad[i]);
}

TEST(InputGrad, ObjectiveTermsAddLinearly) {
  const Network net = seeded_net(5);
  const Tensor img = random_image(6);
  const Embedding a(32, 0.3), b(32, -0.2);
  const LossTerm terms[] = {{LossKind::l1, &a, 1.0}, {LossKind::neg_l1, &b, 1.0}};
  const LossGrad both = net.objective_and_input_grad(img, terms);
  const LossGrad ga = loss_and_input_grad(net, img, a, LossKind::l1);
  const LossGrad gb = loss_and_input_grad(net, img, b, LossKind::neg_l1);
  EXPECT_NEAR(both.loss, ga.loss + gb.loss, 1e-12);
  for (std::size_t i = 0; i < img.size(); ++i) {
    EXPECT_NEAR(both.grad[i], ga.grad[i] + gb.grad[i], 1e-12);
  }
  const Embedding short_anchor(4, 0.0);
  EXPECT_THROW(loss_and_input_grad(net, img, short_anchor, LossKind::l1), ShapeError);
}

TEST(InputGrad, NonFiniteBackwardNamesTheLayer) {
  const Network net = seeded_net(5);
  Tensor img = random_image(6);
  img[17] = std::numeric_limits<double>::quiet_NaN();
  try {
    loss_and_input_grad(net, img, Embedding(32, 0.0), LossKind::l1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("block"), std::string::npos) << e.what();
  }
}

TEST(GradCheck, CorruptedBackwardFailsAndInfiniteToleranceAlwaysPasses) {
  Network net = seeded_net(8);
  net.inject_backward_fault(true);
  const Tensor img = random_image(9);
  EXPECT_FALSE(grad_check(net, img, 1e-3).passed);
  EXPECT_TRUE(grad_check(net, img, std::numeric_limits<double>::infinity()).passed);
  EXPECT_THROW(grad_check(net, img, 0.0), ParameterError);
}

TEST(ReferenceMean, ClosedForms) {
  const Network net = seeded_net(10);
  const Tensor a = random_image(11), b = random_image(12);
  EXPECT_EQ(mean_reference_embedding(net, std::vector<Tensor>{a}), net.forward(a));
  const Embedding pair = mean_reference_embedding(net, std::vector<Tensor>{a, b});
  const Embedding dup = mean_reference_embedding(net, std::vector<Tensor>{a, b, a, b});
  for (std::size_t j = 0; j < pair.size(); ++j) EXPECT_NEAR(pair[j], dup[j], 1e-14);
  EXPECT_THROW(mean_reference_embedding(net, std::vector<Tensor>{}), ParameterError);
}

TEST(Layout, ContiguousUniqueAndGrouped) {
  NetworkOptions opts;
  opts.adapters = true;
  opts.head_classes = 2;
  const Network net(EncoderSpec{}, opts);
  std::size_t offset = 0;
  std::set<std::string> names;
  int last_group = 0;
  for (const auto& s : net.layout()) {
    EXPECT_EQ(s.offset, offset) << s.name;
    offset += s.size();
    EXPECT_TRUE(names.insert(s.name).second) << s.name;
    EXPECT_GE(static_cast<int>(s.group), last_group) << s.name;
    last_group = static_cast<int>(s.group);
    if (s.group == ParamGroup::encoder) EXPECT_LE(s.offset + s.size(), net.encoder_param_count());
  }
  EXPECT_EQ(offset, net.params().size());
  EXPECT_EQ(net.slice("head_w").rows, 32u);
  EXPECT_THROW(net.slice("nope"), ParameterError);
  EXPECT_THROW(Network(EncoderSpec{32, 3, 5}), ParameterError);
}

TEST(Params, SetParamsValidates) {
  Network net = seeded_net(1);
  std::vector<float> p(net.params().begin(), net.params().end());
  EXPECT_THROW(net.set_params(std::span<const float>(p).first(p.size() - 1)), ShapeError);
  p[3] = std::numeric_limits<float>::infinity();
  EXPECT_THROW(net.set_params(p), NumericError);
}

TEST(Params, StripKeepsTheEncoderBitExact) {
  NetworkOptions opts;
  opts.head_classes = 2;
  const Network net = seeded_net(2, opts);
  const Network enc = strip_to_encoder(net);
  EXPECT_EQ(enc.params().size(), net.encoder_param_count());
  const Tensor img = random_image(3);
  EXPECT_EQ(enc.forward(img), net.forward(img));
}

TEST(Params, SegmentationGradMatchesFiniteDifferences) {
  NetworkOptions opts;
  opts.adapters = true;
  opts.head_classes = 2;
  Network net = seeded_net(21, opts);
  // Give the adapters nonzero output weights so their gradients are exercised.
  std::vector<float> p(net.params().begin(), net.params().end());
  Rng rng(22);
  for (const auto& s : net.layout()) {
    if (s.group == ParamGroup::adapter) {
      for (std::size_t i = 0; i < s.size(); ++i) p[s.offset + i] = static_cast<float>(0.2 * rng.normal());
    }
  }
  net.set_params(p);
  const Tensor img = random_image(23);
  std::vector<int> labels(64);
  for (auto& y : labels) y = static_cast<int>(rng.uniform_index(2));
  std::vector<double> grad(p.size(), 0.0);
  net.segmentation_loss_and_grad(img, labels, grad);

  for (int n = 0; n < 40; ++n) {
    const std::size_t i = rng.uniform_index(p.size());
    const float x0 = p[i];
    const float up = x0 + 1e-2f, down = x0 - 1e-2f;
    Network probe = net;
    p[i] = up;
    probe.set_params(p);
    const double lu = probe.segmentation_loss_and_grad(img, labels, {});
    p[i] = down;
    probe.set_params(p);
    const double ld = probe.segmentation_loss_and_grad(img, labels, {});
    p[i] = x0;
    const double numeric = (lu - ld) / (static_cast<double>(up) - static_cast<double>(down));
    const double denom = std::max({std::abs(grad[i]), std::abs(numeric), 1e-4});
    EXPECT_LT(std::abs(grad[i] - numeric) / denom, 2e-3) << "param " << i;
  }
  EXPECT_THROW(net.segmentation_loss_and_grad(img, std::vector<int>(63, 0), grad), ShapeError);
  std::vector<int> bad(64, 0);
  bad[5] = 2;
  EXPECT_THROW(net.segmentation_loss_and_grad(img, bad, grad), ParameterError);
}

TrainOptions small_options(std::size_t epochs) {
  TrainOptions o;
  o.epochs = epochs;
  o.batch_size = 2;
  o.learning_rate = 0.05;
  return o;
}

TEST(Downstream, FrozenKeepsTheSurrogateTrunk) {
  const Network surrogate = seeded_net(30);
  const LabeledImages train = toy_train(6, 31);
  Rng rng(32);
  const TrainResult r = make_downstream(surrogate, Variant::frozen, train, small_options(2), rng);
  const auto trunk = r.model.net.params().first(surrogate.encoder_param_count());
  ASSERT_EQ(trunk.size(), surrogate.params().size());
  for (std::size_t i = 0; i < trunk.size(); ++i) ASSERT_EQ(trunk[i], surrogate.params()[i]);
  EXPECT_EQ(r.model.variant, Variant::frozen);
  EXPECT_EQ(r.epoch_losses.size(), 2u);
}

TEST(Downstream, UntrainedAdapterMatchesFrozenLogits) {
  const Network surrogate = seeded_net(30);
  const LabeledImages train = toy_train(2, 31);
  Rng ra(1), rf(1);
  Network adapter = make_downstream(surrogate, Variant::adapter, train, small_options(0), ra).model.net;
  const Network frozen = make_downstream(surrogate, Variant::frozen, train, small_options(0), rf).model.net;
  std::vector<float> p(adapter.params().begin(), adapter.params().end());
  for (const char* name : {"head_w", "head_b"}) {
    const ParamSlice& to = adapter.slice(name);
    const ParamSlice& from = frozen.slice(name);
    for (std::size_t i = 0; i < to.size(); ++i) p[to.offset + i] = frozen.params()[from.offset + i];
  }
  adapter.set_params(p);
  const Tensor img = random_image(33);
  const Vector la = adapter.logits(img), lf = frozen.logits(img);
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_NEAR(la[i], lf[i], 1e-6);
}

TEST(Downstream, FullTrainingLossDecreasesOverFirstEpochs) {
  const Network surrogate = seeded_net(40);
  const LabeledImages train = toy_train(8, 41);
  // Full-batch steps: plain gradient descent with a small rate is monotone.
  TrainOptions o = small_options(5);
  o.batch_size = train.images.size();
  Rng rng(42);
  const auto losses = make_downstream(surrogate, Variant::full, train, o, rng).epoch_losses;
  ASSERT_EQ(losses.size(), 5u);
  for (std::size_t e = 1; e < losses.size(); ++e) {
    EXPECT_LT(losses[e], losses[e - 1]) << "epoch " << e;
  }
}

TEST(Downstream, TrainingIsDeterministic) {
  const Network surrogate = seeded_net(50);
  const LabeledImages train = toy_train(4, 51);
  Rng a(52), b(52);
  const TrainResult ra = make_downstream(surrogate, Variant::adapter, train, small_options(2), a);
  const TrainResult rb = make_downstream(surrogate, Variant::adapter, train, small_options(2), b);
  EXPECT_EQ(ra.epoch_losses, rb.epoch_losses);
  EXPECT_TRUE(std::equal(ra.model.net.params().begin(), ra.model.net.params().end(),
                         rb.model.net.params().begin(), rb.model.net.params().end()));
}

TEST(Downstream, DivergenceIsATrainingError) {
  const Network surrogate = seeded_net(60);
  const LabeledImages train = toy_train(4, 61);
  TrainOptions o = small_options(3);
  o.learning_rate = 1e6;
  Rng rng(62);
  EXPECT_THROW(make_downstream(surrogate, Variant::full, train, o, rng), TrainingError);
}

TEST(Downstream, RejectsBadInputs) {
  const Network surrogate = seeded_net(60);
  Rng rng(1);
  EXPECT_THROW(make_downstream(surrogate, Variant::full, LabeledImages{}, small_options(1), rng),
               ParameterError);
  EXPECT_THROW(parse_variant("partial"), ParameterError);
  EXPECT_EQ(parse_variant(to_string(Variant::adapter)), Variant::adapter);
  EXPECT_EQ(parse_loss_kind(to_string(LossKind::neg_l1)), LossKind::neg_l1);
}

}  // namespace
}  // namespace vesca
