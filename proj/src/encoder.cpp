#include "vesca/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vesca/errors.hpp"

namespace vesca {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kBlockSlices = 16;
constexpr std::size_t kAdapterSlices = 4;

// Slice offsets within a block.
enum BlockSlot : std::size_t {
  kLn1G, kLn1B, kWq, kBq, kWk, kBk, kWv, kBv, kWo, kBo,
  kLn2G, kLn2B, kW1, kB1, kW2, kB2,
};
enum AdapterSlot : std::size_t { kA1, kAb1, kA2, kAb2 };

constexpr std::size_t kPatchW = 0, kPatchB = 1, kPos = 2, kFirstBlock = 3;

// C (+)= A(m x k) * B(k x n)
void gemm_nn(const double* a, std::size_t m, std::size_t k, const double* b,
             std::size_t n, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(k x n) += A(m x k)^T * B(m x n)
void gemm_tn(const double* a, std::size_t m, std::size_t k, const double* b,
             std::size_t n, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose(const double* a, std::size_t m, std::size_t n) {
  std::vector<double> t(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
  }
  return t;
}

void add_bias(double* x, std::size_t rows, const double* bias, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) x[i * cols + j] += bias[j];
  }
}

void bias_grad(const double* d, std::size_t rows, std::size_t cols, double* db) {
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) db[j] += d[i * cols + j];
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

// GELU, tanh form. `t` is tanh(c (x + a x^3)), kept from the forward pass.
double gelu_tanh(double x) { return std::tanh(kGeluC * (x + kGeluA * x * x * x)); }
double gelu(double x, double t) { return 0.5 * x * (1.0 + t); }
double gelu_grad(double x, double t) {
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

void layer_norm(const double* x, std::size_t rows, std::size_t cols, const double* g,
                const double* b, double* xhat, double* rstd, double* y) {
  for (std::size_t i = 0; i < rows; ++i) {
    const double* xr = x + i * cols;
    double mean = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(cols);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    rstd[i] = r;
    for (std::size_t j = 0; j < cols; ++j) {
      const double h = (xr[j] - mean) * r;
      xhat[i * cols + j] = h;
      y[i * cols + j] = h * g[j] + b[j];
    }
  }
}

// Adds d loss / d x to dx.
void layer_norm_backward(const double* dy, const double* xhat, const double* rstd,
                         std::size_t rows, std::size_t cols, const double* g,
                         double* dx, double* dg, double* db) {
  std::vector<double> dxhat(cols);
  const double inv_n = 1.0 / static_cast<double>(cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const double* dyr = dy + i * cols;
    const double* xr = xhat + i * cols;
    double sum = 0.0, sum_x = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      dxhat[j] = dyr[j] * g[j];
      sum += dxhat[j];
      sum_x += dxhat[j] * xr[j];
      if (dg) {
        dg[j] += dyr[j] * xr[j];
        db[j] += dyr[j];
      }
    }
    for (std::size_t j = 0; j < cols; ++j) {
      dx[i * cols + j] += rstd[i] * (dxhat[j] - inv_n * sum - xr[j] * inv_n * sum_x);
    }
  }
}

void check_finite(const std::vector<double>& v, const std::string& where) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError("non-finite value in " + where);
  }
}

}  // namespace

struct BlockCache {
  std::vector<double> xhat1, rstd1, h1, q, k, v, attn, o, z_mid;
  std::vector<double> xhat2, rstd2, h2, u, tanh_u, act, z_out;
  std::vector<double> ua, tanh_ua, aa;  // adapter
  std::vector<double> out;     // block output (after adapter when present)
};

struct ForwardCache {
  std::vector<double> patches;
  std::vector<double> z0;
  std::vector<BlockCache> blocks;
  std::vector<double> xhat_f, rstd_f, out_f;  // final layer norm
  const std::vector<double>& tokens() const { return out_f; }
  const std::vector<double>& trunk() const { return blocks.empty() ? z0 : blocks.back().out; }
};

void EncoderSpec::validate() const {
  if (image_side == 0 || channels == 0 || patch_side == 0 || embed_dim == 0 ||
      mlp_hidden == 0) {
    throw ParameterError("encoder spec: dimensions must be positive");
  }
  if (image_side % patch_side != 0) {
    throw ParameterError("encoder spec: patch_side " + std::to_string(patch_side) +
                         " does not divide image_side " + std::to_string(image_side));
  }
}

LossKind parse_loss_kind(const std::string& s) {
  if (s == "l1") return LossKind::l1;
  if (s == "l2") return LossKind::l2;
  if (s == "neg_l1") return LossKind::neg_l1;
  throw ParameterError("unknown loss kind '" + s + "'");
}

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::l1: return "l1";
    case LossKind::l2: return "l2";
    case LossKind::neg_l1: return "neg_l1";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  if (s == "frozen") return Variant::frozen;
  if (s == "adapter") return Variant::adapter;
  if (s == "full") return Variant::full;
  throw ParameterError("unknown downstream variant '" + s + "'");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::frozen: return "frozen";
    case Variant::adapter: return "adapter";
    case Variant::full: return "full";
  }
  return "?";
}

Network::Network(EncoderSpec spec, NetworkOptions options)
    : spec_(spec), options_(options) {
  spec_.validate();
  build_layout();
  std::size_t total = 0;
  for (const auto& s : layout_) total += s.size();
  params_.assign(total, 0.0f);
  // Layer-norm gains start at one.
  for (std::size_t b = 0; b < spec_.num_blocks; ++b) {
    for (auto slot : {kLn1G, kLn2G}) {
      const auto& s = layout_[kFirstBlock + b * kBlockSlices + slot];
      std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), 1.0f);
    }
  }
  const auto& gf = layout_[final_norm_slot()];
  std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(gf.offset), gf.size(), 1.0f);
  set_params(params_);
}

std::size_t Network::final_norm_slot() const noexcept {
  return kFirstBlock + spec_.num_blocks * kBlockSlices;
}

void Network::build_layout() {
  const std::size_t d = spec_.embed_dim, hm = spec_.mlp_hidden;
  std::size_t offset = 0;
  auto add = [&](std::string name, ParamGroup g, std::size_t rows, std::size_t cols) {
    layout_.push_back({std::move(name), g, offset, rows, cols});
    offset += rows * cols;
  };
  add("patch_w", ParamGroup::encoder, spec_.patch_dim(), d);
  add("patch_b", ParamGroup::encoder, 1, d);
  add("pos", ParamGroup::encoder, spec_.tokens(), d);
  for (std::size_t b = 0; b < spec_.num_blocks; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    add(p + "ln1_g", ParamGroup::encoder, 1, d);
    add(p + "ln1_b", ParamGroup::encoder, 1, d);
    add(p + "wq", ParamGroup::encoder, d, d);
    add(p + "bq", ParamGroup::encoder, 1, d);
    add(p + "wk", ParamGroup::encoder, d, d);
    add(p + "bk", ParamGroup::encoder, 1, d);
    add(p + "wv", ParamGroup::encoder, d, d);
    add(p + "bv", ParamGroup::encoder, 1, d);
    add(p + "wo", ParamGroup::encoder, d, d);
    add(p + "bo", ParamGroup::encoder, 1, d);
    add(p + "ln2_g", ParamGroup::encoder, 1, d);
    add(p + "ln2_b", ParamGroup::encoder, 1, d);
    add(p + "w1", ParamGroup::encoder, d, hm);
    add(p + "b1", ParamGroup::encoder, 1, hm);
    add(p + "w2", ParamGroup::encoder, hm, d);
    add(p + "b2", ParamGroup::encoder, 1, d);
  }
  add("lnf_g", ParamGroup::encoder, 1, d);
  add("lnf_b", ParamGroup::encoder, 1, d);
  encoder_params_ = offset;
  if (options_.adapters) {
    const std::size_t ha = options_.adapter_hidden;
    if (ha == 0) throw ParameterError("adapter_hidden must be positive");
    for (std::size_t b = 0; b < spec_.num_blocks; ++b) {
      const std::string p = "adapter" + std::to_string(b) + ".";
      add(p + "w1", ParamGroup::adapter, d, ha);
      add(p + "b1", ParamGroup::adapter, 1, ha);
      add(p + "w2", ParamGroup::adapter, ha, d);
      add(p + "b2", ParamGroup::adapter, 1, d);
    }
  }
  if (options_.head_classes > 0) {
    add("head_w", ParamGroup::head, d, options_.head_classes);
    add("head_b", ParamGroup::head, 1, options_.head_classes);
  }
}

const ParamSlice& Network::slice(const std::string& name) const {
  for (const auto& s : layout_) {
    if (s.name == name) return s;
  }
  throw ParameterError("no parameter named '" + name + "'");
}

Network Network::seeded(EncoderSpec spec, Rng& rng, NetworkOptions options) {
  Network net(spec, options);
  std::vector<float> p(net.params_.begin(), net.params_.end());
  auto fill_normal = [&](const ParamSlice& s, double std) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      p[s.offset + i] = static_cast<float>(std * rng.normal());
    }
  };
  for (const auto& s : net.layout_) {
    const std::string& n = s.name;
    auto ends_with = [&](const char* suffix) {
      const std::string sfx(suffix);
      return n.size() >= sfx.size() && n.compare(n.size() - sfx.size(), sfx.size(), sfx) == 0;
    };
    if (s.group == ParamGroup::adapter) {
      // Zero-initialized output projection: the adapter starts as identity.
      if (ends_with(".w1")) fill_normal(s, 1.0 / std::sqrt(static_cast<double>(s.rows)));
      continue;
    }
    if (n == "pos") {
      fill_normal(s, 0.1);
    } else if (s.rows > 1) {
      fill_normal(s, 1.0 / std::sqrt(static_cast<double>(s.rows)));
    }
  }
  net.set_params(p);
  return net;
}

void Network::set_params(std::span<const float> values) {
  if (values.size() != params_.size()) {
    throw ShapeError("set_params: expected " + std::to_string(params_.size()) +
                     " values, got " + std::to_string(values.size()));
  }
  if (values.data() != params_.data()) params_.assign(values.begin(), values.end());
  weights_.assign(params_.begin(), params_.end());
  for (double v : weights_) {
    if (!std::isfinite(v)) throw NumericError("set_params: non-finite weight");
  }
  weights_t_.resize(weights_.size());
  for (const auto& sl : layout_) {
    const std::vector<double> t = transpose(weights_.data() + sl.offset, sl.rows, sl.cols);
    std::copy(t.begin(), t.end(), weights_t_.begin() + static_cast<std::ptrdiff_t>(sl.offset));
  }
}

void Network::check_image(const Tensor& image) const {
  if (image.shape() != spec_.image_shape()) {
    throw ShapeError("encoder input " + shape_string(image.shape()) + ", expected " +
                     shape_string(spec_.image_shape()));
  }
}

void Network::run_forward(const Tensor& image, ForwardCache& c) const {
  check_image(image);
  const std::size_t T = spec_.tokens(), D = spec_.embed_dim, P = spec_.patch_dim();
  const std::size_t G = spec_.grid(), ps = spec_.patch_side, C = spec_.channels;
  const std::size_t Hm = spec_.mlp_hidden;

  c.patches.assign(T * P, 0.0);
  for (std::size_t gy = 0; gy < G; ++gy) {
    for (std::size_t gx = 0; gx < G; ++gx) {
      double* row = c.patches.data() + (gy * G + gx) * P;
      for (std::size_t dy = 0; dy < ps; ++dy) {
        for (std::size_t dx = 0; dx < ps; ++dx) {
          for (std::size_t ch = 0; ch < C; ++ch) {
            row[(dy * ps + dx) * C + ch] = image.at(gy * ps + dy, gx * ps + dx, ch);
          }
        }
      }
    }
  }
  c.z0.assign(T * D, 0.0);
  gemm_nn(c.patches.data(), T, P, w(kPatchW), D, c.z0.data(), false);
  add_bias(c.z0.data(), T, w(kPatchB), D);
  const double* pos = w(kPos);
  for (std::size_t i = 0; i < T * D; ++i) c.z0[i] += pos[i];

  const double scale = 1.0 / std::sqrt(static_cast<double>(D));
  c.blocks.resize(spec_.num_blocks);
  for (std::size_t b = 0; b < spec_.num_blocks; ++b) {
    BlockCache& bc = c.blocks[b];
    const std::vector<double>& z_in = b == 0 ? c.z0 : c.blocks[b - 1].out;
    const std::size_t base = kFirstBlock + b * kBlockSlices;

    bc.xhat1.resize(T * D);
    bc.rstd1.resize(T);
    bc.h1.resize(T * D);
    layer_norm(z_in.data(), T, D, w(base + kLn1G), w(base + kLn1B), bc.xhat1.data(),
               bc.rstd1.data(), bc.h1.data());

    bc.q.resize(T * D);
    bc.k.resize(T * D);
    bc.v.resize(T * D);
    gemm_nn(bc.h1.data(), T, D, w(base + kWq), D, bc.q.data(), false);
    add_bias(bc.q.data(), T, w(base + kBq), D);
    gemm_nn(bc.h1.data(), T, D, w(base + kWk), D, bc.k.data(), false);
    add_bias(bc.k.data(), T, w(base + kBk), D);
    gemm_nn(bc.h1.data(), T, D, w(base + kWv), D, bc.v.data(), false);
    add_bias(bc.v.data(), T, w(base + kBv), D);

    const std::vector<double> kt = transpose(bc.k.data(), T, D);
    bc.attn.resize(T * T);
    gemm_nn(bc.q.data(), T, D, kt.data(), T, bc.attn.data(), false);
    for (std::size_t i = 0; i < T; ++i) {
      double* row = bc.attn.data() + i * T;
      double mx = -INFINITY;
      for (std::size_t j = 0; j < T; ++j) {
        row[j] *= scale;
        mx = std::max(mx, row[j]);
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        row[j] = std::exp(row[j] - mx);
        sum += row[j];
      }
      for (std::size_t j = 0; j < T; ++j) row[j] /= sum;
    }
    bc.o.resize(T * D);
    gemm_nn(bc.attn.data(), T, T, bc.v.data(), D, bc.o.data(), false);

    bc.z_mid = z_in;
    gemm_nn(bc.o.data(), T, D, w(base + kWo), D, bc.z_mid.data(), true);
    add_bias(bc.z_mid.data(), T, w(base + kBo), D);

    bc.xhat2.resize(T * D);
    bc.rstd2.resize(T);
    bc.h2.resize(T * D);
    layer_norm(bc.z_mid.data(), T, D, w(base + kLn2G), w(base + kLn2B), bc.xhat2.data(),
               bc.rstd2.data(), bc.h2.data());
    bc.u.resize(T * Hm);
    gemm_nn(bc.h2.data(), T, D, w(base + kW1), Hm, bc.u.data(), false);
    add_bias(bc.u.data(), T, w(base + kB1), Hm);
    bc.tanh_u.resize(T * Hm);
    bc.act.resize(T * Hm);
    for (std::size_t i = 0; i < T * Hm; ++i) {
      bc.tanh_u[i] = gelu_tanh(bc.u[i]);
      bc.act[i] = gelu(bc.u[i], bc.tanh_u[i]);
    }
    bc.z_out = bc.z_mid;
    gemm_nn(bc.act.data(), T, Hm, w(base + kW2), D, bc.z_out.data(), true);
    add_bias(bc.z_out.data(), T, w(base + kB2), D);

    if (options_.adapters) {
      const std::size_t Ha = options_.adapter_hidden;
      const std::size_t abase = final_norm_slot() + 2 + b * kAdapterSlices;
      bc.ua.resize(T * Ha);
      gemm_nn(bc.z_out.data(), T, D, w(abase + kA1), Ha, bc.ua.data(), false);
      add_bias(bc.ua.data(), T, w(abase + kAb1), Ha);
      bc.tanh_ua.resize(T * Ha);
      bc.aa.resize(T * Ha);
      for (std::size_t i = 0; i < T * Ha; ++i) {
        bc.tanh_ua[i] = gelu_tanh(bc.ua[i]);
        bc.aa[i] = gelu(bc.ua[i], bc.tanh_ua[i]);
      }
      bc.out = bc.z_out;
      gemm_nn(bc.aa.data(), T, Ha, w(abase + kA2), D, bc.out.data(), true);
      add_bias(bc.out.data(), T, w(abase + kAb2), D);
    } else {
      bc.out = bc.z_out;
    }
  }
  const std::size_t f = final_norm_slot();
  c.xhat_f.resize(T * D);
  c.rstd_f.resize(T);
  c.out_f.resize(T * D);
  layer_norm(c.trunk().data(), T, D, w(f), w(f + 1), c.xhat_f.data(), c.rstd_f.data(),
             c.out_f.data());
}

Tensor Network::run_backward(const ForwardCache& c, std::vector<double> d_tok,
                             bool want_input, std::span<double> pg) const {
  const std::size_t T = spec_.tokens(), D = spec_.embed_dim, P = spec_.patch_dim();
  const std::size_t Hm = spec_.mlp_hidden;
  const bool params = !pg.empty();
  if (params && pg.size() != params_.size()) {
    throw ShapeError("parameter gradient buffer has the wrong size");
  }
  auto gslot = [&](std::size_t idx) { return pg.data() + layout_[idx].offset; };
  auto wt = [&](std::size_t idx) { return weights_t_.data() + layout_[idx].offset; };
  const double scale = 1.0 / std::sqrt(static_cast<double>(D));

  // d: gradient w.r.t. the current block output
  std::vector<double> d(T * D, 0.0);
  const std::size_t f = final_norm_slot();
  layer_norm_backward(d_tok.data(), c.xhat_f.data(), c.rstd_f.data(), T, D, w(f), d.data(),
                      params ? gslot(f) : nullptr, params ? gslot(f + 1) : nullptr);
  for (std::size_t b = spec_.num_blocks; b-- > 0;) {
    const BlockCache& bc = c.blocks[b];
    const std::size_t base = kFirstBlock + b * kBlockSlices;

    // Adapter: out = z_out + gelu(z_out A1 + ab1) A2 + ab2
    std::vector<double> d_zout = d;
    if (options_.adapters) {
      const std::size_t Ha = options_.adapter_hidden;
      const std::size_t abase = final_norm_slot() + 2 + b * kAdapterSlices;
      std::vector<double> d_aa(T * Ha);
      gemm_nn(d.data(), T, D, wt(abase + kA2), Ha, d_aa.data(), false);
      if (params) {
        gemm_tn(bc.aa.data(), T, Ha, d.data(), D, gslot(abase + kA2));
        bias_grad(d.data(), T, D, gslot(abase + kAb2));
      }
      for (std::size_t i = 0; i < T * Ha; ++i) d_aa[i] *= gelu_grad(bc.ua[i], bc.tanh_ua[i]);
      gemm_nn(d_aa.data(), T, Ha, wt(abase + kA1), D, d_zout.data(), true);
      if (params) {
        gemm_tn(bc.z_out.data(), T, D, d_aa.data(), Ha, gslot(abase + kA1));
        bias_grad(d_aa.data(), T, Ha, gslot(abase + kAb1));
      }
    }

    // MLP: z_out = z_mid + gelu(LN2(z_mid) W1 + b1) W2 + b2
    std::vector<double> d_act(T * Hm);
    gemm_nn(d_zout.data(), T, D, wt(base + kW2), Hm, d_act.data(), false);
    if (params) {
      gemm_tn(bc.act.data(), T, Hm, d_zout.data(), D, gslot(base + kW2));
      bias_grad(d_zout.data(), T, D, gslot(base + kB2));
    }
    for (std::size_t i = 0; i < T * Hm; ++i) d_act[i] *= gelu_grad(bc.u[i], bc.tanh_u[i]);
    std::vector<double> d_h2(T * D);
    gemm_nn(d_act.data(), T, Hm, wt(base + kW1), D, d_h2.data(), false);
    if (params) {
      gemm_tn(bc.h2.data(), T, D, d_act.data(), Hm, gslot(base + kW1));
      bias_grad(d_act.data(), T, Hm, gslot(base + kB1));
    }
    std::vector<double> d_zmid = d_zout;
    layer_norm_backward(d_h2.data(), bc.xhat2.data(), bc.rstd2.data(), T, D,
                        w(base + kLn2G), d_zmid.data(),
                        params ? gslot(base + kLn2G) : nullptr,
                        params ? gslot(base + kLn2B) : nullptr);

    // Attention: z_mid = z_in + softmax(q k^T / sqrt(D)) v Wo + bo
    std::vector<double> d_o(T * D);
    gemm_nn(d_zmid.data(), T, D, wt(base + kWo), D, d_o.data(), false);
    if (params) {
      gemm_tn(bc.o.data(), T, D, d_zmid.data(), D, gslot(base + kWo));
      bias_grad(d_zmid.data(), T, D, gslot(base + kBo));
    }
    const std::vector<double> vt = transpose(bc.v.data(), T, D);
    std::vector<double> d_s(T * T);
    gemm_nn(d_o.data(), T, D, vt.data(), T, d_s.data(), false);
    std::vector<double> d_v(T * D, 0.0);
    gemm_tn(bc.attn.data(), T, T, d_o.data(), D, d_v.data());
    for (std::size_t i = 0; i < T; ++i) {
      double* dr = d_s.data() + i * T;
      const double* ar = bc.attn.data() + i * T;
      if (fault_) {
        for (std::size_t j = 0; j < T; ++j) dr[j] *= scale;
        continue;
      }
      double dot = 0.0;
      for (std::size_t j = 0; j < T; ++j) dot += dr[j] * ar[j];
      for (std::size_t j = 0; j < T; ++j) dr[j] = ar[j] * (dr[j] - dot) * scale;
    }
    std::vector<double> d_q(T * D), d_k(T * D, 0.0);
    gemm_nn(d_s.data(), T, T, bc.k.data(), D, d_q.data(), false);
    gemm_tn(d_s.data(), T, T, bc.q.data(), D, d_k.data());

    std::vector<double> d_h1(T * D, 0.0);
    gemm_nn(d_q.data(), T, D, wt(base + kWq), D, d_h1.data(), true);
    gemm_nn(d_k.data(), T, D, wt(base + kWk), D, d_h1.data(), true);
    gemm_nn(d_v.data(), T, D, wt(base + kWv), D, d_h1.data(), true);
    if (params) {
      gemm_tn(bc.h1.data(), T, D, d_q.data(), D, gslot(base + kWq));
      bias_grad(d_q.data(), T, D, gslot(base + kBq));
      gemm_tn(bc.h1.data(), T, D, d_k.data(), D, gslot(base + kWk));
      bias_grad(d_k.data(), T, D, gslot(base + kBk));
      gemm_tn(bc.h1.data(), T, D, d_v.data(), D, gslot(base + kWv));
      bias_grad(d_v.data(), T, D, gslot(base + kBv));
    }
    std::vector<double> d_zin = d_zmid;
    layer_norm_backward(d_h1.data(), bc.xhat1.data(), bc.rstd1.data(), T, D,
                        w(base + kLn1G), d_zin.data(),
                        params ? gslot(base + kLn1G) : nullptr,
                        params ? gslot(base + kLn1B) : nullptr);
    check_finite(d_zin, "backward pass of block " + std::to_string(b));
    d = std::move(d_zin);
  }

  // Patch embedding: z0 = patches Wp + bp + pos
  if (params) {
    gemm_tn(c.patches.data(), T, P, d.data(), D, gslot(kPatchW));
    bias_grad(d.data(), T, D, gslot(kPatchB));
    double* gp = gslot(kPos);
    for (std::size_t i = 0; i < T * D; ++i) gp[i] += d[i];
  }
  if (!want_input) return {};
  std::vector<double> d_patch(T * P);
  gemm_nn(d.data(), T, D, wt(kPatchW), P, d_patch.data(), false);
  check_finite(d_patch, "backward pass of patch embedding");

  Tensor grad(spec_.image_shape());
  const std::size_t G = spec_.grid(), ps = spec_.patch_side, C = spec_.channels;
  for (std::size_t gy = 0; gy < G; ++gy) {
    for (std::size_t gx = 0; gx < G; ++gx) {
      const double* row = d_patch.data() + (gy * G + gx) * P;
      for (std::size_t dy = 0; dy < ps; ++dy) {
        for (std::size_t dx = 0; dx < ps; ++dx) {
          for (std::size_t ch = 0; ch < C; ++ch) {
            grad.at(gy * ps + dy, gx * ps + dx, ch) = row[(dy * ps + dx) * C + ch];
          }
        }
      }
    }
  }
  return grad;
}

namespace {

Embedding mean_pool(const std::vector<double>& tokens, std::size_t T, std::size_t D) {
  Embedding e(D, 0.0);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < D; ++j) e[j] += tokens[i * D + j];
  }
  for (double& v : e) v /= static_cast<double>(T);
  return e;
}

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Adds weight * d metric / d e to `de` and returns weight * metric.
double accumulate_metric(LossKind kind, double weight, std::span<const double> e,
                         std::span<const double> a, std::span<double> de) {
  switch (kind) {
    case LossKind::l1:
    case LossKind::neg_l1: {
      const double s = kind == LossKind::l1 ? weight : -weight;
      double loss = 0.0;
      for (std::size_t i = 0; i < e.size(); ++i) {
        loss += std::abs(e[i] - a[i]);
        de[i] += s * sign_of(e[i] - a[i]);
      }
      return s * loss;
    }
    case LossKind::l2: {
      double sq = 0.0;
      for (std::size_t i = 0; i < e.size(); ++i) sq += (e[i] - a[i]) * (e[i] - a[i]);
      const double n = std::sqrt(sq);
      if (n > 0.0) {
        for (std::size_t i = 0; i < e.size(); ++i) de[i] += weight * (e[i] - a[i]) / n;
      }
      return weight * n;
    }
  }
  return 0.0;
}

}  // namespace

Embedding Network::forward(const Tensor& image) const {
  ForwardCache c;
  run_forward(image, c);
  return mean_pool(c.tokens(), spec_.tokens(), spec_.embed_dim);
}

Vector Network::token_features(const Tensor& image) const {
  ForwardCache c;
  run_forward(image, c);
  return c.tokens();
}

Vector Network::logits(const Tensor& image) const {
  if (options_.head_classes == 0) throw ParameterError("network has no segmentation head");
  const std::size_t T = spec_.tokens(), D = spec_.embed_dim, K = options_.head_classes;
  const Vector tok = token_features(image);
  const std::size_t hw = layout_.size() - 2;
  Vector out(T * K);
  gemm_nn(tok.data(), T, D, w(hw), K, out.data(), false);
  add_bias(out.data(), T, w(hw + 1), K);
  return out;
}

std::vector<int> Network::predict(const Tensor& image) const {
  const Vector lg = logits(image);
  const std::size_t K = options_.head_classes;
  std::vector<int> out(spec_.tokens());
  for (std::size_t t = 0; t < out.size(); ++t) {
    const double* row = lg.data() + t * K;
    out[t] = static_cast<int>(std::max_element(row, row + K) - row);
  }
  return out;
}

LossGrad Network::objective_and_input_grad(const Tensor& image,
                                           std::span<const LossTerm> terms) const {
  ForwardCache c;
  run_forward(image, c);
  const std::size_t T = spec_.tokens(), D = spec_.embed_dim;
  const Embedding e = mean_pool(c.tokens(), T, D);
  Vector de(D, 0.0);
  LossGrad out;
  for (const auto& term : terms) {
    if (!term.anchor || term.anchor->size() != D) {
      throw ShapeError("loss anchor dimension does not match embed_dim");
    }
    out.loss += accumulate_metric(term.kind, term.weight, e, *term.anchor, de);
  }
  std::vector<double> d_tok(T * D);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < D; ++j) d_tok[i * D + j] = de[j] / static_cast<double>(T);
  }
  out.grad = run_backward(c, std::move(d_tok), true, {});
  return out;
}

double Network::segmentation_loss_and_grad(const Tensor& image, std::span<const int> labels,
                                           std::span<double> pg, bool head_only) const {
  const std::size_t K = options_.head_classes;
  if (K == 0) throw ParameterError("network has no segmentation head");
  const std::size_t T = spec_.tokens(), D = spec_.embed_dim;
  if (labels.size() != T) throw ShapeError("label count does not match token count");
  ForwardCache c;
  run_forward(image, c);
  const std::vector<double>& tok = c.tokens();
  const std::size_t hw = layout_.size() - 2;
  Vector lg(T * K);
  gemm_nn(tok.data(), T, D, w(hw), K, lg.data(), false);
  add_bias(lg.data(), T, w(hw + 1), K);

  double loss = 0.0;
  Vector d_lg(T * K);
  for (std::size_t t = 0; t < T; ++t) {
    const double* row = lg.data() + t * K;
    const double mx = *std::max_element(row, row + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(row[k] - mx);
    const double lse = mx + std::log(sum);
    const int y = labels[t];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw ParameterError("label out of range");
    loss += lse - row[y];
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(row[k] - lse);
      d_lg[t * K + k] = (p - (static_cast<int>(k) == y ? 1.0 : 0.0)) / static_cast<double>(T);
    }
  }
  loss /= static_cast<double>(T);
  if (!std::isfinite(loss)) throw NumericError("segmentation loss is not finite");
  if (pg.empty()) return loss;

  gemm_tn(tok.data(), T, D, d_lg.data(), K, pg.data() + layout_[hw].offset);
  bias_grad(d_lg.data(), T, K, pg.data() + layout_[hw + 1].offset);
  if (head_only) return loss;

  std::vector<double> d_tok(T * D);
  gemm_nn(d_lg.data(), T, K, weights_t_.data() + layout_[hw].offset, D, d_tok.data(), false);
  run_backward(c, std::move(d_tok), false, pg);
  return loss;
}

double embedding_loss(LossKind kind, std::span<const double> e, std::span<const double> a) {
  if (e.size() != a.size()) throw ShapeError("embedding_loss: dimension mismatch");
  Vector scratch(e.size(), 0.0);
  return accumulate_metric(kind, 1.0, e, a, scratch);
}

LossGrad loss_and_input_grad(const Network& net, const Tensor& image,
                             const Embedding& anchor, LossKind kind) {
  const LossTerm term{kind, &anchor, 1.0};
  return net.objective_and_input_grad(image, std::span<const LossTerm>(&term, 1));
}

Embedding mean_reference_embedding(const Network& net, std::span<const Tensor> references) {
  if (references.empty()) throw ParameterError("mean_reference_embedding: empty reference set");
  Embedding mean(net.spec().embed_dim, 0.0);
  for (const auto& r : references) {
    const Embedding e = net.forward(r);
    for (std::size_t j = 0; j < mean.size(); ++j) mean[j] += e[j];
  }
  for (double& v : mean) v /= static_cast<double>(references.size());
  return mean;
}

GradCheckReport grad_check(const Network& net, const Tensor& image, double tolerance,
                           GradCheckOptions options) {
  if (!(tolerance > 0.0)) throw ParameterError("grad_check: tolerance must be positive");
  Rng rng(options.seed);
  Embedding anchor = net.forward(image);
  for (double& v : anchor) v += 0.5 * rng.normal();
  const LossGrad lg = loss_and_input_grad(net, image, anchor, options.kind);

  GradCheckReport report;
  Tensor probe = image;
  for (std::size_t n = 0; n < options.num_pixels; ++n) {
    const std::size_t idx = rng.uniform_index(image.size());
    const double x0 = probe[idx];
    probe[idx] = x0 + options.step;
    const double up = embedding_loss(options.kind, net.forward(probe), anchor);
    probe[idx] = x0 - options.step;
    const double down = embedding_loss(options.kind, net.forward(probe), anchor);
    probe[idx] = x0;
    const double numeric = (up - down) / (2.0 * options.step);
    const double analytic = lg.grad[idx];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    const double rel = std::abs(analytic - numeric) / denom;
    const bool pass = rel <= tolerance;
    report.pixels.push_back({idx, analytic, numeric, rel, pass});
    report.max_rel_error = std::max(report.max_rel_error, rel);
    report.passed = report.passed && pass;
  }
  return report;
}

Network strip_to_encoder(const Network& net) {
  Network out(net.spec());
  out.set_params(net.params().subspan(0, net.encoder_param_count()));
  return out;
}

std::vector<double> train_network(Network& net, std::span<const bool> trainable_groups,
                                  const LabeledImages& train, const TrainOptions& options,
                                  Rng& rng) {
  if (train.images.empty()) throw ParameterError("training set is empty");
  if (train.images.size() != train.labels.size()) {
    throw ShapeError("training images and labels are misaligned");
  }
  if (options.batch_size == 0) throw ParameterError("batch_size must be positive");
  if (trainable_groups.size() != 3) throw ParameterError("expected three trainable flags");

  std::vector<char> mask(net.params().size(), 0);
  for (const auto& s : net.layout()) {
    if (trainable_groups[static_cast<std::size_t>(s.group)]) {
      std::fill_n(mask.begin() + static_cast<std::ptrdiff_t>(s.offset), s.size(), 1);
    }
  }

  std::vector<std::size_t> order(train.images.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<float> p(net.params().begin(), net.params().end());
  std::vector<double> grad(p.size());
  const bool head_only = !trainable_groups[0] && !trainable_groups[1];
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_index(i)]);
    }
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t n = order[i];
        epoch_loss += net.segmentation_loss_and_grad(train.images[n], train.labels[n], grad,
                                                      head_only);
      }
      const double step = options.learning_rate / static_cast<double>(end - start);
      for (std::size_t i = 0; i < p.size(); ++i) {
        if (mask[i]) p[i] = static_cast<float>(p[i] - step * grad[i]);
        if (!std::isfinite(p[i])) {
          throw TrainingError("training diverged at epoch " + std::to_string(epoch));
        }
      }
      net.set_params(p);
    }
    epoch_loss /= static_cast<double>(order.size());
    if (!std::isfinite(epoch_loss)) {
      throw TrainingError("training diverged at epoch " + std::to_string(epoch));
    }
    losses.push_back(epoch_loss);
  }
  return losses;
}

TrainResult make_downstream(const Network& surrogate, Variant mode, const LabeledImages& train,
                            const TrainOptions& options, Rng& rng) {
  NetworkOptions opts;
  opts.adapters = mode == Variant::adapter;
  opts.adapter_hidden = options.adapter_hidden;
  opts.head_classes = options.head_classes;
  Rng init = rng.derive({0x4ead});
  Network net = Network::seeded(surrogate.spec(), init, opts);
  // Copy the surrogate trunk; adapters and head keep their fresh init.
  std::vector<float> p(net.params().begin(), net.params().end());
  const auto trunk = surrogate.params().subspan(0, surrogate.encoder_param_count());
  std::copy(trunk.begin(), trunk.end(), p.begin());
  net.set_params(p);

  const bool groups[3] = {mode == Variant::full, mode == Variant::adapter, true};
  TrainResult result;
  result.epoch_losses = train_network(net, groups, train, options, rng);
  result.model = DownstreamModel{mode, std::move(net)};
  return result;
}

double patch_accuracy(const Network& net, const Tensor& image, std::span<const int> labels) {
  const std::vector<int> pred = net.predict(image);
  if (pred.size() != labels.size()) throw ShapeError("label count does not match token count");
  std::size_t hit = 0;
  for (std::size_t t = 0; t < pred.size(); ++t) hit += pred[t] == labels[t];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

}  // namespace vesca
