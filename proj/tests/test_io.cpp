#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <functional>
#include <string>

#include "test_support.hpp"
#include "vesca/errors.hpp"
#include "vesca/io.hpp"

namespace vesca {
namespace {

namespace fs = std::filesystem;
using testing::random_tensor;

Bytes ascii(const std::string& s) { return Bytes(s.begin(), s.end()); }

std::size_t offset_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ParseError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "expected ParseError";
  return ~std::size_t{0};
}

class TempDir : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("vesca_io_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  fs::path dir_;
};

TEST(TensorCodec, HeaderLayoutByHand) {
  const Tensor t({2, 1}, {1.0, -2.0});
  const Bytes b = encode_tensor(t, DType::f32);
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 4 + 2 * 8 + 2 * 4);
  EXPECT_EQ(std::string(b.begin(), b.begin() + 4), "VTNS");
  EXPECT_EQ(b[4], 1);   // version
  EXPECT_EQ(b[8], 1);   // f32
  EXPECT_EQ(b[12], 2);  // rank
  EXPECT_EQ(b[16], 2);  // dim 0
  EXPECT_EQ(b[24], 1);  // dim 1
  float first;
  std::memcpy(&first, b.data() + 32, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(TensorCodec, RoundTripsInBothPrecisions) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const std::size_t rank = 1 + rng.uniform_index(4);
    for (std::size_t r = 0; r < rank; ++r) shape.push_back(1 + rng.uniform_index(5));
    const Tensor t = random_tensor(shape, rng, -3.0, 3.0);
    EXPECT_EQ(decode_tensor(encode_tensor(t, DType::f64)), t);
    const Tensor f = decode_tensor(encode_tensor(t, DType::f32));
    ASSERT_EQ(f.shape(), t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) {
      EXPECT_EQ(f[i], static_cast<double>(static_cast<float>(t[i])));
    }
  }
}

TEST(TensorCodec, MalformedInputsReportOffsets) {
  const Bytes good = encode_tensor(Tensor({3}, {1.0, 2.0, 3.0}), DType::f64);
  EXPECT_EQ(offset_of([&] { decode_tensor(ascii("XTNS")); }), 0u);
  Bytes truncated(good.begin(), good.end() - 3);
  EXPECT_EQ(offset_of([&] { decode_tensor(truncated); }), truncated.size());
  Bytes trailing = good;
  trailing.push_back(0);
  EXPECT_EQ(offset_of([&] { decode_tensor(trailing); }), good.size());
  Bytes bad_dtype = good;
  bad_dtype[8] = 7;
  EXPECT_EQ(offset_of([&] { decode_tensor(bad_dtype); }), 8u);
  Bytes bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(offset_of([&] { decode_tensor(bad_version); }), 4u);
  EXPECT_THROW(decode_tensor(Bytes{}), ParseError);
}

TEST(Ppm, DecodesAHandWrittenFile) {
  Bytes b = ascii("P6\n# a comment\n2 1\n# another\n255\n");
  for (int v : {0, 255, 51, 102, 153, 204}) b.push_back(static_cast<std::uint8_t>(v));
  const Tensor img = decode_ppm(b);
  ASSERT_EQ(img.shape(), (Shape{1, 2, 3}));
  EXPECT_EQ(img.at(0, 0, 1), 1.0);
  EXPECT_DOUBLE_EQ(img.at(0, 1, 0), 0.4);
  EXPECT_DOUBLE_EQ(img.at(0, 0, 2), 0.2);
  EXPECT_DOUBLE_EQ(img.at(0, 1, 2), 0.8);
}

TEST(Ppm, SmallMaxvalScales) {
  Bytes b = ascii("P6 1 1 3 ");
  for (int v : {0, 1, 3}) b.push_back(static_cast<std::uint8_t>(v));
  const Tensor img = decode_ppm(b);
  EXPECT_DOUBLE_EQ(img[1], 1.0 / 3.0);
  EXPECT_EQ(img[2], 1.0);
}

TEST(Ppm, RoundTripIsExactOnTheByteGrid) {
  Rng rng(2);
  Tensor img({5, 7, 3});
  for (double& v : img.values()) v = static_cast<double>(rng.uniform_index(256)) / 255.0;
  EXPECT_EQ(decode_ppm(encode_ppm(img)), img);
  EXPECT_EQ(encode_ppm(decode_ppm(encode_ppm(img))), encode_ppm(img));
  EXPECT_THROW(encode_ppm(Tensor({4, 4, 1})), ShapeError);
}

TEST(Ppm, MalformedHeadersAndBodies) {
  EXPECT_EQ(offset_of([&] { decode_ppm(ascii("P5 1 1 255 abc")); }), 0u);
  EXPECT_THROW(decode_ppm(ascii("P6 1 1 256 abc")), ParseError);
  EXPECT_THROW(decode_ppm(ascii("P6 0 1 255 ")), ParseError);
  EXPECT_THROW(decode_ppm(ascii("P6 1 x 255 abc")), ParseError);
  const Bytes short_body = ascii("P6 1 1 255 ab");
  EXPECT_EQ(offset_of([&] { decode_ppm(short_body); }), short_body.size());
  const Bytes long_body = ascii("P6 1 1 255 abcd");
  EXPECT_EQ(offset_of([&] { decode_ppm(long_body); }), long_body.size() - 1);
}

SimplicialComplex small_complex(Rng& rng, std::size_t n, std::size_t m) {
  SimplicialComplex k;
  const Tensor base = random_tensor({4, 4, 3}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    Simplex s{base, {}, 0.05};
    for (std::size_t j = 0; j < m; ++j) {
      Tensor v = base;
      for (std::size_t p = 0; p < v.size(); ++p) {
        v[p] = std::clamp(v[p] + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      }
      s.vertices.push_back(std::move(v));
    }
    k.simplices.push_back(std::move(s));
  }
  return k;
}

TEST(ComplexCodec, RoundTripIsBitExact) {
  Rng rng(3);
  const SimplicialComplex k = small_complex(rng, 3, 4);
  const Bytes b = encode_complex(k);
  EXPECT_EQ(decode_complex(b), k);
  EXPECT_EQ(encode_complex(decode_complex(b)), b);
}

TEST(ComplexCodec, RejectsBadInput) {
  Rng rng(4);
  SimplicialComplex k = small_complex(rng, 2, 3);
  const Bytes b = encode_complex(k);
  Bytes truncated(b.begin(), b.end() - 1);
  EXPECT_THROW(decode_complex(truncated), ParseError);
  Bytes trailing = b;
  trailing.push_back(1);
  EXPECT_EQ(offset_of([&] { decode_complex(trailing); }), b.size());
  EXPECT_EQ(offset_of([&] { decode_complex(ascii("VSCK")); }), 0u);
  k.simplices[1].vertices.pop_back();
  EXPECT_THROW(encode_complex(k), ParameterError);
  k.simplices[1].vertices.push_back(k.simplices[1].base_image);
  k.simplices[1].vertices[0][0] = 2.0;
  EXPECT_THROW(encode_complex(k), ParameterError);
}

TEST(CheckpointCodec, RoundTripPreservesEverything) {
  Rng rng(5);
  NetworkOptions opts;
  opts.adapters = true;
  opts.adapter_hidden = 6;
  opts.head_classes = 3;
  const Network net = Network::seeded(EncoderSpec{}, rng, opts);
  const Checkpoint c = decode_checkpoint(encode_checkpoint(net, Variant::adapter));
  EXPECT_EQ(c.variant, Variant::adapter);
  EXPECT_EQ(c.net.spec(), net.spec());
  EXPECT_EQ(c.net.options(), net.options());
  EXPECT_TRUE(std::equal(c.net.params().begin(), c.net.params().end(), net.params().begin(),
                         net.params().end()));
  const Tensor img = random_tensor(EncoderSpec{}.image_shape(), rng);
  EXPECT_EQ(c.net.logits(img), net.logits(img));
  EXPECT_FALSE(decode_checkpoint(encode_checkpoint(net)).variant.has_value());
}

TEST(CheckpointCodec, RejectsInconsistentHeaders) {
  Rng rng(6);
  const Network net = Network::seeded(EncoderSpec{}, rng);
  const Bytes good = encode_checkpoint(net, Variant::full);
  // Magic, then twelve u32 words: version, six spec fields, adapters,
  // adapter_hidden, head_classes, variant; the u64 count follows at 48.
  Bytes bad_count = good;
  bad_count[48] += 1;
  EXPECT_EQ(offset_of([&] { decode_checkpoint(bad_count); }), 48u);
  Bytes bad_variant = good;
  bad_variant[44] = 9;
  EXPECT_EQ(offset_of([&] { decode_checkpoint(bad_variant); }), 44u);
  Bytes bad_patch = good;
  bad_patch[4 + 4 * 3] = 5;  // patch_side 5 does not divide 32
  EXPECT_THROW(decode_checkpoint(bad_patch), ParseError);
  Bytes truncated(good.begin(), good.end() - 4);
  EXPECT_THROW(decode_checkpoint(truncated), ParseError);
  EXPECT_THROW(decode_checkpoint(ascii("VTNS")), ParseError);
}

TEST_F(TempDir, FilesRoundTripAndMissingFilesRaise) {
  Rng rng(7);
  const Tensor img = random_tensor({8, 8, 3}, rng);
  save_tensor(dir_ / "t.vtns", img, DType::f64);
  EXPECT_EQ(load_tensor(dir_ / "t.vtns"), img);
  save_image(dir_ / "i.ppm", img);
  const Tensor back = load_image(dir_ / "i.ppm");
  for (std::size_t i = 0; i < img.size(); ++i) EXPECT_NEAR(back[i], img[i], 0.5 / 255.0 + 1e-12);
  save_image(dir_ / "i.raw", img);
  EXPECT_EQ(load_image(dir_ / "i.raw").shape(), img.shape());
  const SimplicialComplex k = small_complex(rng, 2, 2);
  save_complex(dir_ / "k.vscx", k);
  EXPECT_EQ(load_complex(dir_ / "k.vscx"), k);
  EXPECT_THROW(load_tensor(dir_ / "missing.vtns"), IoError);
  EXPECT_THROW(write_bytes(dir_ / "no" / "such" / "dir", Bytes{1}), IoError);
}

}  // namespace
}  // namespace vesca
