#include "vesca/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>

namespace vesca {

static_assert(std::endian::native == std::endian::little,
              "binary containers assume a little-endian host");

namespace {

constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  void magic(const char (&m)[5]) { out_.insert(out_.end(), m, m + 4); }
  template <typename T>
  void put(T v) {
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.insert(out_.end(), buf, buf + sizeof(T));
  }
  void u32(std::size_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
      throw ParameterError("value " + std::to_string(v) + " does not fit in 32 bits");
    }
    put(static_cast<std::uint32_t>(v));
  }
  void u64(std::size_t v) { put(static_cast<std::uint64_t>(v)); }
  void shape(const Shape& s) {
    u32(s.size());
    for (std::size_t d : s) u64(d);
  }
  void values(std::span<const double> v, DType dtype) {
    for (double x : v) {
      if (dtype == DType::f32) {
        put(static_cast<float>(x));
      } else {
        put(x);
      }
    }
  }
  Bytes take() { return std::move(out_); }

 private:
  Bytes out_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const char* what) : in_(bytes), what_(what) {}

  void magic(const char (&m)[5]) {
    need(4, "magic");
    if (std::memcmp(in_.data(), m, 4) != 0) {
      throw ParseError(std::string(what_) + ": bad magic, expected '" + m + "'", 0);
    }
    pos_ = 4;
  }
  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::uint32_t u32(const char* field) { return get<std::uint32_t>(field); }
  std::size_t u64(const char* field) {
    const std::uint64_t v = get<std::uint64_t>(field);
    if (v > std::numeric_limits<std::uint32_t>::max()) fail(std::string(field) + " is too large");
    return static_cast<std::size_t>(v);
  }
  void version() {
    const std::size_t at = pos_;
    const auto v = u32("version");
    if (v != kVersion) {
      throw ParseError(std::string(what_) + ": unsupported version " + std::to_string(v), at);
    }
  }
  Shape shape() {
    const std::size_t at = pos_;
    const std::uint32_t rank = u32("rank");
    if (rank > 8) throw ParseError(std::string(what_) + ": rank " + std::to_string(rank), at);
    Shape s(rank);
    for (auto& d : s) d = u64("dimension");
    return s;
  }
  std::vector<double> values(std::size_t count, DType dtype) {
    const std::size_t width = dtype == DType::f32 ? 4 : 8;
    if (count > (in_.size() - pos_) / width) need(count * width, "values");
    std::vector<double> v(count);
    for (auto& x : v) x = dtype == DType::f32 ? get<float>("value") : get<double>("value");
    return v;
  }
  void finish() {
    if (pos_ != in_.size()) fail("trailing bytes");
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError(std::string(what_) + ": " + msg, pos_);
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (in_.size() - pos_ < n) {
      throw ParseError(std::string(what_) + ": truncated while reading " + field, in_.size());
    }
  }

  std::span<const std::uint8_t> in_;
  const char* what_;
  std::size_t pos_ = 0;
};

DType read_dtype(Reader& r) {
  const std::size_t at = r.pos();
  const auto code = r.u32("dtype");
  if (code != 1 && code != 2) {
    throw ParseError("tensor: unknown dtype code " + std::to_string(code), at);
  }
  return static_cast<DType>(code);
}

Tensor read_tensor(Reader& r, DType dtype) {
  Shape s = r.shape();
  std::size_t n = 1;
  for (std::size_t d : s) {
    if (d != 0 && n > std::numeric_limits<std::uint32_t>::max() / d) r.fail("tensor too large");
    n *= d;
  }
  return Tensor(std::move(s), r.values(n, dtype));
}

bool has_magic(std::span<const std::uint8_t> bytes, const char* m, std::size_t len) {
  return bytes.size() >= len && std::memcmp(bytes.data(), m, len) == 0;
}

}  // namespace

Bytes read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  Bytes bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return bytes;
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

Bytes encode_tensor(const Tensor& t, DType dtype) {
  Writer w;
  w.magic("VTNS");
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(dtype));
  w.shape(t.shape());
  w.values(t.values(), dtype);
  return w.take();
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "tensor");
  r.magic("VTNS");
  r.version();
  const DType dtype = read_dtype(r);
  Tensor t = read_tensor(r, dtype);
  r.finish();
  return t;
}

Bytes encode_ppm(const Tensor& image) {
  if (image.rank() != 3 || image.channels() != 3) {
    throw ShapeError("PPM needs an H x W x 3 image, got " + shape_string(image.shape()));
  }
  const std::string header = "P6\n" + std::to_string(image.width()) + " " +
                             std::to_string(image.height()) + "\n255\n";
  Bytes out(header.begin(), header.end());
  out.reserve(out.size() + image.size());
  for (double v : image.values()) {
    out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  }
  return out;
}

Tensor decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& msg) -> void { throw ParseError("ppm: " + msg, pos); };
  if (!has_magic(bytes, "P6", 2)) fail("expected 'P6' magic");
  pos = 2;
  auto skip_space = [&] {
    for (;;) {
      if (pos >= bytes.size()) fail("truncated header");
      const char c = static_cast<char>(bytes[pos]);
      if (c == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos;
      } else {
        return;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
      v = v * 10 + (bytes[pos] - '0');
      ++pos;
      if (++digits > 6) fail(std::string(field) + " is too large");
    }
    if (digits == 0) fail(std::string("expected ") + field);
    return v;
  };
  if (pos < bytes.size() && bytes[pos] != ' ' && bytes[pos] != '\t' && bytes[pos] != '\n' &&
      bytes[pos] != '\r' && bytes[pos] != '#') {
    fail("expected whitespace after magic");
  }
  const std::size_t width = number("width");
  const std::size_t height = number("height");
  const std::size_t maxval = number("maxval");
  if (width == 0 || height == 0) fail("zero image dimension");
  if (maxval == 0 || maxval > 255) fail("maxval must be in 1..255");
  if (pos >= bytes.size()) fail("truncated header");
  const char sep = static_cast<char>(bytes[pos]);
  if (sep != ' ' && sep != '\t' && sep != '\n' && sep != '\r') {
    fail("expected single whitespace before pixel data");
  }
  ++pos;
  const std::size_t count = width * height * 3;
  if (bytes.size() - pos < count) {
    pos = bytes.size();
    fail("truncated pixel data");
  }
  if (bytes.size() - pos > count) {
    pos += count;
    fail("trailing bytes");
  }
  Tensor image = Tensor::image(height, width, 3);
  for (std::size_t i = 0; i < count; ++i) {
    image[i] = static_cast<double>(bytes[pos + i]) / static_cast<double>(maxval);
  }
  return image;
}

void save_image(const std::filesystem::path& path, const Tensor& image) {
  if (path.extension() == ".ppm") {
    write_bytes(path, encode_ppm(image));
  } else {
    write_bytes(path, encode_tensor(image, DType::f32));
  }
}

Tensor load_image(const std::filesystem::path& path) {
  const Bytes bytes = read_bytes(path);
  if (has_magic(bytes, "P6", 2)) return decode_ppm(bytes);
  return decode_tensor(bytes);
}

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype) {
  write_bytes(path, encode_tensor(t, dtype));
}

Tensor load_tensor(const std::filesystem::path& path) { return decode_tensor(read_bytes(path)); }

Bytes encode_complex(const SimplicialComplex& k) {
  validate(k);
  Writer w;
  w.magic("VSCX");
  w.u32(kVersion);
  const auto& first = k.simplices.front();
  w.u32(k.simplices.size());
  w.u32(first.vertices.size());
  w.put(first.epsilon);
  w.shape(first.base_image.shape());
  w.values(first.base_image.values(), DType::f64);
  for (const auto& s : k.simplices) {
    if (s.vertices.size() != first.vertices.size() || s.epsilon != first.epsilon ||
        s.base_image != first.base_image) {
      throw ParameterError("complex simplices must share base image, epsilon and size");
    }
    for (const auto& v : s.vertices) w.values(v.values(), DType::f64);
  }
  return w.take();
}

SimplicialComplex decode_complex(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "complex");
  r.magic("VSCX");
  r.version();
  const std::size_t n = r.u32("simplex count");
  const std::size_t m = r.u32("vertex count");
  if (n == 0 || m == 0) r.fail("empty complex");
  const double eps = r.get<double>("epsilon");
  Tensor base = read_tensor(r, DType::f64);
  if (static_cast<double>(n) * static_cast<double>(m) * static_cast<double>(base.size()) * 8.0 >
      static_cast<double>(bytes.size())) {
    throw ParseError("complex: truncated vertex data", bytes.size());
  }
  SimplicialComplex k;
  for (std::size_t i = 0; i < n; ++i) {
    Simplex s{base, {}, eps};
    for (std::size_t j = 0; j < m; ++j) {
      s.vertices.emplace_back(base.shape(), r.values(base.size(), DType::f64));
    }
    k.simplices.push_back(std::move(s));
  }
  r.finish();
  return k;
}

void save_complex(const std::filesystem::path& path, const SimplicialComplex& k) {
  write_bytes(path, encode_complex(k));
}

SimplicialComplex load_complex(const std::filesystem::path& path) {
  return decode_complex(read_bytes(path));
}

Bytes encode_checkpoint(const Network& net, std::optional<Variant> variant) {
  const EncoderSpec& s = net.spec();
  const NetworkOptions& o = net.options();
  Writer w;
  w.magic("VSCK");
  w.u32(kVersion);
  for (std::size_t v : {s.image_side, s.channels, s.patch_side, s.embed_dim, s.num_blocks,
                        s.mlp_hidden}) {
    w.u32(v);
  }
  w.u32(o.adapters ? 1 : 0);
  w.u32(o.adapter_hidden);
  w.u32(o.head_classes);
  w.u32(variant ? static_cast<std::uint32_t>(*variant) + 1 : 0);
  w.u64(net.params().size());
  for (float p : net.params()) w.put(p);
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes, "checkpoint");
  r.magic("VSCK");
  r.version();
  EncoderSpec s;
  s.image_side = r.u32("image_side");
  s.channels = r.u32("channels");
  s.patch_side = r.u32("patch_side");
  s.embed_dim = r.u32("embed_dim");
  s.num_blocks = r.u32("num_blocks");
  s.mlp_hidden = r.u32("mlp_hidden");
  NetworkOptions o;
  const std::size_t flag_at = r.pos();
  const auto adapters = r.u32("adapters");
  if (adapters > 1) throw ParseError("checkpoint: adapters flag must be 0 or 1", flag_at);
  o.adapters = adapters == 1;
  o.adapter_hidden = r.u32("adapter_hidden");
  o.head_classes = r.u32("head_classes");
  const std::size_t variant_at = r.pos();
  const auto tag = r.u32("variant");
  if (tag > 3) throw ParseError("checkpoint: unknown variant tag", variant_at);
  Checkpoint out;
  if (tag > 0) out.variant = static_cast<Variant>(tag - 1);
  try {
    out.net = Network(s, o);
  } catch (const Error& e) {
    throw ParseError(std::string("checkpoint: invalid spec header: ") + e.what(), variant_at);
  }
  const std::size_t count_at = r.pos();
  const std::size_t count = r.u64("parameter count");
  if (count != out.net.params().size()) {
    throw ParseError("checkpoint: parameter count " + std::to_string(count) +
                         " does not match the header (" +
                         std::to_string(out.net.params().size()) + ")",
                     count_at);
  }
  std::vector<float> p(count);
  for (auto& x : p) x = r.get<float>("parameter");
  r.finish();
  out.net.set_params(p);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Network& net,
                     std::optional<Variant> variant) {
  write_bytes(path, encode_checkpoint(net, variant));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(read_bytes(path));
}

}  // namespace vesca
