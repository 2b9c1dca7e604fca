#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "vesca/encoder.hpp"
#include "vesca/errors.hpp"
#include "vesca/geometry.hpp"
#include "vesca/tensor.hpp"

namespace vesca {

// File could not be opened, read or written.
class IoError : public Error {
 public:
  using Error::Error;
};

using Bytes = std::vector<std::uint8_t>;

Bytes read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Raw tensor container, little-endian:
//   "VTNS" | u32 version (1) | u32 dtype (1 = f32, 2 = f64) | u32 rank |
//   u64 dims[rank] | values in row-major order
enum class DType : std::uint32_t { f32 = 1, f64 = 2 };

Bytes encode_tensor(const Tensor& t, DType dtype = DType::f32);
Tensor decode_tensor(std::span<const std::uint8_t> bytes);

// Binary PPM (P6), 8 bits per channel. Pixels map to k / maxval on load and
// round to the nearest of 0..255 on save.
Bytes encode_ppm(const Tensor& image);
Tensor decode_ppm(std::span<const std::uint8_t> bytes);

// Chooses the format from the extension (".ppm", otherwise raw f32) on save
// and from the leading magic bytes on load.
void save_image(const std::filesystem::path& path, const Tensor& image);
Tensor load_image(const std::filesystem::path& path);

void save_tensor(const std::filesystem::path& path, const Tensor& t, DType dtype);
Tensor load_tensor(const std::filesystem::path& path);

// Simplicial complex container, little-endian, values as f64:
//   "VSCX" | u32 version (1) | u32 N | u32 M | f64 epsilon | u32 rank |
//   u64 dims[rank] | base image | N * M vertices, simplex-major
Bytes encode_complex(const SimplicialComplex& k);
SimplicialComplex decode_complex(std::span<const std::uint8_t> bytes);
void save_complex(const std::filesystem::path& path, const SimplicialComplex& k);
SimplicialComplex load_complex(const std::filesystem::path& path);

// Network checkpoint, little-endian:
//   "VSCK" | u32 version (1) | u32 image_side, channels, patch_side,
//   embed_dim, num_blocks, mlp_hidden | u32 adapters (0/1) |
//   u32 adapter_hidden | u32 head_classes | u32 variant (0 = none,
//   1 = frozen, 2 = adapter, 3 = full) | u64 count | f32 params[count]
// Parameters follow Network::layout() order, each slice row-major.
struct Checkpoint {
  Network net;
  std::optional<Variant> variant;
};

Bytes encode_checkpoint(const Network& net, std::optional<Variant> variant = std::nullopt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const std::filesystem::path& path, const Network& net,
                     std::optional<Variant> variant = std::nullopt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace vesca
