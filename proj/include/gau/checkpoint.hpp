#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "gau/tensor.hpp"

namespace gau {

// File layout (all integers little-endian):
//   "GAUC" | version u32 | count u32 |
//   count x { name_len u16 | name | rank u8 | extents u32[rank] | dtype u8 | data }
inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  std::string name;
  Shape shape;
  DType dtype = DType::float32;
  std::vector<float> f32;   // used when dtype == float32
  std::vector<double> f64;  // used when dtype == float64

  size_t size() const { return dtype == DType::float32 ? f32.size() : f64.size(); }
};

template <class T>
CheckpointTensor to_checkpoint(const std::string& name, const Tensor<T>& t);

// Copies `entry` into `dst`; throws CheckpointError naming the tensor when
// shape or dtype differ.
template <class T>
void restore_tensor(const CheckpointTensor& entry, Tensor<T>& dst);

// Writes to a temporary sibling and renames, so a crash never leaves a
// partially written file under `path`.
void write_checkpoint(const std::filesystem::path& path, std::span<const CheckpointTensor> tensors);
std::vector<CheckpointTensor> read_checkpoint(const std::filesystem::path& path);

std::vector<uint8_t> encode_checkpoint(std::span<const CheckpointTensor> tensors);
std::vector<CheckpointTensor> decode_checkpoint(std::span<const uint8_t> bytes);

}  // namespace gau
