#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnet/arch.hpp"
#include "mmnet/quantization.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet {

enum class ModelFileErrorKind { io, bad_magic, unsupported_version, truncated, checksum, malformed, hash_mismatch, wrong_kind };

class ModelFileError : public std::runtime_error {
 public:
  ModelFileError(ModelFileErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ModelFileErrorKind kind() const { return kind_; }

 private:
  ModelFileErrorKind kind_;
};

enum class ModelKind : std::uint32_t { float_weights = 1, checkpoint = 2, quantized = 3 };
enum class DType : std::uint8_t { f32 = 0, u8 = 1, i32 = 2 };

std::size_t dtype_size(DType d);

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  QuantParams qparams;  // meaningful for u8
  std::vector<std::uint8_t> bytes;  // little-endian payload
};

/// Layout (all integers little-endian):
///   "MMNETMF\0" | u32 version | u32 kind | config | u64 architecture hash
///   | u32 metadata count, {str key, str value}...
///   | u32 quant-param count, {str name, qparams}...
///   | u32 tensor count, {str name, u8 dtype, 4 x u32 shape, qparams, u64 offset, u64 length}...
///   | u64 payload length | payload | u64 FNV-1a checksum of everything before it
/// where str is u32 length + bytes, qparams is f32 scale, u8 zero point, f32 min, f32 max.
struct ModelFile {
  static constexpr std::uint32_t kVersion = 1;

  ModelKind kind = ModelKind::float_weights;
  MMNetConfig config;
  std::uint64_t architecture_hash = 0;
  std::map<std::string, std::string> metadata;
  std::map<std::string, QuantParams> quant_params;
  std::vector<TensorRecord> tensors;

  void add(const std::string& name, const Tensor& t);
  void add(const std::string& name, const QuantTensor& t);
  void add(const std::string& name, std::span<const std::int32_t> values);

  const TensorRecord* find(const std::string& name) const;
  const TensorRecord& require(const std::string& name) const;
  Tensor f32(const std::string& name) const;
  QuantTensor u8(const std::string& name) const;
  std::vector<std::int32_t> i32(const std::string& name) const;
  std::size_t payload_bytes() const;

  std::vector<std::uint8_t> serialize() const;
  static ModelFile parse(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static ModelFile load(const std::filesystem::path& path);
};

/// Raises hash_mismatch if the stored hash differs from the graph rebuilt from the stored config.
MMNetGraph verify_architecture(const ModelFile& file);

ModelFile make_float_file(const MMNetGraph& model, const ModelWeights& weights);
/// All f32 tensors whose names are graph weights.
ModelWeights weights_from_file(const ModelFile& file, const Graph& graph);

ModelFile make_quantized_file(const MMNetGraph& model, const QuantizedModel& q);
QuantizedModel quantized_from_file(const ModelFile& file, const MMNetGraph& model);

}  // namespace mmnet
