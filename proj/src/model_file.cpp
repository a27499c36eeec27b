#include "mmnet/model_file.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string_view>

#include "mmnet/hash.hpp"

namespace mmnet {

namespace {

constexpr char kMagic[8] = {'M', 'M', 'N', 'E', 'T', 'M', 'F', '\0'};

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
  }
  void qparams(const QuantParams& p) {
    f32(p.scale);
    u8(p.zero_point);
    f32(p.min);
    f32(p.max);
  }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_) {
      throw ModelFileError(ModelFileErrorKind::truncated, "model file truncated at byte " + std::to_string(pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() {
    const auto s = take(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(s[i]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    const auto s = take(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(s[i]) << (8 * i);
    return v;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    const auto s = take(n);
    return std::string(s.begin(), s.end());
  }
  QuantParams qparams() {
    QuantParams p;
    p.scale = f32();
    p.zero_point = u8();
    p.min = f32();
    p.max = f32();
    return p;
  }
  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint64_t checksum(std::span<const std::uint8_t> bytes) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

std::size_t element_count(const Shape& s) {
  return static_cast<std::size_t>(s.n) * s.c * s.h * s.w;
}

ModelFileError malformed(const std::string& what) { return ModelFileError(ModelFileErrorKind::malformed, what); }

}  // namespace

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32:
    case DType::i32:
      return 4;
    case DType::u8:
      return 1;
  }
  return 0;
}

void ModelFile::add(const std::string& name, const Tensor& t) {
  TensorRecord r;
  r.name = name;
  r.dtype = DType::f32;
  r.shape = t.shape();
  Writer w;
  w.out.reserve(t.size() * 4);
  for (float v : t.data()) w.f32(v);
  r.bytes = std::move(w.out);
  tensors.push_back(std::move(r));
}

void ModelFile::add(const std::string& name, const QuantTensor& t) {
  TensorRecord r;
  r.name = name;
  r.dtype = DType::u8;
  r.shape = t.shape;
  r.qparams = t.params;
  r.bytes = t.data;
  tensors.push_back(std::move(r));
}

void ModelFile::add(const std::string& name, std::span<const std::int32_t> values) {
  TensorRecord r;
  r.name = name;
  r.dtype = DType::i32;
  r.shape = {static_cast<int>(values.size()), 1, 1, 1};
  Writer w;
  for (std::int32_t v : values) w.i32(v);
  r.bytes = std::move(w.out);
  tensors.push_back(std::move(r));
}

const TensorRecord* ModelFile::find(const std::string& name) const {
  for (const TensorRecord& r : tensors) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

const TensorRecord& ModelFile::require(const std::string& name) const {
  const TensorRecord* r = find(name);
  if (r == nullptr) throw malformed("model file has no tensor '" + name + "'");
  return *r;
}

Tensor ModelFile::f32(const std::string& name) const {
  const TensorRecord& r = require(name);
  if (r.dtype != DType::f32) throw malformed("tensor '" + name + "' is not f32");
  Reader rd(r.bytes);
  Tensor t(r.shape);
  for (float& v : t.data()) v = rd.f32();
  return t;
}

QuantTensor ModelFile::u8(const std::string& name) const {
  const TensorRecord& r = require(name);
  if (r.dtype != DType::u8) throw malformed("tensor '" + name + "' is not u8");
  QuantTensor q;
  q.shape = r.shape;
  q.params = r.qparams;
  q.data = r.bytes;
  return q;
}

std::vector<std::int32_t> ModelFile::i32(const std::string& name) const {
  const TensorRecord& r = require(name);
  if (r.dtype != DType::i32) throw malformed("tensor '" + name + "' is not i32");
  Reader rd(r.bytes);
  std::vector<std::int32_t> v(r.bytes.size() / 4);
  for (std::int32_t& x : v) x = rd.i32();
  return v;
}

std::size_t ModelFile::payload_bytes() const {
  std::size_t total = 0;
  for (const TensorRecord& r : tensors) total += r.bytes.size();
  return total;
}

std::vector<std::uint8_t> ModelFile::serialize() const {
  Writer w;
  w.out.insert(w.out.end(), std::begin(kMagic), std::end(kMagic));
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(kind));
  w.f32(config.width_multiplier);
  w.i32(config.input_size);
  w.i32(config.channel_rounding);
  w.u8(config.skip_connections ? 1 : 0);
  w.u64(architecture_hash);
  w.u32(static_cast<std::uint32_t>(metadata.size()));
  for (const auto& [k, v] : metadata) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(quant_params.size()));
  for (const auto& [k, p] : quant_params) {
    w.str(k);
    w.qparams(p);
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  std::uint64_t offset = 0;
  for (const TensorRecord& r : tensors) {
    w.str(r.name);
    w.u8(static_cast<std::uint8_t>(r.dtype));
    w.u32(static_cast<std::uint32_t>(r.shape.n));
    w.u32(static_cast<std::uint32_t>(r.shape.c));
    w.u32(static_cast<std::uint32_t>(r.shape.h));
    w.u32(static_cast<std::uint32_t>(r.shape.w));
    w.qparams(r.qparams);
    w.u64(offset);
    w.u64(r.bytes.size());
    offset += r.bytes.size();
  }
  w.u64(offset);
  for (const TensorRecord& r : tensors) w.out.insert(w.out.end(), r.bytes.begin(), r.bytes.end());
  w.u64(checksum(w.out));
  return std::move(w.out);
}

ModelFile ModelFile::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof kMagic) {
    if (!bytes.empty() && std::memcmp(bytes.data(), kMagic, bytes.size()) != 0) {
      throw ModelFileError(ModelFileErrorKind::bad_magic, "not a model file (bad magic)");
    }
    throw ModelFileError(ModelFileErrorKind::truncated, "model file truncated in header");
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw ModelFileError(ModelFileErrorKind::bad_magic, "not a model file (bad magic)");
  }
  Reader rd(bytes);
  rd.take(sizeof kMagic);
  const std::uint32_t version = rd.u32();
  if (version != kVersion) {
    throw ModelFileError(ModelFileErrorKind::unsupported_version,
                         "unsupported model file version " + std::to_string(version));
  }
  ModelFile f;
  const std::uint32_t kind = rd.u32();
  if (kind < 1 || kind > 3) throw malformed("unknown model kind " + std::to_string(kind));
  f.kind = static_cast<ModelKind>(kind);
  f.config.width_multiplier = rd.f32();
  f.config.input_size = rd.i32();
  f.config.channel_rounding = rd.i32();
  f.config.skip_connections = rd.u8() != 0;
  f.architecture_hash = rd.u64();
  const std::uint32_t meta = rd.u32();
  for (std::uint32_t i = 0; i < meta; ++i) {
    std::string k = rd.str();
    f.metadata[k] = rd.str();
  }
  const std::uint32_t qcount = rd.u32();
  for (std::uint32_t i = 0; i < qcount; ++i) {
    std::string k = rd.str();
    f.quant_params[k] = rd.qparams();
  }
  struct Entry {
    std::uint64_t offset, length;
  };
  const std::uint32_t count = rd.u32();
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord r;
    r.name = rd.str();
    const std::uint8_t dtype = rd.u8();
    if (dtype > 2) throw malformed("tensor '" + r.name + "' has unknown dtype " + std::to_string(dtype));
    r.dtype = static_cast<DType>(dtype);
    std::uint32_t dims[4];
    for (std::uint32_t& d : dims) d = rd.u32();
    for (std::uint32_t d : dims) {
      if (d == 0 || d > static_cast<std::uint32_t>(std::numeric_limits<int>::max())) {
        throw malformed("tensor '" + r.name + "' has an invalid shape");
      }
    }
    r.shape = {static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]), static_cast<int>(dims[3])};
    r.qparams = rd.qparams();
    const Entry e{rd.u64(), rd.u64()};
    if (e.length != element_count(r.shape) * dtype_size(r.dtype)) {
      throw malformed("tensor '" + r.name + "' byte length disagrees with its shape");
    }
    entries.push_back(e);
    f.tensors.push_back(std::move(r));
  }
  const std::uint64_t payload = rd.u64();
  if (payload > rd.remaining()) throw ModelFileError(ModelFileErrorKind::truncated, "model file payload truncated");
  // Offsets must tile the payload in table order without gaps or overlap.
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].offset != expected || entries[i].offset + entries[i].length > payload) {
      throw malformed("tensor '" + f.tensors[i].name + "' has an out-of-bounds or overlapping offset");
    }
    expected += entries[i].length;
  }
  if (expected != payload) throw malformed("payload length disagrees with the tensor table");
  const auto body = rd.take(payload);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto s = body.subspan(entries[i].offset, entries[i].length);
    f.tensors[i].bytes.assign(s.begin(), s.end());
  }
  const std::size_t checked = rd.pos();
  const std::uint64_t stored = rd.u64();
  if (rd.remaining() != 0) throw malformed("trailing bytes after model file checksum");
  if (stored != checksum(bytes.first(checked))) {
    throw ModelFileError(ModelFileErrorKind::checksum, "model file checksum mismatch (corrupted)");
  }
  return f;
}

void ModelFile::save(const std::filesystem::path& path) const {
  const std::vector<std::uint8_t> bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ModelFileError(ModelFileErrorKind::io, path.string() + ": cannot open for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ModelFileError(ModelFileErrorKind::io, path.string() + ": write failed");
}

ModelFile ModelFile::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFileError(ModelFileErrorKind::io, path.string() + ": cannot open model file");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse(bytes);
  } catch (const ModelFileError& e) {
    throw ModelFileError(e.kind(), path.string() + ": " + e.what());
  }
}

MMNetGraph verify_architecture(const ModelFile& file) {
  MMNetGraph g;
  try {
    g = build_mmnet(file.config);
  } catch (const ConfigError& e) {
    throw malformed(std::string("stored configuration is invalid: ") + e.what());
  }
  if (g.architecture_hash() != file.architecture_hash) {
    throw ModelFileError(ModelFileErrorKind::hash_mismatch,
                         "architecture hash mismatch: file was written for a different network");
  }
  return g;
}

ModelFile make_float_file(const MMNetGraph& model, const ModelWeights& weights) {
  check_weights(model.graph, weights);
  ModelFile f;
  f.kind = ModelKind::float_weights;
  f.config = model.config;
  f.architecture_hash = model.architecture_hash();
  for (const auto& [name, t] : weights.tensors) f.add(name, t);
  return f;
}

ModelWeights weights_from_file(const ModelFile& file, const Graph& graph) {
  ModelWeights w;
  for (const TensorRecord& r : file.tensors) {
    if (r.dtype == DType::f32 && r.name.find('.') != std::string::npos && r.name.rfind("adam.", 0) != 0) {
      w.tensors[r.name] = file.f32(r.name);
    }
  }
  check_weights(graph, w);
  return w;
}

ModelFile make_quantized_file(const MMNetGraph& model, const QuantizedModel& q) {
  ModelFile f;
  f.kind = ModelKind::quantized;
  f.config = model.config;
  f.architecture_hash = model.architecture_hash();
  for (const auto& [name, conv] : q.convs) {
    f.add(name + ".weight", conv.weight);
    f.add(name + ".bias", std::span<const std::int32_t>(conv.bias));
  }
  for (std::size_t i = 0; i < q.activations.size(); ++i) {
    f.quant_params["activation." + std::to_string(i) + "." + q.plan.ops[i].name] = q.activations[i];
  }
  QuantTensor lut;
  lut.shape = {1, 1, 256, 256};
  lut.params = q.lut.logit_params;
  lut.data = q.lut.table;
  f.add("softmax_lut", lut);
  return f;
}

QuantizedModel quantized_from_file(const ModelFile& file, const MMNetGraph& model) {
  if (file.kind != ModelKind::quantized) throw ModelFileError(ModelFileErrorKind::wrong_kind, "not a quantized model file");
  QuantizedModel q;
  q.config = model.config;
  q.plan = build_inference_plan(model);
  q.activations.resize(q.plan.ops.size());
  for (std::size_t i = 0; i < q.plan.ops.size(); ++i) {
    const std::string key = "activation." + std::to_string(i) + "." + q.plan.ops[i].name;
    const auto it = file.quant_params.find(key);
    if (it == file.quant_params.end()) throw malformed("missing quantization record '" + key + "'");
    q.activations[i] = it->second;
    const FusedOp& op = q.plan.ops[i];
    if (op.kind == FusedKind::conv) {
      QuantizedConv c;
      c.weight = file.u8(op.name + ".weight");
      c.bias = file.i32(op.name + ".bias");
      q.convs[op.name] = std::move(c);
    }
  }
  const QuantTensor lut = file.u8("softmax_lut");
  if (lut.data.size() != 65536) throw malformed("softmax table must hold 65,536 entries");
  q.lut.logit_params = lut.params;
  q.lut.table = lut.data;
  return q;
}

}  // namespace mmnet
