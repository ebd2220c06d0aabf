#include "glscl/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace glscl {

namespace {

constexpr char kMagic[4] = {'G', 'L', 'S', 'C'};
constexpr uint32_t kVersion = 1;

void put_bytes(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}
void put_u32(std::string& out, uint32_t v) { put_bytes(out, &v, 4); }
void put_u64(std::string& out, uint64_t v) { put_bytes(out, &v, 8); }
void put_u8(std::string& out, uint8_t v) { put_bytes(out, &v, 1); }

template <typename T>
uint8_t dtype_code() {
  return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
void put_tensor(std::string& out, const std::string& name, const Shape& shape,
                const std::vector<T>& values) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  put_bytes(out, name.data(), name.size());
  put_u8(out, dtype_code<T>());
  put_u8(out, static_cast<uint8_t>(shape.size()));
  for (int64_t d : shape) put_u64(out, static_cast<uint64_t>(d));
  size_t bytes = values.size() * sizeof(T);
  put_bytes(out, values.data(), bytes);
  uint32_t crc = static_cast<uint32_t>(
      crc32(0, reinterpret_cast<const Bytef*>(values.data()), static_cast<uInt>(bytes)));
  put_u32(out, crc);
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}

  void bytes(void* p, size_t n) {
    if (pos_ + n > data_.size()) throw CheckpointError("truncated checkpoint file");
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  uint32_t u32() {
    uint32_t v;
    bytes(&v, 4);
    return v;
  }
  uint64_t u64() {
    uint64_t v;
    bytes(&v, 8);
    return v;
  }
  uint8_t u8() {
    uint8_t v;
    bytes(&v, 1);
    return v;
  }
  std::string str(size_t n) {
    if (pos_ + n > data_.size()) throw CheckpointError("truncated checkpoint file");
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  std::string data_;
  size_t pos_ = 0;
};

template <typename T>
std::pair<std::string, Tensor<T>> read_tensor(Reader& r) {
  std::string name = r.str(r.u32());
  uint8_t dtype = r.u8();
  if (dtype != dtype_code<T>())
    throw CheckpointError("tensor " + name + " has dtype code " + std::to_string(dtype) +
                          ", expected " + std::to_string(dtype_code<T>()));
  uint8_t rank = r.u8();
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<int64_t>(r.u64());
  std::vector<T> values(static_cast<size_t>(shape_numel(shape)));
  r.bytes(values.data(), values.size() * sizeof(T));
  uint32_t crc = static_cast<uint32_t>(crc32(
      0, reinterpret_cast<const Bytef*>(values.data()), static_cast<uInt>(values.size() * sizeof(T))));
  uint32_t want = r.u32();
  if (crc != want)
    throw CheckpointError("checksum failure for tensor " + name);
  return {name, Tensor<T>::from(std::move(shape), std::move(values))};
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const TrainState<T>& state) {
  std::string out;
  put_bytes(out, kMagic, 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<uint32_t>(state.config_text.size()));
  put_bytes(out, state.config_text.data(), state.config_text.size());

  const auto& entries = state.model.params().entries;
  put_u32(out, static_cast<uint32_t>(entries.size()));
  for (const auto& e : entries) put_tensor<T>(out, e.name, e.tensor.shape(), e.tensor.values());

  put_u32(out, static_cast<uint32_t>(2 * entries.size()));
  for (size_t i = 0; i < entries.size(); ++i)
    put_tensor<T>(out, "m." + entries[i].name, entries[i].tensor.shape(), state.opt.m[i]);
  for (size_t i = 0; i < entries.size(); ++i)
    put_tensor<T>(out, "v." + entries[i].name, entries[i].tensor.shape(), state.opt.v[i]);

  put_u64(out, state.rng.state());
  put_u64(out, state.rng.inc());
  put_u64(out, static_cast<uint64_t>(state.step));
  put_u8(out, state.stage);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open " + path + " for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw CheckpointError("write failed for " + path);
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  Reader r(std::move(data));

  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw CheckpointError("bad magic bytes");
  uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError("unsupported format version " + std::to_string(version));

  LoadedCheckpoint<T> out;
  out.config_text = r.str(r.u32());
  uint32_t count = r.u32();
  for (uint32_t i = 0; i < count; ++i) out.tensors.push_back(read_tensor<T>(r));
  uint32_t opt_count = r.u32();
  for (uint32_t i = 0; i < opt_count; ++i) out.opt_tensors.push_back(read_tensor<T>(r));
  out.rng_state = r.u64();
  out.rng_inc = r.u64();
  out.step = r.u64();
  out.stage = r.u8();
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return out;
}

template <typename T>
void restore_into(TrainState<T>& state, const LoadedCheckpoint<T>& ckpt,
                  bool extend_temporal) {
  auto& ps = state.model.params();
  std::string problems;
  auto complain = [&](const std::string& msg) {
    if (!problems.empty()) problems += "; ";
    problems += msg;
  };

  std::vector<bool> seen(ps.entries.size(), false);
  auto place = [&](const std::string& name, const Tensor<T>& src,
                   std::vector<T>* opt_slot) -> void {
    auto it = ps.index.find(name);
    if (it == ps.index.end()) {
      complain("unknown tensor " + name);
      return;
    }
    auto& entry = ps.entries[it->second];
    std::vector<T>& dst = opt_slot ? *opt_slot : entry.tensor.values();
    if (src.shape() == entry.tensor.shape()) {
      if (!opt_slot) seen[it->second] = true;
      dst = src.values();
      return;
    }
    if (extend_temporal && name == "vision.pos_temporal" && src.rank() == 2 &&
        src.dim(1) == entry.tensor.dim(1) && src.dim(0) < entry.tensor.dim(0)) {
      // Replicate the trained first-frame row into the new frame slots so a
      // constant video reproduces the single-frame representation.
      const int64_t d = src.dim(1);
      for (int64_t row = 0; row < entry.tensor.dim(0); ++row) {
        int64_t from = row < src.dim(0) ? row : 0;
        std::copy(src.values().begin() + from * d, src.values().begin() + (from + 1) * d,
                  dst.begin() + row * d);
      }
      if (!opt_slot) seen[it->second] = true;
      return;
    }
    complain(name + " has shape " + shape_str(src.shape()) + ", model expects " +
             shape_str(entry.tensor.shape()));
  };

  for (const auto& [name, tensor] : ckpt.tensors) place(name, tensor, nullptr);
  for (const auto& [name, tensor] : ckpt.opt_tensors) {
    if (name.size() < 3 || name[1] != '.' || (name[0] != 'm' && name[0] != 'v')) {
      complain("malformed optimizer tensor name " + name);
      continue;
    }
    std::string base = name.substr(2);
    auto it = ps.index.find(base);
    if (it == ps.index.end()) {
      complain("unknown tensor " + base);
      continue;
    }
    auto& slots = name[0] == 'm' ? state.opt.m : state.opt.v;
    place(base, tensor, &slots[it->second]);
  }
  for (size_t i = 0; i < seen.size(); ++i)
    if (!seen[i]) complain("missing tensor " + ps.entries[i].name);
  if (!problems.empty()) throw CheckpointError("checkpoint/model mismatch: " + problems);

  state.rng.restore(ckpt.rng_state, ckpt.rng_inc);
  state.step = static_cast<int64_t>(ckpt.step);
  state.opt.step = state.step;
  state.stage = ckpt.stage;
  state.config_text = ckpt.config_text;
}

#define GLSCL_CKPT_INSTANTIATE(T)                                               \
  template void save_checkpoint<T>(const std::string&, const TrainState<T>&);   \
  template LoadedCheckpoint<T> load_checkpoint<T>(const std::string&);          \
  template void restore_into<T>(TrainState<T>&, const LoadedCheckpoint<T>&, bool);

GLSCL_CKPT_INSTANTIATE(float)
GLSCL_CKPT_INSTANTIATE(double)

}  // namespace glscl
