#include "dear/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <vector>

#include "dear/encoders.hpp"
#include "dear/errors.hpp"

namespace dear {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'D', 'E', 'A', 'R'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T)))
    throw TruncatedError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

void get_bytes(std::istream& in, char* dst, std::size_t n, const char* what) {
  if (n && !in.read(dst, static_cast<std::streamsize>(n)))
    throw TruncatedError(std::string("checkpoint truncated while reading ") + what);
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.size() > 0xffff) throw CheckpointError("tensor name too long: " + name.substr(0, 32) + "...");
    if (t.rank() > 0xff) throw CheckpointError("tensor rank too large: " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint8_t>(out, 0);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data().data()), static_cast<std::streamsize>(t.numel() * sizeof(double)));
  }
  put<std::uint64_t>(out, ckpt.config_json.size());
  out.write(ckpt.config_json.data(), static_cast<std::streamsize>(ckpt.config_json.size()));
  if (!out) throw CheckpointError("checkpoint write failed");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[4] = {};
  if (!in.read(magic, 4)) {
    if (in.gcount() == 0) throw TruncatedError("checkpoint is empty");
    throw TruncatedError("checkpoint truncated inside the magic");
  }
  if (std::memcmp(magic, kMagic, 4) != 0) throw BadMagicError("not a checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw VersionMismatchError("checkpoint version " + std::to_string(version) + ", expected " +
                               std::to_string(kCheckpointVersion));
  const auto count = get<std::uint32_t>(in, "tensor count");
  Checkpoint ckpt;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint16_t>(in, "name length");
    std::string name(len, '\0');
    get_bytes(in, name.data(), len, "name");
    const auto dtype = get<std::uint8_t>(in, "dtype");
    if (dtype != 0) throw CheckpointError("tensor " + name + ": unsupported dtype " + std::to_string(dtype));
    const auto rank = get<std::uint8_t>(in, "rank");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& d : shape) {
      d = get<std::uint64_t>(in, "dims");
      numel *= d;
    }
    std::vector<double> values(numel);
    get_bytes(in, reinterpret_cast<char*>(values.data()), numel * sizeof(double), "payload");
    if (!ckpt.tensors.emplace(name, Tensor::from(shape, std::move(values))).second)
      throw CheckpointError("duplicate tensor name " + name);
  }
  const auto blob = get<std::uint64_t>(in, "config length");
  ckpt.config_json.resize(blob);
  get_bytes(in, ckpt.config_json.data(), blob, "config");
  if (in.peek() != std::char_traits<char>::eof()) throw CheckpointError("trailing bytes after checkpoint");
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path + " for writing");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return read_checkpoint(in);
}

Checkpoint checkpoint_from_model(Model& model, std::string config_json) {
  Checkpoint ckpt;
  for (auto& [name, t] : model.named_tensors()) ckpt.tensors.emplace(name, t->detach());
  ckpt.config_json = std::move(config_json);
  return ckpt;
}

void apply_checkpoint(Model& model, const Checkpoint& ckpt) {
  for (auto& [name, t] : model.named_tensors()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw CheckpointError("checkpoint lacks tensor " + name);
    if (it->second.shape() != t->shape())
      throw ShapeError("checkpoint tensor " + name + " has shape " + shape_str(it->second.shape()) + ", model expects " +
                       shape_str(t->shape()));
    std::ranges::copy(it->second.data(), t->mutable_data().begin());
  }
}

}  // namespace dear
