#include "dedetr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "dedetr/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO writes host byte order and assumes little-endian");

namespace dedetr {

namespace {

constexpr char kMagic[4] = {'D', 'E', 'D', 'T'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError(std::string("checkpoint truncated while reading ") + what);
  return v;
}

}  // namespace

void write_tensor_record(std::ostream& out, const TensorRecord& rec) {
  put<uint32_t>(out, static_cast<uint32_t>(rec.name.size()));
  out.write(rec.name.data(), static_cast<std::streamsize>(rec.name.size()));
  put<uint32_t>(out, static_cast<uint32_t>(rec.dims.size()));
  for (int64_t d : rec.dims) put<uint64_t>(out, static_cast<uint64_t>(d));
  out.write(reinterpret_cast<const char*>(rec.data.data()),
            static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
}

TensorRecord read_tensor_record(std::istream& in) {
  TensorRecord rec;
  const uint32_t name_len = get<uint32_t>(in, "name length");
  rec.name.resize(name_len);
  in.read(rec.name.data(), name_len);
  if (!in) throw IoError("checkpoint truncated while reading a tensor name");
  const uint32_t rank = get<uint32_t>(in, "rank");
  if (rank > 8) throw IoError("checkpoint tensor rank " + std::to_string(rank) + " is implausible");
  int64_t numel = 1;
  for (uint32_t i = 0; i < rank; ++i) {
    const uint64_t d = get<uint64_t>(in, "dim");
    if (d == 0 || d > (1ull << 32)) throw IoError("checkpoint dim out of range");
    rec.dims.push_back(static_cast<int64_t>(d));
    numel *= static_cast<int64_t>(d);
  }
  rec.data.resize(static_cast<size_t>(numel));
  in.read(reinterpret_cast<char*>(rec.data.data()),
          static_cast<std::streamsize>(rec.data.size() * sizeof(float)));
  if (!in) throw IoError("checkpoint truncated while reading tensor data");
  return rec;
}

void save_checkpoint(const std::string& path, const nlohmann::json& config,
                     const std::vector<std::pair<std::string, Tensor>>& params) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  put<uint32_t>(out, kVersion);
  const std::string cfg = config.dump();
  put<uint64_t>(out, cfg.size());
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  put<uint32_t>(out, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    TensorRecord rec;
    rec.name = name;
    rec.dims = t.dims();
    rec.data.reserve(t.values().size());
    for (double v : t.values()) rec.data.push_back(static_cast<float>(v));
    write_tensor_record(out, rec);
  }
  if (!out) throw IoError("write to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError(path + " is not a checkpoint (bad magic)");
  const uint32_t version = get<uint32_t>(in, "version");
  if (version != kVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  const uint64_t cfg_len = get<uint64_t>(in, "config length");
  if (cfg_len > (1ull << 30)) throw IoError("checkpoint config block is implausibly large");
  std::string cfg(cfg_len, '\0');
  in.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!in) throw IoError("checkpoint truncated while reading config");
  Checkpoint ck;
  ck.config = nlohmann::json::parse(cfg, nullptr, false);
  if (ck.config.is_discarded()) throw IoError("checkpoint config is not valid JSON");
  const uint32_t count = get<uint32_t>(in, "tensor count");
  ck.tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) ck.tensors.push_back(read_tensor_record(in));
  return ck;
}

void restore_params(const Checkpoint& ck, std::vector<std::pair<std::string, Tensor>>& params) {
  if (ck.tensors.size() != params.size())
    throw ShapeError("checkpoint holds " + std::to_string(ck.tensors.size()) +
                     " tensors, model has " + std::to_string(params.size()));
  for (auto& [name, t] : params) {
    const TensorRecord* rec = nullptr;
    for (const TensorRecord& r : ck.tensors)
      if (r.name == name) {
        rec = &r;
        break;
      }
    if (!rec) throw ShapeError("checkpoint is missing tensor " + name);
    if (rec->dims != t.dims())
      throw ShapeError("checkpoint tensor " + name + " is " + shape_str(rec->dims) +
                       ", model expects " + shape_str(t.dims()));
    for (size_t i = 0; i < rec->data.size(); ++i)
      t.values()[i] = static_cast<double>(rec->data[i]);
  }
}

}  // namespace dedetr
