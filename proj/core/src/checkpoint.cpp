#include "pgl/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace pgl {

namespace {
constexpr char kMagic[8] = {'P', 'G', 'L', 'C', 'K', 'P', 'T', '1'};
}

std::int64_t Checkpoint::Array::count() const {
  std::int64_t n = 1;
  for (std::int64_t d : dims) {
    n *= d;
  }
  return n;
}

void Checkpoint::add(const std::string& name, Array array) {
  if (entries_.contains(name)) {
    throw IoError("Checkpoint: duplicate entry " + name);
  }
  order_.push_back(name);
  entries_.emplace(name, std::move(array));
}

void Checkpoint::add_f32(const std::string& name, std::vector<std::int64_t> dims,
                         std::vector<float> values) {
  Array array;
  array.dtype = Dtype::kF32;
  array.dims = std::move(dims);
  array.f32 = std::move(values);
  if (array.count() != static_cast<std::int64_t>(array.f32.size())) {
    throw IoError("Checkpoint: value count does not match dims for " + name);
  }
  add(name, std::move(array));
}

void Checkpoint::add_u64(const std::string& name, std::vector<std::uint64_t> values) {
  Array array;
  array.dtype = Dtype::kU64;
  array.dims = {static_cast<std::int64_t>(values.size())};
  array.u64 = std::move(values);
  add(name, std::move(array));
}

void Checkpoint::add_u8(const std::string& name, std::vector<std::uint8_t> values) {
  Array array;
  array.dtype = Dtype::kU8;
  array.dims = {static_cast<std::int64_t>(values.size())};
  array.u8 = std::move(values);
  add(name, std::move(array));
}

bool Checkpoint::contains(const std::string& name) const { return entries_.contains(name); }

const Checkpoint::Array& Checkpoint::at(const std::string& name) const {
  const auto it = entries_.find(name);
  if (it == entries_.end()) {
    throw IoError("Checkpoint: missing entry " + name);
  }
  return it->second;
}

void Checkpoint::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw IoError("Checkpoint::save: cannot open " + path + " for writing");
  }
  out.write(kMagic, 8);
  const std::uint64_t count = order_.size();
  out.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto& name : order_) {
    const Array& a = entries_.at(name);
    const auto name_len = static_cast<std::uint32_t>(name.size());
    out.write(reinterpret_cast<const char*>(&name_len), 4);
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const auto dtype = static_cast<std::uint8_t>(a.dtype);
    out.write(reinterpret_cast<const char*>(&dtype), 1);
    const auto rank = static_cast<std::uint8_t>(a.dims.size());
    out.write(reinterpret_cast<const char*>(&rank), 1);
    for (std::int64_t d : a.dims) {
      const auto u = static_cast<std::uint64_t>(d);
      out.write(reinterpret_cast<const char*>(&u), 8);
    }
  }
  for (const auto& name : order_) {
    const Array& a = entries_.at(name);
    switch (a.dtype) {
      case Dtype::kF32:
        out.write(reinterpret_cast<const char*>(a.f32.data()),
                  static_cast<std::streamsize>(a.f32.size() * sizeof(float)));
        break;
      case Dtype::kU64:
        out.write(reinterpret_cast<const char*>(a.u64.data()),
                  static_cast<std::streamsize>(a.u64.size() * sizeof(std::uint64_t)));
        break;
      case Dtype::kU8:
        out.write(reinterpret_cast<const char*>(a.u8.data()),
                  static_cast<std::streamsize>(a.u8.size()));
        break;
      case Dtype::kF64:
        throw IoError("Checkpoint::save: float64 entries are not produced by this build");
    }
  }
  if (!out) {
    throw IoError("Checkpoint::save: write to " + path + " failed");
  }
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("Checkpoint::load: cannot open " + path);
  }
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0) {
    throw IoError("Checkpoint::load: " + path + " has bad magic (not a PGLCKPT1 file)");
  }
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  if (!in) {
    throw IoError("Checkpoint::load: " + path + " truncated in header");
  }

  Checkpoint ckpt;
  struct Pending {
    std::string name;
    Dtype dtype;
    std::vector<std::int64_t> dims;
  };
  std::vector<Pending> manifest;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::uint32_t name_len = 0;
    in.read(reinterpret_cast<char*>(&name_len), 4);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    std::uint8_t dtype = 0, rank = 0;
    in.read(reinterpret_cast<char*>(&dtype), 1);
    in.read(reinterpret_cast<char*>(&rank), 1);
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) {
      std::uint64_t u = 0;
      in.read(reinterpret_cast<char*>(&u), 8);
      d = static_cast<std::int64_t>(u);
    }
    if (!in) {
      throw IoError("Checkpoint::load: " + path + " truncated in manifest");
    }
    if (dtype > 3) {
      throw IoError("Checkpoint::load: " + path + " has unknown dtype code " +
                    std::to_string(dtype) + " for " + name);
    }
    manifest.push_back({std::move(name), static_cast<Dtype>(dtype), std::move(dims)});
  }
  for (auto& entry : manifest) {
    std::int64_t n = 1;
    for (std::int64_t d : entry.dims) {
      n *= d;
    }
    Array array;
    array.dtype = entry.dtype;
    array.dims = std::move(entry.dims);
    switch (entry.dtype) {
      case Dtype::kF32:
        array.f32.resize(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(array.f32.data()),
                static_cast<std::streamsize>(array.f32.size() * sizeof(float)));
        break;
      case Dtype::kU64:
        array.u64.resize(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(array.u64.data()),
                static_cast<std::streamsize>(array.u64.size() * sizeof(std::uint64_t)));
        break;
      case Dtype::kU8:
        array.u8.resize(static_cast<std::size_t>(n));
        in.read(reinterpret_cast<char*>(array.u8.data()), static_cast<std::streamsize>(array.u8.size()));
        break;
      case Dtype::kF64:
        throw IoError("Checkpoint::load: float64 entries are not supported by this build");
    }
    if (!in) {
      throw IoError("Checkpoint::load: " + path + " truncated in data section at " + entry.name);
    }
    ckpt.add(entry.name, std::move(array));
  }
  return ckpt;
}

void add_param_store(Checkpoint& ckpt, const std::string& prefix, const ParamStore& store) {
  for (const auto& name : store.names()) {
    const Tensor32& t = store.at(name);
    ckpt.add_f32(prefix + name, t.shape(), std::vector<float>(t.data().begin(), t.data().end()));
  }
}

void load_param_store(const Checkpoint& ckpt, const std::string& prefix, ParamStore& store) {
  std::string problems;
  for (const auto& name : store.names()) {
    const std::string key = prefix + name;
    if (!ckpt.contains(key)) {
      problems += "  missing: " + key + "\n";
      continue;
    }
    const auto& array = ckpt.at(key);
    Tensor32& t = store.at(name);
    if (array.dtype != Checkpoint::Dtype::kF32 || Shape(array.dims) != t.shape()) {
      problems += "  shape/dtype mismatch: " + key + "\n";
      continue;
    }
    auto dst = t.mutable_data();
    std::copy(array.f32.begin(), array.f32.end(), dst.begin());
  }
  if (!problems.empty()) {
    throw IoError("load_param_store: incompatible checkpoint keys:\n" + problems);
  }
}

}  // namespace pgl
