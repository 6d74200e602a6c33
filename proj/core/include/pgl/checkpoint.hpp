#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pgl/common.hpp"
#include "pgl/networks.hpp"

namespace pgl {

/// PGLCKPT1 container: the 8 magic bytes, a u64 entry count, then a manifest
/// of (u32 name length, name bytes, u8 dtype code, u8 rank, u64 dims[rank])
/// records, followed by the raw little-endian values in manifest order.
/// Dtype codes: 0 = float32, 1 = float64, 2 = uint64, 3 = uint8.
class Checkpoint {
 public:
  enum class Dtype : std::uint8_t { kF32 = 0, kF64 = 1, kU64 = 2, kU8 = 3 };

  struct Array {
    Dtype dtype = Dtype::kF32;
    std::vector<std::int64_t> dims;
    std::vector<float> f32;
    std::vector<std::uint64_t> u64;
    std::vector<std::uint8_t> u8;

    std::int64_t count() const;
  };

  void add_f32(const std::string& name, std::vector<std::int64_t> dims, std::vector<float> values);
  void add_u64(const std::string& name, std::vector<std::uint64_t> values);
  void add_u8(const std::string& name, std::vector<std::uint8_t> values);

  bool contains(const std::string& name) const;
  const Array& at(const std::string& name) const;
  const std::vector<std::string>& names() const { return order_; }

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);

 private:
  void add(const std::string& name, Array array);

  std::vector<std::string> order_;
  std::unordered_map<std::string, Array> entries_;
};

/// Serializes every tensor of a store under `prefix` + name.
void add_param_store(Checkpoint& ckpt, const std::string& prefix, const ParamStore& store);

/// Restores every tensor of `store` from `prefix` + name, verifying shapes.
/// Throws IoError listing all missing or mismatched keys.
void load_param_store(const Checkpoint& ckpt, const std::string& prefix, ParamStore& store);

}  // namespace pgl
