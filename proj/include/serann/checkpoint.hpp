#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "serann/tensor.hpp"

namespace serann {

/// Versioned binary container of named float arrays.
///
/// Layout (all integers little-endian):
///   "SERANN" | u16 version | u32 metadata bytes | metadata (UTF-8 JSON)
///   | u32 blob count | blobs...
/// Each blob: u16 name bytes | name | u8 dtype (1 = f32, 2 = f64)
///   | u8 rank | u64 dims[rank] | raw little-endian values.
inline constexpr std::string_view kContainerMagic = "SERANN";
inline constexpr std::uint16_t kContainerVersion = 1;

enum class BlobType : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

struct Blob {
  std::string name;
  Tensor tensor;
  BlobType type = BlobType::kFloat64;
};

struct Container {
  std::string metadata;
  std::vector<Blob> blobs;

  const Blob* find(std::string_view name) const;
};

std::string serialize_container(const Container& container);
Container deserialize_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

/// Parameters stored as float64 so reloading is bit-exact.
Container parameters_to_container(const ParameterList& params, std::string metadata);
/// Copies blobs into `params` by name; throws FormatError on missing names
/// or shape disagreements.
void load_parameters(const Container& container, const ParameterList& params);

}  // namespace serann
