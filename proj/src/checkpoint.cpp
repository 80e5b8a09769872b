#include "serann/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "serann/error.hpp"

namespace serann {
namespace {

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
  }
}

void put_u64_bits(std::string& out, std::uint64_t bits) { put_le<std::uint64_t>(out, bits); }

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw FormatError("container truncated at byte " + std::to_string(pos_));
    }
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const Blob* Container::find(std::string_view name) const {
  for (const auto& b : blobs) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

std::string serialize_container(const Container& container) {
  std::string out(kContainerMagic);
  put_le<std::uint16_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(container.metadata.size()));
  out += container.metadata;
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(container.blobs.size()));
  for (const auto& blob : container.blobs) {
    if (blob.name.size() > UINT16_MAX) throw FormatError("blob name too long: " + blob.name);
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(blob.name.size()));
    out += blob.name;
    out.push_back(static_cast<char>(blob.type));
    const auto& shape = blob.tensor.shape();
    if (shape.size() > UINT8_MAX) throw FormatError("blob rank too large: " + blob.name);
    out.push_back(static_cast<char>(shape.size()));
    for (auto d : shape) put_le<std::uint64_t>(out, d);
    for (double v : blob.tensor.values()) {
      if (blob.type == BlobType::kFloat32) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put_u64_bits(out, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  return out;
}

Container deserialize_container(std::string_view bytes) {
  Reader r(bytes);
  if (r.take(kContainerMagic.size()) != kContainerMagic) {
    throw FormatError("not a SERANN container (bad magic)");
  }
  const auto version = r.get<std::uint16_t>();
  if (version != kContainerVersion) {
    throw FormatError("unsupported SERANN container version " + std::to_string(version) +
                      " (supported: " + std::to_string(kContainerVersion) + ")");
  }
  Container c;
  c.metadata = std::string(r.take(r.get<std::uint32_t>()));
  const auto count = r.get<std::uint32_t>();
  c.blobs.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob blob;
    blob.name = std::string(r.take(r.get<std::uint16_t>()));
    const auto type = r.get<std::uint8_t>();
    if (type != 1 && type != 2) {
      throw FormatError("blob '" + blob.name + "' has unknown dtype " + std::to_string(type));
    }
    blob.type = static_cast<BlobType>(type);
    Shape shape(r.get<std::uint8_t>());
    for (auto& d : shape) d = static_cast<std::size_t>(r.get<std::uint64_t>());
    std::vector<double> values(shape_size(shape));
    for (auto& v : values) {
      if (blob.type == BlobType::kFloat32) {
        v = static_cast<double>(std::bit_cast<float>(r.get<std::uint32_t>()));
      } else {
        v = std::bit_cast<double>(r.get<std::uint64_t>());
      }
    }
    blob.tensor = Tensor(std::move(shape), std::move(values));
    c.blobs.push_back(std::move(blob));
  }
  if (!r.done()) throw FormatError("trailing bytes after container blobs");
  return c;
}

void write_container(const std::filesystem::path& path, const Container& container) {
  const std::string bytes = serialize_container(container);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_container(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

Container parameters_to_container(const ParameterList& params, std::string metadata) {
  Container c;
  c.metadata = std::move(metadata);
  for (const auto& p : params) {
    c.blobs.push_back(Blob{p.name, Tensor(p.tensor->shape(), std::vector<double>(
                                                                 p.tensor->values().begin(),
                                                                 p.tensor->values().end())),
                           BlobType::kFloat64});
  }
  return c;
}

void load_parameters(const Container& container, const ParameterList& params) {
  for (const auto& p : params) {
    const Blob* blob = container.find(p.name);
    if (!blob) throw FormatError("checkpoint lacks parameter '" + p.name + "'");
    if (blob->tensor.shape() != p.tensor->shape()) {
      throw FormatError("checkpoint parameter '" + p.name + "' has shape " +
                        shape_to_string(blob->tensor.shape()) + ", model expects " +
                        shape_to_string(p.tensor->shape()));
    }
    std::copy(blob->tensor.values().begin(), blob->tensor.values().end(),
              p.tensor->values().begin());
  }
}

}  // namespace serann
