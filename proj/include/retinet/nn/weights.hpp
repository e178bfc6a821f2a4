#pragma once

#include "retinet/error.hpp"
#include "retinet/nn/network.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>

namespace retinet::nn {

static_assert(std::endian::native == std::endian::little, "weights I/O assumes a little-endian host");

inline constexpr char kWeightsMagic[4] = {'R', 'N', 'T', 'W'};
inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw DataError("truncated weights file " + path.string());
  return v;
}

}  // namespace detail

/// Every parameter, running statistics included, in layer order. The count
/// field holds the number of parameter entries.
template <typename Scalar>
void save_weights(const Network<Scalar>& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(kWeightsMagic, 4);
  detail::put<std::uint32_t>(out, kWeightsVersion);
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(net.parameter_names().size()));
  for (Index i = 0; i < net.layer_count(); ++i)
    for (const auto& p : net.parameters(i)) {
      if (p.name.size() > std::numeric_limits<std::uint16_t>::max()) throw DataError("parameter name too long");
      detail::put<std::uint16_t>(out, static_cast<std::uint16_t>(p.name.size()));
      out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
      detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(p.value.rank()));
      for (Index d : p.value.shape()) detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
      const Eigen::ArrayXf v = p.value.values().template cast<float>();
      out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
  if (!out) throw DataError("write failed for " + path.string());
}

/// Loads into an already-built network; names and shapes must match exactly.
template <typename Scalar>
void load_weights(const std::filesystem::path& path, Network<Scalar>& net) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing file " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || !std::equal(magic, magic + 4, kWeightsMagic))
    throw DataError("bad magic in " + path.string());
  const auto version = detail::get<std::uint32_t>(in, path);
  if (version != kWeightsVersion) throw DataError("unsupported version " + std::to_string(version));
  const auto count = detail::get<std::uint32_t>(in, path);
  if (count != net.parameter_names().size())
    throw DataError("shape mismatch: file has " + std::to_string(count) + " entries, network " +
                    std::to_string(net.parameter_names().size()));

  // Parse everything first so a failed load leaves `net` untouched.
  std::vector<Eigen::ArrayXf> values;
  for (Index i = 0; i < net.layer_count(); ++i)
    for (const auto& p : net.parameters(i)) {
      std::string name(detail::get<std::uint16_t>(in, path), '\0');
      if (!in.read(name.data(), static_cast<std::streamsize>(name.size()))) throw DataError("truncated weights file");
      if (name != p.name) throw DataError("name mismatch: expected " + p.name + ", found " + name);
      Shape shape(detail::get<std::uint8_t>(in, path));
      for (auto& d : shape) d = detail::get<std::uint32_t>(in, path);
      if (shape != p.value.shape())
        throw DataError("shape mismatch: " + name + " is " + to_string(shape) + ", expected " +
                        to_string(p.value.shape()));
      Eigen::ArrayXf v(p.value.size());
      if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(float))))
        throw DataError("truncated weights file " + path.string());
      if (!v.allFinite()) throw DataError("non-finite weight in " + name);
      values.push_back(std::move(v));
    }
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("trailing bytes in " + path.string());
  std::size_t k = 0;
  for (Index i = 0; i < net.layer_count(); ++i)
    for (auto& p : net.parameters(i)) p.value.values() = values[k++].template cast<Scalar>();
}

}  // namespace retinet::nn
