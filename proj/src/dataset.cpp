#include "retinet/dataset.hpp"

#include "retinet/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <set>

namespace retinet {
namespace {

static_assert(std::endian::native == std::endian::little, "OCTV I/O assumes a little-endian host");

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in, const char* what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw DataError(std::string("truncated header (") + what + ")");
  return value;
}

}  // namespace

void save_volume(const Volume& volume, const std::filesystem::path& path) {
  volume.validate();
  constexpr auto kMax = std::numeric_limits<std::uint32_t>::max();
  if (volume.width() > kMax || volume.bscan_count() > kMax || volume.depth() > kMax)
    throw DataError("volume dimensions exceed format limits");

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(kVolumeMagic, 4);
  put<std::uint32_t>(out, kVolumeVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(volume.width()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(volume.bscan_count()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(volume.depth()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(volume.label()));
  put<std::uint8_t>(out, static_cast<std::uint8_t>(volume.laterality()));
  out.write(reinterpret_cast<const char*>(volume.voxels().data()),
            static_cast<std::streamsize>(volume.size() * sizeof(float)));
  if (!out) throw DataError("I/O failure writing '" + path.string() + "'");
}

Volume load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kVolumeMagic, 4) != 0)
    throw DataError("bad magic in '" + path.string() + "'");
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kVolumeVersion)
    throw DataError("version mismatch: expected " + std::to_string(kVolumeVersion) + ", found " +
                    std::to_string(version));
  const auto w = get<std::uint32_t>(in, "width");
  const auto h = get<std::uint32_t>(in, "bscans");
  const auto d = get<std::uint32_t>(in, "depth");
  const auto label = get<std::uint8_t>(in, "label");
  const auto laterality = get<std::uint8_t>(in, "laterality");
  if (label > 1) throw DataError("invalid label code " + std::to_string(label));
  if (laterality > 2) throw DataError("invalid laterality code " + std::to_string(laterality));
  if (w == 0 || h == 0 || d == 0) throw DataError("volume dimensions must be >= 1");

  Volume volume(path.stem().string(), w, h, d, static_cast<ClassLabel>(label),
                static_cast<Laterality>(laterality));
  const auto bytes = static_cast<std::streamsize>(volume.size() * sizeof(float));
  in.read(reinterpret_cast<char*>(volume.voxels().data()), bytes);
  if (in.gcount() != bytes) throw DataError("truncated payload in '" + path.string() + "'");
  if (in.peek() != std::char_traits<char>::eof())
    throw DataError("trailing bytes after payload in '" + path.string() + "'");
  volume.validate();
  return volume;
}

void DatasetManifest::validate(bool check_files) const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (e.id.empty()) throw DataError("manifest entry with empty id");
    if (!seen.insert(e.id).second) throw DataError("duplicate manifest id '" + e.id + "'");
    if (check_files && !std::filesystem::exists(e.path))
      throw DataError("missing file '" + e.path.string() + "' for entry '" + e.id + "'");
  }
}

const ManifestEntry& DatasetManifest::find(const std::string& id) const {
  auto it = std::find_if(entries.begin(), entries.end(), [&](const auto& e) { return e.id == id; });
  if (it == entries.end()) throw DataError("no manifest entry '" + id + "'");
  return *it;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest '" + path.string() + "': " + e.what());
  }

  DatasetManifest manifest;
  try {
    manifest.seed = doc.at("seed").get<std::uint64_t>();
    const auto base = path.parent_path();
    for (const auto& item : doc.at("entries")) {
      ManifestEntry e;
      e.id = item.at("id").get<std::string>();
      std::filesystem::path p = item.at("path").get<std::string>();
      e.path = p.is_absolute() ? p : base / p;
      const auto& label = item.at("label");
      e.label = label.is_number() ? parse_label(std::to_string(label.get<int>()))
                                  : parse_label(label.get<std::string>());
      e.laterality = parse_laterality(item.value("laterality", std::string("?")));
      manifest.entries.push_back(std::move(e));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest '" + path.string() + "': " + e.what());
  }
  manifest.validate(true);
  return manifest;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  manifest.validate(false);
  static constexpr const char* kLat[] = {"L", "R", "?"};
  nlohmann::json doc;
  doc["seed"] = manifest.seed;
  doc["entries"] = nlohmann::json::array();
  const auto base = path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path();
  for (const auto& e : manifest.entries) {
    std::error_code ec;
    auto rel = std::filesystem::relative(e.path, base, ec);
    doc["entries"].push_back({{"id", e.id},
                              {"path", (ec || rel.empty() ? e.path : rel).generic_string()},
                              {"label", static_cast<int>(e.label)},
                              {"laterality", kLat[static_cast<int>(e.laterality)]}});
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out << doc.dump(2) << '\n';
}

std::vector<Fold> split_folds(const DatasetManifest& manifest, int k, std::uint64_t seed) {
  if (k < 2) throw ConfigError("fold count must be >= 2");
  if (manifest.entries.size() < static_cast<std::size_t>(k))
    throw ConfigError("fold count " + std::to_string(k) + " larger than entry count " +
                      std::to_string(manifest.entries.size()));

  std::vector<std::string> controls, amd;
  for (const auto& e : manifest.entries)
    (e.label == ClassLabel::Amd ? amd : controls).push_back(e.id);

  std::mt19937_64 rng(seed);
  std::shuffle(controls.begin(), controls.end(), rng);
  std::shuffle(amd.begin(), amd.end(), rng);

  // Dealing the concatenated strata round-robin keeps both the fold sizes and
  // the per-label counts within one of each other.
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  std::size_t slot = 0;
  for (const auto* group : {&controls, &amd})
    for (const auto& id : *group) folds[slot++ % folds.size()].push_back(id);
  return folds;
}

std::vector<Volume> load_volumes(const DatasetManifest& manifest) {
  manifest.validate(true);
  std::vector<Volume> volumes;
  for (const auto& e : manifest.entries) {
    Volume v = load_volume(e.path);
    if (v.label() != e.label)
      throw DataError("label of " + e.path.string() + " disagrees with the manifest entry " + e.id);
    v.set_id(e.id);
    volumes.push_back(std::move(v));
  }
  return volumes;
}

}  // namespace retinet
