#pragma once

#include "retinet/volume.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace retinet {

// OCTV layout: "OCTV", u32 version, u32 W, u32 H, u32 D, u8 label,
// u8 laterality, then W*H*D little-endian f32 in [h][d][w] order.
inline constexpr char kVolumeMagic[4] = {'O', 'C', 'T', 'V'};
inline constexpr std::uint32_t kVolumeVersion = 1;
inline constexpr std::size_t kVolumeHeaderBytes = 22;

void save_volume(const Volume& volume, const std::filesystem::path& path);

/// The id of the returned volume is the file stem; the format does not store it.
Volume load_volume(const std::filesystem::path& path);

struct ManifestEntry {
  std::string id;
  std::filesystem::path path;
  ClassLabel label = ClassLabel::Control;
  Laterality laterality = Laterality::Unknown;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;

  /// Unique ids; when `check_files` every path must exist.
  void validate(bool check_files) const;
  const ManifestEntry& find(const std::string& id) const;
};

/// Relative entry paths are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
/// Loads every entry, checks its label against the file and sets the id.
std::vector<Volume> load_volumes(const DatasetManifest& manifest);

/// Entry paths are written relative to the manifest's directory when possible.
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

using Fold = std::vector<std::string>;

/// Stratified k-way partition of the manifest ids, driven only by `seed`.
/// Fold sizes differ by at most one, and so do per-label counts.
std::vector<Fold> split_folds(const DatasetManifest& manifest, int k, std::uint64_t seed);

}  // namespace retinet
