#include "retinet/volume.hpp"

#include "retinet/error.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace retinet {

std::string_view to_string(ClassLabel label) {
  return label == ClassLabel::Amd ? "amd" : "control";
}

std::string_view to_string(Laterality laterality) {
  switch (laterality) {
    case Laterality::Left:
      return "left";
    case Laterality::Right:
      return "right";
    default:
      return "unknown";
  }
}

ClassLabel parse_label(std::string_view text) {
  if (text == "control" || text == "0") return ClassLabel::Control;
  if (text == "amd" || text == "1") return ClassLabel::Amd;
  throw DataError("unknown class label '" + std::string(text) + "'");
}

Laterality parse_laterality(std::string_view text) {
  if (text == "left" || text == "L") return Laterality::Left;
  if (text == "right" || text == "R") return Laterality::Right;
  if (text == "unknown" || text == "?") return Laterality::Unknown;
  throw DataError("unknown laterality '" + std::string(text) + "'");
}

Laterality mirrored(Laterality laterality) {
  switch (laterality) {
    case Laterality::Left:
      return Laterality::Right;
    case Laterality::Right:
      return Laterality::Left;
    default:
      return Laterality::Unknown;
  }
}

Volume::Volume(std::string id, Eigen::Index width, Eigen::Index bscans, Eigen::Index depth,
               ClassLabel label, Laterality laterality)
    : id_(std::move(id)),
      width_(width),
      bscans_(bscans),
      depth_(depth),
      label_(label),
      laterality_(laterality) {
  if (width < 0 || bscans < 0 || depth < 0) throw DataError("negative volume dimension");
  voxels_.assign(static_cast<std::size_t>(width * bscans * depth), 0.0f);
}

void Volume::validate() const {
  if (width_ < 1 || bscans_ < 1 || depth_ < 1) throw DataError("volume dimensions must be >= 1");
  if (voxels_.size() != static_cast<std::size_t>(width_ * bscans_ * depth_))
    throw DataError("voxel buffer length does not match dimensions");
  for (float v : voxels_)
    if (!std::isfinite(v)) throw DataError("non-finite voxel");
}

bool Volume::same_content(const Volume& other) const {
  return width_ == other.width_ && bscans_ == other.bscans_ && depth_ == other.depth_ &&
         label_ == other.label_ && laterality_ == other.laterality_ &&
         voxels_.size() == other.voxels_.size() &&
         (voxels_.empty() ||
          std::memcmp(voxels_.data(), other.voxels_.data(), voxels_.size() * sizeof(float)) == 0);
}

BScan extract_bscan(const Volume& volume, Eigen::Index h) {
  if (h < 0 || h >= volume.bscan_count())
    throw std::out_of_range("B-scan index " + std::to_string(h) + " out of range [0, " +
                            std::to_string(volume.bscan_count()) + ")");
  return volume.bscan(h);
}

Volume flip_width(const Volume& volume) {
  Volume out(volume.id(), volume.width(), volume.bscan_count(), volume.depth(), volume.label(),
             mirrored(volume.laterality()));
  for (Eigen::Index h = 0; h < volume.bscan_count(); ++h)
    out.bscan(h) = volume.bscan(h).rowwise().reverse();
  return out;
}

}  // namespace retinet
