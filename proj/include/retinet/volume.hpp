#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace retinet {

enum class ClassLabel : std::uint8_t { Control = 0, Amd = 1 };
enum class Laterality : std::uint8_t { Left = 0, Right = 1, Unknown = 2 };

std::string_view to_string(ClassLabel label);
std::string_view to_string(Laterality laterality);
ClassLabel parse_label(std::string_view text);
Laterality parse_laterality(std::string_view text);
Laterality mirrored(Laterality laterality);

/// Dense 2-D image, rows index depth and columns index width.
template <typename Scalar>
using Image = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// One cross-section of a volume (depth x width).
using BScan = Image<float>;

/// W x H x D intensity grid. Voxels are stored B-scan major, then depth row,
/// then width, so that `bscan(h)` is a contiguous block.
class Volume {
 public:
  using ConstBScanMap = Eigen::Map<const BScan>;
  using BScanMap = Eigen::Map<BScan>;

  Volume() = default;
  Volume(std::string id, Eigen::Index width, Eigen::Index bscans, Eigen::Index depth,
         ClassLabel label = ClassLabel::Control, Laterality laterality = Laterality::Unknown);

  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }
  ClassLabel label() const { return label_; }
  void set_label(ClassLabel label) { label_ = label; }
  Laterality laterality() const { return laterality_; }
  void set_laterality(Laterality l) { laterality_ = l; }

  Eigen::Index width() const { return width_; }
  Eigen::Index bscan_count() const { return bscans_; }
  Eigen::Index depth() const { return depth_; }
  std::size_t size() const { return voxels_.size(); }

  float& operator()(Eigen::Index h, Eigen::Index d, Eigen::Index w) {
    return voxels_[static_cast<std::size_t>((h * depth_ + d) * width_ + w)];
  }
  float operator()(Eigen::Index h, Eigen::Index d, Eigen::Index w) const {
    return voxels_[static_cast<std::size_t>((h * depth_ + d) * width_ + w)];
  }

  ConstBScanMap bscan(Eigen::Index h) const {
    return ConstBScanMap(voxels_.data() + h * depth_ * width_, depth_, width_);
  }
  BScanMap bscan(Eigen::Index h) {
    return BScanMap(voxels_.data() + h * depth_ * width_, depth_, width_);
  }

  std::vector<float>& voxels() { return voxels_; }
  const std::vector<float>& voxels() const { return voxels_; }

  /// Checks dimension and finiteness invariants; throws DataError.
  void validate() const;

  /// Equality of content (dimensions, voxels bitwise, label, laterality). The id is ignored.
  bool same_content(const Volume& other) const;

 private:
  std::string id_;
  Eigen::Index width_ = 0;
  Eigen::Index bscans_ = 0;
  Eigen::Index depth_ = 0;
  ClassLabel label_ = ClassLabel::Control;
  Laterality laterality_ = Laterality::Unknown;
  std::vector<float> voxels_;
};

/// Copy of cross-section h. Throws std::out_of_range when h is not in [0, H).
BScan extract_bscan(const Volume& volume, Eigen::Index h);

/// Width-axis flip with laterality swapped; label and id are kept.
Volume flip_width(const Volume& volume);

}  // namespace retinet
