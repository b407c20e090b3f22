#pragma once

#include <Eigen/Dense>

#include <cmath>

#include "reid/errors.hpp"

namespace reid {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// C x H x W activation volume.
///
/// Stored as a row-major C x (H*W) matrix so that each channel is a
/// contiguous row and a band of image rows [h0, h1) is the column block
/// [h0*W, h1*W). This is also the on-disk channel-major order.
template <typename Scalar>
class FeatureMap {
 public:
  using Storage = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  FeatureMap() = default;

  FeatureMap(Index channels, Index height, Index width)
      : height_(height), width_(width), data_(Storage::Zero(channels, height * width)) {}

  FeatureMap(Index height, Index width, Storage data)
      : height_(height), width_(width), data_(std::move(data)) {
    if (data_.cols() != height_ * width_) {
      throw ShapeError("feature map storage does not match H*W");
    }
  }

  static FeatureMap Constant(Index channels, Index height, Index width, Scalar value) {
    return FeatureMap(height, width, Storage::Constant(channels, height * width, value));
  }

  /// Reinterprets a flat channel-major vector of length C*H*W.
  template <typename Derived>
  static FeatureMap FromFlat(const Eigen::MatrixBase<Derived>& flat, Index channels, Index height,
                             Index width) {
    if (flat.size() != channels * height * width) {
      throw ShapeError("flat payload does not match C*H*W");
    }
    Storage s(channels, height * width);
    for (Index c = 0; c < channels; ++c) {
      for (Index p = 0; p < height * width; ++p) {
        s(c, p) = static_cast<Scalar>(flat(c * height * width + p));
      }
    }
    return FeatureMap(height, width, std::move(s));
  }

  Index channels() const { return data_.rows(); }
  Index height() const { return height_; }
  Index width() const { return width_; }
  Index spatial() const { return height_ * width_; }

  Scalar& operator()(Index c, Index h, Index w) { return data_(c, h * width_ + w); }
  Scalar operator()(Index c, Index h, Index w) const { return data_(c, h * width_ + w); }

  const Storage& data() const { return data_; }
  Storage& data() { return data_; }

  /// Rows [first, first + count) of the image grid, all channels.
  FeatureMap row_band(Index first, Index count) const {
    return FeatureMap(count, width_, data_.middleCols(first * width_, count * width_));
  }

  Vector<Scalar> flat() const {
    Vector<Scalar> out(data_.size());
    for (Index c = 0; c < channels(); ++c) {
      out.segment(c * spatial(), spatial()) = data_.row(c).transpose();
    }
    return out;
  }

  bool same_shape(const FeatureMap& other) const {
    return channels() == other.channels() && height_ == other.height_ && width_ == other.width_;
  }

  bool all_finite() const { return data_.allFinite(); }

  bool operator==(const FeatureMap& other) const {
    return same_shape(other) && data_ == other.data_;
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Storage data_;
};

/// Per-channel spatial mean (global average pooling).
template <typename Scalar>
Vector<Scalar> global_average_pool(const FeatureMap<Scalar>& map) {
  return map.data().rowwise().mean();
}

template <typename Scalar>
Vector<Scalar> l2_normalized(const Vector<Scalar>& v) {
  const Scalar n = v.norm();
  if (!(n > Scalar(0))) throw DegenerateInputError("cannot L2-normalize a zero vector");
  return v / n;
}

}  // namespace reid
