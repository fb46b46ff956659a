#pragma once

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>

namespace moex {

using Index = Eigen::Index;

/// Shape of a rank-4 tensor in N×C×H×W order.
struct Shape4 {
  Index n = 0, c = 0, h = 0, w = 0;

  constexpr Index size() const { return n * c * h * w; }
  constexpr Index plane() const { return h * w; }
  constexpr Index instance() const { return c * h * w; }

  friend constexpr bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline void require_shape(bool ok, const char* op, const Shape4& a, const Shape4& b) {
  if (!ok) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.str() + " vs " + b.str());
  }
}

/// Dense rank-4 tensor, row-major contiguous (w fastest).
template <typename Scalar>
class Tensor4 {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor4() = default;
  explicit Tensor4(Shape4 shape) : shape_(shape), data_(Array::Zero(shape.size())) {}
  Tensor4(Index n, Index c, Index h, Index w) : Tensor4(Shape4{n, c, h, w}) {}
  Tensor4(Shape4 shape, Scalar fill) : shape_(shape), data_(Array::Constant(shape.size(), fill)) {}

  static Tensor4 scalar(Scalar v) { return Tensor4(Shape4{1, 1, 1, 1}, v); }

  const Shape4& shape() const { return shape_; }
  Index size() const { return data_.size(); }

  Array& array() { return data_; }
  const Array& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Index offset(Index n, Index c, Index h, Index w) const {
    return ((n * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  Scalar& operator()(Index n, Index c, Index h, Index w) { return data_[offset(n, c, h, w)]; }
  Scalar operator()(Index n, Index c, Index h, Index w) const { return data_[offset(n, c, h, w)]; }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Row-major (rows × cols) view; rows*cols must equal size().
  Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> matrix(Index rows,
                                                                                          Index cols) {
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> matrix(
      Index rows, Index cols) const {
    return {data_.data(), rows, cols};
  }

  Scalar item() const {
    if (data_.size() != 1) throw ShapeError("item(): tensor is not a scalar, shape " + shape_.str());
    return data_[0];
  }

  bool all_finite() const { return data_.allFinite(); }

  void set_zero() { data_.setZero(); }

  template <typename Other>
  Tensor4<Other> cast() const {
    Tensor4<Other> out(shape_);
    out.array() = data_.template cast<Other>();
    return out;
  }

 private:
  Shape4 shape_{};
  Array data_;
};

template <typename Scalar>
Scalar max_abs_diff(const Tensor4<Scalar>& a, const Tensor4<Scalar>& b) {
  require_shape(a.shape() == b.shape(), "max_abs_diff", a.shape(), b.shape());
  if (a.size() == 0) return Scalar(0);
  return (a.array() - b.array()).abs().maxCoeff();
}

}  // namespace moex
