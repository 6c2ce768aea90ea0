#include "culab/tensor.h"

#include <cmath>
#include <sstream>

#include "culab/error.h"

namespace culab {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_.empty()) throw DimensionError("tensor shape must have rank >= 1");
  for (auto d : shape_) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_string(shape_));
  }
  if (values_.size() != shape_numel(shape_)) {
    throw DimensionError("tensor of shape " + shape_string(shape_) + " needs " +
                         std::to_string(shape_numel(shape_)) + " values, got " +
                         std::to_string(values_.size()));
  }
}

Tensor::Tensor(Shape shape, double fill) : Tensor(shape, std::vector<double>(shape_numel(shape), fill)) {}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(v));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}

std::size_t Tensor::rows() const {
  if (shape_.size() == 1) return 1;
  if (shape_.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (shape_.size() == 1) return shape_[0];
  if (shape_.size() != 2) throw DimensionError("expected rank-2 tensor, got " + shape_string(shape_));
  return shape_[1];
}

std::span<const double> Tensor::row(std::size_t r) const {
  if (r >= rows()) {
    throw DimensionError("row " + std::to_string(r) + " out of range for " + shape_string(shape_));
  }
  const std::size_t c = cols();
  return std::span<const double>(values_).subspan(r * c, c);
}

double Tensor::item() const {
  if (values_.size() != 1) throw ContractError("item() on non-scalar tensor " + shape_string(shape_));
  return values_[0];
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::select_rows(std::span<const std::size_t> indices) const {
  const std::size_t c = cols();
  const std::size_t r = rows();
  std::vector<double> out;
  out.reserve(indices.size() * c);
  for (auto i : indices) {
    if (i >= r) throw DimensionError("row index " + std::to_string(i) + " out of range for " + shape_string(shape_));
    auto src = row(i);
    out.insert(out.end(), src.begin(), src.end());
  }
  if (indices.empty()) throw DimensionError("select_rows with no indices");
  return Tensor({indices.size(), c}, std::move(out));
}

}  // namespace culab
