#include "distdnas/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace distdnas {

Shape::Shape(std::initializer_list<Index> d) {
  if (d.size() < 1 || d.size() > 3) throw ShapeError("tensor rank must be 1..3");
  rank = static_cast<int>(d.size());
  std::copy(d.begin(), d.end(), dims.begin());
}

Index Shape::size() const {
  if (rank == 0) return 0;
  Index n = 1;
  for (int i = 0; i < rank; ++i) n *= dims[static_cast<std::size_t>(i)];
  return n;
}

std::string Shape::str() const {
  std::ostringstream os;
  os << '(';
  for (int i = 0; i < rank; ++i) os << (i ? ", " : "") << dims[static_cast<std::size_t>(i)];
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  for (int i = 0; i < shape.rank; ++i)
    if (shape[i] < 1) throw ShapeError("tensor dims must be >= 1, got " + shape.str());
  data_.assign(static_cast<std::size_t>(shape.size()), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(values.begin(), values.end()) {
  if (static_cast<Index>(data_.size()) != shape.size())
    throw ShapeError("tensor of shape " + shape.str() + " given " + std::to_string(data_.size()) +
                     " values");
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::reshaped(Shape s) const {
  if (s.size() != shape_.size())
    throw ShapeError("reshape " + shape_.str() + " -> " + s.str() + " changes element count");
  Tensor out;
  out.shape_ = s;
  out.data_ = data_;
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace distdnas
