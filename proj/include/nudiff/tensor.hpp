#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace nudiff {

// Dense row-major tensor of doubles. Activations use [N,C,H,W],
// conv kernels [Cout,Cin,Kh,Kw], vectors [D].
struct Tensor {
  std::vector<int> dims;
  std::vector<double> v;

  Tensor() = default;
  explicit Tensor(std::vector<int> d) : dims(std::move(d)), v(checked_numel(dims), 0.0) {}
  Tensor(std::vector<int> d, double fill) : dims(std::move(d)), v(checked_numel(dims), fill) {}

  static int64_t checked_numel(const std::vector<int>& d) {
    int64_t n = 1;
    for (int x : d) {
      if (x <= 0) throw std::invalid_argument("tensor dimension must be positive");
      n *= x;
    }
    return n;
  }

  int64_t numel() const { return static_cast<int64_t>(v.size()); }
  int rank() const { return static_cast<int>(dims.size()); }
  int dim(int i) const { return dims[static_cast<size_t>(i)]; }
  double* data() { return v.data(); }
  const double* data() const { return v.data(); }
  double& operator[](int64_t i) { return v[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return v[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return dims == o.dims; }
  void zero() { std::fill(v.begin(), v.end(), 0.0); }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

inline std::string shape_string(const Tensor& t) {
  std::string s = "[";
  for (int i = 0; i < t.rank(); ++i) {
    if (i) s += ",";
    s += std::to_string(t.dim(i));
  }
  return s + "]";
}

}  // namespace nudiff
