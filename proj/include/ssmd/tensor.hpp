#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <random>
#include <stdexcept>

namespace ssmd {

using Array = Eigen::ArrayXd;

/// Dense value tensor in (channel, row, col) layout.
/// Flat index: (c * h + y) * w + x. A scalar is shaped (1,1,1).
struct Tensor {
  int c = 0, h = 0, w = 0;
  Array data;

  Tensor() = default;
  Tensor(int c_, int h_, int w_)
      : c(c_), h(h_), w(w_),
        data(Array::Zero(static_cast<Eigen::Index>(c_) * h_ * w_)) {}

  static Tensor scalar(double v) {
    Tensor t(1, 1, 1);
    t.data[0] = v;
    return t;
  }
  static Tensor full(int c, int h, int w, double v) {
    Tensor t(c, h, w);
    t.data.setConstant(v);
    return t;
  }
  static Tensor gaussian(int c, int h, int w, double mu, double sigma,
                         std::mt19937_64& rng) {
    Tensor t(c, h, w);
    std::normal_distribution<double> dist(mu, sigma);
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = dist(rng);
    return t;
  }

  Eigen::Index size() const { return data.size(); }
  bool same_shape(const Tensor& o) const { return c == o.c && h == o.h && w == o.w; }

  double& at(int ci, int yi, int xi) {
    return data[(static_cast<Eigen::Index>(ci) * h + yi) * w + xi];
  }
  double at(int ci, int yi, int xi) const {
    return data[(static_cast<Eigen::Index>(ci) * h + yi) * w + xi];
  }

  double l2_norm() const { return std::sqrt(data.square().sum()); }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string(what) + ": shape mismatch");
}

}  // namespace ssmd
