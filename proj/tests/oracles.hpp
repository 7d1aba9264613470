#pragma once

// Reference implementations kept deliberately naive and separate from the
// library kernels: plain index arithmetic, one scalar accumulator per output
// element, no vectorization hints. Tests compare library output against these.

#include <cmath>
#include <functional>
#include <vector>

#include "gal/rng.hpp"
#include "gal/tensor.hpp"

namespace oracle {

inline gal::Tensor conv2d(const gal::Tensor& x, const gal::Tensor& w, const gal::Tensor& b) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int OH = H - kh + 1, OW = W - kw + 1;
  gal::Tensor y({N, K, OH, OW});
  for (int n = 0; n < N; ++n)
    for (int k = 0; k < K; ++k)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = b.at(k);
          for (int c = 0; c < C; ++c)
            for (int ky = 0; ky < kh; ++ky)
              for (int kx = 0; kx < kw; ++kx)
                acc += w.at(k, c, ky, kx) * x.at(n, c, oy + ky, ox + kx);
          y.at(n, k, oy, ox) = acc;
        }
  return y;
}

inline gal::Tensor linear(const gal::Tensor& x, const gal::Tensor& w, const gal::Tensor& b) {
  const int N = x.dim(0), F = x.dim(1), O = w.dim(1);
  gal::Tensor y({N, O});
  for (int n = 0; n < N; ++n)
    for (int o = 0; o < O; ++o) {
      double acc = b.at(o);
      for (int f = 0; f < F; ++f) acc += x.at(n, f) * w.at(f, o);
      y.at(n, o) = acc;
    }
  return y;
}

inline gal::Tensor maxpool2(const gal::Tensor& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  gal::Tensor y({N, C, H / 2, W / 2});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < H / 2; ++oy)
        for (int ox = 0; ox < W / 2; ++ox) {
          double m = x.at(n, c, 2 * oy, 2 * ox);
          m = std::max(m, x.at(n, c, 2 * oy, 2 * ox + 1));
          m = std::max(m, x.at(n, c, 2 * oy + 1, 2 * ox));
          m = std::max(m, x.at(n, c, 2 * oy + 1, 2 * ox + 1));
          y.at(n, c, oy, ox) = m;
        }
  return y;
}

inline gal::Tensor random_tensor(std::vector<int> shape, gal::Rng& rng, double scale = 1.0) {
  gal::Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.normal() * scale;
  return t;
}

// Central finite difference of f around x, one derivative per element of x.
inline std::vector<double> fd_gradient(const std::function<double(const gal::Tensor&)>& f,
                                       const gal::Tensor& x, double h = 1e-5) {
  std::vector<double> g(static_cast<size_t>(x.size()));
  gal::Tensor probe = x;
  for (int64_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    probe[i] = v + h;
    const double fp = f(probe);
    probe[i] = v - h;
    const double fm = f(probe);
    probe[i] = v;
    g[static_cast<size_t>(i)] = (fp - fm) / (2 * h);
  }
  return g;
}

// Relative error with an absolute floor of 1, matching the gradient-check
// tolerance convention used throughout the tests.
inline double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1.0});
}

// Small dense least-squares + l1 problem, min_x 0.5*|Ax-b|^2 + lambda*|x|_1,
// solved by cyclic coordinate descent -- a different algorithm family from
// the accelerated proximal method under test, so agreement is meaningful.
struct Lasso {
  gal::Tensor a;  // [rows, cols]
  gal::Tensor b;  // [rows]
  double lambda = 0;

  double objective(const gal::Tensor& x) const {
    const int rows = a.dim(0), cols = a.dim(1);
    double q = 0;
    for (int r = 0; r < rows; ++r) {
      double acc = -b.at(r);
      for (int c = 0; c < cols; ++c) acc += a.at(r, c) * x.at(c);
      q += acc * acc;
    }
    double l1 = 0;
    for (auto v : x.values()) l1 += std::fabs(v);
    return 0.5 * q + lambda * l1;
  }

  void gradient_smooth(const gal::Tensor& x, gal::Tensor& g) const {
    const int rows = a.dim(0), cols = a.dim(1);
    for (auto& v : g.values()) v = 0;
    for (int r = 0; r < rows; ++r) {
      double resid = -b.at(r);
      for (int c = 0; c < cols; ++c) resid += a.at(r, c) * x.at(c);
      for (int c = 0; c < cols; ++c) g.at(c) += a.at(r, c) * resid;
    }
  }

  // Largest eigenvalue of A^T A by power iteration, for the 1/L step size.
  double lipschitz() const {
    const int rows = a.dim(0), cols = a.dim(1);
    std::vector<double> v(static_cast<size_t>(cols), 1.0), av(static_cast<size_t>(rows));
    double lam = 0;
    for (int it = 0; it < 500; ++it) {
      for (int r = 0; r < rows; ++r) {
        double acc = 0;
        for (int c = 0; c < cols; ++c) acc += a.at(r, c) * v[static_cast<size_t>(c)];
        av[static_cast<size_t>(r)] = acc;
      }
      double norm = 0;
      for (int c = 0; c < cols; ++c) {
        double acc = 0;
        for (int r = 0; r < rows; ++r) acc += a.at(r, c) * av[static_cast<size_t>(r)];
        v[static_cast<size_t>(c)] = acc;
        norm += acc * acc;
      }
      norm = std::sqrt(norm);
      lam = norm;
      for (auto& x : v) x /= norm;
    }
    return lam;
  }

  gal::Tensor solve_coordinate_descent(int max_sweeps = 100000, double tol = 1e-13) const {
    const int rows = a.dim(0), cols = a.dim(1);
    gal::Tensor x({cols});
    std::vector<double> col_ss(static_cast<size_t>(cols), 0);
    for (int c = 0; c < cols; ++c)
      for (int r = 0; r < rows; ++r) col_ss[static_cast<size_t>(c)] += a.at(r, c) * a.at(r, c);
    std::vector<double> resid(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) resid[static_cast<size_t>(r)] = -b.at(r);
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      double max_delta = 0;
      for (int c = 0; c < cols; ++c) {
        const double old = x.at(c);
        double rho = 0;
        for (int r = 0; r < rows; ++r)
          rho += a.at(r, c) * (resid[static_cast<size_t>(r)] - a.at(r, c) * old);
        // minimize over this coordinate: soft threshold of -rho
        double xn;
        if (-rho > lambda) xn = (-rho - lambda) / col_ss[static_cast<size_t>(c)];
        else if (-rho < -lambda) xn = (-rho + lambda) / col_ss[static_cast<size_t>(c)];
        else xn = 0.0;
        if (xn != old) {
          for (int r = 0; r < rows; ++r) resid[static_cast<size_t>(r)] += a.at(r, c) * (xn - old);
          x.at(c) = xn;
          max_delta = std::max(max_delta, std::fabs(xn - old));
        }
      }
      if (max_delta < tol) break;
    }
    return x;
  }
};

}  // namespace oracle
