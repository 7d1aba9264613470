#include "gal/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <iostream>
#include <stdexcept>

#include "gal/parallel.hpp"

namespace gal {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

// Dot product combined from eight interleaved partial sums. The lane-partial
// combination order differs from a plain sequential dot, so this is used for
// gradients only, never for forward values (whose summation order is pinned).
double dot8(const double* a, const double* b, int64_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  for (; i < n; ++i) acc[i % 8] += a[i] * b[i];
  double s = 0;
  for (int l = 0; l < 8; ++l) s += acc[l];
  return s;
}

}  // namespace

void Graph::check_id(ValueId id) const {
  if (id < 0 || id >= node_count()) fail("graph id " + std::to_string(id) + " out of range");
}

ValueId Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<ValueId>(nodes_.size() - 1);
}

ValueId Graph::leaf(Tensor& bound, bool trainable, std::string name) {
  if (bound.size() == 0) fail("leaf '" + name + "' binds an empty tensor");
  bound.require_finite("leaf '" + name + "'");
  Node n;
  n.bound = &bound;
  n.trainable = trainable;
  n.needs_grad = track_ && trainable;
  n.name = std::move(name);
  return push(std::move(n));
}

ValueId Graph::constant(Tensor value, std::string name) {
  if (value.size() == 0) fail("constant '" + name + "' is empty");
  value.require_finite("constant '" + name + "'");
  Node n;
  n.value = std::move(value);
  n.name = std::move(name);
  return push(std::move(n));
}

const Tensor& Graph::value(ValueId id) const {
  check_id(id);
  return val(id);
}

std::span<const double> Graph::grad(ValueId id) const {
  check_id(id);
  return nodes_[static_cast<size_t>(id)].grad;
}

std::vector<double>& Graph::grad_buf(ValueId id) {
  auto& g = nodes_[static_cast<size_t>(id)].grad;
  if (g.empty()) g.assign(static_cast<size_t>(val(id).size()), 0.0);
  return g;
}

// --- conv2d ----------------------------------------------------------------

ValueId Graph::conv2d(ValueId x, ValueId w, ValueId b) {
  check_id(x); check_id(w); check_id(b);
  const Tensor& X = val(x);
  const Tensor& W = val(w);
  const Tensor& B = val(b);
  if (X.rank() != 4) fail("conv2d: input rank " + std::to_string(X.rank()) + ", want 4");
  if (W.rank() != 4) fail("conv2d: kernel rank " + std::to_string(W.rank()) + ", want 4");
  if (B.rank() != 1) fail("conv2d: bias rank " + std::to_string(B.rank()) + ", want 1");
  const int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
  const int K = W.dim(0), kh = W.dim(2), kw = W.dim(3);
  if (W.dim(1) != C) fail("conv2d: kernel channels " + std::to_string(W.dim(1)) + " != input channels " + std::to_string(C));
  if (B.dim(0) != K) fail("conv2d: bias size " + std::to_string(B.dim(0)) + " != filter count " + std::to_string(K));
  if (kh > H || kw > Wd) fail("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                              " larger than input " + std::to_string(H) + "x" + std::to_string(Wd));
  const int OH = H - kh + 1, OW = Wd - kw + 1;

  Tensor out({N, K, OH, OW});
  const double* xd = X.data();
  const double* wd_ = W.data();
  const double* bd = B.data();
  double* od = out.data();
  const int64_t xs_n = static_cast<int64_t>(C) * H * Wd, xs_c = static_cast<int64_t>(H) * Wd;
  const int64_t os_n = static_cast<int64_t>(K) * OH * OW, os_k = static_cast<int64_t>(OH) * OW;
  const int64_t ws_k = static_cast<int64_t>(C) * kh * kw;

  // One accumulator per output element; contributions added in (c, ky, kx)
  // order, vectorized across the output row.
  parallel_for(N, 1, [&](int64_t n0, int64_t n1) {
    for (int64_t n = n0; n < n1; ++n) {
      for (int k = 0; k < K; ++k) {
        double* orow_base = od + n * os_n + k * os_k;
        const double* wk = wd_ + k * ws_k;
        for (int oy = 0; oy < OH; ++oy) {
          double* orow = orow_base + static_cast<int64_t>(oy) * OW;
          for (int ox = 0; ox < OW; ++ox) orow[ox] = bd[k];
          for (int c = 0; c < C; ++c) {
            const double* xplane = xd + n * xs_n + c * xs_c;
            const double* wc = wk + static_cast<int64_t>(c) * kh * kw;
            for (int ky = 0; ky < kh; ++ky) {
              const double* xrow = xplane + static_cast<int64_t>(oy + ky) * Wd;
              const double* wrow = wc + static_cast<int64_t>(ky) * kw;
              for (int kx = 0; kx < kw; ++kx) {
                const double wv = wrow[kx];
                const double* xr = xrow + kx;
                for (int ox = 0; ox < OW; ++ox) orow[ox] += wv * xr[ox];
              }
            }
          }
        }
      }
    }
  });

  Node node;
  node.value = std::move(out);
  node.name = "conv2d";
  node.needs_grad = wants(x) || wants(w) || wants(b);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad) {
    nodes_.back().backprop = [this, id, x, w, b, N, C, H, Wd, K, kh, kw, OH, OW,
                              xs_n, xs_c, os_n, os_k, ws_k] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      const double* xd2 = val(x).data();
      const double* wd2 = val(w).data();
      if (wants(x)) {
        double* gx = grad_buf(x).data();
        parallel_for(N, 1, [&](int64_t n0, int64_t n1) {
          for (int64_t n = n0; n < n1; ++n)
            for (int c = 0; c < C; ++c) {
              double* gxp = gx + n * xs_n + c * xs_c;
              for (int k = 0; k < K; ++k) {
                const double* wc = wd2 + k * ws_k + static_cast<int64_t>(c) * kh * kw;
                const double* gyp = gy + n * os_n + k * os_k;
                for (int ky = 0; ky < kh; ++ky)
                  for (int kx = 0; kx < kw; ++kx) {
                    const double wv = wc[static_cast<int64_t>(ky) * kw + kx];
                    for (int oy = 0; oy < OH; ++oy) {
                      double* dst = gxp + static_cast<int64_t>(oy + ky) * Wd + kx;
                      const double* src = gyp + static_cast<int64_t>(oy) * OW;
                      for (int ox = 0; ox < OW; ++ox) dst[ox] += wv * src[ox];
                    }
                  }
              }
            }
        });
      }
      if (wants(w)) {
        double* gw = grad_buf(w).data();
        parallel_for(K, 1, [&](int64_t k0, int64_t k1) {
          for (int64_t k = k0; k < k1; ++k)
            for (int c = 0; c < C; ++c)
              for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
                  for (int n = 0; n < N; ++n) {
                    const double* gyp = gy + n * os_n + k * os_k;
                    const double* xp = xd2 + n * xs_n + c * xs_c;
                    for (int oy = 0; oy < OH; ++oy) {
                      const double* g = gyp + static_cast<int64_t>(oy) * OW;
                      const double* xr = xp + static_cast<int64_t>(oy + ky) * Wd + kx;
                      int ox = 0;
                      for (; ox + 8 <= OW; ox += 8)
                        for (int l = 0; l < 8; ++l) acc[l] += g[ox + l] * xr[ox + l];
                      for (; ox < OW; ++ox) acc[ox % 8] += g[ox] * xr[ox];
                    }
                  }
                  double s = 0;
                  for (int l = 0; l < 8; ++l) s += acc[l];
                  gw[k * ws_k + static_cast<int64_t>(c) * kh * kw + static_cast<int64_t>(ky) * kw + kx] += s;
                }
        });
      }
      if (wants(b)) {
        double* gb = grad_buf(b).data();
        for (int k = 0; k < K; ++k) {
          double acc = 0;
          for (int n = 0; n < N; ++n) {
            const double* gyp = gy + n * os_n + k * os_k;
            for (int64_t i = 0; i < os_k; ++i) acc += gyp[i];
          }
          gb[k] += acc;
        }
      }
    };
  }
  return id;
}

// --- linear ------------------------------------------------------------------

ValueId Graph::linear(ValueId x, ValueId w, ValueId b) {
  check_id(x); check_id(w); check_id(b);
  const Tensor& X = val(x);
  const Tensor& W = val(w);
  const Tensor& B = val(b);
  if (X.rank() != 2) fail("linear: input rank " + std::to_string(X.rank()) + ", want 2");
  if (W.rank() != 2) fail("linear: weight rank " + std::to_string(W.rank()) + ", want 2");
  if (B.rank() != 1) fail("linear: bias rank " + std::to_string(B.rank()) + ", want 1");
  const int N = X.dim(0), F = X.dim(1), O = W.dim(1);
  if (W.dim(0) != F) fail("linear: weight rows " + std::to_string(W.dim(0)) + " != input features " + std::to_string(F));
  if (B.dim(0) != O) fail("linear: bias size " + std::to_string(B.dim(0)) + " != outputs " + std::to_string(O));

  Tensor out({N, O});
  const double* xd = X.data();
  const double* wd_ = W.data();
  const double* bd = B.data();
  double* od = out.data();
  // Per output element the sum runs over input features in ascending order;
  // vectorization is across the output row.
  parallel_for(N, 8, [&](int64_t n0, int64_t n1) {
    for (int64_t n = n0; n < n1; ++n) {
      double* yrow = od + n * O;
      for (int o = 0; o < O; ++o) yrow[o] = bd[o];
      const double* xrow = xd + n * F;
      for (int f = 0; f < F; ++f) {
        const double xv = xrow[f];
        const double* wrow = wd_ + static_cast<int64_t>(f) * O;
        for (int o = 0; o < O; ++o) yrow[o] += xv * wrow[o];
      }
    }
  });

  Node node;
  node.value = std::move(out);
  node.name = "linear";
  node.needs_grad = wants(x) || wants(w) || wants(b);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad) {
    nodes_.back().backprop = [this, id, x, w, b, N, F, O] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      const double* xd2 = val(x).data();
      const double* wd2 = val(w).data();
      if (wants(x)) {
        double* gx = grad_buf(x).data();
        for (int n = 0; n < N; ++n) {
          const double* gyr = gy + static_cast<int64_t>(n) * O;
          double* gxr = gx + static_cast<int64_t>(n) * F;
          for (int f = 0; f < F; ++f)
            gxr[f] += dot8(gyr, wd2 + static_cast<int64_t>(f) * O, O);
        }
      }
      if (wants(w)) {
        double* gw = grad_buf(w).data();
        for (int n = 0; n < N; ++n) {
          const double* xr = xd2 + static_cast<int64_t>(n) * F;
          const double* gyr = gy + static_cast<int64_t>(n) * O;
          for (int f = 0; f < F; ++f) {
            const double xv = xr[f];
            double* gwr = gw + static_cast<int64_t>(f) * O;
            for (int o = 0; o < O; ++o) gwr[o] += xv * gyr[o];
          }
        }
      }
      if (wants(b)) {
        double* gb = grad_buf(b).data();
        for (int n = 0; n < N; ++n) {
          const double* gyr = gy + static_cast<int64_t>(n) * O;
          for (int o = 0; o < O; ++o) gb[o] += gyr[o];
        }
      }
    };
  }
  return id;
}

// --- elementwise and shape ops ----------------------------------------------

ValueId Graph::relu(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  Tensor out(X.shape());
  const double* xd = X.data();
  double* od = out.data();
  const int64_t n = X.size();
  for (int64_t i = 0; i < n; ++i) od[i] = xd[i] > 0 ? xd[i] : 0.0;
  Node node;
  node.value = std::move(out);
  node.name = "relu";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      const double* xd2 = val(x).data();
      double* gx = grad_buf(x).data();
      for (int64_t i = 0; i < n; ++i)
        if (xd2[i] > 0) gx[i] += gy[i];
    };
  return id;
}

ValueId Graph::maxpool2(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  if (X.rank() != 4) fail("maxpool2: input rank " + std::to_string(X.rank()) + ", want 4");
  const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  if (H % 2 || W % 2) fail("maxpool2: spatial extents " + std::to_string(H) + "x" + std::to_string(W) + " must be even");
  const int OH = H / 2, OW = W / 2;
  Tensor out({N, C, OH, OW});
  std::vector<int64_t> arg(static_cast<size_t>(out.size()));
  const double* xd = X.data();
  double* od = out.data();
  int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t plane = (static_cast<int64_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++o) {
          int64_t base = plane + static_cast<int64_t>(2 * oy) * W + 2 * ox;
          int64_t best = base;
          double bv = xd[base];
          const int64_t cand[3] = {base + 1, base + W, base + W + 1};
          for (int64_t idx : cand)
            if (xd[idx] > bv) { bv = xd[idx]; best = idx; }
          od[o] = bv;
          arg[static_cast<size_t>(o)] = best;
        }
    }
  Node node;
  node.value = std::move(out);
  node.name = "maxpool2";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, arg = std::move(arg)] {
      const auto& g = nodes_[static_cast<size_t>(id)].grad;
      double* gx = grad_buf(x).data();
      for (size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    };
  return id;
}

ValueId Graph::maxpool3(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  if (X.rank() != 4) fail("maxpool3: input rank " + std::to_string(X.rank()) + ", want 4");
  const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  if (H < 3 || W < 3) fail("maxpool3: input " + std::to_string(H) + "x" + std::to_string(W) + " smaller than window");
  const int OH = H - 2, OW = W - 2;
  Tensor out({N, C, OH, OW});
  std::vector<int64_t> arg(static_cast<size_t>(out.size()));
  const double* xd = X.data();
  double* od = out.data();
  int64_t o = 0;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t plane = (static_cast<int64_t>(n) * C + c) * H * W;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++o) {
          int64_t best = -1;
          double bv = 0;
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int64_t idx = plane + static_cast<int64_t>(oy + ky) * W + ox + kx;
              if (best < 0 || xd[idx] > bv) { bv = xd[idx]; best = idx; }
            }
          od[o] = bv;
          arg[static_cast<size_t>(o)] = best;
        }
    }
  Node node;
  node.value = std::move(out);
  node.name = "maxpool3";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, arg = std::move(arg)] {
      const auto& g = nodes_[static_cast<size_t>(id)].grad;
      double* gx = grad_buf(x).data();
      for (size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
    };
  return id;
}

ValueId Graph::pad2d(ValueId x, int p) {
  check_id(x);
  if (p <= 0) fail("pad2d: padding must be positive, got " + std::to_string(p));
  const Tensor& X = val(x);
  if (X.rank() != 4) fail("pad2d: input rank " + std::to_string(X.rank()) + ", want 4");
  const int N = X.dim(0), C = X.dim(1), H = X.dim(2), W = X.dim(3);
  const int OH = H + 2 * p, OW = W + 2 * p;
  Tensor out({N, C, OH, OW});
  const double* xd = X.data();
  double* od = out.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
    const double* src = xd + nc * H * W;
    double* dst = od + nc * OH * OW;
    for (int y = 0; y < H; ++y)
      std::memcpy(dst + static_cast<int64_t>(y + p) * OW + p, src + static_cast<int64_t>(y) * W,
                  sizeof(double) * static_cast<size_t>(W));
  }
  Node node;
  node.value = std::move(out);
  node.name = "pad2d";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, N, C, H, W, OH, OW, p] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      double* gx = grad_buf(x).data();
      for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        const double* src = gy + nc * OH * OW;
        double* dst = gx + nc * H * W;
        for (int y = 0; y < H; ++y) {
          const double* srow = src + static_cast<int64_t>(y + p) * OW + p;
          double* drow = dst + static_cast<int64_t>(y) * W;
          for (int xcol = 0; xcol < W; ++xcol) drow[xcol] += srow[xcol];
        }
      }
    };
  return id;
}

ValueId Graph::dropout_noise(ValueId x, double rate, bool active, Rng& rng) {
  check_id(x);
  if (rate < 0 || rate >= 1) fail("dropout_noise: rate " + std::to_string(rate) + " outside [0,1)");
  if (!active || rate == 0.0) return x;
  const Tensor& X = val(x);
  const int64_t n = X.size();
  std::vector<double> scale(static_cast<size_t>(n));
  const double keep = 1.0 / (1.0 - rate);
  for (int64_t i = 0; i < n; ++i) scale[static_cast<size_t>(i)] = rng.uniform() >= rate ? keep : 0.0;
  Tensor out(X.shape());
  const double* xd = X.data();
  double* od = out.data();
  for (int64_t i = 0; i < n; ++i) od[i] = xd[i] * scale[static_cast<size_t>(i)];
  Node node;
  node.value = std::move(out);
  node.name = "dropout";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, scale = std::move(scale)] {
      const auto& g = nodes_[static_cast<size_t>(id)].grad;
      double* gx = grad_buf(x).data();
      for (size_t i = 0; i < scale.size(); ++i) gx[i] += g[i] * scale[i];
    };
  return id;
}

ValueId Graph::sigmoid(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  Tensor out(X.shape());
  const double* xd = X.data();
  double* od = out.data();
  const int64_t n = X.size();
  for (int64_t i = 0; i < n; ++i) {
    double v = xd[i];
    if (v >= 0) od[i] = 1.0 / (1.0 + std::exp(-v));
    else { double e = std::exp(v); od[i] = e / (1.0 + e); }
  }
  Node node;
  node.value = std::move(out);
  node.name = "sigmoid";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, n] {
      const auto& nd = nodes_[static_cast<size_t>(id)];
      const double* gy = nd.grad.data();
      const double* y = nd.value.data();
      double* gx = grad_buf(x).data();
      for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i] * (1.0 - y[i]);
    };
  return id;
}

ValueId Graph::log(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  Tensor out(X.shape());
  const double* xd = X.data();
  double* od = out.data();
  const int64_t n = X.size();
  for (int64_t i = 0; i < n; ++i) od[i] = std::log(xd[i]);
  Node node;
  node.value = std::move(out);
  node.name = "log";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      const double* xd2 = val(x).data();
      double* gx = grad_buf(x).data();
      for (int64_t i = 0; i < n; ++i) gx[i] += gy[i] / xd2[i];
    };
  return id;
}

ValueId Graph::clamp(ValueId x, double lo, double hi) {
  check_id(x);
  if (!(lo < hi)) fail("clamp: lo must be below hi");
  const Tensor& X = val(x);
  Tensor out(X.shape());
  const double* xd = X.data();
  double* od = out.data();
  const int64_t n = X.size();
  for (int64_t i = 0; i < n; ++i) od[i] = std::min(hi, std::max(lo, xd[i]));
  Node node;
  node.value = std::move(out);
  node.name = "clamp";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, lo, hi, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      const double* xd2 = val(x).data();
      double* gx = grad_buf(x).data();
      for (int64_t i = 0; i < n; ++i)
        if (xd2[i] > lo && xd2[i] < hi) gx[i] += gy[i];
    };
  return id;
}

ValueId Graph::add(ValueId a, ValueId b) {
  check_id(a); check_id(b);
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.same_shape(B)) fail("add: shape mismatch " + A.shape_string() + " vs " + B.shape_string());
  Tensor out(A.shape());
  const int64_t n = A.size();
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] + B[i];
  Node node;
  node.value = std::move(out);
  node.name = "add";
  node.needs_grad = wants(a) || wants(b);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, a, b, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      if (wants(a)) {
        double* ga = grad_buf(a).data();
        for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
      }
      if (wants(b)) {
        double* gb = grad_buf(b).data();
        for (int64_t i = 0; i < n; ++i) gb[i] += gy[i];
      }
    };
  return id;
}

ValueId Graph::sub(ValueId a, ValueId b) {
  check_id(a); check_id(b);
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.same_shape(B)) fail("sub: shape mismatch " + A.shape_string() + " vs " + B.shape_string());
  Tensor out(A.shape());
  const int64_t n = A.size();
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] - B[i];
  Node node;
  node.value = std::move(out);
  node.name = "sub";
  node.needs_grad = wants(a) || wants(b);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, a, b, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      if (wants(a)) {
        double* ga = grad_buf(a).data();
        for (int64_t i = 0; i < n; ++i) ga[i] += gy[i];
      }
      if (wants(b)) {
        double* gb = grad_buf(b).data();
        for (int64_t i = 0; i < n; ++i) gb[i] -= gy[i];
      }
    };
  return id;
}

ValueId Graph::mul(ValueId a, ValueId b) {
  check_id(a); check_id(b);
  const Tensor& A = val(a);
  const Tensor& B = val(b);
  if (!A.same_shape(B)) fail("mul: shape mismatch " + A.shape_string() + " vs " + B.shape_string());
  Tensor out(A.shape());
  const int64_t n = A.size();
  for (int64_t i = 0; i < n; ++i) out[i] = A[i] * B[i];
  Node node;
  node.value = std::move(out);
  node.name = "mul";
  node.needs_grad = wants(a) || wants(b);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, a, b, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      if (wants(a)) {
        const double* bv = val(b).data();
        double* ga = grad_buf(a).data();
        for (int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bv[i];
      }
      if (wants(b)) {
        const double* av = val(a).data();
        double* gb = grad_buf(b).data();
        for (int64_t i = 0; i < n; ++i) gb[i] += gy[i] * av[i];
      }
    };
  return id;
}

ValueId Graph::affine(ValueId x, double a, double b) {
  check_id(x);
  const Tensor& X = val(x);
  Tensor out(X.shape());
  const int64_t n = X.size();
  for (int64_t i = 0; i < n; ++i) out[i] = a * X[i] + b;
  Node node;
  node.value = std::move(out);
  node.name = "affine";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, a, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      double* gx = grad_buf(x).data();
      for (int64_t i = 0; i < n; ++i) gx[i] += a * gy[i];
    };
  return id;
}

ValueId Graph::sum(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  double acc = 0;
  for (int64_t i = 0; i < X.size(); ++i) acc += X[i];
  Node node;
  node.value = Tensor::scalar(acc);
  node.name = "sum";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x] {
      const double g = nodes_[static_cast<size_t>(id)].grad[0];
      auto& gx = grad_buf(x);
      for (auto& v : gx) v += g;
    };
  return id;
}

ValueId Graph::mean(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  const int64_t n = X.size();
  double acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += X[i];
  Node node;
  node.value = Tensor::scalar(acc / static_cast<double>(n));
  node.name = "mean";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, n] {
      const double g = nodes_[static_cast<size_t>(id)].grad[0] / static_cast<double>(n);
      auto& gx = grad_buf(x);
      for (auto& v : gx) v += g;
    };
  return id;
}

ValueId Graph::sum_squares(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  double acc = 0;
  for (int64_t i = 0; i < X.size(); ++i) acc += X[i] * X[i];
  Node node;
  node.value = Tensor::scalar(acc);
  node.name = "sum_squares";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x] {
      const double g = nodes_[static_cast<size_t>(id)].grad[0];
      const double* xd = val(x).data();
      auto& gx = grad_buf(x);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += 2.0 * g * xd[i];
    };
  return id;
}

ValueId Graph::scale_groups(ValueId x, ValueId m, int offset, int n_groups, int group_size) {
  check_id(x); check_id(m);
  const Tensor& X = val(x);
  const Tensor& M = val(m);
  if (X.rank() < 2) fail("scale_groups: input rank must be >= 2");
  if (M.rank() != 1) fail("scale_groups: mask must be rank 1");
  if (n_groups <= 0 || group_size <= 0) fail("scale_groups: group counts must be positive");
  const int64_t per = X.size() / X.dim(0);
  if (per != static_cast<int64_t>(n_groups) * group_size)
    fail("scale_groups: sample size " + std::to_string(per) + " != " + std::to_string(n_groups) + "*" + std::to_string(group_size));
  if (offset < 0 || offset + n_groups > M.dim(0))
    fail("scale_groups: mask window [" + std::to_string(offset) + "," + std::to_string(offset + n_groups) + ") outside mask of size " + std::to_string(M.dim(0)));
  const int N = X.dim(0);
  Tensor out(X.shape());
  const double* xd = X.data();
  const double* md = M.data() + offset;
  double* od = out.data();
  for (int n = 0; n < N; ++n) {
    const double* xs = xd + static_cast<int64_t>(n) * per;
    double* os = od + static_cast<int64_t>(n) * per;
    for (int g = 0; g < n_groups; ++g) {
      const double s = md[g];
      const int64_t base = static_cast<int64_t>(g) * group_size;
      for (int e = 0; e < group_size; ++e) os[base + e] = s * xs[base + e];
    }
  }
  Node node;
  node.value = std::move(out);
  node.name = "scale_groups";
  node.needs_grad = wants(x) || wants(m);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, m, offset, n_groups, group_size, N, per] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      if (wants(x)) {
        const double* md2 = val(m).data() + offset;
        double* gx = grad_buf(x).data();
        for (int n = 0; n < N; ++n) {
          const double* gs = gy + static_cast<int64_t>(n) * per;
          double* xs = gx + static_cast<int64_t>(n) * per;
          for (int g = 0; g < n_groups; ++g) {
            const double s = md2[g];
            const int64_t base = static_cast<int64_t>(g) * group_size;
            for (int e = 0; e < group_size; ++e) xs[base + e] += s * gs[base + e];
          }
        }
      }
      if (wants(m)) {
        const double* xd2 = val(x).data();
        double* gm = grad_buf(m).data() + offset;
        for (int n = 0; n < N; ++n) {
          const double* gs = gy + static_cast<int64_t>(n) * per;
          const double* xs = xd2 + static_cast<int64_t>(n) * per;
          for (int g = 0; g < n_groups; ++g) {
            const int64_t base = static_cast<int64_t>(g) * group_size;
            double acc = 0;
            for (int e = 0; e < group_size; ++e) acc += gs[base + e] * xs[base + e];
            gm[g] += acc;
          }
        }
      }
    };
  return id;
}

ValueId Graph::scale_all(ValueId x, ValueId m, int index) {
  check_id(x); check_id(m);
  const Tensor& X = val(x);
  const Tensor& M = val(m);
  if (M.rank() != 1) fail("scale_all: mask must be rank 1");
  if (index < 0 || index >= M.dim(0)) fail("scale_all: index " + std::to_string(index) + " outside mask of size " + std::to_string(M.dim(0)));
  const double s = M[index];
  Tensor out(X.shape());
  const int64_t n = X.size();
  for (int64_t i = 0; i < n; ++i) out[i] = s * X[i];
  Node node;
  node.value = std::move(out);
  node.name = "scale_all";
  node.needs_grad = wants(x) || wants(m);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, m, index, n] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      if (wants(x)) {
        const double s2 = val(m)[index];
        double* gx = grad_buf(x).data();
        for (int64_t i = 0; i < n; ++i) gx[i] += s2 * gy[i];
      }
      if (wants(m)) {
        const double* xd = val(x).data();
        double acc = 0;
        for (int64_t i = 0; i < n; ++i) acc += gy[i] * xd[i];
        grad_buf(m)[static_cast<size_t>(index)] += acc;
      }
    };
  return id;
}

ValueId Graph::concat_channels(const std::vector<ValueId>& parts) {
  if (parts.empty()) fail("concat_channels: no inputs");
  for (ValueId p : parts) check_id(p);
  const Tensor& first = val(parts[0]);
  if (first.rank() != 4) fail("concat_channels: inputs must be rank 4");
  const int N = first.dim(0), H = first.dim(2), W = first.dim(3);
  int C = 0;
  for (ValueId p : parts) {
    const Tensor& t = val(p);
    if (t.rank() != 4 || t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
      fail("concat_channels: mismatched part shape " + t.shape_string());
    C += t.dim(1);
  }
  Tensor out({N, C, H, W});
  double* od = out.data();
  const int64_t plane = static_cast<int64_t>(H) * W;
  int coff = 0;
  for (ValueId p : parts) {
    const Tensor& t = val(p);
    const int pc = t.dim(1);
    for (int n = 0; n < N; ++n)
      std::memcpy(od + (static_cast<int64_t>(n) * C + coff) * plane,
                  t.data() + static_cast<int64_t>(n) * pc * plane,
                  sizeof(double) * static_cast<size_t>(pc * plane));
    coff += pc;
  }
  Node node;
  node.value = std::move(out);
  node.name = "concat";
  bool ng = false;
  for (ValueId p : parts) ng = ng || wants(p);
  node.needs_grad = ng;
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, parts, N, C, plane] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      int off = 0;
      for (ValueId p : parts) {
        const int pc = val(p).dim(1);
        if (wants(p)) {
          double* gp = grad_buf(p).data();
          for (int n = 0; n < N; ++n) {
            const double* src = gy + (static_cast<int64_t>(n) * C + off) * plane;
            double* dst = gp + static_cast<int64_t>(n) * pc * plane;
            for (int64_t i = 0; i < pc * plane; ++i) dst[i] += src[i];
          }
        }
        off += pc;
      }
    };
  return id;
}

ValueId Graph::flatten(ValueId x) {
  check_id(x);
  const Tensor& X = val(x);
  if (X.rank() < 2) fail("flatten: input rank must be >= 2");
  const int N = X.dim(0);
  const int per = static_cast<int>(X.size() / N);
  Tensor out({N, per}, std::vector<double>(X.values().begin(), X.values().end()));
  Node node;
  node.value = std::move(out);
  node.name = "flatten";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x] {
      const auto& g = nodes_[static_cast<size_t>(id)].grad;
      auto& gx = grad_buf(x);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    };
  return id;
}

ValueId Graph::gather_features(ValueId x, const std::vector<int>& idx) {
  check_id(x);
  const Tensor& X = val(x);
  if (X.rank() != 2 && X.rank() != 4) fail("gather_features: input rank must be 2 or 4");
  if (idx.empty()) fail("gather_features: empty index list");
  const int axis = X.dim(1);
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= axis) fail("gather_features: index " + std::to_string(idx[i]) + " outside axis of size " + std::to_string(axis));
    if (i && idx[i] <= idx[i - 1]) fail("gather_features: indices must be strictly increasing");
  }
  const int N = X.dim(0);
  const int64_t block = X.rank() == 4 ? static_cast<int64_t>(X.dim(2)) * X.dim(3) : 1;
  std::vector<int> oshape = X.shape();
  oshape[1] = static_cast<int>(idx.size());
  Tensor out(oshape);
  const double* xd = X.data();
  double* od = out.data();
  for (int n = 0; n < N; ++n)
    for (size_t j = 0; j < idx.size(); ++j)
      std::memcpy(od + (static_cast<int64_t>(n) * static_cast<int64_t>(idx.size()) + static_cast<int64_t>(j)) * block,
                  xd + (static_cast<int64_t>(n) * axis + idx[j]) * block,
                  sizeof(double) * static_cast<size_t>(block));
  Node node;
  node.value = std::move(out);
  node.name = "gather";
  node.needs_grad = wants(x);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, x, idx, N, axis, block] {
      const double* gy = nodes_[static_cast<size_t>(id)].grad.data();
      double* gx = grad_buf(x).data();
      for (int n = 0; n < N; ++n)
        for (size_t j = 0; j < idx.size(); ++j) {
          const double* src = gy + (static_cast<int64_t>(n) * static_cast<int64_t>(idx.size()) + static_cast<int64_t>(j)) * block;
          double* dst = gx + (static_cast<int64_t>(n) * axis + idx[j]) * block;
          for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
        }
    };
  return id;
}

ValueId Graph::cross_entropy(ValueId logits, const std::vector<int>& labels) {
  check_id(logits);
  const Tensor& L = val(logits);
  if (L.rank() != 2) fail("cross_entropy: logits rank " + std::to_string(L.rank()) + ", want 2");
  const int N = L.dim(0), K = L.dim(1);
  if (static_cast<int>(labels.size()) != N)
    fail("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(N) + " rows");
  for (int y : labels)
    if (y < 0 || y >= K) fail("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
  std::vector<double> probs(static_cast<size_t>(N) * K);
  const double* ld = L.data();
  double loss = 0;
  for (int n = 0; n < N; ++n) {
    const double* row = ld + static_cast<int64_t>(n) * K;
    double m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    double z = 0;
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
    const double lse = m + std::log(z);
    for (int k = 0; k < K; ++k) probs[static_cast<size_t>(n) * K + k] = std::exp(row[k] - lse);
    loss += lse - row[labels[static_cast<size_t>(n)]];
  }
  Node node;
  node.value = Tensor::scalar(loss / N);
  node.name = "cross_entropy";
  node.needs_grad = wants(logits);
  ValueId id = push(std::move(node));
  if (nodes_.back().needs_grad)
    nodes_.back().backprop = [this, id, logits, labels, probs = std::move(probs), N, K] {
      const double g = nodes_[static_cast<size_t>(id)].grad[0] / N;
      double* gl = grad_buf(logits).data();
      for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
          double p = probs[static_cast<size_t>(n) * K + k];
          if (k == labels[static_cast<size_t>(n)]) p -= 1.0;
          gl[static_cast<int64_t>(n) * K + k] += g * p;
        }
    };
  return id;
}

void Graph::backward(ValueId loss) {
  check_id(loss);
  if (!track_) throw std::logic_error("backward() on a non-tracking graph");
  if (ran_backward_) throw std::logic_error("backward() may run once per graph");
  ran_backward_ = true;
  const Tensor& L = val(loss);
  if (L.size() != 1) fail("backward: loss must be scalar, got shape " + L.shape_string());
  if (!std::isfinite(L[0])) throw std::domain_error("backward: loss is not finite");
  grad_buf(loss)[0] = 1.0;
  for (ValueId id = loss; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty()) continue;
    if (n.backprop) n.backprop();
  }
  for (auto& n : nodes_) {
    if (!n.bound || !n.trainable) continue;
    n.bound->zero_grad();
    if (n.grad.empty()) {
      std::cerr << "warning: parameter '" << n.name << "' is not reached by the loss; gradient set to zero\n";
      continue;
    }
    auto g = n.bound->grad();
    std::copy(n.grad.begin(), n.grad.end(), g.begin());
  }
}

void sgd_momentum_step(Tensor& param, std::span<const double> grad, Tensor& velocity,
                       double lr, double momentum, double weight_decay) {
  if (static_cast<int64_t>(grad.size()) != param.size())
    throw std::invalid_argument("sgd_momentum_step: gradient size mismatch");
  if (!velocity.same_shape(param)) throw std::invalid_argument("sgd_momentum_step: velocity shape mismatch");
  double* p = param.data();
  double* v = velocity.data();
  const int64_t n = param.size();
  for (int64_t i = 0; i < n; ++i) {
    v[i] = momentum * v[i] + grad[static_cast<size_t>(i)] + weight_decay * p[i];
    p[i] -= lr * v[i];
  }
}

}  // namespace gal
