#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "patseg/tensor.hpp"

namespace patseg {

namespace detail {

template <typename T>
using MatrixRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Unpack one sample's input plane into a [H'*W', Cin*k*k] patch matrix.
// Out-of-bounds taps (zero padding) become zeros.
template <typename T>
void im2col(const T* in, int cin, int h, int w, int k, int stride, int pad,
            int out_h, int out_w, T* col) {
  const int ck = cin * k * k;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      T* row = col + (static_cast<std::int64_t>(oy) * out_w + ox) * ck;
      for (int ci = 0; ci < cin; ++ci) {
        const T* plane = in + static_cast<std::int64_t>(ci) * h * w;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            *row++ = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                         ? plane[static_cast<std::int64_t>(iy) * w + ix]
                         : T(0);
          }
        }
      }
    }
  }
}

// Transpose of im2col: scatter-add patch-matrix gradients back onto the
// input gradient plane.
template <typename T>
void col2im_add(const T* col, int cin, int h, int w, int k, int stride, int pad,
                int out_h, int out_w, T* din) {
  const int ck = cin * k * k;
  for (int oy = 0; oy < out_h; ++oy) {
    for (int ox = 0; ox < out_w; ++ox) {
      const T* row = col + (static_cast<std::int64_t>(oy) * out_w + ox) * ck;
      for (int ci = 0; ci < cin; ++ci) {
        T* plane = din + static_cast<std::int64_t>(ci) * h * w;
        for (int ky = 0; ky < k; ++ky) {
          const int iy = oy * stride - pad + ky;
          for (int kx = 0; kx < k; ++kx) {
            const int ix = ox * stride - pad + kx;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
              plane[static_cast<std::int64_t>(iy) * w + ix] += *row;
            }
            ++row;
          }
        }
      }
    }
  }
}

// Precomputed 1-D sampling taps for bilinear interpolation with half-pixel
// centers and border clamping.
struct ResizeTap {
  int lo;
  int hi;
  double w_hi;  // weight of the hi tap; the lo tap gets 1 - w_hi
};

inline std::vector<ResizeTap> resize_taps(int in_size, int out_size) {
  std::vector<ResizeTap> taps(static_cast<std::size_t>(out_size));
  const double scale = static_cast<double>(in_size) / out_size;
  for (int i = 0; i < out_size; ++i) {
    const double src = (i + 0.5) * scale - 0.5;
    double f = std::floor(src);
    double t = src - f;
    int lo = static_cast<int>(f);
    int hi = lo + 1;
    lo = std::min(std::max(lo, 0), in_size - 1);
    hi = std::min(std::max(hi, 0), in_size - 1);
    taps[static_cast<std::size_t>(i)] = {lo, hi, t};
  }
  return taps;
}

}  // namespace detail

// 2-D cross-correlation: input [N,Cin,H,W], weight [Cout,Cin,k,k], bias
// [Cout]. Differentiable w.r.t. all three.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, int stride = 1, int padding = 0) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.size() != 4 || ws.size() != 4) {
    throw DimensionError("conv2d expects 4-D input and weight");
  }
  const int n = is[0], cin = is[1], h = is[2], w = is[3];
  const int cout = ws[0], k = ws[2];
  if (ws[1] != cin) {
    throw DimensionError("conv2d channel mismatch: input has " + std::to_string(cin) +
                         ", weight expects " + std::to_string(ws[1]));
  }
  if (ws[2] != ws[3] || k % 2 == 0) throw DimensionError("conv2d requires odd square kernels");
  if (bias.shape() != Shape{cout}) throw DimensionError("conv2d bias must be [Cout]");
  if (stride < 1) throw DimensionError("conv2d stride must be >= 1");
  const int out_h = (h + 2 * padding - k) / stride + 1;
  const int out_w = (w + 2 * padding - k) / stride + 1;
  if (out_h < 1 || out_w < 1) throw DimensionError("conv2d output would be empty");

  const int ck = cin * k * k;
  const std::int64_t pixels = static_cast<std::int64_t>(out_h) * out_w;
  std::vector<T> out(static_cast<std::size_t>(n) * cout * pixels);

  // Eigen owns every GEMM operand so buffer alignment, and with it the
  // kernel's accumulation order, never depends on heap layout. Mapping the
  // std::vector storage directly gives bit-level run-to-run jitter.
  detail::MatrixRM<T> wmat(cout, ck);
  std::copy_n(weight.data(), wmat.size(), wmat.data());
  detail::MatrixRM<T> cmat(pixels, ck);
  detail::MatrixRM<T> omat(cout, pixels);
  for (int s = 0; s < n; ++s) {
    detail::im2col(input.data() + static_cast<std::int64_t>(s) * cin * h * w, cin, h, w, k,
                   stride, padding, out_h, out_w, cmat.data());
    omat.noalias() = wmat * cmat.transpose();
    T* dst = out.data() + static_cast<std::int64_t>(s) * cout * pixels;
    for (int c = 0; c < cout; ++c) {
      const T bv = bias.data()[c];
      const T* src = omat.data() + static_cast<std::int64_t>(c) * pixels;
      for (std::int64_t p = 0; p < pixels; ++p) dst[c * pixels + p] = src[p] + bv;
    }
  }

  auto backward = [input, weight, bias, stride, padding, out_h, out_w](TensorNode<T>& node) {
    const Shape& is2 = input.shape();
    const int n2 = is2[0], cin2 = is2[1], h2 = is2[2], w2 = is2[3];
    const int cout2 = weight.shape()[0], k2 = weight.shape()[2];
    const int ck2 = cin2 * k2 * k2;
    const std::int64_t px = static_cast<std::int64_t>(out_h) * out_w;

    const bool need_dinput = input.requires_grad();
    const bool need_dweight = weight.requires_grad();
    const bool need_dbias = bias.requires_grad();
    if (need_dinput) input.node()->ensure_grad();
    if (need_dweight) weight.node()->ensure_grad();
    if (need_dbias) bias.node()->ensure_grad();

    // Same aligned-operand discipline as the forward pass; the bias reduction
    // is a plain loop so its summation order is fixed too.
    detail::MatrixRM<T> wmat2(cout2, ck2);
    std::copy_n(weight.data(), wmat2.size(), wmat2.data());
    detail::MatrixRM<T> cmat(need_dweight ? px : 0, need_dweight ? ck2 : 0);
    detail::MatrixRM<T> dcol(need_dinput ? px : 0, need_dinput ? ck2 : 0);
    detail::MatrixRM<T> dout(cout2, px);
    detail::MatrixRM<T> dw;
    if (need_dweight) dw = detail::MatrixRM<T>::Zero(cout2, ck2);
    for (int s = 0; s < n2; ++s) {
      const T* gsrc = node.grad.data() + static_cast<std::int64_t>(s) * cout2 * px;
      std::copy_n(gsrc, dout.size(), dout.data());
      if (need_dweight) {
        detail::im2col(input.data() + static_cast<std::int64_t>(s) * cin2 * h2 * w2, cin2, h2,
                       w2, k2, stride, padding, out_h, out_w, cmat.data());
        dw.noalias() += dout * cmat;
      }
      if (need_dinput) {
        dcol.noalias() = dout.transpose() * wmat2;
        detail::col2im_add(dcol.data(), cin2, h2, w2, k2, stride, padding, out_h, out_w,
                           input.node()->grad.data() +
                               static_cast<std::int64_t>(s) * cin2 * h2 * w2);
      }
      if (need_dbias) {
        auto& db = bias.node()->grad;
        for (int c = 0; c < cout2; ++c) {
          T acc = 0;
          for (std::int64_t p = 0; p < px; ++p) acc += gsrc[c * px + p];
          db[static_cast<std::size_t>(c)] += acc;
        }
      }
    }
    if (need_dweight) {
      auto& wg = weight.node()->grad;
      for (std::int64_t i = 0; i < dw.size(); ++i) wg[static_cast<std::size_t>(i)] += dw.data()[i];
    }
  };

  return TensorT<T>::make_result({n, cout, out_h, out_w}, std::move(out),
                                 {input, weight, bias}, std::move(backward));
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = std::max(v, T(0));
  auto backward = [x](TensorNode<T>& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    const auto& in = x.values();
    auto& dx = x.node()->grad;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (in[i] > T(0)) dx[i] += node.grad[i];
    }
  };
  return TensorT<T>::make_result(x.shape(), std::move(out), {x}, std::move(backward));
}

// Numerically stable logistic; saturates cleanly at both ends.
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) {
    if (v >= T(0)) {
      v = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      v = e / (T(1) + e);
    }
  }
  auto backward = [x](TensorNode<T>& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    auto& dx = x.node()->grad;
    const auto& s = node.value;
    for (std::size_t i = 0; i < s.size(); ++i) dx[i] += node.grad[i] * s[i] * (T(1) - s[i]);
  };
  return TensorT<T>::make_result(x.shape(), std::move(out), {x}, std::move(backward));
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.values());
  const T* bp = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  auto backward = [a, b](TensorNode<T>& node) {
    for (const auto& side : {a, b}) {
      if (!side.requires_grad()) continue;
      side.node()->ensure_grad();
      auto& g = side.node()->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
  };
  return TensorT<T>::make_result(a.shape(), std::move(out), {a, b}, std::move(backward));
}

// Elementwise (Hadamard) product; the cumulative-mask intersection op.
template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(a.values());
  const T* bp = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  auto backward = [a, b](TensorNode<T>& node) {
    if (a.requires_grad()) {
      a.node()->ensure_grad();
      auto& g = a.node()->grad;
      const T* other = b.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * other[i];
    }
    if (b.requires_grad()) {
      b.node()->ensure_grad();
      auto& g = b.node()->grad;
      const T* other = a.data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * other[i];
    }
  };
  return TensorT<T>::make_result(a.shape(), std::move(out), {a, b}, std::move(backward));
}

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T factor) {
  std::vector<T> out(x.values());
  for (auto& v : out) v *= factor;
  auto backward = [x, factor](TensorNode<T>& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    auto& g = x.node()->grad;
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * factor;
  };
  return TensorT<T>::make_result(x.shape(), std::move(out), {x}, std::move(backward));
}

// Bilinear resample of [N,C,H,W] to [N,C,out_h,out_w] with half-pixel
// centers: src = (dst + 0.5) * in/out - 0.5, taps clamped at the borders.
template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& x, int out_h, int out_w) {
  const Shape& s = x.shape();
  if (s.size() != 4) throw DimensionError("bilinear_resize expects a 4-D tensor");
  if (out_h < 1 || out_w < 1) throw DimensionError("bilinear_resize target must be >= 1x1");
  const int n = s[0], c = s[1], h = s[2], w = s[3];
  if (h == out_h && w == out_w) {
    // Identity mapping; keep gradients flowing with a pass-through node.
    std::vector<T> out(x.values());
    auto backward = [x](TensorNode<T>& node) {
      if (!x.requires_grad()) return;
      x.node()->ensure_grad();
      auto& g = x.node()->grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    };
    return TensorT<T>::make_result(s, std::move(out), {x}, std::move(backward));
  }

  const auto ytaps = detail::resize_taps(h, out_h);
  const auto xtaps = detail::resize_taps(w, out_w);
  std::vector<T> out(static_cast<std::size_t>(n) * c * out_h * out_w);
  const std::int64_t planes = static_cast<std::int64_t>(n) * c;
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* in = x.data() + p * h * w;
    T* o = out.data() + p * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& ty = ytaps[static_cast<std::size_t>(oy)];
      const T wy1 = static_cast<T>(ty.w_hi), wy0 = T(1) - wy1;
      const T* r0 = in + static_cast<std::int64_t>(ty.lo) * w;
      const T* r1 = in + static_cast<std::int64_t>(ty.hi) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& tx = xtaps[static_cast<std::size_t>(ox)];
        const T wx1 = static_cast<T>(tx.w_hi), wx0 = T(1) - wx1;
        *o++ = wy0 * (wx0 * r0[tx.lo] + wx1 * r0[tx.hi]) +
               wy1 * (wx0 * r1[tx.lo] + wx1 * r1[tx.hi]);
      }
    }
  }

  auto backward = [x, out_h, out_w, ytaps, xtaps](TensorNode<T>& node) {
    if (!x.requires_grad()) return;
    x.node()->ensure_grad();
    const Shape& s2 = x.shape();
    const int c2 = s2[1], h2 = s2[2], w2 = s2[3];
    const std::int64_t planes2 = static_cast<std::int64_t>(s2[0]) * c2;
    for (std::int64_t p = 0; p < planes2; ++p) {
      T* din = x.node()->grad.data() + p * h2 * w2;
      const T* go = node.grad.data() + p * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const auto& ty = ytaps[static_cast<std::size_t>(oy)];
        const T wy1 = static_cast<T>(ty.w_hi), wy0 = T(1) - wy1;
        T* r0 = din + static_cast<std::int64_t>(ty.lo) * w2;
        T* r1 = din + static_cast<std::int64_t>(ty.hi) * w2;
        for (int ox = 0; ox < out_w; ++ox) {
          const auto& tx = xtaps[static_cast<std::size_t>(ox)];
          const T wx1 = static_cast<T>(tx.w_hi), wx0 = T(1) - wx1;
          const T g = *go++;
          r0[tx.lo] += g * wy0 * wx0;
          r0[tx.hi] += g * wy0 * wx1;
          r1[tx.lo] += g * wy1 * wx0;
          r1[tx.hi] += g * wy1 * wx1;
        }
      }
    }
  };
  return TensorT<T>::make_result({n, c, out_h, out_w}, std::move(out), {x},
                                 std::move(backward));
}

// Channel concatenation: a fills channels [0, Ca), b fills [Ca, Ca+Cb).
template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 4 || sb.size() != 4) throw DimensionError("concat_channels expects 4-D");
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
    throw DimensionError("concat_channels batch/spatial mismatch " + shape_str(sa) + " vs " +
                         shape_str(sb));
  }
  const int n = sa[0], ca = sa[1], cb = sb[1], h = sa[2], w = sa[3];
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(n) * (ca + cb) * plane);
  for (int s = 0; s < n; ++s) {
    T* dst = out.data() + static_cast<std::int64_t>(s) * (ca + cb) * plane;
    std::copy_n(a.data() + static_cast<std::int64_t>(s) * ca * plane, ca * plane, dst);
    std::copy_n(b.data() + static_cast<std::int64_t>(s) * cb * plane, cb * plane,
                dst + ca * plane);
  }
  auto backward = [a, b, ca, cb, plane](TensorNode<T>& node) {
    const int n2 = a.shape()[0];
    for (int s = 0; s < n2; ++s) {
      const T* g = node.grad.data() + static_cast<std::int64_t>(s) * (ca + cb) * plane;
      if (a.requires_grad()) {
        a.node()->ensure_grad();
        T* da = a.node()->grad.data() + static_cast<std::int64_t>(s) * ca * plane;
        for (std::int64_t i = 0; i < ca * plane; ++i) da[i] += g[i];
      }
      if (b.requires_grad()) {
        b.node()->ensure_grad();
        T* db = b.node()->grad.data() + static_cast<std::int64_t>(s) * cb * plane;
        for (std::int64_t i = 0; i < cb * plane; ++i) db[i] += g[ca * plane + i];
      }
    }
  };
  return TensorT<T>::make_result({n, ca + cb, h, w}, std::move(out), {a, b},
                                 std::move(backward));
}

namespace detail {

// Probabilities are clamped to [eps, 1-eps] before the logs; where the clamp
// engages, the gradient w.r.t. the prediction is zero (clamp semantics).
template <typename T>
inline constexpr T kBceEps = T(1e-7);

}  // namespace detail

// Class-weighted binary cross-entropy, averaged over every element:
//   -(1/M) * sum[ pos_w * y * log p + neg_w * (1-y) * log(1-p) ]
// Targets are {0,1}; predictions live in [0,1] and are clamped as above.
template <typename T>
TensorT<T> weighted_bce(const TensorT<T>& pred, const TensorT<T>& target, T pos_weight,
                        T neg_weight) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("weighted_bce shape mismatch " + shape_str(pred.shape()) + " vs " +
                         shape_str(target.shape()));
  }
  const T eps = detail::kBceEps<T>;
  const auto& p = pred.values();
  const auto& y = target.values();
  const T inv_m = T(1) / static_cast<T>(p.size());
  T acc = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T pc = std::min(std::max(p[i], eps), T(1) - eps);
    acc += pos_weight * y[i] * std::log(pc) + neg_weight * (T(1) - y[i]) * std::log(T(1) - pc);
  }
  std::vector<T> out{-inv_m * acc};
  auto backward = [pred, target, pos_weight, neg_weight, eps, inv_m](TensorNode<T>& node) {
    if (!pred.requires_grad()) return;
    pred.node()->ensure_grad();
    const T g = node.grad[0];
    const auto& p = pred.values();
    const auto& y = target.values();
    auto& dp = pred.node()->grad;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] <= eps || p[i] >= T(1) - eps) continue;
      dp[i] += g * -inv_m * (pos_weight * y[i] / p[i] - neg_weight * (T(1) - y[i]) / (T(1) - p[i]));
    }
  };
  return TensorT<T>::make_result({1}, std::move(out), {pred, target}, std::move(backward));
}

// Batched variant with one (pos, neg) weight pair per sample: mean over the
// batch of per-sample means. pred/target are [N,...]; weights have length N.
template <typename T>
TensorT<T> weighted_bce_per_sample(const TensorT<T>& pred, const TensorT<T>& target,
                                   const std::vector<T>& pos_weight,
                                   const std::vector<T>& neg_weight) {
  if (pred.shape() != target.shape()) {
    throw DimensionError("weighted_bce_per_sample shape mismatch");
  }
  if (pred.shape().empty() || pred.numel() == 0) {
    throw DimensionError("weighted_bce_per_sample needs a non-empty batch");
  }
  const int n = pred.shape().at(0);
  if (static_cast<int>(pos_weight.size()) != n || static_cast<int>(neg_weight.size()) != n) {
    throw DimensionError("weighted_bce_per_sample needs one weight pair per sample");
  }
  const T eps = detail::kBceEps<T>;
  const std::int64_t per = pred.numel() / n;
  const auto& p = pred.values();
  const auto& y = target.values();
  T acc = 0;
  for (int s = 0; s < n; ++s) {
    T sample = 0;
    const std::int64_t base = s * per;
    for (std::int64_t i = 0; i < per; ++i) {
      const T pc = std::min(std::max(p[base + i], eps), T(1) - eps);
      sample += pos_weight[s] * y[base + i] * std::log(pc) +
                neg_weight[s] * (T(1) - y[base + i]) * std::log(T(1) - pc);
    }
    acc += sample / static_cast<T>(per);
  }
  std::vector<T> out{-acc / static_cast<T>(n)};
  auto backward = [pred, target, pos_weight, neg_weight, eps, n, per](TensorNode<T>& node) {
    if (!pred.requires_grad()) return;
    pred.node()->ensure_grad();
    const T g = node.grad[0];
    const auto& p = pred.values();
    const auto& y = target.values();
    auto& dp = pred.node()->grad;
    const T inv = T(1) / (static_cast<T>(n) * static_cast<T>(per));
    for (int s = 0; s < n; ++s) {
      const std::int64_t base = s * per;
      for (std::int64_t i = 0; i < per; ++i) {
        const T pv = p[base + i];
        if (pv <= eps || pv >= T(1) - eps) continue;
        dp[base + i] += g * -inv *
                        (pos_weight[s] * y[base + i] / pv -
                         neg_weight[s] * (T(1) - y[base + i]) / (T(1) - pv));
      }
    }
  };
  return TensorT<T>::make_result({1}, std::move(out), {pred, target}, std::move(backward));
}

}  // namespace patseg
