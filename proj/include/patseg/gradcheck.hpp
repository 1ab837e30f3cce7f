#pragma once

#include <functional>
#include <string>
#include <vector>

#include "patseg/ops.hpp"
#include "patseg/rng.hpp"
#include "patseg/tensor.hpp"

namespace patseg {

using DTensor = TensorT<double>;

struct GradCheckReport {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kGradCheckTol = 1e-4;

// Central finite differences against reverse-mode gradients, in double
// precision. Vector-valued outputs are reduced with a fixed random
// projection so a single backward sweep checks every output element:
//   analytic: backward(w) accumulated on the leaves
//   numeric:  sum_j w_j * (f_j(x+h e) - f_j(x-h e)) / (2h)
// Error metric per element: |a - n| / max(1e-6, |a| + |n|).
inline GradCheckReport gradcheck(
    const std::string& name,
    const std::function<DTensor(const std::vector<DTensor>&)>& fn,
    const std::vector<DTensor>& leaves, std::uint64_t projection_seed = 17,
    double h = kGradCheckStep, double tol = kGradCheckTol) {
  DTensor out = fn(leaves);
  Rng rng(projection_seed);
  std::vector<double> w(static_cast<std::size_t>(out.numel()));
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  out.backward(w);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const auto& leaf : leaves) {
    analytic.push_back(leaf.has_grad() ? leaf.grad()
                                       : std::vector<double>(leaf.values().size(), 0.0));
  }

  GradCheckReport report{name, 0.0, true};
  NoGradGuard inference;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto leaf = leaves[li];
    if (!leaf.requires_grad()) continue;
    for (std::size_t e = 0; e < leaf.values().size(); ++e) {
      const double saved = leaf.data()[e];
      leaf.data()[e] = saved + h;
      const auto plus = fn(leaves).values();
      leaf.data()[e] = saved - h;
      const auto minus = fn(leaves).values();
      leaf.data()[e] = saved;
      double numeric = 0.0;
      for (std::size_t j = 0; j < w.size(); ++j) numeric += w[j] * (plus[j] - minus[j]);
      numeric /= 2.0 * h;
      const double a = analytic[li][e];
      const double rel = std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
      if (rel > report.max_rel_err) report.max_rel_err = rel;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

namespace detail {

inline DTensor random_leaf(const Shape& shape, Rng& rng, double lo, double hi,
                           bool requires_grad = true) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.uniform(lo, hi);
  return requires_grad ? DTensor::param(shape, std::move(data))
                       : DTensor::from_data(shape, std::move(data));
}

// Keeps relu inputs away from the kink at zero so finite differences agree.
inline DTensor random_leaf_signed(const Shape& shape, Rng& rng, double margin = 0.1) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) {
    const double mag = rng.uniform(margin, 1.0);
    v = rng.bernoulli(0.5) ? mag : -mag;
  }
  return DTensor::param(shape, std::move(data));
}

inline DTensor random_binary(const Shape& shape, Rng& rng) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  return DTensor::from_data(shape, std::move(data));
}

}  // namespace detail

// The canonical per-op verification suite. Shared by the test binary and the
// gradcheck CLI subcommand so both exercise identical cases.
inline std::vector<GradCheckReport> run_standard_gradchecks(std::uint64_t seed = 20240) {
  std::vector<GradCheckReport> reports;
  Rng rng(seed);

  {
    auto x = detail::random_leaf({2, 3, 5, 5}, rng, -1.0, 1.0);
    auto w = detail::random_leaf({4, 3, 3, 3}, rng, -0.5, 0.5);
    auto b = detail::random_leaf({4}, rng, -0.5, 0.5);
    reports.push_back(gradcheck(
        "conv2d_3x3_s1_p1",
        [](const std::vector<DTensor>& l) { return conv2d(l[0], l[1], l[2], 1, 1); },
        {x, w, b}, rng.next_u64()));
  }
  {
    auto x = detail::random_leaf({1, 2, 7, 6}, rng, -1.0, 1.0);
    auto w = detail::random_leaf({3, 2, 3, 3}, rng, -0.5, 0.5);
    auto b = detail::random_leaf({3}, rng, -0.5, 0.5);
    reports.push_back(gradcheck(
        "conv2d_3x3_s2_p0",
        [](const std::vector<DTensor>& l) { return conv2d(l[0], l[1], l[2], 2, 0); },
        {x, w, b}, rng.next_u64()));
  }
  {
    auto x = detail::random_leaf({2, 4, 4, 4}, rng, -1.0, 1.0);
    auto w = detail::random_leaf({2, 4, 1, 1}, rng, -0.5, 0.5);
    auto b = detail::random_leaf({2}, rng, -0.5, 0.5);
    reports.push_back(gradcheck(
        "conv2d_1x1",
        [](const std::vector<DTensor>& l) { return conv2d(l[0], l[1], l[2], 1, 0); },
        {x, w, b}, rng.next_u64()));
  }
  {
    auto x = detail::random_leaf_signed({2, 3, 4, 4}, rng);
    reports.push_back(gradcheck(
        "relu", [](const std::vector<DTensor>& l) { return relu(l[0]); }, {x},
        rng.next_u64()));
  }
  {
    auto x = detail::random_leaf({2, 2, 3, 3}, rng, -3.0, 3.0);
    reports.push_back(gradcheck(
        "sigmoid", [](const std::vector<DTensor>& l) { return sigmoid(l[0]); }, {x},
        rng.next_u64()));
  }
  {
    auto a = detail::random_leaf({2, 3, 3, 3}, rng, -1.0, 1.0);
    auto b = detail::random_leaf({2, 3, 3, 3}, rng, -1.0, 1.0);
    reports.push_back(gradcheck(
        "add", [](const std::vector<DTensor>& l) { return add(l[0], l[1]); }, {a, b},
        rng.next_u64()));
  }
  {
    auto a = detail::random_leaf({2, 2, 3, 3}, rng, -1.0, 1.0);
    auto b = detail::random_leaf({2, 2, 3, 3}, rng, -1.0, 1.0);
    reports.push_back(gradcheck(
        "mul", [](const std::vector<DTensor>& l) { return mul(l[0], l[1]); }, {a, b},
        rng.next_u64()));
  }
  {
    auto x = detail::random_leaf({1, 3, 4, 4}, rng, -1.0, 1.0);
    reports.push_back(gradcheck(
        "scale", [](const std::vector<DTensor>& l) { return scale(l[0], 0.37); }, {x},
        rng.next_u64()));
  }
  {
    auto x = detail::random_leaf({2, 2, 4, 5}, rng, -1.0, 1.0);
    reports.push_back(gradcheck(
        "bilinear_upsample",
        [](const std::vector<DTensor>& l) { return bilinear_resize(l[0], 7, 9); }, {x},
        rng.next_u64()));
  }
  {
    auto x = detail::random_leaf({2, 2, 7, 9}, rng, -1.0, 1.0);
    reports.push_back(gradcheck(
        "bilinear_downsample",
        [](const std::vector<DTensor>& l) { return bilinear_resize(l[0], 4, 5); }, {x},
        rng.next_u64()));
  }
  {
    auto a = detail::random_leaf({2, 3, 4, 4}, rng, -1.0, 1.0);
    auto b = detail::random_leaf({2, 2, 4, 4}, rng, -1.0, 1.0);
    reports.push_back(gradcheck(
        "concat_channels",
        [](const std::vector<DTensor>& l) { return concat_channels(l[0], l[1]); }, {a, b},
        rng.next_u64()));
  }
  {
    auto p = detail::random_leaf({2, 1, 4, 4}, rng, 0.05, 0.95);
    auto y = detail::random_binary({2, 1, 4, 4}, rng);
    reports.push_back(gradcheck(
        "weighted_bce",
        [](const std::vector<DTensor>& l) { return weighted_bce(l[0], l[1], 2.5, 0.75); },
        {p, y}, rng.next_u64()));
  }
  {
    auto p = detail::random_leaf({3, 1, 3, 3}, rng, 0.05, 0.95);
    auto y = detail::random_binary({3, 1, 3, 3}, rng);
    reports.push_back(gradcheck(
        "weighted_bce_per_sample",
        [](const std::vector<DTensor>& l) {
          return weighted_bce_per_sample(l[0], l[1], std::vector<double>{1.5, 4.0, 2.0},
                                         std::vector<double>{0.9, 1.1, 0.6});
        },
        {p, y}, rng.next_u64()));
  }
  {
    // Composite path shaped like one cascade level: conv, relu, residual add,
    // head conv, sigmoid, masked product, loss.
    auto x = detail::random_leaf({1, 2, 6, 6}, rng, -1.0, 1.0);
    auto w1 = detail::random_leaf({3, 2, 3, 3}, rng, -0.4, 0.4);
    auto b1 = detail::random_leaf({3}, rng, -0.2, 0.2);
    auto w2 = detail::random_leaf({1, 3, 1, 1}, rng, -0.4, 0.4);
    auto b2 = detail::random_leaf({1}, rng, -0.2, 0.2);
    auto coarse = detail::random_leaf({1, 1, 6, 6}, rng, 0.1, 0.9, false);
    auto y = detail::random_binary({1, 1, 6, 6}, rng);
    reports.push_back(gradcheck(
        "composite_level",
        [](const std::vector<DTensor>& l) {
          auto h = relu(conv2d(l[0], l[1], l[2], 1, 1));
          auto m = sigmoid(conv2d(h, l[3], l[4], 1, 0));
          auto cumulative = mul(m, l[5]);
          return weighted_bce(cumulative, l[6], 1.8, 0.7);
        },
        {x, w1, b1, w2, b2, coarse, y}, rng.next_u64()));
  }
  {
    // Full tiny 2-level cascade: downsampled coarse branch, fine branch,
    // upsampled cumulative product, balanced loss. Every weight is a leaf.
    auto x = detail::random_leaf({1, 3, 8, 8}, rng, -1.0, 1.0);
    auto w0a = detail::random_leaf({3, 3, 3, 3}, rng, -0.4, 0.4);
    auto b0a = detail::random_leaf({3}, rng, -0.2, 0.2);
    auto w0b = detail::random_leaf({1, 3, 1, 1}, rng, -0.4, 0.4);
    auto b0b = detail::random_leaf({1}, rng, -0.2, 0.2);
    auto w1a = detail::random_leaf({3, 3, 3, 3}, rng, -0.4, 0.4);
    auto b1a = detail::random_leaf({3}, rng, -0.2, 0.2);
    auto w1b = detail::random_leaf({1, 3, 1, 1}, rng, -0.4, 0.4);
    auto b1b = detail::random_leaf({1}, rng, -0.2, 0.2);
    auto y = detail::random_binary({1, 1, 8, 8}, rng);
    reports.push_back(gradcheck(
        "cascade_2level",
        [](const std::vector<DTensor>& l) {
          auto x0 = bilinear_resize(l[0], 4, 4);
          auto h0 = relu(conv2d(x0, l[1], l[2], 1, 1));
          auto m0 = sigmoid(conv2d(h0, l[3], l[4], 1, 0));
          auto h1 = relu(conv2d(l[0], l[5], l[6], 1, 1));
          auto m1 = sigmoid(conv2d(h1, l[7], l[8], 1, 0));
          auto cumulative = mul(bilinear_resize(m0, 8, 8), m1);
          return weighted_bce(cumulative, l[9], 2.2, 0.8);
        },
        {x, w0a, b0a, w0b, b0b, w1a, b1a, w1b, b1b, y}, rng.next_u64()));
  }

  return reports;
}

}  // namespace patseg
