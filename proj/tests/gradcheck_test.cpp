#include "patseg/gradcheck.hpp"

#include <gtest/gtest.h>

namespace patseg {
namespace {

TEST(GradCheck, StandardSuitePasses) {
  const auto reports = run_standard_gradchecks();
  ASSERT_FALSE(reports.empty());
  for (const auto& r : reports) {
    EXPECT_TRUE(r.pass) << r.name << " max rel err " << r.max_rel_err;
    EXPECT_LT(r.max_rel_err, kGradCheckTol) << r.name;
  }
}

TEST(GradCheck, DetectsWrongGradient) {
  // A deliberately broken backward must trip the checker, otherwise the
  // suite proves nothing.
  auto fn = [](const std::vector<DTensor>& l) {
    auto out = mul(l[0], l[0]);
    // Corrupt the recorded closure with one that forgets the factor of 2.
    auto x = l[0];
    out.node()->backward_fn = [x](TensorNode<double>& node) {
      x.node()->ensure_grad();
      for (std::size_t i = 0; i < node.grad.size(); ++i) {
        x.node()->grad[i] += node.grad[i] * x.values()[i];
      }
    };
    return out;
  };
  Rng rng(3);
  auto leaf = detail::random_leaf({2, 2}, rng, 0.5, 1.5);
  const auto report = gradcheck("broken_square", fn, {leaf});
  EXPECT_FALSE(report.pass);
}

TEST(GradCheck, SuiteIsDeterministic) {
  const auto a = run_standard_gradchecks(5);
  const auto b = run_standard_gradchecks(5);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(a[i].max_rel_err, b[i].max_rel_err);
  }
}

}  // namespace
}  // namespace patseg
