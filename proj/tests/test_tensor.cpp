#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <random>
#include <sstream>

#include "devit/gradcheck.hpp"
#include "devit/io.hpp"
#include "devit/ops.hpp"

using namespace devit;

TEST(Tensor, ShapeAndRankInvariants) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_THROW(Tensor({1, 1, 1, 1, 1, 1}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  t.at({1, 2, 3}) = 5.0;
  EXPECT_EQ(t[23], 5.0);
}

TEST(Autodiff, SumGivesOnes) {
  std::mt19937_64 rng(1);
  Tensor x = Tensor::uniform({3, 4}, rng).set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, SumOfSoftmaxHasZeroGradient) {
  std::mt19937_64 rng(2);
  Tensor x = Tensor::uniform({3, 4}, rng).set_requires_grad(true);
  backward(sum(softmax(x, 1)));
  for (double g : x.grad()) EXPECT_NEAR(g, 0.0, 1e-15);
}

TEST(Autodiff, NonScalarRootIsRejected) {
  Tensor x = Tensor::ones({2, 2}).set_requires_grad(true);
  EXPECT_THROW(backward(scale(x, 2.0)), std::invalid_argument);
}

TEST(Autodiff, SharedSubexpressionAccumulates) {
  Tensor x = Tensor::full({1}, 3.0).set_requires_grad(true);
  Tensor y = mul(x, x);
  backward(add(y, y));  // 2 x^2
  EXPECT_DOUBLE_EQ(x.grad()[0], 12.0);
}

TEST(Autodiff, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::ones({2}).set_requires_grad(true);
  Tensor y;
  {
    NoGradGuard ng;
    y = sum(x);
  }
  EXPECT_FALSE(y.requires_grad());
}

TEST(GradCheck, LinearMapIsExact) {
  std::mt19937_64 rng(3);
  Tensor w = Tensor::uniform({3, 4}, rng);
  auto f = [w](const std::vector<Tensor>& in) { return sum(matmul(w, in[0])); };
  GradReport r = grad_check(f, {Tensor::uniform({4, 2}, rng)});
  EXPECT_LE(r.worst(), 1e-10);
  EXPECT_TRUE(r.passed);
}

TEST(GradCheck, ConstantClosureGivesZeros) {
  auto f = [](const std::vector<Tensor>&) { return Tensor::scalar(4.0); };
  GradReport r = grad_check(f, {Tensor::ones({3})});
  EXPECT_EQ(r.max_abs_error[0], 0.0);
  EXPECT_TRUE(r.passed);
}

TEST(GradCheck, DetectsWrongGradient) {
  // an op whose backward pass is deliberately off by a factor of two
  auto bad = [](const std::vector<Tensor>& in) {
    const Tensor& x = in[0];
    std::vector<double> d{x[0] * x[0]};
    return detail::make_result({1}, d, true, {x}, [x](detail::Node& self) {
      detail::grad_of(x)[0] += self.grad[0] * 4.0 * x[0];
    });
  };
  GradReport r = grad_check(bad, {Tensor::full({1}, 0.7)});
  EXPECT_FALSE(r.passed);
}

TEST(GradCheck, RelativeErrorDefinition) {
  EXPECT_DOUBLE_EQ(relative_error(1.0, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(2.0, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_DOUBLE_EQ(relative_error(1e-9, 0.0), 1e-9 / 1e-8);
}

TEST(Dvt, StreamRoundTripAtFloatPrecision) {
  std::mt19937_64 rng(4);
  Tensor t = Tensor::uniform({2, 3, 4}, rng);
  std::stringstream ss;
  io::write_dvt(ss, t);
  EXPECT_EQ(ss.str().size(), io::dvt_record_size(t));
  EXPECT_EQ(ss.str().substr(0, 4), "DVT1");
  Tensor r = io::read_dvt(ss);
  ASSERT_EQ(r.shape(), t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_EQ(r[i], static_cast<double>(static_cast<float>(t[i])));
}

TEST(Dvt, HeaderIsLittleEndian) {
  std::stringstream ss;
  io::write_dvt(ss, Tensor({2, 258}));
  const std::string s = ss.str();
  EXPECT_EQ(static_cast<unsigned char>(s[4]), 2);  // rank
  EXPECT_EQ(static_cast<unsigned char>(s[12]), 2);  // 258 = 0x0102
  EXPECT_EQ(static_cast<unsigned char>(s[13]), 1);
}

TEST(Dvt, RejectsBadMagicAndTruncation) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(io::read_dvt(bad), io::FormatError);
  std::stringstream ss;
  io::write_dvt(ss, Tensor({4}));
  std::string s = ss.str();
  s.resize(s.size() - 2);
  std::stringstream cut(s);
  EXPECT_THROW(io::read_dvt(cut), io::FormatError);
}

TEST(Dvt, BundleWithManifest) {
  const auto dir = std::filesystem::temp_directory_path() / "devit_bundle_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "w.dvt").string();
  std::map<std::string, Tensor> m{{"a", Tensor::full({2, 2}, 1.5)}, {"b", Tensor::full({3}, -2.0)}};
  io::save_bundle(path, m, "abc123");
  std::string hash;
  auto r = io::load_bundle(path, &hash);
  EXPECT_EQ(hash, "abc123");
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r["a"].shape(), (Shape{2, 2}));
  EXPECT_EQ(r["b"][2], -2.0);
  EXPECT_TRUE(std::filesystem::exists(path + ".json"));
  std::filesystem::remove_all(dir);
}
