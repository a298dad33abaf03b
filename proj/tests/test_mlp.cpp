#include <gtest/gtest.h>

#include <cmath>

#include "invariance/mlp.hpp"
#include "test_util.hpp"

using namespace invariance;

namespace {

void expect_error(ErrorCode code, const auto& fn) {
  try {
    fn();
    FAIL() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

// Plain loops, no Eigen: logits of a ReLU network.
std::vector<double> reference_forward(const Mlp<double>& m, std::vector<double> a) {
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    const auto& w = m.weight(l);
    std::vector<double> z(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index r = 0; r < w.rows(); ++r) {
      double s = m.bias(l)(r);
      for (Eigen::Index c = 0; c < w.cols(); ++c) s += w(r, c) * a[static_cast<std::size_t>(c)];
      z[static_cast<std::size_t>(r)] = l + 1 < m.num_layers() ? std::max(0.0, s) : s;
    }
    a = std::move(z);
  }
  return a;
}

double reference_ce(const std::vector<double>& z, int y) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  double s = 0;
  for (double v : z) s += std::exp(v - mx);
  return std::log(s) + mx - z[static_cast<std::size_t>(y)];
}

std::vector<double> random_input(CounterRng& rng, int n) {
  std::vector<double> x(static_cast<std::size_t>(n));
  for (auto& v : x) v = rng.uniform();
  return x;
}

}  // namespace

TEST(Mlp, HandComputedForward) {
  Mlp<double> m({2, 2, 2});
  m.weight(0) << 1, -1, 2, 0.5;
  m.bias(0) << 0, -1;
  m.weight(1) << 1, 1, -1, 2;
  m.bias(1) << 0.5, 0;
  // x = (1, 2): hidden z = (-1, 2) -> relu (0, 2); logits (2.5, 4)
  const std::vector<double> x{1, 2};
  const auto z = m.forward(x);
  EXPECT_DOUBLE_EQ(z(0), 2.5);
  EXPECT_DOUBLE_EQ(z(1), 4.0);
  EXPECT_EQ(m.predict(x), 1);
  EXPECT_NEAR(m.loss(x, 0), std::log(1 + std::exp(1.5)), 1e-14);
  EXPECT_NEAR(m.loss(x, 1), std::log(1 + std::exp(-1.5)), 1e-14);
}

TEST(Mlp, ZeroWeightsPredictClassZero) {
  Mlp<float> m({5, 4, 3});
  EXPECT_EQ(m.predict(std::vector<double>(5, 0.7)), 0);
  EXPECT_NEAR(m.loss(std::vector<double>(5, 0.7), 2), std::log(3.0), 1e-6);
  EXPECT_EQ(m.parameter_count(), 5u * 4 + 4 + 4 * 3 + 3);
}

TEST(Mlp, MatchesReferenceForward) {
  const auto m = Mlp<double>::random({9, 7, 5, 4}, 3);
  CounterRng rng(4);
  for (int t = 0; t < 20; ++t) {
    const auto x = random_input(rng, 9);
    const auto want = reference_forward(m, x);
    const auto got = m.forward(x);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(got(i), want[static_cast<std::size_t>(i)], 1e-12);
    for (int y = 0; y < 4; ++y) EXPECT_NEAR(m.loss(x, y), reference_ce(want, y), 1e-12);
  }
}

TEST(Mlp, StableCrossEntropyForHugeLogits) {
  Vec<double> z(3);
  z << 1000, -1000, 0;
  EXPECT_DOUBLE_EQ(Mlp<double>::cross_entropy(z, 0), 0.0);
  EXPECT_DOUBLE_EQ(Mlp<double>::cross_entropy(z, 1), 2000.0);
  Vec<float> zf(2);
  zf << 200.0f, -200.0f;
  EXPECT_TRUE(std::isfinite(Mlp<float>::cross_entropy(zf, 1)));
}

TEST(Mlp, InputGradientMatchesFiniteDifferences) {
  CounterRng rng(5);
  int checked = 0;
  for (int t = 0; t < 100; ++t) {
    const auto m = Mlp<double>::random({10, 8, 6, 3}, 100 + static_cast<std::uint64_t>(t));
    const auto x = random_input(rng, 10);
    const int y = static_cast<int>(rng.below(3));
    const auto g = m.grad_input(x, y);
    const double h = 1e-6;
    for (std::size_t i = 0; i < x.size(); ++i) {
      auto xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (reference_ce(reference_forward(m, xp), y) - reference_ce(reference_forward(m, xm), y)) / (2 * h);
      EXPECT_LE(std::abs(fd - g[i]), 1e-4 * std::max(1.0, std::abs(fd))) << "case " << t << " coord " << i;
      ++checked;
    }
  }
  EXPECT_EQ(checked, 1000);
}

TEST(Mlp, ParameterGradientsMatchFiniteDifferences) {
  auto m = Mlp<double>::random({6, 5, 3}, 9);
  CounterRng rng(10);
  Mat<double> x(6, 4);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform();
  const std::vector<int> labels{0, 2, 1, 2};
  const auto g = m.backward_batch(x, labels);
  auto total = [&](const Mlp<double>& mm) {
    double s = 0;
    for (int j = 0; j < 4; ++j) {
      std::vector<double> col(x.col(j).data(), x.col(j).data() + 6);
      s += reference_ce(reference_forward(mm, col), labels[static_cast<std::size_t>(j)]);
    }
    return s;
  };
  EXPECT_NEAR(g.losses.sum(), total(m), 1e-12);
  const double h = 1e-6;
  for (std::size_t l = 0; l < 2; ++l) {
    for (Eigen::Index i = 0; i < m.weight(l).size(); ++i) {
      auto mp = m, mm = m;
      mp.weight(l).data()[i] += h;
      mm.weight(l).data()[i] -= h;
      EXPECT_NEAR(g.dw[l].data()[i], (total(mp) - total(mm)) / (2 * h), 1e-5);
    }
    for (Eigen::Index i = 0; i < m.bias(l).size(); ++i) {
      auto mp = m, mm = m;
      mp.bias(l)(i) += h;
      mm.bias(l)(i) -= h;
      EXPECT_NEAR(g.db[l](i), (total(mp) - total(mm)) / (2 * h), 1e-5);
    }
  }
  const auto no_params = m.backward_batch(x, labels, false);
  EXPECT_TRUE(no_params.dx.isApprox(g.dx));
}

TEST(Mlp, DeadHiddenLayerGivesZeroInputGradient) {
  auto m = Mlp<double>::random({4, 3, 2}, 11);
  m.bias(0).setConstant(-100.0);
  const auto g = m.grad_input(std::vector<double>{0.1, 0.2, 0.3, 0.4}, 1);
  for (double v : g) EXPECT_EQ(v, 0.0);
}

TEST(Mlp, ShapeAndLabelErrors) {
  const Mlp<double> m({3, 2});
  expect_error(ErrorCode::DimensionMismatch, [&] { m.forward(std::vector<double>(4)); });
  expect_error(ErrorCode::InvalidParams, [&] { m.loss(std::vector<double>(3), 2); });
  expect_error(ErrorCode::InvalidParams, [&] { m.loss(std::vector<double>(3), -1); });
  expect_error(ErrorCode::DimensionMismatch,
               [&] { m.backward_batch(Mat<double>::Zero(3, 2), std::vector<int>{0}); });
  expect_error(ErrorCode::InvalidParams, [] { Mlp<double>({3}); });
  expect_error(ErrorCode::InvalidParams, [] { Mlp<double>({3, 0, 2}); });
}

TEST(Mlp, CastPreservesValues) {
  const auto m = Mlp<float>::random({5, 4, 2}, 12);
  const auto d = m.cast<double>();
  const std::vector<double> x{0.1, 0.9, 0.3, 0.0, 1.0};
  EXPECT_NEAR(m.forward(x)(0), d.forward(x)(0), 1e-5);
  EXPECT_TRUE(d.finite());
  auto bad = m;
  bad.weight(0)(0, 0) = std::numeric_limits<float>::quiet_NaN();
  EXPECT_FALSE(bad.finite());
}

TEST(Adam, FirstStepMovesEachParameterByTheLearningRate) {
  Mlp<double> m({2, 2});
  Adam<double> opt(m);
  std::vector<Mat<double>> dw{Mat<double>(2, 2)};
  dw[0] << 0.5, -2.0, 1e-3, 0.0;
  std::vector<Vec<double>> db{Vec<double>::Constant(2, 3.0)};
  opt.step(m, dw, db, 0.01);
  // bias-corrected moments on step 1 are g and g^2: delta = lr * g / (|g| + eps)
  EXPECT_NEAR(m.weight(0)(0, 0), -0.01, 1e-9);
  EXPECT_NEAR(m.weight(0)(0, 1), 0.01, 1e-9);
  EXPECT_NEAR(m.weight(0)(1, 0), -0.01 * 1e-3 / (1e-3 + 1e-8), 1e-12);
  EXPECT_EQ(m.weight(0)(1, 1), 0.0);
  EXPECT_NEAR(m.bias(0)(0), -0.01, 1e-9);
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, TwoStepsMatchScalarRecurrence) {
  Mlp<double> m({1, 1});
  Adam<double> opt(m);
  const double g1 = 0.3, g2 = -0.1, lr = 0.05, b1 = 0.9, b2 = 0.999, e = 1e-8;
  double p = 0, mo = 0, v = 0;
  for (int t = 1; t <= 2; ++t) {
    const double g = t == 1 ? g1 : g2;
    mo = b1 * mo + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    p -= lr * (mo / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + e);
    opt.step(m, {Mat<double>::Constant(1, 1, g)}, {Vec<double>::Zero(1)}, lr);
  }
  EXPECT_NEAR(m.weight(0)(0, 0), p, 1e-12);
}

TEST(Checkpoint, RoundTripIsExactForFloat) {
  const auto m = Mlp<float>::random({7, 5, 3}, 13);
  const auto bytes = serialize_checkpoint(m);
  EXPECT_EQ(bytes.size(), 8 + 4 * 3 + 4 * m.parameter_count());
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "IVAT");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[6], 3);
  const auto back = parse_checkpoint<float>(bytes);
  EXPECT_EQ(back.sizes(), m.sizes());
  for (std::size_t l = 0; l < m.num_layers(); ++l) {
    EXPECT_EQ(back.weight(l), m.weight(l));
    EXPECT_EQ(back.bias(l), m.bias(l));
  }
  const auto dir = testutil::temp_dir("ckpt");
  save_checkpoint(dir / "m.ivat", m);
  EXPECT_EQ(serialize_checkpoint(load_checkpoint(dir / "m.ivat")), bytes);
}

TEST(Checkpoint, LayoutIsRowMajorLittleEndian) {
  Mlp<float> m({2, 1});
  m.weight(0) << 1.0f, 2.0f;
  m.bias(0) << -0.5f;
  const auto b = serialize_checkpoint(m);
  const std::vector<std::uint8_t> tail{0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x40, 0x00, 0x00, 0x00, 0xbf};
  EXPECT_EQ(std::vector<std::uint8_t>(b.end() - 12, b.end()), tail);
}

TEST(Checkpoint, CorruptInputs) {
  auto bytes = serialize_checkpoint(Mlp<float>::random({3, 2}, 1));
  auto bad = bytes;
  bad[0] = 'X';
  expect_error(ErrorCode::MalformedHeader, [&] { parse_checkpoint(bad); });
  bad = bytes;
  bad[4] = 9;
  expect_error(ErrorCode::MalformedHeader, [&] { parse_checkpoint(bad); });
  bad = bytes;
  bad[6] = 1;
  expect_error(ErrorCode::MalformedHeader, [&] { parse_checkpoint(bad); });
  bad = bytes;
  bad.pop_back();
  expect_error(ErrorCode::TruncatedPayload, [&] { parse_checkpoint(bad); });
  bad = bytes;
  bad.push_back(0);
  expect_error(ErrorCode::TruncatedPayload, [&] { parse_checkpoint(bad); });
  expect_error(ErrorCode::MalformedHeader, [&] { parse_checkpoint(std::vector<std::uint8_t>{'I', 'V'}); });
  expect_error(ErrorCode::TruncatedPayload, [&] { parse_checkpoint(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10)); });
}

TEST(Mlp, ToColumnsPicksPositions) {
  CounterRng rng(14);
  std::vector<GrayImage> imgs{testutil::random_image(2, 2, rng), testutil::random_image(2, 2, rng)};
  const std::vector<int> labels{0, 1};
  const auto ds = Dataset::from_parts(imgs, labels, 2);
  const std::vector<std::size_t> pos{1, 0, 1};
  const auto x = to_columns<double>(ds, pos);
  ASSERT_EQ(x.cols(), 3);
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(x(i, 0), imgs[1].pixels[static_cast<std::size_t>(i)]);
    EXPECT_EQ(x(i, 1), imgs[0].pixels[static_cast<std::size_t>(i)]);
  }
}
