#include "nodule_align/encoders.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace nodule_align;

namespace {

template <class S>
nn::Tensor4<S> random_tensor(Rng& rng, int n, int c, int h, int w) {
  nn::Tensor4<S> t(n, c, h, w);
  for (auto& v : t.data) v = static_cast<S>(rng.normal());
  return t;
}

double dot(const nn::Tensor4<double>& a, const nn::Tensor4<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

double rel(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

/// Direct convolution as a loop over output pixels.
nn::Tensor4<double> conv_oracle(const nn::Tensor4<double>& x, const nn::Buffer<double>& w, int out, int k, int stride,
                                int pad) {
  const int ho = (x.h + 2 * pad - k) / stride + 1, wo = (x.w + 2 * pad - k) / stride + 1;
  nn::Tensor4<double> y(x.n, out, ho, wo);
  for (int n = 0; n < x.n; ++n)
    for (int o = 0; o < out; ++o)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double s = 0;
          for (int c = 0; c < x.c; ++c)
            for (int a = 0; a < k; ++a)
              for (int b = 0; b < k; ++b) {
                const int yy = i * stride - pad + a, xx = j * stride - pad + b;
                if (yy < 0 || yy >= x.h || xx < 0 || xx >= x.w) continue;
                s += w[((static_cast<std::size_t>(o) * x.c + c) * k + a) * k + b] * x.at(n, c, yy, xx);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

}  // namespace

TEST(Conv2d, MatchesDirectLoop) {
  Rng rng(1);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 2, 0}}) {
    nn::Conv2d<double> conv("c", 3, 5, k, stride, pad);
    conv.init(rng);
    const auto x = random_tensor<double>(rng, 2, 3, 9, 8);
    const auto y = conv.forward(x);
    const auto ref = conv_oracle(x, conv.weight().value, 5, k, stride, pad);
    ASSERT_TRUE(y.same_shape(ref));
    for (std::size_t i = 0; i < y.data.size(); ++i) ASSERT_NEAR(y.data[i], ref.data[i], 1e-12);
  }
}

TEST(Conv2d, BackwardMatchesFiniteDifferences) {
  Rng rng(2);
  nn::Conv2d<double> conv("c", 2, 3, 3, 2, 1);
  conv.init(rng);
  auto x = random_tensor<double>(rng, 2, 2, 7, 7);
  const auto r = random_tensor<double>(rng, 2, 3, 4, 4);
  conv.forward(x);
  const auto dx = conv.backward(r);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const auto i = static_cast<std::size_t>(rng.below(x.data.size()));
    const double keep = x.data[i];
    x.data[i] = keep + h;
    const double up = dot(conv.forward(x), r);
    x.data[i] = keep - h;
    const double down = dot(conv.forward(x), r);
    x.data[i] = keep;
    EXPECT_LT(rel(dx.data[i], (up - down) / (2 * h)), 1e-6);
  }
  auto& w = conv.weight();
  for (int trial = 0; trial < 20; ++trial) {
    const auto i = static_cast<std::size_t>(rng.below(w.value.size()));
    const double keep = w.value[i];
    w.value[i] = keep + h;
    const double up = dot(conv.forward(x), r);
    w.value[i] = keep - h;
    const double down = dot(conv.forward(x), r);
    w.value[i] = keep;
    EXPECT_LT(rel(w.grad[i], (up - down) / (2 * h)), 1e-6);
  }
}

TEST(BatchNorm2d, TrainModeNormalizesAndBackwardMatches) {
  Rng rng(3);
  nn::BatchNorm2d<double> bn("bn", 3);
  auto x = random_tensor<double>(rng, 4, 3, 5, 5);
  for (auto& v : x.data) v = 2.0 + 3.0 * v;
  const auto y = bn.forward(x, nn::Mode::train);
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    int n = 0;
    for (int i = 0; i < 4; ++i)
      for (int a = 0; a < 5; ++a)
        for (int b = 0; b < 5; ++b) {
          s += y.at(i, c, a, b);
          s2 += y.at(i, c, a, b) * y.at(i, c, a, b);
          ++n;
        }
    EXPECT_NEAR(s / n, 0.0, 1e-10);
    EXPECT_NEAR(s2 / n, 1.0, 1e-3);
  }
  const auto r = random_tensor<double>(rng, 4, 3, 5, 5);
  nn::BatchNorm2d<double> probe("bn", 3);
  probe.forward(x, nn::Mode::train);
  const auto dx = probe.backward(r);
  const double h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    const auto i = static_cast<std::size_t>(rng.below(x.data.size()));
    const double keep = x.data[i];
    nn::BatchNorm2d<double> f("bn", 3);
    x.data[i] = keep + h;
    const double up = dot(f.forward(x, nn::Mode::train), r);
    x.data[i] = keep - h;
    const double down = dot(f.forward(x, nn::Mode::train), r);
    x.data[i] = keep;
    EXPECT_LT(rel(dx.data[i], (up - down) / (2 * h)), 1e-5);
  }
}

TEST(ImageEncoder, ShapesAndEvalDeterminism) {
  Rng rng(4);
  ImageEncoder<float> enc(3, 8);
  enc.init(rng);
  const auto x = random_tensor<float>(rng, 3, 32, 32, 32);
  const auto a = enc.forward(x, nn::Mode::eval);
  EXPECT_EQ(a.feature_maps.c, 64);
  EXPECT_EQ(a.feature_maps.h, 4);
  EXPECT_EQ(a.feature_maps.w, 4);
  EXPECT_EQ(a.pooled.rows(), 3);
  EXPECT_EQ(a.pooled.cols(), 64);
  EXPECT_EQ(a.logits.cols(), 3);
  const auto b = enc.forward(x, nn::Mode::eval);
  EXPECT_TRUE(a.logits == b.logits);
  EXPECT_THROW(enc.forward(random_tensor<float>(rng, 1, 16, 32, 32), nn::Mode::eval), ValidationError);
}

TEST(ImageEncoder, FullBackwardMatchesFiniteDifferences) {
  Rng rng(5);
  ImageEncoder<double> enc(3, 4);
  enc.init(rng);
  nn::ParamRefs<double> params;
  enc.collect(params);
  const auto x = random_tensor<double>(rng, 3, 32, 32, 32);
  Mat<double> R(3, 3);
  for (Eigen::Index i = 0; i < R.size(); ++i) R.data()[i] = rng.normal();
  auto objective = [&] {
    const auto f = enc.forward(x, nn::Mode::train);
    return (f.logits.cwiseProduct(R)).sum();
  };
  for (auto* p : params) p->zero_grad();
  const auto f = enc.forward(x, nn::Mode::train);
  enc.backward(f, R);
  const double h = 1e-6;
  int checked = 0;
  for (auto* p : params) {
    if (!p->trainable) continue;
    const auto i = static_cast<std::size_t>(rng.below(p->value.size()));
    const double keep = p->value[i];
    p->value[i] = keep + h;
    const double up = objective();
    p->value[i] = keep - h;
    const double down = objective();
    p->value[i] = keep;
    const double num = (up - down) / (2 * h);
    if (std::abs(num) < 1e-7 && std::abs(p->grad[i]) < 1e-7) continue;
    EXPECT_LT(rel(p->grad[i], num), 1e-4) << p->name;
    ++checked;
  }
  EXPECT_GT(checked, 30);
}

TEST(StubTextEncoder, DeterministicUnitNormAndFrozen) {
  StubTextEncoder<double> a(0), b(0), c(1);
  EXPECT_EQ(a.identity(), b.identity());
  EXPECT_EQ(a.weights_checksum(), b.weights_checksum());
  EXPECT_NE(a.weights_checksum(), c.weights_checksum());
  const auto t = a.embed_text("Spiculation of the nodule");
  EXPECT_EQ(t.rows(), 4);
  EXPECT_TRUE(t == b.embed_text("spiculation, of THE nodule"));
  const auto out = a.encode(t);
  EXPECT_NEAR(out.norm(), 1.0, 1e-12);
  EXPECT_TRUE(out == b.encode(t));
  const auto before = a.weights_checksum();
  a.encode_backward(t, out);
  EXPECT_EQ(a.weights_checksum(), before);
  EXPECT_THROW(a.embed_text("  ,, "), ValidationError);
  EXPECT_THROW(a.encode(Mat<double>::Ones(78, kEmbedDim)), ValidationError);
  EXPECT_THROW(a.encode(Mat<double>::Ones(3, 7)), ValidationError);
}

TEST(StubTextEncoder, BackwardMatchesFiniteDifferences) {
  Rng rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    StubTextEncoder<double> enc(static_cast<std::uint64_t>(trial), 32, 16);
    Mat<double> tokens(5 + trial, 32);
    for (Eigen::Index i = 0; i < tokens.size(); ++i) tokens.data()[i] = rng.normal(0.0, 0.1);
    RowVec<double> g(32);
    for (auto& v : g) v = rng.normal();
    const Mat<double> analytic = enc.encode_backward(tokens, g);
    Mat<double> numeric(tokens.rows(), tokens.cols());
    const double h = 1e-6;
    for (Eigen::Index i = 0; i < tokens.size(); ++i) {
      const double keep = tokens.data()[i];
      tokens.data()[i] = keep + h;
      const double up = enc.encode(tokens).dot(g);
      tokens.data()[i] = keep - h;
      const double down = enc.encode(tokens).dot(g);
      tokens.data()[i] = keep;
      numeric.data()[i] = (up - down) / (2 * h);
    }
    EXPECT_LT((analytic - numeric).norm() / numeric.norm(), 1e-3);
  }
}

TEST(StubTextEncoder, FloatGradientAgreesWithDouble) {
  StubTextEncoder<double> d(3);
  StubTextEncoder<float> f(3);
  const Mat<double> td = d.embed_text("malignant nodule with lobulation");
  const Mat<float> tf = td.cast<float>();
  RowVec<double> g = RowVec<double>::LinSpaced(kEmbedDim, -1.0, 1.0);
  const Mat<double> gd = d.encode_backward(td, g);
  const Mat<double> gf = f.encode_backward(tf, g.cast<float>()).cast<double>();
  EXPECT_LT((gd - gf).norm() / gd.norm(), 1e-3);
}

TEST(TextEncoderFactory, PretrainedIsAConfigError) {
  EXPECT_THROW(make_text_encoder<float>(TextEncoderChoice::pretrained, 0), ConfigError);
  EXPECT_NE(make_text_encoder<float>(TextEncoderChoice::stub, 0), nullptr);
}

TEST(AttributeCache, MemoryAndDiskHitsReturnSameFeatures) {
  const auto dir = std::filesystem::temp_directory_path() / "na_attr_cache";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  StubTextEncoder<float> enc(0);
  AttributeCache mem;
  const Mat<float> a = encode_attributes(enc, mem);
  EXPECT_EQ(a.rows(), 8);
  EXPECT_EQ(a.cols(), kEmbedDim);
  EXPECT_TRUE(a == encode_attributes(enc, mem));
  EXPECT_EQ(mem.size(), 1u);

  AttributeCache disk1(dir);
  const Mat<float> b = encode_attributes(enc, disk1);
  EXPECT_TRUE(a == b);
  EXPECT_FALSE(std::filesystem::is_empty(dir));
  AttributeCache disk2(dir);
  EXPECT_TRUE(b == encode_attributes(enc, disk2));

  StubTextEncoder<float> other(9);
  EXPECT_FALSE(a == encode_attributes(other, disk2));
}
