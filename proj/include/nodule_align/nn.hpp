#pragma once

#include "nodule_align/common.hpp"
#include "nodule_align/rng.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

namespace nodule_align::nn {

/// Storage aligned for the widest SIMD width Eigen uses, so that results do not depend on
/// where the allocator happened to place a buffer.
template <class S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

/// A named array of weights with its gradient and optimizer state. Buffers (batch-norm
/// running statistics) use the same type with `trainable == false`.
template <class S>
struct Parameter {
  std::string name;
  std::vector<int> shape;
  Buffer<S> value;
  Buffer<S> grad;
  Buffer<S> momentum;
  bool trainable = true;
  bool decay = true;
  /// Set when backward wrote into `grad` since the last `zero_grad`.
  bool has_grad = false;

  Parameter() = default;
  Parameter(std::string n, std::vector<int> s, bool is_trainable = true)
      : name(std::move(n)), shape(std::move(s)), trainable(is_trainable) {
    const auto count = static_cast<std::size_t>(
        std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>()));
    value.assign(count, S(0));
    if (trainable) grad.assign(count, S(0));
  }

  std::size_t size() const { return value.size(); }
  void zero_grad() {
    std::fill(grad.begin(), grad.end(), S(0));
    has_grad = false;
  }
  Eigen::Map<Mat<S>> matrix(Eigen::Index rows, Eigen::Index cols) { return {value.data(), rows, cols}; }
  Eigen::Map<const Mat<S>> matrix(Eigen::Index rows, Eigen::Index cols) const { return {value.data(), rows, cols}; }
  Eigen::Map<Mat<S>> grad_matrix(Eigen::Index rows, Eigen::Index cols) {
    has_grad = true;
    return {grad.data(), rows, cols};
  }
};

template <class S>
using ParamRefs = std::vector<Parameter<S>*>;

/// Dense NCHW activation tensor.
template <class S>
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  Buffer<S> data;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, S fill = S(0))
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * plane(); }
  S* sample(int i) { return data.data() + static_cast<std::size_t>(i) * sample_size(); }
  const S* sample(int i) const { return data.data() + static_cast<std::size_t>(i) * sample_size(); }
  S& at(int i, int ch, int y, int x) { return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
  S at(int i, int ch, int y, int x) const { return data[((static_cast<std::size_t>(i) * c + ch) * h + y) * w + x]; }
  bool same_shape(const Tensor4& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
};

enum class Mode { train, eval };

// ---------------------------------------------------------------------------

template <class S>
class Conv2d {
public:
  Conv2d() = default;
  Conv2d(std::string name, int in, int out, int kernel, int stride, int pad)
      : in_(in), out_(out), k_(kernel), stride_(stride), pad_(pad),
        weight_(name + ".weight", {out, in, kernel, kernel}) {}

  /// Kaiming normal, fan-out, ReLU gain.
  void init(Rng& rng) {
    const double std = std::sqrt(2.0 / (static_cast<double>(out_) * k_ * k_));
    for (auto& v : weight_.value) v = static_cast<S>(rng.normal(0.0, std));
  }

  int out_size(int n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }

  Tensor4<S> forward(const Tensor4<S>& x) {
    if (x.c != in_) throw ValidationError("conv " + weight_.name + ": expected " + std::to_string(in_) +
                                          " input channels, got " + std::to_string(x.c));
    input_ = x;
    const int ho = out_size(x.h), wo = out_size(x.w);
    const auto hw = static_cast<Eigen::Index>(ho) * wo;
    Tensor4<S> y(x.n, out_, ho, wo);
    const auto W = weight_.matrix(out_, rows());
    Mat<S> col, out;
    for (int first = 0; first < x.n; first += chunk(hw)) {
      const int count = std::min(chunk(hw), x.n - first);
      im2col(x, first, count, ho, wo, col);
      out.noalias() = W * col;
      for (int i = 0; i < count; ++i)
        Eigen::Map<Mat<S>>(y.sample(first + i), out_, hw) = out.middleCols(i * hw, hw);
    }
    return y;
  }

  Tensor4<S> backward(const Tensor4<S>& dy) {
    const Tensor4<S>& x = input_;
    const int ho = dy.h, wo = dy.w;
    const auto hw = static_cast<Eigen::Index>(ho) * wo;
    const auto W = weight_.matrix(out_, rows());
    auto dW = weight_.grad_matrix(out_, rows());
    Tensor4<S> dx(x.n, x.c, x.h, x.w);
    Mat<S> col, dcol, dout;
    for (int first = 0; first < x.n; first += chunk(hw)) {
      const int count = std::min(chunk(hw), x.n - first);
      dout.resize(out_, count * hw);
      for (int i = 0; i < count; ++i)
        dout.middleCols(i * hw, hw) = Eigen::Map<const Mat<S>>(dy.sample(first + i), out_, hw);
      im2col(x, first, count, ho, wo, col);
      dW.noalias() += dout * col.transpose();
      dcol.noalias() = W.transpose() * dout;
      col2im(dcol, dx, first, count, ho, wo);
    }
    return dx;
  }

  void collect(ParamRefs<S>& out) { out.push_back(&weight_); }
  Parameter<S>& weight() { return weight_; }
  const Parameter<S>& weight() const { return weight_; }

private:
  Eigen::Index rows() const { return static_cast<Eigen::Index>(in_) * k_ * k_; }

  /// Samples per GEMM so the unfolded input stays around 4M values.
  int chunk(Eigen::Index hw) const {
    return static_cast<int>(std::max<Eigen::Index>(1, (Eigen::Index{1} << 22) / (rows() * hw)));
  }

  /// Unfolds samples [first, first + count) into columns: row (c, ky, kx), column (i, oy, ox).
  void im2col(const Tensor4<S>& x, int first, int count, int ho, int wo, Mat<S>& col) const {
    const auto hw = static_cast<Eigen::Index>(ho) * wo;
    col.resize(rows(), count * hw);
    for (int i = 0; i < count; ++i) {
      const S* src = x.sample(first + i);
      for (int c = 0; c < in_; ++c) {
        const S* plane = src + static_cast<std::size_t>(c) * x.plane();
        for (int ky = 0; ky < k_; ++ky) {
          for (int kx = 0; kx < k_; ++kx) {
            S* dst = col.data() + ((static_cast<Eigen::Index>(c) * k_ + ky) * k_ + kx) * col.cols() + i * hw;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ - pad_ + ky;
              S* row = dst + static_cast<std::ptrdiff_t>(oy) * wo;
              if (iy < 0 || iy >= x.h) {
                std::fill(row, row + wo, S(0));
                continue;
              }
              const S* in_row = plane + static_cast<std::ptrdiff_t>(iy) * x.w;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride_ - pad_ + kx;
                row[ox] = (ix >= 0 && ix < x.w) ? in_row[ix] : S(0);
              }
            }
          }
        }
      }
    }
  }

  void col2im(const Mat<S>& col, Tensor4<S>& dx, int first, int count, int ho, int wo) const {
    const auto hw = static_cast<Eigen::Index>(ho) * wo;
    for (int i = 0; i < count; ++i) {
      S* dst = dx.sample(first + i);
      for (int c = 0; c < in_; ++c) {
        S* plane = dst + static_cast<std::size_t>(c) * dx.plane();
        for (int ky = 0; ky < k_; ++ky) {
          for (int kx = 0; kx < k_; ++kx) {
            const S* src = col.data() + ((static_cast<Eigen::Index>(c) * k_ + ky) * k_ + kx) * col.cols() + i * hw;
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride_ - pad_ + ky;
              if (iy < 0 || iy >= dx.h) continue;
              S* out_row = plane + static_cast<std::ptrdiff_t>(iy) * dx.w;
              const S* row = src + static_cast<std::ptrdiff_t>(oy) * wo;
              for (int ox = 0; ox < wo; ++ox) {
                const int ix = ox * stride_ - pad_ + kx;
                if (ix >= 0 && ix < dx.w) out_row[ix] += row[ox];
              }
            }
          }
        }
      }
    }
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Parameter<S> weight_;
  Tensor4<S> input_;
};

// ---------------------------------------------------------------------------

template <class S>
class BatchNorm2d {
public:
  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels)
      : channels_(channels),
        gamma_(name + ".weight", {channels}),
        beta_(name + ".bias", {channels}),
        running_mean_(name + ".running_mean", {channels}, false),
        running_var_(name + ".running_var", {channels}, false) {
    std::fill(gamma_.value.begin(), gamma_.value.end(), S(1));
    std::fill(running_var_.value.begin(), running_var_.value.end(), S(1));
  }

  Tensor4<S> forward(const Tensor4<S>& x, Mode mode) {
    mode_ = mode;
    const std::size_t plane = x.plane();
    const double count = static_cast<double>(x.n) * static_cast<double>(plane);
    Tensor4<S> y(x.n, x.c, x.h, x.w);
    inv_std_.assign(static_cast<std::size_t>(channels_), S(0));
    if (mode == Mode::train) xhat_ = Tensor4<S>(x.n, x.c, x.h, x.w);
    for (int c = 0; c < channels_; ++c) {
      double mean = 0.0, var = 0.0;
      if (mode == Mode::train) {
        for (int i = 0; i < x.n; ++i) {
          const S* p = x.sample(i) + static_cast<std::size_t>(c) * plane;
          for (std::size_t k = 0; k < plane; ++k) mean += p[k];
        }
        mean /= count;
        for (int i = 0; i < x.n; ++i) {
          const S* p = x.sample(i) + static_cast<std::size_t>(c) * plane;
          for (std::size_t k = 0; k < plane; ++k) var += (p[k] - mean) * (p[k] - mean);
        }
        var /= count;
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        auto& rm = running_mean_.value[static_cast<std::size_t>(c)];
        auto& rv = running_var_.value[static_cast<std::size_t>(c)];
        rm = static_cast<S>((1.0 - kMomentum) * rm + kMomentum * mean);
        rv = static_cast<S>((1.0 - kMomentum) * rv + kMomentum * unbiased);
      } else {
        mean = running_mean_.value[static_cast<std::size_t>(c)];
        var = running_var_.value[static_cast<std::size_t>(c)];
      }
      const S inv = static_cast<S>(1.0 / std::sqrt(var + kEps));
      inv_std_[static_cast<std::size_t>(c)] = inv;
      const S g = gamma_.value[static_cast<std::size_t>(c)], b = beta_.value[static_cast<std::size_t>(c)];
      const S m = static_cast<S>(mean);
      for (int i = 0; i < x.n; ++i) {
        const S* p = x.sample(i) + static_cast<std::size_t>(c) * plane;
        S* q = y.sample(i) + static_cast<std::size_t>(c) * plane;
        S* h = mode == Mode::train ? xhat_.sample(i) + static_cast<std::size_t>(c) * plane : nullptr;
        for (std::size_t k = 0; k < plane; ++k) {
          const S xh = (p[k] - m) * inv;
          if (h) h[k] = xh;
          q[k] = g * xh + b;
        }
      }
    }
    return y;
  }

  Tensor4<S> backward(const Tensor4<S>& dy) {
    const std::size_t plane = dy.plane();
    const S count = static_cast<S>(static_cast<double>(dy.n) * static_cast<double>(plane));
    Tensor4<S> dx(dy.n, dy.c, dy.h, dy.w);
    for (int c = 0; c < channels_; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      const S g = gamma_.value[cu], inv = inv_std_[cu];
      if (mode_ == Mode::train) {
        S sum_dy = 0, sum_dy_xh = 0;
        for (int i = 0; i < dy.n; ++i) {
          const S* d = dy.sample(i) + cu * plane;
          const S* h = xhat_.sample(i) + cu * plane;
          for (std::size_t k = 0; k < plane; ++k) {
            sum_dy += d[k];
            sum_dy_xh += d[k] * h[k];
          }
        }
        gamma_.has_grad = beta_.has_grad = true;
        gamma_.grad[cu] += sum_dy_xh;
        beta_.grad[cu] += sum_dy;
        const S scale = g * inv / count;
        for (int i = 0; i < dy.n; ++i) {
          const S* d = dy.sample(i) + cu * plane;
          const S* h = xhat_.sample(i) + cu * plane;
          S* o = dx.sample(i) + cu * plane;
          for (std::size_t k = 0; k < plane; ++k) o[k] = scale * (count * d[k] - sum_dy - h[k] * sum_dy_xh);
        }
      } else {
        // Running statistics are constants in eval mode.
        const S scale = g * inv;
        for (int i = 0; i < dy.n; ++i) {
          const S* d = dy.sample(i) + cu * plane;
          S* o = dx.sample(i) + cu * plane;
          for (std::size_t k = 0; k < plane; ++k) o[k] = scale * d[k];
        }
      }
    }
    return dx;
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&running_mean_);
    out.push_back(&running_var_);
  }

private:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
  int channels_ = 0;
  Parameter<S> gamma_, beta_, running_mean_, running_var_;
  Mode mode_ = Mode::eval;
  Tensor4<S> xhat_;
  std::vector<S> inv_std_;
};

// ---------------------------------------------------------------------------

template <class S>
class ReLU {
public:
  Tensor4<S> forward(Tensor4<S> x) {
    for (auto& v : x.data) v = v > S(0) ? v : S(0);
    output_ = x;
    return x;
  }
  Tensor4<S> backward(Tensor4<S> dy) const {
    for (std::size_t k = 0; k < dy.data.size(); ++k)
      if (!(output_.data[k] > S(0))) dy.data[k] = S(0);
    return dy;
  }

private:
  Tensor4<S> output_;
};

// ---------------------------------------------------------------------------

/// Fully connected layer on row vectors: Y = X W^T + b.
template <class S>
class Linear {
public:
  Linear() = default;
  Linear(const std::string& name, int in, int out, bool bias = true)
      : in_(in), out_(out), weight_(name + ".weight", {out, in}) {
    if (bias) bias_ = Parameter<S>(name + ".bias", {out});
  }

  /// U(-1/sqrt(in), 1/sqrt(in)) for weight and bias.
  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    for (auto& v : weight_.value) v = static_cast<S>(rng.uniform(-bound, bound));
    for (auto& v : bias_.value) v = static_cast<S>(rng.uniform(-bound, bound));
  }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  bool has_bias() const { return !bias_.value.empty(); }

  Mat<S> forward(const Mat<S>& x) const {
    if (x.cols() != in_) throw ValidationError("linear " + weight_.name + ": expected " + std::to_string(in_) +
                                               " inputs, got " + std::to_string(x.cols()));
    Mat<S> y = x * weight_.matrix(out_, in_).transpose();
    if (has_bias()) y.rowwise() += Eigen::Map<const RowVec<S>>(bias_.value.data(), out_);
    return y;
  }

  /// Accumulates parameter gradients and returns dL/dx. `x` is the forward input.
  Mat<S> backward(const Mat<S>& x, const Mat<S>& dy) {
    weight_.grad_matrix(out_, in_).noalias() += dy.transpose() * x;
    if (has_bias()) {
      bias_.has_grad = true;
      Eigen::Map<RowVec<S>>(bias_.grad.data(), out_) += dy.colwise().sum();
    }
    return dy * weight_.matrix(out_, in_);
  }

  void collect(ParamRefs<S>& out) {
    out.push_back(&weight_);
    if (has_bias()) out.push_back(&bias_);
  }
  Parameter<S>& weight() { return weight_; }
  Parameter<S>& bias() { return bias_; }
  const Parameter<S>& weight() const { return weight_; }
  const Parameter<S>& bias() const { return bias_; }

private:
  int in_ = 0, out_ = 0;
  Parameter<S> weight_;
  Parameter<S> bias_;
};

// ---------------------------------------------------------------------------

template <class S>
inline Tensor4<S> add(Tensor4<S> a, const Tensor4<S>& b) {
  for (std::size_t k = 0; k < a.data.size(); ++k) a.data[k] += b.data[k];
  return a;
}

template <class S>
class BasicBlock {
public:
  BasicBlock(const std::string& name, int in, int out, int stride)
      : conv1_(name + ".conv1", in, out, 3, stride, 1),
        bn1_(name + ".bn1", out),
        conv2_(name + ".conv2", out, out, 3, 1, 1),
        bn2_(name + ".bn2", out) {
    if (stride != 1 || in != out) {
      down_conv_ = std::make_unique<Conv2d<S>>(name + ".downsample.0", in, out, 1, stride, 0);
      down_bn_ = std::make_unique<BatchNorm2d<S>>(name + ".downsample.1", out);
    }
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (down_conv_) down_conv_->init(rng);
  }

  Tensor4<S> forward(const Tensor4<S>& x, Mode mode) {
    auto h = relu1_.forward(bn1_.forward(conv1_.forward(x), mode));
    h = bn2_.forward(conv2_.forward(h), mode);
    auto shortcut = down_conv_ ? down_bn_->forward(down_conv_->forward(x), mode) : x;
    return relu2_.forward(add(std::move(h), shortcut));
  }

  Tensor4<S> backward(const Tensor4<S>& dy) {
    auto d = relu2_.backward(dy);
    auto dx = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(d)))));
    if (down_conv_) return add(std::move(dx), down_conv_->backward(down_bn_->backward(d)));
    return add(std::move(dx), d);
  }

  void collect(ParamRefs<S>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    if (down_conv_) {
      down_conv_->collect(out);
      down_bn_->collect(out);
    }
  }

private:
  Conv2d<S> conv1_;
  BatchNorm2d<S> bn1_;
  ReLU<S> relu1_;
  Conv2d<S> conv2_;
  BatchNorm2d<S> bn2_;
  ReLU<S> relu2_;
  std::unique_ptr<Conv2d<S>> down_conv_;
  std::unique_ptr<BatchNorm2d<S>> down_bn_;
};

/// ResNet-18 trunk with a CIFAR-style stem: 3x3 stride-1 convolution, no max-pool.
/// `width` is the first-stage channel count (64 for the standard network).
template <class S>
class ResNet18 {
public:
  static constexpr int kStages = 4;

  explicit ResNet18(int in_channels = 32, int width = 64)
      : in_channels_(in_channels),
        width_(width),
        stem_conv_("image.conv1", in_channels, width, 3, 1, 1),
        stem_bn_("image.bn1", width) {
    int in = width;
    for (int s = 0; s < kStages; ++s) {
      const int out = width << s;
      const int stride = s == 0 ? 1 : 2;
      const std::string prefix = "image.layer" + std::to_string(s + 1);
      blocks_.emplace_back(std::make_unique<BasicBlock<S>>(prefix + ".0", in, out, stride));
      blocks_.emplace_back(std::make_unique<BasicBlock<S>>(prefix + ".1", out, out, 1));
      in = out;
    }
  }

  void init(Rng& rng) {
    stem_conv_.init(rng);
    for (auto& b : blocks_) b->init(rng);
  }

  int in_channels() const { return in_channels_; }
  int width() const { return width_; }
  int out_channels() const { return width_ << (kStages - 1); }

  /// Returns last-stage activations. When `keep_stage` is 1..4, the output of that
  /// stage is stored and available through `stage_output`.
  Tensor4<S> forward(const Tensor4<S>& x, Mode mode, int keep_stage = 0) {
    auto h = stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(x), mode));
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      h = blocks_[b]->forward(h, mode);
      if (b % 2 == 1 && static_cast<int>(b / 2) + 1 == keep_stage) kept_ = h;
    }
    return h;
  }

  const Tensor4<S>& stage_output() const { return kept_; }

  /// Backpropagates from the last stage down to the input.
  Tensor4<S> backward(const Tensor4<S>& dy) { return backward_from(kStages, dy); }

  /// Backpropagates a gradient given at the output of `stage` (1..4) down to the
  /// output of stage `stop_stage` (exclusive), or to the input when `stop_stage == 0`.
  Tensor4<S> backward_from(int stage, const Tensor4<S>& dy, int stop_stage = 0) {
    Tensor4<S> d = dy;
    for (int b = 2 * stage - 1; b >= 2 * stop_stage; --b) d = blocks_[static_cast<std::size_t>(b)]->backward(d);
    if (stop_stage == 0) d = stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(d)));
    return d;
  }

  void collect(ParamRefs<S>& out) {
    stem_conv_.collect(out);
    stem_bn_.collect(out);
    for (auto& b : blocks_) b->collect(out);
  }

private:
  int in_channels_;
  int width_;
  Conv2d<S> stem_conv_;
  BatchNorm2d<S> stem_bn_;
  ReLU<S> stem_relu_;
  std::vector<std::unique_ptr<BasicBlock<S>>> blocks_;
  Tensor4<S> kept_;
};

}  // namespace nodule_align::nn
