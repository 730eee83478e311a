#pragma once

#include "nodule_align/model.hpp"
#include "nodule_align/preprocessing.hpp"

#include <Eigen/Eigenvalues>
#include <png.h>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace nodule_align {

/// 32x32 heatmap, row-major, values in [0,1].
struct Heatmap {
  static constexpr int kSide = kPatchSide;
  std::vector<float> values = std::vector<float>(static_cast<std::size_t>(kSide) * kSide, 0.0f);
  /// Maximum of the rectified map before normalization.
  double raw_max = 0.0;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * kSide + x]; }
};

/// Bilinear resize with half-pixel centres (edges clamp).
inline std::vector<double> upsample_bilinear(const std::vector<double>& in, int h, int w, int out_h, int out_w) {
  std::vector<double> out(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const double sy = std::clamp((y + 0.5) * h / out_h - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = std::min(static_cast<int>(sy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double sx = std::clamp((x + 0.5) * w / out_w - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = std::min(static_cast<int>(sx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      auto v = [&](int yy, int xx) { return in[static_cast<std::size_t>(yy) * w + xx]; };
      out[static_cast<std::size_t>(y) * out_w + x] =
          (1 - fy) * ((1 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1 - fx) * v(y1, x0) + fx * v(y1, x1));
    }
  }
  return out;
}

/// Rectified weighted sum of activation planes, upsampled and min-max normalized.
/// `maps` and `grads` hold C planes of h x w for one sample.
template <class S>
Heatmap cam_from_activations(const S* maps, const S* grads, int channels, int h, int w) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> cam(plane, 0.0);
  for (int c = 0; c < channels; ++c) {
    const S* g = grads + static_cast<std::size_t>(c) * plane;
    const S* a = maps + static_cast<std::size_t>(c) * plane;
    double alpha = 0.0;
    for (std::size_t k = 0; k < plane; ++k) alpha += g[k];
    alpha /= static_cast<double>(plane);
    for (std::size_t k = 0; k < plane; ++k) cam[k] += alpha * a[k];
  }
  for (double& v : cam) v = std::max(v, 0.0);
  Heatmap hm;
  hm.raw_max = *std::max_element(cam.begin(), cam.end());
  const auto up = upsample_bilinear(cam, h, w, Heatmap::kSide, Heatmap::kSide);
  const auto [lo, hi] = std::minmax_element(up.begin(), up.end());
  const double range = *hi - *lo;
  if (!(range > 1e-12 * std::max(1.0, std::abs(*hi)))) return hm;
  for (std::size_t k = 0; k < up.size(); ++k) hm.values[k] = static_cast<float>((up[k] - *lo) / range);
  return hm;
}

/// Grad-CAM of `target_class` at the output of stage `layer` (3 or 4). Only the image
/// branch is used; parameter gradients touched on the way are cleared again.
template <class S>
Heatmap grad_cam(NoduleAlignModel<S>& model, const ChannelImage& image, int target_class, int layer = 4) {
  if (target_class < 0 || target_class >= model.shape().num_classes)
    throw ValidationError("target class " + std::to_string(target_class) + " outside 0.." +
                          std::to_string(model.shape().num_classes - 1));
  if (layer != 3 && layer != 4) throw ValidationError("Grad-CAM layer must be layer3 or layer4");
  auto& enc = model.image();
  std::vector<ChannelImage> one{image};
  const auto fwd = enc.forward(to_batch<S>(one), nn::Mode::eval, layer);
  Mat<S> d_logits = Mat<S>::Zero(1, model.shape().num_classes);
  d_logits(0, target_class) = S(1);
  const nn::Tensor4<S> d4 = enc.logit_gradient_on_maps(fwd, d_logits);
  if (layer == 4) return cam_from_activations(fwd.feature_maps.sample(0), d4.sample(0), d4.c, d4.h, d4.w);
  const nn::Tensor4<S> d3 = enc.trunk().backward_from(4, d4, 3);
  const auto& a3 = enc.trunk().stage_output();
  Heatmap hm = cam_from_activations(a3.sample(0), d3.sample(0), d3.c, d3.h, d3.w);
  for (auto* p : model.parameters())
    if (p->trainable) p->zero_grad();
  return hm;
}

/// Image quadrant: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right (y down).
inline bool in_quadrant(int quadrant, int y, int x, int side = Heatmap::kSide) {
  const bool bottom = y >= side / 2, right = x >= side / 2;
  return quadrant == (bottom ? 2 : 0) + (right ? 1 : 0);
}

/// Share of the heat carried by the top 10% of pixels that lies inside `quadrant`.
inline double top_decile_fraction(const Heatmap& hm, int quadrant) {
  std::vector<int> idx(hm.values.size());
  std::iota(idx.begin(), idx.end(), 0);
  const auto keep = static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(idx.size())));
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return hm.values[static_cast<std::size_t>(a)] > hm.values[static_cast<std::size_t>(b)]; });
  double total = 0.0, inside = 0.0;
  for (std::size_t i = 0; i < keep; ++i) {
    const int k = idx[i];
    const double v = hm.values[static_cast<std::size_t>(k)];
    total += v;
    if (in_quadrant(quadrant, k / Heatmap::kSide, k % Heatmap::kSide)) inside += v;
  }
  return total > 0.0 ? inside / total : 0.0;
}

// ---------------------------------------------------------------------------
// Embedding projection

struct TsneOptions {
  double perplexity = 15.0;
  int iterations = 1000;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  std::uint64_t seed = 0;
};

namespace detail {

/// Conditional affinities of row i with a Gaussian whose width matches the perplexity.
inline void row_affinities(const Mat<double>& D2, Eigen::Index i, double perplexity, Eigen::Ref<RowVec<double>> out) {
  const Eigen::Index n = D2.rows();
  const double target = std::log(perplexity);
  double beta = 1.0, lo = -std::numeric_limits<double>::infinity(), hi = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter < 200; ++iter) {
    double sum = 0.0, weighted = 0.0;
    double dmin = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) dmin = std::min(dmin, D2(i, j));
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) {
        out(j) = 0.0;
        continue;
      }
      out(j) = std::exp(-beta * (D2(i, j) - dmin));
      sum += out(j);
      weighted += out(j) * (D2(i, j) - dmin);
    }
    const double entropy = std::log(sum) + beta * weighted / sum;
    out /= sum;
    const double diff = entropy - target;
    if (std::abs(diff) < 1e-5) break;
    if (diff > 0) {
      lo = beta;
      beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
    } else {
      hi = beta;
      beta = std::isinf(lo) ? beta / 2.0 : 0.5 * (beta + lo);
    }
  }
}

inline Mat<double> pairwise_sq_dists(const Mat<double>& X) {
  const Vec<double> sq = X.rowwise().squaredNorm();
  Mat<double> D = (-2.0 * X * X.transpose()).colwise() + sq;
  D.rowwise() += sq.transpose();
  return D.cwiseMax(0.0);
}

/// First `k` principal-component scores with a deterministic sign.
inline Mat<double> pca_scores(const Mat<double>& X, int k) {
  const Mat<double> Xc = X.rowwise() - X.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Mat<double>> eig(Xc.transpose() * Xc);
  Mat<double> V(X.cols(), k);
  for (int c = 0; c < k; ++c) {
    Vec<double> v = eig.eigenvectors().col(X.cols() - 1 - c);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    V.col(c) = v;
  }
  return Xc * V;
}

}  // namespace detail

/// Exact t-SNE to two dimensions with PCA initialization.
inline Mat<double> tsne(const Mat<double>& X, const TsneOptions& opt = {}) {
  const Eigen::Index n = X.rows();
  if (n < 10) throw ValidationError("projection needs at least 10 samples, got " + std::to_string(n));
  if (!(opt.perplexity > 0.0) || opt.perplexity >= static_cast<double>(n))
    throw ValidationError("perplexity must be in (0, n)");
  const Mat<double> D2 = detail::pairwise_sq_dists(X);
  Mat<double> P(n, n);
  for (Eigen::Index i = 0; i < n; ++i) detail::row_affinities(D2, i, opt.perplexity, P.row(i));
  P = (P + P.transpose().eval()) / (2.0 * static_cast<double>(n));
  P = P.cwiseMax(1e-12);

  Mat<double> Y = detail::pca_scores(X, 2);
  {
    const double sd = std::sqrt((Y.col(0).array() - Y.col(0).mean()).square().mean());
    Y *= sd > 0 ? 1e-4 / sd : 1.0;
    if (!(sd > 0)) {
      Rng rng(opt.seed);
      for (Eigen::Index i = 0; i < Y.size(); ++i) Y.data()[i] = rng.normal(0.0, 1e-4);
    }
  }
  const double lr = std::max(static_cast<double>(n) / opt.early_exaggeration / 4.0, 50.0);
  Mat<double> update = Mat<double>::Zero(n, 2), gains = Mat<double>::Ones(n, 2);
  for (int it = 0; it < opt.iterations; ++it) {
    if (it == opt.exaggeration_iterations) {
      update.setZero();
      gains.setOnes();
    }
    const double exaggeration = it < opt.exaggeration_iterations ? opt.early_exaggeration : 1.0;
    const double momentum = it < opt.exaggeration_iterations ? 0.5 : 0.8;
    const Mat<double> num = (detail::pairwise_sq_dists(Y).array() + 1.0).inverse().matrix();
    Mat<double> Q = num;
    Q.diagonal().setZero();
    const double qsum = Q.sum();
    Mat<double> W = (exaggeration * P - Q / qsum).cwiseProduct(num);
    W.diagonal().setZero();
    const Mat<double> grad = 4.0 * (W.rowwise().sum().asDiagonal() * Y - W * Y);
    for (Eigen::Index k = 0; k < grad.size(); ++k) {
      double& g = gains.data()[k];
      g = grad.data()[k] * update.data()[k] < 0 ? g + 0.2 : g * 0.8;
      g = std::max(g, 0.01);
    }
    update = momentum * update - lr * gains.cwiseProduct(grad);
    Y += update;
  }
  return Y.rowwise() - Y.colwise().mean();
}

/// Mean silhouette coefficient with Euclidean distance. Needs two or more labels.
inline double silhouette(const Mat<double>& X, std::span<const int> labels) {
  const Eigen::Index n = X.rows();
  if (static_cast<std::size_t>(n) != labels.size()) throw ValidationError("silhouette: label count differs");
  const std::set<int> classes(labels.begin(), labels.end());
  if (classes.size() < 2) throw ValidationError("silhouette needs at least two classes");
  const Mat<double> D = detail::pairwise_sq_dists(X).cwiseSqrt();
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    std::map<int, std::pair<double, int>> by_class;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (j == i) continue;
      auto& e = by_class[labels[static_cast<std::size_t>(j)]];
      e.first += D(i, j);
      e.second += 1;
    }
    const int own = labels[static_cast<std::size_t>(i)];
    const auto it = by_class.find(own);
    if (it == by_class.end() || it->second.second == 0) continue;
    const double a = it->second.first / it->second.second;
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [c, e] : by_class)
      if (c != own && e.second > 0) b = std::min(b, e.first / e.second);
    const double denom = std::max(a, b);
    total += denom > 0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// PNG output

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

inline void write_png(const std::filesystem::path& path, int width, int height, const std::vector<Rgb>& pixels) {
  if (pixels.size() != static_cast<std::size_t>(width) * height) throw ValidationError("PNG pixel count mismatch");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) throw RuntimeFailure("cannot open for writing: " + tmp.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw RuntimeFailure("PNG encoding failed: " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<std::uint8_t> row(static_cast<std::size_t>(width) * 3);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const Rgb& p = pixels[static_cast<std::size_t>(y) * width + x];
      row[static_cast<std::size_t>(x) * 3] = p.r;
      row[static_cast<std::size_t>(x) * 3 + 1] = p.g;
      row[static_cast<std::size_t>(x) * 3 + 2] = p.b;
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  std::filesystem::rename(tmp, path);
}

/// Blue-cyan-yellow-red ramp.
inline Rgb jet(double v) {
  v = std::clamp(v, 0.0, 1.0);
  auto ch = [](double x) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(x, 0.0, 1.0))); };
  return {ch(1.5 - std::abs(4.0 * v - 3.0)), ch(1.5 - std::abs(4.0 * v - 2.0)), ch(1.5 - std::abs(4.0 * v - 1.0))};
}

/// Heatmap blended over the central axial slice, scaled up by `zoom`.
inline std::vector<Rgb> render_overlay(const ChannelImage& image, const Heatmap& hm, int zoom = 8, double alpha = 0.45) {
  const int side = Heatmap::kSide * zoom;
  std::vector<Rgb> px(static_cast<std::size_t>(side) * side);
  const int slice = ChannelImage::kChannels / 2;
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const int sy = y / zoom, sx = x / zoom;
      const double g = 255.0 * image.at(slice, sy, sx);
      const Rgb h = jet(hm.at(sy, sx));
      auto mix = [&](std::uint8_t c) { return static_cast<std::uint8_t>(std::lround((1 - alpha) * g + alpha * c)); };
      px[static_cast<std::size_t>(y) * side + x] = {mix(h.r), mix(h.g), mix(h.b)};
    }
  return px;
}

/// Scatter plot of 2-D points coloured by label on a white square canvas.
inline std::vector<Rgb> render_scatter(const Mat<double>& Y, std::span<const int> labels, int side = 512) {
  static const Rgb palette[] = {{31, 119, 180}, {255, 127, 14}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189}};
  std::vector<Rgb> px(static_cast<std::size_t>(side) * side, Rgb{255, 255, 255});
  const double xmin = Y.col(0).minCoeff(), xmax = Y.col(0).maxCoeff();
  const double ymin = Y.col(1).minCoeff(), ymax = Y.col(1).maxCoeff();
  const double margin = 16.0, span = side - 2 * margin;
  auto scale = [&](double v, double lo, double hi) { return hi > lo ? margin + span * (v - lo) / (hi - lo) : side / 2.0; };
  for (Eigen::Index i = 0; i < Y.rows(); ++i) {
    const double cx = scale(Y(i, 0), xmin, xmax), cy = side - scale(Y(i, 1), ymin, ymax);
    const Rgb c = palette[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)]) % std::size(palette)];
    for (int dy = -4; dy <= 4; ++dy)
      for (int dx = -4; dx <= 4; ++dx) {
        if (dx * dx + dy * dy > 16) continue;
        const int x = static_cast<int>(cx) + dx, y = static_cast<int>(cy) + dy;
        if (x >= 0 && y >= 0 && x < side && y < side) px[static_cast<std::size_t>(y) * side + x] = c;
      }
  }
  return px;
}

}  // namespace nodule_align
