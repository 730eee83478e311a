#pragma once

#include "nodule_align/annotations.hpp"
#include "nodule_align/nn.hpp"
#include "nodule_align/preprocessing.hpp"
#include "nodule_align/rng.hpp"

#include <cctype>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace nodule_align {

// ---------------------------------------------------------------------------
// Image branch

/// Outputs of the image encoder for a batch.
template <class S>
struct FeatureBundle {
  nn::Tensor4<S> feature_maps;  ///< N x 512 x 4 x 4 last-stage activations
  Mat<S> pooled;                ///< N x 512 global average pool
  Mat<S> logits;                ///< N x K classifier output
};

template <class S>
nn::Tensor4<S> to_batch(std::span<const ChannelImage> images) {
  nn::Tensor4<S> x(static_cast<int>(images.size()), ChannelImage::kChannels, ChannelImage::kHeight,
                   ChannelImage::kWidth);
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto px = images[i].pixels();
    std::copy(px.begin(), px.end(), x.sample(static_cast<int>(i)));
  }
  return x;
}

template <class S>
Mat<S> global_average_pool(const nn::Tensor4<S>& maps) {
  Mat<S> pooled(maps.n, maps.c);
  const auto plane = static_cast<Eigen::Index>(maps.plane());
  for (int i = 0; i < maps.n; ++i)
    pooled.row(i) = Eigen::Map<const Mat<S>>(maps.sample(i), maps.c, plane).rowwise().mean().transpose();
  return pooled;
}

/// ResNet-18 trunk with a 32-channel stem, global average pooling and a linear head.
/// This is the whole inference path.
template <class S>
class ImageEncoder {
public:
  ImageEncoder(int num_classes, int width = 64, int in_channels = ChannelImage::kChannels)
      : trunk_(in_channels, width), head_("head", trunk_.out_channels(), num_classes) {}

  void init(Rng& rng) {
    trunk_.init(rng);
    head_.init(rng);
  }

  int num_classes() const { return head_.out_features(); }
  int feature_channels() const { return trunk_.out_channels(); }
  int width() const { return trunk_.width(); }

  FeatureBundle<S> forward(const nn::Tensor4<S>& images, nn::Mode mode, int keep_stage = 0) {
    if (images.c != trunk_.in_channels() || images.h != ChannelImage::kHeight || images.w != ChannelImage::kWidth)
      throw ValidationError("image encoder expects " + std::to_string(trunk_.in_channels()) +
                            " channels of 32x32, got " + std::to_string(images.c) + "x" + std::to_string(images.h) +
                            "x" + std::to_string(images.w));
    FeatureBundle<S> out;
    out.feature_maps = trunk_.forward(images, mode, keep_stage);
    out.pooled = global_average_pool(out.feature_maps);
    out.logits = head_.forward(out.pooled);
    return out;
  }

  /// Backpropagates classifier-logit gradients plus an optional direct gradient on the
  /// feature maps (from the text-alignment branch) through the whole trunk.
  void backward(const FeatureBundle<S>& fwd, const Mat<S>& d_logits, const nn::Tensor4<S>* d_maps = nullptr) {
    nn::Tensor4<S> d = pooled_backward(fwd, head_.backward(fwd.pooled, d_logits));
    if (d_maps) d = nn::add(std::move(d), *d_maps);
    trunk_.backward(d);
  }

  /// Gradient of the logits w.r.t. the last-stage maps without touching any parameter
  /// gradient.
  nn::Tensor4<S> logit_gradient_on_maps(const FeatureBundle<S>& fwd, const Mat<S>& d_logits) const {
    return pooled_backward(fwd, d_logits * head_.weight().matrix(head_.out_features(), head_.in_features()));
  }

  nn::ResNet18<S>& trunk() { return trunk_; }
  nn::Linear<S>& head() { return head_; }

  void collect(nn::ParamRefs<S>& out) {
    trunk_.collect(out);
    head_.collect(out);
  }

private:
  static nn::Tensor4<S> pooled_backward(const FeatureBundle<S>& fwd, const Mat<S>& d_pooled) {
    const auto& m = fwd.feature_maps;
    nn::Tensor4<S> d(m.n, m.c, m.h, m.w);
    const S scale = S(1) / static_cast<S>(m.plane());
    for (int i = 0; i < m.n; ++i)
      for (int c = 0; c < m.c; ++c) {
        S* p = d.sample(i) + static_cast<std::size_t>(c) * m.plane();
        std::fill(p, p + m.plane(), d_pooled(i, c) * scale);
      }
    return d;
  }

  nn::ResNet18<S> trunk_;
  nn::Linear<S> head_;
};

// ---------------------------------------------------------------------------
// Text branch

/// A frozen text encoder: maps a sequence of token embeddings to a feature vector and
/// propagates gradients back to the token embeddings only. Implementations expose no
/// mutable weights.
template <class S>
class TextEncoder {
public:
  virtual ~TextEncoder() = default;

  virtual std::string identity() const = 0;
  virtual int context_length() const = 0;
  virtual int token_dim() const = 0;
  virtual int output_dim() const = 0;

  /// Frozen token embeddings of a text, one row per token.
  virtual Mat<S> embed_text(std::string_view text) const = 0;

  /// Encodes one token sequence (rows are tokens).
  virtual RowVec<S> encode(const Mat<S>& tokens) const = 0;

  /// Gradient w.r.t. the input tokens given the gradient on the output.
  virtual Mat<S> encode_backward(const Mat<S>& tokens, const RowVec<S>& d_out) const = 0;

  virtual std::uint64_t weights_checksum() const = 0;

protected:
  void check_length(const Mat<S>& tokens) const {
    if (tokens.rows() == 0) throw ValidationError("text encoder: empty token sequence");
    if (tokens.rows() > context_length())
      throw ValidationError("text encoder: sequence of " + std::to_string(tokens.rows()) +
                            " tokens exceeds context length " + std::to_string(context_length()));
    if (tokens.cols() != token_dim())
      throw ValidationError("text encoder: token width " + std::to_string(tokens.cols()) + ", expected " +
                            std::to_string(token_dim()));
  }
};

inline std::vector<std::string> tokenize_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      words.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

/// Deterministic stand-in for a pre-trained text encoder, used for desk-scale runs and
/// tests. Each token is scaled to unit RMS, a fixed gain vector p_j is applied per
/// position j, then
///   h = mean_j(p_j * t_j / rms(t_j)),  z = W h,  n = z / rms(z),  u = tanh(n),  out = u / |u|.
/// Word embeddings are seeded from a hash of the word, so any vocabulary works.
template <class S>
class StubTextEncoder final : public TextEncoder<S> {
public:
  explicit StubTextEncoder(std::uint64_t seed = 0, int dim = kEmbedDim, int context_length = 77)
      : seed_(seed), dim_(dim), context_(context_length), positions_(context_length, dim), weight_(dim, dim) {
    Rng rng(derive_seed(seed, 0x7e47));
    for (Eigen::Index i = 0; i < positions_.size(); ++i) positions_.data()[i] = static_cast<S>(1.0 + 0.5 * rng.normal());
    const double std = 1.0 / std::sqrt(static_cast<double>(dim));
    for (Eigen::Index i = 0; i < weight_.size(); ++i) weight_.data()[i] = static_cast<S>(rng.normal(0.0, std));
  }

  std::string identity() const override {
    return "stub-text-encoder/v2/seed=" + std::to_string(seed_) + "/d=" + std::to_string(dim_) +
           "/ctx=" + std::to_string(context_);
  }
  int context_length() const override { return context_; }
  int token_dim() const override { return dim_; }
  int output_dim() const override { return dim_; }

  Mat<S> embed_text(std::string_view text) const override {
    const auto words = tokenize_words(text);
    if (words.empty()) throw ValidationError("cannot embed empty text");
    Mat<S> out(static_cast<Eigen::Index>(words.size()), dim_);
    for (std::size_t w = 0; w < words.size(); ++w) {
      Rng rng(derive_seed(seed_, fnv1a(words[w])));
      for (int k = 0; k < dim_; ++k) out(static_cast<Eigen::Index>(w), k) = static_cast<S>(rng.normal(0.0, 0.02));
    }
    return out;
  }

  RowVec<S> encode(const Mat<S>& tokens) const override { return run(tokens).out; }

  Mat<S> encode_backward(const Mat<S>& tokens, const RowVec<S>& d_out) const override {
    const Trace t = run(tokens);
    const S u_norm = t.u.norm();
    const RowVec<S> du = (d_out - t.out * t.out.dot(d_out)) / u_norm;
    const RowVec<S> dn = du.cwiseProduct((RowVec<S>::Ones(dim_) - t.u.cwiseProduct(t.u)));
    const RowVec<S> dz = (dn - t.n * (t.n.dot(dn) / static_cast<S>(dim_))) / t.rms;
    const RowVec<S> dh = dz * weight_;
    const auto L = tokens.rows();
    Mat<S> d_tokens(L, dim_);
    for (Eigen::Index j = 0; j < L; ++j) {
      const S r = token_rms(tokens.row(j));
      const RowVec<S> x = tokens.row(j) / r;
      const RowVec<S> dx = positions_.row(j).cwiseProduct(dh) / static_cast<S>(L);
      d_tokens.row(j) = (dx - x * (x.dot(dx) / static_cast<S>(dim_))) / r;
    }
    return d_tokens;
  }

  std::uint64_t weights_checksum() const override {
    auto h = fnv1a_values(std::span<const S>(positions_.data(), static_cast<std::size_t>(positions_.size())));
    return fnv1a_values(std::span<const S>(weight_.data(), static_cast<std::size_t>(weight_.size())), h);
  }

private:
  struct Trace {
    RowVec<S> n, u, out;
    S rms;
  };

  S token_rms(const RowVec<S>& x) const {
    return std::sqrt(x.squaredNorm() / static_cast<S>(dim_) + static_cast<S>(1e-12));
  }

  Trace run(const Mat<S>& tokens) const {
    this->check_length(tokens);
    const auto L = tokens.rows();
    RowVec<S> h = RowVec<S>::Zero(dim_);
    for (Eigen::Index j = 0; j < L; ++j) h += positions_.row(j).cwiseProduct(tokens.row(j)) / token_rms(tokens.row(j));
    h /= static_cast<S>(L);
    const RowVec<S> z = h * weight_.transpose();
    Trace t;
    t.rms = std::sqrt(z.squaredNorm() / static_cast<S>(dim_) + static_cast<S>(1e-12));
    t.n = z / t.rms;
    t.u = t.n.array().tanh().matrix();
    t.out = t.u / t.u.norm();
    return t;
  }

  std::uint64_t seed_;
  int dim_;
  int context_;
  Mat<S> positions_;
  Mat<S> weight_;
};

enum class TextEncoderChoice { stub, pretrained };

template <class S>
std::unique_ptr<TextEncoder<S>> make_text_encoder(TextEncoderChoice choice, std::uint64_t seed) {
  if (choice == TextEncoderChoice::pretrained)
    throw ConfigError(
        "encoder = pretrained: no pre-trained text encoder weights are bundled with this build; "
        "use encoder = stub or register a TextEncoder implementation");
  return std::make_unique<StubTextEncoder<S>>(seed);
}

/// Encodes each text into one feature row.
template <class S>
Mat<S> encode_texts(const TextEncoder<S>& enc, std::span<const std::string> texts) {
  Mat<S> out(static_cast<Eigen::Index>(texts.size()), enc.output_dim());
  for (std::size_t i = 0; i < texts.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = enc.encode(enc.embed_text(texts[i]));
  return out;
}

inline std::vector<std::string> canonical_attribute_names() {
  return {kAttributeNames.begin(), kAttributeNames.end()};
}

/// Write-once cache of attribute features keyed by encoder identity and attribute
/// names. With a directory, entries also persist across processes.
class AttributeCache {
public:
  AttributeCache() = default;
  explicit AttributeCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  /// Uses $NODULE_ALIGN_CACHE as the on-disk directory when set.
  static AttributeCache from_environment() {
    if (const char* d = std::getenv("NODULE_ALIGN_CACHE"); d && *d) return AttributeCache(d);
    return AttributeCache();
  }

  static std::string key(std::string_view identity, std::span<const std::string> names) {
    std::string k(identity);
    for (const auto& n : names) k += "\n" + n;
    return hex64(fnv1a(k));
  }

  template <class S>
  Mat<S> get(const TextEncoder<S>& enc, std::span<const std::string> names) {
    const std::string k = key(enc.identity() + "/scalar" + std::to_string(sizeof(S)), names);
    std::lock_guard lock(mutex_);
    if (auto it = memory_.find(k); it != memory_.end()) return it->second.template cast<S>();
    Mat<double> features;
    if (auto from_disk = load(k, static_cast<int>(names.size()), enc.output_dim())) {
      features = std::move(*from_disk);
    } else {
      features = encode_texts(enc, names).template cast<double>();
      store(k, features);
    }
    auto [it, inserted] = memory_.emplace(k, std::move(features));
    return it->second.template cast<S>();
  }

  std::size_t size() const { return memory_.size(); }
  const std::optional<std::filesystem::path>& directory() const { return dir_; }

private:
  std::optional<Mat<double>> load(const std::string& k, int rows, int cols) const {
    if (!dir_) return std::nullopt;
    const auto path = *dir_ / ("attributes-" + k + ".bin");
    std::ifstream is(path, std::ios::binary);
    if (!is) return std::nullopt;
    try {
      if (io::read_le<std::uint32_t>(is) != static_cast<std::uint32_t>(rows) ||
          io::read_le<std::uint32_t>(is) != static_cast<std::uint32_t>(cols))
        return std::nullopt;
      Mat<double> m(rows, cols);
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = io::read_le<double>(is);
      return m;
    } catch (const RuntimeFailure&) {
      return std::nullopt;
    }
  }

  void store(const std::string& k, const Mat<double>& m) const {
    if (!dir_) return;
    io::write_atomic(*dir_ / ("attributes-" + k + ".bin"), [&](std::ostream& os) {
      io::write_le(os, static_cast<std::uint32_t>(m.rows()));
      io::write_le(os, static_cast<std::uint32_t>(m.cols()));
      for (Eigen::Index i = 0; i < m.size(); ++i) io::write_le(os, m.data()[i]);
    });
  }

  std::optional<std::filesystem::path> dir_;
  std::map<std::string, Mat<double>> memory_;
  mutable std::mutex mutex_;
};

/// Attribute features A (8 x d) for the canonical attribute names.
template <class S>
Mat<S> encode_attributes(const TextEncoder<S>& enc, AttributeCache& cache) {
  const auto names = canonical_attribute_names();
  return cache.get(enc, names);
}

}  // namespace nodule_align
