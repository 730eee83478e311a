#pragma once

#include "nodule_align/encoders.hpp"
#include "nodule_align/nn.hpp"

#include <string>
#include <vector>

namespace nodule_align {

/// How the conditioning vectors F are formed from the image features.
enum class ConditionMode {
  channel_groups,  ///< T contiguous channel groups, each flattened and projected to d
  shared,          ///< single pooled vector shared by every context token
};

/// T x d image feature vectors, one row per group.
template <class S>
struct GroupedFeatures {
  Mat<S> F;
};

/// Learnable prompt pieces for one instance.
template <class S>
struct PromptSet {
  Mat<S> context;              ///< l: T x d, shared across images
  Mat<S> conditional;          ///< l': T x d, h(F_t) for this image
  std::vector<Mat<S>> classes; ///< frozen class-name token embeddings, one matrix per class
};

/// Splits C x h x w maps into T contiguous channel blocks, flattens each block and maps
/// it to d with one shared bias-free linear layer.
template <class S>
class GroupProjection {
public:
  GroupProjection() = default;
  GroupProjection(int groups, int channels, int height, int width, int dim = kEmbedDim)
      : groups_(groups), channels_(channels), plane_(height * width) {
    if (groups <= 0 || channels % groups != 0)
      throw ConfigError("T = " + std::to_string(groups) + " must divide the feature channel count " +
                        std::to_string(channels));
    proj_ = nn::Linear<S>("ccp.group_proj", (channels / groups) * plane_, dim, /*bias=*/false);
  }

  void init(Rng& rng) { proj_.init(rng); }
  int groups() const { return groups_; }
  int group_width() const { return (channels_ / groups_) * plane_; }

  /// `maps` points at one sample's C x h x w activations.
  Mat<S> flatten(const S* maps) const {
    return Eigen::Map<const Mat<S>>(maps, groups_, group_width());
  }

  GroupedFeatures<S> forward(const S* maps) const { return {proj_.forward(flatten(maps))}; }

  /// Accumulates projection gradients; writes dL/dmaps for the sample into `d_maps`.
  void backward(const S* maps, const Mat<S>& dF, S* d_maps) {
    const Mat<S> dx = proj_.backward(flatten(maps), dF);
    Eigen::Map<Mat<S>>(d_maps, groups_, group_width()) += dx;
  }

  nn::Linear<S>& linear() { return proj_; }
  void collect(nn::ParamRefs<S>& out) { proj_.collect(out); }

private:
  int groups_ = 1, channels_ = 0, plane_ = 0;
  nn::Linear<S> proj_;
};

/// One-hidden-layer MLP producing conditional tokens: l'_t = W2 relu(W1 F_t / |F_t| + b1) + b2.
template <class S>
class ContextNet {
public:
  ContextNet() = default;
  explicit ContextNet(int dim = kEmbedDim, int hidden = kEmbedDim / 16)
      : fc1_("ccp.ctx.0", dim, hidden), fc2_("ccp.ctx.2", hidden, dim) {}

  void init(Rng& rng) {
    fc1_.init(rng);
    fc2_.init(rng);
  }

  int hidden() const { return fc1_.out_features(); }

  /// Rows of F are L2-normalized before the first layer.
  Mat<S> forward(const Mat<S>& F) const { return fc2_.forward(relu(fc1_.forward(normalized(F)))); }

  /// Accumulates parameter gradients and returns dL/dF.
  Mat<S> backward(const Mat<S>& F, const Mat<S>& d_out) {
    const Mat<S> X = normalized(F);
    const Mat<S> pre = fc1_.forward(X);
    const Mat<S> hidden = relu(pre);
    Mat<S> d_hidden = fc2_.backward(hidden, d_out);
    d_hidden.array() *= (pre.array() > S(0)).template cast<S>();
    const Mat<S> dX = fc1_.backward(X, d_hidden);
    Mat<S> dF(F.rows(), F.cols());
    for (Eigen::Index r = 0; r < F.rows(); ++r) {
      const S n = std::max(F.row(r).norm(), kEps);
      dF.row(r) = (dX.row(r) - X.row(r) * X.row(r).dot(dX.row(r))) / n;
    }
    return dF;
  }

  nn::Linear<S>& first() { return fc1_; }
  nn::Linear<S>& second() { return fc2_; }
  void collect(nn::ParamRefs<S>& out) {
    fc1_.collect(out);
    fc2_.collect(out);
  }

private:
  static constexpr S kEps = S(1e-12);
  static Mat<S> relu(Mat<S> x) { return x.cwiseMax(S(0)); }
  static Mat<S> normalized(const Mat<S>& F) {
    Mat<S> X(F.rows(), F.cols());
    for (Eigen::Index r = 0; r < F.rows(); ++r) X.row(r) = F.row(r) / std::max(F.row(r).norm(), kEps);
    return X;
  }
  nn::Linear<S> fc1_, fc2_;
};

/// Prompt sequences in fixed order: the T context tokens (l_t + l'_t), then the class
/// name tokens.
template <class S>
std::vector<Mat<S>> assemble_prompts(const PromptSet<S>& p, int context_length = 77) {
  if (p.context.rows() != p.conditional.rows() || p.context.cols() != p.conditional.cols())
    throw ValidationError("context and conditional tokens differ in shape");
  std::vector<Mat<S>> seqs;
  seqs.reserve(p.classes.size());
  const auto T = p.context.rows();
  for (const auto& cls : p.classes) {
    if (cls.cols() != p.context.cols()) throw ValidationError("class token width differs from context width");
    const auto L = T + cls.rows();
    if (L > context_length)
      throw ValidationError("prompt of " + std::to_string(L) + " tokens exceeds context length " +
                            std::to_string(context_length));
    Mat<S> seq(L, p.context.cols());
    seq.topRows(T) = p.context + p.conditional;
    seq.bottomRows(cls.rows()) = cls;
    seqs.push_back(std::move(seq));
  }
  return seqs;
}

/// Row k is the encoding of prompt sequence k.
template <class S>
Mat<S> class_features(const std::vector<Mat<S>>& prompts, const TextEncoder<S>& enc) {
  Mat<S> C(static_cast<Eigen::Index>(prompts.size()), enc.output_dim());
  for (std::size_t k = 0; k < prompts.size(); ++k) C.row(static_cast<Eigen::Index>(k)) = enc.encode(prompts[k]);
  return C;
}

/// Gradient of a loss w.r.t. the summed context tokens (l_t + l'_t), which is also the
/// gradient w.r.t. l and w.r.t. l' separately.
template <class S>
Mat<S> class_features_backward(const std::vector<Mat<S>>& prompts, const TextEncoder<S>& enc, const Mat<S>& dC,
                               Eigen::Index context_tokens) {
  Mat<S> d_ctx = Mat<S>::Zero(context_tokens, enc.token_dim());
  for (std::size_t k = 0; k < prompts.size(); ++k) {
    const Mat<S> d_tokens = enc.encode_backward(prompts[k], dC.row(static_cast<Eigen::Index>(k)));
    d_ctx += d_tokens.topRows(context_tokens);
  }
  return d_ctx;
}

inline std::vector<std::string> default_class_names(std::span<const ClassLabel> classes) {
  std::vector<std::string> names;
  for (auto c : classes) names.push_back(std::string(to_string(c)) + " nodule");
  return names;
}

/// Channel-wise conditional prompt module: grouping projection, context net, learnable
/// context tokens and frozen class-name embeddings.
template <class S>
class ConditionalPrompts {
public:
  struct Forward {
    GroupedFeatures<S> grouped;
    PromptSet<S> prompts;
    std::vector<Mat<S>> sequences;
    Mat<S> C;
  };

  ConditionalPrompts(int context_tokens, ConditionMode mode, int feature_channels, int map_h, int map_w,
                     const TextEncoder<S>& encoder, std::span<const std::string> class_names)
      : tokens_(context_tokens),
        mode_(mode),
        context_("ccp.context", {context_tokens, encoder.token_dim()}),
        ctx_net_(encoder.token_dim(), encoder.token_dim() / 16),
        encoder_(&encoder) {
    if (context_tokens <= 0) throw ConfigError("T must be positive");
    if (mode == ConditionMode::channel_groups) {
      projection_ = GroupProjection<S>(context_tokens, feature_channels, map_h, map_w, encoder.token_dim());
    } else if (feature_channels != encoder.token_dim()) {
      throw ConfigError("shared conditioning needs feature channels (" + std::to_string(feature_channels) +
                        ") equal to the token width (" + std::to_string(encoder.token_dim()) + ")");
    }
    for (const auto& name : class_names) class_tokens_.push_back(encoder.embed_text(name));
    for (const auto& cls : class_tokens_)
      if (context_tokens + cls.rows() > encoder.context_length())
        throw ConfigError("T = " + std::to_string(context_tokens) + " plus class tokens exceeds the encoder context");
  }

  void init(Rng& rng) {
    for (auto& v : context_.value) v = static_cast<S>(rng.normal(0.0, 0.02));
    projection_.init(rng);
    ctx_net_.init(rng);
  }

  int context_tokens() const { return tokens_; }
  ConditionMode mode() const { return mode_; }
  int num_classes() const { return static_cast<int>(class_tokens_.size()); }
  const TextEncoder<S>& encoder() const { return *encoder_; }

  Mat<S> context() const { return context_.matrix(tokens_, encoder_->token_dim()); }

  /// Conditioning vectors for one sample: `maps` is its C x h x w block, `pooled` its
  /// pooled feature row.
  GroupedFeatures<S> group(const S* maps, const RowVec<S>& pooled) const {
    if (mode_ == ConditionMode::channel_groups) return projection_.forward(maps);
    return {Mat<S>(pooled)};
  }

  Forward forward(const S* maps, const RowVec<S>& pooled, bool need_classes = true) const {
    Forward f;
    f.grouped = group(maps, pooled);
    if (!need_classes) return f;
    f.prompts = prompt_set(f.grouped);
    f.sequences = assemble_prompts(f.prompts, encoder_->context_length());
    f.C = class_features(f.sequences, *encoder_);
    return f;
  }

  PromptSet<S> prompt_set(const GroupedFeatures<S>& g) const {
    PromptSet<S> p;
    p.context = context();
    const Mat<S> cond = ctx_net_.forward(g.F);
    p.conditional = cond.rows() == tokens_ ? cond : cond.row(0).replicate(tokens_, 1);
    p.classes = class_tokens_;
    return p;
  }

  /// Backward for one sample. `dF` and `dC` are loss gradients on F and C (dC may be
  /// empty when no loss uses C). Accumulates into the context, context-net and
  /// projection gradients; adds dL/dmaps into `d_maps` and returns dL/dpooled for the
  /// shared mode (zero row otherwise).
  RowVec<S> backward(const Forward& f, const S* maps, Mat<S> dF, const Mat<S>& dC, S* d_maps) {
    if (dC.size() > 0) {
      const Mat<S> d_ctx = class_features_backward(f.sequences, *encoder_, dC, tokens_);
      context_.grad_matrix(tokens_, encoder_->token_dim()) += d_ctx;
      Mat<S> d_cond = d_ctx;
      if (f.grouped.F.rows() != tokens_) d_cond = d_ctx.colwise().sum();
      dF += ctx_net_.backward(f.grouped.F, d_cond);
    }
    if (mode_ == ConditionMode::channel_groups) {
      projection_.backward(maps, dF, d_maps);
      return RowVec<S>::Zero(encoder_->token_dim());
    }
    return dF.row(0);
  }

  GroupProjection<S>& projection() { return projection_; }
  ContextNet<S>& context_net() { return ctx_net_; }
  nn::Parameter<S>& context_parameter() { return context_; }

  void collect(nn::ParamRefs<S>& out) {
    out.push_back(&context_);
    if (mode_ == ConditionMode::channel_groups) projection_.collect(out);
    ctx_net_.collect(out);
  }

private:
  int tokens_;
  ConditionMode mode_;
  nn::Parameter<S> context_;
  GroupProjection<S> projection_;
  ContextNet<S> ctx_net_;
  std::vector<Mat<S>> class_tokens_;
  const TextEncoder<S>* encoder_;
};

}  // namespace nodule_align
