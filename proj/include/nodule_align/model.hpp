#pragma once

#include "nodule_align/ccp.hpp"
#include "nodule_align/config.hpp"
#include "nodule_align/encoders.hpp"
#include "nodule_align/losses.hpp"

#include <memory>
#include <optional>

namespace nodule_align {

/// Settings of the training objective.
struct ObjectiveSettings {
  LossSwitches switches;
  double alpha = 1.0;
  double beta = 0.5;
  AttributeWeighting weighting = AttributeWeighting::log_weight;

  /// Weight with which each alignment term enters the gradient. A disabled term has
  /// weight zero and is skipped entirely.
  double ic_weight() const { return switches.ic ? 1.0 : 0.0; }
  double ia_weight() const { return switches.ia ? alpha : 0.0; }
  double ca_weight() const { return switches.ca ? beta : 0.0; }
};

/// One training instance: label index into the variant's training classes plus the
/// attribute weights.
struct Instance {
  int label = 0;
  AttributeWeights weights;
};

/// Image encoder, classifier head, conditional prompt module, temperature and the frozen
/// text encoder. Without a text branch only the image path exists; that is all
/// inference needs.
template <class S>
class NoduleAlignModel {
public:
  struct Shape {
    int num_classes = 3;
    int width = 64;
    int T = 8;
    ConditionMode condition = ConditionMode::channel_groups;
    std::vector<std::string> class_names;
  };

  /// Image-only model.
  explicit NoduleAlignModel(const Shape& shape) : shape_(shape), image_(shape.num_classes, shape.width) {}

  /// Full model. `encoder` must outlive the model.
  NoduleAlignModel(const Shape& shape, std::shared_ptr<const TextEncoder<S>> encoder, Mat<S> attribute_features,
                   double tau_init)
      : shape_(shape),
        image_(shape.num_classes, shape.width),
        encoder_(std::move(encoder)),
        attributes_(std::move(attribute_features)),
        log_tau_("tau.log_tau", {1}) {
    if (static_cast<int>(shape.class_names.size()) != shape.num_classes)
      throw ConfigError("expected " + std::to_string(shape.num_classes) + " class names, got " +
                        std::to_string(shape.class_names.size()));
    if (attributes_.rows() != kAttributeCount || attributes_.cols() != encoder_->output_dim())
      throw ValidationError("attribute features must be 8 x " + std::to_string(encoder_->output_dim()));
    ccp_.emplace(shape.T, shape.condition, image_.feature_channels(), 4, 4, *encoder_, shape.class_names);
    log_tau_.decay = false;
    log_tau_.value[0] = Temperature<S>::from_value(tau_init).log_tau;
  }

  void init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x1a6e));
    image_.init(rng);
    if (ccp_) {
      Rng prompt_rng(derive_seed(seed, 0xcc9));
      ccp_->init(prompt_rng);
    }
  }

  const Shape& shape() const { return shape_; }
  bool has_text_branch() const { return ccp_.has_value(); }
  ImageEncoder<S>& image() { return image_; }
  ConditionalPrompts<S>& prompts() { return *ccp_; }
  const TextEncoder<S>& text_encoder() const { return *encoder_; }
  const Mat<S>& attribute_features() const { return attributes_; }
  S tau() const { return std::exp(log_tau_.value[0]); }
  nn::Parameter<S>& log_tau() { return log_tau_; }

  /// All parameters and buffers, in a fixed order.
  nn::ParamRefs<S> parameters() {
    nn::ParamRefs<S> out;
    image_.collect(out);
    if (ccp_) {
      ccp_->collect(out);
      out.push_back(&log_tau_);
    }
    return out;
  }

  /// Eval-mode classifier logits, computed in chunks.
  Mat<S> predict_logits(const nn::Tensor4<S>& images, int chunk = 32) {
    Mat<S> logits(images.n, shape_.num_classes);
    for (int first = 0; first < images.n; first += chunk) {
      const int count = std::min(chunk, images.n - first);
      nn::Tensor4<S> part(count, images.c, images.h, images.w);
      std::copy(images.sample(first), images.sample(first) + static_cast<std::ptrdiff_t>(count) * images.sample_size(),
                part.data.begin());
      logits.middleRows(first, count) = image_.forward(part, nn::Mode::eval).logits;
    }
    return logits;
  }

  /// Loss components of one instance given its encoder outputs; gradients are written to
  /// the optional outputs already scaled by the term weights.
  struct InstanceGrad {
    Mat<S> dF, dC;
    S d_log_tau = 0;
  };

  LossBreakdown instance_loss(const typename ConditionalPrompts<S>::Forward& f, const RowVec<S>& logits,
                              const Instance& inst, const ObjectiveSettings& obj, RowVec<S>* d_logits,
                              InstanceGrad* grad) const {
    const S lt = log_tau_.value[0];
    const bool with_grad = grad != nullptr;
    double ce = cross_entropy<S>(logits, inst.label, d_logits);
    double ic = 0, ia = 0, ca = 0;
    if (grad) {
      grad->dF = Mat<S>::Zero(f.grouped.F.rows(), f.grouped.F.cols());
      grad->dC = f.C.size() > 0 ? Mat<S>::Zero(f.C.rows(), f.C.cols()) : Mat<S>();
      grad->d_log_tau = 0;
    }
    if (obj.ic_weight() > 0) {
      auto r = image_class_loss<S>(f.grouped.F, f.C, inst.label, lt, with_grad);
      ic = r.loss;
      if (grad) {
        grad->dF += r.d_query;
        grad->dC += r.d_keys;
        grad->d_log_tau += r.d_log_tau;
      }
    }
    if (obj.ia_weight() > 0) {
      auto r = image_attribute_loss<S>(f.grouped.F, attributes_, inst.weights, lt, obj.weighting, with_grad);
      ia = r.loss;
      if (grad) {
        const S a = static_cast<S>(obj.ia_weight());
        grad->dF += a * r.d_query;
        grad->d_log_tau += a * r.d_log_tau;
      }
    }
    if (obj.ca_weight() > 0) {
      auto r = class_attribute_loss<S>(f.C, attributes_, inst.weights, lt, obj.weighting, with_grad);
      ca = r.loss;
      if (grad) {
        const S b = static_cast<S>(obj.ca_weight());
        grad->dC += b * r.d_query;
        grad->d_log_tau += b * r.d_log_tau;
      }
    }
    return total_loss(ce, ic, ia, ca, obj.alpha, obj.beta);
  }

  /// Forward and backward over one batch in train mode. Gradients of the batch-mean
  /// objective are accumulated into the parameters; returns the batch-mean breakdown.
  LossBreakdown accumulate_gradients(const nn::Tensor4<S>& images, std::span<const Instance> batch,
                                     const ObjectiveSettings& obj) {
    if (images.n != static_cast<int>(batch.size())) throw ValidationError("image and label counts differ");
    const bool aligned = obj.ic_weight() > 0 || obj.ia_weight() > 0 || obj.ca_weight() > 0;
    if (aligned && !ccp_) throw ValidationError("alignment losses need the text branch");
    const bool need_classes = obj.ic_weight() > 0 || obj.ca_weight() > 0;
    const auto fwd = image_.forward(images, nn::Mode::train);
    const S inv_n = S(1) / static_cast<S>(batch.size());

    std::vector<LossBreakdown> parts;
    Mat<S> d_logits(images.n, shape_.num_classes);
    nn::Tensor4<S> d_maps(fwd.feature_maps.n, fwd.feature_maps.c, fwd.feature_maps.h, fwd.feature_maps.w);
    S d_log_tau = 0;
    for (int i = 0; i < images.n; ++i) {
      const S* maps = fwd.feature_maps.sample(i);
      const RowVec<S> pooled = fwd.pooled.row(i);
      RowVec<S> dl;
      if (!aligned) {
        parts.push_back(total_loss(cross_entropy<S>(fwd.logits.row(i), batch[i].label, &dl), 0, 0, 0, obj.alpha,
                                   obj.beta));
        d_logits.row(i) = dl * inv_n;
        continue;
      }
      const auto f = ccp_->forward(maps, pooled, need_classes);
      InstanceGrad g;
      parts.push_back(instance_loss(f, fwd.logits.row(i), batch[i], obj, &dl, &g));
      d_logits.row(i) = dl * inv_n;
      d_log_tau += g.d_log_tau * inv_n;
      const Mat<S> dC = need_classes ? Mat<S>(g.dC * inv_n) : Mat<S>();
      const RowVec<S> d_pooled = ccp_->backward(f, maps, g.dF * inv_n, dC, d_maps.sample(i));
      if (shape_.condition == ConditionMode::shared) spread_pooled(d_pooled, d_maps, i);
    }
    if (aligned) {
      log_tau_.has_grad = true;
      log_tau_.grad[0] += d_log_tau;
    }
    image_.backward(fwd, d_logits, aligned ? &d_maps : nullptr);
    return batch_mean(parts);
  }

  /// Loss breakdown for one batch in eval mode, no gradients.
  LossBreakdown evaluate_loss(const nn::Tensor4<S>& images, std::span<const Instance> batch,
                              const ObjectiveSettings& obj) {
    const auto fwd = image_.forward(images, nn::Mode::eval);
    const bool aligned = ccp_ && (obj.ic_weight() > 0 || obj.ia_weight() > 0 || obj.ca_weight() > 0);
    const bool need_classes = obj.ic_weight() > 0 || obj.ca_weight() > 0;
    std::vector<LossBreakdown> parts;
    for (int i = 0; i < images.n; ++i) {
      if (!aligned) {
        parts.push_back(total_loss(cross_entropy<S>(fwd.logits.row(i), batch[i].label), 0, 0, 0, obj.alpha, obj.beta));
        continue;
      }
      const auto f = ccp_->forward(fwd.feature_maps.sample(i), fwd.pooled.row(i), need_classes);
      parts.push_back(instance_loss(f, fwd.logits.row(i), batch[i], obj, nullptr, nullptr));
    }
    return batch_mean(parts);
  }

private:
  static void spread_pooled(const RowVec<S>& d_pooled, nn::Tensor4<S>& d_maps, int i) {
    const auto plane = d_maps.plane();
    const S scale = S(1) / static_cast<S>(plane);
    S* base = d_maps.sample(i);
    for (int c = 0; c < d_maps.c; ++c)
      for (std::size_t k = 0; k < plane; ++k) base[static_cast<std::size_t>(c) * plane + k] += d_pooled(c) * scale;
  }

  Shape shape_;
  ImageEncoder<S> image_;
  std::shared_ptr<const TextEncoder<S>> encoder_;
  Mat<S> attributes_;
  std::optional<ConditionalPrompts<S>> ccp_;
  nn::Parameter<S> log_tau_;
};

template <class S>
typename NoduleAlignModel<S>::Shape model_shape(const TrainConfig& c) {
  return {c.num_classes(), c.width, c.T, c.condition, c.class_names()};
}

}  // namespace nodule_align
