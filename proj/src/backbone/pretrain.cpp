// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

#include "efsl/backbone/pretrain.hpp"

#include <cmath>

#include "efsl/core/error.hpp"
#include "efsl/core/log.hpp"
#include "efsl/numerics/optim.hpp"

namespace efsl::vit {

using num::Tensor;

void PretrainConfig::validate() const {
  if (epochs < 0) throw ValidationError("pretrain.epochs must be >= 0");
  if (batch < 1) throw ValidationError("pretrain.batch must be >= 1");
  if (!(lr >= 0)) throw ValidationError("pretrain.lr must be >= 0");
  if (weight_decay < 0) throw ValidationError("pretrain.weight_decay must be >= 0");
  if (warmup_fraction < 0 || warmup_fraction >= 1) throw ValidationError("pretrain.warmup_fraction must be in [0, 1)");
  if (!(clip_norm > 0)) throw ValidationError("pretrain.clip_norm must be > 0");
}

namespace {

void check_inputs(const data::Dataset& ds, const data::ClassSplit& base, const BackboneConfig& config) {
  if (static_cast<int>(base.classes.size()) != config.num_base_classes) {
    throw ValidationError("base split has " + std::to_string(base.classes.size()) +
                          " classes but backbone.num_base_classes = " + std::to_string(config.num_base_classes));
  }
  if (ds.channels() != config.channels || ds.image_size() < config.image_size) {
    throw ValidationError("dataset images [" + std::to_string(ds.channels()) + ", " + std::to_string(ds.image_size()) +
                          "] cannot feed a backbone expecting [" + std::to_string(config.channels) + ", " +
                          std::to_string(config.image_size) + "]");
  }
}

}  // namespace

PretrainResult pretrain_backbone(const data::Dataset& ds, const data::ClassSplit& base, const BackboneConfig& config,
                                 const PretrainConfig& options) {
  config.validate();
  options.validate();
  check_inputs(ds, base, config);
  PretrainResult result{init_backbone<float>(config, options.seed), {}};
  auto& bb = result.backbone;
  if (options.epochs == 0) {
    result.report.train_accuracy = base_accuracy(bb, ds, base);
    return result;
  }

  bb.set_requires_grad(true);
  std::vector<Tensor<float>> params;
  for (const auto& [name, t] : bb.named_tensors()) params.push_back(t);
  num::AdamW<float> opt(params, num::AdamWConfig{0.9, 0.999, 1e-8, options.weight_decay});

  std::vector<data::ImageRef> pool;
  std::vector<int> pool_labels;
  for (std::size_t c = 0; c < base.classes.size(); ++c) {
    for (int i = 0; i < ds.images_per_class(); ++i) {
      pool.push_back({base.classes[c], i});
      pool_labels.push_back(static_cast<int>(c));
    }
  }
  const auto batch = static_cast<std::size_t>(options.batch);
  const std::size_t steps_per_epoch = (pool.size() + batch - 1) / batch;
  const auto total = static_cast<std::int64_t>(steps_per_epoch) * options.epochs;
  const auto warmup = static_cast<std::int64_t>(std::floor(options.warmup_fraction * static_cast<double>(total)));
  const int crop = config.image_size;
  const std::size_t per_image = static_cast<std::size_t>(config.channels) * crop * crop;
  const num::Rng root = num::Rng(options.seed).split("pretrain");

  std::vector<std::size_t> order(pool.size());
  std::int64_t step = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    num::Rng rng = root.split(static_cast<std::uint64_t>(epoch));
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t lo = s * batch, hi = std::min(pool.size(), lo + batch);
      std::vector<float> pixels((hi - lo) * per_image);
      std::vector<int> labels;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& ref = pool[order[k]];
        data::center_crop(ds.image(ref.cls, ref.index), ds.channels(), ds.image_size(), crop,
                          options.flip && rng.bernoulli(0.5),
                          std::span<float>(pixels).subspan((k - lo) * per_image, per_image));
        labels.push_back(pool_labels[order[k]]);
      }
      const auto xs = backbone_forward(bb, pixels, hi - lo);
      const auto loss = num::cross_entropy(classify_logits(bb, xs.back()), labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericError("pretraining diverged: non-finite loss at epoch " + std::to_string(epoch + 1) + ", step " +
                           std::to_string(s + 1) + " (lr " + std::to_string(options.lr) + ")");
      }
      loss_sum += value * static_cast<double>(hi - lo);
      opt.zero_grad();
      num::backward(loss);
      num::clip_grad_norm<float>(params, options.clip_norm);
      const double lr = step < warmup ? options.lr * static_cast<double>(step + 1) / static_cast<double>(warmup)
                                      : num::cosine_lr(options.lr, step - warmup, total - warmup);
      opt.step(lr);
      ++step;
    }
    result.report.epoch_loss.push_back(loss_sum / static_cast<double>(pool.size()));
    log_info("pretrain epoch ", epoch + 1, "/", options.epochs, " loss ", result.report.epoch_loss.back());
  }
  bb.set_requires_grad(false);
  // Fresh leaves so the returned weights carry no optimizer-era gradients.
  result.backbone = bb.cast<float>();
  result.report.train_accuracy = base_accuracy(result.backbone, ds, base);
  log_info("pretrain base-split train accuracy ", result.report.train_accuracy);
  return result;
}

double base_accuracy(const Backbone<float>& bb, const data::Dataset& ds, const data::ClassSplit& base, int per_class) {
  num::NoGradGuard no_grad;
  const int n = per_class < 0 ? ds.images_per_class() : std::min(per_class, ds.images_per_class());
  std::size_t correct = 0, total = 0;
  const std::size_t chunk = 128;
  std::vector<data::ImageRef> refs;
  std::vector<int> labels;
  auto flush = [&] {
    if (refs.empty()) return;
    const auto pixels = data::gather_images(ds, refs, bb.config.image_size);
    const auto xs = backbone_forward(bb, pixels, refs.size());
    const auto pred = num::argmax_rows(classify_logits(bb, xs.back()));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    total += refs.size();
    refs.clear();
    labels.clear();
  };
  for (std::size_t c = 0; c < base.classes.size(); ++c) {
    for (int i = 0; i < n; ++i) {
      refs.push_back({base.classes[c], i});
      labels.push_back(static_cast<int>(c));
      if (refs.size() == chunk) flush();
    }
  }
  flush();
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

}  // namespace efsl::vit
