#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "vitquant/dataset.hpp"
#include "vitquant/tensor.hpp"

namespace vitquant {

struct ViTConfig {
  int image_size = 16;
  int channels = 1;
  int patch_size = 4;
  int embed_dim = 16;
  int num_heads = 2;
  int num_layers = 2;
  double mlp_ratio = 4.0;
  int num_classes = 4;

  int patches_per_side() const { return image_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int head_dim() const { return embed_dim / num_heads; }
  int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
  int patch_dim() const { return patch_size * patch_size * channels; }

  void validate() const;  // divisibility requirements

  bool operator==(const ViTConfig&) const = default;
};

struct LayerWeights {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor fc1, fc1_bias, fc2, fc2_bias;
};

// Patch-token transformer without a class token: tokens are mean-pooled
// before the classifier head, so every token corresponds to an image patch.
struct ViTModel {
  ViTConfig config;
  Tensor patch_weight;  // [patch_dim, d]
  Tensor patch_bias;    // [d]
  Tensor pos_embed;     // [N, d]
  std::vector<LayerWeights> layers;
  Tensor head_weight;  // [d, n_c]
  Tensor head_bias;    // [n_c]

  // Canonical (name, tensor) enumeration; fixes checkpoint and scheme order.
  std::vector<std::pair<std::string, Tensor*>> named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> named_parameters() const;

  void set_trainable(bool trainable);
};

ViTModel init_vit(const ViTConfig& config, std::uint64_t seed);

// Per-head attention outputs and per-layer outputs captured during a forward
// pass; tensors stay connected to the graph so losses can differentiate
// through them.
struct ActivationTrace {
  std::vector<std::vector<Tensor>> mhsa_head_outputs;  // [L][h], each [B, N, d/h]
  std::vector<Tensor> layer_outputs;                   // [L], each [B, N, d]
};

struct ForwardResult {
  Tensor logits;  // [B, n_c]
  ActivationTrace trace;
};

// Transform applied to each transformer layer's output before it feeds the
// next layer (identity for the full-precision model; the quantizer installs
// activation quantization here).
using LayerOutputTransform = std::function<Tensor(const Tensor&, int layer)>;

ForwardResult forward(const ViTModel& model, const Tensor& batch, bool trace);
ForwardResult forward_transformed(const ViTModel& model, const Tensor& batch, bool trace,
                                  const LayerOutputTransform& transform);

// FNV-1a over every parameter's raw bytes in canonical order.
std::uint64_t weights_checksum(const ViTModel& model);

// Differentiable softmax cross-entropy, mean over the batch.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

double top1_accuracy(const Tensor& logits, const std::vector<int>& labels);

struct TrainStats {
  double final_loss = 0.0;
  double train_accuracy = 0.0;
  std::vector<double> epoch_losses;
};

// Plain SGD on cross-entropy; deterministic for a fixed seed.
TrainStats train_toy(ViTModel& model, const ToyDataset& dataset, int epochs, double lr,
                     std::uint64_t seed);

// ---- checkpoint file (JSON header line + raw little-endian f64 section) ----
void save_checkpoint(const ViTModel& model, const std::string& path);
ViTModel load_checkpoint(const std::string& path);

}  // namespace vitquant
