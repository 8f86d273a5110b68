#pragma once

#include <vector>

#include "vitquant/tensor.hpp"
#include "vitquant/vit.hpp"

namespace vitquant {

struct ContrastiveConfig {
  double tau = 0.07;    // similarity temperature
  int neighborhood = 3;  // odd window side length, in patches
  int top_n = 4;         // positives taken from each neighborhood

  void validate() const;
};

// Synthetic classification targets: random per-class probability rows; the
// argmax labels group batch samples into positives/negatives for the
// batch-level contrastive loss.
struct TargetSpec {
  Tensor values;            // [B, n_c], rows non-negative and summing to 1
  std::vector<int> labels;  // argmax per row

  int distinct_labels() const;
  void validate() const;
};

// Balanced-pair contrastive loss:
//   -log( sum_p+ exp(s+/tau) / (sum_p+ exp(s+/tau) + sum_p- exp(s-/tau)) )
// Similarities are dot products of L2-normalized vectors (cosine), so tau has
// a stable scale across layer widths.
Tensor info_nce(const Tensor& anchor, const std::vector<Tensor>& positives,
                const std::vector<Tensor>& negatives, double tau);

// Same loss from pre-computed similarity vectors; log-sum-exp stabilized.
Tensor info_nce_from_similarities(const Tensor& pos_sims, const Tensor& neg_sims, double tau);

// Positive/negative patch indices selected inside the spatial neighborhood of
// an anchor, ranked by cosine similarity against the full-precision patch at
// the anchor's own position (the anchor cell itself is excluded). Ties break
// toward the lowest flat patch index; at image borders the window truncates
// and the positive count shrinks to keep at least one negative.
struct PatchSelection {
  std::vector<int> positives;
  std::vector<int> negatives;
};
PatchSelection select_patches(int layer, int head, int image, int patch,
                              const ActivationTrace& fp_trace, const ContrastiveConfig& cfg);

// Stage-1 sample-generation objective: patch-level contrastive terms over all
// layers, heads and anchor patches (anchors from the quantized model, patch
// candidates from the full-precision model), each (layer, head) term averaged
// over its anchors, plus the output loss.
Tensor stage1_loss(const ActivationTrace& q_trace, const ActivationTrace& fp_trace,
                   const Tensor& q_logits, const Tensor& fp_logits, const TargetSpec& targets,
                   const ContrastiveConfig& cfg);

// (1/n_c) * (||Q(X)-T||_1 + ||FP(X)-T||_1), averaged over the batch.
Tensor output_loss(const Tensor& q_logits, const Tensor& fp_logits, const TargetSpec& targets);

// Stage-2 fitness: layer outputs pooled over the embedding dimension to one
// length-N vector per sample; per sample the quantized pooled output is the
// anchor, full-precision pooled outputs with the same target label are
// positives and the rest negatives; summed over layers and batch, plus the
// output loss. Requires at least two distinct labels in the batch.
double stage2_fitness(const ActivationTrace& q_trace, const ActivationTrace& fp_trace,
                      const Tensor& q_logits, const Tensor& fp_logits, const TargetSpec& targets,
                      const ContrastiveConfig& cfg);

// Rows scaled to unit L2 norm (zero rows stay zero).
Tensor l2_normalize_rows(const Tensor& x);

}  // namespace vitquant
