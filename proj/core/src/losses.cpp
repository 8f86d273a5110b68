#include "vitquant/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vitquant/errors.hpp"

namespace vitquant {

void ContrastiveConfig::validate() const {
  if (!(tau > 0.0)) throw ContractError("contrastive config: tau must be positive");
  if (neighborhood < 3 || neighborhood % 2 == 0) {
    throw ContractError("contrastive config: neighborhood must be an odd length >= 3");
  }
  if (top_n < 1 || top_n >= neighborhood * neighborhood - 1) {
    throw ContractError("contrastive config: top_n must leave at least one negative");
  }
}

int TargetSpec::distinct_labels() const {
  std::vector<int> sorted = labels;
  std::sort(sorted.begin(), sorted.end());
  return static_cast<int>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
}

void TargetSpec::validate() const {
  const int b = values.dim(0);
  const int nc = values.dim(1);
  if (static_cast<std::size_t>(b) != labels.size()) {
    throw ContractError("targets: label count does not match rows");
  }
  auto v = values.data();
  for (int r = 0; r < b; ++r) {
    double total = 0.0;
    int arg = 0;
    for (int c = 0; c < nc; ++c) {
      const double p = v[r * nc + c];
      if (p < 0.0) throw ContractError("targets: negative probability");
      total += p;
      if (p > v[r * nc + arg]) arg = c;
    }
    if (std::fabs(total - 1.0) > 1e-9) throw ContractError("targets: row does not sum to 1");
    if (labels[r] != arg) throw ContractError("targets: label is not the row argmax");
  }
}

Tensor l2_normalize_rows(const Tensor& x) {
  Tensor norms = sqrt(add(sum(mul(x, x), -1), 1e-24));
  std::vector<int> keep = x.shape();
  keep.back() = 1;
  return div(x, reshape(norms, keep));
}

Tensor info_nce_from_similarities(const Tensor& pos_sims, const Tensor& neg_sims, double tau) {
  if (pos_sims.size() == 0 || neg_sims.size() == 0) {
    throw ContractError("info_nce: need at least one positive and one negative");
  }
  if (!(tau > 0.0)) throw ContractError("info_nce: tau must be positive");
  Tensor pos = mul(pos_sims, 1.0 / tau);
  Tensor all = mul(concat({reshape(pos_sims, {static_cast<int>(pos_sims.size())}),
                           reshape(neg_sims, {static_cast<int>(neg_sims.size())})},
                          0),
                   1.0 / tau);
  // log-sum-exp with detached maxima; the shift cancels in the gradient
  const double m_all = max_value(all);
  const double m_pos = max_value(pos);
  Tensor lse_all = add(log(sum_all(exp(add(all, -m_all)))), m_all);
  Tensor lse_pos = add(log(sum_all(exp(add(pos, -m_pos)))), m_pos);
  return sub(lse_all, lse_pos);
}

namespace {

Tensor normalize_vector(const Tensor& v) {
  return div(v, add(l2_norm(v), 1e-12));
}

}  // namespace

Tensor info_nce(const Tensor& anchor, const std::vector<Tensor>& positives,
                const std::vector<Tensor>& negatives, double tau) {
  if (positives.empty() || negatives.empty()) {
    throw ContractError("info_nce: need at least one positive and one negative");
  }
  for (const auto& v : positives) {
    if (v.size() != anchor.size()) throw DimensionError("info_nce: positive dimension mismatch");
  }
  for (const auto& v : negatives) {
    if (v.size() != anchor.size()) throw DimensionError("info_nce: negative dimension mismatch");
  }
  Tensor an = normalize_vector(anchor);
  auto sims = [&](const std::vector<Tensor>& group) {
    std::vector<Tensor> dots;
    dots.reserve(group.size());
    for (const auto& v : group) {
      dots.push_back(reshape(sum_all(mul(an, normalize_vector(v))), {1}));
    }
    return concat(dots, 0);
  };
  return info_nce_from_similarities(sims(positives), sims(negatives), tau);
}

PatchSelection select_patches(int layer, int head, int image, int patch,
                              const ActivationTrace& fp_trace, const ContrastiveConfig& cfg) {
  cfg.validate();
  const Tensor& heads = fp_trace.mhsa_head_outputs.at(layer).at(head);  // [B, N, dh]
  const int n = heads.dim(1);
  const int dh = heads.dim(2);
  const int grid = static_cast<int>(std::lround(std::sqrt(static_cast<double>(n))));
  if (grid * grid != n) throw ContractError("select_patches: patch count is not a square");
  if (patch < 0 || patch >= n) throw ContractError("select_patches: anchor index out of range");

  auto data = heads.data();
  const std::size_t img_off = static_cast<std::size_t>(image) * n * dh;
  auto row = [&](int p) { return data.subspan(img_off + static_cast<std::size_t>(p) * dh, dh); };

  const auto anchor = row(patch);
  double anchor_norm = 0.0;
  for (double v : anchor) anchor_norm += v * v;
  anchor_norm = std::sqrt(anchor_norm);

  const int r0 = patch / grid, c0 = patch % grid;
  const int w = (cfg.neighborhood - 1) / 2;
  struct Scored {
    double rho;
    int index;
  };
  std::vector<Scored> candidates;
  for (int r = std::max(0, r0 - w); r <= std::min(grid - 1, r0 + w); ++r) {
    for (int c = std::max(0, c0 - w); c <= std::min(grid - 1, c0 + w); ++c) {
      const int idx = r * grid + c;
      if (idx == patch) continue;  // the anchor cell is not its own candidate
      const auto cand = row(idx);
      double dot = 0.0, norm = 0.0;
      for (int t = 0; t < dh; ++t) {
        dot += anchor[t] * cand[t];
        norm += cand[t] * cand[t];
      }
      const double denom = anchor_norm * std::sqrt(norm);
      candidates.push_back({denom > 0.0 ? dot / denom : 0.0, idx});
    }
  }
  if (candidates.size() < 2) {
    throw ContractError("select_patches: neighborhood holds fewer than two candidates");
  }
  std::sort(candidates.begin(), candidates.end(), [](const Scored& a, const Scored& b) {
    if (a.rho != b.rho) return a.rho > b.rho;
    return a.index < b.index;
  });

  const int take = std::min(cfg.top_n, static_cast<int>(candidates.size()) - 1);
  PatchSelection sel;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (static_cast<int>(i) < take) {
      sel.positives.push_back(candidates[i].index);
    } else {
      sel.negatives.push_back(candidates[i].index);
    }
  }
  return sel;
}

Tensor output_loss(const Tensor& q_logits, const Tensor& fp_logits, const TargetSpec& targets) {
  const auto& shape = q_logits.shape();
  if (shape != fp_logits.shape() || shape != targets.values.shape()) {
    throw DimensionError("output_loss: logits " + shape_str(q_logits.shape()) + " vs " +
                         shape_str(fp_logits.shape()) + " vs targets " +
                         shape_str(targets.values.shape()));
  }
  const double scale = 1.0 / (static_cast<double>(shape[0]) * shape[1]);
  Tensor total = add(l1_norm(sub(q_logits, targets.values)),
                     l1_norm(sub(fp_logits, targets.values)));
  return mul(total, scale);
}

Tensor stage1_loss(const ActivationTrace& q_trace, const ActivationTrace& fp_trace,
                   const Tensor& q_logits, const Tensor& fp_logits, const TargetSpec& targets,
                   const ContrastiveConfig& cfg) {
  cfg.validate();
  if (q_trace.mhsa_head_outputs.size() != fp_trace.mhsa_head_outputs.size()) {
    throw ContractError("stage1_loss: traces disagree on layer count");
  }
  const int layers = static_cast<int>(q_trace.mhsa_head_outputs.size());
  if (layers == 0) throw ContractError("stage1_loss: traces carry no attention outputs");

  std::vector<Tensor> layer_head_terms;
  for (int i = 0; i < layers; ++i) {
    const auto& q_heads = q_trace.mhsa_head_outputs[i];
    const auto& fp_heads = fp_trace.mhsa_head_outputs[i];
    if (q_heads.size() != fp_heads.size()) {
      throw ContractError("stage1_loss: traces disagree on head count");
    }
    for (std::size_t j = 0; j < q_heads.size(); ++j) {
      const Tensor& qh = q_heads[j];
      const Tensor& fh = fp_heads[j];
      const int batch = qh.dim(0);
      const int n = qh.dim(1);
      std::vector<Tensor> anchor_losses;
      anchor_losses.reserve(static_cast<std::size_t>(batch) * n);
      for (int b = 0; b < batch; ++b) {
        // One similarity matrix per image: anchors (quantized) against all
        // full-precision patches of the same layer and head.
        Tensor qn = l2_normalize_rows(select(qh, 0, b));
        Tensor fn = l2_normalize_rows(select(fh, 0, b));
        Tensor sims = matmul(qn, transpose(fn));  // [N, N]
        for (int k = 0; k < n; ++k) {
          PatchSelection sel =
              select_patches(i, static_cast<int>(j), b, k, fp_trace, cfg);
          Tensor rowk = select(sims, 0, k);
          Tensor pos = index_select(rowk, 0, sel.positives);
          Tensor negs = index_select(rowk, 0, sel.negatives);
          anchor_losses.push_back(
              reshape(info_nce_from_similarities(pos, negs, cfg.tau), {1}));
        }
      }
      // mean over anchors keeps the term scale independent of B and N
      layer_head_terms.push_back(
          mul(sum_all(concat(anchor_losses, 0)), 1.0 / anchor_losses.size()));
    }
  }
  Tensor contrastive = layer_head_terms.front();
  for (std::size_t t = 1; t < layer_head_terms.size(); ++t) {
    contrastive = add(contrastive, layer_head_terms[t]);
  }
  return add(contrastive, output_loss(q_logits, fp_logits, targets));
}

double stage2_fitness(const ActivationTrace& q_trace, const ActivationTrace& fp_trace,
                      const Tensor& q_logits, const Tensor& fp_logits, const TargetSpec& targets,
                      const ContrastiveConfig& cfg) {
  if (!(cfg.tau > 0.0)) throw ContractError("stage2_fitness: tau must be positive");
  if (q_trace.layer_outputs.size() != fp_trace.layer_outputs.size() ||
      q_trace.layer_outputs.empty()) {
    throw ContractError("stage2_fitness: traces disagree on layer outputs");
  }
  const int batch = q_logits.dim(0);
  if (batch < 2 || targets.distinct_labels() < 2) {
    throw ContractError(
        "stage2_fitness: batch must contain at least two distinct target labels; "
        "regenerate the targets");
  }

  double total = 0.0;
  for (std::size_t i = 0; i < q_trace.layer_outputs.size(); ++i) {
    // [B, N, d] -> [B, N]: pool over the embedding dimension.
    Tensor pooled_q = l2_normalize_rows(mean(q_trace.layer_outputs[i], 2));
    Tensor pooled_fp = l2_normalize_rows(mean(fp_trace.layer_outputs[i], 2));
    Tensor sims = matmul(pooled_q, transpose(pooled_fp));  // [B, B]
    for (int s = 0; s < batch; ++s) {
      std::vector<int> pos, negs;
      for (int s2 = 0; s2 < batch; ++s2) {
        (targets.labels[s2] == targets.labels[s] ? pos : negs).push_back(s2);
      }
      Tensor row = select(sims, 0, s);
      total += info_nce_from_similarities(index_select(row, 0, pos),
                                          index_select(row, 0, negs), cfg.tau)
                   .item();
    }
  }
  return total + output_loss(q_logits, fp_logits, targets).item();
}

}  // namespace vitquant
