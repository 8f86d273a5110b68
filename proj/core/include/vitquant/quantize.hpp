#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitquant/tensor.hpp"
#include "vitquant/vit.hpp"

namespace vitquant {

// Sentinel bit-width that disables quantization for a tensor (and for the
// activation it feeds); used to reproduce full-precision behavior bit-exactly.
constexpr int kBypassBits = 32;

constexpr int kMinBits = 2;
constexpr int kMaxBits = 8;

// One quantizable weight tensor's parameters plus derived activation
// parameters and bookkeeping used by the search and the footprint report.
struct QuantEntry {
  std::string name;
  int group = 0;  // transformer-layer index this tensor evolves with
  int bits = kMaxBits;
  double gamma = 1.0;
  int act_bits = 0;        // derived: min(8, 2*bits), bypass stays bypass
  double act_gamma = 0.0;  // derived: cumulative sum of gammas

  // weight statistics frozen at scheme creation (gamma_init inputs)
  double w_min = 0.0;
  double w_max = 0.0;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;  // multiply-accumulates per image

  double gamma_init(int for_bits) const;
};

struct QuantScheme {
  std::vector<QuantEntry> entries;
  int num_groups = 0;

  bool bypass() const;
  void validate() const;
  std::vector<std::size_t> entries_of_group(int group) const;
  // Representative weight bit-width of a group (all members share it).
  int group_bits(int group) const;
  void set_group_bits(int group, int bits);
};

// ---- Elementwise uniform symmetric quantization ----
// clip(round_half_even(x / gamma), -(2^(b-1)-1), 2^(b-1)-1); plain values,
// detached from any graph (weights are constants during search).
Tensor quantize(const Tensor& x, double gamma, int bits);
Tensor dequantize(const Tensor& q, double gamma);

// Differentiable quantize-dequantize for activations. The rounding gradient
// uses the straight-through estimator; saturated elements get zero gradient.
Tensor fake_quantize(const Tensor& x, double gamma, int bits);

// (max - min) / (2^b - 1). A constant tensor degenerates to 1e-8 with a
// warning on stderr instead of failing.
double initial_gamma(const Tensor& weights, int bits);

// Fills act_bits/act_gamma across all entries in enumeration order:
// act_bits[i] = min(8, 2 b[i]); act_gamma[i] = act_gamma[i-1] + gamma[i]
// with act_gamma[0] = gamma[0]. Bypass entries keep act_bits = bypass.
void derive_activation_params(QuantScheme& scheme);

// ---- Scheme construction over a model ----
// The quantizable tensors are every linear/projection weight matrix: patch
// embedding, per-layer Q/K/V/output projections and both MLP matrices, and
// the classifier head. Biases and layernorm parameters stay full precision.
// The patch embedding evolves with layer 0 and the head with layer L-1.
struct QuantTargetInfo {
  std::string name;
  const Tensor* weight;
  int group;
  std::uint64_t macs;
};
std::vector<QuantTargetInfo> quantizable_weights(const ViTModel& model);

QuantScheme make_scheme(const ViTModel& model, int bits);  // gamma = gamma_init
QuantScheme bypass_scheme(const ViTModel& model);

// ---- Quantized model ----
struct QuantizedModel {
  const ViTModel* fp = nullptr;
  QuantScheme scheme;
  ViTModel dequantized;                // weights replaced by gamma * q
  std::vector<Tensor> integer_weights;  // cached, one per scheme entry
};

QuantizedModel make_quantized(const ViTModel& fp, const QuantScheme& scheme);

// Forward through the dequantized weights with activation quantization
// applied at each transformer layer output.
ForwardResult qforward(const QuantizedModel& model, const Tensor& batch, bool trace);

// ---- Size / BOPS accounting ----
struct LayerCost {
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
  int weight_bits = 0;
  int act_bits = 0;
};

struct Footprint {
  double size_mb = 0.0;
  double avg_bits_weights = 0.0;
  double avg_bits_acts = 0.0;
  double bops = 0.0;
};

// size_mb = sum(params_i * b_i) / (8e6) over quantized tensors plus
// full-precision parameters at 32 bits; bops = sum(macs_i * b_i * b_act_i);
// bit-width averages are unweighted means over the entries.
Footprint footprint_from_costs(const std::vector<LayerCost>& costs,
                               std::uint64_t full_precision_params);
Footprint report_footprint(const ViTModel& model, const QuantScheme& scheme);

// ---- Scheme file: JSON array of {layer, b, gamma, b_act, gamma_act} ----
std::string scheme_to_json(const QuantScheme& scheme);
void save_scheme(const QuantScheme& scheme, const std::string& path);
QuantScheme load_scheme(const std::string& path, const ViTModel& model);

}  // namespace vitquant
