#include "vitquant/quantize.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "vitquant/errors.hpp"

namespace vitquant {

namespace {

// Half-to-even; relies on the default FE_TONEAREST rounding mode, which the
// language guarantees at program start and nothing in this project changes.
double round_half_even(double v) { return std::nearbyint(v); }

double clip_bound(int bits) { return std::pow(2.0, bits - 1) - 1.0; }

void check_quant_args(double gamma, int bits, const char* op) {
  if (!(gamma > 0.0)) {
    throw ContractError(std::string(op) + ": scale factor must be positive, got " +
                        std::to_string(gamma));
  }
  if (bits < kMinBits || bits > kMaxBits) {
    throw ContractError(std::string(op) + ": bit-width " + std::to_string(bits) +
                        " outside [2, 8]");
  }
}

}  // namespace

double QuantEntry::gamma_init(int for_bits) const {
  const double range = w_max - w_min;
  if (range <= 0.0) return 1e-8;
  const double steps = (for_bits >= 63) ? std::pow(2.0, for_bits) - 1.0
                                        : static_cast<double>((1ull << for_bits) - 1);
  return range / steps;
}

bool QuantScheme::bypass() const {
  return std::all_of(entries.begin(), entries.end(),
                     [](const QuantEntry& e) { return e.bits == kBypassBits; });
}

void QuantScheme::validate() const {
  if (entries.empty()) throw ContractError("scheme: no entries");
  double cumulative = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const QuantEntry& e = entries[i];
    const bool bypass = e.bits == kBypassBits;
    if (!bypass && (e.bits < kMinBits || e.bits > kMaxBits)) {
      throw ContractError("scheme: entry '" + e.name + "' has bit-width " +
                          std::to_string(e.bits));
    }
    if (!(e.gamma > 0.0)) {
      throw ContractError("scheme: entry '" + e.name + "' has non-positive scale");
    }
    if (e.group < 0 || e.group >= num_groups) {
      throw ContractError("scheme: entry '" + e.name + "' has group out of range");
    }
    const int expect_act = bypass ? kBypassBits : std::min(8, 2 * e.bits);
    if (e.act_bits != expect_act) {
      throw ContractError("scheme: entry '" + e.name + "' activation bit-width inconsistent");
    }
    cumulative += e.gamma;
    if (std::fabs(e.act_gamma - cumulative) > 1e-12 * std::max(1.0, cumulative)) {
      throw ContractError("scheme: entry '" + e.name + "' activation scale inconsistent");
    }
  }
  for (int g = 0; g < num_groups; ++g) {
    const auto idx = entries_of_group(g);
    if (idx.empty()) throw ContractError("scheme: empty group " + std::to_string(g));
    for (std::size_t i : idx) {
      if (entries[i].bits != entries[idx.front()].bits) {
        throw ContractError("scheme: group " + std::to_string(g) + " mixes bit-widths");
      }
    }
  }
}

std::vector<std::size_t> QuantScheme::entries_of_group(int group) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].group == group) out.push_back(i);
  }
  return out;
}

int QuantScheme::group_bits(int group) const {
  for (const auto& e : entries) {
    if (e.group == group) return e.bits;
  }
  throw ContractError("scheme: unknown group " + std::to_string(group));
}

void QuantScheme::set_group_bits(int group, int bits) {
  bool found = false;
  for (auto& e : entries) {
    if (e.group == group) {
      e.bits = bits;
      found = true;
    }
  }
  if (!found) throw ContractError("scheme: unknown group " + std::to_string(group));
}

Tensor quantize(const Tensor& x, double gamma, int bits) {
  check_quant_args(gamma, bits, "quantize");
  const double bound = clip_bound(bits);
  std::vector<double> out(x.size());
  auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(round_half_even(src[i] / gamma), -bound, bound);
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor dequantize(const Tensor& q, double gamma) {
  std::vector<double> out(q.size());
  auto src = q.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = gamma * src[i];
  return Tensor::from_data(q.shape(), std::move(out));
}

Tensor fake_quantize(const Tensor& x, double gamma, int bits) {
  check_quant_args(gamma, bits, "fake_quantize");
  const double bound = clip_bound(bits);
  return elementwise_unary(
      x,
      [gamma, bound](double v) {
        return gamma * std::clamp(round_half_even(v / gamma), -bound, bound);
      },
      [gamma, bound](double v) {
        const double r = v / gamma;
        return (r >= -bound - 0.5 && r <= bound + 0.5) ? 1.0 : 0.0;
      });
}

double initial_gamma(const Tensor& weights, int bits) {
  if (bits != kBypassBits) check_quant_args(1.0, bits, "initial_gamma");
  double lo = weights.data()[0], hi = weights.data()[0];
  for (double v : weights.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo <= 0.0) {
    std::fprintf(stderr, "warning: constant weight tensor, falling back to gamma = 1e-8\n");
    return 1e-8;
  }
  const double steps =
      bits >= 63 ? std::pow(2.0, bits) - 1.0 : static_cast<double>((1ull << bits) - 1);
  return (hi - lo) / steps;
}

void derive_activation_params(QuantScheme& scheme) {
  double cumulative = 0.0;
  for (auto& e : scheme.entries) {
    e.act_bits = e.bits == kBypassBits ? kBypassBits : std::min(8, 2 * e.bits);
    cumulative += e.gamma;
    e.act_gamma = cumulative;
  }
}

std::vector<QuantTargetInfo> quantizable_weights(const ViTModel& model) {
  const ViTConfig& cfg = model.config;
  const std::uint64_t n = cfg.num_patches();
  const std::uint64_t d = cfg.embed_dim;
  const std::uint64_t hidden = cfg.mlp_hidden();
  std::vector<QuantTargetInfo> out;
  out.push_back({"patch.weight", &model.patch_weight, 0,
                 n * static_cast<std::uint64_t>(cfg.patch_dim()) * d});
  for (int i = 0; i < cfg.num_layers; ++i) {
    const auto& l = model.layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "wq", &l.wq, i, n * d * d});
    out.push_back({p + "wk", &l.wk, i, n * d * d});
    out.push_back({p + "wv", &l.wv, i, n * d * d});
    out.push_back({p + "wo", &l.wo, i, n * d * d});
    out.push_back({p + "fc1", &l.fc1, i, n * d * hidden});
    out.push_back({p + "fc2", &l.fc2, i, n * hidden * d});
  }
  out.push_back({"head.weight", &model.head_weight, cfg.num_layers - 1,
                 d * static_cast<std::uint64_t>(cfg.num_classes)});
  return out;
}

namespace {

QuantScheme scheme_with_bits(const ViTModel& model, int bits) {
  QuantScheme s;
  s.num_groups = model.config.num_layers;
  for (const auto& target : quantizable_weights(model)) {
    QuantEntry e;
    e.name = target.name;
    e.group = target.group;
    e.bits = bits;
    double lo = target.weight->data()[0], hi = lo;
    for (double v : target.weight->data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    e.w_min = lo;
    e.w_max = hi;
    e.params = target.weight->size();
    e.macs = target.macs;
    e.gamma = bits == kBypassBits ? e.gamma_init(kMaxBits) : initial_gamma(*target.weight, bits);
    s.entries.push_back(std::move(e));
  }
  derive_activation_params(s);
  return s;
}

}  // namespace

QuantScheme make_scheme(const ViTModel& model, int bits) {
  if (bits != kBypassBits) check_quant_args(1.0, bits, "make_scheme");
  return scheme_with_bits(model, bits);
}

QuantScheme bypass_scheme(const ViTModel& model) { return scheme_with_bits(model, kBypassBits); }

QuantizedModel make_quantized(const ViTModel& fp, const QuantScheme& scheme) {
  scheme.validate();
  const auto targets = quantizable_weights(fp);
  if (targets.size() != scheme.entries.size()) {
    throw ContractError("make_quantized: scheme entry count does not match the model");
  }

  QuantizedModel qm;
  qm.fp = &fp;
  qm.scheme = scheme;
  qm.dequantized.config = fp.config;
  qm.dequantized.layers.resize(fp.config.num_layers);

  // Copy every parameter, then overwrite the quantizable ones.
  auto src_params = fp.named_parameters();
  auto dst_params = qm.dequantized.named_parameters();
  for (std::size_t i = 0; i < src_params.size(); ++i) {
    *dst_params[i].second = src_params[i].second->clone();
  }

  for (std::size_t i = 0; i < scheme.entries.size(); ++i) {
    const QuantEntry& e = scheme.entries[i];
    if (e.name != targets[i].name) {
      throw ContractError("make_quantized: scheme entry '" + e.name +
                          "' does not match model tensor '" + targets[i].name + "'");
    }
    if (e.bits == kBypassBits) {
      qm.integer_weights.push_back(targets[i].weight->clone());
      continue;
    }
    Tensor q = quantize(*targets[i].weight, e.gamma, e.bits);
    for (auto& [name, t] : dst_params) {
      if (name == e.name) *t = dequantize(q, e.gamma);
    }
    qm.integer_weights.push_back(std::move(q));
  }
  return qm;
}

ForwardResult qforward(const QuantizedModel& model, const Tensor& batch, bool trace) {
  // Activation quantization points: the output of transformer layer i uses
  // the activation parameters of that layer's last weight tensor (fc2).
  const QuantScheme& s = model.scheme;
  std::vector<const QuantEntry*> layer_act(model.dequantized.config.num_layers, nullptr);
  for (int li = 0; li < model.dequantized.config.num_layers; ++li) {
    const std::string want = "layers." + std::to_string(li) + ".fc2";
    for (const auto& e : s.entries) {
      if (e.name == want) layer_act[li] = &e;
    }
    if (!layer_act[li]) throw ContractError("qforward: missing fc2 entry for layer");
  }
  LayerOutputTransform transform = [&](const Tensor& x, int layer) {
    const QuantEntry* e = layer_act[layer];
    if (e->act_bits == kBypassBits) return x;
    return fake_quantize(x, e->act_gamma, e->act_bits);
  };
  return forward_transformed(model.dequantized, batch, trace, transform);
}

Footprint footprint_from_costs(const std::vector<LayerCost>& costs,
                               std::uint64_t full_precision_params) {
  Footprint f;
  // Parameters kept at full precision contribute 32 bits each.
  double bits_total = static_cast<double>(full_precision_params) * 32.0;
  double bw_sum = 0.0, ba_sum = 0.0;
  for (const auto& c : costs) {
    bits_total += static_cast<double>(c.params) * c.weight_bits;
    f.bops += static_cast<double>(c.macs) * c.weight_bits * c.act_bits;
    bw_sum += c.weight_bits;
    ba_sum += c.act_bits;
  }
  f.size_mb = bits_total / 8.0 / 1e6;
  if (!costs.empty()) {
    f.avg_bits_weights = bw_sum / static_cast<double>(costs.size());
    f.avg_bits_acts = ba_sum / static_cast<double>(costs.size());
  }
  return f;
}

Footprint report_footprint(const ViTModel& model, const QuantScheme& scheme) {
  std::vector<LayerCost> costs;
  std::uint64_t quantized_params = 0;
  for (const auto& e : scheme.entries) {
    costs.push_back({e.params, e.macs, e.bits, e.act_bits});
    quantized_params += e.params;
  }
  std::uint64_t total_params = 0;
  for (const auto& [name, t] : model.named_parameters()) total_params += t->size();
  return footprint_from_costs(costs, total_params - quantized_params);
}

// ------------------------------------------------------------ scheme file

using nlohmann::json;

std::string scheme_to_json(const QuantScheme& scheme) {
  json arr = json::array();
  for (std::size_t i = 0; i < scheme.entries.size(); ++i) {
    const QuantEntry& e = scheme.entries[i];
    arr.push_back(json{{"layer", i},
                       {"b", e.bits},
                       {"gamma", e.gamma},
                       {"b_act", e.act_bits},
                       {"gamma_act", e.act_gamma}});
  }
  return arr.dump(2);
}

void save_scheme(const QuantScheme& scheme, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("save_scheme: cannot open " + path);
  out << scheme_to_json(scheme) << '\n';
}

QuantScheme load_scheme(const std::string& path, const ViTModel& model) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_scheme: cannot open " + path);
  json arr;
  try {
    in >> arr;
  } catch (const json::exception& e) {
    throw ConfigError("load_scheme: bad JSON in " + path + ": " + e.what());
  }
  QuantScheme s = bypass_scheme(model);  // establishes names/groups/stats
  if (!arr.is_array() || arr.size() != s.entries.size()) {
    throw ConfigError("load_scheme: expected " + std::to_string(s.entries.size()) +
                      " entries in " + path);
  }
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    const json& row = arr[i];
    if (row.at("layer").get<std::size_t>() != i) {
      throw ConfigError("load_scheme: entries out of order in " + path);
    }
    s.entries[i].bits = row.at("b").get<int>();
    s.entries[i].gamma = row.at("gamma").get<double>();
  }
  derive_activation_params(s);
  // Cross-check the stored activation parameters against the recurrence.
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    const json& row = arr[i];
    if (row.at("b_act").get<int>() != s.entries[i].act_bits ||
        std::fabs(row.at("gamma_act").get<double>() - s.entries[i].act_gamma) > 1e-9) {
      throw ConfigError("load_scheme: activation parameters inconsistent at entry " +
                        std::to_string(i));
    }
  }
  s.validate();
  return s;
}

}  // namespace vitquant
