#include "vitquant/vit.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "vitquant/errors.hpp"
#include "vitquant/rng.hpp"

namespace vitquant {

void ViTConfig::validate() const {
  if (image_size <= 0 || channels <= 0 || patch_size <= 0 || embed_dim <= 0 || num_heads <= 0 ||
      num_layers <= 0 || num_classes <= 0 || mlp_ratio <= 0.0) {
    throw ConfigError("vit config: all dimensions must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("vit config: image_size " + std::to_string(image_size) +
                      " not divisible by patch_size " + std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw ConfigError("vit config: embed_dim " + std::to_string(embed_dim) +
                      " not divisible by num_heads " + std::to_string(num_heads));
  }
}

std::vector<std::pair<std::string, Tensor*>> ViTModel::named_parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("patch.weight", &patch_weight);
  out.emplace_back("patch.bias", &patch_bias);
  out.emplace_back("pos_embed", &pos_embed);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layers." + std::to_string(i) + ".";
    LayerWeights& l = layers[i];
    out.emplace_back(p + "ln1.gain", &l.ln1_gain);
    out.emplace_back(p + "ln1.bias", &l.ln1_bias);
    out.emplace_back(p + "wq", &l.wq);
    out.emplace_back(p + "bq", &l.bq);
    out.emplace_back(p + "wk", &l.wk);
    out.emplace_back(p + "bk", &l.bk);
    out.emplace_back(p + "wv", &l.wv);
    out.emplace_back(p + "bv", &l.bv);
    out.emplace_back(p + "wo", &l.wo);
    out.emplace_back(p + "bo", &l.bo);
    out.emplace_back(p + "ln2.gain", &l.ln2_gain);
    out.emplace_back(p + "ln2.bias", &l.ln2_bias);
    out.emplace_back(p + "fc1", &l.fc1);
    out.emplace_back(p + "fc1_bias", &l.fc1_bias);
    out.emplace_back(p + "fc2", &l.fc2);
    out.emplace_back(p + "fc2_bias", &l.fc2_bias);
  }
  out.emplace_back("head.weight", &head_weight);
  out.emplace_back("head.bias", &head_bias);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> ViTModel::named_parameters() const {
  auto mutable_list = const_cast<ViTModel*>(this)->named_parameters();
  std::vector<std::pair<std::string, const Tensor*>> out;
  out.reserve(mutable_list.size());
  for (auto& [name, t] : mutable_list) out.emplace_back(name, t);
  return out;
}

void ViTModel::set_trainable(bool trainable) {
  for (auto& [name, t] : named_parameters()) t->set_requires_grad(trainable);
}

namespace {

Tensor init_weight(std::vector<int> shape, int fan_in, Rng& rng) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  std::vector<double> data(n);
  const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return Tensor::from_data(std::move(shape), std::move(data));
}

}  // namespace

ViTModel init_vit(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(Rng::derive(seed, "vit-init"));
  ViTModel m;
  m.config = config;
  const int d = config.embed_dim;
  const int hidden = config.mlp_hidden();

  m.patch_weight = init_weight({config.patch_dim(), d}, config.patch_dim(), rng);
  m.patch_bias = Tensor::zeros({d});
  m.pos_embed = init_weight({config.num_patches(), d}, 50 * 50, rng);  // ~N(0, 0.02)

  m.layers.resize(config.num_layers);
  for (auto& l : m.layers) {
    l.ln1_gain = Tensor::full({d}, 1.0);
    l.ln1_bias = Tensor::zeros({d});
    l.wq = init_weight({d, d}, d, rng);
    l.bq = Tensor::zeros({d});
    l.wk = init_weight({d, d}, d, rng);
    l.bk = Tensor::zeros({d});
    l.wv = init_weight({d, d}, d, rng);
    l.bv = Tensor::zeros({d});
    l.wo = init_weight({d, d}, d, rng);
    l.bo = Tensor::zeros({d});
    l.ln2_gain = Tensor::full({d}, 1.0);
    l.ln2_bias = Tensor::zeros({d});
    l.fc1 = init_weight({d, hidden}, d, rng);
    l.fc1_bias = Tensor::zeros({hidden});
    l.fc2 = init_weight({hidden, d}, hidden, rng);
    l.fc2_bias = Tensor::zeros({d});
  }
  m.head_weight = init_weight({d, config.num_classes}, d, rng);
  m.head_bias = Tensor::zeros({config.num_classes});
  return m;
}

namespace {

constexpr double kLayerNormEps = 1e-6;

// [B,H,W,C] -> [B,N,patch_dim]: block the spatial axes and flatten per patch.
Tensor patchify(const Tensor& batch, const ViTConfig& cfg) {
  const int b = batch.dim(0);
  const int g = cfg.patches_per_side();
  const int p = cfg.patch_size;
  Tensor x = reshape(batch, {b, g, p, g, p, cfg.channels});
  x = permute(x, {0, 1, 3, 2, 4, 5});
  return reshape(x, {b, cfg.num_patches(), cfg.patch_dim()});
}

}  // namespace

ForwardResult forward_transformed(const ViTModel& model, const Tensor& batch, bool trace,
                                  const LayerOutputTransform& transform) {
  const ViTConfig& cfg = model.config;
  const auto& shape = batch.shape();
  if (shape.size() != 4 || shape[1] != cfg.image_size || shape[2] != cfg.image_size ||
      shape[3] != cfg.channels) {
    throw DimensionError("forward: batch " + shape_str(shape) + " does not match config [B, " +
                         std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) +
                         ", " + std::to_string(cfg.channels) + "]");
  }

  ForwardResult result;
  Tensor x = add(add(matmul(patchify(batch, cfg), model.patch_weight), model.patch_bias),
                 model.pos_embed);  // [B, N, d]

  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.embed_dim));
  for (int li = 0; li < cfg.num_layers; ++li) {
    const LayerWeights& l = model.layers[li];
    Tensor xn = layernorm(x, l.ln1_gain, l.ln1_bias, kLayerNormEps);
    Tensor q = add(matmul(xn, l.wq), l.bq);
    Tensor k = add(matmul(xn, l.wk), l.bk);
    Tensor v = add(matmul(xn, l.wv), l.bv);
    auto q_heads = split(q, 2, cfg.num_heads);
    auto k_heads = split(k, 2, cfg.num_heads);
    auto v_heads = split(v, 2, cfg.num_heads);

    std::vector<Tensor> head_outputs;
    head_outputs.reserve(cfg.num_heads);
    for (int h = 0; h < cfg.num_heads; ++h) {
      Tensor scores = mul(matmul(q_heads[h], permute(k_heads[h], {0, 2, 1})), attn_scale);
      head_outputs.push_back(matmul(softmax(scores, 2), v_heads[h]));  // [B, N, d/h]
    }
    if (trace) result.trace.mhsa_head_outputs.push_back(head_outputs);

    Tensor mhsa = add(matmul(concat(head_outputs, 2), l.wo), l.bo);
    x = add(x, mhsa);

    Tensor mn = layernorm(x, l.ln2_gain, l.ln2_bias, kLayerNormEps);
    Tensor mlp = add(matmul(gelu(add(matmul(mn, l.fc1), l.fc1_bias)), l.fc2), l.fc2_bias);
    x = add(x, mlp);

    if (transform) x = transform(x, li);
    if (trace) result.trace.layer_outputs.push_back(x);
  }

  Tensor pooled = mean(x, 1);  // [B, d]
  result.logits = add(matmul(pooled, model.head_weight), model.head_bias);
  return result;
}

ForwardResult forward(const ViTModel& model, const Tensor& batch, bool trace) {
  return forward_transformed(model, batch, trace, nullptr);
}

std::uint64_t weights_checksum(const ViTModel& model) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : model.named_parameters()) {
    for (double v : t->data()) {
      std::uint64_t bits;
      static_assert(sizeof(bits) == sizeof(v));
      std::memcpy(&bits, &v, sizeof(bits));
      for (int byte = 0; byte < 8; ++byte) {
        h ^= (bits >> (8 * byte)) & 0xff;
        h *= 0x100000001b3ull;
      }
    }
  }
  return h;
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  const int b = logits.dim(0);
  const int classes = logits.dim(1);
  if (static_cast<std::size_t>(b) != labels.size()) {
    throw DimensionError("cross_entropy: batch size does not match label count");
  }
  // Row maxima as constants keep the log-sum-exp stable; the gradient is
  // unaffected by the shift.
  std::vector<double> row_max(b, -1e300);
  auto vals = logits.data();
  for (int i = 0; i < b; ++i) {
    for (int c = 0; c < classes; ++c) row_max[i] = std::max(row_max[i], vals[i * classes + c]);
  }
  Tensor m = Tensor::from_data({b, 1}, row_max);
  Tensor lse = add(log(sum(exp(sub(logits, m)), 1)), Tensor::from_data({b}, row_max));

  std::vector<double> onehot(static_cast<std::size_t>(b) * classes, 0.0);
  for (int i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw ContractError("cross_entropy: label out of range");
    }
    onehot[i * classes + labels[i]] = 1.0;
  }
  Tensor picked = sum(mul(logits, Tensor::from_data({b, classes}, std::move(onehot))), 1);
  return mean_all(sub(lse, picked));
}

double top1_accuracy(const Tensor& logits, const std::vector<int>& labels) {
  const int b = logits.dim(0);
  const int classes = logits.dim(1);
  if (static_cast<std::size_t>(b) != labels.size() || b == 0) {
    throw ContractError("top1_accuracy: empty or mismatched evaluation set");
  }
  auto vals = logits.data();
  int correct = 0;
  for (int i = 0; i < b; ++i) {
    int arg = 0;
    for (int c = 1; c < classes; ++c) {
      if (vals[i * classes + c] > vals[i * classes + arg]) arg = c;  // ties: lowest index
    }
    if (arg == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / b;
}

TrainStats train_toy(ViTModel& model, const ToyDataset& dataset, int epochs, double lr,
                     std::uint64_t seed) {
  if (dataset.count() == 0) throw ContractError("train_toy: empty dataset");
  Rng rng(Rng::derive(seed, "train-toy"));
  model.set_trainable(true);

  const int total = dataset.count();
  const int batch_size = std::min(32, total);
  std::vector<int> order(total);
  std::iota(order.begin(), order.end(), 0);

  TrainStats stats;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    // Fisher-Yates with our own rng keeps the schedule reproducible.
    for (int i = total - 1; i > 0; --i) {
      std::swap(order[i], order[rng.uniform_int(0, i)]);
    }
    double epoch_loss = 0.0;
    int batches = 0;
    for (int start = 0; start < total; start += batch_size) {
      const int end = std::min(start + batch_size, total);
      std::vector<int> idx(order.begin() + start, order.begin() + end);
      std::vector<int> batch_labels;
      batch_labels.reserve(idx.size());
      for (int i : idx) batch_labels.push_back(dataset.labels[i]);

      Tensor batch = gather_rows(dataset.images, idx);
      Tensor loss = cross_entropy(forward(model, batch, false).logits, batch_labels);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("train_toy: loss diverged to " + std::to_string(value) +
                             " at epoch " + std::to_string(epoch));
      }
      epoch_loss += value;
      ++batches;
      if (lr != 0.0) {
        loss.backward();
        for (auto& [name, t] : model.named_parameters()) {
          auto g = t->grad();
          auto w = t->mutable_data();
          for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
          t->zero_grad();
        }
      }
    }
    stats.epoch_losses.push_back(epoch_loss / std::max(1, batches));
  }
  stats.final_loss = stats.epoch_losses.empty() ? 0.0 : stats.epoch_losses.back();

  model.set_trainable(false);
  stats.train_accuracy =
      top1_accuracy(forward(model, dataset.images, false).logits, dataset.labels);
  return stats;
}

}  // namespace vitquant
