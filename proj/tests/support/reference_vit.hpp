#pragma once

// Straight-line re-implementation of the transformer forward pass for one
// image, written with plain loops over std::vector<double>. It shares no code
// with the library's tensor engine so it can serve as an independent oracle.

#include <cmath>
#include <vector>

#include "vitquant/vit.hpp"

namespace testsupport {

namespace refdetail {

inline std::vector<double> vec(const vitquant::Tensor& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

// rows x cols times cols x out, bias length out.
inline std::vector<double> linear(const std::vector<double>& x, int rows, int cols,
                                  const std::vector<double>& w, const std::vector<double>& b,
                                  int out) {
  std::vector<double> y(static_cast<std::size_t>(rows) * out, 0.0);
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const double xv = x[r * cols + c];
      for (int o = 0; o < out; ++o) y[r * out + o] += xv * w[c * out + o];
    }
    for (int o = 0; o < out; ++o) y[r * out + o] += b[o];
  }
  return y;
}

inline void layernorm_rows(std::vector<double>& x, int rows, int d,
                           const std::vector<double>& gain, const std::vector<double>& bias,
                           double eps) {
  for (int r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += x[r * d + j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (x[r * d + j] - mu) * (x[r * d + j] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < d; ++j) x[r * d + j] = gain[j] * ((x[r * d + j] - mu) * inv) + bias[j];
  }
}

}  // namespace refdetail

// Logits for a single image laid out as H*W*C doubles.
inline std::vector<double> reference_vit_logits(const vitquant::ViTModel& model,
                                                const std::vector<double>& image) {
  using namespace refdetail;
  const auto& cfg = model.config;
  const int g = cfg.image_size / cfg.patch_size;
  const int n = g * g;
  const int p = cfg.patch_size;
  const int c = cfg.channels;
  const int d = cfg.embed_dim;
  const int pd = p * p * c;
  const int heads = cfg.num_heads;
  const int dh = d / heads;
  const int hidden = static_cast<int>(d * cfg.mlp_ratio);
  const double eps = 1e-6;

  // patch extraction
  std::vector<double> patches(static_cast<std::size_t>(n) * pd);
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc) {
      for (int ir = 0; ir < p; ++ir) {
        for (int ic = 0; ic < p; ++ic) {
          for (int ch = 0; ch < c; ++ch) {
            const int row = pr * p + ir, col = pc * p + ic;
            patches[(pr * g + pc) * pd + (ir * p + ic) * c + ch] =
                image[(row * cfg.image_size + col) * c + ch];
          }
        }
      }
    }
  }

  std::vector<double> x =
      linear(patches, n, pd, vec(model.patch_weight), vec(model.patch_bias), d);
  const auto pos = vec(model.pos_embed);
  for (std::size_t i = 0; i < x.size(); ++i) x[i] += pos[i];

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (const auto& l : model.layers) {
    std::vector<double> xn = x;
    layernorm_rows(xn, n, d, vec(l.ln1_gain), vec(l.ln1_bias), eps);
    const auto q = linear(xn, n, d, vec(l.wq), vec(l.bq), d);
    const auto k = linear(xn, n, d, vec(l.wk), vec(l.bk), d);
    const auto v = linear(xn, n, d, vec(l.wv), vec(l.bv), d);

    std::vector<double> concat_heads(static_cast<std::size_t>(n) * d, 0.0);
    for (int h = 0; h < heads; ++h) {
      for (int i = 0; i < n; ++i) {
        std::vector<double> row(n);
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
          double s = 0.0;
          for (int t = 0; t < dh; ++t) s += q[i * d + h * dh + t] * k[j * d + h * dh + t];
          row[j] = s * scale;
          mx = std::max(mx, row[j]);
        }
        double total = 0.0;
        for (int j = 0; j < n; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        for (int j = 0; j < n; ++j) row[j] /= total;
        for (int t = 0; t < dh; ++t) {
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += row[j] * v[j * d + h * dh + t];
          concat_heads[i * d + h * dh + t] = acc;
        }
      }
    }
    const auto mhsa = linear(concat_heads, n, d, vec(l.wo), vec(l.bo), d);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += mhsa[i];

    std::vector<double> mn = x;
    layernorm_rows(mn, n, d, vec(l.ln2_gain), vec(l.ln2_bias), eps);
    auto h1 = linear(mn, n, d, vec(l.fc1), vec(l.fc1_bias), hidden);
    for (auto& hv : h1) hv = 0.5 * hv * (1.0 + std::erf(hv / std::sqrt(2.0)));
    const auto h2 = linear(h1, n, hidden, vec(l.fc2), vec(l.fc2_bias), d);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += h2[i];
  }

  std::vector<double> pooled(d, 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) pooled[j] += x[i * d + j];
  }
  for (auto& v2 : pooled) v2 /= n;
  return linear(pooled, 1, d, vec(model.head_weight), vec(model.head_bias), cfg.num_classes);
}

}  // namespace testsupport
