#include "vitquant/quantize.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "support/gradcheck.hpp"
#include "vitquant/errors.hpp"
#include "vitquant/rng.hpp"
#include "vitquant/vit.hpp"

using namespace vitquant;
using testsupport::random_tensor;

namespace {

ViTConfig toy_config() {
  ViTConfig cfg;
  cfg.image_size = 16;
  cfg.channels = 1;
  cfg.patch_size = 4;
  cfg.embed_dim = 16;
  cfg.num_heads = 2;
  cfg.num_layers = 2;
  cfg.num_classes = 4;
  return cfg;
}

}  // namespace

TEST_CASE("quantize fixed points and clipping") {
  CHECK(quantize(Tensor::scalar(0.0), 0.7, 5).item() == 0.0);
  CHECK(quantize(Tensor::scalar(0.5), 0.25, 4).item() == 2.0);
  CHECK(quantize(Tensor::scalar(10.0), 1.0, 3).item() == 3.0);  // clipped to 2^2 - 1
  CHECK(quantize(Tensor::scalar(-10.0), 1.0, 3).item() == -3.0);
  CHECK_THROWS_AS(quantize(Tensor::scalar(1.0), 0.0, 4), ContractError);
  CHECK_THROWS_AS(quantize(Tensor::scalar(1.0), -0.5, 4), ContractError);
  CHECK_THROWS_AS(quantize(Tensor::scalar(1.0), 1.0, 1), ContractError);
}

TEST_CASE("rounding is half-to-even") {
  CHECK(quantize(Tensor::scalar(0.5), 1.0, 4).item() == 0.0);
  CHECK(quantize(Tensor::scalar(1.5), 1.0, 4).item() == 2.0);
  CHECK(quantize(Tensor::scalar(2.5), 1.0, 4).item() == 2.0);
  CHECK(quantize(Tensor::scalar(-0.5), 1.0, 4).item() == 0.0);
  CHECK(quantize(Tensor::scalar(-2.5), 1.0, 4).item() == -2.0);
}

TEST_CASE("quantizer invariant suite over random tensors") {
  Rng rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const int bits = rng.uniform_int(2, 8);
    const double gamma = rng.uniform(1e-3, 0.5);
    const double bound = std::pow(2.0, bits - 1) - 1.0;
    Tensor x = random_tensor({4, 5}, rng, -2.0, 2.0);
    Tensor q = quantize(x, gamma, bits);

    // integer outputs within the clip range
    for (double v : q.data()) {
      CHECK(v == std::nearbyint(v));
      CHECK(std::fabs(v) <= bound);
    }

    // symmetry
    Tensor qn = quantize(neg(x), gamma, bits);
    for (std::size_t i = 0; i < q.size(); ++i) CHECK(qn.data()[i] == -q.data()[i]);

    // dequantization error bound within the representable range
    Tensor deq = dequantize(q, gamma);
    for (std::size_t i = 0; i < q.size(); ++i) {
      if (std::fabs(x.data()[i]) <= gamma * bound) {
        CHECK(std::fabs(x.data()[i] - deq.data()[i]) <= gamma / 2 + 1e-15);
      }
    }

    // idempotence
    Tensor q2 = quantize(deq, gamma, bits);
    for (std::size_t i = 0; i < q.size(); ++i) CHECK(q2.data()[i] == q.data()[i]);
  }
}

TEST_CASE("initial gamma follows the weight range") {
  Tensor span = Tensor::from_data({2}, {-1.0, 1.0});
  CHECK(initial_gamma(span, 2) == doctest::Approx(2.0 / 3).epsilon(1e-15));
  Tensor wide = Tensor::from_data({2}, {0.0, 15.0});
  CHECK(initial_gamma(wide, 4) == doctest::Approx(1.0).epsilon(1e-15));

  Rng rng(7);
  for (int t = 0; t < 20; ++t) {
    Tensor w = random_tensor({6, 6}, rng, -3.0, 3.0);
    const int bits = rng.uniform_int(2, 8);
    double lo = w.data()[0], hi = w.data()[0];
    for (double v : w.data()) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    const double expect = (hi - lo) / ((1 << bits) - 1);
    CHECK(initial_gamma(w, bits) == doctest::Approx(expect).epsilon(1e-15));
  }

  // constant tensor falls back instead of failing
  CHECK(initial_gamma(Tensor::full({3}, 2.5), 4) == doctest::Approx(1e-8));
}

TEST_CASE("activation parameter derivation") {
  ViTModel m = init_vit(toy_config(), 1);
  QuantScheme s = make_scheme(m, 4);
  for (const auto& e : s.entries) CHECK(e.act_bits == 8);

  s.entries[0].bits = 2;
  s.entries[1].bits = 3;
  derive_activation_params(s);
  CHECK(s.entries[0].act_bits == 4);
  CHECK(s.entries[1].act_bits == 6);

  // cumulative scale recurrence
  QuantScheme c = make_scheme(m, 4);
  c.entries[0].gamma = 0.1;
  c.entries[1].gamma = 0.2;
  c.entries[2].gamma = 0.3;
  derive_activation_params(c);
  CHECK(c.entries[0].act_gamma == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(c.entries[1].act_gamma == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(c.entries[2].act_gamma == doctest::Approx(0.6).epsilon(1e-15));
}

TEST_CASE("bypass scheme reproduces FP logits bit-exactly") {
  ViTModel m = init_vit(toy_config(), 2);
  QuantizedModel q = make_quantized(m, bypass_scheme(m));
  Rng rng(3);
  Tensor batch = random_tensor({2, 16, 16, 1}, rng, 0.0, 1.0);
  Tensor fp_logits = forward(m, batch, false).logits;
  Tensor q_logits = qforward(q, batch, false).logits;
  for (std::size_t i = 0; i < fp_logits.size(); ++i) {
    CHECK(fp_logits.data()[i] == q_logits.data()[i]);
  }
}

TEST_CASE("quantized model caches integer weights consistent with its scheme") {
  ViTModel m = init_vit(toy_config(), 4);
  QuantScheme s = make_scheme(m, 5);
  QuantizedModel q = make_quantized(m, s);
  const auto targets = quantizable_weights(q.dequantized);
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    const auto& e = s.entries[i];
    const Tensor& stored = q.integer_weights[i];
    for (std::size_t j = 0; j < stored.size(); ++j) {
      CHECK(targets[i].weight->data()[j] ==
            doctest::Approx(e.gamma * stored.data()[j]).epsilon(1e-15));
    }
  }
}

TEST_CASE("fake_quantize forward matches quantize-dequantize and uses STE gradients") {
  Rng rng(11);
  Tensor x = random_tensor({3, 4}, rng, -1.0, 1.0);
  const double gamma = 0.05;
  Tensor fq = fake_quantize(x, gamma, 6);
  Tensor expect = dequantize(quantize(x, gamma, 6), gamma);
  for (std::size_t i = 0; i < fq.size(); ++i) CHECK(fq.data()[i] == expect.data()[i]);

  // In-range elements pass gradient through unchanged; saturated ones block it.
  Tensor mixed = Tensor::from_data({3}, {0.2, 5.0, -5.0}, true);
  sum_all(fake_quantize(mixed, 0.1, 4)).backward();
  CHECK(mixed.grad()[0] == 1.0);
  CHECK(mixed.grad()[1] == 0.0);
  CHECK(mixed.grad()[2] == 0.0);
}

TEST_CASE("quantizable weight enumeration and groups") {
  ViTModel m = init_vit(toy_config(), 5);
  auto targets = quantizable_weights(m);
  CHECK(targets.size() == 2 + 6 * 2);
  CHECK(targets.front().name == "patch.weight");
  CHECK(targets.front().group == 0);
  CHECK(targets.back().name == "head.weight");
  CHECK(targets.back().group == 1);

  QuantScheme s = make_scheme(m, 8);
  CHECK(s.num_groups == 2);
  CHECK(s.entries_of_group(0).size() == 7);  // patch embedding rides with layer 0
  CHECK(s.entries_of_group(1).size() == 7);  // head rides with the last layer
  s.set_group_bits(0, 4);
  derive_activation_params(s);
  CHECK_NOTHROW(s.validate());
  CHECK(s.group_bits(0) == 4);
  CHECK(s.group_bits(1) == 8);
}

TEST_CASE("footprint formulas") {
  // 22M parameters at 32 bits is 88 MB.
  Footprint fp32 = footprint_from_costs({{22'000'000ull, 0ull, 32, 32}}, 0);
  CHECK(fp32.size_mb == doctest::Approx(88.0).epsilon(1e-12));

  Footprint tiny = footprint_from_costs({{1000ull, 0ull, 8, 8}}, 0);
  CHECK(tiny.size_mb == doctest::Approx(0.001).epsilon(1e-12));

  // Hand-counted MACs for the toy model; num_patches = 16, d = 16, hidden = 64.
  ViTModel m = init_vit(toy_config(), 6);
  QuantScheme s = make_scheme(m, 4);
  Footprint f = report_footprint(m, s);
  const double patch_macs = 16.0 * 16 * 16;
  const double attn_macs = 4 * (16.0 * 16 * 16);
  const double mlp_macs = 2 * (16.0 * 16 * 64);
  const double head_macs = 16.0 * 4;
  const double total_macs = patch_macs + 2 * (attn_macs + mlp_macs) + head_macs;
  CHECK(f.bops == doctest::Approx(total_macs * 4 * 8).epsilon(1e-12));
  CHECK(f.avg_bits_weights == doctest::Approx(4.0));
  CHECK(f.avg_bits_acts == doctest::Approx(8.0));

  // Size: quantized params at 4 bits plus everything else at 32 bits.
  std::uint64_t qparams = 0;
  for (const auto& e : s.entries) qparams += e.params;
  std::uint64_t all_params = 0;
  for (const auto& [name, t] : m.named_parameters()) all_params += t->size();
  const double expect_mb = (qparams * 4.0 + (all_params - qparams) * 32.0) / 8e6;
  CHECK(f.size_mb == doctest::Approx(expect_mb).epsilon(1e-12));
}

TEST_CASE("scheme json roundtrip") {
  namespace fs = std::filesystem;
  ViTModel m = init_vit(toy_config(), 7);
  QuantScheme s = make_scheme(m, 4);
  s.set_group_bits(1, 6);
  Rng rng(8);
  for (auto& e : s.entries) e.gamma += rng.uniform(0.0, 1e-4);
  derive_activation_params(s);

  const auto path = (fs::temp_directory_path() / "vitquant_scheme.json").string();
  save_scheme(s, path);
  QuantScheme loaded = load_scheme(path, m);
  REQUIRE(loaded.entries.size() == s.entries.size());
  for (std::size_t i = 0; i < s.entries.size(); ++i) {
    CHECK(loaded.entries[i].bits == s.entries[i].bits);
    CHECK(loaded.entries[i].gamma == s.entries[i].gamma);
    CHECK(loaded.entries[i].act_bits == s.entries[i].act_bits);
    CHECK(loaded.entries[i].group == s.entries[i].group);
  }
  std::remove(path.c_str());
}
