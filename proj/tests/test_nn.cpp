#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "llamp/gradcheck.hpp"
#include "llamp/nn.hpp"
#include "oracles.hpp"

using namespace llamp;

TEST_CASE("lora_forward: fresh adapter leaves the base map untouched") {
  Rng rng(1);
  LinearMap map("m", 5, 7, true, rng);
  Matrix x = rng.normal_matrix(3, 7, 1.0);
  Matrix base = map.forward(Tensor(x)).value();
  map.attach_lora(2, rng);
  Matrix adapted = map.forward(Tensor(x)).value();
  CHECK((base - adapted).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("lora_forward: hand-computed low-rank delta") {
  // W = I2, bias 0, up = [[1],[0]], down = [[0, 1]], x = (3, 5) -> (8, 5)
  Rng rng(1);
  LinearMap map("m", 2, 2, false, rng);
  map.weight.mutable_value() = Matrix::Identity(2, 2);
  map.attach_lora(1, rng);
  map.lora->up.mutable_value() << 1, 0;
  map.lora->down.mutable_value() << 0, 1;
  Matrix x(1, 2);
  x << 3, 5;
  Matrix y = lora_forward(Tensor(x), map).value();
  CHECK(y(0, 0) == doctest::Approx(8.0));
  CHECK(y(0, 1) == doctest::Approx(5.0));
}

TEST_CASE("lora_forward: no adapter equals the plain affine map") {
  Rng rng(2);
  LinearMap map("m", 4, 3, true, rng);
  Matrix x = rng.normal_matrix(2, 3, 1.0);
  Matrix got = lora_forward(Tensor(x), map).value();
  Matrix want = oracle::linear(map, x);
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("lora_forward: shape mismatch names the map") {
  Rng rng(3);
  LinearMap map("query_proj", 4, 3, false, rng);
  Tensor bad(Matrix::Ones(2, 5));
  CHECK_THROWS_WITH_AS(map.forward(bad), doctest::Contains("query_proj"),
                       std::invalid_argument);
}

TEST_CASE("lora rank bounds") {
  Rng rng(4);
  CHECK_THROWS_AS(LoRAAdapter(4, 3, 0, rng), std::invalid_argument);
  CHECK_THROWS_AS(LoRAAdapter(4, 3, 4, rng), std::invalid_argument);
  LoRAAdapter ok(4, 3, 3, rng);
  CHECK(ok.up.value().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("attention: singleton softmax reduces to o(v(x))") {
  Rng rng(5);
  AttentionBlock blk("attn", 8, 2, MaskMode::causal, rng);
  Matrix x = rng.normal_matrix(1, 8, 1.0);
  Matrix got = blk.forward(Tensor(x)).value();
  Matrix want =
      oracle::linear(blk.o_proj, oracle::linear(blk.v_proj, x));
  CHECK((got - want).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("attention: incremental cache decoding matches one-shot causal") {
  Rng rng(6);
  AttentionBlock blk("attn", 12, 3, MaskMode::causal, rng);
  Matrix x = rng.normal_matrix(3, 12, 1.0);

  Matrix oneshot = blk.forward(Tensor(x)).value();

  KVCacheEntry cache(3, 4);
  Matrix incremental(3, 12);
  for (int t = 0; t < 3; ++t) {
    Tensor row(Matrix(x.row(t)));
    incremental.row(t) = blk.forward_cached(cache, row).value();
    auto [k, v] = blk.project_kv(row);
    cache.append(k.value(), v.value());
  }
  CHECK((oneshot - incremental).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("attention: causal outputs ignore later positions") {
  Rng rng(7);
  AttentionBlock blk("attn", 8, 2, MaskMode::causal, rng);
  Matrix x = rng.normal_matrix(4, 8, 1.0);
  Matrix before = blk.forward(Tensor(x)).value();
  Matrix perturbed = x;
  perturbed.row(3).array() += 10.0;
  Matrix after = blk.forward(Tensor(perturbed)).value();
  CHECK((before.topRows(3) - after.topRows(3)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((before.row(3) - after.row(3)).cwiseAbs().maxCoeff() > 1e-6);
}

TEST_CASE("attention: bidirectional blocks reject caches") {
  Rng rng(8);
  AttentionBlock blk("attn", 8, 2, MaskMode::bidirectional, rng);
  KVCacheEntry cache(2, 4);
  cache.append(Matrix::Ones(2, 8), Matrix::Ones(2, 8));
  cache.freeze();
  CHECK_THROWS_AS(blk.forward_cached(cache, Tensor(Matrix::Ones(1, 8))),
                  std::logic_error);
}

TEST_CASE("attention: cache geometry mismatch is a dimension error") {
  Rng rng(9);
  AttentionBlock blk("attn", 8, 2, MaskMode::causal, rng);
  KVCacheEntry wrong(4, 2);  // head split disagrees
  wrong.append(Matrix::Ones(1, 8), Matrix::Ones(1, 8));
  CHECK_THROWS_AS(blk.forward_cached(wrong, Tensor(Matrix::Ones(1, 8))),
                  std::invalid_argument);
}

TEST_CASE("layer_forward: zeroed output projections leave only the residual") {
  Rng rng(10);
  TransformerLayer layer("layer", 8, 16, 2, MaskMode::causal, rng);
  layer.attn.o_proj.weight.mutable_value().setZero();
  layer.ffn_out.weight.mutable_value().setZero();
  layer.ffn_out.bias.mutable_value().setZero();
  Matrix x = rng.normal_matrix(3, 8, 1.0);
  Matrix y = layer.forward(Tensor(x)).value();
  CHECK((y - x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layer_forward: straight-line oracle agreement") {
  Rng rng(11);
  for (auto mode : {MaskMode::causal, MaskMode::bidirectional}) {
    TransformerLayer layer("layer", 12, 24, 3, mode, rng);
    Matrix x = rng.normal_matrix(2, 12, 1.0);
    Matrix got = layer.forward(Tensor(x)).value();
    Matrix want = oracle::layer_forward(layer, x, mode == MaskMode::causal);
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("layer_forward: injected states extend the output") {
  Rng rng(12);
  TransformerLayer layer("layer", 8, 16, 2, MaskMode::causal, rng);
  Matrix x = rng.normal_matrix(3, 8, 1.0);
  Tensor injected(rng.normal_matrix(2, 8, 1.0));
  Tensor y = layer.forward(Tensor(x), &injected);
  CHECK(y.rows() == 5);
  // Token positions are unaffected by trailing injected states.
  Matrix plain = layer.forward(Tensor(x)).value();
  CHECK((y.value().topRows(3) - plain).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("layer_forward: width mismatch is a dimension error") {
  Rng rng(13);
  TransformerLayer layer("layer", 8, 16, 2, MaskMode::causal, rng);
  CHECK_THROWS_WITH_AS(layer.forward(Tensor(Matrix::Ones(2, 6))),
                       doctest::Contains("width"), std::invalid_argument);
}

TEST_CASE("finite_difference_check: quadratic has analytic gradient 2x") {
  Tensor x(Matrix(Eigen::RowVector2d(1.0, 2.0)), true);
  auto fn = [&] { return sum_all(mul(x, x)); };
  GradCheckReport rep = finite_difference_check(fn, {x}, 1e-5);
  CHECK(rep.max_rel_error < 1e-7);
  x.zero_grad();
  backward(fn());
  CHECK(x.grad()(0, 0) == doctest::Approx(2.0));
  CHECK(x.grad()(0, 1) == doctest::Approx(4.0));
}

TEST_CASE("finite_difference_check: epsilon must be positive, loss finite") {
  Tensor x(Matrix::Ones(1, 1), true);
  auto fn = [&] { return sum_all(mul(x, x)); };
  CHECK_THROWS_AS(finite_difference_check(fn, {x}, 0.0), std::invalid_argument);
  auto bad = [&] {
    return Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  };
  CHECK_THROWS_AS(finite_difference_check(bad, {x}, 1e-5), std::runtime_error);
}

TEST_CASE("frozen parameters receive exactly zero gradient") {
  Rng rng(14);
  TransformerLayer layer("layer", 8, 16, 2, MaskMode::causal, rng);
  NamedParams params;
  layer.collect_params("layer", params);
  // Open everything except the key projection.
  for (auto& [name, p] : params)
    p.set_requires_grad(name.find("k_proj") == std::string::npos);
  Matrix x = rng.normal_matrix(3, 8, 1.0);
  Tensor loss = sum_all(mul(layer.forward(Tensor(x)), layer.forward(Tensor(x))));
  backward(loss);
  for (auto& [name, p] : params) {
    if (name.find("k_proj") != std::string::npos) {
      CHECK(p.grad().cwiseAbs().maxCoeff() == 0.0);
    }
  }
  CHECK(layer.attn.q_proj.weight.grad().cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("layer gradients pass finite differences (all params)") {
  Rng rng(15);
  TransformerLayer layer("layer", 8, 12, 2, MaskMode::causal, rng);
  layer.attn.q_proj.attach_lora(2, rng);
  layer.attn.v_proj.attach_lora(2, rng);
  layer.attn.v_proj.lora->up.mutable_value() =
      rng.normal_matrix(8, 2, 0.3);  // move off the zero init
  Matrix x = rng.normal_matrix(3, 8, 0.8);
  Matrix w = rng.normal_matrix(3, 8, 1.0);
  NamedParams params;
  layer.collect_params("layer", params);
  std::vector<Tensor> leaves;
  for (auto& [name, p] : params) {
    p.set_requires_grad(true);
    leaves.push_back(p);
  }
  auto fn = [&] {
    return sum_all(mul(Tensor(w), layer.forward(Tensor(x))));
  };
  GradCheckReport rep = finite_difference_check(fn, leaves, 1e-5);
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("KVCacheEntry: LKVC round trip and freeze contract") {
  Rng rng(16);
  KVCacheEntry cache(2, 3);
  Matrix k = rng.normal_matrix(4, 6, 1.0);
  Matrix v = rng.normal_matrix(4, 6, 1.0);
  cache.append(k, v);
  CHECK(cache.length() == 4);
  cache.freeze();
  CHECK_THROWS_AS(cache.append(k, v), std::logic_error);

  const auto path = std::filesystem::temp_directory_path() / "t_cache.lkvc";
  cache.save(path);
  KVCacheEntry loaded = KVCacheEntry::load(path);
  CHECK(loaded.frozen());
  CHECK(loaded.bit_identical(cache));
  std::filesystem::remove(path);
}

TEST_CASE("KVCacheEntry: shape mismatch on append") {
  KVCacheEntry cache(2, 3);
  CHECK_THROWS_AS(cache.append(Matrix::Ones(1, 5), Matrix::Ones(1, 6)),
                  std::invalid_argument);
}
