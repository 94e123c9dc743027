#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "fracseg/model.hpp"

using namespace fracseg;
using Catch::Approx;

namespace {

Tensor random_input(const std::vector<int>& shape, uint64_t seed) {
  Tensor t(shape);
  Rng rng(seed);
  for (float& v : t.value()) v = uniform(rng, 0.0f, 1.0f);
  return t;
}

const Tensor* find_param(const Network& net, const std::string& name) {
  for (const auto& [k, t] : net.params().items())
    if (k == name) return &t;
  return nullptr;
}

void zero_all_params(ParamRegistry& reg) {
  for (auto& [k, t] : reg.items()) std::fill(t.value().begin(), t.value().end(), 0.0f);
}

}  // namespace

TEST_CASE("network maps 1,1,16^3 input to 1,2,16^3 probabilities") {
  NetworkConfig cfg;
  cfg.base_width = 4;
  Network net(cfg);
  Tape tape;
  tape.set_recording(false);
  Tensor out = net.forward(tape, random_input({1, 1, 16, 16, 16}, 1), BnMode::kEval);
  REQUIRE(out.ndim() == 5);
  CHECK(out.dim(0) == 1);
  CHECK(out.dim(1) == 2);
  CHECK(out.dim(2) == 16);
  CHECK(out.dim(3) == 16);
  CHECK(out.dim(4) == 16);
  // softmax: channels sum to 1, each in (0,1)
  const int64_t sp = 16 * 16 * 16;
  for (int64_t i = 0; i < sp; ++i) {
    const float a = out.value()[static_cast<size_t>(i)];
    const float b = out.value()[static_cast<size_t>(sp + i)];
    CHECK(a + b == Approx(1.0f).margin(1e-5));
    CHECK(a > 0.0f);
    CHECK(b > 0.0f);
  }
}

TEST_CASE("network rejects bad input shapes") {
  NetworkConfig cfg;
  cfg.base_width = 2;
  Network net(cfg);
  Tape tape;
  CHECK_THROWS_AS(net.forward(tape, Tensor({1, 1, 12, 16, 16})), ShapeError);
  CHECK_THROWS_AS(net.forward(tape, Tensor({1, 16, 16})), ShapeError);
}

TEST_CASE("encoder widths double per level from the base width") {
  NetworkConfig cfg;  // base 8
  Network net(cfg);
  const Tensor* w1 = find_param(net, "enc1.c1.conv.w");
  const Tensor* w2 = find_param(net, "enc2.c1.conv.w");
  const Tensor* w3 = find_param(net, "enc3.c1.conv.w");
  const Tensor* w4 = find_param(net, "enc4.c1.conv.w");
  REQUIRE(w1); REQUIRE(w2); REQUIRE(w3); REQUIRE(w4);
  CHECK(w1->dim(0) == 8);
  CHECK(w2->dim(0) == 16);
  CHECK(w3->dim(0) == 32);
  CHECK(w4->dim(0) == 64);
  CHECK(w1->dim(1) == 1);   // network input channels
  CHECK(w4->dim(1) == 32);  // fed by level-3 features
  CHECK(cfg.width_at(1) == 8);
  CHECK(cfg.width_at(4) == 64);
}

TEST_CASE("attention gates produce values in (0,1) and gate multiplicatively") {
  Rng rng(3);
  ParamRegistry reg;
  CsaConfig ccfg;
  CsaModule csa = CsaModule::make("csa", 2, 2, 4, 8, ccfg, rng, reg);
  Tape tape;
  Tensor f1 = random_input({1, 2, 8, 8, 8}, 10);
  Tensor fl = random_input({1, 4, 4, 4, 4}, 11);
  Tensor fg = random_input({1, 8, 2, 2, 2}, 12);

  auto [att1, fl_hat] = csa.attention1(tape, f1, fl);
  REQUIRE(att1.dim(1) == 1);
  for (float a : att1.value()) {
    CHECK(a > 0.0f);
    CHECK(a < 1.0f);
  }
  // fl_hat is fl gated voxel-wise by the single attention channel
  const int64_t sp = 4 * 4 * 4;
  for (int c = 0; c < 4; ++c)
    for (int64_t i = 0; i < sp; ++i)
      CHECK(fl_hat.value()[static_cast<size_t>(c * sp + i)] ==
            Approx(fl.value()[static_cast<size_t>(c * sp + i)] *
                   att1.value()[static_cast<size_t>(i)]));

  Tensor out = csa.attention2(tape, fl_hat, fg);
  REQUIRE(out.shape() == fl.shape());
}

TEST_CASE("bypassing stage-1 attention reproduces the raw features") {
  Rng rng(4);
  ParamRegistry reg;
  CsaModule csa = CsaModule::make("csa", 2, 1, 3, 6, CsaConfig{}, rng, reg);
  csa.force_att1_one = true;
  Tape tape;
  Tensor f1 = random_input({1, 1, 8, 8, 8}, 20);
  Tensor fl = random_input({1, 3, 4, 4, 4}, 21);
  auto [att1, fl_hat] = csa.attention1(tape, f1, fl);
  CHECK(fl_hat.value() == fl.value());
}

TEST_CASE("zeroed attention weights give the constant 0.5 gate") {
  Rng rng(5);
  ParamRegistry reg;
  CsaModule csa = CsaModule::make("csa", 2, 1, 3, 6, CsaConfig{}, rng, reg);
  zero_all_params(reg);
  Tape tape;
  Tensor fl_hat = random_input({1, 3, 4, 4, 4}, 30);
  Tensor fg = random_input({1, 6, 2, 2, 2}, 31);
  Tensor out = csa.attention2(tape, fl_hat, fg);
  // squeeze conv output is identically 0, sigmoid(0) = 0.5, and the
  // trilinear upsample of a constant stays constant
  for (size_t i = 0; i < out.value().size(); ++i)
    CHECK(out.value()[i] == Approx(0.5f * fl_hat.value()[i]));
}

TEST_CASE("attention shape contracts") {
  Rng rng(6);
  ParamRegistry reg;
  CsaModule csa = CsaModule::make("csa", 2, 1, 3, 6, CsaConfig{}, rng, reg);
  Tape tape;
  Tensor fl = random_input({1, 3, 4, 4, 4}, 1);
  // F1 must be 2x finer than Fl at level 2
  CHECK_THROWS_AS(csa.attention1(tape, random_input({1, 1, 4, 4, 4}, 2), fl), ShapeError);
  // Fg must be half the resolution of Fl_hat
  CHECK_THROWS_AS(csa.attention2(tape, fl, random_input({1, 6, 4, 4, 4}, 3)), ShapeError);
}

TEST_CASE("disabling the attention path changes the output and the parameter set") {
  NetworkConfig with;
  with.base_width = 2;
  NetworkConfig without = with;
  without.use_csa = false;
  Network a(with, 7), b(without, 7);
  CHECK(a.params().count() > b.params().count());
  CHECK(a.csa_level(2) != nullptr);
  CHECK(a.csa_level(3) != nullptr);
  CHECK(a.csa_level(1) == nullptr);
  CHECK(b.csa_level(2) == nullptr);

  Tensor in = random_input({1, 1, 8, 8, 8}, 50);
  Tape t1, t2;
  t1.set_recording(false);
  t2.set_recording(false);
  Tensor oa = a.forward(t1, in, BnMode::kEval);
  Tensor ob = b.forward(t2, in, BnMode::kEval);
  CHECK(oa.value() != ob.value());
}

TEST_CASE("construction is deterministic in the seed") {
  NetworkConfig cfg;
  cfg.base_width = 2;
  Network a(cfg, 99), b(cfg, 99), c(cfg, 100);
  REQUIRE(a.params().count() == b.params().count());
  CHECK(a.params().count() == c.params().count());
  for (size_t i = 0; i < a.params().items().size(); ++i) {
    CHECK(a.params().items()[i].second.value() == b.params().items()[i].second.value());
  }
  Tensor in = random_input({1, 1, 8, 8, 8}, 60);
  Tape t1, t2;
  Tensor oa = a.forward(t1, in, BnMode::kEval);
  Tensor ob = b.forward(t2, in, BnMode::kEval);
  CHECK(oa.value() == ob.value());
}

TEST_CASE("gradients reach every parameter") {
  NetworkConfig cfg;
  cfg.base_width = 2;
  Network net(cfg, 13);
  Tape tape;
  // 16^3 keeps the bottleneck at 2^3; a 1^3 bottleneck would batch-normalize
  // to exactly zero and legitimately starve the deepest level of gradient
  Tensor out = net.forward(tape, random_input({1, 1, 16, 16, 16}, 70), BnMode::kTrain);
  Tensor loss = sum_squares(tape, out);
  tape.backward(loss);
  for (auto& [name, t] : net.params().items()) {
    bool any = false;
    for (float g : t.grad()) any = any || g != 0.0f;
    INFO("parameter " << name);
    CHECK(any);
  }
}

TEST_CASE("checkpoint round-trip restores weights, stats, and outputs") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "net_rt.ckpt").string();
  NetworkConfig cfg;
  cfg.base_width = 2;
  Network a(cfg, 21);
  Tensor in = random_input({1, 1, 8, 8, 8}, 80);
  {  // drive the BN running stats away from their init
    Tape warm;
    warm.set_recording(false);
    a.forward(warm, in, BnMode::kTrain);
  }
  a.save_checkpoint(path);

  Network b(cfg, 22);  // different init on purpose
  Tape t0;
  t0.set_recording(false);
  Tensor before = b.forward(t0, in, BnMode::kEval);
  b.load_checkpoint(path);
  Tape t1, t2;
  t1.set_recording(false);
  t2.set_recording(false);
  Tensor oa = a.forward(t1, in, BnMode::kEval);
  Tensor ob = b.forward(t2, in, BnMode::kEval);
  CHECK(ob.value() == oa.value());  // bit-exact restore
  CHECK(before.value() != ob.value());
  std::remove(path.c_str());
}

TEST_CASE("checkpoint config mismatches are rejected") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "net_cfg.ckpt").string();
  NetworkConfig small;
  small.base_width = 2;
  Network a(small, 1);
  a.save_checkpoint(path);

  NetworkConfig big = small;
  big.base_width = 4;
  Network b(big, 1);
  CHECK_THROWS_AS(b.load_checkpoint(path), DataError);

  NetworkConfig ablated = small;
  ablated.use_csa = false;
  Network c(ablated, 1);
  CHECK_THROWS_AS(c.load_checkpoint(path), DataError);
  std::remove(path.c_str());
}

TEST_CASE("network config validation") {
  NetworkConfig cfg;
  cfg.num_classes = 1;
  CHECK_THROWS_AS(Network(cfg), DataError);
  cfg = NetworkConfig{};
  cfg.base_width = 0;
  CHECK_THROWS_AS(Network(cfg), DataError);
}
