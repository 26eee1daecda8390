#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "semdefect/losses.hpp"
#include "semdefect/net.hpp"

using namespace semdefect;
using namespace semdefect::net;
using nn::Graph;
using nn::Param;

namespace {

Tensor random_input(int n, int h, int w, uint64_t seed, int c = 1) {
  auto rng = make_rng(seed);
  Tensor t(n, c, h, w);
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (double& v : t.v) v = dist(rng);
  return t;
}

NetConfig small_config() {
  NetConfig cfg;
  cfg.depth = 3;
  cfg.base_channels = 8;
  cfg.embed_dim = 8;
  cfg.gn_groups = 4;
  return cfg;
}

}  // namespace

TEST_CASE("shape arithmetic for depth 3 on a 64x64 input") {
  UNet model(small_config(), 1);
  Graph g;
  ForwardOutput out = model.forward(g, random_input(1, 64, 64, 2));
  REQUIRE(g.value(out.low_feats).h == 16);
  REQUIRE(g.value(out.low_feats).w == 16);
  REQUIRE(g.value(out.low_feats).c == 32);  // base 8 << 2
  REQUIRE(g.value(out.high_feats).h == 64);
  REQUIRE(g.value(out.high_feats).c == 8);
  REQUIRE(g.value(out.prob_map).c == 1);
  REQUIRE(g.value(out.prob_map).h == 64);
  REQUIRE(g.value(out.prob_map).w == 64);
}

TEST_CASE("probability map lies strictly inside (0,1)") {
  UNet model(small_config(), 3);
  Graph g;
  ForwardOutput out = model.forward(g, random_input(2, 32, 32, 4));
  for (double v : g.value(out.prob_map).v) {
    REQUIRE(v > 0.0);
    REQUIRE(v < 1.0);
  }
}

TEST_CASE("inference is invariant to batch composition") {
  UNet model(small_config(), 5);
  Tensor x = random_input(1, 32, 32, 6);
  Tensor y = random_input(1, 32, 32, 7);
  Tensor both(2, 1, 32, 32);
  std::copy(x.v.begin(), x.v.end(), both.v.begin());
  std::copy(y.v.begin(), y.v.end(), both.v.begin() + x.size());

  Graph g1, g2;
  ForwardOutput solo = model.forward(g1, x);
  ForwardOutput batch = model.forward(g2, both);
  const Tensor& ps = g1.value(solo.prob_map);
  const Tensor& pb = g2.value(batch.prob_map);
  for (size_t i = 0; i < ps.size(); ++i)
    REQUIRE(std::abs(ps[i] - pb[i]) < 1e-6);
}

TEST_CASE("bad input shape names the required divisibility") {
  UNet model(small_config(), 8);
  Graph g;
  REQUIRE_THROWS_WITH(model.forward(g, random_input(1, 30, 30, 9)),
                      Catch::Matchers::ContainsSubstring("divisible by 4"));
  REQUIRE_THROWS_AS(model.forward(g, Tensor(1, 1, 32, 32, 1.5)), ParameterError);
}

TEST_CASE("projection head is a per-pixel linear map") {
  SECTION("spatial dimensions preserved, channels become embed_dim") {
    UNet model(small_config(), 10);
    Graph g;
    ForwardOutput out = model.forward(g, random_input(1, 32, 32, 11));
    int emb = model.project(g, out);
    REQUIRE(g.value(emb).c == 8);
    REQUIRE(g.value(emb).h == 32);
    REQUIRE(g.value(emb).w == 32);
  }
  SECTION("1x1 convolution against a hand-computed matrix-vector product") {
    Graph g;
    Param w, b;
    // 2x3 projection matrix on a single pixel.
    Tensor wt(2, 3, 1, 1);
    wt.v = {1.0, 2.0, 3.0, -1.0, 0.5, 4.0};
    w.init("w", std::move(wt));
    b.init("b", Tensor(2, 1, 1, 1, 0.0));
    Tensor x(1, 3, 1, 1);
    x.v = {2.0, -1.0, 0.5};
    int out = nn::conv2d(g, nn::input(g, x), w, b);
    REQUIRE(g.value(out).v[0] == Catch::Approx(1.0 * 2 + 2.0 * -1 + 3.0 * 0.5));
    REQUIRE(g.value(out).v[1] == Catch::Approx(-1.0 * 2 + 0.5 * -1 + 4.0 * 0.5));
  }
  SECTION("zero weights and bias give all-zero embeddings") {
    Graph g;
    Param w, b;
    w.init("w", Tensor(4, 3, 1, 1, 0.0));
    b.init("b", Tensor(4, 1, 1, 1, 0.0));
    int out = nn::conv2d(g, nn::input(g, random_input(1, 5, 5, 12, 3)), w, b);
    for (double v : g.value(out).v) REQUIRE(v == 0.0);
  }
}

TEST_CASE("network gradients match finite differences on a micro model") {
  NetConfig cfg;
  cfg.depth = 2;
  cfg.base_channels = 8;
  cfg.embed_dim = 4;
  cfg.gn_groups = 4;
  UNet model(cfg, 13);
  Tensor x = random_input(1, 8, 8, 14);

  // Loss: weighted BCE of the prob map against a fixed mask.
  Tensor mask(1, 1, 8, 8, 0.0);
  for (int i = 20; i < 30; ++i) mask[i] = 1.0;
  Tensor ones(1, 1, 8, 8, 1.0);

  auto eval_loss = [&] {
    Graph g;
    ForwardOutput out = model.forward(g, x);
    return losses::weighted_bce(g.value(out.prob_map), mask, ones, 1e-6);
  };

  model.zero_grad();
  {
    Graph g;
    ForwardOutput out = model.forward(g, x);
    Tensor gp = g.value(out.prob_map).zeros_like();
    losses::weighted_bce(g.value(out.prob_map), mask, ones, 1e-6, &gp);
    g.grad(out.prob_map) = gp;
    g.backward();
  }

  auto params = model.params();
  auto rng = make_rng(15);
  int checked = 0;
  for (int trial = 0; trial < 40; ++trial) {
    Param* p = params[std::uniform_int_distribution<size_t>(0, params.size() - 1)(rng)];
    size_t i = std::uniform_int_distribution<size_t>(0, p->value.size() - 1)(rng);
    double orig = p->value[i];
    const double h = 1e-5;
    p->value[i] = orig + h;
    double up = eval_loss();
    p->value[i] = orig - h;
    double down = eval_loss();
    p->value[i] = orig;
    double fd = (up - down) / (2.0 * h);
    if (std::abs(fd) < 1e-8) continue;  // flat directions are uninformative
    REQUIRE(p->grad[i] == Catch::Approx(fd).epsilon(1e-3).margin(1e-8));
    ++checked;
  }
  REQUIRE(checked >= 10);
}

TEST_CASE("all parameters receive finite gradients from both heads") {
  UNet model(small_config(), 16);
  Tensor x = random_input(2, 16, 16, 17);
  Tensor mask(2, 1, 16, 16, 0.0);
  for (int i = 0; i < 40; ++i) mask[i] = 1.0;
  Tensor ones(2, 1, 16, 16, 1.0);

  model.zero_grad();
  Graph g;
  ForwardOutput out = model.forward(g, x);
  int emb = model.project(g, out);
  Graph g2;
  ForwardOutput out2 = model.forward(g2, x);  // stand-in augmented view
  int emb2 = model.project(g2, out2);

  losses::LossConfig cfg;
  cfg.pixel_sample_budget = 16;
  Tensor gp = g.value(out.prob_map).zeros_like();
  losses::weighted_bce(g.value(out.prob_map), mask, ones, 1e-6, &gp);
  Tensor ge = g.value(emb).zeros_like();
  Tensor ga = g2.value(emb2).zeros_like();
  losses::dense_clr(g.value(emb), g2.value(emb2), cfg, 1, &ge, &ga);

  g.grad(out.prob_map) = gp;
  g.grad(emb) = ge;
  g.backward();
  g2.grad(emb2) = ga;
  g2.backward();

  for (nn::Param* p : model.params()) {
    double norm = 0.0;
    for (size_t i = 0; i < p->grad.size(); ++i) {
      REQUIRE(std::isfinite(p->grad[i]));
      norm += std::abs(p->grad[i]);
    }
    INFO(p->name);
    REQUIRE(norm > 0.0);
  }
}

TEST_CASE("checkpoint round trip reproduces inference bit-exactly") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "semdefect_test_net";
  fs::create_directories(dir);
  fs::path ckpt = dir / "model.ckpt";

  UNet model(small_config(), 18);
  Tensor x = random_input(1, 32, 32, 19);
  Graph g1;
  Tensor before = g1.value(model.forward(g1, x).prob_map);

  model.save(ckpt.string());
  UNet loaded = UNet::load(ckpt.string());
  REQUIRE(loaded.config().depth == 3);
  Graph g2;
  Tensor after = g2.value(loaded.forward(g2, x).prob_map);
  REQUIRE(before.v == after.v);

  fs::remove_all(dir);
}

TEST_CASE("ref-def mode takes a two-channel input") {
  NetConfig cfg = small_config();
  cfg.in_channels = 2;
  UNet model(cfg, 20);
  Graph g;
  ForwardOutput out = model.forward(g, random_input(1, 32, 32, 21, 2));
  REQUIRE(g.value(out.prob_map).c == 1);
  Graph g2;
  REQUIRE_THROWS_AS(model.forward(g2, random_input(1, 32, 32, 22, 1)), ShapeError);
}
