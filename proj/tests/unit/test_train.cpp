#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "aft/checkpoint.hpp"
#include "aft/errors.hpp"
#include "aft/gradcheck.hpp"
#include "aft/model.hpp"
#include "aft/nn.hpp"
#include "aft/tasks.hpp"
#include "aft/train.hpp"

using namespace aft;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("aft_unit_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

ModelConfig tiny(Variant v, std::size_t rank = 0) {
  ModelConfig c;
  c.layers = 1;
  c.d = 4;
  c.variant = v;
  c.window = 2;
  c.factor_rank = rank;
  c.dropout = 0.0;
  c.vocab = 5;
  c.max_len = 4;
  return c;
}

Batch random_batch(Rng& rng, std::size_t B, std::size_t T, std::size_t V) {
  Batch b{B, T, {}, {}, {}};
  for (std::size_t i = 0; i < B * T; ++i) {
    b.inputs.push_back(static_cast<int>(rng.below(V)));
    b.targets.push_back(static_cast<int>(rng.below(V)));
    b.weight.push_back(i % 3 == 0 ? 0.0 : 1.0);
  }
  return b;
}

}  // namespace

TEST_CASE("layer norm, gelu and cross-entropy") {
  Rng rng(1);
  Tensor x = randn(rng, {3, 5});
  Tensor gain = randn(rng, {5}), bias = randn(rng, {5});
  const Tensor dy = randn(rng, {3, 5});
  nn::LayerNormCache cache;
  const Tensor y = nn::layer_norm(x, gain, bias, &cache);
  for (std::size_t n = 0; n < 3; ++n) {
    double mean = 0.0;
    for (std::size_t j = 0; j < 5; ++j) mean += cache.xhat.at(n, j);
    CHECK(std::abs(mean) < 1e-12);
  }
  const auto g = nn::layer_norm_backward(cache, gain, dy);
  const auto r = gradcheck::check([&] { return gradcheck::inner(dy, nn::layer_norm(x, gain, bias, nullptr)); },
                                  {{"x", &x}, {"gain", &gain}, {"bias", &bias}}, {g.dx, g.dgain, g.dbias});
  CHECK(r.max_rel() < 1e-6);

  const Tensor gv = nn::gelu(Tensor({3}, {0.0, 1.0, -1.0}));
  CHECK(gv[0] == 0.0);
  CHECK(gv[1] == doctest::Approx(0.8413447460685429).epsilon(1e-15));
  CHECK(gv[2] == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  Tensor z = randn(rng, {7}, 0.0, 2.0);
  const Tensor dz = randn(rng, {7});
  const auto rg = gradcheck::check([&] { return gradcheck::inner(dz, nn::gelu(z)); }, {{"z", &z}},
                                   {nn::gelu_backward(z, dz)});
  CHECK(rg.max_rel() < 1e-6);

  Tensor logits({2, 8});
  CHECK(nn::cross_entropy(logits, {3, 5}, {1.0, 1.0}, nullptr) == doctest::Approx(std::log(8.0)).epsilon(1e-15));
  logits = randn(rng, {4, 6});
  const std::vector<int> tg{0, 5, 2, 2};
  const std::vector<double> w{1, 0, 1, 1};
  Tensor dl;
  nn::cross_entropy(logits, tg, w, &dl);
  const auto rc = gradcheck::check([&] { return nn::cross_entropy(logits, tg, w, nullptr); }, {{"logits", &logits}},
                                   {dl});
  CHECK(rc.max_rel() < 1e-6);
  for (std::size_t j = 0; j < 6; ++j) CHECK(dl.at(1, j) == 0.0);
  CHECK_THROWS_AS(nn::cross_entropy(logits, tg, {0, 0, 0, 0}, nullptr), UsageError);
}

TEST_CASE("block with zeroed output paths is the identity") {
  Rng rng(2);
  ModelConfig cfg = tiny(Variant::Full);
  Model m = init_model(cfg, rng);
  m.blocks[0].attn.proj.wo.fill_inplace(0.0);
  m.blocks[0].w2.fill_inplace(0.0);
  m.blocks[0].b2.fill_inplace(0.0);
  const std::vector<int> tokens{1, 4, 0, 2};
  const Tensor logits = model_forward(m, tokens, 1, 4, nullptr, false).logits;

  Tensor x({4, cfg.d});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t j = 0; j < cfg.d; ++j)
      x.at(t, j) = m.tok_emb.at(static_cast<std::size_t>(tokens[t]), j) + m.pos_emb.at(t, j);
  const Tensor expect = nn::linear(nn::layer_norm(x, m.lnf_gain, m.lnf_bias, nullptr), m.head_w, m.head_b);
  CHECK(bit_equal(logits, expect));
}

TEST_CASE("eval mode is deterministic, train mode applies dropout") {
  Rng rng(3);
  ModelConfig cfg = tiny(Variant::Local);
  cfg.dropout = 0.5;
  const Model m = init_model(cfg, rng);
  const std::vector<int> tokens{1, 2, 3, 4, 0, 1, 2, 3};
  const Tensor a = model_forward(m, tokens, 2, 4, nullptr, false).logits;
  const Tensor b = model_forward(m, tokens, 2, 4, nullptr, false).logits;
  CHECK(bit_equal(a, b));
  Rng d1(9), d2(9);
  const Tensor c = model_forward(m, tokens, 2, 4, &d1, false).logits;
  CHECK_FALSE(bit_equal(a, c));
  CHECK(bit_equal(c, model_forward(m, tokens, 2, 4, &d2, false).logits));
}

TEST_CASE("model gradients vs finite differences") {
  struct Case {
    Variant v;
    std::size_t rank;
    double dropout;
  };
  for (const Case& cs : {Case{Variant::Full, 0, 0.0}, Case{Variant::Full, 2, 0.0}, Case{Variant::Local, 0, 0.0},
                         Case{Variant::Local, 2, 0.0}, Case{Variant::Simple, 0, 0.0}, Case{Variant::Local, 0, 0.3}}) {
    Rng rng(4);
    ModelConfig cfg = tiny(cs.v, cs.rank);
    cfg.dropout = cs.dropout;
    Model m = init_model(cfg, rng);
    // larger head weights make the loss sensitive to everything upstream
    m.head_w = randn(rng, m.head_w.shape(), 0.0, 0.5);
    const Batch b = random_batch(rng, 2, 4, cfg.vocab);
    auto loss = [&](Model* grads) {
      Rng drop(11);
      return model_loss(m, b, cs.dropout > 0.0 ? &drop : nullptr, grads);
    };
    Model g;
    loss(&g);
    std::vector<gradcheck::NamedParam> params;
    std::vector<Tensor> analytic;
    auto gp = g.parameters();
    auto mp = m.parameters();
    for (std::size_t i = 0; i < mp.size(); ++i) {
      params.push_back({mp[i].name, mp[i].value});
      analytic.push_back(*gp[i].value);
    }
    const auto r = gradcheck::check([&] { return loss(nullptr); }, params, analytic);
    CAPTURE(to_string(cs.v));
    CAPTURE(cs.rank);
    CAPTURE(cs.dropout);
    CHECK(r.max_rel() < 1e-5);
  }
}

TEST_CASE("conv blocks can be stored but not run causally") {
  Rng rng(5);
  ModelConfig cfg = tiny(Variant::Conv);
  cfg.heads = 2;
  const Model m = init_model(cfg, rng);
  CHECK_THROWS_AS(model_forward(m, {0, 1, 2, 3}, 1, 4, nullptr, false), ConfigError);
  const fs::path dir = scratch_dir("conv_ckpt");
  save_checkpoint(dir, m, {5, 0});
  const auto back = load_checkpoint(dir);
  CHECK(bit_equal(back.model.blocks[0].conv.w_raw, m.blocks[0].conv.w_raw));
  fs::remove_all(dir);
}

TEST_CASE("adamw") {
  TrainConfig cfg;
  cfg.weight_decay = 0.0;
  SUBCASE("zero gradient, no decay: unchanged") {
    Tensor th({3}, {1, -2, 3});
    Tensor g({3});
    std::vector<ParamRef> p{{"th", &th, true}}, gr{{"th", &g, true}};
    auto st = adamw_init(p);
    adamw_step(p, gr, st, 0.1, cfg);
    CHECK(bit_equal(th, Tensor({3}, {1, -2, 3})));
  }
  SUBCASE("first step of a scalar") {
    Tensor th({1}, {1.0});
    Tensor g({1}, {1.0});
    std::vector<ParamRef> p{{"th", &th, true}}, gr{{"th", &g, true}};
    auto st = adamw_init(p);
    adamw_step(p, gr, st, 0.1, cfg);
    CHECK(th[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
    CHECK(st.step == 1);
  }
  SUBCASE("five steps on a quadratic against a scripted oracle") {
    cfg.weight_decay = 0.05;
    Tensor th({2}, {0.7, -1.3});
    Tensor g({2});
    std::vector<ParamRef> p{{"th", &th, true}}, gr{{"th", &g, true}};
    auto st = adamw_init(p);
    double x[2] = {0.7, -1.3}, m[2] = {0, 0}, v[2] = {0, 0};
    const double lrs[5] = {0.1, 0.05, 0.2, 0.01, 0.1};
    for (int k = 1; k <= 5; ++k) {
      for (int i = 0; i < 2; ++i) g[i] = 2.0 * th[i];  // loss = sum theta^2
      adamw_step(p, gr, st, lrs[k - 1], cfg);
      for (int i = 0; i < 2; ++i) {
        const double gi = 2.0 * x[i];
        m[i] = 0.9 * m[i] + (1.0 - 0.9) * gi;
        v[i] = 0.999 * v[i] + (1.0 - 0.999) * gi * gi;
        const double mh = m[i] / (1.0 - std::pow(0.9, k)), vh = v[i] / (1.0 - std::pow(0.999, k));
        x[i] -= lrs[k - 1] * (mh / (std::sqrt(vh) + 1e-8) + 0.05 * x[i]);
      }
    }
    CHECK(th[0] == x[0]);
    CHECK(th[1] == x[1]);
  }
  SUBCASE("lr 0 changes nothing, decay only on flagged params") {
    cfg.weight_decay = 0.5;
    Rng rng(6);
    Tensor a = randn(rng, {4}), b = randn(rng, {4});
    const Tensor a0 = a, b0 = b;
    Tensor ga = randn(rng, {4}), gb = randn(rng, {4});
    std::vector<ParamRef> p{{"a", &a, true}, {"b", &b, false}}, gr{{"a", &ga, true}, {"b", &gb, false}};
    auto st = adamw_init(p);
    adamw_step(p, gr, st, 0.0, cfg);
    CHECK(bit_equal(a, a0));
    CHECK(bit_equal(b, b0));
    ga.fill_inplace(0.0);
    gb.fill_inplace(0.0);
    auto fresh = adamw_init(p);
    adamw_step(p, gr, fresh, 0.1, cfg);
    CHECK(bit_equal(b, b0));
    for (std::size_t i = 0; i < 4; ++i) CHECK(a[i] == doctest::Approx(a0[i] * (1.0 - 0.1 * 0.5)).epsilon(1e-15));
  }
}

TEST_CASE("learning rate schedule") {
  TrainConfig c;
  c.peak_lr = 3e-3;
  c.warmup_steps = 10;
  c.total_steps = 110;
  CHECK(lr_at(10, c) == c.peak_lr);
  CHECK(lr_at(5, c) == doctest::Approx(1.5e-3).epsilon(1e-15));
  CHECK(std::abs(lr_at(110, c)) < 1e-18);
  CHECK(lr_at(35, c) == doctest::Approx(3e-3 * 0.5 * (1.0 + std::cos(std::numbers::pi * 0.25))).epsilon(1e-15));
  c.schedule = Schedule::InverseSqrt;
  CHECK(lr_at(40, c) == doctest::Approx(3e-3 * 0.5).epsilon(1e-15));
  c.warmup_steps = 0;
  c.schedule = Schedule::Cosine;
  CHECK(lr_at(1, c) == doctest::Approx(3e-3 * 0.5 * (1.0 + std::cos(std::numbers::pi / 110.0))).epsilon(1e-15));
  c.warmup_steps = 200;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("config json round trip") {
  ModelConfig m;
  m.variant = Variant::Full;
  m.factor_rank = 7;
  m.dropout = 0.25;
  const ModelConfig back = model_config_from_json(to_json(m));
  CHECK(to_json(back) == to_json(m));
  CHECK_THROWS_AS(model_config_from_json(R"({"layerz": 3})"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(R"({"variant": "dense"})"), ConfigError);
  CHECK_THROWS_AS(model_config_from_json(R"({"d": "wide"})"), ConfigError);
  TrainConfig t;
  t.schedule = Schedule::InverseSqrt;
  t.seed = 123456789012345ULL;
  CHECK(to_json(train_config_from_json(to_json(t))) == to_json(t));
  CHECK_THROWS_AS(train_config_from_json(R"({"schedule": "step"})"), ConfigError);
}

TEST_CASE("copy task batches") {
  Rng rng(7);
  const CopyTask task{8, 5};
  const Batch b = copy_batch(task, rng, 3);
  for (std::size_t i = 0; i < 3; ++i) {
    const int* in = b.inputs.data() + i * 8;
    const int* tg = b.targets.data() + i * 8;
    CHECK(in[4] == task.delimiter());
    for (std::size_t t = 0; t < 4; ++t) {
      CHECK(in[t] < task.delimiter());
      CHECK(tg[4 + t] == in[t]);
      CHECK(b.weight[i * 8 + t] == 0.0);
      CHECK(b.weight[i * 8 + 4 + t] == 1.0);
    }
    for (std::size_t t = 0; t + 1 < 8; ++t) CHECK(tg[t] == in[t + 1]);
  }
  CHECK_THROWS_AS(copy_batch({7, 5}, rng, 1), ConfigError);
}

TEST_CASE("corpus helpers") {
  const auto a = synthetic_corpus(3, 5000), b = synthetic_corpus(3, 5000);
  CHECK(a.size() == 5000);
  CHECK(a == b);
  CHECK(a != synthetic_corpus(4, 5000));
  try {
    load_corpus("/nonexistent/aft/corpus.txt");
    FAIL("expected IoError");
  } catch (const IoError& e) {
    CHECK(std::string(e.what()).find("/nonexistent/aft/corpus.txt") != std::string::npos);
  }
  const auto ev = lm_eval_batches(a, 4, 16, 3);
  CHECK(ev.size() == 3);
  for (const auto& batch : ev) CHECK(batch.inputs.size() == batch.batch * 16);
}

TEST_CASE("untrained char model predicts near uniform") {
  const auto corpus = synthetic_corpus(1, 20000);
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.d = 16;
  cfg.variant = Variant::Simple;
  cfg.max_len = 32;
  Rng rng(8);
  const Model m = init_model(cfg, rng);
  const double bpc = eval_lm_loss(m, lm_eval_batches(corpus, 4, 32, 2)) / std::numbers::ln2;
  CHECK(std::abs(bpc - 8.0) < 0.05 * 8.0);
}

TEST_CASE("training is deterministic and checkpoints round-trip") {
  ModelConfig cfg;
  cfg.layers = 1;
  cfg.d = 8;
  cfg.vocab = 6;
  cfg.max_len = 8;
  cfg.window = 3;
  TrainConfig t;
  t.total_steps = 12;
  t.warmup_steps = 3;
  t.batch = 4;
  t.eval_every = 5;
  t.eval_batches = 2;
  t.seed = 42;
  const fs::path dir = scratch_dir("ckpt");
  t.checkpoint_dir = (dir / "run").string();
  t.metrics_path = (dir / "metrics.csv").string();
  const CopyTask task{8, 6};
  const TrainResult a = train_copy_task(cfg, t, task);
  TrainConfig t2 = t;
  t2.checkpoint_dir.clear();
  t2.metrics_path.clear();
  const TrainResult b = train_copy_task(cfg, t2, task);
  REQUIRE(a.train_loss.size() == 12);
  CHECK(a.train_loss == b.train_loss);
  CHECK(a.train_loss.back() < a.train_loss.front());

  const std::string csv = slurp(dir / "metrics.csv");
  CHECK(csv.rfind("step,split,loss,bpc,lr,wall_ms\n", 0) == 0);

  const auto loaded = load_checkpoint(dir / "run");
  CHECK(loaded.meta.seed == 42);
  CHECK(loaded.meta.step == 12);
  Rng rng(1);
  const Batch probe = copy_batch(task, rng, 8);
  CHECK(model_loss(loaded.model, probe, nullptr, nullptr) == model_loss(a.model, probe, nullptr, nullptr));
  save_checkpoint(dir / "again", loaded.model, loaded.meta);
  CHECK(slurp(dir / "run" / "params.bin") == slurp(dir / "again" / "params.bin"));
  CHECK(slurp(dir / "run" / "manifest.json") == slurp(dir / "again" / "manifest.json"));

  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), IoError);
  {
    std::ofstream bad(dir / "run" / "manifest.json", std::ios::trunc);
    bad << "{ not json";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "run"), ConfigError);
  fs::remove_all(dir);
}
