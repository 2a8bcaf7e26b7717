// nf: command line front end for the neuralfactors library.
//
// Subcommands: synth, train, eval, forecast, sample, portfolio,
// baseline ppca|garch, export-betas. A JSON config file supplies settings,
// command line flags override it, unknown config keys are rejected. Every
// command writes a manifest holding the resolved config, the master seed,
// and fnv1a64 checksums of its inputs and outputs, so a run can be
// reproduced from the manifest alone.
//
// Exit codes: 0 success, 2 argument error, 3 data error, 4 numerical failure.

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <neuralfactors/baselines.hpp>
#include <neuralfactors/checkpoint.hpp>
#include <neuralfactors/evaluation.hpp>
#include <neuralfactors/model.hpp>
#include <neuralfactors/panel.hpp>
#include <neuralfactors/synthetic.hpp>
#include <neuralfactors/train.hpp>

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

enum class Cmd { kSynth, kTrain, kEval, kForecast, kSample, kPortfolio, kBaseline, kExportBetas };

// ---------------------------------------------------------------- config

struct RunConfig {
  std::uint64_t seed = 1;
  std::string data_dir = "data";
  std::string out_dir = "out";
  std::string checkpoint;       // empty resolves to <out>/model.ckpt
  double norm_constant = 0.0;   // 0 recomputes from the training split
  std::string train_end;
  std::string val_end;

  nf::model::ModelConfig model;

  std::size_t synth_n = 48;
  std::size_t synth_days = 3000;
  std::size_t synth_factors = 4;
  std::size_t synth_sectors = 6;
  double synth_gap_prob = 0.0;
  double synth_norm = 0.02672357;

  std::size_t joint_draws = 100;
  std::size_t indep_draws = 10000;
  std::size_t cdf_draws = 2048;
  std::size_t portfolio_samples = 10000;
  std::size_t stride = 1;

  std::string mode = "long_only";
  std::string leverage = "unit";
  double lambda = 1.0;
  std::size_t max_iter = 10000;
  std::string port_split = "test";

  std::size_t ppca_factors = 12;
  std::size_t ppca_window = 504;
  std::size_t garch_min_obs = 250;

  std::string date;
  std::size_t n_samples = 100;
};

void check_keys(const ojson& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) known = known || it.key() == k;
    if (!known) throw nf::ContractError("unknown config key \"" + where + it.key() + "\"");
  }
}

template <typename T>
void read_key(const ojson& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

void apply_config(RunConfig& c, const ojson& j) {
  if (!j.is_object()) throw nf::ContractError("config root must be a JSON object");
  check_keys(j, "", {"seed", "data_dir", "out", "checkpoint", "norm_constant", "split", "model",
                     "synth", "eval", "portfolio", "ppca", "garch"});
  read_key(j, "seed", c.seed);
  read_key(j, "data_dir", c.data_dir);
  read_key(j, "out", c.out_dir);
  read_key(j, "checkpoint", c.checkpoint);
  read_key(j, "norm_constant", c.norm_constant);
  if (j.contains("split")) {
    const ojson& s = j.at("split");
    check_keys(s, "split.", {"train_end", "val_end"});
    read_key(s, "train_end", c.train_end);
    read_key(s, "val_end", c.val_end);
  }
  if (j.contains("model")) {
    const ojson& m = j.at("model");
    check_keys(m, "model.",
               {"factors", "lookback", "hidden", "dropout", "arch", "seq_layers", "heads", "k",
                "lr", "weight_decay", "steps", "polyak_start", "val_every", "matched"});
    read_key(m, "factors", c.model.f);
    read_key(m, "lookback", c.model.lookback);
    read_key(m, "hidden", c.model.hidden);
    read_key(m, "dropout", c.model.dropout);
    if (m.contains("arch")) c.model.arch = nf::ckpt::arch_from_name(m.at("arch").get<std::string>());
    read_key(m, "seq_layers", c.model.seq_layers);
    read_key(m, "heads", c.model.heads);
    read_key(m, "k", c.model.k_iwae);
    read_key(m, "lr", c.model.lr);
    read_key(m, "weight_decay", c.model.weight_decay);
    read_key(m, "steps", c.model.steps);
    read_key(m, "polyak_start", c.model.polyak_start);
    read_key(m, "val_every", c.model.val_every);
    read_key(m, "matched", c.model.matched);
  }
  if (j.contains("synth")) {
    const ojson& s = j.at("synth");
    check_keys(s, "synth.", {"n", "days", "factors", "sectors", "gap_prob", "norm_constant"});
    read_key(s, "n", c.synth_n);
    read_key(s, "days", c.synth_days);
    read_key(s, "factors", c.synth_factors);
    read_key(s, "sectors", c.synth_sectors);
    read_key(s, "gap_prob", c.synth_gap_prob);
    read_key(s, "norm_constant", c.synth_norm);
  }
  if (j.contains("eval")) {
    const ojson& e = j.at("eval");
    check_keys(e, "eval.", {"joint_draws", "indep_draws", "cdf_draws", "portfolio_samples",
                            "stride"});
    read_key(e, "joint_draws", c.joint_draws);
    read_key(e, "indep_draws", c.indep_draws);
    read_key(e, "cdf_draws", c.cdf_draws);
    read_key(e, "portfolio_samples", c.portfolio_samples);
    read_key(e, "stride", c.stride);
  }
  if (j.contains("portfolio")) {
    const ojson& p = j.at("portfolio");
    check_keys(p, "portfolio.", {"mode", "leverage", "lambda", "max_iter", "split"});
    read_key(p, "mode", c.mode);
    read_key(p, "leverage", c.leverage);
    read_key(p, "lambda", c.lambda);
    read_key(p, "max_iter", c.max_iter);
    read_key(p, "split", c.port_split);
  }
  if (j.contains("ppca")) {
    const ojson& p = j.at("ppca");
    check_keys(p, "ppca.", {"factors", "window"});
    read_key(p, "factors", c.ppca_factors);
    read_key(p, "window", c.ppca_window);
  }
  if (j.contains("garch")) {
    const ojson& g = j.at("garch");
    check_keys(g, "garch.", {"min_obs"});
    read_key(g, "min_obs", c.garch_min_obs);
  }
}

ojson dump_config(const RunConfig& c) {
  ojson j;
  j["seed"] = c.seed;
  j["data_dir"] = c.data_dir;
  j["out"] = c.out_dir;
  j["checkpoint"] = c.checkpoint;
  j["norm_constant"] = c.norm_constant;
  j["split"] = ojson{{"train_end", c.train_end}, {"val_end", c.val_end}};
  j["model"] = ojson{{"factors", c.model.f},
                     {"lookback", c.model.lookback},
                     {"hidden", c.model.hidden},
                     {"dropout", c.model.dropout},
                     {"arch", nf::ckpt::arch_name(c.model.arch)},
                     {"seq_layers", c.model.seq_layers},
                     {"heads", c.model.heads},
                     {"k", c.model.k_iwae},
                     {"lr", c.model.lr},
                     {"weight_decay", c.model.weight_decay},
                     {"steps", c.model.steps},
                     {"polyak_start", c.model.polyak_start},
                     {"val_every", c.model.val_every},
                     {"matched", c.model.matched}};
  j["synth"] = ojson{{"n", c.synth_n},
                     {"days", c.synth_days},
                     {"factors", c.synth_factors},
                     {"sectors", c.synth_sectors},
                     {"gap_prob", c.synth_gap_prob},
                     {"norm_constant", c.synth_norm}};
  j["eval"] = ojson{{"joint_draws", c.joint_draws},
                    {"indep_draws", c.indep_draws},
                    {"cdf_draws", c.cdf_draws},
                    {"portfolio_samples", c.portfolio_samples},
                    {"stride", c.stride}};
  j["portfolio"] = ojson{{"mode", c.mode},
                         {"leverage", c.leverage},
                         {"lambda", c.lambda},
                         {"max_iter", c.max_iter},
                         {"split", c.port_split}};
  j["ppca"] = ojson{{"factors", c.ppca_factors}, {"window", c.ppca_window}};
  j["garch"] = ojson{{"min_obs", c.garch_min_obs}};
  return j;
}

struct Flags {
  std::optional<std::string> config, data_dir, out, split, date, mode, leverage, arch;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> n, factors, lookback, steps, k;
  std::optional<double> lambda;
};

void apply_split_flag(RunConfig& c, const std::string& s) {
  const std::size_t pos = s.find_first_of(":,");
  if (pos == std::string::npos || pos == 0 || pos + 1 >= s.size())
    throw nf::ContractError("--split wants TRAIN_END:VAL_END, got \"" + s + "\"");
  c.train_end = s.substr(0, pos);
  c.val_end = s.substr(pos + 1);
}

RunConfig resolve(const Flags& fl, Cmd cmd, const std::string& baseline_kind) {
  RunConfig c;
  if (fl.config) {
    std::ifstream in(*fl.config);
    if (!in) throw nf::DataError("cannot read config " + *fl.config);
    ojson j;
    try {
      in >> j;
    } catch (const ojson::exception& e) {
      throw nf::ContractError(*fl.config + ": " + e.what());
    }
    try {
      apply_config(c, j);
    } catch (const ojson::exception& e) {
      throw nf::ContractError(*fl.config + ": " + e.what());
    }
  }
  if (fl.data_dir) c.data_dir = *fl.data_dir;
  if (fl.out) c.out_dir = *fl.out;
  if (fl.seed) c.seed = *fl.seed;
  if (fl.split) apply_split_flag(c, *fl.split);
  if (fl.date) c.date = *fl.date;
  if (fl.mode) c.mode = *fl.mode;
  if (fl.leverage) c.leverage = *fl.leverage;
  if (fl.arch) c.model.arch = nf::ckpt::arch_from_name(*fl.arch);
  if (fl.lambda) c.lambda = *fl.lambda;
  if (fl.steps) c.model.steps = *fl.steps;
  if (fl.k) c.model.k_iwae = *fl.k;
  if (fl.n) {
    if (cmd == Cmd::kSynth)
      c.synth_n = *fl.n;
    else
      c.n_samples = *fl.n;
  }
  if (fl.factors) {
    if (cmd == Cmd::kSynth)
      c.synth_factors = *fl.factors;
    else if (cmd == Cmd::kBaseline && baseline_kind == "ppca")
      c.ppca_factors = *fl.factors;
    else
      c.model.f = *fl.factors;
  }
  if (fl.lookback) {
    if (cmd == Cmd::kBaseline && baseline_kind == "ppca")
      c.ppca_window = *fl.lookback;
    else
      c.model.lookback = *fl.lookback;
  }
  c.model.seed = c.seed;
  nf::require(c.stride >= 1, "eval.stride must be at least 1");
  nf::require(c.joint_draws >= 1 && c.indep_draws >= 1 && c.cdf_draws >= 1,
              "eval draw counts must be at least 1");
  nf::require(c.portfolio_samples >= 1, "eval.portfolio_samples must be at least 1");
  nf::require(c.norm_constant >= 0.0, "norm_constant must be nonnegative");
  return c;
}

// ---------------------------------------------------------------- plumbing

std::string fmt17(double v) {
  char b[32];
  std::snprintf(b, sizeof(b), "%.17g", v);
  return b;
}

std::string path_join(const std::string& a, const std::string& b) {
  return (fs::path(a) / b).string();
}

void ensure_dir(const std::string& d) {
  if (d.empty()) return;
  std::error_code ec;
  fs::create_directories(d, ec);
  if (ec) throw nf::DataError("cannot create directory " + d + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream out(path);
  if (!out) throw nf::DataError("cannot write " + path);
  out << body;
  out.flush();
  if (!out) throw nf::DataError("write failed for " + path);
}

std::string checksum_hex(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw nf::DataError("cannot read " + path + " for checksumming");
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  char b[24];
  std::snprintf(b, sizeof(b), "%016llx",
                static_cast<unsigned long long>(nf::fnv1a64(bytes.data(), bytes.size())));
  return b;
}

void write_manifest(const RunConfig& c, const std::string& cmd,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, const std::string& dir) {
  ojson m;
  m["command"] = cmd;
  m["seed"] = c.seed;
  m["config"] = dump_config(c);
  ojson in = ojson::object();
  for (const std::string& p : inputs) in[p] = checksum_hex(p);
  m["inputs"] = in;
  ojson out = ojson::object();
  for (const std::string& p : outputs) out[p] = checksum_hex(p);
  m["outputs"] = out;
  write_text(path_join(dir, "manifest_" + cmd + ".json"), m.dump(2) + "\n");
}

ojson vec_json(const nf::Tensor& v) {
  ojson a = ojson::array();
  for (double x : v.data()) a.push_back(x);
  return a;
}

ojson mat_json(const nf::Tensor& m) {
  ojson rows = ojson::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    ojson row = ojson::array();
    for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

struct DataFiles {
  std::string returns, ts, st;
};

DataFiles data_files(const RunConfig& c) {
  return {path_join(c.data_dir, "returns.csv"), path_join(c.data_dir, "features_ts.csv"),
          path_join(c.data_dir, "features_static.csv")};
}

// pin > 0 forces the normalization divisor (used to match a checkpoint)
std::pair<nf::data::ReturnsPanel, nf::data::FeaturePanel> load_data(const RunConfig& c,
                                                                    double pin) {
  const DataFiles f = data_files(c);
  nf::data::LoadSpec spec;
  spec.norm_constant = pin > 0.0 ? pin : c.norm_constant;
  spec.norm_train_end = c.train_end;
  return nf::data::load_panel(f.returns, f.ts, f.st, spec);
}

std::string ckpt_path(const RunConfig& c) {
  return c.checkpoint.empty() ? path_join(c.out_dir, "model.ckpt") : c.checkpoint;
}

nf::data::SplitRanges split_checked(const RunConfig& c, const nf::data::ReturnsPanel& p) {
  if (c.train_end.empty() || c.val_end.empty())
    throw nf::ContractError(
        "this command needs split dates: --split TRAIN_END:VAL_END or a config split block");
  if (c.train_end < p.dates.front() || c.val_end >= p.dates.back())
    throw nf::ContractError("split [" + c.train_end + ", " + c.val_end +
                            "] must lie inside the panel dates [" + p.dates.front() + ", " +
                            p.dates.back() + ")");
  return nf::data::split_ranges(p, {c.train_end, c.val_end});
}

std::size_t date_checked(const nf::data::ReturnsPanel& p, const std::string& d,
                         std::size_t lookback) {
  if (d.empty()) throw nf::ContractError("--date is required");
  if (lookback >= p.days())
    throw nf::ContractError("panel has " + std::to_string(p.days()) +
                            " dates, not enough for a lookback of " + std::to_string(lookback));
  std::size_t t = 0;
  try {
    t = p.date_index(d);
  } catch (const nf::DataError&) {
    throw nf::ContractError("date " + d + " is not a panel date; dates run " + p.dates.front() +
                            " through " + p.dates.back());
  }
  if (t < lookback)
    throw nf::ContractError("date " + d + " lacks lookback warm-up; usable dates run " +
                            p.dates[lookback] + " through " + p.dates.back());
  return t;
}

template <typename F>
void parallel_for(std::size_t n, F&& fn) {
  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min(n, hw);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> g(err_mu);
          if (!err) err = std::current_exception();
          next.store(n);
        }
      }
    });
  for (std::thread& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// ---------------------------------------------------------------- synth

int cmd_synth(const RunConfig& c) {
  nf::synth::TruthConfig tc;
  tc.n = c.synth_n;
  tc.f = c.synth_factors;
  tc.seed = c.seed;
  tc.n_sectors = c.synth_sectors;
  tc.gap_prob = c.synth_gap_prob;
  tc.norm_constant = c.synth_norm;
  const nf::synth::SyntheticTruth truth = nf::synth::make_truth(tc);
  const nf::synth::SyntheticPanel sp = nf::synth::generate(truth, c.synth_days);

  ensure_dir(c.data_dir);
  const DataFiles f = data_files(c);
  nf::data::write_panel(sp.panel, sp.features, f.returns, f.ts, f.st);

  ojson tj;
  tj["seed"] = c.seed;
  tj["n"] = tc.n;
  tj["factors"] = tc.f;
  tj["days"] = c.synth_days;
  tj["sectors"] = tc.n_sectors;
  tj["gap_prob"] = tc.gap_prob;
  tj["norm_constant"] = tc.norm_constant;
  tj["sector"] = truth.sector;
  tj["alpha"] = vec_json(truth.alpha);
  tj["b"] = mat_json(truth.b);
  tj["sigma"] = vec_json(truth.sigma);
  tj["nu"] = vec_json(truth.nu);
  tj["sigma_z"] = vec_json(truth.sigma_z);
  tj["nu_z"] = vec_json(truth.nu_z);
  tj["latent"] = vec_json(truth.latent);
  const std::string tpath = path_join(c.data_dir, "truth.json");
  write_text(tpath, tj.dump(2) + "\n");

  write_manifest(c, "synth", {}, {f.returns, f.ts, f.st, tpath}, c.data_dir);
  std::cout << "wrote " << truth.n() << " tickers x " << c.synth_days << " dates to " << c.data_dir
            << "\n";
  return 0;
}

// ---------------------------------------------------------------- train

int cmd_train(const RunConfig& c) {
  auto [panel, features] = load_data(c, 0.0);
  const nf::data::SplitRanges split = split_checked(c, panel);
  nf::model::ModelConfig mc = c.model;
  mc.seed = c.seed;

  ensure_dir(c.out_dir);
  const std::string log_path = path_join(c.out_dir, "train_log.txt");
  std::ofstream log(log_path);
  if (!log) throw nf::DataError("cannot write " + log_path);
  const nf::ckpt::Checkpoint ck = nf::train::train(mc, panel, features, split, &log);
  log.close();

  const std::string cp = ckpt_path(c);
  ensure_dir(fs::path(cp).parent_path().string());
  nf::ckpt::save(ck, cp);

  const DataFiles f = data_files(c);
  write_manifest(c, "train", {f.returns, f.ts, f.st}, {cp, log_path}, c.out_dir);
  std::cout << "checkpoint " << cp << "  norm_constant " << fmt17(ck.norm_constant) << "\n";
  return 0;
}

// ---------------------------------------------------------------- eval

// One scored day: the forecast is built from the window ending at t and is
// compared against the realized cross-section at t + 1.
struct EvalDay {
  std::size_t t = 0;
  std::vector<std::size_t> stocks;
  nf::MomentForecast fc;
  nf::Tensor realized;
  double nll_joint = kNan;
  double nll_ind = kNan;
  std::function<nf::ev::DayMarginals()> marginals;
};

struct Block {
  std::string name;
  std::size_t lo = 0, hi = 0;  // target day range [lo, hi)
};

std::vector<Block> blocks_of(const nf::data::SplitRanges& s, std::size_t days) {
  return {{"train", 0, s.train_end}, {"val", s.train_end, s.val_end}, {"test", s.val_end, days}};
}

std::vector<std::size_t> info_dates(const Block& b, std::size_t min_info, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t u = std::max(b.lo, min_info + 1); u < b.hi; u += stride) out.push_back(u - 1);
  return out;
}

std::vector<EvalDay> keep_nonempty(std::vector<EvalDay> days) {
  std::vector<EvalDay> kept;
  kept.reserve(days.size());
  for (EvalDay& d : days)
    if (!d.stocks.empty()) kept.push_back(std::move(d));
  return kept;
}

std::vector<EvalDay> neural_days(const nf::ckpt::Checkpoint& ck, const RunConfig& c,
                                 const nf::data::ReturnsPanel& panel,
                                 const nf::data::FeaturePanel& features,
                                 const std::vector<std::size_t>& infos, bool with_nll) {
  std::vector<EvalDay> days(infos.size());
  parallel_for(infos.size(), [&](std::size_t j) {
    const std::size_t t = infos[j];
    EvalDay& d = days[j];
    d.t = t;
    d.stocks = nf::data::members_at_both(panel, t);
    if (d.stocks.empty()) return;
    const nf::data::DayWindows w =
        nf::data::make_windows(panel, features, t, ck.config.lookback, &d.stocks);
    const nf::fm::FactorParams params = nf::model::day_factor_params(ck.polyak, ck.config, w);
    d.fc = nf::fm::moments(params);
    d.realized = nf::data::gather_returns(panel, t + 1, d.stocks);
    if (with_nll) {
      nf::Rng nll_rng = nf::Rng::substream(c.seed, "eval.nll", t);
      const nf::model::DayNll nll =
          nf::model::nll_metrics_day(params, d.realized, nll_rng, c.joint_draws, c.indep_draws);
      d.nll_joint = nll.joint;
      d.nll_ind = nll.independent;
    }
    const std::vector<std::size_t> ids = d.stocks;
    const std::uint64_t seed = c.seed;
    const std::size_t draws = c.cdf_draws;
    d.marginals = [params, ids, seed, t, draws]() {
      nf::Rng r = nf::Rng::substream(seed, "eval.cal", t);
      return nf::ev::factor_day_marginals(params, ids, r, draws);
    };
  });
  return keep_nonempty(std::move(days));
}

std::vector<EvalDay> ppca_days(const RunConfig& c, const nf::data::ReturnsPanel& panel,
                               const std::vector<std::size_t>& infos) {
  std::vector<EvalDay> days(infos.size());
  parallel_for(infos.size(), [&](std::size_t j) {
    const std::size_t t = infos[j];
    EvalDay& d = days[j];
    d.t = t;
    const nf::bl::PpcaModel m = nf::bl::ppca_fit(panel, t, c.ppca_window, c.ppca_factors);
    std::vector<std::size_t> keep_local;
    for (std::size_t i = 0; i < m.stocks.size(); ++i)
      if (panel.is_member(t + 1, m.stocks[i])) {
        keep_local.push_back(i);
        d.stocks.push_back(m.stocks[i]);
      }
    if (d.stocks.empty()) return;
    const nf::fm::FactorParams params = m.factor_params().subset(keep_local);
    d.fc = nf::fm::moments(params);
    d.realized = nf::data::gather_returns(panel, t + 1, d.stocks);
    nf::Rng nll_rng = nf::Rng::substream(c.seed, "eval.nll", t);
    const nf::model::DayNll nll =
        nf::model::nll_metrics_day(params, d.realized, nll_rng, c.joint_draws, c.indep_draws);
    d.nll_joint = nll.joint;
    d.nll_ind = nll.independent;
    const std::vector<std::size_t> ids = d.stocks;
    const std::uint64_t seed = c.seed;
    const std::size_t draws = c.cdf_draws;
    d.marginals = [params, ids, seed, t, draws]() {
      nf::Rng r = nf::Rng::substream(seed, "eval.cal", t);
      return nf::ev::factor_day_marginals(params, ids, r, draws);
    };
  });
  return keep_nonempty(std::move(days));
}

struct GarchBank {
  std::vector<std::size_t> stocks;
  std::vector<nf::bl::GarchModel> models;
  std::vector<std::vector<std::size_t>> mdays;  // member day indices, whole panel, per column
  std::vector<std::vector<double>> mrets;
  ojson skipped = ojson::array();
  ojson failed = ojson::array();
};

GarchBank garch_bank(const RunConfig& c, const nf::data::ReturnsPanel& panel,
                     std::size_t train_hi) {
  GarchBank bank;
  const std::size_t n = panel.width();
  bank.mdays.resize(n);
  bank.mrets.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < panel.days(); ++t)
      if (panel.is_member(t, i)) {
        bank.mdays[i].push_back(t);
        bank.mrets[i].push_back(panel.returns(t, i));
      }

  const std::size_t min_obs = std::max<std::size_t>(250, c.garch_min_obs);
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < n; ++i) {
    const auto cut = std::lower_bound(bank.mdays[i].begin(), bank.mdays[i].end(), train_hi);
    const std::size_t obs = static_cast<std::size_t>(cut - bank.mdays[i].begin());
    if (obs >= min_obs)
      cand.push_back(i);
    else
      bank.skipped.push_back(ojson{{"ticker", panel.tickers[i]},
                                   {"train_obs", obs},
                                   {"needed", min_obs}});
  }

  std::vector<std::optional<nf::bl::GarchModel>> fits(cand.size());
  std::vector<std::string> errors(cand.size());
  parallel_for(cand.size(), [&](std::size_t j) {
    const std::size_t i = cand[j];
    const auto cut = std::lower_bound(bank.mdays[i].begin(), bank.mdays[i].end(), train_hi);
    const std::size_t obs = static_cast<std::size_t>(cut - bank.mdays[i].begin());
    const std::vector<double> series(bank.mrets[i].begin(), bank.mrets[i].begin() + obs);
    const std::uint64_t seed = c.seed ^ nf::fnv1a64("garch.fit." + panel.tickers[i]);
    try {
      fits[j] = nf::bl::garch_fit(series, seed);
    } catch (const nf::bl::GarchFitError& e) {
      errors[j] = e.what();
    }
  });
  for (std::size_t j = 0; j < cand.size(); ++j) {
    if (fits[j]) {
      bank.stocks.push_back(cand[j]);
      bank.models.push_back(*fits[j]);
    } else {
      bank.failed.push_back(ojson{{"ticker", panel.tickers[cand[j]]}, {"error", errors[j]}});
    }
  }
  return bank;
}

std::vector<EvalDay> garch_days(const RunConfig& c, const nf::data::ReturnsPanel& panel,
                                const GarchBank& bank, const std::vector<std::size_t>& infos) {
  // a stock is scored on day t+1 when it has at least this much history
  constexpr std::size_t kMinHistory = 20;
  std::vector<EvalDay> days(infos.size());
  parallel_for(infos.size(), [&](std::size_t j) {
    const std::size_t t = infos[j];
    EvalDay& d = days[j];
    d.t = t;
    std::vector<nf::bl::GarchForecast> fcs;
    for (std::size_t k = 0; k < bank.stocks.size(); ++k) {
      const std::size_t i = bank.stocks[k];
      if (!panel.is_member(t + 1, i)) continue;
      const auto cut = std::upper_bound(bank.mdays[i].begin(), bank.mdays[i].end(), t);
      const std::size_t len = static_cast<std::size_t>(cut - bank.mdays[i].begin());
      if (len < kMinHistory) continue;
      const std::vector<double> hist(bank.mrets[i].begin(), bank.mrets[i].begin() + len);
      fcs.push_back(nf::bl::garch_forecast(bank.models[k], hist));
      d.stocks.push_back(i);
    }
    const std::size_t m = d.stocks.size();
    if (m == 0) return;
    d.realized = nf::data::gather_returns(panel, t + 1, d.stocks);
    d.fc.mean = nf::Tensor({m});
    d.fc.cov = nf::Tensor({m, m});
    double nll = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      d.fc.cov(k, k) = fcs[k].sigma * fcs[k].sigma;
      nll -= fcs[k].logpdf(d.realized(k));
    }
    d.nll_ind = nll / static_cast<double>(m);
    const std::vector<std::size_t> ids = d.stocks;
    d.marginals = [fcs, ids]() {
      nf::ev::DayMarginals dm;
      dm.stocks = ids;
      for (const nf::bl::GarchForecast& gf : fcs)
        dm.cdf.push_back([gf](double x) { return gf.cdf(x); });
      auto shared = std::make_shared<std::vector<nf::bl::GarchForecast>>(fcs);
      dm.sample = [shared](std::size_t n_draws, nf::Rng& rng) {
        nf::Tensor out({n_draws, shared->size()});
        for (std::size_t r = 0; r < n_draws; ++r)
          for (std::size_t s = 0; s < shared->size(); ++s) out(r, s) = (*shared)[s].sample(rng);
        return out;
      };
      return dm;
    };
  });
  return keep_nonempty(std::move(days));
}

std::vector<std::size_t> common_stocks(const std::vector<EvalDay>& days) {
  std::vector<std::size_t> common = days.front().stocks;
  for (const EvalDay& d : days) {
    std::vector<std::size_t> next;
    std::set_intersection(common.begin(), common.end(), d.stocks.begin(), d.stocks.end(),
                          std::back_inserter(next));
    common = std::move(next);
    if (common.empty()) break;
  }
  return common;
}

ojson block_report(const RunConfig& c, const nf::data::ReturnsPanel& panel,
                   const std::vector<EvalDay>& days, const Block& b, std::size_t block_id,
                   const std::string& prefix, std::vector<std::string>* outputs) {
  ojson out;
  out["days"] = days.size();
  out["member_days"] = nullptr;
  out["nll_joint"] = nullptr;
  out["nll_ind"] = nullptr;
  out["cal_universe"] = nullptr;
  out["cal_portfolio"] = nullptr;
  out["cov_subset"] = nullptr;
  out["cov_days"] = nullptr;
  out["cov_mse"] = nullptr;
  out["box_m"] = nullptr;
  out["sharpe"] = nullptr;
  out["turnover"] = nullptr;
  if (days.empty()) return out;

  double sj = 0.0, si = 0.0;
  std::size_t cj = 0, ci = 0;
  for (const EvalDay& d : days) {
    if (std::isfinite(d.nll_joint)) {
      sj += d.nll_joint;
      ++cj;
    }
    if (std::isfinite(d.nll_ind)) {
      si += d.nll_ind;
      ++ci;
    }
  }
  if (cj) out["nll_joint"] = sj / static_cast<double>(cj);
  if (ci) out["nll_ind"] = si / static_cast<double>(ci);

  std::map<std::size_t, const EvalDay*> by_target;
  std::vector<std::size_t> targets;
  targets.reserve(days.size());
  for (const EvalDay& d : days) {
    by_target[d.t + 1] = &d;
    targets.push_back(d.t + 1);
  }
  nf::ev::DayMarginalsFn fn = [&](std::size_t u) { return by_target.at(u)->marginals(); };
  nf::Rng port_rng = nf::Rng::substream(c.seed, "eval.port", block_id);
  const nf::ev::UniverseCal cal =
      nf::ev::universe_calibration(panel, targets, fn, port_rng, c.portfolio_samples);
  out["member_days"] = cal.member_days;
  out["cal_universe"] = cal.universe;
  out["cal_portfolio"] = cal.portfolio;

  const std::vector<std::size_t> common = common_stocks(days);
  if (!common.empty() && days.size() > common.size()) {
    std::vector<nf::MomentForecast> fcs;
    std::vector<nf::Tensor> rs;
    fcs.reserve(days.size());
    rs.reserve(days.size());
    const std::size_t s = common.size();
    for (const EvalDay& d : days) {
      std::vector<std::size_t> loc(s);
      for (std::size_t k = 0, p = 0; k < s; ++k) {
        while (d.stocks[p] != common[k]) ++p;
        loc[k] = p;
      }
      nf::MomentForecast sub;
      sub.mean = nf::Tensor({s});
      sub.cov = nf::Tensor({s, s});
      nf::Tensor r({s});
      for (std::size_t k = 0; k < s; ++k) {
        sub.mean(k) = d.fc.mean(loc[k]);
        r(k) = d.realized(loc[k]);
        for (std::size_t l = 0; l < s; ++l) sub.cov(k, l) = d.fc.cov(loc[k], loc[l]);
      }
      fcs.push_back(std::move(sub));
      rs.push_back(std::move(r));
    }
    const nf::ev::CovarianceReport cr = nf::ev::covariance_diagnostics(fcs, rs);
    out["cov_subset"] = cr.s;
    out["cov_days"] = cr.n;
    out["cov_mse"] = cr.mse;
    out["box_m"] = cr.box_m;
  }

  std::vector<nf::ev::BacktestDay> bdays;
  bdays.reserve(days.size());
  for (const EvalDay& d : days) bdays.push_back({d.stocks, d.fc, d.realized});
  const std::array<std::pair<const char*, nf::ev::PortfolioMode>, 2> modes{
      {{"long_only", nf::ev::PortfolioMode::kLongOnly},
       {"long_short", nf::ev::PortfolioMode::kLongShort}}};
  const std::array<std::pair<const char*, bool>, 2> levs{{{"unit", true}, {"free", false}}};
  const std::array<std::pair<const char*, double>, 3> lams{{{"0.5", 0.5}, {"1", 1.0}, {"2", 2.0}}};
  nf::ev::BacktestReport results[2][2][3];
  std::vector<std::array<std::size_t, 3>> combos;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t l = 0; l < 2; ++l)
      for (std::size_t g = 0; g < 3; ++g) combos.push_back({a, l, g});
  parallel_for(combos.size(), [&](std::size_t k) {
    const auto [a, l, g] = combos[k];
    nf::ev::PortfolioSpec spec;
    spec.mode = modes[a].second;
    spec.unit_leverage = levs[l].second;
    spec.lambda = lams[g].second;
    spec.max_iter = c.max_iter;
    results[a][l][g] = nf::ev::backtest(bdays, spec, panel.norm_constant);
  });
  ojson sharpe, turnover;
  for (std::size_t a = 0; a < 2; ++a) {
    ojson sl, tl;
    for (std::size_t l = 0; l < 2; ++l) {
      ojson sg, tg;
      for (std::size_t g = 0; g < 3; ++g) {
        sg[lams[g].first] = results[a][l][g].sharpe;
        tg[lams[g].first] = results[a][l][g].turnover;
      }
      sl[levs[l].first] = std::move(sg);
      tl[levs[l].first] = std::move(tg);
    }
    sharpe[modes[a].first] = std::move(sl);
    turnover[modes[a].first] = std::move(tl);
  }
  out["sharpe"] = std::move(sharpe);
  out["turnover"] = std::move(turnover);

  std::ostringstream cal_csv;
  cal_csv << "p,p_hat_universe,p_hat_portfolio\n";
  for (std::size_t j = 0; j < cal.universe_report.m; ++j)
    cal_csv << fmt17(cal.universe_report.p[j]) << "," << fmt17(cal.universe_report.p_hat[j]) << ","
            << fmt17(cal.portfolio_report.p_hat[j]) << "\n";
  const std::string cal_path = path_join(c.out_dir, prefix + "calibration_" + b.name + ".csv");
  write_text(cal_path, cal_csv.str());
  outputs->push_back(cal_path);

  std::ostringstream cum_csv;
  cum_csv << "date,long_only_unit,long_only_free,long_short_unit,long_short_free\n";
  for (std::size_t j = 0; j < days.size(); ++j) {
    cum_csv << panel.dates[days[j].t + 1];
    for (std::size_t a = 0; a < 2; ++a)
      for (std::size_t l = 0; l < 2; ++l) cum_csv << "," << fmt17(results[a][l][1].cumulative[j]);
    cum_csv << "\n";
  }
  const std::string cum_path = path_join(c.out_dir, prefix + "cumulative_" + b.name + ".csv");
  write_text(cum_path, cum_csv.str());
  outputs->push_back(cum_path);
  return out;
}

void print_block(const std::string& name, const ojson& blk) {
  auto num = [&](const char* k) -> std::string {
    if (!blk.contains(k) || blk.at(k).is_null()) return "n/a";
    char b[32];
    std::snprintf(b, sizeof(b), "%.6g", blk.at(k).get<double>());
    return b;
  };
  std::cout << "  " << name << ": days " << blk.at("days").get<std::size_t>() << "  nll_joint "
            << num("nll_joint") << "  nll_ind " << num("nll_ind") << "  cal_universe "
            << num("cal_universe") << "  cov_mse " << num("cov_mse") << "\n";
}

int cmd_eval(const RunConfig& c) {
  const nf::ckpt::Checkpoint ck = nf::ckpt::load(ckpt_path(c));
  auto [panel, features] = load_data(c, ck.norm_constant);
  const nf::data::SplitRanges split = split_checked(c, panel);
  ensure_dir(c.out_dir);

  const std::vector<Block> blocks = blocks_of(split, panel.days());
  ojson metrics;
  std::vector<std::string> outputs;
  for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
    const std::vector<std::size_t> infos = info_dates(blocks[bi], ck.config.lookback, c.stride);
    const std::vector<EvalDay> days = neural_days(ck, c, panel, features, infos, true);
    metrics[blocks[bi].name] = block_report(c, panel, days, blocks[bi], bi, "", &outputs);
    print_block(blocks[bi].name, metrics[blocks[bi].name]);
  }
  const std::string mpath = path_join(c.out_dir, "metrics.json");
  write_text(mpath, metrics.dump(2) + "\n");
  outputs.push_back(mpath);
  const DataFiles f = data_files(c);
  write_manifest(c, "eval", {f.returns, f.ts, f.st, ckpt_path(c)}, outputs, c.out_dir);
  std::cout << "metrics " << mpath << "\n";
  return 0;
}

// ---------------------------------------------------------------- forecast / sample / betas

int cmd_forecast(const RunConfig& c) {
  const nf::ckpt::Checkpoint ck = nf::ckpt::load(ckpt_path(c));
  auto [panel, features] = load_data(c, ck.norm_constant);
  const std::size_t t = date_checked(panel, c.date, ck.config.lookback);
  const std::vector<std::size_t> stocks = nf::data::members_at(panel, t);
  if (stocks.empty()) throw nf::DataError("no member stocks on " + c.date);
  const nf::data::DayWindows w =
      nf::data::make_windows(panel, features, t, ck.config.lookback, &stocks);
  const nf::MomentForecast fc = nf::model::forecast_day(ck.polyak, ck.config, w);

  // raw return units, same scale as the returns CSV
  const double cn = panel.norm_constant;
  ojson j;
  j["date"] = c.date;
  j["horizon"] = "next trading day";
  j["units"] = "raw returns";
  ojson tickers = ojson::array();
  for (std::size_t i : stocks) tickers.push_back(panel.tickers[i]);
  j["tickers"] = std::move(tickers);
  ojson mean = ojson::array();
  for (std::size_t i = 0; i < stocks.size(); ++i) mean.push_back(fc.mean(i) * cn);
  j["mean"] = std::move(mean);
  ojson cov = ojson::array();
  for (std::size_t r = 0; r < stocks.size(); ++r) {
    ojson row = ojson::array();
    for (std::size_t s = 0; s < stocks.size(); ++s) row.push_back(fc.cov(r, s) * cn * cn);
    cov.push_back(std::move(row));
  }
  j["cov"] = std::move(cov);

  ensure_dir(c.out_dir);
  const std::string path = path_join(c.out_dir, "forecast_" + c.date + ".json");
  write_text(path, j.dump(2) + "\n");
  const DataFiles f = data_files(c);
  write_manifest(c, "forecast", {f.returns, f.ts, f.st, ckpt_path(c)}, {path}, c.out_dir);
  std::cout << "forecast " << path << "\n";
  return 0;
}

int cmd_sample(const RunConfig& c) {
  const nf::ckpt::Checkpoint ck = nf::ckpt::load(ckpt_path(c));
  auto [panel, features] = load_data(c, ck.norm_constant);
  const std::size_t t = date_checked(panel, c.date, ck.config.lookback);
  const std::vector<std::size_t> stocks = nf::data::members_at(panel, t);
  if (stocks.empty()) throw nf::DataError("no member stocks on " + c.date);

  std::ostringstream csv;
  for (std::size_t k = 0; k < stocks.size(); ++k)
    csv << (k ? "," : "") << panel.tickers[stocks[k]];
  csv << "\n";
  if (c.n_samples > 0) {
    const nf::data::DayWindows w =
        nf::data::make_windows(panel, features, t, ck.config.lookback, &stocks);
    nf::Rng rng = nf::Rng::substream(c.seed, "sample", t);
    const nf::Tensor draws = nf::model::sample_day(ck.polyak, ck.config, w, c.n_samples, rng);
    const double cn = panel.norm_constant;
    for (std::size_t r = 0; r < c.n_samples; ++r) {
      for (std::size_t s = 0; s < stocks.size(); ++s)
        csv << (s ? "," : "") << fmt17(draws(r, s) * cn);
      csv << "\n";
    }
  }
  ensure_dir(c.out_dir);
  const std::string path = path_join(c.out_dir, "samples_" + c.date + ".csv");
  write_text(path, csv.str());
  const DataFiles f = data_files(c);
  write_manifest(c, "sample", {f.returns, f.ts, f.st, ckpt_path(c)}, {path}, c.out_dir);
  std::cout << "wrote " << c.n_samples << " samples to " << path << "\n";
  return 0;
}

int cmd_export_betas(const RunConfig& c) {
  const nf::ckpt::Checkpoint ck = nf::ckpt::load(ckpt_path(c));
  auto [panel, features] = load_data(c, ck.norm_constant);
  const std::size_t t = date_checked(panel, c.date, ck.config.lookback);
  const std::vector<std::size_t> stocks = nf::data::members_at(panel, t);
  if (stocks.empty()) throw nf::DataError("no member stocks on " + c.date);
  const nf::data::DayWindows w =
      nf::data::make_windows(panel, features, t, ck.config.lookback, &stocks);
  const nf::fm::FactorParams p = nf::model::day_factor_params(ck.polyak, ck.config, w);

  std::ostringstream csv;
  csv << "ticker,alpha";
  for (std::size_t q = 0; q < p.f(); ++q) csv << ",beta" << q + 1;
  csv << ",sigma,nu\n";
  for (std::size_t i = 0; i < stocks.size(); ++i) {
    csv << panel.tickers[stocks[i]] << "," << fmt17(p.alpha(i));
    for (std::size_t q = 0; q < p.f(); ++q) csv << "," << fmt17(p.b(i, q));
    csv << "," << fmt17(p.sigma(i)) << "," << fmt17(p.nu(i)) << "\n";
  }
  ensure_dir(c.out_dir);
  const std::string path = path_join(c.out_dir, "betas_" + c.date + ".csv");
  write_text(path, csv.str());
  const DataFiles f = data_files(c);
  write_manifest(c, "export-betas", {f.returns, f.ts, f.st, ckpt_path(c)}, {path}, c.out_dir);
  std::cout << "betas " << path << "\n";
  return 0;
}

// ---------------------------------------------------------------- portfolio

nf::ev::PortfolioSpec parse_portfolio_spec(const RunConfig& c) {
  nf::ev::PortfolioSpec s;
  if (c.mode == "long_only")
    s.mode = nf::ev::PortfolioMode::kLongOnly;
  else if (c.mode == "long_short")
    s.mode = nf::ev::PortfolioMode::kLongShort;
  else
    throw nf::ContractError("mode must be long_only or long_short, got \"" + c.mode + "\"");
  if (c.leverage == "unit")
    s.unit_leverage = true;
  else if (c.leverage == "free")
    s.unit_leverage = false;
  else
    throw nf::ContractError("leverage must be unit or free, got \"" + c.leverage + "\"");
  if (!(c.lambda > 0.0)) throw nf::ContractError("lambda must be positive");
  s.lambda = c.lambda;
  s.max_iter = c.max_iter;
  return s;
}

int cmd_portfolio(const RunConfig& c) {
  const nf::ev::PortfolioSpec spec = parse_portfolio_spec(c);
  const nf::ckpt::Checkpoint ck = nf::ckpt::load(ckpt_path(c));
  auto [panel, features] = load_data(c, ck.norm_constant);
  const nf::data::SplitRanges split = split_checked(c, panel);

  const std::vector<Block> blocks = blocks_of(split, panel.days());
  const Block* blk = nullptr;
  for (const Block& b : blocks)
    if (b.name == c.port_split) blk = &b;
  if (!blk)
    throw nf::ContractError("portfolio.split must be train, val or test, got \"" + c.port_split +
                            "\"");
  const std::vector<std::size_t> infos = info_dates(*blk, ck.config.lookback, c.stride);
  const std::vector<EvalDay> days = neural_days(ck, c, panel, features, infos, false);
  if (days.empty()) throw nf::DataError("no evaluable days in the " + blk->name + " split");

  std::vector<nf::ev::BacktestDay> bdays;
  bdays.reserve(days.size());
  for (const EvalDay& d : days) bdays.push_back({d.stocks, d.fc, d.realized});
  const nf::ev::BacktestReport rep = nf::ev::backtest(bdays, spec, panel.norm_constant);

  ensure_dir(c.out_dir);
  ojson j;
  j["split"] = blk->name;
  j["mode"] = c.mode;
  j["leverage"] = c.leverage;
  j["lambda"] = c.lambda;
  j["days"] = days.size();
  j["sharpe"] = rep.sharpe;
  j["turnover"] = rep.turnover;
  j["cumulative_return"] = rep.cumulative.back();
  const std::string jpath = path_join(c.out_dir, "portfolio.json");
  write_text(jpath, j.dump(2) + "\n");

  std::ostringstream csv;
  csv << "date,return,cumulative\n";
  for (std::size_t k = 0; k < days.size(); ++k)
    csv << panel.dates[days[k].t + 1] << "," << fmt17(rep.returns[k]) << ","
        << fmt17(rep.cumulative[k]) << "\n";
  const std::string cpath = path_join(c.out_dir, "portfolio_returns.csv");
  write_text(cpath, csv.str());

  const DataFiles f = data_files(c);
  write_manifest(c, "portfolio", {f.returns, f.ts, f.st, ckpt_path(c)}, {jpath, cpath}, c.out_dir);
  std::cout << blk->name << " " << c.mode << "/" << c.leverage << " lambda " << c.lambda
            << ": sharpe " << fmt17(rep.sharpe) << "  turnover " << fmt17(rep.turnover) << "\n";
  return 0;
}

// ---------------------------------------------------------------- baselines

int cmd_baseline(const RunConfig& c, const std::string& kind) {
  if (kind != "ppca" && kind != "garch")
    throw nf::ContractError("baseline kind must be ppca or garch, got \"" + kind + "\"");
  auto [panel, features] = load_data(c, 0.0);
  const nf::data::SplitRanges split = split_checked(c, panel);
  ensure_dir(c.out_dir);

  const std::vector<Block> blocks = blocks_of(split, panel.days());
  const std::string prefix = "baseline_" + kind + "_";
  ojson metrics;
  ojson model_json;
  std::vector<std::string> outputs;

  if (kind == "ppca") {
    nf::require(c.ppca_window >= 2 && c.ppca_window > c.ppca_factors,
                "ppca window must exceed the factor count");
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const std::vector<std::size_t> infos =
          info_dates(blocks[bi], c.ppca_window - 1, c.stride);
      const std::vector<EvalDay> days = ppca_days(c, panel, infos);
      metrics[blocks[bi].name] = block_report(c, panel, days, blocks[bi], bi, prefix, &outputs);
      print_block(blocks[bi].name, metrics[blocks[bi].name]);
    }
    // the model deployed over the test split, fitted at its first info date
    const std::size_t t_deploy = split.val_end - 1;
    if (t_deploy + 1 >= c.ppca_window) {
      const nf::bl::PpcaModel m = nf::bl::ppca_fit(panel, t_deploy, c.ppca_window, c.ppca_factors);
      model_json["fit_date"] = panel.dates[t_deploy];
      model_json["factors"] = m.f_ppca;
      model_json["window"] = m.window;
      model_json["sigma2_bar"] = m.sigma2_bar;
      ojson tickers = ojson::array();
      for (std::size_t i : m.stocks) tickers.push_back(panel.tickers[i]);
      model_json["tickers"] = std::move(tickers);
      model_json["mean"] = vec_json(m.mean);
      model_json["loadings"] = mat_json(m.loadings);
      model_json["idio_sigma"] = vec_json(m.idio_sigma);
      model_json["idio_nu"] = vec_json(m.idio_nu);
    }
  } else {
    const GarchBank bank = garch_bank(c, panel, split.train_end);
    if (bank.stocks.empty())
      throw nf::DataError("no stock fitted: every column lacked observations or failed to fit");
    for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
      const std::vector<std::size_t> infos = info_dates(blocks[bi], 0, c.stride);
      const std::vector<EvalDay> days = garch_days(c, panel, bank, infos);
      metrics[blocks[bi].name] = block_report(c, panel, days, blocks[bi], bi, prefix, &outputs);
      print_block(blocks[bi].name, metrics[blocks[bi].name]);
    }
    ojson fitted = ojson::array();
    for (std::size_t k = 0; k < bank.stocks.size(); ++k) {
      const nf::bl::GarchModel& m = bank.models[k];
      fitted.push_back(ojson{{"ticker", panel.tickers[bank.stocks[k]]},
                             {"omega", m.omega},
                             {"a", m.a},
                             {"b", m.b},
                             {"lambda", m.lambda},
                             {"nu", m.nu},
                             {"loglik", m.loglik},
                             {"n_obs", m.n_obs}});
    }
    model_json["fitted"] = std::move(fitted);
    model_json["skipped"] = bank.skipped;
    model_json["failed"] = bank.failed;
  }

  const std::string mpath = path_join(c.out_dir, prefix + "metrics.json");
  write_text(mpath, metrics.dump(2) + "\n");
  outputs.push_back(mpath);
  const std::string modpath = path_join(c.out_dir, prefix + "model.json");
  write_text(modpath, model_json.dump(2) + "\n");
  outputs.push_back(modpath);
  const DataFiles f = data_files(c);
  write_manifest(c, "baseline_" + kind, {f.returns, f.ts, f.st}, outputs, c.out_dir);
  std::cout << "metrics " << mpath << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"neural factor model toolkit"};
  app.require_subcommand(1);
  Flags fl;
  std::string baseline_kind;

  auto add_common = [&](CLI::App* s, bool with_split) {
    s->add_option("--config", fl.config, "JSON config file; flags override it");
    s->add_option("--data-dir", fl.data_dir, "directory with returns.csv and the feature files");
    s->add_option("--out", fl.out, "output directory");
    s->add_option("--seed", fl.seed, "master seed; all randomness derives from it");
    if (with_split) s->add_option("--split", fl.split, "TRAIN_END:VAL_END date pair");
  };

  CLI::App* s_synth = app.add_subcommand("synth", "generate a synthetic market");
  add_common(s_synth, false);
  s_synth->add_option("--n", fl.n, "stock count");
  s_synth->add_option("--factors", fl.factors, "true factor count");

  CLI::App* s_train = app.add_subcommand("train", "train the factor model");
  add_common(s_train, true);
  s_train->add_option("--arch", fl.arch, "attention or recurrent");
  s_train->add_option("--factors", fl.factors, "model factor count");
  s_train->add_option("--lookback", fl.lookback, "window length");
  s_train->add_option("--steps", fl.steps, "gradient updates");
  s_train->add_option("--k", fl.k, "posterior draws per update");

  CLI::App* s_eval = app.add_subcommand("eval", "score train, val and test splits");
  add_common(s_eval, true);

  CLI::App* s_fc = app.add_subcommand("forecast", "one-day mean and covariance");
  add_common(s_fc, false);
  s_fc->add_option("--date", fl.date, "information date; the forecast targets the next day");

  CLI::App* s_sample = app.add_subcommand("sample", "draw next-day return samples");
  add_common(s_sample, false);
  s_sample->add_option("--date", fl.date, "information date");
  s_sample->add_option("--n", fl.n, "sample count");

  CLI::App* s_port = app.add_subcommand("portfolio", "mean variance backtest on one split");
  add_common(s_port, true);
  s_port->add_option("--mode", fl.mode, "long_only or long_short");
  s_port->add_option("--leverage", fl.leverage, "unit or free");
  s_port->add_option("--lambda", fl.lambda, "risk aversion");

  CLI::App* s_base = app.add_subcommand("baseline", "fit and score a baseline model");
  s_base->add_option("kind", baseline_kind, "ppca or garch")->required();
  add_common(s_base, true);
  s_base->add_option("--factors", fl.factors, "ppca factor count");
  s_base->add_option("--lookback", fl.lookback, "ppca window length");

  CLI::App* s_beta = app.add_subcommand("export-betas", "per-stock embedding parameters as CSV");
  add_common(s_beta, false);
  s_beta->add_option("--date", fl.date, "information date");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    Cmd cmd = Cmd::kSynth;
    if (name == "train") cmd = Cmd::kTrain;
    if (name == "eval") cmd = Cmd::kEval;
    if (name == "forecast") cmd = Cmd::kForecast;
    if (name == "sample") cmd = Cmd::kSample;
    if (name == "portfolio") cmd = Cmd::kPortfolio;
    if (name == "baseline") cmd = Cmd::kBaseline;
    if (name == "export-betas") cmd = Cmd::kExportBetas;
    const RunConfig cfg = resolve(fl, cmd, baseline_kind);
    switch (cmd) {
      case Cmd::kSynth: return cmd_synth(cfg);
      case Cmd::kTrain: return cmd_train(cfg);
      case Cmd::kEval: return cmd_eval(cfg);
      case Cmd::kForecast: return cmd_forecast(cfg);
      case Cmd::kSample: return cmd_sample(cfg);
      case Cmd::kPortfolio: return cmd_portfolio(cfg);
      case Cmd::kBaseline: return cmd_baseline(cfg, baseline_kind);
      case Cmd::kExportBetas: return cmd_export_betas(cfg);
    }
    return 0;
  } catch (const nf::ContractError& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 2;
  } catch (const nf::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const nf::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::invalid_argument& e) {
    std::cerr << "argument error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
}
