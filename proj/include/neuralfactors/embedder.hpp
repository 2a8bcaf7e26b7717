#pragma once

#include <atomic>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "neuralfactors/panel.hpp"
#include "neuralfactors/tape.hpp"

// The per-stock network: window sequence -> (alpha, beta, sigma, nu). One set
// of weights serves every stock; the whole cross-section runs through shared
// (N*seq_len, ...) matrices so each layer is a single matmul.
namespace nf::model {

enum class Arch { attention, recurrent };

struct ModelConfig {
  std::size_t f = 64;
  std::size_t lookback = 256;
  std::size_t hidden = 256;
  double dropout = 0.25;
  Arch arch = Arch::attention;
  std::size_t seq_layers = 2;
  std::size_t heads = 4;
  std::size_t k_iwae = 20;
  double lr = 1e-4;
  double weight_decay = 1e-6;
  std::size_t steps = 100000;
  std::size_t polyak_start = 0;  // 0 picks steps/2
  std::size_t val_every = 1000;
  std::uint64_t seed = 1;
  bool matched = true;  // moment-matched variances in Sigma_x / Sigma_z

  // input geometry, filled from the data before building weights
  std::size_t channels = 0;   // window channels (return, ts..., flag)
  std::size_t d_static = 0;

  std::size_t seq_len() const { return lookback + 1; }
  std::size_t effective_polyak_start() const { return polyak_start ? polyak_start : steps / 2; }

  void validate() const {
    require(f >= 1, "need at least one factor");
    require(k_iwae >= 1, "need at least one posterior draw");
    require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
    require(hidden >= 2, "hidden width too small");
    require(seq_layers >= 1, "need at least one sequence layer");
    require(channels >= 2, "windows carry at least return and flag channels");
    if (arch == Arch::attention)
      require(hidden % heads == 0, "hidden must divide evenly into heads");
    require(steps == 0 || effective_polyak_start() < steps,
            "polyak_start must precede the end of training");
  }
};

// Ordered named parameter store. Order is fixed by construction so optimizer
// state and checkpoints align by position as well as by name.
struct Weights {
  std::vector<std::string> names;
  std::vector<Tensor> values;
  std::unordered_map<std::string, std::size_t> index;

  void add(const std::string& name, Tensor v) {
    require(index.find(name) == index.end(), "duplicate parameter " + name);
    index.emplace(name, names.size());
    names.push_back(name);
    values.push_back(std::move(v));
  }
  const Tensor& get(const std::string& name) const {
    auto it = index.find(name);
    require(it != index.end(), "unknown parameter " + name);
    return values[it->second];
  }
  Tensor& mut(const std::string& name) {
    auto it = index.find(name);
    require(it != index.end(), "unknown parameter " + name);
    return values[it->second];
  }
  std::size_t count() const { return names.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const Tensor& v : values) n += v.numel();
    return n;
  }
};

namespace detail {

inline Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor w(std::move(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (double& v : w.data()) v = bound * (2.0 * rng.uniform() - 1.0);
  return w;
}

inline Tensor repeat_all(const Tensor& block, std::size_t n, Shape out_shape) {
  Tensor out(std::move(out_shape));
  require(out.numel() == block.numel() * n, "repeat_all shape mismatch");
  for (std::size_t r = 0; r < n; ++r)
    std::copy(block.data().begin(), block.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(r * block.numel()));
  return out;
}

inline Tensor sinusoidal_pe(std::size_t len, std::size_t width) {
  Tensor pe({len, width});
  for (std::size_t u = 0; u < len; ++u)
    for (std::size_t j = 0; j < width; ++j) {
      const double rate = std::pow(10000.0, -2.0 * static_cast<double>(j / 2) /
                                                 static_cast<double>(width));
      pe(u, j) = (j % 2 == 0) ? std::sin(static_cast<double>(u) * rate)
                              : std::cos(static_cast<double>(u) * rate);
    }
  return pe;
}

inline Tensor causal_bias(std::size_t len) {
  Tensor m({len, len});
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) m(i, j) = -1e30;
  return m;
}

}  // namespace detail

inline Weights init_weights(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng = Rng::substream(cfg.seed, "init");
  const std::size_t h = cfg.hidden, C = cfg.channels;
  Weights w;
  w.add("embed.w1", detail::kaiming({C, h}, C, rng));
  w.add("embed.b1", Tensor({h}));
  for (std::size_t layer = 0; layer < cfg.seq_layers; ++layer) {
    const std::string p = (cfg.arch == Arch::attention ? "attn" : "lstm") + std::to_string(layer);
    if (cfg.arch == Arch::attention) {
      w.add(p + ".ln1.g", Tensor::full({h}, 1.0));
      w.add(p + ".ln1.b", Tensor({h}));
      w.add(p + ".wq", detail::kaiming({h, h}, h, rng));
      w.add(p + ".bq", Tensor({h}));
      w.add(p + ".wk", detail::kaiming({h, h}, h, rng));
      w.add(p + ".bk", Tensor({h}));
      w.add(p + ".wv", detail::kaiming({h, h}, h, rng));
      w.add(p + ".bv", Tensor({h}));
      w.add(p + ".wo", detail::kaiming({h, h}, h, rng));
      w.add(p + ".bo", Tensor({h}));
      w.add(p + ".ln2.g", Tensor::full({h}, 1.0));
      w.add(p + ".ln2.b", Tensor({h}));
      w.add(p + ".ff1", detail::kaiming({h, 2 * h}, h, rng));
      w.add(p + ".fb1", Tensor({2 * h}));
      w.add(p + ".ff2", detail::kaiming({2 * h, h}, 2 * h, rng));
      w.add(p + ".fb2", Tensor({h}));
    } else {
      w.add(p + ".wx", detail::kaiming({h, 4 * h}, h, rng));
      w.add(p + ".wh", detail::kaiming({h, 4 * h}, h, rng));
      Tensor b({4 * h});
      for (std::size_t j = h; j < 2 * h; ++j) b(j) = 1.0;  // open forget gates early
      w.add(p + ".b", std::move(b));
    }
  }
  w.add("post.w1", detail::kaiming({h + cfg.d_static, h}, h + cfg.d_static, rng));
  w.add("post.b1", Tensor({h}));
  w.add("post.w2", detail::kaiming({h, h}, h, rng));
  w.add("post.b2", Tensor({h}));
  w.add("head.alpha.w", detail::kaiming({h, 1}, h, rng));
  w.add("head.alpha.b", Tensor({1}));
  w.add("head.beta.w", detail::kaiming({h, cfg.f}, h, rng));
  w.add("head.beta.b", Tensor({cfg.f}));
  w.add("head.sigma.w", detail::kaiming({h, 1}, h, rng));
  w.add("head.sigma.b", Tensor::full({1}, special::softplus_inv(1.0)));
  w.add("head.nu.w", detail::kaiming({h, 1}, h, rng));
  w.add("head.nu.b", Tensor::full({1}, special::softplus_inv(6.0)));  // nu = 6 + 4
  w.add("prior.raw_sigma_z", Tensor::full({cfg.f}, special::softplus_inv(1.0)));
  w.add("prior.raw_nu_z", Tensor::full({cfg.f}, special::softplus_inv(6.0)));
  return w;
}

// Parameters lifted onto a tape for one forward/backward pass
struct Lifted {
  const Weights* src = nullptr;
  std::vector<ad::Val> vals;

  ad::Val get(const std::string& name) const {
    auto it = src->index.find(name);
    require(it != src->index.end(), "unknown parameter " + name);
    return vals[it->second];
  }
};

inline Lifted lift(ad::Tape& tape, const Weights& w, bool requires_grad = true) {
  Lifted l;
  l.src = &w;
  l.vals.reserve(w.count());
  for (const Tensor& v : w.values) l.vals.push_back(tape.leaf(v, requires_grad));
  return l;
}

// One dropout draw per training step, shared across stocks so the network
// stays a single per-stock map within the step.
struct DropoutMasks {
  bool active = false;
  Tensor embed;                         // (seq_len, h)
  std::vector<Tensor> attn_probs;       // per block (heads, L, L)
  std::vector<Tensor> attn_out;         // per block (L, h)
  std::vector<Tensor> ffn_hidden;       // per block (L, 2h)
  std::vector<Tensor> ffn_out;          // per block (L, h)
  std::vector<Tensor> lstm_mid;         // per layer boundary (h)
  Tensor post1, post2;                  // (h)
};

inline Tensor draw_mask(Shape shape, double p, Rng& rng) {
  Tensor m(std::move(shape));
  const double keep = 1.0 - p;
  for (double& v : m.data()) v = (rng.uniform() < keep) ? 1.0 / keep : 0.0;
  return m;
}

inline DropoutMasks no_dropout() { return {}; }

inline DropoutMasks draw_dropout(const ModelConfig& cfg, Rng& rng) {
  DropoutMasks m;
  if (cfg.dropout <= 0.0) return m;
  m.active = true;
  const std::size_t L = cfg.seq_len(), h = cfg.hidden;
  m.embed = draw_mask({L, h}, cfg.dropout, rng);
  for (std::size_t layer = 0; layer < cfg.seq_layers; ++layer) {
    if (cfg.arch == Arch::attention) {
      m.attn_probs.push_back(draw_mask({cfg.heads, L, L}, cfg.dropout, rng));
      m.attn_out.push_back(draw_mask({L, h}, cfg.dropout, rng));
      m.ffn_hidden.push_back(draw_mask({L, 2 * h}, cfg.dropout, rng));
      m.ffn_out.push_back(draw_mask({L, h}, cfg.dropout, rng));
    } else if (layer + 1 < cfg.seq_layers) {
      m.lstm_mid.push_back(draw_mask({h}, cfg.dropout, rng));
    }
  }
  m.post1 = draw_mask({h}, cfg.dropout, rng);
  m.post2 = draw_mask({h}, cfg.dropout, rng);
  return m;
}

// Day parameters on tape, one row per windowed stock
struct DayParamsVal {
  ad::Val alpha;  // (N, 1)
  ad::Val b;      // (N, F)
  ad::Val sigma;  // (N, 1)
  ad::Val nu;     // (N, 1)
};

// Plain-tensor counterpart for inference
struct DayParams {
  Tensor alpha, b, sigma, nu;
};

inline std::atomic<std::uint64_t>& embed_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}

namespace detail {

inline ad::Val layernorm(ad::Val x, ad::Val g, ad::Val b) {
  using namespace ad;
  const std::size_t c = x.val().cols();
  Val centered = sub(x, broadcast_last(row_mean(x), c));
  Val var = row_mean(square(centered));
  Val normed = div(centered, broadcast_last(sqrt(shift(var, 1e-5)), c));
  return add(mul(normed, g), b);
}

inline ad::Val linear(ad::Val x, ad::Val w, ad::Val b) {
  return ad::add(ad::matmul(x, w), b);
}

inline ad::Val apply_mask(ad::Tape& tape, ad::Val x, const Tensor& mask, std::size_t n_stocks) {
  if (mask.numel() == 0) return x;
  if (mask.numel() == x.val().numel())
    return ad::mul(x, tape.constant(mask));
  Shape s = x.val().shape();
  return ad::mul(x, tape.constant(repeat_all(mask, n_stocks, std::move(s))));
}

}  // namespace detail

inline DayParamsVal embed_day(ad::Tape& tape, const Lifted& w, const ModelConfig& cfg,
                              const data::DayWindows& windows, const DropoutMasks& drop) {
  using namespace ad;
  embed_counter().fetch_add(1, std::memory_order_relaxed);
  cfg.validate();
  require(windows.channels() == cfg.channels, "window channels disagree with the config");
  require(windows.seq_len() == cfg.seq_len(), "window length disagrees with the config");
  require(windows.st.cols() == cfg.d_static, "static width disagrees with the config");
  const std::size_t N = windows.count(), L = cfg.seq_len(), h = cfg.hidden;
  require(N >= 1, "no stocks in the window");

  Val x = tape.constant(windows.seq);
  Val h1 = gelu(detail::linear(x, w.get("embed.w1"), w.get("embed.b1")));
  if (drop.active) h1 = detail::apply_mask(tape, h1, drop.embed, N);

  if (cfg.arch == Arch::attention) {
    h1 = add(h1, tape.constant(
                     detail::repeat_all(detail::sinusoidal_pe(L, h), N, {N * L, h})));
    const std::size_t dh = h / cfg.heads;
    Val causal = tape.constant(detail::causal_bias(L));
    for (std::size_t layer = 0; layer < cfg.seq_layers; ++layer) {
      const std::string p = "attn" + std::to_string(layer);
      Val ln1 = detail::layernorm(h1, w.get(p + ".ln1.g"), w.get(p + ".ln1.b"));
      Val q = split_heads(detail::linear(ln1, w.get(p + ".wq"), w.get(p + ".bq")), N, L,
                          cfg.heads);
      Val k = split_heads(detail::linear(ln1, w.get(p + ".wk"), w.get(p + ".bk")), N, L,
                          cfg.heads);
      Val v = split_heads(detail::linear(ln1, w.get(p + ".wv"), w.get(p + ".bv")), N, L,
                          cfg.heads);
      Val scores = add(scale(bmm(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh))), causal);
      Val probs = softmax_rows(scores);
      if (drop.active) probs = detail::apply_mask(tape, probs, drop.attn_probs[layer], N);
      Val ctx = merge_heads(bmm(probs, v), N, cfg.heads);
      Val attn = detail::linear(ctx, w.get(p + ".wo"), w.get(p + ".bo"));
      if (drop.active) attn = detail::apply_mask(tape, attn, drop.attn_out[layer], N);
      h1 = add(h1, attn);

      Val ln2 = detail::layernorm(h1, w.get(p + ".ln2.g"), w.get(p + ".ln2.b"));
      Val mid = gelu(detail::linear(ln2, w.get(p + ".ff1"), w.get(p + ".fb1")));
      if (drop.active) mid = detail::apply_mask(tape, mid, drop.ffn_hidden[layer], N);
      Val ffn = detail::linear(mid, w.get(p + ".ff2"), w.get(p + ".fb2"));
      if (drop.active) ffn = detail::apply_mask(tape, ffn, drop.ffn_out[layer], N);
      h1 = add(h1, ffn);
    }
  } else {
    for (std::size_t layer = 0; layer < cfg.seq_layers; ++layer) {
      const std::string p = "lstm" + std::to_string(layer);
      Val wx = w.get(p + ".wx"), wh = w.get(p + ".wh"), bias = w.get(p + ".b");
      Val hs = tape.constant(Tensor({N, h}));
      Val cs = tape.constant(Tensor({N, h}));
      std::vector<Val> outs;
      outs.reserve(L);
      for (std::size_t u = 0; u < L; ++u) {
        std::vector<std::size_t> rows(N);
        for (std::size_t n = 0; n < N; ++n) rows[n] = n * L + u;
        Val xt = take_rows(h1, rows);
        Val gates = add(add(matmul(xt, wx), matmul(hs, wh)), bias);
        Val gi = sigmoid(slice_cols(gates, 0, h));
        Val gf = sigmoid(slice_cols(gates, h, 2 * h));
        Val gg = tanh(slice_cols(gates, 2 * h, 3 * h));
        Val go = sigmoid(slice_cols(gates, 3 * h, 4 * h));
        cs = add(mul(gf, cs), mul(gi, gg));
        hs = mul(go, tanh(cs));
        outs.push_back(hs);
      }
      if (layer + 1 < cfg.seq_layers) {
        // stack this layer's outputs back into (N*L, h) for the next layer
        Val flat = concat_rows(outs);  // (L*N, h) in time-major order
        std::vector<std::size_t> perm(N * L);
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t u = 0; u < L; ++u) perm[n * L + u] = u * N + n;
        h1 = take_rows(flat, perm);
        if (drop.active) h1 = detail::apply_mask(tape, h1, drop.lstm_mid[layer], N * L);
      } else {
        h1 = hs;  // (N, h) final state
      }
    }
  }

  Val h2 = h1;
  if (cfg.arch == Arch::attention) {
    std::vector<std::size_t> last(N);
    for (std::size_t n = 0; n < N; ++n) last[n] = n * L + L - 1;
    h2 = take_rows(h1, last);  // (N, h)
  }

  if (cfg.d_static > 0) h2 = concat_cols(h2, tape.constant(windows.st));
  Val a1 = gelu(detail::linear(h2, w.get("post.w1"), w.get("post.b1")));
  if (drop.active) a1 = detail::apply_mask(tape, a1, drop.post1, N);
  Val a2 = gelu(detail::linear(a1, w.get("post.w2"), w.get("post.b2")));
  if (drop.active) a2 = detail::apply_mask(tape, a2, drop.post2, N);

  DayParamsVal out;
  out.alpha = detail::linear(a2, w.get("head.alpha.w"), w.get("head.alpha.b"));
  out.b = detail::linear(a2, w.get("head.beta.w"), w.get("head.beta.b"));
  out.sigma = softplus(detail::linear(a2, w.get("head.sigma.w"), w.get("head.sigma.b")));
  out.nu = shift(softplus(detail::linear(a2, w.get("head.nu.w"), w.get("head.nu.b"))), 4.0);
  return out;
}

inline DayParams embed_day_eval(const Weights& w, const ModelConfig& cfg,
                                const data::DayWindows& windows) {
  ad::Tape tape;
  Lifted l = lift(tape, w, false);
  DayParamsVal d = embed_day(tape, l, cfg, windows, no_dropout());
  const std::size_t N = windows.count();
  DayParams out;
  out.alpha = d.alpha.val().reshaped({N});
  out.b = d.b.val();
  out.sigma = d.sigma.val().reshaped({N});
  out.nu = d.nu.val().reshaped({N});
  return out;
}

}  // namespace nf::model
