#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "neuralfactors/common.hpp"
#include "neuralfactors/tensor.hpp"

namespace nf::data {

// Point-in-time panel of daily returns. Stocks enter and leave the universe;
// membership is the authority on which (date, ticker) slots hold data.
// Returns are stored in normalized units (raw divided by norm_constant).
struct ReturnsPanel {
  std::vector<std::string> dates;    // strictly increasing ISO-8601
  std::vector<std::string> tickers;  // unique, sorted
  std::vector<char> membership;      // T*N row-major mask
  Tensor returns;                    // (T, N), zeros where not a member
  double norm_constant = 1.0;

  std::size_t days() const { return dates.size(); }
  std::size_t width() const { return tickers.size(); }

  bool is_member(std::size_t t, std::size_t i) const {
    return membership[t * width() + i] != 0;
  }
  double ret(std::size_t t, std::size_t i) const {
    require(is_member(t, i), "return read at a non-member (date, ticker)");
    return returns(t, i);
  }
  std::size_t members_on(std::size_t t) const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < width(); ++i) n += is_member(t, i) ? 1 : 0;
    return n;
  }
  std::size_t date_index(const std::string& d) const {
    auto it = std::lower_bound(dates.begin(), dates.end(), d);
    if (it == dates.end() || *it != d) throw DataError("unknown date " + d);
    return static_cast<std::size_t>(it - dates.begin());
  }
};

struct FeaturePanel {
  Tensor ts;  // (T, N, D_ts), zeros where absent; imputed at load for members
  Tensor st;  // (N, D_st)
  std::vector<std::string> ts_names;
  std::vector<std::string> static_names;
  std::string flag_name = "present";

  std::size_t ts_width() const { return ts_names.size(); }
  std::size_t static_width() const { return static_names.size(); }
};

struct LoadSpec {
  std::string flag_name = "present";
  // > 0 pins the divisor (e.g. a published constant); 0 computes the
  // population std of raw member returns over dates <= norm_train_end
  double norm_constant = 0.0;
  std::string norm_train_end;
};

struct SplitSpec {
  std::string train_end;
  std::string val_end;
};

// Half-open date index ranges: train [0, a), val [a, b), test [b, T)
struct SplitRanges {
  std::size_t train_end = 0;
  std::size_t val_end = 0;
};

namespace detail {

inline std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    std::size_t comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  if (!out.empty() && !out.back().empty() && out.back().back() == '\r') out.back().pop_back();
  return out;
}

inline double parse_number(const std::string& field, std::size_t row) {
  const char* begin = field.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0' || !std::isfinite(v))
    throw DataError("non-numeric field '" + field + "'", row);
  return v;
}

struct CsvFile {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;  // data rows
  std::vector<std::size_t> row_numbers;        // 1-based file line of each data row
};

inline CsvFile read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  CsvFile f;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    std::vector<std::string> fields = split_line(line);
    if (lineno == 1) {
      f.header = std::move(fields);
    } else {
      if (fields.size() != f.header.size())
        throw DataError("expected " + std::to_string(f.header.size()) + " fields, got " +
                            std::to_string(fields.size()),
                        lineno);
      f.rows.push_back(std::move(fields));
      f.row_numbers.push_back(lineno);
    }
  }
  if (f.header.empty()) throw DataError("empty file " + path);
  return f;
}

inline std::string fmt_full(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Population standard deviation of member returns over date indices
// [t_begin, t_end), in the panel's stored units.
inline double compute_norm_constant(const ReturnsPanel& p, std::size_t t_begin, std::size_t t_end) {
  require(t_begin < t_end && t_end <= p.days(), "bad norm range");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t t = t_begin; t < t_end; ++t)
    for (std::size_t i = 0; i < p.width(); ++i)
      if (p.is_member(t, i)) {
        sum += p.returns(t, i);
        ++n;
      }
  if (n < 2) throw DataError("need at least 2 member observations to normalize");
  const double mean = sum / static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t t = t_begin; t < t_end; ++t)
    for (std::size_t i = 0; i < p.width(); ++i)
      if (p.is_member(t, i)) {
        const double d = p.returns(t, i) - mean;
        ss += d * d;
      }
  const double sd = std::sqrt(ss / static_cast<double>(n));
  if (sd <= 0.0) throw DataError("degenerate returns: zero variance over the training range");
  return sd;
}

inline std::pair<ReturnsPanel, FeaturePanel> load_panel(const std::string& returns_path,
                                                        const std::string& ts_path,
                                                        const std::string& static_path,
                                                        const LoadSpec& spec = {}) {
  detail::CsvFile rf = detail::read_csv(returns_path);
  if (rf.header != std::vector<std::string>{"date", "ticker", "return"})
    throw DataError("returns header must be date,ticker,return in " + returns_path);

  ReturnsPanel p;
  {
    std::vector<std::string> dset, tset;
    for (const auto& row : rf.rows) {
      dset.push_back(row[0]);
      tset.push_back(row[1]);
    }
    std::sort(dset.begin(), dset.end());
    dset.erase(std::unique(dset.begin(), dset.end()), dset.end());
    std::sort(tset.begin(), tset.end());
    tset.erase(std::unique(tset.begin(), tset.end()), tset.end());
    p.dates = std::move(dset);
    p.tickers = std::move(tset);
  }
  const std::size_t T = p.days(), N = p.width();
  if (T == 0) throw DataError("no data rows in " + returns_path);
  std::unordered_map<std::string, std::size_t> dix, tix;
  for (std::size_t t = 0; t < T; ++t) dix.emplace(p.dates[t], t);
  for (std::size_t i = 0; i < N; ++i) tix.emplace(p.tickers[i], i);

  p.membership.assign(T * N, 0);
  p.returns = Tensor({T, N});
  for (std::size_t r = 0; r < rf.rows.size(); ++r) {
    const auto& row = rf.rows[r];
    const std::size_t t = dix.at(row[0]), i = tix.at(row[1]);
    if (p.membership[t * N + i])
      throw DataError("duplicate (date, ticker) " + row[0] + "," + row[1], rf.row_numbers[r]);
    p.membership[t * N + i] = 1;
    p.returns(t, i) = detail::parse_number(row[2], rf.row_numbers[r]);
  }

  FeaturePanel f;
  f.flag_name = spec.flag_name;
  if (!ts_path.empty()) {
    detail::CsvFile tf = detail::read_csv(ts_path);
    if (tf.header.size() < 3 || tf.header[0] != "date" || tf.header[1] != "ticker")
      throw DataError("ts features header must be date,ticker,<channels> in " + ts_path);
    f.ts_names.assign(tf.header.begin() + 2, tf.header.end());
    const std::size_t D = f.ts_names.size();
    f.ts = Tensor({T, N, D});
    std::vector<char> seen(T * N, 0);
    for (std::size_t r = 0; r < tf.rows.size(); ++r) {
      const auto& row = tf.rows[r];
      auto dit = dix.find(row[0]);
      auto tit = tix.find(row[1]);
      if (dit == dix.end() || tit == tix.end())
        throw DataError("feature row for unknown (date, ticker) " + row[0] + "," + row[1],
                        tf.row_numbers[r]);
      const std::size_t t = dit->second, i = tit->second;
      if (seen[t * N + i])
        throw DataError("duplicate feature row " + row[0] + "," + row[1], tf.row_numbers[r]);
      seen[t * N + i] = 1;
      for (std::size_t d = 0; d < D; ++d)
        f.ts.at3(t, i, d) = detail::parse_number(row[2 + d], tf.row_numbers[r]);
    }
  } else {
    f.ts = Tensor({T, N, 0});
  }
  if (!static_path.empty()) {
    detail::CsvFile sf = detail::read_csv(static_path);
    if (sf.header.size() < 2 || sf.header[0] != "ticker")
      throw DataError("static features header must be ticker,<channels> in " + static_path);
    f.static_names.assign(sf.header.begin() + 1, sf.header.end());
    const std::size_t D = f.static_names.size();
    f.st = Tensor({N, D});
    std::vector<char> seen(N, 0);
    for (std::size_t r = 0; r < sf.rows.size(); ++r) {
      const auto& row = sf.rows[r];
      auto tit = tix.find(row[0]);
      if (tit == tix.end())
        throw DataError("static row for unknown ticker " + row[0], sf.row_numbers[r]);
      if (seen[tit->second]) throw DataError("duplicate static row " + row[0], sf.row_numbers[r]);
      seen[tit->second] = 1;
      for (std::size_t d = 0; d < D; ++d)
        f.st(tit->second, d) = detail::parse_number(row[1 + d], sf.row_numbers[r]);
    }
    for (std::size_t i = 0; i < N; ++i)
      if (!seen[i]) throw DataError("no static features for ticker " + p.tickers[i]);
  } else {
    f.st = Tensor({N, 0});
  }

  double c = spec.norm_constant;
  if (c <= 0.0) {
    if (spec.norm_train_end.empty()) {
      c = 1.0;
    } else {
      auto it = std::upper_bound(p.dates.begin(), p.dates.end(), spec.norm_train_end);
      const std::size_t a = static_cast<std::size_t>(it - p.dates.begin());
      c = compute_norm_constant(p, 0, a);
    }
  }
  require(c > 0.0, "norm_constant must be positive");
  p.norm_constant = c;
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < N; ++i)
      if (p.is_member(t, i)) p.returns(t, i) /= c;
  return {std::move(p), std::move(f)};
}

// Writes raw units (normalized * norm_constant), one row per member slot.
inline void write_panel(const ReturnsPanel& p, const FeaturePanel& f,
                        const std::string& returns_path, const std::string& ts_path,
                        const std::string& static_path) {
  {
    std::ofstream out(returns_path);
    if (!out) throw DataError("cannot write " + returns_path);
    out << "date,ticker,return\n";
    for (std::size_t t = 0; t < p.days(); ++t)
      for (std::size_t i = 0; i < p.width(); ++i)
        if (p.is_member(t, i))
          out << p.dates[t] << ',' << p.tickers[i] << ','
              << detail::fmt_full(p.returns(t, i) * p.norm_constant) << '\n';
  }
  if (!ts_path.empty() && f.ts_width() > 0) {
    std::ofstream out(ts_path);
    if (!out) throw DataError("cannot write " + ts_path);
    out << "date,ticker";
    for (const auto& n : f.ts_names) out << ',' << n;
    out << '\n';
    for (std::size_t t = 0; t < p.days(); ++t)
      for (std::size_t i = 0; i < p.width(); ++i)
        if (p.is_member(t, i)) {
          out << p.dates[t] << ',' << p.tickers[i];
          for (std::size_t d = 0; d < f.ts_width(); ++d)
            out << ',' << detail::fmt_full(f.ts.at3(t, i, d));
          out << '\n';
        }
  }
  if (!static_path.empty() && f.static_width() > 0) {
    std::ofstream out(static_path);
    if (!out) throw DataError("cannot write " + static_path);
    out << "ticker";
    for (const auto& n : f.static_names) out << ',' << n;
    out << '\n';
    for (std::size_t i = 0; i < p.width(); ++i) {
      out << p.tickers[i];
      for (std::size_t d = 0; d < f.static_width(); ++d) out << ',' << detail::fmt_full(f.st(i, d));
      out << '\n';
    }
  }
}

inline SplitRanges split_ranges(const ReturnsPanel& p, const SplitSpec& s) {
  require(s.train_end < s.val_end, "train_end must precede val_end");
  require(s.val_end < p.dates.back(), "val_end must precede the last date");
  auto a = std::upper_bound(p.dates.begin(), p.dates.end(), s.train_end);
  auto b = std::upper_bound(p.dates.begin(), p.dates.end(), s.val_end);
  SplitRanges r;
  r.train_end = static_cast<std::size_t>(a - p.dates.begin());
  r.val_end = static_cast<std::size_t>(b - p.dates.begin());
  require(r.train_end > 0, "empty training split");
  return r;
}

inline std::vector<std::size_t> members_at(const ReturnsPanel& p, std::size_t t) {
  require(t < p.days(), "date index out of range");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.width(); ++i)
    if (p.is_member(t, i)) out.push_back(i);
  return out;
}

// Stocks usable as training pairs at t: present for the window end and for
// the day-(t+1) target.
inline std::vector<std::size_t> members_at_both(const ReturnsPanel& p, std::size_t t) {
  require(t + 1 < p.days(), "no successor date for targets");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.width(); ++i)
    if (p.is_member(t, i) && p.is_member(t + 1, i)) out.push_back(i);
  return out;
}

inline Tensor gather_returns(const ReturnsPanel& p, std::size_t t,
                             const std::vector<std::size_t>& stocks) {
  Tensor out({stocks.size()});
  for (std::size_t n = 0; n < stocks.size(); ++n) out(n) = p.ret(t, stocks[n]);
  return out;
}

// One day's model input: per stock a sequence over u = t-l .. t of
// [return, ts channels..., presence flag], stacked into a single
// (N*(l+1), C) matrix so the whole cross-section shares each matmul,
// plus the (N, D_st) static blocks.
struct DayWindows {
  std::size_t t = 0;
  std::size_t lookback = 0;
  std::vector<std::size_t> stocks;
  Tensor seq;  // (N*(l+1), 2 + D_ts)
  Tensor st;   // (N, D_st)

  std::size_t count() const { return stocks.size(); }
  std::size_t seq_len() const { return lookback + 1; }
  std::size_t channels() const { return seq.cols(); }
};

inline DayWindows make_windows(const ReturnsPanel& p, const FeaturePanel& f, std::size_t t,
                               std::size_t lookback,
                               const std::vector<std::size_t>* subset = nullptr) {
  require(t < p.days(), "date index out of range");
  require(t >= lookback, "date " + p.dates[t] + " has fewer than " + std::to_string(lookback) +
                             " prior dates");
  DayWindows w;
  w.t = t;
  w.lookback = lookback;
  w.stocks = subset ? *subset : members_at(p, t);
  for (std::size_t i : w.stocks)
    require(p.is_member(t, i), "windowed stock must be a member on day t");

  const std::size_t L = lookback + 1;
  const std::size_t D = f.ts_width();
  const std::size_t C = 2 + D;
  w.seq = Tensor({w.count() * L, C});
  for (std::size_t n = 0; n < w.count(); ++n) {
    const std::size_t i = w.stocks[n];
    for (std::size_t u = 0; u < L; ++u) {
      const std::size_t day = t - lookback + u;
      double* row = w.seq.data().data() + (n * L + u) * C;
      if (p.is_member(day, i)) {
        row[0] = p.returns(day, i);
        for (std::size_t d = 0; d < D; ++d) row[1 + d] = f.ts.at3(day, i, d);
        row[1 + D] = 1.0;
      }
      // non-member positions stay zero with flag 0
    }
  }
  w.st = Tensor({w.count(), f.static_width()});
  for (std::size_t n = 0; n < w.count(); ++n)
    for (std::size_t d = 0; d < f.static_width(); ++d) w.st(n, d) = f.st(w.stocks[n], d);
  w.seq.check_finite("window sequences");
  return w;
}

}  // namespace nf::data
