#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ssmt/tensor.hpp"

namespace ssmt {

/// Node x time speed matrix for one city.
struct TrafficSeries {
  Tensor values;  // N x L
  std::vector<std::string> node_ids;
  int samples_per_hour = 12;
  std::int64_t origin_index = 0;  // absolute sample index of column 0

  [[nodiscard]] std::size_t nodes() const noexcept { return values.rows(); }
  [[nodiscard]] std::size_t length() const noexcept { return values.cols(); }

  /// Columns [begin, end) as a new series; origin shifts accordingly.
  [[nodiscard]] TrafficSeries slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > length()) {
      throw DataError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") outside length " +
                      std::to_string(length()));
    }
    TrafficSeries out{Tensor(nodes(), end - begin), node_ids, samples_per_hour,
                      origin_index + static_cast<std::int64_t>(begin)};
    for (std::size_t n = 0; n < nodes(); ++n)
      for (std::size_t t = begin; t < end; ++t) out.values(n, t - begin) = values(n, t);
    return out;
  }

  [[nodiscard]] std::vector<double> node_means() const {
    std::vector<double> means(nodes(), 0.0);
    for (std::size_t n = 0; n < nodes(); ++n) {
      double s = 0.0;
      for (std::size_t t = 0; t < length(); ++t) s += values(n, t);
      means[n] = s / static_cast<double>(length());
    }
    return means;
  }
};

// ---- CSV -------------------------------------------------------------------

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(line.substr(start));
      break;
    }
    cells.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return cells;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::optional<double> parse_double(std::string_view s) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
  return v;
}

// Days since 1970-01-01 for a proleptic Gregorian date (Howard Hinnant's algorithm).
inline std::int64_t days_from_civil(std::int64_t y, unsigned m, unsigned d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const auto yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153 * (m + (m > 2 ? -3 : 9)) + 2) / 5 + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

/// Seconds since the Unix epoch for `YYYY-MM-DDTHH:MM[:SS]` (a space separator
/// and a trailing `Z` are accepted; offsets are not).
inline std::optional<std::int64_t> parse_iso8601(std::string_view s) {
  if (!s.empty() && s.back() == 'Z') s.remove_suffix(1);
  if (s.size() < 16 || s[4] != '-' || s[7] != '-' || (s[10] != 'T' && s[10] != ' ') || s[13] != ':') return std::nullopt;
  auto num = [&](std::size_t pos, std::size_t len) { return parse_int(s.substr(pos, len)); };
  const auto y = num(0, 4), mo = num(5, 2), d = num(8, 2), h = num(11, 2), mi = num(14, 2);
  std::optional<std::int64_t> sec = 0;
  if (s.size() > 16) {
    if (s.size() != 19 || s[16] != ':') return std::nullopt;
    sec = num(17, 2);
  }
  if (!y || !mo || !d || !h || !mi || !sec || *mo < 1 || *mo > 12 || *d < 1 || *d > 31 || *h > 23 || *mi > 59 ||
      *sec > 60) {
    return std::nullopt;
  }
  return days_from_civil(*y, static_cast<unsigned>(*mo), static_cast<unsigned>(*d)) * 86400 + *h * 3600 + *mi * 60 +
         *sec;
}

}  // namespace detail

/// Parses the `timestamp,<node ids...>` CSV format. Empty cells are forward
/// filled along time; a node's leading gap takes its first observed value.
inline TrafficSeries parse_csv(std::istream& in, int samples_per_hour) {
  if (samples_per_hour <= 0) throw ConfigError("samples_per_hour must be positive");
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV: missing header", 1, 1);
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // UTF-8 BOM
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3) {
    throw DataError("need at least 2 node columns, header has " + std::to_string(header.size() - 1), 1, header.size());
  }
  TrafficSeries series;
  series.samples_per_hour = samples_per_hour;
  for (std::size_t c = 1; c < header.size(); ++c) series.node_ids.emplace_back(detail::trim(header[c]));
  const std::size_t n_nodes = series.node_ids.size();

  std::vector<std::vector<std::optional<double>>> columns(n_nodes);
  std::vector<std::int64_t> stamps;
  bool iso = false;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size()) {
      throw DataError("ragged row: expected " + std::to_string(header.size()) + " cells, got " +
                          std::to_string(cells.size()),
                      row, std::min(cells.size(), header.size()) + 1);
    }
    const auto ts = detail::trim(cells[0]);
    if (auto idx = detail::parse_int(ts)) {
      if (stamps.empty()) iso = false;
      if (iso) throw DataError("mixed timestamp formats", row, 1);
      stamps.push_back(*idx);
    } else if (auto secs = detail::parse_iso8601(ts)) {
      if (stamps.empty()) iso = true;
      if (!iso) throw DataError("mixed timestamp formats", row, 1);
      stamps.push_back(*secs);
    } else {
      throw DataError("unparseable timestamp '" + std::string(ts) + "'", row, 1);
    }
    for (std::size_t c = 0; c < n_nodes; ++c) {
      const auto cell = detail::trim(cells[c + 1]);
      if (cell.empty()) {
        columns[c].emplace_back(std::nullopt);
        continue;
      }
      auto v = detail::parse_double(cell);
      if (!v) throw DataError("non-numeric cell '" + std::string(cell) + "'", row, c + 2);
      columns[c].emplace_back(*v);
    }
  }
  const std::size_t length = stamps.size();
  if (length == 0) throw DataError("CSV has no data rows", 2, 1);

  const std::int64_t step_seconds = 3600 / samples_per_hour;
  if (iso) {
    if (3600 % samples_per_hour != 0) throw ConfigError("samples_per_hour must divide 3600 for ISO-8601 timestamps");
    for (std::size_t t = 1; t < length; ++t) {
      if (stamps[t] - stamps[t - 1] != step_seconds) {
        throw DataError("timestamp delta " + std::to_string(stamps[t] - stamps[t - 1]) + "s does not match " +
                            std::to_string(samples_per_hour) + " samples/hour",
                        t + 2, 1);
      }
    }
    series.origin_index = stamps[0] / step_seconds;
  } else {
    series.origin_index = stamps[0];
  }

  series.values = Tensor(n_nodes, length);
  for (std::size_t c = 0; c < n_nodes; ++c) {
    const auto& col = columns[c];
    auto first = std::find_if(col.begin(), col.end(), [](const auto& v) { return v.has_value(); });
    if (first == col.end()) throw DataError("node '" + series.node_ids[c] + "' has no observations", 2, c + 2);
    double last = **first;
    for (std::size_t t = 0; t < length; ++t) {
      if (col[t]) last = *col[t];
      series.values(c, t) = last;
    }
  }
  return series;
}

inline TrafficSeries load_csv(const std::string& path, int samples_per_hour) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return parse_csv(in, samples_per_hour);
}

namespace detail {
inline std::string format_double(double v) {
  char buf[32];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}
}  // namespace detail

/// Writes integer sample indices in the timestamp column; values round-trip exactly.
inline void write_csv(std::ostream& out, const TrafficSeries& s) {
  out << "timestamp";
  for (const auto& id : s.node_ids) out << ',' << id;
  out << '\n';
  for (std::size_t t = 0; t < s.length(); ++t) {
    out << (s.origin_index + static_cast<std::int64_t>(t));
    for (std::size_t n = 0; n < s.nodes(); ++n) out << ',' << detail::format_double(s.values(n, t));
    out << '\n';
  }
}

inline void save_csv(const std::string& path, const TrafficSeries& s) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write '" + path + "'");
  write_csv(out, s);
}

// ---- normalization ---------------------------------------------------------

/// Scalar z-score transform fitted on one city's training range.
struct Normalizer {
  double mean = 0.0;
  double std = 1.0;

  /// Population statistics over every node in columns [begin, end).
  static Normalizer fit(const TrafficSeries& s, std::size_t begin, std::size_t end) {
    if (begin >= end || end > s.length()) throw DataError("normalizer range is empty or out of bounds");
    const double count = static_cast<double>(s.nodes() * (end - begin));
    double sum = 0.0;
    for (std::size_t n = 0; n < s.nodes(); ++n)
      for (std::size_t t = begin; t < end; ++t) sum += s.values(n, t);
    const double mean = sum / count;
    double sq = 0.0;
    for (std::size_t n = 0; n < s.nodes(); ++n)
      for (std::size_t t = begin; t < end; ++t) sq += (s.values(n, t) - mean) * (s.values(n, t) - mean);
    const double std = std::sqrt(sq / count);
    if (!(std > 0.0)) throw DataError("training range has zero variance");
    return Normalizer{mean, std};
  }

  static Normalizer fit(const TrafficSeries& s) { return fit(s, 0, s.length()); }

  [[nodiscard]] Tensor apply(const Tensor& x) const {
    Tensor out = x;
    for (auto& v : out.values()) v = (v - mean) / std;
    return out;
  }

  [[nodiscard]] Tensor invert(const Tensor& z) const {
    Tensor out = z;
    for (auto& v : out.values()) v = v * std + mean;
    return out;
  }

  [[nodiscard]] TrafficSeries apply(const TrafficSeries& s) const {
    TrafficSeries out = s;
    out.values = apply(s.values);
    return out;
  }
};

// ---- windows and batches ---------------------------------------------------

struct WindowSample {
  Tensor x;                 // N x T
  Tensor y;                 // N x T'
  std::int64_t t_start = 0;  // absolute index of x's first column
};

inline std::size_t window_count(std::size_t length, std::size_t input_len, std::size_t horizon, std::size_t stride) {
  if (length < input_len + horizon) return 0;
  return (length - input_len - horizon) / stride + 1;
}

inline std::vector<WindowSample> make_windows(const TrafficSeries& s, std::size_t input_len, std::size_t horizon,
                                              std::size_t stride) {
  if (input_len == 0 || horizon == 0 || stride == 0) throw ConfigError("make_windows: T, T' and stride must be >= 1");
  if (s.length() < input_len + horizon) {
    throw DataError("series of length " + std::to_string(s.length()) + " is shorter than one window (" +
                    std::to_string(input_len + horizon) + ")");
  }
  const std::size_t count = window_count(s.length(), input_len, horizon, stride);
  const std::size_t n = s.nodes();
  std::vector<WindowSample> out;
  out.reserve(count);
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t start = w * stride;
    WindowSample ws{Tensor(n, input_len), Tensor(n, horizon), s.origin_index + static_cast<std::int64_t>(start)};
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < input_len; ++t) ws.x(i, t) = s.values(i, start + t);
      for (std::size_t t = 0; t < horizon; ++t) ws.y(i, t) = s.values(i, start + input_len + t);
    }
    out.push_back(std::move(ws));
  }
  return out;
}

/// Batches hold 3 periodicity tasks, each split into support and query halves.
inline void check_batch_size(std::size_t batch_size) {
  if (batch_size == 0 || batch_size % 6 != 0) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " must be a positive multiple of 6");
  }
}

/// Indices of `batch_size` windows drawn uniformly without replacement, ascending.
inline std::vector<std::size_t> sample_batch_indices(std::size_t available, std::size_t batch_size, Rng& rng) {
  check_batch_size(batch_size);
  if (batch_size > available) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds " + std::to_string(available) +
                      " available windows");
  }
  std::vector<std::size_t> idx(available);
  for (std::size_t i = 0; i < available; ++i) idx[i] = i;
  // partial Fisher-Yates
  for (std::size_t i = 0; i < batch_size; ++i) std::swap(idx[i], idx[i + rng.index(available - i)]);
  idx.resize(batch_size);
  std::sort(idx.begin(), idx.end());
  return idx;
}

inline std::vector<WindowSample> sample_batch(const std::vector<WindowSample>& windows, std::size_t batch_size, Rng& rng) {
  std::vector<WindowSample> batch;
  for (std::size_t i : sample_batch_indices(windows.size(), batch_size, rng)) batch.push_back(windows[i]);
  std::stable_sort(batch.begin(), batch.end(), [](const auto& a, const auto& b) { return a.t_start < b.t_start; });
  return batch;
}

/// One epoch: a random permutation cut into full batches, each sorted ascending.
/// A trailing partial batch is dropped.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t available, std::size_t batch_size, Rng& rng) {
  if (batch_size == 0 || batch_size > available) {
    throw ConfigError("batch_size " + std::to_string(batch_size) + " exceeds " + std::to_string(available) +
                      " available windows");
  }
  std::vector<std::size_t> perm(available);
  for (std::size_t i = 0; i < available; ++i) perm[i] = i;
  for (std::size_t i = available; i > 1; --i) std::swap(perm[i - 1], perm[rng.index(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t b = 0; b + batch_size <= available; b += batch_size) {
    std::vector<std::size_t> chunk(perm.begin() + static_cast<std::ptrdiff_t>(b),
                                   perm.begin() + static_cast<std::ptrdiff_t>(b + batch_size));
    std::sort(chunk.begin(), chunk.end());
    batches.push_back(std::move(chunk));
  }
  return batches;
}

/// Few-shot protocol: the first `days` of the target train, the rest is test.
struct FewShotSplit {
  TrafficSeries train;
  TrafficSeries test;
};

inline FewShotSplit split_few_shot(const TrafficSeries& s, double days) {
  const auto cut = static_cast<std::size_t>(std::llround(days * 24.0 * s.samples_per_hour));
  if (cut == 0 || cut >= s.length()) {
    throw DataError("few-shot range of " + std::to_string(cut) + " samples leaves no train/test split in length " +
                    std::to_string(s.length()));
  }
  return {s.slice(0, cut), s.slice(cut, s.length())};
}

// ---- synthetic cities ------------------------------------------------------

/// Waveform parameters of a synthetic city. Per-node values are drawn around
/// these centres.
struct CityProfile {
  double base_speed = 60.0;
  double base_spread = 5.0;
  double daily_amplitude = 10.0;
  double weekly_amplitude = 3.0;
  double amplitude_spread = 0.3;  // relative
  double phase_offset = 0.0;      // radians, shared by all nodes
  double phase_spread = 0.6;      // radians, per node
  double coupling = 0.5;
  std::size_t coupling_lag = 2;
  double noise_std = 1.5;
  double noise_ar = 0.8;
  double chord_fraction = 0.5;  // extra random edges per node on top of the ring

  static CityProfile source() { return {}; }

  static CityProfile target() {
    CityProfile p;
    p.base_speed = 35.0;
    p.base_spread = 4.0;
    p.daily_amplitude = 8.0;
    p.weekly_amplitude = 2.0;
    p.amplitude_spread = 0.35;
    p.phase_offset = 0.4;
    p.phase_spread = 0.8;
    p.coupling = 0.6;
    p.noise_std = 1.2;
    p.noise_ar = 0.85;
    return p;
  }

  static CityProfile by_name(const std::string& name) {
    if (name == "source") return source();
    if (name == "target") return target();
    throw ConfigError("unknown city profile '" + name + "' (expected source|target)");
  }
};

/// Ring over all nodes plus random chords; adjacency lists, no self loops.
inline std::vector<std::vector<std::size_t>> latent_ring_graph(std::size_t n, double chord_fraction, Rng& rng) {
  std::vector<std::vector<std::size_t>> nbrs(n);
  auto link = [&](std::size_t a, std::size_t b) {
    if (a == b || std::find(nbrs[a].begin(), nbrs[a].end(), b) != nbrs[a].end()) return;
    nbrs[a].push_back(b);
    nbrs[b].push_back(a);
  };
  for (std::size_t i = 0; i < n; ++i) link(i, (i + 1) % n);
  const auto chords = static_cast<std::size_t>(std::llround(chord_fraction * static_cast<double>(n)));
  for (std::size_t c = 0; c < chords && n > 3; ++c) link(rng.index(n), rng.index(n));
  for (auto& v : nbrs) std::sort(v.begin(), v.end());
  return nbrs;
}

/// Daily + weekly sinusoids per node, lagged mixing with latent-graph
/// neighbours, and AR(1) noise.
inline TrafficSeries synth_city(std::size_t n_nodes, std::size_t length, int samples_per_hour, std::uint64_t seed,
                                const CityProfile& profile) {
  if (n_nodes < 2) throw ConfigError("synth_city: need at least 2 nodes");
  if (samples_per_hour <= 0) throw ConfigError("synth_city: samples_per_hour must be positive");
  Rng rng(seed);
  Rng graph_rng = rng.split(1);
  Rng node_rng = rng.split(2);
  Rng noise_rng = rng.split(3);

  const auto nbrs = latent_ring_graph(n_nodes, profile.chord_fraction, graph_rng);
  std::vector<double> base(n_nodes), amp_d(n_nodes), amp_w(n_nodes), phase_d(n_nodes), phase_w(n_nodes);
  for (std::size_t n = 0; n < n_nodes; ++n) {
    base[n] = profile.base_speed + profile.base_spread * node_rng.normal();
    amp_d[n] = profile.daily_amplitude * (1.0 + profile.amplitude_spread * (2.0 * node_rng.uniform() - 1.0));
    amp_w[n] = profile.weekly_amplitude * (1.0 + profile.amplitude_spread * (2.0 * node_rng.uniform() - 1.0));
    phase_d[n] = profile.phase_offset + profile.phase_spread * (2.0 * node_rng.uniform() - 1.0);
    phase_w[n] = profile.phase_offset + profile.phase_spread * (2.0 * node_rng.uniform() - 1.0);
  }

  const double day = 24.0 * samples_per_hour;
  const double two_pi = 2.0 * std::numbers::pi;
  // deviation from base: periodic part + AR noise
  Tensor dev(n_nodes, length);
  std::vector<double> ar(n_nodes, 0.0);
  for (std::size_t t = 0; t < length; ++t) {
    const auto pos = static_cast<double>(t);
    for (std::size_t n = 0; n < n_nodes; ++n) {
      double v = amp_d[n] * std::sin(two_pi * pos / day + phase_d[n]);
      if (amp_w[n] != 0.0) v += amp_w[n] * std::sin(two_pi * pos / (7.0 * day) + phase_w[n]);
      if (profile.noise_std > 0.0) {
        ar[n] = profile.noise_ar * ar[n] + profile.noise_std * noise_rng.normal();
        v += ar[n];
      }
      dev(n, t) = v;
    }
  }

  TrafficSeries s;
  s.values = Tensor(n_nodes, length);
  s.samples_per_hour = samples_per_hour;
  s.origin_index = 0;
  for (std::size_t n = 0; n < n_nodes; ++n) s.node_ids.push_back("n" + std::to_string(n));
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t n = 0; n < n_nodes; ++n) {
      double v = base[n] + dev(n, t);
      if (profile.coupling != 0.0 && !nbrs[n].empty()) {
        double m = 0.0;
        if (t >= profile.coupling_lag) {
          for (std::size_t k : nbrs[n]) m += dev(k, t - profile.coupling_lag);
        } else {
          // before the series starts only the deterministic part is defined
          const auto pos = static_cast<double>(t) - static_cast<double>(profile.coupling_lag);
          for (std::size_t k : nbrs[n]) {
            m += amp_d[k] * std::sin(two_pi * pos / day + phase_d[k]);
            if (amp_w[k] != 0.0) m += amp_w[k] * std::sin(two_pi * pos / (7.0 * day) + phase_w[k]);
          }
        }
        v += profile.coupling * m / static_cast<double>(nbrs[n].size());
      }
      s.values(n, t) = v;
    }
  }
  return s;
}

}  // namespace ssmt
