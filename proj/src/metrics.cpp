#include "calibfield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <string>

namespace calibfield {

namespace {

void require_same_length(Index a, Index b, const char* what) {
  if (a != b) {
    throw ConfigError(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
  }
}

}  // namespace

double brier(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y) {
  require_same_length(f.size(), y.size(), "brier");
  if (f.size() == 0) throw ConfigError("brier: empty input");
  return (y - f).squaredNorm() / static_cast<double>(f.size());
}

double ReliabilityDiagram::max_deviation() const {
  double m = 0.0;
  for (const auto& b : bins) {
    if (!b.empty()) m = std::max(m, std::abs(b.accuracy - b.mean_conf));
  }
  return m;
}

void ReliabilityDiagram::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "bin_lo,bin_hi,mean_conf,accuracy,count\n";
  char line[160];
  for (const auto& b : bins) {
    std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g,%.17g,%lld\n", b.lo, b.hi, b.mean_conf, b.accuracy,
                  static_cast<long long>(b.count));
    out << line;
  }
}

ReliabilityDiagram binned_reliability(const Eigen::Ref<const Eigen::VectorXd>& f,
                                      const Eigen::Ref<const Eigen::VectorXd>& y, int n_bins) {
  require_same_length(f.size(), y.size(), "binned_reliability");
  if (n_bins < 1) throw ConfigError("binned_reliability: n_bins must be >= 1");
  ReliabilityDiagram diag;
  diag.bins.resize(static_cast<std::size_t>(n_bins));
  for (int b = 0; b < n_bins; ++b) {
    diag.bins[static_cast<std::size_t>(b)].lo = static_cast<double>(b) / n_bins;
    diag.bins[static_cast<std::size_t>(b)].hi = static_cast<double>(b + 1) / n_bins;
  }
  for (Index i = 0; i < f.size(); ++i) {
    const int b = std::clamp(static_cast<int>(std::floor(f[i] * n_bins)), 0, n_bins - 1);
    auto& bin = diag.bins[static_cast<std::size_t>(b)];
    bin.mean_conf += f[i];
    bin.accuracy += y[i];
    ++bin.count;
  }
  for (auto& bin : diag.bins) {
    if (bin.count > 0) {
      bin.mean_conf /= static_cast<double>(bin.count);
      bin.accuracy /= static_cast<double>(bin.count);
    }
  }
  return diag;
}

double smoothed_ece(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y,
                    double sigma) {
  require_same_length(f.size(), y.size(), "smoothed_ece");
  if (!(sigma > 0.0)) throw ConfigError("smoothed_ece: sigma must be > 0");
  const Index n = f.size();
  if (n == 0) throw ConfigError("smoothed_ece: empty input");

  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return f[a] < f[b]; });
  Eigen::ArrayXd s(n);
  Eigen::ArrayXd r(n);
  for (Index k = 0; k < n; ++k) {
    s[k] = f[order[static_cast<std::size_t>(k)]];
    r[k] = y[order[static_cast<std::size_t>(k)]] - s[k];
  }

  // Terms beyond 8 sigma weigh less than exp(-32) relative to the self term.
  const double reach = 8.0 * sigma;
  const double c = -0.5 / (sigma * sigma);
  const double* sp = s.data();
  Index lo = 0;
  Index hi = 0;
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const double t = s[i];
    while (s[lo] < t - reach) ++lo;
    while (hi < n && s[hi] <= t + reach) ++hi;
    const Index len = hi - lo;
    Eigen::ArrayXd w = ((s.segment(lo, len) - t).square() * c).exp();
    double den = w.sum();
    double num = (w * r.segment(lo, len)).sum();
    if (t < reach) {
      // mirror image about 0: s -> -s
      const Index end = static_cast<Index>(std::upper_bound(sp, sp + n, reach - t) - sp);
      const Eigen::ArrayXd wr = ((s.head(end) + t).square() * c).exp();
      den += wr.sum();
      num += (wr * r.head(end)).sum();
    }
    if (1.0 - t < reach) {
      // mirror image about 1: s -> 2 - s
      const Index begin = static_cast<Index>(std::lower_bound(sp, sp + n, 2.0 - t - reach) - sp);
      const Eigen::ArrayXd wr = ((2.0 - s.tail(n - begin) - t).square() * c).exp();
      den += wr.sum();
      num += (wr * r.tail(n - begin)).sum();
    }
    total += std::abs(num / den);
  }
  return total / static_cast<double>(n);
}

SmeceResult smece(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& y) {
  require_same_length(f.size(), y.size(), "smece");
  if (f.size() < 1) throw ConfigError("smece: needs at least one sample");
  constexpr double kTol = 1e-7;
  constexpr double kAccept = 1e-6;
  constexpr int kMaxIter = 100;

  SmeceResult res;
  auto g = [&](double sigma) { return smoothed_ece(f, y, sigma) - sigma; };

  double lo = 1e-4;
  double hi = 1.0;
  double g_hi = g(hi);
  ++res.iterations;
  if (g_hi >= 0.0) {
    // smoothed_ece never exceeds 1, so this means it equals 1 at sigma = 1.
    res.value = g_hi + hi;
    res.bandwidth = hi;
    res.fixed_point_residual = std::abs(g_hi);
    return res;
  }
  double g_lo = g(lo);
  ++res.iterations;
  // No crossing above 1e-4: the fixed point sits closer to zero.
  while (g_lo <= 0.0 && lo > kTol) {
    hi = lo;
    g_hi = g_lo;
    lo *= 0.1;
    g_lo = g(lo);
    ++res.iterations;
  }
  if (g_lo <= 0.0) {
    res.value = g_lo + lo;
    res.bandwidth = lo;
    res.fixed_point_residual = std::abs(g_lo);
    if (res.fixed_point_residual > kAccept) {
      throw NumericalError("smece: no fixed point above " + std::to_string(lo));
    }
    return res;
  }

  double mid = 0.5 * (lo + hi);
  double g_mid = 0.0;
  for (int it = 0; it < kMaxIter; ++it) {
    mid = 0.5 * (lo + hi);
    g_mid = g(mid);
    ++res.iterations;
    if (std::abs(g_mid) <= kTol) break;
    if (g_mid > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  if (std::abs(g_mid) > kAccept) {
    char msg[160];
    std::snprintf(msg, sizeof(msg), "smece: bisection did not converge, bracket [%.17g, %.17g], residual %.3g", lo, hi,
                  std::abs(g_mid));
    throw NumericalError(msg);
  }
  res.value = g_mid + mid;
  res.bandwidth = mid;
  res.fixed_point_residual = std::abs(g_mid);
  return res;
}

std::optional<double> pearson(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  require_same_length(a.size(), b.size(), "pearson");
  if (a.size() < 2) return std::nullopt;
  const Eigen::ArrayXd da = a.array() - a.mean();
  const Eigen::ArrayXd db = b.array() - b.mean();
  const double saa = da.square().sum();
  const double sbb = db.square().sum();
  if (!(saa > 0.0) || !(sbb > 0.0)) return std::nullopt;
  return std::clamp((da * db).sum() / std::sqrt(saa * sbb), -1.0, 1.0);
}

Eigen::VectorXd average_ranks(const Eigen::Ref<const Eigen::VectorXd>& v) {
  const Index n = v.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return v[a] < v[b]; });
  Eigen::VectorXd ranks(n);
  Index i = 0;
  while (i < n) {
    Index j = i + 1;
    while (j < n && v[order[static_cast<std::size_t>(j)]] == v[order[static_cast<std::size_t>(i)]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (Index k = i; k < j; ++k) ranks[order[static_cast<std::size_t>(k)]] = avg;
    i = j;
  }
  return ranks;
}

std::optional<double> spearman(const Eigen::Ref<const Eigen::VectorXd>& a,
                               const Eigen::Ref<const Eigen::VectorXd>& b) {
  require_same_length(a.size(), b.size(), "spearman");
  return pearson(average_ranks(a), average_ranks(b));
}

}  // namespace calibfield
