#include "iclcal/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <boost/math/distributions/binomial.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "iclcal/error.hpp"

namespace iclcal {
namespace {

// Average ranks (1-based); ties share the mean of the ranks they span.
std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace

double mcnemar_one_sided(std::uint64_t b, std::uint64_t c) {
  const std::uint64_t n = b + c;
  if (n == 0 || b == 0) return 1.0;
  const boost::math::binomial_distribution<double> dist(static_cast<double>(n), 0.5);
  return boost::math::cdf(boost::math::complement(dist, static_cast<double>(b - 1)));
}

SpearmanResult spearman_one_sided(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) {
    throw Error(ErrorCode::InvalidArgument, "spearman inputs differ in length");
  }
  if (xs.size() < 3) throw Error(ErrorCode::InvalidArgument, "spearman needs n >= 3");
  if (is_constant(xs) || is_constant(ys)) {
    throw Error(ErrorCode::DegenerateInput, "spearman input is constant");
  }
  const auto rx = average_ranks(xs);
  const auto ry = average_ranks(ys);
  SpearmanResult out;
  out.rho = std::clamp(pearson(rx, ry), -1.0, 1.0);
  if (out.rho >= 1.0) {
    out.p_value = 0.0;
    return out;
  }
  if (out.rho <= -1.0) {
    out.p_value = 1.0;
    return out;
  }

  const std::size_t n = xs.size();
  if (n <= 8) {
    // Exact null distribution over all n! pairings of the ranks.
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> permuted(n);
    std::uint64_t total = 0, extreme = 0;
    do {
      for (std::size_t i = 0; i < n; ++i) permuted[i] = ry[perm[i]];
      if (pearson(rx, permuted) >= out.rho - 1e-12) ++extreme;
      ++total;
    } while (std::next_permutation(perm.begin(), perm.end()));
    out.p_value = static_cast<double>(extreme) / static_cast<double>(total);
    return out;
  }

  const double df = static_cast<double>(n - 2);
  const double t = out.rho * std::sqrt(df / (1.0 - out.rho * out.rho));
  const boost::math::students_t_distribution<double> dist(df);
  out.p_value = boost::math::cdf(boost::math::complement(dist, t));
  return out;
}

}  // namespace iclcal
