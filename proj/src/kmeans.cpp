#include "mmq/quantize.hpp"

#include <algorithm>
#include <limits>
#include <random>

namespace mmq {

Codebook::Codebook(MatrixF words) : codewords(std::move(words)), usage_counts(static_cast<std::size_t>(codewords.rows()), 0) {}

std::uint32_t Codebook::nearest(const float* x) const {
  const Eigen::Index d = codewords.cols();
  Eigen::Map<const RowVector<float>> row(x, d);
  std::uint32_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index k = 0; k < codewords.rows(); ++k) {
    const double dist = (codewords.row(k) - row).template cast<double>().squaredNorm();
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<std::uint32_t>(k);
    }
  }
  return best;
}

std::vector<std::uint32_t> Codebook::nearest_rows(const MatrixF& points) const {
  if (points.cols() != codewords.cols()) throw ShapeError("codebook lookup: dim mismatch");
  std::vector<std::uint32_t> out(static_cast<std::size_t>(points.rows()));
  if (points.rows() == 0) return out;
  for (Eigen::Index i = 0; i < points.rows(); ++i) out[static_cast<std::size_t>(i)] = nearest(points.row(i).data());
  return out;
}

std::uint32_t Codebook::assign(const float* x) {
  const auto k = nearest(x);
  ++usage_counts[k];
  return k;
}

void Codebook::reset_usage() { std::fill(usage_counts.begin(), usage_counts.end(), 0); }

double mean_squared_distance(const MatrixF& a, const MatrixF& b) {
  if (a.rows() == 0) return 0.0;
  return (a.cast<double>() - b.cast<double>()).rowwise().squaredNorm().mean();
}

namespace {

/// Exact squared distances of each point to each centroid, via the expanded
/// form, clamped at zero.
MatrixD sq_distances(const MatrixD& x, const Vector<double>& x_sq, const MatrixD& c) {
  MatrixD d = -2.0 * (x * c.transpose());
  d.colwise() += x_sq;
  d.rowwise() += c.rowwise().squaredNorm().transpose();
  return d.cwiseMax(0.0);
}

KMeansResult lloyd(const MatrixD& x, MatrixD centroids, std::size_t iters) {
  const Eigen::Index n = x.rows();
  const Eigen::Index k = centroids.rows();
  const Vector<double> x_sq = x.rowwise().squaredNorm();
  std::vector<std::uint32_t> assign(static_cast<std::size_t>(n), 0);
  KMeansResult res;
  for (std::size_t it = 0; it < iters; ++it) {
    const MatrixD d = sq_distances(x, x_sq, centroids);
    bool changed = it == 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index best = 0;
      double best_d = d(i, 0);
      for (Eigen::Index j = 1; j < k; ++j) {
        if (d(i, j) < best_d) {
          best_d = d(i, j);
          best = j;
        }
      }
      // Keep the current centroid unless another is strictly closer by the
      // exact metric; this keeps distortion monotone under rounding.
      const auto cur = static_cast<Eigen::Index>(assign[static_cast<std::size_t>(i)]);
      if (best != cur && it > 0) {
        const double exact_cur = (x.row(i) - centroids.row(cur)).squaredNorm();
        const double exact_best = (x.row(i) - centroids.row(best)).squaredNorm();
        if (!(exact_best < exact_cur)) best = cur;
      }
      if (best != cur) changed = true;
      assign[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(best);
    }
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) total += (x.row(i) - centroids.row(assign[static_cast<std::size_t>(i)])).squaredNorm();
    res.distortion_history.push_back(total / static_cast<double>(n));
    if (!changed || it + 1 == iters) break;

    // Update step.
    MatrixD sums = MatrixD::Zero(k, x.cols());
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[assign[static_cast<std::size_t>(i)]];
    }
    std::vector<Eigen::Index> empty;
    for (Eigen::Index j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0)
        centroids.row(j) = sums.row(j) / static_cast<double>(counts[static_cast<std::size_t>(j)]);
      else
        empty.push_back(j);
    }
    if (!empty.empty()) {
      // Farthest points from their (updated) centroids, distinct per empty cluster.
      std::vector<std::pair<double, Eigen::Index>> far;
      far.reserve(static_cast<std::size_t>(n));
      for (Eigen::Index i = 0; i < n; ++i)
        far.emplace_back((x.row(i) - centroids.row(assign[static_cast<std::size_t>(i)])).squaredNorm(), i);
      std::partial_sort(far.begin(), far.begin() + static_cast<std::ptrdiff_t>(std::min(empty.size(), far.size())),
                        far.end(), [](const auto& a, const auto& b) {
                          return a.first != b.first ? a.first > b.first : a.second < b.second;
                        });
      for (std::size_t e = 0; e < empty.size() && e < far.size(); ++e) centroids.row(empty[e]) = x.row(far[e].second);
    }
  }
  res.assignments = std::move(assign);
  res.distortion = res.distortion_history.back();
  res.codebook = Codebook(centroids.cast<float>());
  return res;
}

}  // namespace

KMeansResult kmeans(const MatrixF& points, std::size_t k, std::size_t iters, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(points.rows());
  if (k == 0) throw std::invalid_argument("kmeans: k must be >= 1");
  if (n < k) throw std::invalid_argument("kmeans: need at least k=" + std::to_string(k) + " points, got " + std::to_string(n));
  if (iters == 0) throw std::invalid_argument("kmeans: iters must be >= 1");
  const MatrixD x = points.cast<double>();
  std::mt19937_64 rng(seed);

  // k-means++ seeding.
  MatrixD c(static_cast<Eigen::Index>(k), x.cols());
  std::vector<bool> chosen(n, false);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  std::size_t pick = first(rng);
  c.row(0) = x.row(static_cast<Eigen::Index>(pick));
  chosen[pick] = true;
  Vector<double> best_d = (x.rowwise() - c.row(0)).rowwise().squaredNorm();
  for (std::size_t j = 1; j < k; ++j) {
    const double total = best_d.sum();
    if (total > 0.0) {
      std::uniform_real_distribution<double> u(0.0, total);
      double r = u(rng);
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        r -= best_d(static_cast<Eigen::Index>(i));
        if (r <= 0.0 && best_d(static_cast<Eigen::Index>(i)) > 0.0) {
          pick = i;
          break;
        }
      }
      while (best_d(static_cast<Eigen::Index>(pick)) <= 0.0 && pick > 0) --pick;
    } else {
      // Every point coincides with a centroid: take the first unchosen row.
      pick = static_cast<std::size_t>(std::find(chosen.begin(), chosen.end(), false) - chosen.begin());
      if (pick >= n) pick = j % n;
    }
    chosen[pick] = true;
    c.row(static_cast<Eigen::Index>(j)) = x.row(static_cast<Eigen::Index>(pick));
    best_d = best_d.cwiseMin((x.rowwise() - c.row(static_cast<Eigen::Index>(j))).rowwise().squaredNorm());
  }
  return lloyd(x, std::move(c), iters);
}

KMeansResult kmeans_from(const MatrixF& points, const MatrixF& init, std::size_t iters) {
  if (points.cols() != init.cols()) throw ShapeError("kmeans_from: dim mismatch");
  if (iters == 0) throw std::invalid_argument("kmeans: iters must be >= 1");
  if (points.rows() < init.rows()) throw std::invalid_argument("kmeans: fewer points than clusters");
  return lloyd(points.cast<double>(), init.cast<double>(), iters);
}

}  // namespace mmq
