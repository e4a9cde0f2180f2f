#include "helpers.hpp"

#include "mmq/datasets.hpp"
#include "mmq/quantize.hpp"
#include "mmq/rqvae.hpp"

#include <doctest.h>

#include <algorithm>

using namespace mmq;

namespace {

// Exhaustive search over all 2-partitions of a small point set.
double best_two_partition(const MatrixF& pts, MatrixF& centroids) {
  const auto n = pts.rows();
  double best = 1e300;
  for (unsigned mask = 1; mask + 1 < (1u << n); ++mask) {
    MatrixF c = MatrixF::Zero(2, pts.cols());
    int cnt[2] = {0, 0};
    for (Eigen::Index i = 0; i < n; ++i) {
      int g = (mask >> i) & 1u;
      c.row(g) += pts.row(i);
      ++cnt[g];
    }
    c.row(0) /= static_cast<float>(cnt[0]);
    c.row(1) /= static_cast<float>(cnt[1]);
    double d = 0;
    for (Eigen::Index i = 0; i < n; ++i) d += (pts.row(i) - c.row((mask >> i) & 1u)).squaredNorm();
    if (d < best) {
      best = d;
      centroids = c;
    }
  }
  return best / static_cast<double>(n);
}

MatrixF correlated_gaussian(std::size_t n, std::size_t d, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto base = testing::random_matrix<float>(n, d, rng);
  auto mix = testing::random_matrix<float>(d, d, rng);
  return base * mix;
}

bool sorted_rows_close(MatrixF a, MatrixF b, float tol) {
  auto key = [](const MatrixF& m) {
    std::vector<std::vector<float>> rows;
    for (Eigen::Index i = 0; i < m.rows(); ++i) rows.emplace_back(m.row(i).data(), m.row(i).data() + m.cols());
    std::sort(rows.begin(), rows.end());
    return rows;
  };
  auto ka = key(a), kb = key(b);
  for (std::size_t i = 0; i < ka.size(); ++i)
    for (std::size_t j = 0; j < ka[i].size(); ++j)
      if (std::abs(ka[i][j] - kb[i][j]) > tol) return false;
  return true;
}

}  // namespace

TEST_CASE("kmeans on two well separated pairs matches the exhaustive oracle") {
  MatrixF pts(4, 2);
  pts << 0, 0, 0.1f, 0, 5, 5, 5.1f, 5;
  MatrixF oracle;
  const double best = best_two_partition(pts, oracle);
  auto r = kmeans(pts, 2, 20, 1);
  CHECK(sorted_rows_close(r.codebook.codewords, oracle, 1e-6f));
  CHECK(r.distortion == doctest::Approx(best).epsilon(1e-6));
  MatrixF expect(2, 2);
  expect << 0.05f, 0, 5.05f, 5;
  CHECK(sorted_rows_close(r.codebook.codewords, expect, 1e-6f));
}

TEST_CASE("kmeans degenerate cases") {
  std::mt19937_64 rng(2);
  auto pts = testing::random_matrix<float>(6, 3, rng);
  auto r = kmeans(pts, 6, 5, 3);
  CHECK(r.distortion == doctest::Approx(0.0));
  CHECK(sorted_rows_close(r.codebook.codewords, pts, 0.0f));

  MatrixF dup = MatrixF::Constant(5, 2, 1.5f);
  auto one = kmeans(dup, 1, 5, 3);
  CHECK(one.distortion == 0.0);
  CHECK(one.codebook.codewords(0, 0) == 1.5f);
  CHECK_THROWS_AS(kmeans(pts, 7, 5, 3), std::invalid_argument);
}

TEST_CASE("kmeans distortion never increases") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto pts = correlated_gaussian(300, 6, seed);
    auto r = kmeans(pts, 12, 30, seed);
    for (std::size_t i = 1; i < r.distortion_history.size(); ++i)
      CHECK(r.distortion_history[i] <= r.distortion_history[i - 1] * (1 + 1e-9) + 1e-12);
  }
}

TEST_CASE("codebook nearest uses the lowest index on ties and counts usage") {
  MatrixF w(3, 1);
  w << -1, 1, 1;
  Codebook b(w);
  float x = 0.0f;
  CHECK(b.nearest(&x) == 0);
  x = 2.0f;
  CHECK(b.assign(&x) == 1);
  CHECK(b.usage_counts == std::vector<std::uint64_t>{0, 1, 0});
}

TEST_CASE("residual kmeans decomposes {0,1,10,11} exactly") {
  MatrixF pts(4, 1);
  pts << 0, 1, 10, 11;
  auto m = rq_fit(pts, 2, 2, RqMode::kmeans, 1);
  REQUIRE(m.levels.size() == 2);
  MatrixF l1(2, 1), l2(2, 1);
  l1 << 0.5f, 10.5f;
  l2 << -0.5f, 0.5f;
  CHECK(sorted_rows_close(m.levels[0].codewords, l1, 1e-6f));
  CHECK(sorted_rows_close(m.levels[1].codewords, l2, 1e-6f));
  CHECK(mean_squared_distance(m.reconstruct(pts), pts) <= 1e-9);
  auto ids = m.encode_rows(pts);
  CHECK(ids[0].length() == 2);
}

TEST_CASE("one-level residual kmeans is plain kmeans and more levels help") {
  auto pts = correlated_gaussian(400, 4, 9);
  auto rq1 = rq_fit(pts, 1, 8, RqMode::kmeans, 4);
  auto km = kmeans(pts, 8, 25, 4);
  CHECK((rq1.levels[0].codewords - km.codebook.codewords).norm() == 0.0f);
  auto rq2 = rq_fit(pts, 2, 8, RqMode::kmeans, 4);
  CHECK(mean_squared_distance(rq2.reconstruct(pts), pts) <= mean_squared_distance(rq1.reconstruct(pts), pts));
}

TEST_CASE("opq rotation helps on correlated data and stays orthogonal") {
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    auto pts = correlated_gaussian(600, 8, seed);
    auto plain = opq_fit(pts, 2, 8, false, 6, seed);
    auto rot = opq_fit(pts, 2, 8, true, 6, seed);
    const double dp = mean_squared_distance(plain.reconstruct(pts), pts);
    const double dr = mean_squared_distance(rot.reconstruct(pts), pts);
    CHECK(dr <= dp);
    CHECK(rot.orthogonality_error() <= 1e-4);
    CHECK(plain.orthogonality_error() == 0.0);
  }
}

TEST_CASE("opq with one block and no rotation is kmeans") {
  auto pts = correlated_gaussian(200, 4, 5);
  auto pq = opq_fit(pts, 1, 6, false, 3, 7);
  auto km = kmeans(pts, 6, 25, 7);
  CHECK(mean_squared_distance(pq.reconstruct(pts), pts) == doctest::Approx(km.distortion).epsilon(1e-5));
}

TEST_CASE("baseline tokenizers produce length-6 ids and round trip through checkpoints") {
  SyntheticConfig sc;
  sc.n_items = 300;
  sc.text_dim = 12;
  sc.vision_dim = 12;
  sc.n_clusters = 5;
  sc.latent_dim = 6;
  auto ds = gen_synthetic_items(sc).items.normalized();
  for (auto method : {BaselineMethod::rq_kmeans, BaselineMethod::opq}) {
    for (auto paradigm : {Paradigm::MA, Paradigm::MS}) {
      BaselineConfig cfg;
      cfg.method = method;
      cfg.paradigm = paradigm;
      cfg.k = 16;
      cfg.kmeans_iters = 10;
      cfg.opq_iters = 3;
      auto tok = fit_baseline(ds, cfg);
      CHECK(tok.id_length() == 6);
      auto id = baseline_tokenize(tok, paradigm, ds.item(0));
      CHECK(id.length() == 6);
      for (auto c : id.codes) CHECK(c < 16);
      auto back = baseline_from_checkpoint(tok.to_checkpoint());
      CHECK(back.tokenize_all(ds) == tok.tokenize_all(ds));
      CHECK(back.recon_loss(ds) == doctest::Approx(tok.recon_loss(ds)));
      const auto other = paradigm == Paradigm::MA ? Paradigm::MS : Paradigm::MA;
      CHECK_THROWS_AS(baseline_tokenize(tok, other, ds.item(0)), std::invalid_argument);
    }
  }
}

TEST_CASE("an item at a centroid gets that centroid's code") {
  MatrixF pts(4, 1);
  pts << 0, 1, 10, 11;
  auto km = kmeans(pts, 2, 10, 3);
  for (Eigen::Index j = 0; j < 2; ++j) CHECK(km.codebook.nearest(km.codebook.codewords.row(j).data()) == j);
}
