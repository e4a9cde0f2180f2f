#include "toy.hpp"

#include "mmq/finetune.hpp"
#include "mmq/grad_check.hpp"

#include <doctest.h>

#include <cmath>

using namespace mmq;

namespace {

// Softmax cross-entropy with masking and column offsets, written out directly.
double oracle_retrieval(const MatrixD& users, const MatrixD& items, const std::vector<std::size_t>* keys,
                        const std::vector<double>* offsets) {
  const auto b = users.rows();
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    std::vector<double> logits;
    double target = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
      if (j != i && keys && (*keys)[j] == (*keys)[i]) continue;
      double s = users.row(i).dot(items.row(j)) + (offsets ? (*offsets)[j] : 0.0);
      if (j == i) target = s;
      logits.push_back(s);
    }
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double s : logits) z += std::exp(s - mx);
    total += -(target - mx - std::log(z));
  }
  return total / static_cast<double>(b);
}

FinetuneBatch toy_batch(std::size_t items, std::size_t users, std::size_t history, std::mt19937_64& rng) {
  FinetuneBatch b;
  for (std::size_t i = 0; i < items; ++i) b.item_rows.push_back(i);
  std::uniform_int_distribution<std::size_t> pick(0, items - 1);
  for (std::size_t u = 0; u < users; ++u) {
    std::vector<std::size_t> h(history);
    for (auto& x : h) x = pick(rng);
    b.histories.push_back(h);
    b.targets.push_back((u * 3) % items);
  }
  return b;
}

}  // namespace

TEST_CASE("soft indices example and temperature limit") {
  MatrixD book(2, 3);
  book << 1, 0, 0, 0, 1, 0;
  RowVector<double> z(3);
  z << 0.9, 0.1, std::sqrt(1.0 - 0.82);
  auto r = soft_indices(z, book, 1.0);
  CHECK(r.logits(0) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(r.soft(0) == doctest::Approx(0.6900).epsilon(1e-4));
  CHECK(r.soft(1) == doctest::Approx(0.3100).epsilon(1e-4));
  CHECK(r.index == 0);
  CHECK(r.hard(0) == 1.0);
  CHECK(r.ind(0) == 1.0);
  CHECK(r.ind(1) == 0.0);
  auto hot = soft_indices(z, book, 1e6);
  CHECK(hot.soft(0) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(hot.hard == r.hard);
  CHECK_THROWS_AS(soft_indices(RowVector<double>::Zero(3), book, 1.0), NumericError);
}

TEST_CASE("soft slot backward equals the gradient of the soft path") {
  std::mt19937_64 rng(3);
  for (bool cosine : {true, false}) {
    Parameter<double> lat("lat", testing::random_matrix(4, 5, rng));
    Parameter<double> book("book", testing::random_matrix(6, 5, rng));
    auto w = testing::random_matrix(4, 6, rng);
    const double tau = 0.7;
    const auto hard = lookup_rows(lat.value, book.value, cosine);
    // Offsets frozen at the base point turn ind into soft + constant.
    const auto base = soft_slot(lat.value, book.value, tau, cosine, hard);
    MatrixD offset = base.ind - base.soft;
    std::array<Parameter<double>*, 2> ps{&lat, &book};
    auto loss = [&] { return soft_slot(lat.value, book.value, tau, cosine, hard, &offset).ind.cwiseProduct(w).sum(); };
    auto grads = [&] {
      auto s = soft_slot(lat.value, book.value, tau, cosine, hard, &offset);
      soft_slot_backward(lat.value, book.value, s, tau, cosine, w, lat.grad, book.grad);
    };
    CHECK(grad_check(loss, grads, ps, {1e-5, 0, 1}) <= 1e-4);
    // The forward value is the one-hot lookup exactly.
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index k = 0; k < 6; ++k) CHECK(base.ind(i, k) == (k == hard[i] ? 1.0 : 0.0));
  }
}

TEST_CASE("retrieval head lookups") {
  auto head = RetrievalHead<double>::init(2, 3, 4, 5, 1);
  std::vector<SemanticId> ids{SemanticId{{2, 0}}};
  auto r = head.item_repr(ids);
  CHECK(testing::max_abs_diff(r, head.tables[0].value.row(2) + head.tables[1].value.row(0)) == 0.0);
  std::vector<MatrixD> onehots{MatrixD::Zero(1, 3), MatrixD::Zero(1, 3)};
  onehots[0](0, 2) = 1.0;
  onehots[1](0, 0) = 1.0;
  CHECK(testing::max_abs_diff(head.item_repr(onehots), r) == 0.0);
  for (auto& t : head.tables) t.value.setZero();
  CHECK(head.item_repr(ids).isZero());
}

TEST_CASE("retrieval loss examples and oracle") {
  MatrixD users = MatrixD::Identity(2, 2) * 10.0, items = MatrixD::Identity(2, 2);
  CHECK(retrieval_loss(users, items) <= 1e-3);
  MatrixD flat = MatrixD::Ones(5, 3);
  CHECK(retrieval_loss(flat, flat) == doctest::Approx(std::log(5.0)).epsilon(1e-12));
  CHECK_THROWS(retrieval_loss<double>(MatrixD::Ones(1, 3), MatrixD::Ones(1, 3)));

  std::mt19937_64 rng(4);
  Parameter<double> u("u", testing::random_matrix(6, 4, rng));
  Parameter<double> it("it", testing::random_matrix(6, 4, rng));
  std::vector<std::size_t> keys{0, 1, 0, 2, 3, 1};
  std::vector<double> offsets{0.1, -0.3, 0.1, 1.2, 0.0, -0.3};
  CHECK(retrieval_loss(u.value, it.value) == doctest::Approx(oracle_retrieval(u.value, it.value, nullptr, nullptr)).epsilon(1e-12));
  CHECK(retrieval_loss<double>(u.value, it.value, nullptr, nullptr, &keys, &offsets) ==
        doctest::Approx(oracle_retrieval(u.value, it.value, &keys, &offsets)).epsilon(1e-12));
  std::array<Parameter<double>*, 2> ps{&u, &it};
  auto loss = [&] { return retrieval_loss<double>(u.value, it.value, nullptr, nullptr, &keys, &offsets); };
  auto grads = [&] {
    MatrixD du, di;
    retrieval_loss(u.value, it.value, &du, &di, &keys, &offsets);
    u.grad += du;
    it.grad += di;
  };
  CHECK(grad_check(loss, grads, ps, {1e-6, 0, 2}) <= 1e-6);
}

TEST_CASE("joint loss decomposes and its gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto tok = TokenizerModel<double>::init(testing::toy_config(seed + 40));
    auto head = RetrievalHead<double>::init(6, 4, 5, 3, seed);
    std::mt19937_64 rng(seed);
    const auto batch = toy_batch(7, 5, 3, rng);
    auto text = testing::random_matrix(7, 5, rng);
    auto vision = testing::random_matrix(7, 4, rng);
    FinetuneConfig cfg;
    cfg.tau = 0.5;
    MmqJointFrozen<double> frozen;
    auto l = mmq_joint_loss<double>(tok, head, text, vision, batch, cfg, nullptr, false, &frozen);
    CHECK(l.total == doctest::Approx(l.downstream + 0.5 * l.recon + 0.5 * l.aux).epsilon(1e-12));
    auto params = tok.network_parameters();
    for (auto* p : tok.codebook_parameters()) params.push_back(p);
    for (auto* p : head.parameters()) params.push_back(p);
    auto loss = [&] { return mmq_joint_loss<double>(tok, head, text, vision, batch, cfg, &frozen, false).total; };
    auto grads = [&] { mmq_joint_loss<double>(tok, head, text, vision, batch, cfg, &frozen, true); };
    CHECK(loss() == doctest::Approx(l.total).epsilon(1e-12));
    CHECK(grad_check(loss, grads, params, {1e-6, 0, seed}) <= 1e-3);
  }
}

TEST_CASE("residual-quantizer joint loss gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed + 100);
    std::vector<RqVaeNet<double>> nets(2);
    for (int p = 0; p < 2; ++p) {
      nets[p].encoder = Mlp<double>(MlpSpec{{4, 6, 3}, Activation::tanh}, "enc", rng);
      nets[p].decoder = Mlp<double>(MlpSpec{{3, 6, 4}, Activation::tanh}, "dec", rng);
      for (int l = 0; l < 2; ++l) nets[p].codebooks.emplace_back("cb", testing::random_matrix(4, 3, rng, 0.5));
    }
    std::vector<RqVaeNet<double>*> parts{&nets[0], &nets[1]};
    auto head = RetrievalHead<double>::init(4, 4, 5, 3, seed);
    const auto batch = toy_batch(6, 4, 3, rng);
    std::vector<MatrixD> inputs{testing::random_matrix(6, 4, rng), testing::random_matrix(6, 4, rng)};
    FinetuneConfig cfg;
    cfg.tau = 0.5;
    RqJointFrozen<double> frozen;
    auto l = rqvae_joint_loss<double>(parts, head, inputs, batch, cfg, nullptr, false, &frozen);
    CHECK(l.aux == 0.0);
    CHECK(l.total == doctest::Approx(l.downstream + 0.5 * l.recon).epsilon(1e-12));
    std::vector<Parameter<double>*> params;
    for (auto& n : nets)
      for (auto* p : n.parameters()) params.push_back(p);
    for (auto* p : head.parameters()) params.push_back(p);
    auto loss = [&] { return rqvae_joint_loss<double>(parts, head, inputs, batch, cfg, &frozen, false).total; };
    auto grads = [&] { rqvae_joint_loss<double>(parts, head, inputs, batch, cfg, &frozen, true); };
    CHECK(grad_check(loss, grads, params, {1e-6, 0, seed}) <= 1e-3);
  }
}

TEST_CASE("leave-one-out split keeps users with three positives") {
  EmbeddingDataset cat({10, 11, 12, 13}, MatrixF::Ones(4, 1), MatrixF::Ones(4, 1));
  InteractionDataset log;
  log.events = {{1, 12, 1, 1}, {1, 13, 2, 0}, {1, 10, 3, 1}, {1, 11, 4, 1}, {2, 10, 1, 1}, {2, 11, 2, 1}};
  auto s = leave_one_out(log, cat);
  REQUIRE(s.users == std::vector<std::uint64_t>{1});
  CHECK(s.sequences[0] == std::vector<std::size_t>{2, 0, 1});
  CHECK(s.negatives[0] == std::vector<std::size_t>{3});
  log.events.push_back({3, 99, 1, 1});
  CHECK_THROWS(leave_one_out(log, cat));
}

TEST_CASE("evaluation ranks match a brute-force scan") {
  std::mt19937_64 rng(6);
  const std::size_t n = 30;
  std::vector<std::uint64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = 100 + i;
  EmbeddingDataset cat(ids, MatrixF::Ones(n, 1), MatrixF::Ones(n, 1));
  MatrixF reprs = testing::random_matrix<float>(n, 4, rng);
  reprs.row(7) = reprs.row(3);  // a tie: row 3 outranks row 7
  LeaveOneOut split;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::uint64_t u = 0; u < 20; ++u) {
    split.users.push_back(u);
    std::vector<std::size_t> seq(2 + u % 6);
    for (auto& x : seq) x = pick(rng);
    if (u == 0) seq.back() = 7;
    split.sequences.push_back(seq);
    split.negatives.push_back({pick(rng), pick(rng)});
  }
  const std::size_t history = 3;
  auto res = evaluate_retrieval(reprs, split, cat, history, {5, 10});
  for (std::size_t u = 0; u < 20; ++u) {
    const auto& seq = split.sequences[u];
    const std::size_t stop = seq.size() - 1, first = stop > history ? stop - history : 0;
    RowVector<float> user = RowVector<float>::Zero(4);
    for (std::size_t h = first; h < stop; ++h) user += reprs.row(seq[h]);
    user /= static_cast<float>(stop - first);
    const float ts = user.dot(reprs.row(seq.back()));
    std::size_t rank = 1;
    for (std::size_t j = 0; j < n; ++j) {
      const float s = user.dot(reprs.row(j));
      if (s > ts || (s == ts && j < seq.back())) ++rank;
    }
    CHECK(res.ranks[u] == rank);
    CHECK(res.target_items[u] == ids[seq.back()]);
  }
  CHECK(res.metrics.auc.has_value());
  CHECK(res.metrics.gauc.has_value());
}

TEST_CASE("head-only training with zero tokenizer weights lowers the retrieval loss") {
  auto sc = testing::tiny_synthetic(5);
  auto items = gen_synthetic_items(sc);
  auto log = gen_synthetic_interactions(items, sc).log;
  auto catalog = items.items.normalized();
  auto tc = testing::toy_config(5);
  tc.text_dim = tc.vision_dim = 12;
  tc.codebook_size = 16;
  tc.activation = Activation::relu;
  auto tok = TokenizerModel<float>::init(tc);
  auto head = RetrievalHead<float>::init(6, 16, 8, 5, 2);
  FinetuneConfig cfg;
  cfg.alpha_prime = cfg.beta_prime = 0.0;
  cfg.freeze_encoders = cfg.freeze_codebooks = true;
  cfg.epochs = 6;
  cfg.warmup_epochs = 0;
  cfg.batch_size = 64;
  cfg.history = 5;
  cfg.embed_dim = 8;
  const auto before = tok.to_checkpoint();
  auto res = finetune(tok, head, log, catalog, cfg);
  REQUIRE(res.epoch_losses.size() == 6);
  CHECK(res.epoch_losses.back().downstream < res.epoch_losses.front().downstream);
  CHECK(tok.to_checkpoint() == before);
}

TEST_CASE("fine-tuning a kmeans-mode baseline is rejected") {
  auto sc = testing::tiny_synthetic(6);
  auto items = gen_synthetic_items(sc);
  auto log = gen_synthetic_interactions(items, sc).log;
  auto catalog = items.items.normalized();
  BaselineConfig bc;
  bc.k = 8;
  bc.kmeans_iters = 5;
  auto tok = fit_baseline(catalog, bc);
  auto head = RetrievalHead<float>::init(6, 8, 8, 5, 1);
  CHECK_THROWS_AS(finetune_baseline_rqvae(tok, head, log, catalog, FinetuneConfig{}), std::invalid_argument);
}

TEST_CASE("finetune config validation") {
  FinetuneConfig c;
  CHECK(c.alpha_prime == 0.5);
  CHECK(c.beta_prime == 0.5);
  CHECK_NOTHROW(c.validate());
  c.tau = 0.0;
  CHECK_THROWS(c.validate());
  c = FinetuneConfig{};
  c.batch_size = 1;
  CHECK_THROWS(c.validate());
}
