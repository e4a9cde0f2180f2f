#include "helpers.hpp"

#include "mmq/checkpoint.hpp"
#include "mmq/datasets.hpp"
#include "mmq/quantize.hpp"
#include "mmq/semantic_id.hpp"

#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

using namespace mmq;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "mmq_unit";
  std::filesystem::create_directories(dir);
  return dir / name;
}

EmbeddingDataset random_dataset(std::size_t n, std::size_t dt, std::size_t dv, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<std::uint64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = rng();
  return {ids, testing::random_matrix<float>(n, dt, rng), testing::random_matrix<float>(n, dv, rng)};
}

SyntheticConfig small_synthetic() {
  SyntheticConfig c;
  c.n_items = 400;
  c.n_users = 200;
  c.n_clusters = 4;
  c.text_dim = 24;
  c.vision_dim = 16;
  c.latent_dim = 8;
  c.seq_len = 12;
  return c;
}

}  // namespace

TEST_CASE("embedding file round trips") {
  SUBCASE("empty") {
    EmbeddingDataset empty(3, 2);
    auto back = decode_embeddings(encode_embeddings(empty));
    CHECK(back.size() == 0);
    CHECK(back.text_dim() == 3);
    CHECK(back.vision_dim() == 2);
  }
  SUBCASE("small exact values") {
    MatrixF t(3, 2), v(3, 2);
    t << 0, 1, -1, 0, 1, 1;
    v << -1, -1, 0, 1, 1, 0;
    EmbeddingDataset ds({5, 9, 2}, t, v);
    auto path = scratch("small.mmqe");
    write_embeddings(ds, path);
    CHECK(read_embeddings(path) == ds);
  }
  SUBCASE("1000 random items are byte-identical after a round trip") {
    auto ds = random_dataset(1000, 12, 7, 42);
    auto bytes = encode_embeddings(ds);
    CHECK(bytes.size() == 20 + 1000 * (8 + 4 * 19));
    CHECK(encode_embeddings(decode_embeddings(bytes)) == bytes);
  }
}

TEST_CASE("embedding decoding reports the failing offset") {
  auto bytes = encode_embeddings(random_dataset(3, 2, 2, 1));
  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    decode_embeddings(bad_magic);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  try {
    decode_embeddings(bytes.substr(0, bytes.size() - 3));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(e.offset() > 20);
    CHECK(e.offset() <= bytes.size() - 3);
  }
  CHECK_THROWS_AS(decode_embeddings(bytes + "x"), FormatError);
  CHECK_THROWS_AS(read_embeddings(scratch("does_not_exist.mmqe")), IoError);
}

TEST_CASE("embedding dataset validation and lookups") {
  MatrixF t = MatrixF::Ones(2, 2), v = MatrixF::Ones(2, 1);
  EmbeddingDataset dup({1, 1}, t, v);
  CHECK_THROWS_AS(dup.validate(), std::invalid_argument);
  t(1, 0) = std::numeric_limits<float>::quiet_NaN();
  EmbeddingDataset nan({1, 2}, t, v);
  CHECK_THROWS_AS(nan.validate(), std::invalid_argument);
  auto ds = random_dataset(5, 3, 4, 2);
  CHECK(ds.find(ds.ids()[3]) == 3);
  CHECK(ds.find(ds.ids()[3] + 1) == -1);
  auto n = ds.normalized();
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(n.text().row(i).norm() == doctest::Approx(1.0f).epsilon(1e-6));
    CHECK(n.vision().row(i).norm() == doctest::Approx(1.0f).epsilon(1e-6));
  }
  auto sub = ds.subset({4, 0});
  CHECK(sub.ids()[0] == ds.ids()[4]);
  CHECK(sub.concatenated().cols() == 7);
}

TEST_CASE("checkpoint round trip with metadata") {
  std::mt19937_64 rng(3);
  Checkpoint ck;
  ck.tensors.push_back({"a.w0", testing::random_matrix<float>(4, 3, rng)});
  ck.tensors.push_back({"b", testing::random_matrix<float>(1, 9, rng)});
  ck.metadata_json = R"({"stage":"stage1"})";
  auto bytes = encode_checkpoint(ck);
  auto back = decode_checkpoint(bytes);
  CHECK(back == ck);
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(back.at("b").cols() == 9);
  CHECK(back.find("missing") == nullptr);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, 10)), FormatError);
}

TEST_CASE("interaction and semantic id TSV round trips") {
  InteractionDataset log;
  log.events = {{1, 10, 5, 1}, {1, 11, 6, 0}, {2, 10, 1, 1}};
  auto path = scratch("log.tsv");
  write_interactions(log, path);
  CHECK(read_interactions(path).events == log.events);

  SemanticIdTable t{{7, 8}, {SemanticId{{1, 2, 3}}, SemanticId{{0, 0, 99}}}};
  auto ids_path = scratch("ids.tsv");
  write_semantic_ids(t, ids_path);
  auto back = read_semantic_ids(ids_path);
  CHECK(back.item_ids == t.item_ids);
  CHECK(back.ids == t.ids);
}

TEST_CASE("positive sequences follow timestamps and validation catches disorder") {
  EmbeddingDataset cat({10, 11, 12}, MatrixF::Ones(3, 1), MatrixF::Ones(3, 1));
  InteractionDataset log;
  log.events = {{1, 12, 1, 1}, {1, 11, 2, 0}, {1, 10, 3, 1}};
  auto seqs = log.positive_sequences();
  REQUIRE(seqs.size() == 1);
  CHECK(seqs[0].second == std::vector<std::uint64_t>{12, 10});
  CHECK_NOTHROW(log.validate(cat));
  log.events.push_back({1, 99, 4, 1});
  CHECK_THROWS_AS(log.validate(cat), std::invalid_argument);
  log.events.back() = {1, 10, 0, 1};
  CHECK_THROWS_AS(log.validate(cat), std::invalid_argument);
}

TEST_CASE("synthetic items without noise are identical within a cluster") {
  auto c = small_synthetic();
  c.content_noise = 0.0;
  c.modality_unique_frac = 0.0;
  auto s = gen_synthetic_items(c);
  std::map<std::uint32_t, std::size_t> first;
  for (std::size_t i = 0; i < s.items.size(); ++i) {
    auto [it, fresh] = first.emplace(s.content_cluster[i], i);
    if (fresh) continue;
    CHECK((s.items.text().row(i) - s.items.text().row(it->second)).norm() == 0.0f);
    CHECK((s.items.vision().row(i) - s.items.vision().row(it->second)).norm() == 0.0f);
  }
}

TEST_CASE("synthetic generation is deterministic and clusters are recoverable") {
  auto c = small_synthetic();
  auto a = gen_synthetic_items(c);
  auto b = gen_synthetic_items(c);
  CHECK(a.items == b.items);
  CHECK(a.content_cluster == b.content_cluster);

  auto km = kmeans(a.items.concatenated(), 4, 30, 5);
  // Agreement up to label permutation: every k-means cluster maps to one true cluster.
  std::map<std::uint32_t, std::map<std::uint32_t, std::size_t>> votes;
  for (std::size_t i = 0; i < a.items.size(); ++i) ++votes[km.assignments[i]][a.content_cluster[i]];
  std::size_t agree = 0;
  std::set<std::uint32_t> used;
  for (const auto& [k, v] : votes) {
    auto best = std::max_element(v.begin(), v.end(), [](auto& x, auto& y) { return x.second < y.second; });
    agree += best->second;
    used.insert(best->first);
  }
  CHECK(used.size() == 4);
  CHECK(static_cast<double>(agree) / a.items.size() >= 0.99);
}

TEST_CASE("behavior clusters follow p_gap") {
  auto c = small_synthetic();
  auto items = gen_synthetic_items(c);
  c.p_gap = 0.0;
  auto same = gen_synthetic_interactions(items, c);
  CHECK(same.behavior_cluster == items.content_cluster);
  same.log.validate(items.items);

  c.p_gap = 1.0;
  auto diff = gen_synthetic_interactions(items, c);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < items.items.size(); ++i) agree += diff.behavior_cluster[i] == items.content_cluster[i];
  CHECK(static_cast<double>(agree) / items.items.size() <= 1.0 / 3.0 + 0.05);
}

TEST_CASE("popularity strata examples") {
  InteractionDataset log;
  const std::vector<std::pair<std::uint64_t, int>> counts{{1, 10}, {2, 5}, {3, 2}, {4, 1}};
  std::uint64_t ts = 0;
  for (auto [item, n] : counts)
    for (int i = 0; i < n; ++i) log.events.push_back({0, item, ts++, 1});
  auto s = popularity_strata(log);
  CHECK(s.members(Stratum::popular) == std::vector<std::uint64_t>{1});
  CHECK(s.members(Stratum::long_tail) == std::vector<std::uint64_t>{4});
  CHECK(s.of(2) == Stratum::middle);

  InteractionDataset flat;
  for (std::uint64_t item : {8, 3, 5, 1}) flat.events.push_back({0, item, ts++, 1});
  auto f = popularity_strata(flat);
  CHECK(f.members(Stratum::popular) == std::vector<std::uint64_t>{1});
  CHECK(f.members(Stratum::long_tail) == std::vector<std::uint64_t>{8});

  auto z = popularity_strata(log, {0.25, 0.75}, {1, 2, 3, 4, 77});
  CHECK(z.of(77) == Stratum::long_tail);
}

TEST_CASE("zipf synthetic log concentrates events in the popular stratum") {
  auto c = small_synthetic();
  c.negatives_per_positive = 0;
  auto items = gen_synthetic_items(c);
  auto log = gen_synthetic_interactions(items, c).log;
  auto s = popularity_strata(log, {0.25, 0.75}, items.items.ids());
  std::size_t popular = 0, total = 0;
  for (const auto& e : log.events) {
    ++total;
    popular += s.of(e.item_id) == Stratum::popular;
  }
  CHECK(static_cast<double>(popular) / total > 0.5);
}
