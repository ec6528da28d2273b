#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "wiplab/errors.hpp"
#include "wiplab/ffv.hpp"
#include "wiplab/rng.hpp"

using namespace wiplab;
using namespace wiplab::ffv;

namespace {

const std::filesystem::path kFixtures = WIPLAB_FIXTURES;

EmbeddingCache surfaces() { return load_cache(kFixtures / "surfaces_cache.jsonl"); }

EmbeddingCache random_cache(Rng& rng, int n_img, int n_txt, int dim) {
  EmbeddingCache c;
  c.dimension = dim;
  auto vec = [&] {
    std::vector<double> v(dim);
    for (auto& x : v) x = standard_normal(rng);
    return v;
  };
  for (int i = 0; i < n_img + n_txt; ++i) {
    EmbeddingRecord r;
    r.id = "r" + std::to_string(static_cast<int>(uniform01(rng) * 1e6)) + "_" + std::to_string(i);
    r.kind = i < n_img ? RecordKind::Image : RecordKind::Text;
    // Occasional exact duplicates exercise the tie rule.
    r.vector = (i > 0 && uniform01(rng) < 0.15) ? c.records.back().vector : vec();
    c.records.push_back(r);
  }
  return c;
}

std::vector<std::string> oracle_topk(const EmbeddingCache& c, const std::vector<double>& q,
                                     RecordKind kind, int k) {
  std::vector<std::pair<double, std::string>> all;
  for (const auto& r : c.records) {
    if (r.kind != kind) continue;
    // Scores come from the tested cosine so exact duplicates tie bit for bit.
    all.emplace_back(cosine_similarity(q, r.vector), r.id);
  }
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first > b.first : a.second < b.second;
  });
  std::vector<std::string> ids;
  for (int i = 0; i < std::min<int>(k, all.size()); ++i) ids.push_back(all[i].second);
  return ids;
}

std::vector<std::string> ids(const std::vector<RetrievalHit>& hits) {
  std::vector<std::string> out;
  for (const auto& h : hits) out.push_back(h.id);
  return out;
}

EstimateOptions quiet(int retries = 3) {
  EstimateOptions o;
  o.max_retries = retries;
  o.sleep = [](double) {};
  return o;
}

}  // namespace

TEST(Cosine, Examples) {
  const std::vector<double> a{1, 1, 0}, b{1, 0, 0}, c{0, 2, 0};
  EXPECT_NEAR(cosine_similarity(a, b), 1.0 / std::sqrt(2.0), 1e-15);
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-15);
  EXPECT_EQ(cosine_similarity(b, c), 0.0);
  const std::vector<double> z{0, 0, 0};
  EXPECT_THROW(cosine_similarity(a, z), ZeroVector);
  const std::vector<double> shorter{1, 0};
  EXPECT_THROW(cosine_similarity(a, shorter), ShapeMismatch);
  const auto rows = cosine_similarity(a, std::vector<std::vector<double>>{b, c, a});
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_NEAR(rows[2], 1.0, 1e-15);
}

TEST(Cosine, BoundedOnRandomVectors) {
  Rng rng = make_rng(1, "cos");
  for (int i = 0; i < 1000; ++i) {
    std::vector<double> a(5), b(5);
    for (auto& x : a) x = standard_normal(rng);
    const bool mirrored = uniform01(rng) < 0.5;
    for (int j = 0; j < 5; ++j) b[j] = mirrored ? -3.0 * a[j] : standard_normal(rng);
    const double s = cosine_similarity(a, b);
    ASSERT_LE(s, 1.0 + 1e-12);
    ASSERT_GE(s, -1.0 - 1e-12);
  }
}

TEST(Retrieve, MatchesBruteForceOnRandomCaches) {
  Rng rng = make_rng(2, "retrieve");
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = static_cast<int>(uniform01(rng) * 51);
    const int m = static_cast<int>(uniform01(rng) * 51);
    if (n + m == 0) continue;
    const int dim = 1 + static_cast<int>(uniform01(rng) * 16);
    const EmbeddingCache c = random_cache(rng, n, m, dim);
    std::vector<double> q(dim);
    for (auto& x : q) x = standard_normal(rng);
    const int k = 1 + static_cast<int>(uniform01(rng) * 12);
    const Retrieval r = retrieve_topk(c, q, k);
    ASSERT_EQ(ids(r.images), oracle_topk(c, q, RecordKind::Image, k)) << trial;
    ASSERT_EQ(ids(r.texts), oracle_topk(c, q, RecordKind::Text, k)) << trial;
  }
}

TEST(Retrieve, ExhaustiveAndTies) {
  EmbeddingCache c;
  c.dimension = 2;
  c.records = {{"b", RecordKind::Image, {1, 0}, {}},
               {"a", RecordKind::Image, {1, 0}, {}},
               {"c", RecordKind::Image, {0, 1}, {}}};
  const std::vector<double> q{1, 0.1};
  const Retrieval r = retrieve_topk(c, q, 10);
  EXPECT_EQ(ids(r.images), (std::vector<std::string>{"a", "b", "c"}));
  EXPECT_TRUE(r.texts.empty());
  EXPECT_EQ(r.images[0].score, r.images[1].score);
}

TEST(Retrieve, Errors) {
  EmbeddingCache empty;
  empty.dimension = 2;
  const std::vector<double> q{1, 0};
  EXPECT_THROW(retrieve_topk(empty, q, 3), EmptyCache);
  const EmbeddingCache c = surfaces();
  EXPECT_THROW(retrieve_topk(c, q, 3), ShapeMismatch);
  const std::vector<double> q8(8, 1.0);
  EXPECT_THROW(retrieve_topk(c, q8, 0), ConfigInvalid);
}

TEST(CacheFile, LoadsFixture) {
  const EmbeddingCache c = surfaces();
  EXPECT_EQ(c.dimension, 8);
  EXPECT_EQ(c.count(RecordKind::Image), 5u);
  EXPECT_EQ(c.count(RecordKind::Text), 5u);
  ASSERT_NE(c.find("icy_01"), nullptr);
  EXPECT_EQ(c.find("icy_01")->payload.description, "icy surface");
  EXPECT_EQ(*c.find("icy_01")->payload.cof, 0.1);
  EXPECT_TRUE(check_cache_file(kFixtures / "surfaces_cache.jsonl").empty());
}

TEST(CacheFile, RoundTripIsByteStable) {
  const EmbeddingCache c = surfaces();
  const std::string text = serialize_cache(c);
  EXPECT_EQ(serialize_cache(parse_cache(text)), text);
  const auto path = std::filesystem::temp_directory_path() / "wiplab_cache_rt.jsonl";
  save_cache(c, path);
  EXPECT_EQ(serialize_cache(load_cache(path)), text);
  std::filesystem::remove(path);
}

TEST(CacheFile, ReportsEveryProblem) {
  const auto problems = check_cache_file(kFixtures / "malformed_cache.jsonl");
  auto mentions = [&](const std::string& needle) {
    return std::any_of(problems.begin(), problems.end(), [&](const std::string& p) {
      return p.find(needle) != std::string::npos;
    });
  };
  EXPECT_TRUE(mentions("duplicate id"));
  EXPECT_TRUE(mentions("'short'"));
  EXPECT_TRUE(mentions("'zero'"));
  EXPECT_TRUE(mentions("audio"));
  EXPECT_TRUE(mentions("malformed JSON"));
  EXPECT_THROW(load_cache(kFixtures / "malformed_cache.jsonl"), SchemaViolation);
}

TEST(CacheFile, Merge) {
  EmbeddingCache a = surfaces(), b;
  b.dimension = 8;
  b.records.push_back({"extra", RecordKind::Text, std::vector<double>(8, 1.0),
                       {.material = "Steel", .against = "ice", .static_cof = 0.03}});
  const EmbeddingCache m = merge_caches({a, b});
  EXPECT_EQ(m.records.size(), 11u);
  EXPECT_THROW(merge_caches({a, a}), SchemaViolation);
  b.dimension = 4;
  b.records[0].vector.resize(4);
  EXPECT_THROW(merge_caches({a, b}), SchemaViolation);
}

TEST(Prompt, RendersTextAndImageHits) {
  Retrieval hits;
  RetrievalHit t;
  t.kind = RecordKind::Text;
  t.payload.material = "Wrought iron";
  t.payload.against = "wrought iron";
  t.payload.static_cof = 0.44;
  hits.texts.push_back(t);
  const std::string p = build_prompt(hits);
  EXPECT_NE(p.find("Wrought iron and wrought iron: 0.44\n"), std::string::npos);
  EXPECT_NE(p.find("CoF: <decimal>"), std::string::npos);
  EXPECT_EQ(build_prompt(hits), p);

  Retrieval images;
  RetrievalHit h;
  h.kind = RecordKind::Image;
  h.payload.description = "icy surface";
  h.payload.cof = 0.1;
  images.images.push_back(h);
  const std::string q = build_prompt(images);
  EXPECT_NE(q.find("icy surface (CoF 0.1)"), std::string::npos);
  EXPECT_NE(q.find("CoF: <decimal>"), std::string::npos);
}

TEST(ParseCof, Examples) {
  EXPECT_EQ(parse_cof("Analysis... CoF: 0.45 because of the texture"), 0.45);
  EXPECT_EQ(parse_cof("CoF:0.7"), 0.7);
  EXPECT_EQ(parse_cof("CoF: 3.2", 2.0), 2.0);
  EXPECT_EQ(parse_cof("CoF: -0.3"), 0.0);
  EXPECT_EQ(parse_cof("CoF: .5 then CoF: 0.9"), 0.5);
  EXPECT_THROW(parse_cof("no number here"), NoMatch);
  EXPECT_THROW(parse_cof("CoF: high"), NoMatch);
}

TEST(Estimate, MockPipeline) {
  const EmbeddingCache c = surfaces();
  MockClient mock({"Looks dry.\nCoF: 0.9"});
  const std::vector<double> q(8, 0.5);
  const FrictionEstimate e = estimate(q, c, mock, quiet());
  EXPECT_EQ(e.mu_hat, 0.9);
  EXPECT_EQ(e.retries, 0);
  EXPECT_LE(e.hits.size(), 10u);
  EXPECT_GE(e.latency_s, 0.0);
}

TEST(Estimate, RetriesThenSucceeds) {
  const EmbeddingCache c = surfaces();
  MockClient mock = MockClient::from_file(kFixtures / "mock_flaky.txt");
  std::vector<double> slept;
  EstimateOptions o = quiet(3);
  o.backoff_initial_s = 0.25;
  o.sleep = [&](double s) { slept.push_back(s); };
  const FrictionEstimate e = estimate(std::vector<double>(8, 1.0), c, mock, o);
  EXPECT_EQ(e.mu_hat, 0.9);
  EXPECT_EQ(e.retries, 2);
  ASSERT_EQ(e.retry_log.size(), 2u);
  EXPECT_EQ(slept, (std::vector<double>{0.25, 0.5}));
  EXPECT_EQ(mock.requests().size(), 3u);
}

TEST(Estimate, GivesUpAfterBudget) {
  const EmbeddingCache c = surfaces();
  MockClient timeouts({"@timeout"});
  EXPECT_THROW(estimate(std::vector<double>(8, 1.0), c, timeouts, quiet(2)), ClientTimeout);
  EXPECT_EQ(timeouts.requests().size(), 3u);
  MockClient garbage = MockClient::from_file(kFixtures / "mock_garbage.txt");
  EXPECT_THROW(estimate(std::vector<double>(8, 1.0), c, garbage, quiet(1)), NoMatch);
  MockClient server({"@error 500"});
  try {
    estimate(std::vector<double>(8, 1.0), c, server, quiet(0));
    FAIL();
  } catch (const ClientError& e) {
    EXPECT_EQ(e.status(), 500);
  }
}

TEST(Estimate, IcyQueryHitsIcyRecordFirst) {
  const EmbeddingCache c = surfaces();
  MockClient mock = MockClient::from_file(kFixtures / "ice.txt");
  const auto& icy = c.find("icy_01")->vector;
  const FrictionEstimate e = estimate(icy, c, mock, quiet());
  ASSERT_FALSE(e.hits.empty());
  EXPECT_EQ(e.hits[0].id, "icy_01");
  EXPECT_NEAR(e.hits[0].score, 1.0, 1e-12);
  EXPECT_EQ(e.mu_hat, 0.1);
  ASSERT_EQ(mock.requests().size(), 1u);
  EXPECT_NE(mock.requests()[0].prompt.find("icy surface (CoF 0.1)"), std::string::npos);

  MockClient again = MockClient::from_file(kFixtures / "ice.txt");
  estimate(icy, c, again, quiet());
  EXPECT_EQ(again.requests()[0].prompt, mock.requests()[0].prompt);
}

TEST(Http, RequestBodyShape) {
  LlmRequest req;
  req.model = "gpt-4o";
  req.system = "sys";
  req.prompt = "hello";
  req.image = {'a', 'b', 'c'};
  const auto j = nlohmann::json::parse(request_body(req));
  EXPECT_EQ(j["model"], "gpt-4o");
  EXPECT_EQ(j["messages"][0]["role"], "system");
  EXPECT_EQ(j["messages"][1]["role"], "user");
  EXPECT_NE(j.dump().find("data:image/jpeg;base64,YWJj"), std::string::npos);
  const std::vector<std::uint8_t> bytes{'M', 'a'};
  EXPECT_EQ(base64_encode(bytes), "TWE=");
}

TEST(KFold, PerfectAndConstantPredictors) {
  std::vector<LabeledSample> data;
  for (int i = 0; i < 20; ++i) data.push_back({"s" + std::to_string(i), {1.0}, i % 2 ? 0.4 : 0.2});
  const Predictor perfect = [](std::span<const LabeledSample>, const LabeledSample& q) {
    return q.truth;
  };
  const Predictor constant = [](std::span<const LabeledSample>, const LabeledSample&) {
    return 0.3;
  };
  for (int k : {2, 5, 10}) {
    const KFoldResult r = kfold_rmse(data, k, perfect, 7);
    EXPECT_EQ(r.mean, 0.0);
    ASSERT_EQ(r.folds.size(), static_cast<std::size_t>(k));
    std::vector<std::size_t> all;
    for (const auto& f : r.folds) all.insert(all.end(), f.begin(), f.end());
    std::sort(all.begin(), all.end());
    std::vector<std::size_t> expect(data.size());
    std::iota(expect.begin(), expect.end(), 0);
    EXPECT_EQ(all, expect);
    EXPECT_NEAR(kfold_rmse(data, k, constant, 7).mean, 0.1, 1e-12);
  }
  EXPECT_THROW(kfold_rmse(std::span(data).first(3), 5, perfect), TooFewSamples);
}

TEST(KFold, DeterministicGivenSeed) {
  const EmbeddingCache c = surfaces();
  std::vector<LabeledSample> data;
  for (const auto& r : c.records) {
    if (r.kind == RecordKind::Image) data.push_back({r.id, r.vector, *r.payload.cof});
  }
  const Predictor nn = nearest_neighbour_predictor(2);
  const KFoldResult a = kfold_rmse(data, 5, nn, 3), b = kfold_rmse(data, 5, nn, 3);
  EXPECT_EQ(a.fold_rmse, b.fold_rmse);
  EXPECT_EQ(a.folds, b.folds);
}
