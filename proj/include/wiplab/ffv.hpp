#pragma once

// Friction-from-vision: embedding cache, cosine retrieval, prompt assembly,
// LLM client backends, CoF extraction and a k-fold evaluation harness.
//
// Cache file (UTF-8, one JSON object per line):
//   line 1   {"version":1,"dimension":D,"encoder":"...","created":"...",
//             "counts":{"image":N,"text":M}}
//   line 2.. {"id":"...","kind":"image"|"text","vector":[D numbers],
//             "payload":{...}}
// Image payload: {"path", optional "cof", optional "description"}.
// Text payload:  {"material", "against", "static_cof"}.

#include <chrono>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace wiplab::ffv {

enum class RecordKind { Image, Text };

std::string to_string(RecordKind k);

struct Payload {
  // image
  std::string path;
  std::string description;
  std::optional<double> cof;
  // text
  std::string material;
  std::string against;
  double static_cof = 0.0;
};

struct EmbeddingRecord {
  std::string id;
  RecordKind kind = RecordKind::Text;
  std::vector<double> vector;
  Payload payload;
};

struct EmbeddingCache {
  int version = 1;
  int dimension = 0;
  std::string encoder;
  std::string created;
  std::vector<EmbeddingRecord> records;

  std::size_t count(RecordKind k) const;
  const EmbeddingRecord* find(const std::string& id) const;
  // Throws SchemaViolation naming the first offending record.
  void validate() const;
};

// Every schema problem found, in file order; empty means the file is valid.
std::vector<std::string> check_cache_file(const std::filesystem::path& path);

EmbeddingCache load_cache(const std::filesystem::path& path);
void save_cache(const EmbeddingCache& cache, const std::filesystem::path& path);
std::string serialize_cache(const EmbeddingCache& cache);
EmbeddingCache parse_cache(const std::string& text);

// Concatenates caches of equal dimension; ids must stay unique.
EmbeddingCache merge_caches(const std::vector<EmbeddingCache>& parts);

double cosine_similarity(std::span<const double> a, std::span<const double> b);
std::vector<double> cosine_similarity(std::span<const double> query,
                                      const std::vector<std::vector<double>>& rows);

struct RetrievalHit {
  std::string id;
  RecordKind kind = RecordKind::Text;
  double score = 0.0;
  Payload payload;
};

struct Retrieval {
  std::vector<RetrievalHit> images;
  std::vector<RetrievalHit> texts;
};

// Top-k per kind by descending score, ties by ascending id. Throws
// EmptyCache when the cache holds no records.
Retrieval retrieve_topk(const EmbeddingCache& cache,
                        std::span<const double> query, int k);

std::string format_cof(double v);
std::string build_prompt(const Retrieval& hits, const std::string& context = {});

// First "CoF:" followed by an optional space and a signed decimal, clamped
// to [0, mu_max]. Throws NoMatch.
double parse_cof(const std::string& text, double mu_max = 2.0);

struct LlmRequest {
  std::string model;
  std::string system;
  std::string prompt;
  std::vector<std::uint8_t> image;  // optional query image bytes
  std::string image_mime = "image/jpeg";
};

class LlmClient {
 public:
  virtual ~LlmClient() = default;
  // Returns the response text. Throws ClientTimeout or ClientError.
  virtual std::string complete(const LlmRequest& req,
                               std::chrono::milliseconds timeout) = 0;
};

// Scripted responses. Script file: entries separated by lines holding only
// "---"; an entry "@timeout" raises ClientTimeout, "@error <status>" raises
// ClientError. The last entry repeats once the script is exhausted.
class MockClient : public LlmClient {
 public:
  explicit MockClient(std::vector<std::string> script);
  static MockClient from_file(const std::filesystem::path& path);

  std::string complete(const LlmRequest& req,
                       std::chrono::milliseconds timeout) override;
  const std::vector<LlmRequest>& requests() const { return requests_; }

 private:
  std::vector<std::string> script_;
  std::size_t next_ = 0;
  std::vector<LlmRequest> requests_;
};

// OpenAI-style chat completions over HTTPS.
class HttpClient : public LlmClient {
 public:
  HttpClient(std::string endpoint, std::string api_key);
  // Reads FFV_API_KEY (required) and FFV_ENDPOINT (optional override).
  static HttpClient from_env(const std::string& default_endpoint);

  std::string complete(const LlmRequest& req,
                       std::chrono::milliseconds timeout) override;

 private:
  std::string endpoint_;
  std::string api_key_;
};

std::string request_body(const LlmRequest& req);
std::string base64_encode(std::span<const std::uint8_t> bytes);

struct EstimateOptions {
  int k = 5;
  int max_retries = 3;
  double backoff_initial_s = 0.5;  // doubles after each failed attempt
  std::chrono::milliseconds timeout{20000};
  double mu_max = 2.0;
  std::string model = "gpt-4o";
  std::string context;
  std::vector<std::uint8_t> image;
  std::function<void(double)> sleep;  // defaults to a real sleep
};

struct FrictionEstimate {
  double mu_hat = 0.0;
  std::string raw;
  std::vector<RetrievalHit> hits;  // images first, then texts
  double latency_s = 0.0;
  int retries = 0;
  std::vector<std::string> retry_log;
};

extern const char* const kSystemPrompt;

// retrieve -> prompt -> client (bounded retries on timeouts, client errors
// and unparseable answers) -> parse.
FrictionEstimate estimate(std::span<const double> query,
                          const EmbeddingCache& cache, LlmClient& client,
                          const EstimateOptions& opts = {});

struct LabeledSample {
  std::string id;
  std::vector<double> embedding;
  double truth = 0.0;
};

using Predictor = std::function<double(std::span<const LabeledSample> train,
                                       const LabeledSample& query)>;

struct KFoldResult {
  std::vector<double> fold_rmse;
  double mean = 0.0;
  double std = 0.0;
  std::vector<std::vector<std::size_t>> folds;  // held-out indices
};

// Seeded shuffle, then sample i of the shuffled order goes to fold i mod k.
// Throws TooFewSamples when the dataset is smaller than k.
KFoldResult kfold_rmse(std::span<const LabeledSample> data, int k,
                       const Predictor& predict, std::uint64_t seed = 0);

// Similarity-weighted mean CoF of the top-k training neighbours; a
// training-free predictor for the harness.
Predictor nearest_neighbour_predictor(int k);

}  // namespace wiplab::ffv
