#include "wiplab/ffv.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "wiplab/errors.hpp"
#include "wiplab/rng.hpp"

namespace wiplab::ffv {

using nlohmann::json;

std::string to_string(RecordKind k) {
  return k == RecordKind::Image ? "image" : "text";
}

std::size_t EmbeddingCache::count(RecordKind k) const {
  return static_cast<std::size_t>(std::count_if(
      records.begin(), records.end(),
      [k](const EmbeddingRecord& r) { return r.kind == k; }));
}

const EmbeddingRecord* EmbeddingCache::find(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return &r;
  }
  return nullptr;
}

namespace {

std::vector<std::string> record_problems(const EmbeddingRecord& r, int dim) {
  std::vector<std::string> out;
  const std::string who = "record '" + r.id + "'";
  if (r.id.empty()) out.push_back("record with empty id");
  if (static_cast<int>(r.vector.size()) != dim) {
    out.push_back(who + ": vector length " + std::to_string(r.vector.size()) +
                  " != dimension " + std::to_string(dim));
  }
  double n2 = 0.0;
  bool finite = true;
  for (double v : r.vector) {
    finite = finite && std::isfinite(v);
    n2 += v * v;
  }
  if (!finite) out.push_back(who + ": non-finite vector entry");
  if (!(n2 > 0.0)) out.push_back(who + ": zero vector");
  if (r.kind == RecordKind::Text) {
    if (r.payload.material.empty() || r.payload.against.empty()) {
      out.push_back(who + ": text payload needs material and against");
    }
    if (!(r.payload.static_cof >= 0.0)) {
      out.push_back(who + ": static_cof must be >= 0");
    }
  } else if (r.payload.path.empty()) {
    out.push_back(who + ": image payload needs a path");
  }
  return out;
}

Payload payload_from_json(const json& j, RecordKind kind) {
  Payload p;
  if (kind == RecordKind::Image) {
    p.path = j.at("path").get<std::string>();
    if (j.contains("description")) p.description = j.at("description").get<std::string>();
    if (j.contains("cof") && !j.at("cof").is_null()) p.cof = j.at("cof").get<double>();
  } else {
    p.material = j.at("material").get<std::string>();
    p.against = j.at("against").get<std::string>();
    p.static_cof = j.at("static_cof").get<double>();
  }
  return p;
}

json payload_to_json(const Payload& p, RecordKind kind) {
  json j = json::object();
  if (kind == RecordKind::Image) {
    j["path"] = p.path;
    if (!p.description.empty()) j["description"] = p.description;
    if (p.cof) j["cof"] = *p.cof;
  } else {
    j["material"] = p.material;
    j["against"] = p.against;
    j["static_cof"] = p.static_cof;
  }
  return j;
}

EmbeddingRecord record_from_json(const json& j) {
  EmbeddingRecord r;
  r.id = j.at("id").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "image") {
    r.kind = RecordKind::Image;
  } else if (kind == "text") {
    r.kind = RecordKind::Text;
  } else {
    throw SchemaViolation("record '" + r.id + "': unknown kind '" + kind + "'");
  }
  r.vector = j.at("vector").get<std::vector<double>>();
  r.payload = payload_from_json(j.at("payload"), r.kind);
  return r;
}

struct Parsed {
  EmbeddingCache cache;
  std::vector<std::string> problems;
};

Parsed parse_lines(std::istream& in) {
  Parsed out;
  std::string line;
  int lineno = 0;
  bool have_header = false;
  json counts;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = "line " + std::to_string(lineno) + ": ";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      out.problems.push_back(where + "malformed JSON");
      continue;
    }
    if (!have_header) {
      have_header = true;
      try {
        out.cache.version = j.at("version").get<int>();
        out.cache.dimension = j.at("dimension").get<int>();
        out.cache.encoder = j.value("encoder", "");
        out.cache.created = j.value("created", "");
        counts = j.value("counts", json::object());
      } catch (const json::exception& e) {
        out.problems.push_back(where + "bad header: " + e.what());
        return out;
      }
      if (out.cache.version != 1) {
        out.problems.push_back(where + "unsupported version " +
                               std::to_string(out.cache.version));
      }
      if (out.cache.dimension <= 0) {
        out.problems.push_back(where + "dimension must be positive");
        return out;
      }
      continue;
    }
    try {
      out.cache.records.push_back(record_from_json(j));
    } catch (const SchemaViolation& e) {
      out.problems.push_back(where + e.what());
    } catch (const json::exception& e) {
      const std::string id = j.is_object() ? j.value("id", std::string("?")) : "?";
      out.problems.push_back(where + "record '" + id + "': " + e.what());
    }
  }
  if (!have_header) {
    out.problems.push_back("missing header line");
    return out;
  }
  std::set<std::string> seen;
  for (const auto& r : out.cache.records) {
    for (auto& p : record_problems(r, out.cache.dimension)) out.problems.push_back(p);
    if (!seen.insert(r.id).second) {
      out.problems.push_back("record '" + r.id + "': duplicate id");
    }
  }
  for (auto [name, kind] : {std::pair{"image", RecordKind::Image},
                            std::pair{"text", RecordKind::Text}}) {
    if (counts.contains(name) &&
        counts.at(name).get<std::size_t>() != out.cache.count(kind)) {
      out.problems.push_back(std::string("header count for ") + name +
                             " does not match the records");
    }
  }
  return out;
}

}  // namespace

void EmbeddingCache::validate() const {
  if (dimension <= 0) throw SchemaViolation("dimension must be positive");
  std::set<std::string> seen;
  for (const auto& r : records) {
    const auto problems = record_problems(r, dimension);
    if (!problems.empty()) throw SchemaViolation(problems.front());
    if (!seen.insert(r.id).second) {
      throw SchemaViolation("record '" + r.id + "': duplicate id");
    }
  }
}

std::vector<std::string> check_cache_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) return {"cannot open " + path.string()};
  return parse_lines(in).problems;
}

EmbeddingCache parse_cache(const std::string& text) {
  std::istringstream in(text);
  Parsed p = parse_lines(in);
  if (!p.problems.empty()) throw SchemaViolation(p.problems.front());
  return std::move(p.cache);
}

EmbeddingCache load_cache(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw SchemaViolation("cannot open cache " + path.string());
  Parsed p = parse_lines(in);
  if (!p.problems.empty()) {
    throw SchemaViolation(path.string() + ": " + p.problems.front());
  }
  return std::move(p.cache);
}

std::string serialize_cache(const EmbeddingCache& cache) {
  cache.validate();
  std::ostringstream os;
  json header = {{"version", cache.version},
                 {"dimension", cache.dimension},
                 {"encoder", cache.encoder},
                 {"created", cache.created},
                 {"counts", {{"image", cache.count(RecordKind::Image)},
                             {"text", cache.count(RecordKind::Text)}}}};
  os << header.dump() << '\n';
  for (const auto& r : cache.records) {
    json j = {{"id", r.id},
              {"kind", to_string(r.kind)},
              {"vector", r.vector},
              {"payload", payload_to_json(r.payload, r.kind)}};
    os << j.dump() << '\n';
  }
  return os.str();
}

void save_cache(const EmbeddingCache& cache, const std::filesystem::path& path) {
  const std::string text = serialize_cache(cache);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

EmbeddingCache merge_caches(const std::vector<EmbeddingCache>& parts) {
  if (parts.empty()) throw EmptyCache("nothing to merge");
  EmbeddingCache out;
  out.version = 1;
  out.dimension = parts.front().dimension;
  out.encoder = parts.front().encoder;
  out.created = parts.front().created;
  for (const auto& p : parts) {
    if (p.dimension != out.dimension) {
      throw SchemaViolation("cannot merge caches of dimension " +
                            std::to_string(out.dimension) + " and " +
                            std::to_string(p.dimension));
    }
    if (p.encoder != out.encoder) out.encoder += "+" + p.encoder;
    out.records.insert(out.records.end(), p.records.begin(), p.records.end());
  }
  out.validate();
  return out;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeMismatch("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (!(na > 0.0) || !(nb > 0.0)) throw ZeroVector("cosine of a zero vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<double> cosine_similarity(
    std::span<const double> query, const std::vector<std::vector<double>>& rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  for (const auto& r : rows) out.push_back(cosine_similarity(query, r));
  return out;
}

Retrieval retrieve_topk(const EmbeddingCache& cache,
                        std::span<const double> query, int k) {
  if (cache.records.empty()) throw EmptyCache("embedding cache is empty");
  if (k < 1) throw ConfigInvalid("retrieval K must be >= 1");
  if (static_cast<int>(query.size()) != cache.dimension) {
    throw ShapeMismatch("query dimension " + std::to_string(query.size()) +
                        " != cache dimension " + std::to_string(cache.dimension));
  }
  Retrieval out;
  for (const auto& r : cache.records) {
    RetrievalHit h{r.id, r.kind, cosine_similarity(query, r.vector), r.payload};
    (r.kind == RecordKind::Image ? out.images : out.texts).push_back(std::move(h));
  }
  auto order = [](const RetrievalHit& a, const RetrievalHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  };
  for (auto* v : {&out.images, &out.texts}) {
    const auto keep = std::min<std::size_t>(v->size(), static_cast<std::size_t>(k));
    std::partial_sort(v->begin(), v->begin() + static_cast<std::ptrdiff_t>(keep),
                      v->end(), order);
    v->resize(keep);
  }
  return out;
}

std::string format_cof(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const char* const kSystemPrompt =
    "You estimate the static coefficient of friction between a robot wheel "
    "and a ground surface.";

std::string build_prompt(const Retrieval& hits, const std::string& context) {
  std::ostringstream os;
  os << "Estimate the static coefficient of friction (CoF) between a rubber "
        "robot wheel and the ground surface in the query image.\n";
  if (!context.empty()) os << "Context: " << context << "\n";
  if (!hits.texts.empty()) {
    os << "\nReference friction coefficients (Material and Against Material: "
          "Static CoF):\n";
    for (const auto& h : hits.texts) {
      os << h.payload.material << " and " << h.payload.against << ": "
         << format_cof(h.payload.static_cof) << "\n";
    }
  }
  if (!hits.images.empty()) {
    os << "\nVisually similar reference surfaces:\n";
    for (const auto& h : hits.images) {
      os << "- " << (h.payload.description.empty() ? h.payload.path
                                                   : h.payload.description);
      if (h.payload.cof) os << " (CoF " << format_cof(*h.payload.cof) << ")";
      os << "\n";
    }
  }
  os << "\nReason briefly, then end your answer with exactly one line of the "
        "form\nCoF: <decimal>\n";
  return os.str();
}

double parse_cof(const std::string& text, double mu_max) {
  static const std::regex re(R"(CoF: ?([+-]?(?:\d+(?:\.\d*)?|\.\d+)))");
  std::smatch m;
  if (!std::regex_search(text, m, re)) {
    throw NoMatch("no 'CoF: <decimal>' line in the response");
  }
  const double v = std::stod(m[1].str());
  return std::clamp(v, 0.0, mu_max);
}

MockClient::MockClient(std::vector<std::string> script)
    : script_(std::move(script)) {
  if (script_.empty()) throw ConfigInvalid("mock script is empty");
}

MockClient MockClient::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigInvalid("cannot open mock script " + path.string());
  std::vector<std::string> entries;
  std::string line, cur;
  bool any = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line == "---") {
      entries.push_back(cur);
      cur.clear();
      any = false;
      continue;
    }
    if (any) cur += '\n';
    cur += line;
    any = true;
  }
  if (any || entries.empty()) entries.push_back(cur);
  return MockClient(std::move(entries));
}

std::string MockClient::complete(const LlmRequest& req,
                                 std::chrono::milliseconds) {
  requests_.push_back(req);
  const std::string& e = script_[std::min(next_, script_.size() - 1)];
  ++next_;
  if (e.rfind("@timeout", 0) == 0) throw ClientTimeout("mock timeout");
  if (e.rfind("@error", 0) == 0) {
    int status = 500;
    std::istringstream(e.substr(6)) >> status;
    throw ClientError(status, "mock error " + std::to_string(status));
  }
  return e;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                bytes.data(), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string request_body(const LlmRequest& req) {
  json user_content = json::array();
  user_content.push_back({{"type", "text"}, {"text", req.prompt}});
  if (!req.image.empty()) {
    user_content.push_back(
        {{"type", "image_url"},
         {"image_url",
          {{"url", "data:" + req.image_mime + ";base64," + base64_encode(req.image)}}}});
  }
  json body = {{"model", req.model},
               {"messages",
                json::array({{{"role", "system"}, {"content", req.system}},
                             {{"role", "user"}, {"content", user_content}}})}};
  return body.dump();
}

HttpClient::HttpClient(std::string endpoint, std::string api_key)
    : endpoint_(std::move(endpoint)), api_key_(std::move(api_key)) {}

HttpClient HttpClient::from_env(const std::string& default_endpoint) {
  const char* key = std::getenv("FFV_API_KEY");
  if (!key || !*key) {
    throw ConfigInvalid("FFV_API_KEY is not set; it is required for --live");
  }
  const char* ep = std::getenv("FFV_ENDPOINT");
  return HttpClient(ep && *ep ? ep : default_endpoint, key);
}

std::string HttpClient::complete(const LlmRequest& req,
                                 std::chrono::milliseconds timeout) {
  static const std::regex url_re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint_, m, url_re)) {
    throw ConfigInvalid("bad endpoint URL '" + endpoint_ + "'");
  }
  const std::string base = m[1].str();
  const std::string path = m[2].matched ? m[2].str() : "/";

  httplib::Client cli(base);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout - secs);
  cli.set_connection_timeout(secs.count(), usecs.count());
  cli.set_read_timeout(secs.count(), usecs.count());
  cli.set_write_timeout(secs.count(), usecs.count());
  httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
  auto res = cli.Post(path, headers, request_body(req), "application/json");
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::Read || err == httplib::Error::Write ||
        err == httplib::Error::ConnectionTimeout) {
      throw ClientTimeout("request to " + base + " timed out");
    }
    throw ClientError(0, "request to " + base + " failed: " + httplib::to_string(err));
  }
  if (res->status != 200) {
    throw ClientError(res->status, "HTTP " + std::to_string(res->status));
  }
  try {
    const json body = json::parse(res->body);
    return body.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw ClientError(res->status, std::string("unexpected response body: ") + e.what());
  }
}

FrictionEstimate estimate(std::span<const double> query,
                          const EmbeddingCache& cache, LlmClient& client,
                          const EstimateOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  const Retrieval hits = retrieve_topk(cache, query, opts.k);
  LlmRequest req;
  req.model = opts.model;
  req.system = kSystemPrompt;
  req.prompt = build_prompt(hits, opts.context);
  req.image = opts.image;

  FrictionEstimate out;
  out.hits = hits.images;
  out.hits.insert(out.hits.end(), hits.texts.begin(), hits.texts.end());

  auto sleep = opts.sleep ? opts.sleep : [](double s) {
    std::this_thread::sleep_for(std::chrono::duration<double>(s));
  };
  double backoff = opts.backoff_initial_s;
  for (int attempt = 0;; ++attempt) {
    try {
      out.raw = client.complete(req, opts.timeout);
      out.mu_hat = parse_cof(out.raw, opts.mu_max);
      break;
    } catch (const Error& e) {
      const bool retryable = dynamic_cast<const ClientTimeout*>(&e) ||
                             dynamic_cast<const ClientError*>(&e) ||
                             dynamic_cast<const NoMatch*>(&e);
      if (!retryable || attempt >= opts.max_retries) throw;
      out.retry_log.push_back("attempt " + std::to_string(attempt + 1) + ": " + e.what());
      ++out.retries;
      sleep(backoff);
      backoff *= 2.0;
    }
  }
  out.latency_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

KFoldResult kfold_rmse(std::span<const LabeledSample> data, int k,
                       const Predictor& predict, std::uint64_t seed) {
  if (k < 2) throw ConfigInvalid("k-fold needs k >= 2");
  if (data.size() < static_cast<std::size_t>(k)) {
    throw TooFewSamples("k-fold with k = " + std::to_string(k) + " needs at least " +
                        std::to_string(k) + " samples, got " + std::to_string(data.size()));
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "kfold");
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = std::min(i - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i)));
    std::swap(order[i - 1], order[j]);
  }
  KFoldResult out;
  out.folds.assign(static_cast<std::size_t>(k), {});
  for (std::size_t i = 0; i < order.size(); ++i) out.folds[i % k].push_back(order[i]);

  for (const auto& fold : out.folds) {
    std::vector<bool> held(data.size(), false);
    for (auto i : fold) held[i] = true;
    std::vector<LabeledSample> train;
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (!held[i]) train.push_back(data[i]);
    }
    double se = 0.0;
    for (auto i : fold) {
      const double e = predict(train, data[i]) - data[i].truth;
      se += e * e;
    }
    out.fold_rmse.push_back(std::sqrt(se / static_cast<double>(fold.size())));
  }
  out.mean = std::accumulate(out.fold_rmse.begin(), out.fold_rmse.end(), 0.0) / k;
  double var = 0.0;
  for (double r : out.fold_rmse) var += (r - out.mean) * (r - out.mean);
  out.std = std::sqrt(var / k);
  return out;
}

Predictor nearest_neighbour_predictor(int k) {
  return [k](std::span<const LabeledSample> train, const LabeledSample& q) {
    std::vector<std::pair<double, std::size_t>> scored;
    for (std::size_t i = 0; i < train.size(); ++i) {
      scored.emplace_back(cosine_similarity(q.embedding, train[i].embedding), i);
    }
    std::sort(scored.begin(), scored.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return train[a.second].id < train[b.second].id;
    });
    double wsum = 0.0, acc = 0.0;
    for (std::size_t i = 0; i < scored.size() && i < static_cast<std::size_t>(k); ++i) {
      const double w = std::max(scored[i].first, 1e-6);
      wsum += w;
      acc += w * train[scored[i].second].truth;
    }
    return acc / wsum;
  };
}

}  // namespace wiplab::ffv
