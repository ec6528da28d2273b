#include "wiplab/nn.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <Eigen/QR>

#include "wiplab/errors.hpp"

namespace wiplab::nn {
namespace {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Dense: return "dense";
    case LayerKind::LeakyRelu: return "leaky_relu";
    case LayerKind::Relu: return "relu";
    case LayerKind::Tanh: return "tanh";
    case LayerKind::Conv1d: return "conv1d";
  }
  return "?";
}

LayerKind kind_from_name(const std::string& s) {
  if (s == "dense") return LayerKind::Dense;
  if (s == "leaky_relu") return LayerKind::LeakyRelu;
  if (s == "relu") return LayerKind::Relu;
  if (s == "tanh") return LayerKind::Tanh;
  if (s == "conv1d") return LayerKind::Conv1d;
  throw ShapeMismatch("unknown layer kind '" + s + "'");
}

int layer_out_width(const LayerSpec& l, int in_width) {
  switch (l.kind) {
    case LayerKind::Dense: return l.out;
    case LayerKind::Conv1d: return l.kernels * l.conv_out_length();
    default: return in_width;
  }
}

Matrix im2col(const Matrix& x, const LayerSpec& l) {
  const int lout = l.conv_out_length();
  const int width = l.in_channels * l.kernel_size;
  Matrix cols = Matrix::Zero(x.rows() * lout, width);
  for (Eigen::Index s = 0; s < x.rows(); ++s) {
    for (int pos = 0; pos < lout; ++pos) {
      double* row = cols.row(s * lout + pos).data();
      for (int c = 0; c < l.in_channels; ++c) {
        for (int k = 0; k < l.kernel_size; ++k) {
          const int src = pos * l.stride + k - l.padding;
          if (src >= 0 && src < l.length) {
            row[c * l.kernel_size + k] = x(s, c * l.length + src);
          }
        }
      }
    }
  }
  return cols;
}

std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(buf), std::end(buf));
  }
  out.insert(out.end(), std::begin(buf), std::end(buf));
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) {
    throw CheckpointLoad("checkpoint truncated");
  }
  std::uint8_t buf[sizeof(T)];
  std::memcpy(buf, bytes.data() + pos, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(std::begin(buf), std::end(buf));
  }
  pos += sizeof(T);
  T v;
  std::memcpy(&v, buf, sizeof(T));
  return v;
}

constexpr char kMagic[8] = {'W', 'I', 'P', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint32_t kEndianTag = 0x01020304;

}  // namespace

int NetworkSpec::input_width() const {
  if (layers.empty()) return 0;
  const LayerSpec& f = layers.front();
  if (f.kind == LayerKind::Dense) return f.in;
  if (f.kind == LayerKind::Conv1d) return f.in_channels * f.length;
  return 0;
}

int NetworkSpec::output_width() const {
  int w = input_width();
  for (const auto& l : layers) w = layer_out_width(l, w);
  return w;
}

LayerSpec dense(int in, int out) {
  LayerSpec l;
  l.kind = LayerKind::Dense;
  l.in = in;
  l.out = out;
  return l;
}
LayerSpec leaky_relu() { return LayerSpec{LayerKind::LeakyRelu}; }
LayerSpec relu() { return LayerSpec{LayerKind::Relu}; }
LayerSpec tanh_layer() { return LayerSpec{LayerKind::Tanh}; }
LayerSpec conv1d(int in_channels, int kernels, int kernel_size, int stride,
                 int padding, int length) {
  LayerSpec l;
  l.kind = LayerKind::Conv1d;
  l.in_channels = in_channels;
  l.kernels = kernels;
  l.kernel_size = kernel_size;
  l.stride = stride;
  l.padding = padding;
  l.length = length;
  return l;
}

NetworkSpec actor_spec() {
  return {{dense(10, 64), leaky_relu(), dense(64, 64), leaky_relu(),
           dense(64, 1)}};
}
NetworkSpec critic_spec() { return actor_spec(); }
NetworkSpec encoder_spec() {
  return {{dense(1, 2), leaky_relu(), dense(2, 1)}};
}
NetworkSpec adaptation_spec(int channels, int history) {
  LayerSpec conv = conv1d(channels, 64, 3, 1, 1, history);
  const int flat = 64 * conv.conv_out_length();
  return {{conv, dense(flat, 256), relu(), dense(256, 64), relu(),
           dense(64, 8), relu(), dense(8, 1)}};
}

nlohmann::json to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : spec.layers) {
    nlohmann::json j{{"kind", kind_name(l.kind)}};
    if (l.kind == LayerKind::Dense) {
      j["in"] = l.in;
      j["out"] = l.out;
    } else if (l.kind == LayerKind::Conv1d) {
      j["in_channels"] = l.in_channels;
      j["kernels"] = l.kernels;
      j["kernel_size"] = l.kernel_size;
      j["stride"] = l.stride;
      j["padding"] = l.padding;
      j["length"] = l.length;
    }
    layers.push_back(std::move(j));
  }
  return nlohmann::json{{"layers", layers}};
}

NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  for (const auto& lj : j.at("layers")) {
    LayerSpec l;
    l.kind = kind_from_name(lj.at("kind").get<std::string>());
    if (l.kind == LayerKind::Dense) {
      l.in = lj.at("in");
      l.out = lj.at("out");
    } else if (l.kind == LayerKind::Conv1d) {
      l.in_channels = lj.at("in_channels");
      l.kernels = lj.at("kernels");
      l.kernel_size = lj.at("kernel_size");
      l.stride = lj.at("stride");
      l.padding = lj.at("padding");
      l.length = lj.at("length");
    }
    spec.layers.push_back(l);
  }
  return spec;
}

std::int64_t param_count(const NetworkSpec& spec) {
  std::int64_t n = 0;
  for (const auto& l : spec.layers) {
    if (l.kind == LayerKind::Dense) {
      n += static_cast<std::int64_t>(l.in) * l.out + l.out;
    } else if (l.kind == LayerKind::Conv1d) {
      n += static_cast<std::int64_t>(l.kernels) * l.in_channels *
               l.kernel_size + l.kernels;
    }
  }
  return n;
}

ParamTensor::ParamTensor(std::vector<int> shp) : shape(std::move(shp)) {
  std::size_t n = shape.empty() ? 0 : 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  value.assign(n, 0.0);
  grad.assign(n, 0.0);
}

void ParamTensor::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

Network::Network(NetworkSpec spec) : spec_(std::move(spec)) {
  int width = spec_.input_width();
  for (const auto& l : spec_.layers) {
    if (l.kind == LayerKind::Dense) {
      if (l.in != width || l.in <= 0 || l.out <= 0) {
        throw ShapeMismatch("dense layer input width does not chain");
      }
      param_index_.push_back(static_cast<int>(params_.size()));
      params_.emplace_back(std::vector<int>{l.out, l.in});
      params_.emplace_back(std::vector<int>{l.out});
    } else if (l.kind == LayerKind::Conv1d) {
      if (l.in_channels * l.length != width || l.kernels <= 0 ||
          l.kernel_size <= 0 || l.stride <= 0 || l.conv_out_length() <= 0) {
        throw ShapeMismatch("conv1d layer does not chain");
      }
      param_index_.push_back(static_cast<int>(params_.size()));
      params_.emplace_back(
          std::vector<int>{l.kernels, l.in_channels * l.kernel_size});
      params_.emplace_back(std::vector<int>{l.kernels});
    } else {
      param_index_.push_back(-1);
    }
    width = layer_out_width(l, width);
  }
}

void Network::init_orthogonal(Rng& rng, double output_gain) {
  int last_dense = -1;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (spec_.layers[i].kind == LayerKind::Dense) last_dense = static_cast<int>(i);
  }
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const int pi = param_index_[i];
    if (pi < 0) continue;
    ParamTensor& w = params_[pi];
    const int rows = w.shape[0];
    const int cols = w.shape[1];
    const int tall = std::max(rows, cols);
    const int thin = std::min(rows, cols);
    Matrix g(tall, thin);
    for (Eigen::Index r = 0; r < tall; ++r)
      for (Eigen::Index c = 0; c < thin; ++c) g(r, c) = standard_normal(rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(tall, thin);
    const Matrix rmat = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int c = 0; c < thin; ++c) {
      if (rmat(c, c) < 0) q.col(c) *= -1.0;
    }
    if (rows < cols) q.transposeInPlace();
    const double gain = static_cast<int>(i) == last_dense
                            ? output_gain
                            : (spec_.layers[i].kind == LayerKind::Conv1d
                                   ? 1.0
                                   : std::sqrt(2.0));
    MutMap(w.value.data(), rows, cols) = gain * q;
    std::fill(params_[pi + 1].value.begin(), params_[pi + 1].value.end(), 0.0);
  }
}

Matrix Network::forward(const Matrix& input) const {
  return forward_tape(input).output;
}

Vector Network::forward(std::span<const double> input) const {
  Matrix x(1, static_cast<Eigen::Index>(input.size()));
  for (std::size_t i = 0; i < input.size(); ++i) x(0, i) = input[i];
  return forward(x).row(0).transpose();
}

Tape Network::forward_tape(const Matrix& input) const {
  if (input.cols() != spec_.input_width()) {
    throw ShapeMismatch("network input width " + std::to_string(input.cols()) +
                        " != expected " +
                        std::to_string(spec_.input_width()));
  }
  Tape tape;
  tape.inputs.reserve(spec_.layers.size());
  Matrix x = input;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    const LayerSpec& l = spec_.layers[i];
    tape.inputs.push_back(x);
    switch (l.kind) {
      case LayerKind::Dense: {
        const ParamTensor& w = params_[param_index_[i]];
        const ParamTensor& b = params_[param_index_[i] + 1];
        ConstMap wm(w.value.data(), l.out, l.in);
        Eigen::Map<const Eigen::RowVectorXd> bm(b.value.data(), l.out);
        Matrix y = x * wm.transpose();
        y.rowwise() += bm;
        x = std::move(y);
        break;
      }
      case LayerKind::LeakyRelu:
        x = x.unaryExpr([](double v) { return v > 0 ? v : kLeakySlope * v; });
        break;
      case LayerKind::Relu:
        x = x.cwiseMax(0.0);
        break;
      case LayerKind::Tanh:
        x = x.array().tanh().matrix();
        break;
      case LayerKind::Conv1d: {
        const ParamTensor& w = params_[param_index_[i]];
        const ParamTensor& b = params_[param_index_[i] + 1];
        const int lout = l.conv_out_length();
        const int width = l.in_channels * l.kernel_size;
        ConstMap wm(w.value.data(), l.kernels, width);
        Eigen::Map<const Eigen::RowVectorXd> bm(b.value.data(), l.kernels);
        Matrix y2 = im2col(x, l) * wm.transpose();
        y2.rowwise() += bm;
        Matrix y(x.rows(), l.kernels * lout);
        for (Eigen::Index s = 0; s < x.rows(); ++s)
          for (int pos = 0; pos < lout; ++pos)
            for (int c = 0; c < l.kernels; ++c)
              y(s, c * lout + pos) = y2(s * lout + pos, c);
        x = std::move(y);
        break;
      }
    }
  }
  tape.output = std::move(x);
  return tape;
}

Matrix Network::backward(const Tape& tape, const Matrix& output_grad) {
  if (output_grad.rows() != tape.output.rows() ||
      output_grad.cols() != tape.output.cols()) {
    throw ShapeMismatch("output gradient shape does not match forward output");
  }
  Matrix g = output_grad;
  for (std::size_t ii = spec_.layers.size(); ii-- > 0;) {
    const LayerSpec& l = spec_.layers[ii];
    const Matrix& x = tape.inputs[ii];
    switch (l.kind) {
      case LayerKind::Dense: {
        ParamTensor& w = params_[param_index_[ii]];
        ParamTensor& b = params_[param_index_[ii] + 1];
        MutMap(w.grad.data(), l.out, l.in).noalias() += g.transpose() * x;
        Eigen::Map<Eigen::RowVectorXd>(b.grad.data(), l.out) +=
            g.colwise().sum();
        g = g * ConstMap(w.value.data(), l.out, l.in);
        break;
      }
      case LayerKind::LeakyRelu:
        g = g.cwiseProduct(
            x.unaryExpr([](double v) { return v > 0 ? 1.0 : kLeakySlope; }));
        break;
      case LayerKind::Relu:
        g = g.cwiseProduct(
            x.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; }));
        break;
      case LayerKind::Tanh:
        g = g.cwiseProduct(x.unaryExpr([](double v) {
          const double t = std::tanh(v);
          return 1.0 - t * t;
        }));
        break;
      case LayerKind::Conv1d: {
        ParamTensor& w = params_[param_index_[ii]];
        ParamTensor& b = params_[param_index_[ii] + 1];
        const int lout = l.conv_out_length();
        const int width = l.in_channels * l.kernel_size;
        Matrix g2(x.rows() * lout, l.kernels);
        for (Eigen::Index s = 0; s < x.rows(); ++s)
          for (int pos = 0; pos < lout; ++pos)
            for (int c = 0; c < l.kernels; ++c)
              g2(s * lout + pos, c) = g(s, c * lout + pos);
        const Matrix cols = im2col(x, l);
        MutMap(w.grad.data(), l.kernels, width).noalias() +=
            g2.transpose() * cols;
        Eigen::Map<Eigen::RowVectorXd>(b.grad.data(), l.kernels) +=
            g2.colwise().sum();
        const Matrix gcols = g2 * ConstMap(w.value.data(), l.kernels, width);
        Matrix gx = Matrix::Zero(x.rows(), x.cols());
        for (Eigen::Index s = 0; s < x.rows(); ++s)
          for (int pos = 0; pos < lout; ++pos)
            for (int c = 0; c < l.in_channels; ++c)
              for (int k = 0; k < l.kernel_size; ++k) {
                const int src = pos * l.stride + k - l.padding;
                if (src >= 0 && src < l.length) {
                  gx(s, c * l.length + src) +=
                      gcols(s * lout + pos, c * l.kernel_size + k);
                }
              }
        g = std::move(gx);
        break;
      }
    }
  }
  return g;
}

std::int64_t Network::size() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += static_cast<std::int64_t>(p.size());
  return n;
}

std::vector<double> Network::flat_params() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(size()));
  for (const auto& p : params_) out.insert(out.end(), p.value.begin(), p.value.end());
  return out;
}

void Network::set_flat_params(std::span<const double> flat) {
  if (static_cast<std::int64_t>(flat.size()) != size()) {
    throw ShapeMismatch("flat parameter length does not match network");
  }
  std::size_t off = 0;
  for (auto& p : params_) {
    std::copy_n(flat.begin() + off, p.size(), p.value.begin());
    off += p.size();
  }
}

std::vector<double> Network::flat_grads() const {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(size()));
  for (const auto& p : params_) out.insert(out.end(), p.grad.begin(), p.grad.end());
  return out;
}

void Network::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void adam_update(std::span<double> params, std::span<const double> grads,
                 AdamMoments& moments, const AdamConfig& cfg,
                 std::int64_t step) {
  if (grads.size() != params.size()) {
    throw ShapeMismatch("adam: gradient length differs from parameters");
  }
  if (moments.m.empty()) {
    moments.m.assign(params.size(), 0.0);
    moments.v.assign(params.size(), 0.0);
  }
  if (moments.m.size() != params.size() || moments.v.size() != params.size()) {
    throw ShapeMismatch("adam: moment length differs from parameters");
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * grads[i];
    moments.v[i] =
        cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double m_hat = moments.m[i] / c1;
    const double v_hat = moments.v[i] / c2;
    params[i] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

void Adam::step(const std::vector<ParamTensor*>& tensors) {
  if (moments_.empty()) moments_.resize(tensors.size());
  if (moments_.size() != tensors.size()) {
    throw ShapeMismatch("adam: tensor set changed between steps");
  }
  ++step_;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    adam_update(tensors[i]->value, tensors[i]->grad, moments_[i], cfg_, step_);
  }
}

std::vector<double> Adam::flat_m() const {
  std::vector<double> out;
  for (const auto& m : moments_) out.insert(out.end(), m.m.begin(), m.m.end());
  return out;
}

std::vector<double> Adam::flat_v() const {
  std::vector<double> out;
  for (const auto& m : moments_) out.insert(out.end(), m.v.begin(), m.v.end());
  return out;
}

void Adam::restore(std::int64_t steps, std::span<const double> m,
                   std::span<const double> v,
                   const std::vector<ParamTensor*>& tensors) {
  step_ = steps;
  moments_.assign(tensors.size(), {});
  if (m.empty()) return;
  std::size_t off = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::size_t n = tensors[i]->size();
    if (off + n > m.size() || off + n > v.size()) {
      throw CheckpointLoad("optimizer moments do not match parameters");
    }
    moments_[i].m.assign(m.begin() + off, m.begin() + off + n);
    moments_[i].v.assign(v.begin() + off, v.begin() + off + n);
    off += n;
  }
}

void Checkpoint::put_network(const std::string& name, const Network& net) {
  specs[name] = net.spec();
  blobs["net/" + name] = net.flat_params();
}

Network Checkpoint::network(const std::string& name) const {
  auto it = specs.find(name);
  if (it == specs.end()) {
    throw CheckpointLoad("checkpoint has no network '" + name + "'");
  }
  Network net(it->second);
  net.set_flat_params(blob("net/" + name));
  return net;
}

const std::vector<double>& Checkpoint::blob(const std::string& name) const {
  auto it = blobs.find(name);
  if (it == blobs.end()) {
    throw CheckpointLoad("checkpoint has no blob '" + name + "'");
  }
  return it->second;
}

std::string Checkpoint::spec_hash() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, spec] : specs) j[name] = to_json(spec);
  return fnv1a_hex(j.dump());
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  nlohmann::json header;
  header["format"] = "wiplab-checkpoint";
  header["version"] = kVersion;
  header["endianness"] = "little";
  header["spec_hash"] = spec_hash();
  header["metadata"] = metadata;
  nlohmann::json nets = nlohmann::json::object();
  for (const auto& [name, spec] : specs) nets[name] = to_json(spec);
  header["networks"] = nets;
  nlohmann::json layout = nlohmann::json::array();
  for (const auto& [name, data] : blobs) {
    layout.push_back({{"name", name}, {"count", data.size()}});
  }
  header["blobs"] = layout;
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, kEndianTag);
  put_le<std::uint64_t>(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& [name, data] : blobs) {
    for (double v : data) put_le<double>(out, v);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(kMagic) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointLoad("not a wiplab checkpoint (bad magic)");
  }
  std::size_t pos = sizeof(kMagic);
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kVersion) {
    throw CheckpointLoad("unsupported checkpoint version " +
                         std::to_string(version));
  }
  if (get_le<std::uint32_t>(bytes, pos) != kEndianTag) {
    throw CheckpointLoad("checkpoint endianness tag mismatch");
  }
  const auto len = get_le<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw CheckpointLoad("checkpoint truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + pos, bytes.begin() + pos + len);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointLoad(std::string("bad checkpoint header: ") + e.what());
  }
  pos += len;

  Checkpoint ck;
  ck.metadata = header.at("metadata");
  for (const auto& [name, spec] : header.at("networks").items()) {
    ck.specs[name] = spec_from_json(spec);
  }
  if (ck.spec_hash() != header.at("spec_hash").get<std::string>()) {
    throw CheckpointLoad("checkpoint spec hash mismatch");
  }
  for (const auto& b : header.at("blobs")) {
    const auto count = b.at("count").get<std::size_t>();
    std::vector<double> data(count);
    for (auto& v : data) v = get_le<double>(bytes, pos);
    ck.blobs[b.at("name").get<std::string>()] = std::move(data);
  }
  if (pos != bytes.size()) throw CheckpointLoad("trailing bytes in checkpoint");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write checkpoint " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointLoad("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace wiplab::nn
