#pragma once

// Small dense/conv network kernel with exact reverse-mode gradients. Batches
// are row-major matrices: one sample per row. Conv1d activations are stored
// channel-major (index = channel * length + position) so that flattening
// matches the usual (C, L) memory order.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "wiplab/rng.hpp"

namespace wiplab::nn {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kLeakySlope = 0.01;

enum class LayerKind { Dense, LeakyRelu, Relu, Tanh, Conv1d };

struct LayerSpec {
  LayerKind kind = LayerKind::Dense;
  int in = 0;   // dense: input width
  int out = 0;  // dense: output width
  // conv1d
  int in_channels = 0;
  int kernels = 0;
  int kernel_size = 0;
  int stride = 1;
  int padding = 0;
  int length = 0;  // input sequence length

  int conv_out_length() const {
    return (length + 2 * padding - kernel_size) / stride + 1;
  }
  bool operator==(const LayerSpec&) const = default;
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;

  int input_width() const;
  int output_width() const;
  bool operator==(const NetworkSpec&) const = default;
};

LayerSpec dense(int in, int out);
LayerSpec leaky_relu();
LayerSpec relu();
LayerSpec tanh_layer();
LayerSpec conv1d(int in_channels, int kernels, int kernel_size, int stride,
                 int padding, int length);

// Table-I style architectures.
NetworkSpec actor_spec();
NetworkSpec critic_spec();
NetworkSpec encoder_spec();
NetworkSpec adaptation_spec(int channels = 9, int history = 40);

nlohmann::json to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

// Trainable parameters including biases.
std::int64_t param_count(const NetworkSpec& spec);

struct ParamTensor {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;

  explicit ParamTensor(std::vector<int> shape = {});
  std::size_t size() const { return value.size(); }
  void zero_grad();
};

// Activations recorded by a training forward pass.
struct Tape {
  std::vector<Matrix> inputs;  // input to each layer
  Matrix output;
};

class Network {
 public:
  Network() = default;
  explicit Network(NetworkSpec spec);

  const NetworkSpec& spec() const { return spec_; }

  // Orthogonal init scaled by sqrt(2) on hidden dense layers and by
  // `output_gain` on the last dense layer; biases zero.
  void init_orthogonal(Rng& rng, double output_gain);

  // Pure forward pass; throws ShapeMismatch on a wrong input width.
  Matrix forward(const Matrix& input) const;
  Vector forward(std::span<const double> input) const;

  Tape forward_tape(const Matrix& input) const;
  // Accumulates parameter gradients and returns d(loss)/d(input).
  Matrix backward(const Tape& tape, const Matrix& output_grad);

  std::vector<ParamTensor>& params() { return params_; }
  const std::vector<ParamTensor>& params() const { return params_; }
  std::int64_t size() const;
  std::vector<double> flat_params() const;
  void set_flat_params(std::span<const double> flat);
  std::vector<double> flat_grads() const;
  void zero_grad();

 private:
  NetworkSpec spec_;
  std::vector<ParamTensor> params_;
  std::vector<int> param_index_;  // first param tensor of each layer, or -1
};

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  std::vector<double> m;
  std::vector<double> v;
};

// One bias-corrected Adam step on a flat parameter block; `step` is 1-based.
void adam_update(std::span<double> params, std::span<const double> grads,
                 AdamMoments& moments, const AdamConfig& cfg,
                 std::int64_t step);

// Adam over a set of tensors, moments keyed by tensor order.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}
  void step(const std::vector<ParamTensor*>& tensors);
  std::int64_t steps() const { return step_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  const AdamConfig& config() const { return cfg_; }

  // Flattened moments for checkpointing.
  std::vector<double> flat_m() const;
  std::vector<double> flat_v() const;
  void restore(std::int64_t steps, std::span<const double> m,
               std::span<const double> v,
               const std::vector<ParamTensor*>& tensors);

 private:
  AdamConfig cfg_;
  std::int64_t step_ = 0;
  std::vector<AdamMoments> moments_;
};

// Versioned binary container: magic, version, endianness tag, JSON header
// (network specs, spec hash, blob layout, metadata), then little-endian
// float64 blobs in header order.
struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::map<std::string, NetworkSpec> specs;
  std::map<std::string, std::vector<double>> blobs;

  void put_network(const std::string& name, const Network& net);
  // Throws CheckpointLoad when the network or its blob is missing.
  Network network(const std::string& name) const;
  bool has_network(const std::string& name) const {
    return specs.count(name) > 0;
  }
  const std::vector<double>& blob(const std::string& name) const;

  std::string spec_hash() const;
  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);
  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace wiplab::nn
