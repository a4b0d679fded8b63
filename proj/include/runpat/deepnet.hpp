#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "runpat/common.hpp"

namespace runpat::nn {

// One sample is a 2D buffer: rows = time steps, cols = channels. Point-vector
// inputs use a single row. A batch is a vector of samples so batch-level
// statistics (batchnorm, loss) can span samples of equal shape.
using Mat = Eigen::MatrixXd;
using Batch = std::vector<Mat>;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string kind() const = 0;
  // Stochastic layers draw from `rng` in train mode; passing a freshly seeded
  // stream reproduces the masks, which keeps finite differences well-posed.
  virtual Batch forward(const Batch& x, bool train, RngStream* rng) = 0;
  // Consumes dL/d(output), returns dL/d(input), accumulates parameter grads.
  virtual Batch backward(const Batch& dout) = 0;
  virtual std::vector<Mat*> params() { return {}; }
  virtual std::vector<Mat*> grads() { return {}; }
  virtual std::vector<Mat*> buffers() { return {}; }  // e.g. running stats
  virtual double reg_loss() const { return 0; }
  void zero_grad();
};

class Dense : public Layer {
 public:
  Dense(int in, int out, double l2 = 0, std::uint64_t seed = 0);
  std::string kind() const override { return "dense"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  std::vector<Mat*> params() override { return {&W, &b}; }
  std::vector<Mat*> grads() override { return {&dW, &db}; }
  double reg_loss() const override;
  Mat W, b, dW, db;
  double l2 = 0;

 private:
  Batch x_;
};

// Convolution along the time axis, stride 1, zero "same" padding, odd kernel.
class Conv1DTime : public Layer {
 public:
  Conv1DTime(int in_channels, int filters, int kernel, std::uint64_t seed = 0);
  std::string kind() const override { return "conv1d"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  std::vector<Mat*> params() override { return {&W, &b}; }
  std::vector<Mat*> grads() override { return {&dW, &db}; }
  Mat W, b, dW, db;  // W: (kernel*in_channels) x filters
  int in_channels, filters, kernel;

 private:
  Batch cols_;
  std::vector<int> rows_;
};

class MaxPool1DSame : public Layer {
 public:
  explicit MaxPool1DSame(int window) : window(window) {}
  std::string kind() const override { return "maxpool1d"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  int window;

 private:
  Batch x_;
  std::vector<Eigen::MatrixXi> argmax_;
};

// Inception-style residual block: parallel time convs (kernels 1/3/5) plus a
// maxpool+1x1 path, concatenated to `filters` channels, added to a 1x1
// projection of the input, ReLU.
class InceptionResidual : public Layer {
 public:
  InceptionResidual(int in_channels, int filters, std::uint64_t seed = 0);
  std::string kind() const override { return "inception_residual"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  std::vector<Mat*> params() override;
  std::vector<Mat*> grads() override;
  int filters;
  Conv1DTime conv1, conv3, conv5, pool_proj, shortcut;
  MaxPool1DSame pool;

 private:
  Batch sum_;  // pre-ReLU activations
};

class SqueezeExcitation : public Layer {
 public:
  SqueezeExcitation(int channels, int reduction = 16, std::uint64_t seed = 0);
  std::string kind() const override { return "squeeze_excitation"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  std::vector<Mat*> params() override { return {&W1, &b1, &W2, &b2}; }
  std::vector<Mat*> grads() override { return {&dW1, &db1, &dW2, &db2}; }
  Mat W1, b1, W2, b2, dW1, db1, dW2, db2;
  int channels, hidden;

 private:
  Batch x_, squeeze_, pre1_, gate_;
};

class GaussianNoise : public Layer {
 public:
  explicit GaussianNoise(double sigma) : sigma(sigma) {}
  std::string kind() const override { return "gaussian_noise"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override { return dout; }
  double sigma;
};

class Dropout : public Layer {
 public:
  explicit Dropout(double rate);
  std::string kind() const override { return "dropout"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  double rate;

 private:
  Batch mask_;
  bool train_ = false;
};

class BatchNorm : public Layer {
 public:
  explicit BatchNorm(int channels, double momentum = 0.99, double eps = 1e-5);
  std::string kind() const override { return "batchnorm"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  std::vector<Mat*> params() override { return {&gamma, &beta}; }
  std::vector<Mat*> grads() override { return {&dgamma, &dbeta}; }
  std::vector<Mat*> buffers() override { return {&running_mean, &running_var}; }
  Mat gamma, beta, dgamma, dbeta, running_mean, running_var;
  double momentum, eps;

 private:
  Batch xhat_;
  Mat mean_, var_;
  double count_ = 0;
};

enum class Act { relu, silu, sigmoid };

class Activation : public Layer {
 public:
  explicit Activation(Act a) : act(a) {}
  std::string kind() const override { return "activation"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  Act act;

 private:
  Batch x_;
};

// (T x C) -> (1 x T*C), index t*C + c.
class Flatten : public Layer {
 public:
  std::string kind() const override { return "flatten"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;

 private:
  std::vector<std::pair<int, int>> shape_;
};

class Identity : public Layer {
 public:
  std::string kind() const override { return "identity"; }
  Batch forward(const Batch& x, bool, RngStream*) override { return x; }
  Batch backward(const Batch& dout) override { return dout; }
};

// One LSTM direction over the time axis; standard i/f/g/o gates, variational
// input and recurrent dropout (one mask per sequence).
struct LstmDirection {
  Mat Wx, Wh, b, dWx, dWh, db;  // Wx: D x 4U, Wh: U x 4U
  int in_dim = 0, units = 0;
  bool reverse = false;
  double in_dropout = 0, rec_dropout = 0;

  LstmDirection() = default;
  LstmDirection(int in_dim, int units, bool reverse, double in_dropout, double rec_dropout,
                std::uint64_t seed);
  Mat forward(const Mat& x, bool train, RngStream* rng, bool return_seq);
  // dy: (T x U) when return_seq else (1 x U); returns dx (T x D)
  Mat backward(const Mat& dy, bool return_seq);

  struct Cache;
  std::vector<std::shared_ptr<Cache>> caches_;  // one per sample, forward order
  int next_cache_ = 0;
};

class BiLSTM : public Layer {
 public:
  BiLSTM(int in_dim, int units, double dropout, bool return_seq, std::uint64_t seed);
  std::string kind() const override { return "bilstm"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  std::vector<Mat*> params() override;
  std::vector<Mat*> grads() override;
  LstmDirection fwd, bwd;
  int units;
  bool return_seq;
};

// Convolutional LSTM over a 1D articulation axis, run per time step, both
// directions, sequences returned. Input rows are flattened (A x C) maps.
class BiConvLSTM1D : public Layer {
 public:
  BiConvLSTM1D(int spatial, int in_channels, int filters, int kernel,
               double recurrent_dropout, std::uint64_t seed);
  std::string kind() const override { return "biconvlstm1d"; }
  Batch forward(const Batch& x, bool train, RngStream* rng) override;
  Batch backward(const Batch& dout) override;
  std::vector<Mat*> params() override;
  std::vector<Mat*> grads() override;

  struct Direction {
    Mat Wx, Wh, b, dWx, dWh, db;  // Wx: (kernel*C) x 4F, Wh: (kernel*F) x 4F
    bool reverse = false;
    struct Cache;
    std::vector<std::shared_ptr<Cache>> caches_;
    int next_cache_ = 0;
  };
  Direction fdir, bdir;
  int spatial, in_channels, filters, kernel;
  double rec_dropout;
};

// --- network graph -----------------------------------------------------------

struct TrainConfig {
  double lr = 1e-4;
  double rho = 0.9;
  int grad_accumulation = 2;
  int epochs = 300;
  int batch_size = 32;
  bool class_balanced = true;
  int patience = 30;  // early stop on training-loss plateau
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochStats {
  double loss = 0, acc = 0, pre = 0, rec = 0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

class Network {
 public:
  static constexpr int kStanceInput = -1;
  static constexpr int kPointsInput = -2;

  int add(std::string name, std::unique_ptr<Layer> layer, std::vector<int> inputs);

  // Returns per-sample probabilities; the last node must emit (1x1) logits.
  Eigen::VectorXd forward(const Batch& stance, const Batch* points, bool train,
                          RngStream* rng = nullptr);
  double bce_loss(const Eigen::VectorXd& target) const;
  void backward_bce(const Eigen::VectorXd& target);  // seeds (p - y)/B on logits
  void backward_output();                            // seeds d(prob)/d(logit)
  void zero_grad();

  std::vector<Mat*> parameters();
  std::vector<Mat*> gradients();
  std::vector<Mat*> buffers();
  double reg_loss() const;

  const Batch& stance_grad() const { return d_stance_; }
  const Batch& points_grad() const { return d_points_; }
  const Mat& node_output(const std::string& name, int sample) const;
  const Mat& node_grad(const std::string& name, int sample) const;
  bool has_node(const std::string& name) const;
  std::string node_kind(const std::string& name) const;

  int expect_rows = 0, expect_cols = 0;
  int expect_points = -1;  // -1 = no points branch

  // Builder metadata so a trained network can be rebuilt from disk.
  struct ArchInfo {
    std::string type;  // "cnn" | "lstm"; empty for hand-assembled graphs
    int n_structures = 0, n_channels = 0, n_points = -1;
    double l2 = 0;
    std::uint64_t seed = 0;
  };
  ArchInfo arch;

 private:
  void backprop_from(Batch seed);
  struct NodeState {
    std::string name;
    std::unique_ptr<Layer> layer;
    std::vector<int> inputs;
    Batch out, dout;
    std::vector<int> in_widths;
  };
  std::vector<NodeState> nodes_;
  Batch d_stance_, d_points_;
  Eigen::VectorXd probs_;
  bool recorded_ = false;
  bool train_recorded_ = false;
  bool had_points_ = false;
  RngStream own_rng_{0x9e3779b97f4a7c15ULL};
};

// Dual-branch CNN: noisy stance branch through two Inception-residual blocks
// with SE gating, optional point-value branch, shared dense head.
Network build_cnn(int n_structures, int n_channels, int n_points, std::uint64_t seed,
                  double l2 = 1e-4);
// BiConvLSTM over articulations followed by a BiLSTM over time.
Network build_lstm_net(int n_structures, int n_channels, std::uint64_t seed);

TrainHistory train(Network& net, const Batch& stance, const Batch* points,
                   const Eigen::VectorXi& labels, const TrainConfig& config);

void save_network(const Network& net, const std::filesystem::path& json_path);
Network load_network(const std::filesystem::path& json_path);

}  // namespace runpat::nn
