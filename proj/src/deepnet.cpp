#include "runpat/deepnet.hpp"

#include <nlohmann/json.hpp>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "runpat/sha256.hpp"

namespace runpat::nn {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void init_fan_in(Mat& W, int fan_in, RngStream& rng) {
  const double lim = std::sqrt(3.0 / fan_in);
  for (int i = 0; i < W.rows(); ++i)
    for (int j = 0; j < W.cols(); ++j) W(i, j) = lim * (2.0 * rng.uniform01() - 1.0);
}

void require_cols(const Mat& x, int cols, const char* who) {
  if (x.cols() != cols)
    fail(Err::ShapeMismatch, std::string(who) + ": expected " + std::to_string(cols) +
                                 " input channels, got " + std::to_string(x.cols()));
}

// im2col over the row axis with zero "same" padding (odd kernel):
// out(r, k*C + c) = x(r + k - pad, c).
Mat im2col_rows(const Mat& x, int kernel) {
  const int R = static_cast<int>(x.rows()), C = static_cast<int>(x.cols());
  const int pad = kernel / 2;
  Mat cols = Mat::Zero(R, kernel * C);
  for (int k = 0; k < kernel; ++k) {
    const int off = k - pad;
    const int lo = std::max(0, -off);
    const int hi = std::min(R, R - off);
    if (hi > lo) cols.block(lo, k * C, hi - lo, C) = x.block(lo + off, 0, hi - lo, C);
  }
  return cols;
}

Mat col2im_rows_add(const Mat& dcols, int kernel, int C) {
  const int R = static_cast<int>(dcols.rows());
  const int pad = kernel / 2;
  Mat dx = Mat::Zero(R, C);
  for (int k = 0; k < kernel; ++k) {
    const int off = k - pad;
    const int lo = std::max(0, -off);
    const int hi = std::min(R, R - off);
    if (hi > lo) dx.block(lo + off, 0, hi - lo, C) += dcols.block(lo, k * C, hi - lo, C);
  }
  return dx;
}

}  // namespace

void Layer::zero_grad() {
  for (Mat* g : grads()) g->setZero();
}

// --- Dense -------------------------------------------------------------------

Dense::Dense(int in, int out, double l2, std::uint64_t seed) : l2(l2) {
  if (in < 1 || out < 1) fail(Err::InvariantViolation, "dense dims must be positive");
  if (l2 < 0) fail(Err::InvariantViolation, "dense l2 must be >= 0");
  W.resize(in, out);
  RngStream rng(seed);
  init_fan_in(W, in, rng);
  b = Mat::Zero(1, out);
  dW = Mat::Zero(in, out);
  db = Mat::Zero(1, out);
}

Batch Dense::forward(const Batch& x, bool, RngStream*) {
  x_ = x;
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    require_cols(x[s], static_cast<int>(W.rows()), "dense");
    out[s] = (x[s] * W).rowwise() + b.row(0);
  }
  return out;
}

Batch Dense::backward(const Batch& dout) {
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    dW += x_[s].transpose() * dout[s];
    db += dout[s].colwise().sum();
    dx[s] = dout[s] * W.transpose();
  }
  dW += 2.0 * l2 * W;
  return dx;
}

double Dense::reg_loss() const { return l2 * W.squaredNorm(); }

// --- Conv1DTime --------------------------------------------------------------

Conv1DTime::Conv1DTime(int in_channels, int filters, int kernel, std::uint64_t seed)
    : in_channels(in_channels), filters(filters), kernel(kernel) {
  if (in_channels < 1 || filters < 1) fail(Err::InvariantViolation, "conv dims must be positive");
  if (kernel < 1 || kernel % 2 == 0)
    fail(Err::InvariantViolation, "conv kernel must be odd and positive");
  W.resize(kernel * in_channels, filters);
  RngStream rng(seed);
  init_fan_in(W, kernel * in_channels, rng);
  b = Mat::Zero(1, filters);
  dW = Mat::Zero(W.rows(), W.cols());
  db = Mat::Zero(1, filters);
}

Batch Conv1DTime::forward(const Batch& x, bool, RngStream*) {
  cols_.clear();
  rows_.clear();
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    require_cols(x[s], in_channels, "conv1d");
    Mat cols = im2col_rows(x[s], kernel);
    out[s] = (cols * W).rowwise() + b.row(0);
    cols_.push_back(std::move(cols));
    rows_.push_back(static_cast<int>(x[s].rows()));
  }
  return out;
}

Batch Conv1DTime::backward(const Batch& dout) {
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    dW += cols_[s].transpose() * dout[s];
    db += dout[s].colwise().sum();
    Mat dcols = dout[s] * W.transpose();
    dx[s] = col2im_rows_add(dcols, kernel, in_channels);
  }
  return dx;
}

// --- MaxPool1DSame -----------------------------------------------------------

Batch MaxPool1DSame::forward(const Batch& x, bool, RngStream*) {
  x_ = x;
  argmax_.clear();
  Batch out(x.size());
  const int half = window / 2;
  for (size_t s = 0; s < x.size(); ++s) {
    const int R = static_cast<int>(x[s].rows()), C = static_cast<int>(x[s].cols());
    Mat y(R, C);
    Eigen::MatrixXi arg(R, C);
    for (int t = 0; t < R; ++t)
      for (int c = 0; c < C; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        int bi = t;
        for (int j = std::max(0, t - half); j <= std::min(R - 1, t + half); ++j)
          if (x[s](j, c) > best) {
            best = x[s](j, c);
            bi = j;
          }
        y(t, c) = best;
        arg(t, c) = bi;
      }
    out[s] = std::move(y);
    argmax_.push_back(std::move(arg));
  }
  return out;
}

Batch MaxPool1DSame::backward(const Batch& dout) {
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    dx[s] = Mat::Zero(x_[s].rows(), x_[s].cols());
    for (int t = 0; t < dout[s].rows(); ++t)
      for (int c = 0; c < dout[s].cols(); ++c) dx[s](argmax_[s](t, c), c) += dout[s](t, c);
  }
  return dx;
}

// --- InceptionResidual -------------------------------------------------------

namespace {

int inception_branch_filters(int filters) {
  if (filters < 4)
    fail(Err::InvariantViolation, "inception block needs at least 4 filters");
  int f1 = std::max(1, static_cast<int>(std::lround(filters / 3.0)));
  while (filters - 3 * f1 < 1) --f1;
  return f1;
}

}  // namespace

InceptionResidual::InceptionResidual(int in_channels, int filters, std::uint64_t seed)
    : filters(filters),
      conv1(in_channels, inception_branch_filters(filters), 1, derive_seed(seed, "c1")),
      conv3(in_channels, inception_branch_filters(filters), 3, derive_seed(seed, "c3")),
      conv5(in_channels, inception_branch_filters(filters), 5, derive_seed(seed, "c5")),
      pool_proj(in_channels, filters - 3 * inception_branch_filters(filters), 1,
                derive_seed(seed, "pp")),
      shortcut(in_channels, filters, 1, derive_seed(seed, "sc")),
      pool(3) {}

Batch InceptionResidual::forward(const Batch& x, bool train, RngStream* rng) {
  Batch a = conv1.forward(x, train, rng);
  Batch b3 = conv3.forward(x, train, rng);
  Batch c5 = conv5.forward(x, train, rng);
  Batch p = pool_proj.forward(pool.forward(x, train, rng), train, rng);
  Batch sc = shortcut.forward(x, train, rng);
  sum_.resize(x.size());
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    Mat cat(x[s].rows(), filters);
    cat << a[s], b3[s], c5[s], p[s];
    sum_[s] = cat + sc[s];
    out[s] = sum_[s].cwiseMax(0.0);
  }
  return out;
}

Batch InceptionResidual::backward(const Batch& dout) {
  const int f1 = static_cast<int>(conv1.filters);
  const int fp = static_cast<int>(pool_proj.filters);
  Batch dsum(dout.size()), da(dout.size()), db3(dout.size()), dc5(dout.size()),
      dp(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    dsum[s] = dout[s].cwiseProduct((sum_[s].array() > 0.0).cast<double>().matrix());
    da[s] = dsum[s].leftCols(f1);
    db3[s] = dsum[s].middleCols(f1, f1);
    dc5[s] = dsum[s].middleCols(2 * f1, f1);
    dp[s] = dsum[s].rightCols(fp);
  }
  Batch dx = shortcut.backward(dsum);
  Batch d1 = conv1.backward(da);
  Batch d3 = conv3.backward(db3);
  Batch d5 = conv5.backward(dc5);
  Batch dpool = pool.backward(pool_proj.backward(dp));
  for (size_t s = 0; s < dx.size(); ++s) dx[s] += d1[s] + d3[s] + d5[s] + dpool[s];
  return dx;
}

std::vector<Mat*> InceptionResidual::params() {
  return {&conv1.W, &conv1.b, &conv3.W,     &conv3.b,     &conv5.W,    &conv5.b,
          &pool_proj.W, &pool_proj.b, &shortcut.W, &shortcut.b};
}

std::vector<Mat*> InceptionResidual::grads() {
  return {&conv1.dW, &conv1.db, &conv3.dW,     &conv3.db,     &conv5.dW,    &conv5.db,
          &pool_proj.dW, &pool_proj.db, &shortcut.dW, &shortcut.db};
}

// --- SqueezeExcitation -------------------------------------------------------

SqueezeExcitation::SqueezeExcitation(int channels, int reduction, std::uint64_t seed)
    : channels(channels), hidden(std::max(1, channels / std::max(1, reduction))) {
  RngStream rng(seed);
  W1.resize(channels, hidden);
  init_fan_in(W1, channels, rng);
  b1 = Mat::Zero(1, hidden);
  W2.resize(hidden, channels);
  init_fan_in(W2, hidden, rng);
  b2 = Mat::Zero(1, channels);
  dW1 = Mat::Zero(channels, hidden);
  db1 = Mat::Zero(1, hidden);
  dW2 = Mat::Zero(hidden, channels);
  db2 = Mat::Zero(1, channels);
}

Batch SqueezeExcitation::forward(const Batch& x, bool, RngStream*) {
  x_ = x;
  squeeze_.clear();
  pre1_.clear();
  gate_.clear();
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    require_cols(x[s], channels, "squeeze_excitation");
    Mat sq = x[s].colwise().mean();                    // 1 x C
    Mat pre1 = sq * W1 + b1;                           // 1 x H
    Mat z = pre1.cwiseMax(0.0);
    Mat gate = (z * W2 + b2).unaryExpr([](double v) { return sigmoid(v); });
    out[s] = (x[s].array().rowwise() * gate.row(0).array()).matrix();
    squeeze_.push_back(std::move(sq));
    pre1_.push_back(std::move(pre1));
    gate_.push_back(std::move(gate));
  }
  return out;
}

Batch SqueezeExcitation::backward(const Batch& dout) {
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    const Mat& g = gate_[s];
    Mat dgate = (dout[s].cwiseProduct(x_[s])).colwise().sum();  // 1 x C
    Mat dpre2 = dgate.cwiseProduct(g).cwiseProduct(Mat::Ones(1, channels) - g);
    Mat z = pre1_[s].cwiseMax(0.0);
    dW2 += z.transpose() * dpre2;
    db2 += dpre2;
    Mat dz = dpre2 * W2.transpose();
    Mat dpre1 = dz.cwiseProduct((pre1_[s].array() > 0.0).cast<double>().matrix());
    dW1 += squeeze_[s].transpose() * dpre1;
    db1 += dpre1;
    Mat dsq = dpre1 * W1.transpose();  // 1 x C
    const double inv_rows = 1.0 / static_cast<double>(x_[s].rows());
    dx[s] = (dout[s].array().rowwise() * g.row(0).array()).matrix();
    dx[s].rowwise() += (inv_rows * dsq).row(0);
  }
  return dx;
}

// --- GaussianNoise / Dropout -------------------------------------------------

Batch GaussianNoise::forward(const Batch& x, bool train, RngStream* rng) {
  if (!train || sigma <= 0) return x;
  if (!rng) fail(Err::InvariantViolation, "gaussian_noise needs an rng in train mode");
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    out[s] = x[s];
    for (int i = 0; i < out[s].rows(); ++i)
      for (int j = 0; j < out[s].cols(); ++j) out[s](i, j) += sigma * rng->normal();
  }
  return out;
}

Dropout::Dropout(double rate) : rate(rate) {
  if (rate < 0 || rate >= 1) fail(Err::InvariantViolation, "dropout rate must be in [0,1)");
}

Batch Dropout::forward(const Batch& x, bool train, RngStream* rng) {
  train_ = train && rate > 0;
  if (!train_) return x;
  if (!rng) fail(Err::InvariantViolation, "dropout needs an rng in train mode");
  mask_.resize(x.size());
  Batch out(x.size());
  const double keep = 1.0 - rate;
  for (size_t s = 0; s < x.size(); ++s) {
    mask_[s].resize(x[s].rows(), x[s].cols());
    for (int i = 0; i < x[s].rows(); ++i)
      for (int j = 0; j < x[s].cols(); ++j)
        mask_[s](i, j) = rng->uniform01() >= rate ? 1.0 / keep : 0.0;
    out[s] = x[s].cwiseProduct(mask_[s]);
  }
  return out;
}

Batch Dropout::backward(const Batch& dout) {
  if (!train_) return dout;
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) dx[s] = dout[s].cwiseProduct(mask_[s]);
  return dx;
}

// --- BatchNorm ---------------------------------------------------------------

BatchNorm::BatchNorm(int channels, double momentum, double eps)
    : momentum(momentum), eps(eps) {
  gamma = Mat::Ones(1, channels);
  beta = Mat::Zero(1, channels);
  dgamma = Mat::Zero(1, channels);
  dbeta = Mat::Zero(1, channels);
  running_mean = Mat::Zero(1, channels);
  running_var = Mat::Ones(1, channels);
}

Batch BatchNorm::forward(const Batch& x, bool train, RngStream*) {
  const int C = static_cast<int>(gamma.cols());
  xhat_.resize(x.size());
  Batch out(x.size());
  if (train) {
    double m = 0;
    Mat sum = Mat::Zero(1, C), sumsq = Mat::Zero(1, C);
    for (const Mat& s : x) {
      require_cols(s, C, "batchnorm");
      m += static_cast<double>(s.rows());
      sum += s.colwise().sum();
      sumsq += s.array().square().matrix().colwise().sum();
    }
    mean_ = sum / m;
    var_ = (sumsq / m - mean_.array().square().matrix()).cwiseMax(0.0);
    count_ = m;
    running_mean = momentum * running_mean + (1.0 - momentum) * mean_;
    running_var = momentum * running_var + (1.0 - momentum) * var_;
  } else {
    mean_ = running_mean;
    var_ = running_var;
    count_ = 0;  // marks eval-mode backward
  }
  Mat inv_std = (var_.array() + eps).sqrt().inverse().matrix();
  for (size_t s = 0; s < x.size(); ++s) {
    require_cols(x[s], C, "batchnorm");
    xhat_[s] = ((x[s].rowwise() - mean_.row(0)).array().rowwise() *
                inv_std.row(0).array())
                   .matrix();
    out[s] = ((xhat_[s].array().rowwise() * gamma.row(0).array()).rowwise() +
              beta.row(0).array())
                 .matrix();
  }
  return out;
}

Batch BatchNorm::backward(const Batch& dout) {
  const int C = static_cast<int>(gamma.cols());
  Mat inv_std = (var_.array() + eps).sqrt().inverse().matrix();
  Batch dxhat(dout.size());
  Mat sum_d = Mat::Zero(1, C), sum_dx = Mat::Zero(1, C);
  for (size_t s = 0; s < dout.size(); ++s) {
    dgamma += dout[s].cwiseProduct(xhat_[s]).colwise().sum();
    dbeta += dout[s].colwise().sum();
    dxhat[s] = (dout[s].array().rowwise() * gamma.row(0).array()).matrix();
    sum_d += dxhat[s].colwise().sum();
    sum_dx += dxhat[s].cwiseProduct(xhat_[s]).colwise().sum();
  }
  Batch dx(dout.size());
  if (count_ > 0) {
    const double inv_m = 1.0 / count_;
    for (size_t s = 0; s < dout.size(); ++s) {
      Mat centered = dxhat[s].rowwise() - (inv_m * sum_d).row(0);
      centered -= (xhat_[s].array().rowwise() * (inv_m * sum_dx).row(0).array()).matrix();
      dx[s] = (centered.array().rowwise() * inv_std.row(0).array()).matrix();
    }
  } else {
    for (size_t s = 0; s < dout.size(); ++s)
      dx[s] = (dxhat[s].array().rowwise() * inv_std.row(0).array()).matrix();
  }
  return dx;
}

// --- Activation / Flatten ----------------------------------------------------

Batch Activation::forward(const Batch& x, bool, RngStream*) {
  x_ = x;
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    switch (act) {
      case Act::relu: out[s] = x[s].cwiseMax(0.0); break;
      case Act::silu:
        out[s] = x[s].unaryExpr([](double v) { return v * sigmoid(v); });
        break;
      case Act::sigmoid:
        out[s] = x[s].unaryExpr([](double v) { return sigmoid(v); });
        break;
    }
  }
  return out;
}

Batch Activation::backward(const Batch& dout) {
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    Mat g;
    switch (act) {
      case Act::relu: g = (x_[s].array() > 0.0).cast<double>().matrix(); break;
      case Act::silu:
        g = x_[s].unaryExpr([](double v) {
          const double sg = sigmoid(v);
          return sg * (1.0 + v * (1.0 - sg));
        });
        break;
      case Act::sigmoid:
        g = x_[s].unaryExpr([](double v) {
          const double sg = sigmoid(v);
          return sg * (1.0 - sg);
        });
        break;
    }
    dx[s] = dout[s].cwiseProduct(g);
  }
  return dx;
}

Batch Flatten::forward(const Batch& x, bool, RngStream*) {
  shape_.clear();
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    const int R = static_cast<int>(x[s].rows()), C = static_cast<int>(x[s].cols());
    Mat flat(1, R * C);
    for (int t = 0; t < R; ++t)
      for (int c = 0; c < C; ++c) flat(0, t * C + c) = x[s](t, c);
    out[s] = std::move(flat);
    shape_.emplace_back(R, C);
  }
  return out;
}

Batch Flatten::backward(const Batch& dout) {
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    const auto [R, C] = shape_[s];
    dx[s].resize(R, C);
    for (int t = 0; t < R; ++t)
      for (int c = 0; c < C; ++c) dx[s](t, c) = dout[s](0, t * C + c);
  }
  return dx;
}

// --- LSTM --------------------------------------------------------------------

struct LstmDirection::Cache {
  Mat x_tilde, m_in, m_rec;          // T x D, 1 x D, 1 x U
  Mat i, f, g, o, c, tanh_c, h;      // T x U each, processing order
  Mat h_prev_tilde;                  // T x U, the dropped h_{t-1} used per step
  int T = 0;
};

LstmDirection::LstmDirection(int in_dim, int units, bool reverse, double in_dropout,
                             double rec_dropout, std::uint64_t seed)
    : in_dim(in_dim), units(units), reverse(reverse), in_dropout(in_dropout),
      rec_dropout(rec_dropout) {
  RngStream rng(seed);
  Wx.resize(in_dim, 4 * units);
  init_fan_in(Wx, in_dim, rng);
  Wh.resize(units, 4 * units);
  init_fan_in(Wh, units, rng);
  b = Mat::Zero(1, 4 * units);
  dWx = Mat::Zero(in_dim, 4 * units);
  dWh = Mat::Zero(units, 4 * units);
  db = Mat::Zero(1, 4 * units);
}

Mat LstmDirection::forward(const Mat& x, bool train, RngStream* rng, bool return_seq) {
  require_cols(x, in_dim, "bilstm");
  const int T = static_cast<int>(x.rows());
  const int U = units;
  auto cache = std::make_shared<Cache>();
  cache->T = T;
  auto draw_mask = [&](int n, double rate) {
    Mat m = Mat::Ones(1, n);
    if (train && rate > 0) {
      if (!rng) fail(Err::InvariantViolation, "lstm dropout needs an rng in train mode");
      for (int j = 0; j < n; ++j)
        m(0, j) = rng->uniform01() >= rate ? 1.0 / (1.0 - rate) : 0.0;
    }
    return m;
  };
  cache->m_in = draw_mask(in_dim, in_dropout);
  cache->m_rec = draw_mask(U, rec_dropout);
  cache->x_tilde.resize(T, in_dim);
  cache->h_prev_tilde.resize(T, U);
  for (Mat* m : {&cache->i, &cache->f, &cache->g, &cache->o, &cache->c, &cache->tanh_c,
                 &cache->h})
    m->resize(T, U);

  Mat h = Mat::Zero(1, U), c = Mat::Zero(1, U);
  Mat y = return_seq ? Mat(T, U) : Mat(1, U);  // per-direction output
  for (int s = 0; s < T; ++s) {
    const int t = reverse ? T - 1 - s : s;
    Mat xt = x.row(t).cwiseProduct(cache->m_in.row(0)).eval();
    Mat ht = h.cwiseProduct(cache->m_rec);
    cache->x_tilde.row(s) = xt;
    cache->h_prev_tilde.row(s) = ht;
    Mat pre = xt * Wx + ht * Wh + b;
    for (int u = 0; u < U; ++u) {
      cache->i(s, u) = sigmoid(pre(0, u));
      cache->f(s, u) = sigmoid(pre(0, U + u));
      cache->g(s, u) = std::tanh(pre(0, 2 * U + u));
      cache->o(s, u) = sigmoid(pre(0, 3 * U + u));
    }
    Mat cprev = c;
    c = cache->f.row(s).cwiseProduct(cprev) + cache->i.row(s).cwiseProduct(cache->g.row(s));
    cache->c.row(s) = c;
    cache->tanh_c.row(s) = c.unaryExpr([](double v) { return std::tanh(v); });
    h = cache->o.row(s).cwiseProduct(cache->tanh_c.row(s));
    cache->h.row(s) = h;
    if (return_seq) y.row(t) = h;
  }
  if (!return_seq) y.row(0) = h;
  caches_.push_back(std::move(cache));
  return y;
}

Mat LstmDirection::backward(const Mat& dy, bool return_seq) {
  const auto cache = caches_[next_cache_++];
  const int T = cache->T, U = units;
  Mat dx = Mat::Zero(T, in_dim);
  Mat dh_chain = Mat::Zero(1, U), dc_chain = Mat::Zero(1, U);
  for (int s = T - 1; s >= 0; --s) {
    const int t = reverse ? T - 1 - s : s;
    Mat dh = dh_chain;
    if (return_seq)
      dh += dy.row(t);
    else if (s == T - 1)
      dh += dy.row(0);
    const Mat i = cache->i.row(s), f = cache->f.row(s), g = cache->g.row(s),
              o = cache->o.row(s), tc = cache->tanh_c.row(s);
    Mat do_ = dh.cwiseProduct(tc);
    Mat dc = dc_chain +
             dh.cwiseProduct(o).cwiseProduct(Mat::Ones(1, U) - tc.cwiseProduct(tc));
    Mat cprev = s > 0 ? Mat(cache->c.row(s - 1)) : Mat(Mat::Zero(1, U));
    Mat df = dc.cwiseProduct(cprev);
    Mat di = dc.cwiseProduct(g);
    Mat dg = dc.cwiseProduct(i);
    dc_chain = dc.cwiseProduct(f);

    Mat dpre(1, 4 * U);
    dpre.middleCols(0, U) = di.cwiseProduct(i).cwiseProduct(Mat::Ones(1, U) - i);
    dpre.middleCols(U, U) = df.cwiseProduct(f).cwiseProduct(Mat::Ones(1, U) - f);
    dpre.middleCols(2 * U, U) = dg.cwiseProduct(Mat::Ones(1, U) - g.cwiseProduct(g));
    dpre.middleCols(3 * U, U) = do_.cwiseProduct(o).cwiseProduct(Mat::Ones(1, U) - o);

    dWx += cache->x_tilde.row(s).transpose() * dpre;
    dWh += cache->h_prev_tilde.row(s).transpose() * dpre;
    db += dpre;
    dx.row(t) = (dpre * Wx.transpose()).cwiseProduct(cache->m_in.row(0));
    dh_chain = (dpre * Wh.transpose()).cwiseProduct(cache->m_rec.row(0));
  }
  return dx;
}

BiLSTM::BiLSTM(int in_dim, int units, double dropout, bool return_seq, std::uint64_t seed)
    : fwd(in_dim, units, false, dropout, 0.0, derive_seed(seed, "fwd")),
      bwd(in_dim, units, true, dropout, 0.0, derive_seed(seed, "bwd")),
      units(units), return_seq(return_seq) {}

Batch BiLSTM::forward(const Batch& x, bool train, RngStream* rng) {
  fwd.caches_.clear();
  fwd.next_cache_ = 0;
  bwd.caches_.clear();
  bwd.next_cache_ = 0;
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    Mat yf = fwd.forward(x[s], train, rng, return_seq);
    Mat yb = bwd.forward(x[s], train, rng, return_seq);
    Mat y(yf.rows(), yf.cols() + yb.cols());
    y << yf, yb;
    out[s] = std::move(y);
  }
  return out;
}

Batch BiLSTM::backward(const Batch& dout) {
  Batch dx(dout.size());
  for (size_t s = 0; s < dout.size(); ++s) {
    Mat df = dout[s].leftCols(units);
    Mat db_ = dout[s].rightCols(units);
    dx[s] = fwd.backward(df, return_seq) + bwd.backward(db_, return_seq);
  }
  return dx;
}

std::vector<Mat*> BiLSTM::params() {
  return {&fwd.Wx, &fwd.Wh, &fwd.b, &bwd.Wx, &bwd.Wh, &bwd.b};
}
std::vector<Mat*> BiLSTM::grads() {
  return {&fwd.dWx, &fwd.dWh, &fwd.db, &bwd.dWx, &bwd.dWh, &bwd.db};
}

// --- BiConvLSTM1D ------------------------------------------------------------

struct BiConvLSTM1D::Direction::Cache {
  std::vector<Mat> cols_x, cols_h;            // A x (K*C), A x (K*F)
  std::vector<Mat> i, f, g, o, c, tanh_c, h;  // A x F, processing order
  Mat m_rec;                                  // A x F
  int T = 0;
};

BiConvLSTM1D::BiConvLSTM1D(int spatial, int in_channels, int filters, int kernel,
                           double recurrent_dropout, std::uint64_t seed)
    : spatial(spatial), in_channels(in_channels), filters(filters), kernel(kernel),
      rec_dropout(recurrent_dropout) {
  if (spatial < 1 || in_channels < 1 || filters < 1)
    fail(Err::InvariantViolation, "biconvlstm1d dims must be positive");
  if (kernel < 1 || kernel % 2 == 0)
    fail(Err::InvariantViolation, "biconvlstm1d kernel must be odd");
  if (recurrent_dropout < 0 || recurrent_dropout >= 1)
    fail(Err::InvariantViolation, "recurrent dropout must be in [0,1)");
  auto init_dir = [&](Direction& d, const char* tag, bool rev) {
    RngStream rng(derive_seed(seed, tag));
    d.Wx.resize(kernel * in_channels, 4 * filters);
    init_fan_in(d.Wx, kernel * in_channels, rng);
    d.Wh.resize(kernel * filters, 4 * filters);
    init_fan_in(d.Wh, kernel * filters, rng);
    d.b = Mat::Zero(1, 4 * filters);
    d.dWx = Mat::Zero(d.Wx.rows(), d.Wx.cols());
    d.dWh = Mat::Zero(d.Wh.rows(), d.Wh.cols());
    d.db = Mat::Zero(1, 4 * filters);
    d.reverse = rev;
  };
  init_dir(fdir, "fwd", false);
  init_dir(bdir, "bwd", true);
}

namespace {

Mat run_convlstm_dir(BiConvLSTM1D::Direction& dir, const Mat& x, int A, int C, int F,
                     int kernel, double rec_dropout, bool train, RngStream* rng) {
  const int T = static_cast<int>(x.rows());
  auto cache = std::make_shared<BiConvLSTM1D::Direction::Cache>();
  cache->T = T;
  cache->m_rec = Mat::Ones(A, F);
  if (train && rec_dropout > 0) {
    if (!rng) fail(Err::InvariantViolation, "recurrent dropout needs an rng in train mode");
    for (int a = 0; a < A; ++a)
      for (int f = 0; f < F; ++f)
        cache->m_rec(a, f) = rng->uniform01() >= rec_dropout ? 1.0 / (1.0 - rec_dropout) : 0.0;
  }
  Mat h = Mat::Zero(A, F), c = Mat::Zero(A, F);
  Mat y(T, A * F);
  for (int s = 0; s < T; ++s) {
    const int t = dir.reverse ? T - 1 - s : s;
    Mat x_map(A, C);
    for (int a = 0; a < A; ++a)
      for (int ch = 0; ch < C; ++ch) x_map(a, ch) = x(t, a * C + ch);
    Mat ht = h.cwiseProduct(cache->m_rec);
    Mat cx = im2col_rows(x_map, kernel);
    Mat chh = im2col_rows(ht, kernel);
    Mat pre = (cx * dir.Wx + chh * dir.Wh).rowwise() + dir.b.row(0);  // A x 4F
    Mat i(A, F), f(A, F), g(A, F), o(A, F);
    for (int a = 0; a < A; ++a)
      for (int u = 0; u < F; ++u) {
        i(a, u) = sigmoid(pre(a, u));
        f(a, u) = sigmoid(pre(a, F + u));
        g(a, u) = std::tanh(pre(a, 2 * F + u));
        o(a, u) = sigmoid(pre(a, 3 * F + u));
      }
    Mat cprev = c;
    c = f.cwiseProduct(cprev) + i.cwiseProduct(g);
    Mat tc = c.unaryExpr([](double v) { return std::tanh(v); });
    h = o.cwiseProduct(tc);
    for (int a = 0; a < A; ++a)
      for (int u = 0; u < F; ++u) y(t, a * F + u) = h(a, u);
    cache->cols_x.push_back(std::move(cx));
    cache->cols_h.push_back(std::move(chh));
    cache->i.push_back(std::move(i));
    cache->f.push_back(std::move(f));
    cache->g.push_back(std::move(g));
    cache->o.push_back(std::move(o));
    cache->c.push_back(c);
    cache->tanh_c.push_back(std::move(tc));
    cache->h.push_back(h);
  }
  dir.caches_.push_back(std::move(cache));
  return y;
}

Mat back_convlstm_dir(BiConvLSTM1D::Direction& dir, const Mat& dy, int A, int C, int F,
                      int kernel) {
  const auto cache = dir.caches_[dir.next_cache_++];
  const int T = cache->T;
  Mat dx = Mat::Zero(T, A * C);
  Mat dh_chain = Mat::Zero(A, F), dc_chain = Mat::Zero(A, F);
  for (int s = T - 1; s >= 0; --s) {
    const int t = dir.reverse ? T - 1 - s : s;
    Mat dh = dh_chain;
    for (int a = 0; a < A; ++a)
      for (int u = 0; u < F; ++u) dh(a, u) += dy(t, a * F + u);
    const Mat &i = cache->i[s], &f = cache->f[s], &g = cache->g[s], &o = cache->o[s],
              &tc = cache->tanh_c[s];
    Mat ones = Mat::Ones(A, F);
    Mat do_ = dh.cwiseProduct(tc);
    Mat dc = dc_chain + dh.cwiseProduct(o).cwiseProduct(ones - tc.cwiseProduct(tc));
    Mat cprev = s > 0 ? cache->c[s - 1] : Mat(Mat::Zero(A, F));
    Mat df = dc.cwiseProduct(cprev);
    Mat di = dc.cwiseProduct(g);
    Mat dg = dc.cwiseProduct(i);
    dc_chain = dc.cwiseProduct(f);

    Mat dpre(A, 4 * F);
    dpre.middleCols(0, F) = di.cwiseProduct(i).cwiseProduct(ones - i);
    dpre.middleCols(F, F) = df.cwiseProduct(f).cwiseProduct(ones - f);
    dpre.middleCols(2 * F, F) = dg.cwiseProduct(ones - g.cwiseProduct(g));
    dpre.middleCols(3 * F, F) = do_.cwiseProduct(o).cwiseProduct(ones - o);

    dir.dWx += cache->cols_x[s].transpose() * dpre;
    dir.dWh += cache->cols_h[s].transpose() * dpre;
    dir.db += dpre.colwise().sum();
    Mat dcx = dpre * dir.Wx.transpose();
    Mat dxmap = col2im_rows_add(dcx, kernel, C);
    for (int a = 0; a < A; ++a)
      for (int ch = 0; ch < C; ++ch) dx(t, a * C + ch) += dxmap(a, ch);
    Mat dchh = dpre * dir.Wh.transpose();
    Mat dht = col2im_rows_add(dchh, kernel, F);
    dh_chain = dht.cwiseProduct(cache->m_rec);
  }
  return dx;
}

}  // namespace

Batch BiConvLSTM1D::forward(const Batch& x, bool train, RngStream* rng) {
  fdir.caches_.clear();
  fdir.next_cache_ = 0;
  bdir.caches_.clear();
  bdir.next_cache_ = 0;
  Batch out(x.size());
  for (size_t s = 0; s < x.size(); ++s) {
    require_cols(x[s], spatial * in_channels, "biconvlstm1d");
    Mat yf = run_convlstm_dir(fdir, x[s], spatial, in_channels, filters, kernel,
                              rec_dropout, train, rng);
    Mat yb = run_convlstm_dir(bdir, x[s], spatial, in_channels, filters, kernel,
                              rec_dropout, train, rng);
    Mat y(yf.rows(), yf.cols() + yb.cols());
    y << yf, yb;
    out[s] = std::move(y);
  }
  return out;
}

Batch BiConvLSTM1D::backward(const Batch& dout) {
  Batch dx(dout.size());
  const int half = spatial * filters;
  for (size_t s = 0; s < dout.size(); ++s) {
    Mat df = dout[s].leftCols(half);
    Mat db_ = dout[s].rightCols(half);
    dx[s] = back_convlstm_dir(fdir, df, spatial, in_channels, filters, kernel) +
            back_convlstm_dir(bdir, db_, spatial, in_channels, filters, kernel);
  }
  return dx;
}

std::vector<Mat*> BiConvLSTM1D::params() {
  return {&fdir.Wx, &fdir.Wh, &fdir.b, &bdir.Wx, &bdir.Wh, &bdir.b};
}
std::vector<Mat*> BiConvLSTM1D::grads() {
  return {&fdir.dWx, &fdir.dWh, &fdir.db, &bdir.dWx, &bdir.dWh, &bdir.db};
}

// --- Network -----------------------------------------------------------------

int Network::add(std::string name, std::unique_ptr<Layer> layer, std::vector<int> inputs) {
  for (int in : inputs)
    if (in != kStanceInput && in != kPointsInput &&
        (in < 0 || in >= static_cast<int>(nodes_.size())))
      fail(Err::InvariantViolation, "node '" + name + "' wired to unknown input");
  NodeState st;
  st.name = std::move(name);
  st.layer = std::move(layer);
  st.inputs = std::move(inputs);
  nodes_.push_back(std::move(st));
  return static_cast<int>(nodes_.size()) - 1;
}

Eigen::VectorXd Network::forward(const Batch& stance, const Batch* points, bool train,
                                 RngStream* rng) {
  if (stance.empty()) fail(Err::EmptyResult, "forward called with an empty batch");
  if (expect_rows > 0)
    for (const Mat& s : stance)
      if (s.rows() != expect_rows || s.cols() != expect_cols)
        fail(Err::ShapeMismatch, "stance input must be " + std::to_string(expect_rows) +
                                     "x" + std::to_string(expect_cols) + ", got " +
                                     std::to_string(s.rows()) + "x" +
                                     std::to_string(s.cols()));
  if (expect_points >= 0) {
    if (!points)
      fail(Err::MissingBranchInput, "network has a point-value branch but no points given");
    if (points->size() != stance.size())
      fail(Err::ShapeMismatch, "stance and points batch sizes differ");
    for (const Mat& p : *points)
      if (p.rows() != 1 || p.cols() != expect_points)
        fail(Err::ShapeMismatch, "points input must be 1x" + std::to_string(expect_points));
  } else if (points) {
    fail(Err::ShapeMismatch, "network has no point-value branch");
  }

  had_points_ = points != nullptr;
  RngStream* r = rng ? rng : &own_rng_;
  for (auto& node : nodes_) {
    Batch in;
    node.in_widths.clear();
    const size_t B = stance.size();
    in.resize(B);
    for (size_t s = 0; s < B; ++s) {
      int total = 0;
      std::vector<const Mat*> parts;
      for (int src : node.inputs) {
        if (src == kPointsInput && !points)
          fail(Err::MissingBranchInput,
               "node '" + node.name + "' consumes point values but none given");
        const Mat* m = src == kStanceInput ? &stance[s]
                       : src == kPointsInput
                           ? &(*points)[s]
                           : &nodes_[src].out[s];
        parts.push_back(m);
        total += static_cast<int>(m->cols());
        if (s == 0) node.in_widths.push_back(static_cast<int>(m->cols()));
      }
      Mat joined(parts[0]->rows(), total);
      int at = 0;
      for (const Mat* m : parts) {
        if (m->rows() != joined.rows())
          fail(Err::ShapeMismatch, "node '" + node.name + "': input row counts differ");
        joined.middleCols(at, m->cols()) = *m;
        at += static_cast<int>(m->cols());
      }
      in[s] = std::move(joined);
    }
    node.out = node.layer->forward(in, train, r);
  }
  const Batch& logits = nodes_.back().out;
  probs_.resize(logits.size());
  for (size_t s = 0; s < logits.size(); ++s) {
    if (logits[s].rows() != 1 || logits[s].cols() != 1)
      fail(Err::ShapeMismatch, "output node must emit 1x1 logits");
    probs_(s) = sigmoid(logits[s](0, 0));
  }
  recorded_ = true;
  train_recorded_ = train;
  return probs_;
}

double Network::bce_loss(const Eigen::VectorXd& target) const {
  if (target.size() != probs_.size())
    fail(Err::ShapeMismatch, "bce_loss: target size mismatch");
  double loss = 0;
  for (int s = 0; s < probs_.size(); ++s) {
    const double p = std::clamp(probs_(s), 1e-12, 1.0 - 1e-12);
    loss += -(target(s) * std::log(p) + (1.0 - target(s)) * std::log(1.0 - p));
  }
  return loss / target.size();
}

void Network::backward_bce(const Eigen::VectorXd& target) {
  if (!recorded_ || !train_recorded_)
    fail(Err::GraphNotRecorded, "backward_bce requires a prior train-mode forward");
  if (target.size() != probs_.size())
    fail(Err::ShapeMismatch, "backward_bce: target size mismatch");
  Batch seed(probs_.size());
  const double B = static_cast<double>(probs_.size());
  for (int s = 0; s < probs_.size(); ++s) {
    seed[s].resize(1, 1);
    seed[s](0, 0) = (probs_(s) - target(s)) / B;
  }
  backprop_from(std::move(seed));
}

void Network::backward_output() {
  if (!recorded_) fail(Err::GraphNotRecorded, "backward_output requires a prior forward");
  Batch seed(probs_.size());
  for (int s = 0; s < probs_.size(); ++s) {
    seed[s].resize(1, 1);
    seed[s](0, 0) = probs_(s) * (1.0 - probs_(s));  // d sigmoid / d logit
  }
  backprop_from(std::move(seed));
}

void Network::backprop_from(Batch seed) {
  const size_t B = seed.size();
  for (auto& node : nodes_) {
    node.dout.assign(B, Mat());
    for (size_t s = 0; s < B; ++s)
      node.dout[s] = Mat::Zero(node.out[s].rows(), node.out[s].cols());
  }
  d_stance_.clear();
  d_points_.clear();
  nodes_.back().dout = std::move(seed);

  auto ensure = [&](Batch& store, const Mat& like, size_t s, size_t n) {
    if (store.size() != n) store.assign(n, Mat());
    if (store[s].size() == 0) store[s] = Mat::Zero(like.rows(), like.cols());
  };

  for (int ni = static_cast<int>(nodes_.size()) - 1; ni >= 0; --ni) {
    auto& node = nodes_[ni];
    Batch din = node.layer->backward(node.dout);
    for (size_t s = 0; s < B; ++s) {
      int at = 0;
      for (size_t k = 0; k < node.inputs.size(); ++k) {
        const int src = node.inputs[k];
        const int width = node.in_widths[k];
        Mat piece = din[s].middleCols(at, width);
        at += width;
        if (src == kStanceInput) {
          ensure(d_stance_, piece, s, B);
          d_stance_[s] += piece;
        } else if (src == kPointsInput) {
          ensure(d_points_, piece, s, B);
          d_points_[s] += piece;
        } else {
          nodes_[src].dout[s] += piece;
        }
      }
    }
  }
}

void Network::zero_grad() {
  for (auto& node : nodes_) node.layer->zero_grad();
}

std::vector<Mat*> Network::parameters() {
  std::vector<Mat*> out;
  for (auto& node : nodes_)
    for (Mat* p : node.layer->params()) out.push_back(p);
  return out;
}

std::vector<Mat*> Network::gradients() {
  std::vector<Mat*> out;
  for (auto& node : nodes_)
    for (Mat* g : node.layer->grads()) out.push_back(g);
  return out;
}

std::vector<Mat*> Network::buffers() {
  std::vector<Mat*> out;
  for (auto& node : nodes_)
    for (Mat* b : node.layer->buffers()) out.push_back(b);
  return out;
}

double Network::reg_loss() const {
  double r = 0;
  for (const auto& node : nodes_) r += node.layer->reg_loss();
  return r;
}

const Mat& Network::node_output(const std::string& name, int sample) const {
  for (const auto& node : nodes_)
    if (node.name == name) {
      if (sample < 0 || sample >= static_cast<int>(node.out.size()))
        fail(Err::ShapeMismatch, "node_output: sample index out of range");
      return node.out[sample];
    }
  fail(Err::LayerNotFound, "no node named '" + name + "'");
}

const Mat& Network::node_grad(const std::string& name, int sample) const {
  for (const auto& node : nodes_)
    if (node.name == name) {
      if (sample < 0 || sample >= static_cast<int>(node.dout.size()))
        fail(Err::GraphNotRecorded, "node_grad: run a backward pass first");
      return node.dout[sample];
    }
  fail(Err::LayerNotFound, "no node named '" + name + "'");
}

bool Network::has_node(const std::string& name) const {
  for (const auto& node : nodes_)
    if (node.name == name) return true;
  return false;
}

std::string Network::node_kind(const std::string& name) const {
  for (const auto& node : nodes_)
    if (node.name == name) return node.layer->kind();
  fail(Err::LayerNotFound, "no node named '" + name + "'");
}

// --- builders ----------------------------------------------------------------

Network build_cnn(int n_structures, int n_channels, int n_points, std::uint64_t seed,
                  double l2) {
  if (n_structures < 1 || n_channels < 1)
    fail(Err::InvariantViolation, "build_cnn needs positive structure/channel counts");
  const int in_ch = n_structures * n_channels;
  Network net;
  net.arch = {"cnn", n_structures, n_channels, n_points, l2, seed};
  net.expect_rows = 101;
  net.expect_cols = in_ch;
  net.expect_points = n_points;

  int x = net.add("noise", std::make_unique<GaussianNoise>(0.05), {Network::kStanceInput});
  x = net.add("incept1",
              std::make_unique<InceptionResidual>(in_ch, 64, derive_seed(seed, "i1")), {x});
  x = net.add("drop1", std::make_unique<Dropout>(0.3), {x});
  x = net.add("incept2",
              std::make_unique<InceptionResidual>(64, 64, derive_seed(seed, "i2")), {x});
  x = net.add("se", std::make_unique<SqueezeExcitation>(64, 16, derive_seed(seed, "se")),
              {x});
  x = net.add("flatten", std::make_unique<Flatten>(), {x});
  int head_in = 101 * 64;
  int h = x;
  if (n_points >= 0) {
    int p = net.add("pts_dense1",
                    std::make_unique<Dense>(n_points, 8, l2, derive_seed(seed, "p1")),
                    {Network::kPointsInput});
    p = net.add("pts_bn1", std::make_unique<BatchNorm>(8), {p});
    p = net.add("pts_silu1", std::make_unique<Activation>(Act::silu), {p});
    p = net.add("pts_drop", std::make_unique<Dropout>(0.3), {p});
    p = net.add("pts_dense2", std::make_unique<Dense>(8, 16, 0.0, derive_seed(seed, "p2")),
                {p});
    p = net.add("pts_bn2", std::make_unique<BatchNorm>(16), {p});
    p = net.add("pts_silu2", std::make_unique<Activation>(Act::silu), {p});
    h = net.add("concat", std::make_unique<Identity>(), {x, p});
    head_in += 16;
  }
  h = net.add("head_dense", std::make_unique<Dense>(head_in, 16, l2, derive_seed(seed, "h1")),
              {h});
  h = net.add("head_bn", std::make_unique<BatchNorm>(16), {h});
  h = net.add("head_silu", std::make_unique<Activation>(Act::silu), {h});
  net.add("logit", std::make_unique<Dense>(16, 1, 0.0, derive_seed(seed, "out")), {h});
  return net;
}

Network build_lstm_net(int n_structures, int n_channels, std::uint64_t seed) {
  if (n_structures < 1 || n_channels < 1)
    fail(Err::InvariantViolation, "build_lstm_net needs positive structure/channel counts");
  Network net;
  net.arch = {"lstm", n_structures, n_channels, -1, 0.0, seed};
  net.expect_rows = 101;
  net.expect_cols = n_structures * n_channels;
  net.expect_points = -1;

  int x = net.add("biconvlstm",
                  std::make_unique<BiConvLSTM1D>(n_structures, n_channels, 30, 3, 0.4,
                                                 derive_seed(seed, "cl")),
                  {Network::kStanceInput});
  x = net.add("bilstm",
              std::make_unique<BiLSTM>(n_structures * 60, 20, 0.2, false,
                                       derive_seed(seed, "l")),
              {x});
  x = net.add("dense10", std::make_unique<Dense>(40, 10, 0.0, derive_seed(seed, "d")), {x});
  x = net.add("relu", std::make_unique<Activation>(Act::relu), {x});
  net.add("logit", std::make_unique<Dense>(10, 1, 0.0, derive_seed(seed, "out")), {x});
  return net;
}

// --- training ----------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr >= 0)) fail(Err::InvariantViolation, "lr must be >= 0");
  if (!(rho > 0 && rho < 1)) fail(Err::InvariantViolation, "rho must be in (0,1)");
  if (grad_accumulation < 1) fail(Err::InvariantViolation, "grad_accumulation must be >= 1");
  if (epochs < 1 || batch_size < 1)
    fail(Err::InvariantViolation, "epochs and batch_size must be >= 1");
}

TrainHistory train(Network& net, const Batch& stance, const Batch* points,
                   const Eigen::VectorXi& labels, const TrainConfig& config) {
  config.validate();
  const int n = static_cast<int>(stance.size());
  if (labels.size() != n) fail(Err::ShapeMismatch, "train: labels/batch size mismatch");
  std::vector<int> pos, neg;
  for (int i = 0; i < n; ++i) (labels(i) ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    fail(Err::SingleClassTraining, "train: need at least one sample of each class");

  RngStream sampler_rng(derive_seed(config.seed, "sampler"));
  RngStream layer_rng(derive_seed(config.seed, "layers"));

  std::vector<Mat*> params = net.parameters();
  std::vector<Mat*> grads = net.gradients();
  std::vector<Mat> rms(params.size());
  for (size_t p = 0; p < params.size(); ++p)
    rms[p] = Mat::Zero(params[p]->rows(), params[p]->cols());

  // Round-robin index pools; the balanced pool reshuffles on exhaustion.
  struct Pool {
    std::vector<int> ids;
    size_t at = 0;
    int next(RngStream& rng) {
      if (at >= ids.size()) {
        rng.shuffle(ids);
        at = 0;
      }
      return ids[at++];
    }
  };
  Pool pos_pool{pos, pos.size()}, neg_pool{neg, neg.size()}, all_pool;
  all_pool.ids.resize(n);
  for (int i = 0; i < n; ++i) all_pool.ids[i] = i;
  all_pool.at = all_pool.ids.size();

  TrainHistory history;
  double best_loss = std::numeric_limits<double>::infinity();
  int plateau = 0;
  const int n_batches = (n + config.batch_size - 1) / config.batch_size;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    double loss_sum = 0;
    long seen = 0, tp = 0, fp = 0, tn = 0, fn = 0;
    int batch_idx = 0;
    while (batch_idx < n_batches) {
      net.zero_grad();
      int micro = 0;
      for (; micro < config.grad_accumulation && batch_idx < n_batches;
           ++micro, ++batch_idx) {
        std::vector<int> ids;
        const int B = std::min(config.batch_size, n);
        if (config.class_balanced) {
          const int half = B / 2;
          for (int i = 0; i < half; ++i) ids.push_back(pos_pool.next(sampler_rng));
          for (int i = 0; i < B - half; ++i) ids.push_back(neg_pool.next(sampler_rng));
        } else {
          for (int i = 0; i < B; ++i) ids.push_back(all_pool.next(sampler_rng));
        }
        Batch bs;
        Batch bp;
        Eigen::VectorXd target(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) {
          bs.push_back(stance[ids[i]]);
          if (points) bp.push_back((*points)[ids[i]]);
          target(i) = labels(ids[i]);
        }
        Eigen::VectorXd probs =
            net.forward(bs, points ? &bp : nullptr, true, &layer_rng);
        const double loss = net.bce_loss(target) + net.reg_loss();
        loss_sum += loss * static_cast<double>(ids.size());
        seen += static_cast<long>(ids.size());
        for (size_t i = 0; i < ids.size(); ++i) {
          const bool hit = probs(i) >= 0.5;
          if (target(i) > 0.5)
            (hit ? tp : fn) += 1;
          else
            (hit ? fp : tn) += 1;
        }
        net.backward_bce(target);
      }
      const double scale = 1.0 / micro;
      for (size_t p = 0; p < params.size(); ++p) {
        Mat g = *grads[p] * scale;
        rms[p] = config.rho * rms[p] + (1.0 - config.rho) * g.cwiseProduct(g);
        *params[p] -=
            config.lr * g.cwiseQuotient((rms[p].array() + 1e-8).sqrt().matrix());
      }
    }
    EpochStats st;
    st.loss = loss_sum / static_cast<double>(seen);
    st.acc = static_cast<double>(tp + tn) / static_cast<double>(seen);
    st.pre = tp + fp > 0 ? static_cast<double>(tp) / (tp + fp) : 0.0;
    st.rec = tp + fn > 0 ? static_cast<double>(tp) / (tp + fn) : 0.0;
    if (!std::isfinite(st.loss)) {
      double wnorm = 0;
      for (Mat* p : params) wnorm += p->squaredNorm();
      fail(Err::Divergence, "training loss became non-finite at epoch " +
                                std::to_string(epoch) + " (|w|^2 = " +
                                std::to_string(wnorm) + ")");
    }
    history.epochs.push_back(st);
    if (st.loss < best_loss - 1e-6) {
      best_loss = st.loss;
      plateau = 0;
    } else if (++plateau >= config.patience) {
      break;
    }
  }
  return history;
}

// --- serialization -----------------------------------------------------------

void save_network(const Network& net, const std::filesystem::path& json_path) {
  Network& mut = const_cast<Network&>(net);
  std::filesystem::path bin_path = json_path;
  bin_path.replace_extension(".bin");

  std::string blob;
  auto append_mat = [&](const Mat* m) {
    const std::uint64_t r = m->rows(), c = m->cols();
    blob.append(reinterpret_cast<const char*>(&r), 8);
    blob.append(reinterpret_cast<const char*>(&c), 8);
    for (int i = 0; i < m->rows(); ++i)
      for (int j = 0; j < m->cols(); ++j) {
        const double v = (*m)(i, j);
        blob.append(reinterpret_cast<const char*>(&v), 8);
      }
  };
  for (const Mat* p : mut.parameters()) append_mat(p);
  for (const Mat* b : mut.buffers()) append_mat(b);

  std::ofstream bf(bin_path, std::ios::binary);
  if (!bf) fail(Err::MissingFile, "cannot write " + bin_path.string());
  bf.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  bf.close();

  nlohmann::json j;
  j["format_version"] = 1;
  j["arch"] = {{"type", net.arch.type},
               {"n_structures", net.arch.n_structures},
               {"n_channels", net.arch.n_channels},
               {"n_points", net.arch.n_points},
               {"l2", net.arch.l2},
               {"seed", net.arch.seed}};
  j["weights_file"] = bin_path.filename().string();
  j["weights_sha256"] = sha256_hex(blob);
  std::ofstream jf(json_path);
  if (!jf) fail(Err::MissingFile, "cannot write " + json_path.string());
  jf << j.dump(2) << "\n";
}

Network load_network(const std::filesystem::path& json_path) {
  std::ifstream jf(json_path);
  if (!jf) fail(Err::MissingFile, "cannot read " + json_path.string());
  nlohmann::json j;
  try {
    jf >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, json_path.string() + ": " + e.what());
  }
  Network net;
  try {
    if (j.at("format_version").get<int>() != 1)
      fail(Err::SchemaMismatch, "unsupported network format version");
    const auto& a = j.at("arch");
    const std::string type = a.at("type").get<std::string>();
    if (type == "cnn")
      net = build_cnn(a.at("n_structures").get<int>(), a.at("n_channels").get<int>(),
                      a.at("n_points").get<int>(), a.at("seed").get<std::uint64_t>(),
                      a.at("l2").get<double>());
    else if (type == "lstm")
      net = build_lstm_net(a.at("n_structures").get<int>(), a.at("n_channels").get<int>(),
                           a.at("seed").get<std::uint64_t>());
    else
      fail(Err::SchemaMismatch, "unknown network arch '" + type + "'");

    std::filesystem::path bin_path =
        json_path.parent_path() / j.at("weights_file").get<std::string>();
    std::ifstream bf(bin_path, std::ios::binary);
    if (!bf) fail(Err::MissingFile, "cannot read " + bin_path.string());
    std::string blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
    if (sha256_hex(blob) != j.at("weights_sha256").get<std::string>())
      fail(Err::SchemaMismatch, bin_path.string() + ": weight blob digest mismatch");

    size_t at = 0;
    auto read_mat = [&](Mat* m) {
      if (at + 16 > blob.size())
        fail(Err::SchemaMismatch, "weight blob truncated");
      std::uint64_t r, c;
      std::memcpy(&r, blob.data() + at, 8);
      std::memcpy(&c, blob.data() + at + 8, 8);
      at += 16;
      if (static_cast<std::int64_t>(r) != m->rows() ||
          static_cast<std::int64_t>(c) != m->cols())
        fail(Err::SchemaMismatch, "weight blob shape mismatch");
      if (at + 8 * r * c > blob.size())
        fail(Err::SchemaMismatch, "weight blob truncated");
      for (std::uint64_t i = 0; i < r; ++i)
        for (std::uint64_t jx = 0; jx < c; ++jx) {
          double v;
          std::memcpy(&v, blob.data() + at, 8);
          at += 8;
          (*m)(static_cast<int>(i), static_cast<int>(jx)) = v;
        }
    };
    for (Mat* p : net.parameters()) read_mat(p);
    for (Mat* b : net.buffers()) read_mat(b);
    if (at != blob.size()) fail(Err::SchemaMismatch, "weight blob has trailing bytes");
  } catch (const nlohmann::json::exception& e) {
    fail(Err::SchemaMismatch, json_path.string() + ": " + e.what());
  }
  return net;
}

}  // namespace runpat::nn
