#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "pacnav/rng.hpp"

namespace pacnav {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// Fully connected ReLU network parameters. Hidden layers carry inverted
/// dropout: when a mask is supplied, kept activations are divided by the
/// keep probability; the maskless forward is the expectation-mode network.
struct MlpParams {
  std::vector<int> dims;        ///< layer widths, input first
  std::vector<MatrixXd> W;      ///< W[l] is dims[l+1] x dims[l]
  std::vector<VectorXd> b;
  double dropout_rate = 0.1;

  int num_layers() const { return static_cast<int>(W.size()); }
  int input_dim() const { return dims.front(); }
  int output_dim() const { return dims.back(); }
  double keep_prob() const { return 1.0 - dropout_rate; }
};

/// Uniform +-1/sqrt(fan_in) initialization.
inline MlpParams make_mlp(std::span<const int> dims, RngStream& rng,
                          double dropout_rate = 0.1) {
  if (dims.size() < 2) throw std::invalid_argument("make_mlp: need >= 2 dims");
  MlpParams p;
  p.dims.assign(dims.begin(), dims.end());
  p.dropout_rate = dropout_rate;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    double bound = 1.0 / std::sqrt(static_cast<double>(dims[l]));
    MatrixXd W(dims[l + 1], dims[l]);
    VectorXd b(dims[l + 1]);
    for (int i = 0; i < W.rows(); ++i)
      for (int j = 0; j < W.cols(); ++j) W(i, j) = rng.uniform(-bound, bound);
    for (int i = 0; i < b.size(); ++i) b[i] = rng.uniform(-bound, bound);
    p.W.push_back(std::move(W));
    p.b.push_back(std::move(b));
  }
  return p;
}

/// Binary dropout mask, one vector per hidden layer.
struct DropoutMask {
  std::vector<VectorXd> keep;
};

inline DropoutMask sample_mask(const MlpParams& p, RngStream& rng) {
  DropoutMask m;
  for (int l = 0; l + 1 < p.num_layers(); ++l) {
    VectorXd v(p.dims[l + 1]);
    for (int i = 0; i < v.size(); ++i)
      v[i] = rng.bernoulli(p.keep_prob()) ? 1.0 : 0.0;
    m.keep.push_back(std::move(v));
  }
  return m;
}

inline DropoutMask all_ones_mask(const MlpParams& p) {
  DropoutMask m;
  for (int l = 0; l + 1 < p.num_layers(); ++l)
    m.keep.push_back(VectorXd::Ones(p.dims[l + 1]));
  return m;
}

namespace detail {
inline void check_mask(const MlpParams& p, const DropoutMask* mask) {
  if (mask && static_cast<int>(mask->keep.size()) != p.num_layers() - 1)
    throw std::invalid_argument("dropout mask layer count mismatch");
}
}  // namespace detail

/// Layer activations retained for the backward pass.
struct ForwardTrace {
  std::vector<VectorXd> inputs;  ///< input to each layer (post everything)
  std::vector<VectorXd> pre;     ///< pre-activation of each layer
};

inline VectorXd mlp_forward_traced(const MlpParams& p, const VectorXd& in,
                                   const DropoutMask* mask,
                                   ForwardTrace* trace) {
  if (in.size() != p.input_dim())
    throw std::invalid_argument("mlp_forward: input dimension mismatch");
  detail::check_mask(p, mask);
  VectorXd h = in;
  const int L = p.num_layers();
  for (int l = 0; l < L; ++l) {
    if (trace) trace->inputs.push_back(h);
    VectorXd z = p.W[l] * h + p.b[l];
    if (trace) trace->pre.push_back(z);
    if (l + 1 < L) {
      h = z.cwiseMax(0.0);
      if (mask) h = h.cwiseProduct(mask->keep[l]) / p.keep_prob();
    } else {
      h = std::move(z);  // output activation is the caller's choice
    }
  }
  return h;
}

inline VectorXd mlp_forward(const MlpParams& p, const VectorXd& in,
                            const DropoutMask* mask = nullptr) {
  return mlp_forward_traced(p, in, mask, nullptr);
}

struct MlpGrads {
  std::vector<MatrixXd> dW;
  std::vector<VectorXd> db;
  VectorXd dinput;

  static MlpGrads zeros_like(const MlpParams& p) {
    MlpGrads g;
    for (int l = 0; l < p.num_layers(); ++l) {
      g.dW.push_back(MatrixXd::Zero(p.W[l].rows(), p.W[l].cols()));
      g.db.push_back(VectorXd::Zero(p.b[l].size()));
    }
    g.dinput = VectorXd::Zero(p.input_dim());
    return g;
  }
};

/// Exact reverse-mode gradients of the (masked) forward pass.
inline MlpGrads mlp_backward(const MlpParams& p, const VectorXd& in,
                             const DropoutMask* mask, const VectorXd& dout) {
  if (dout.size() != p.output_dim())
    throw std::invalid_argument("mlp_backward: output dimension mismatch");
  ForwardTrace trace;
  mlp_forward_traced(p, in, mask, &trace);
  const int L = p.num_layers();
  MlpGrads g;
  g.dW.resize(L);
  g.db.resize(L);
  VectorXd delta = dout;
  for (int l = L - 1; l >= 0; --l) {
    if (l < L - 1) {
      if (mask) delta = delta.cwiseProduct(mask->keep[l]) / p.keep_prob();
      delta = delta.cwiseProduct(
          (trace.pre[l].array() > 0.0).cast<double>().matrix());
    }
    g.dW[l] = delta * trace.inputs[l].transpose();
    g.db[l] = delta;
    delta = p.W[l].transpose() * delta;
  }
  g.dinput = std::move(delta);
  return g;
}

// --- batched variants (columns are samples) ---

/// Per-hidden-layer 0/1 mask matrices, one column per sample.
struct BatchMasks {
  std::vector<MatrixXd> keep;
};

inline BatchMasks sample_batch_masks(const MlpParams& p, int batch,
                                     RngStream& rng) {
  BatchMasks m;
  for (int l = 0; l + 1 < p.num_layers(); ++l) {
    MatrixXd v(p.dims[l + 1], batch);
    for (int c = 0; c < batch; ++c)
      for (int r = 0; r < v.rows(); ++r)
        v(r, c) = rng.bernoulli(p.keep_prob()) ? 1.0 : 0.0;
    m.keep.push_back(std::move(v));
  }
  return m;
}

struct BatchTrace {
  std::vector<MatrixXd> inputs;
  std::vector<MatrixXd> pre;
};

inline MatrixXd mlp_forward_batch(const MlpParams& p, const MatrixXd& X,
                                  const BatchMasks* masks,
                                  BatchTrace* trace = nullptr) {
  if (X.rows() != p.input_dim())
    throw std::invalid_argument("mlp_forward_batch: input dimension mismatch");
  MatrixXd h = X;
  const int L = p.num_layers();
  for (int l = 0; l < L; ++l) {
    if (trace) trace->inputs.push_back(h);
    MatrixXd z = (p.W[l] * h).colwise() + p.b[l];
    if (trace) trace->pre.push_back(z);
    if (l + 1 < L) {
      h = z.cwiseMax(0.0);
      if (masks) h = h.cwiseProduct(masks->keep[l]) / p.keep_prob();
    } else {
      h = std::move(z);
    }
  }
  return h;
}

/// Batched backward from a traced forward. Parameter gradients are summed
/// over the batch; dX gets per-sample input gradients.
inline MlpGrads mlp_backward_batch(const MlpParams& p, const BatchTrace& trace,
                                   const BatchMasks* masks,
                                   const MatrixXd& dout, MatrixXd* dX) {
  const int L = p.num_layers();
  MlpGrads g;
  g.dW.resize(L);
  g.db.resize(L);
  MatrixXd delta = dout;
  for (int l = L - 1; l >= 0; --l) {
    if (l < L - 1) {
      if (masks) delta = delta.cwiseProduct(masks->keep[l]) / p.keep_prob();
      delta = delta.cwiseProduct(
          (trace.pre[l].array() > 0.0).cast<double>().matrix());
    }
    g.dW[l].noalias() = delta * trace.inputs[l].transpose();
    g.db[l] = delta.rowwise().sum();
    if (l > 0 || dX) {
      MatrixXd next = p.W[l].transpose() * delta;
      if (l == 0 && dX) *dX = std::move(next);
      else delta = std::move(next);
    }
  }
  return g;
}

// --- Adam optimizer ---

struct AdamState {
  std::vector<MatrixXd> mW, vW;
  std::vector<VectorXd> mb, vb;
  long step = 0;

  static AdamState zeros_like(const MlpParams& p) {
    AdamState s;
    for (int l = 0; l < p.num_layers(); ++l) {
      s.mW.push_back(MatrixXd::Zero(p.W[l].rows(), p.W[l].cols()));
      s.vW.push_back(MatrixXd::Zero(p.W[l].rows(), p.W[l].cols()));
      s.mb.push_back(VectorXd::Zero(p.b[l].size()));
      s.vb.push_back(VectorXd::Zero(p.b[l].size()));
    }
    return s;
  }
};

/// First/second-moment adaptive update with bias correction.
inline void adam_step(MlpParams& p, const MlpGrads& g, AdamState& s, double lr,
                      double beta1 = 0.9, double beta2 = 0.999,
                      double eps = 1e-8) {
  s.step += 1;
  double c1 = 1.0 - std::pow(beta1, static_cast<double>(s.step));
  double c2 = 1.0 - std::pow(beta2, static_cast<double>(s.step));
  for (int l = 0; l < p.num_layers(); ++l) {
    s.mW[l] = beta1 * s.mW[l] + (1.0 - beta1) * g.dW[l];
    s.vW[l] = beta2 * s.vW[l] + (1.0 - beta2) * g.dW[l].cwiseProduct(g.dW[l]);
    p.W[l].array() -=
        lr * (s.mW[l].array() / c1) /
        ((s.vW[l].array() / c2).sqrt() + eps);
    s.mb[l] = beta1 * s.mb[l] + (1.0 - beta1) * g.db[l];
    s.vb[l] = beta2 * s.vb[l] + (1.0 - beta2) * g.db[l].cwiseProduct(g.db[l]);
    p.b[l].array() -=
        lr * (s.mb[l].array() / c1) /
        ((s.vb[l].array() / c2).sqrt() + eps);
  }
}

// --- serialization ---
// Little-endian binary: "MLP1", u32 dim count, u32 dims, then row-major
// f64 weights and biases per layer. Round trips are bit-exact.

inline void save_weights(const MlpParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_weights: cannot open " + path.string());
  out.write("MLP1", 4);
  std::uint32_t n = static_cast<std::uint32_t>(p.dims.size());
  out.write(reinterpret_cast<const char*>(&n), 4);
  for (int d : p.dims) {
    std::uint32_t v = static_cast<std::uint32_t>(d);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  for (int l = 0; l < p.num_layers(); ++l) {
    for (int i = 0; i < p.W[l].rows(); ++i)
      for (int j = 0; j < p.W[l].cols(); ++j) {
        double v = p.W[l](i, j);
        out.write(reinterpret_cast<const char*>(&v), 8);
      }
    out.write(reinterpret_cast<const char*>(p.b[l].data()),
              static_cast<std::streamsize>(p.b[l].size() * 8));
  }
  if (!out) throw std::runtime_error("save_weights: write failed");
}

inline MlpParams load_weights(const std::filesystem::path& path,
                              double dropout_rate = 0.1) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_weights: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "MLP1", 4) != 0)
    throw std::runtime_error("load_weights: bad magic");
  std::uint32_t n = 0;
  in.read(reinterpret_cast<char*>(&n), 4);
  if (!in || n < 2 || n > 64)
    throw std::runtime_error("load_weights: bad layer count");
  MlpParams p;
  p.dropout_rate = dropout_rate;
  p.dims.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    if (!in || v == 0 || v > 1000000)
      throw std::runtime_error("load_weights: bad dimension");
    p.dims[i] = static_cast<int>(v);
  }
  for (std::uint32_t l = 0; l + 1 < n; ++l) {
    MatrixXd W(p.dims[l + 1], p.dims[l]);
    for (int i = 0; i < W.rows(); ++i)
      for (int j = 0; j < W.cols(); ++j) {
        double v;
        in.read(reinterpret_cast<char*>(&v), 8);
        if (!in) throw std::runtime_error("load_weights: truncated file");
        W(i, j) = v;
      }
    VectorXd b(p.dims[l + 1]);
    in.read(reinterpret_cast<char*>(b.data()),
            static_cast<std::streamsize>(b.size() * 8));
    if (!in) throw std::runtime_error("load_weights: truncated file");
    p.W.push_back(std::move(W));
    p.b.push_back(std::move(b));
  }
  char extra;
  if (in.read(&extra, 1))
    throw std::runtime_error("load_weights: trailing bytes");
  return p;
}

}  // namespace pacnav
