#pragma once

// Differentiable building blocks with hand-written backward passes.
// Every op is a pair of free functions (or a small struct) where the
// caller keeps whatever the forward pass returned and hands it back to the
// backward pass. Parameter gradients are accumulated into Param::grad.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "medmix/rng.hpp"
#include "medmix/tensor.hpp"

namespace medmix {

/// Learning-rate group of a parameter. Router-group tensors train at a
/// reduced rate.
enum class ParamGroup : std::uint8_t { router, other };

template <class T>
struct Param {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  ParamGroup group = ParamGroup::other;

  Param() = default;
  Param(std::string n, std::size_t rows, std::size_t cols, ParamGroup g = ParamGroup::other)
      : name(std::move(n)), value(rows, cols), grad(rows, cols), group(g) {}

  void zero_grad() { grad.fill(T{}); }
  std::size_t numel() const { return value.size(); }

  template <class U>
  Param<U> cast() const {
    Param<U> p;
    p.name = name;
    p.value = value.template cast<U>();
    p.grad = grad.template cast<U>();
    p.group = group;
    return p;
  }
};

// ---------------------------------------------------------------- linear

/// y = x W + b with W stored as (in x out).
template <class T>
struct Linear {
  Param<T> weight;
  Param<T> bias;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out,
         ParamGroup group = ParamGroup::other)
      : weight(name + ".weight", in, out, group), bias(name + ".bias", 1, out, group) {}

  std::size_t in_features() const { return weight.value.rows(); }
  std::size_t out_features() const { return weight.value.cols(); }

  /// Fan-in uniform init, bias zero.
  void init_uniform(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_features()));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& w : weight.value.values()) w = static_cast<T>(dist(rng));
    bias.value.fill(T{});
  }

  Matrix<T> forward(const Matrix<T>& x) const {
    require_shape(x.cols() == in_features(), "linear input width");
    Matrix<T> y = matmul(x, weight.value);
    const T* b = bias.value.data();
    for (std::size_t i = 0; i < y.rows(); ++i) {
      T* row = y.row(i).data();
      for (std::size_t j = 0; j < y.cols(); ++j) row[j] += b[j];
    }
    return y;
  }

  /// Accumulates dW, db and returns dL/dx.
  Matrix<T> backward(const Matrix<T>& x, const Matrix<T>& dy) {
    require_shape(dy.rows() == x.rows() && dy.cols() == out_features(), "linear backward");
    matmul_at_b_acc(x, dy, weight.grad);
    T* db = bias.grad.data();
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      const T* row = dy.row(i).data();
      for (std::size_t j = 0; j < dy.cols(); ++j) db[j] += row[j];
    }
    return matmul_a_bt(dy, weight.value);
  }

  /// Parameter-gradient only variant for layers whose input is data.
  void backward_params(const Matrix<T>& x, const Matrix<T>& dy) {
    matmul_at_b_acc(x, dy, weight.grad);
    T* db = bias.grad.data();
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) db[j] += dy(i, j);
  }
};

// ------------------------------------------------------------- layernorm

template <class T>
struct LayerNormCache {
  Matrix<T> normalized;  // x_hat
  std::vector<T> inv_std;
};

template <class T>
struct LayerNorm {
  Param<T> gain;
  Param<T> bias;
  T eps = T(1e-5);

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t width, T epsilon = T(1e-5))
      : gain(name + ".gain", 1, width), bias(name + ".bias", 1, width), eps(epsilon) {
    gain.value.fill(T(1));
  }

  std::size_t width() const { return gain.value.cols(); }

  Matrix<T> forward(const Matrix<T>& x, LayerNormCache<T>* cache = nullptr) const {
    require_shape(x.cols() == width(), "layernorm width");
    const std::size_t n = x.cols();
    Matrix<T> y(x.rows(), n);
    Matrix<T> xhat(x.rows(), n);
    std::vector<T> inv(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = x.row(i);
      T mean{};
      for (T v : row) mean += v;
      mean /= static_cast<T>(n);
      T var{};
      for (T v : row) var += (v - mean) * (v - mean);
      var /= static_cast<T>(n);
      const T is = T(1) / std::sqrt(var + eps);
      inv[i] = is;
      for (std::size_t j = 0; j < n; ++j) {
        const T h = (row[j] - mean) * is;
        xhat(i, j) = h;
        y(i, j) = h * gain.value(0, j) + bias.value(0, j);
      }
    }
    if (cache) {
      cache->normalized = std::move(xhat);
      cache->inv_std = std::move(inv);
    }
    return y;
  }

  Matrix<T> backward(const LayerNormCache<T>& cache, const Matrix<T>& dy) {
    const std::size_t n = width();
    const T inv_n = T(1) / static_cast<T>(n);
    Matrix<T> dx(dy.rows(), n);
    std::vector<T> dxhat(n);
    for (std::size_t i = 0; i < dy.rows(); ++i) {
      T sum_d{}, sum_dh{};
      for (std::size_t j = 0; j < n; ++j) {
        const T h = cache.normalized(i, j);
        gain.grad(0, j) += dy(i, j) * h;
        bias.grad(0, j) += dy(i, j);
        dxhat[j] = dy(i, j) * gain.value(0, j);
        sum_d += dxhat[j];
        sum_dh += dxhat[j] * h;
      }
      for (std::size_t j = 0; j < n; ++j)
        dx(i, j) = cache.inv_std[i] * (dxhat[j] - inv_n * sum_d - cache.normalized(i, j) * inv_n * sum_dh);
    }
    return dx;
  }
};

// ------------------------------------------------------------------ gelu

/// sqrt(2/pi), the tanh-approximation constant.
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluA = 0.044715;

template <class T>
T gelu_scalar(T x) {
  const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <class T>
T gelu_grad_scalar(T x) {
  const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
  const T t = std::tanh(u);
  const T du = T(kGeluC) * (T(1) + T(3 * kGeluA) * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <class T>
Matrix<T> gelu(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) y.data()[i] = gelu_scalar(x.data()[i]);
  return y;
}

template <class T>
Matrix<T> gelu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
  Matrix<T> dx(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) dx.data()[i] = dy.data()[i] * gelu_grad_scalar(x.data()[i]);
  return dx;
}

// --------------------------------------------------------------- dropout

/// Inverted dropout. `keep_scale` receives 0 or 1/(1-rate) per entry and
/// is empty when the op is the identity.
template <class T>
Matrix<T> dropout(const Matrix<T>& x, double rate, bool training, Rng& rng, Matrix<T>* keep_scale) {
  if (rate < 0.0 || rate >= 1.0) throw Error("dropout rate must lie in [0, 1)");
  if (!training || rate == 0.0) {
    if (keep_scale) *keep_scale = Matrix<T>();
    return x;
  }
  const T scale = static_cast<T>(1.0 / (1.0 - rate));
  std::bernoulli_distribution drop(rate);
  Matrix<T> mask(x.rows(), x.cols());
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T s = drop(rng) ? T{} : scale;
    mask.data()[i] = s;
    y.data()[i] = x.data()[i] * s;
  }
  if (keep_scale) *keep_scale = std::move(mask);
  return y;
}

template <class T>
Matrix<T> dropout_backward(const Matrix<T>& keep_scale, const Matrix<T>& dy) {
  if (keep_scale.empty()) return dy;
  Matrix<T> dx(dy.rows(), dy.cols());
  for (std::size_t i = 0; i < dy.size(); ++i) dx.data()[i] = dy.data()[i] * keep_scale.data()[i];
  return dx;
}

// --------------------------------------------------------------- softmax

template <class T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  Matrix<T> y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : row) mx = std::max(mx, v);
    T sum{};
    for (std::size_t j = 0; j < row.size(); ++j) {
      y(i, j) = std::exp(row[j] - mx);
      sum += y(i, j);
    }
    for (std::size_t j = 0; j < row.size(); ++j) y(i, j) /= sum;
  }
  return y;
}

template <class T>
struct MaskedSoftmax {
  Matrix<T> weights;
  std::vector<std::uint8_t> empty;  // 1 where the row had no set bit
};

/// Softmax over the unmasked entries of each row. Masked entries are
/// excluded from normalization and receive weight exactly 0; a row with no
/// unmasked entry comes back all-zero and flagged.
template <class T>
MaskedSoftmax<T> masked_softmax(const Matrix<T>& scores, const Mask& mask) {
  require_shape(scores.rows() == mask.rows() && scores.cols() == mask.cols(),
                "masked_softmax mask");
  MaskedSoftmax<T> out{Matrix<T>(scores.rows(), scores.cols()),
                       std::vector<std::uint8_t>(scores.rows(), 0)};
  for (std::size_t i = 0; i < scores.rows(); ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (!mask(i, j)) continue;
      any = true;
      mx = std::max(mx, scores(i, j));
    }
    if (!any) {
      out.empty[i] = 1;
      continue;
    }
    T sum{};
    for (std::size_t j = 0; j < scores.cols(); ++j) {
      if (!mask(i, j)) continue;
      const T e = std::exp(scores(i, j) - mx);
      out.weights(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < scores.cols(); ++j)
      if (mask(i, j)) out.weights(i, j) /= sum;
  }
  return out;
}

/// Backward of softmax/masked_softmax given the forward weights. Masked
/// entries have weight 0 and therefore receive gradient 0.
template <class T>
Matrix<T> softmax_backward(const Matrix<T>& weights, const Matrix<T>& dw) {
  Matrix<T> ds(weights.rows(), weights.cols());
  for (std::size_t i = 0; i < weights.rows(); ++i) {
    T inner{};
    for (std::size_t j = 0; j < weights.cols(); ++j) inner += weights(i, j) * dw(i, j);
    for (std::size_t j = 0; j < weights.cols(); ++j)
      ds(i, j) = weights(i, j) == T{} ? T{} : weights(i, j) * (dw(i, j) - inner);
  }
  return ds;
}

// ---------------------------------------------------------------- cosine

inline constexpr double kCosineFloor = 1e-8;

/// Row-wise cosine similarity with denominator max(|a||b|, 1e-8).
template <class T>
std::vector<T> cosine_rows(const Matrix<T>& a, const Matrix<T>& b) {
  require_shape(a.same_shape(b), "cosine_rows");
  std::vector<T> out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T ab = dot(a.row(i), b.row(i));
    const T na = std::sqrt(dot(a.row(i), a.row(i)));
    const T nb = std::sqrt(dot(b.row(i), b.row(i)));
    out[i] = ab / std::max(na * nb, T(kCosineFloor));
  }
  return out;
}

/// Given dL/dcos per row, returns dL/da and dL/db.
template <class T>
void cosine_rows_backward(const Matrix<T>& a, const Matrix<T>& b, std::span<const T> dcos,
                          Matrix<T>& da, Matrix<T>& db) {
  da.resize(a.rows(), a.cols());
  db.resize(b.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const T ab = dot(a.row(i), b.row(i));
    const T aa = dot(a.row(i), a.row(i));
    const T bb = dot(b.row(i), b.row(i));
    const T na = std::sqrt(aa), nb = std::sqrt(bb);
    const T denom = na * nb;
    if (denom > T(kCosineFloor)) {
      const T c = ab / denom;
      for (std::size_t j = 0; j < a.cols(); ++j) {
        da(i, j) = dcos[i] * (b(i, j) / denom - c * a(i, j) / aa);
        db(i, j) = dcos[i] * (a(i, j) / denom - c * b(i, j) / bb);
      }
    } else {
      const T inv = T(1) / T(kCosineFloor);
      for (std::size_t j = 0; j < a.cols(); ++j) {
        da(i, j) = dcos[i] * b(i, j) * inv;
        db(i, j) = dcos[i] * a(i, j) * inv;
      }
    }
  }
}

// -------------------------------------------------------- pairwise dists

/// Euclidean distances among the rows of `z` listed in `subset`.
template <class T>
Matrix<T> pairwise_distances(const Matrix<T>& z, std::span<const std::size_t> subset) {
  const std::size_t n = subset.size();
  Matrix<T> d(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      T acc{};
      auto ri = z.row(subset[i]);
      auto rj = z.row(subset[j]);
      for (std::size_t c = 0; c < z.cols(); ++c) acc += (ri[c] - rj[c]) * (ri[c] - rj[c]);
      d(i, j) = d(j, i) = std::sqrt(acc);
    }
  return d;
}

/// Accumulates into dz the gradient of L given dL/dD (both triangles are
/// read; a symmetric dD counts each pair twice). Zero distances contribute 0.
template <class T>
void pairwise_distances_backward(const Matrix<T>& z, std::span<const std::size_t> subset,
                                 const Matrix<T>& dist, const Matrix<T>& ddist, Matrix<T>& dz) {
  const std::size_t n = subset.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j || dist(i, j) == T{}) continue;
      const T g = ddist(i, j) / dist(i, j);
      if (g == T{}) continue;
      auto ri = z.row(subset[i]);
      auto rj = z.row(subset[j]);
      auto gi = dz.row(subset[i]);
      auto gj = dz.row(subset[j]);
      for (std::size_t c = 0; c < z.cols(); ++c) {
        const T v = g * (ri[c] - rj[c]);
        gi[c] += v;
        gj[c] -= v;
      }
    }
}

}  // namespace medmix
