// Copyright 2026 The efsl Authors
// SPDX-License-Identifier: Apache-2.0

// Straight-line double-precision reference implementations on nested
// vectors. They share nothing with the tensor library except reading raw
// values out of tensors, so agreement with them is an independent check.

#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "efsl/backbone/vit.hpp"
#include "efsl/blocks/side_chain.hpp"

namespace efsl::oracle {

using Mat = std::vector<std::vector<double>>;
using num::Tensor;

inline Mat to_mat(const Tensor<double>& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) m[i][j] = t[offset + i * cols + j];
  return m;
}

// Rows of a rank-2 tensor, or of one batch entry of a rank-3 tensor.
inline Mat rows_of(const Tensor<double>& t, std::size_t batch_index = 0) {
  const std::size_t cols = t.dim(-1);
  const std::size_t rows = t.rank() == 3 ? t.dim(1) : t.dim(0);
  return to_mat(t, rows, cols, batch_index * rows * cols);
}

inline Mat affine(const Mat& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  Mat y(x.size(), std::vector<double>(out));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t k = 0; k < in; ++k) s += x[r][k] * w[k * out + o];
      y[r][o] = s;
    }
  return y;
}

inline Mat layer_norm(const Mat& x, const Tensor<double>& g, const Tensor<double>& b) {
  Mat y = x;
  for (std::size_t r = 0; r < x.size(); ++r) {
    const double n = static_cast<double>(x[r].size());
    double mu = 0, var = 0;
    for (double v : x[r]) mu += v;
    mu /= n;
    for (double v : x[r]) var += (v - mu) * (v - mu);
    var /= n;
    for (std::size_t j = 0; j < x[r].size(); ++j) y[r][j] = (x[r][j] - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

inline double gelu(double v) {
  return 0.5 * v * (1 + std::tanh(std::sqrt(2 / std::numbers::pi) * (v + 0.044715 * v * v * v)));
}

inline Mat gelu(Mat x) {
  for (auto& row : x)
    for (auto& v : row) v = gelu(v);
  return x;
}

inline Mat add(const Mat& a, const Mat& b) {
  Mat y = a;
  for (std::size_t r = 0; r < a.size(); ++r)
    for (std::size_t j = 0; j < a[r].size(); ++j) y[r][j] += b[r][j];
  return y;
}

inline Mat scaled(Mat a, double s) {
  for (auto& row : a)
    for (auto& v : row) v *= s;
  return a;
}

inline std::vector<double> softmax(std::vector<double> s) {
  double mx = s[0], z = 0;
  for (double e : s) mx = std::max(mx, e);
  for (double& e : s) z += (e = std::exp(e - mx));
  for (double& e : s) e /= z;
  return s;
}

// Explicit per-pair attention, one head at a time.
inline Mat attention(const Mat& q_in, const Mat& kv_in, const vit::AttentionWeights<double>& w, int heads) {
  const Mat q = affine(q_in, w.q.w, w.q.b), k = affine(kv_in, w.k.w, w.k.b), v = affine(kv_in, w.v.w, w.v.b);
  const std::size_t d = q[0].size(), dh = d / static_cast<std::size_t>(heads);
  Mat out(q.size(), std::vector<double>(d, 0.0));
  for (int h = 0; h < heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * dh;
    for (std::size_t i = 0; i < q.size(); ++i) {
      std::vector<double> s(k.size());
      for (std::size_t j = 0; j < k.size(); ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < dh; ++c) dot += q[i][off + c] * k[j][off + c];
        s[j] = dot / std::sqrt(static_cast<double>(dh));
      }
      s = softmax(s);
      for (std::size_t j = 0; j < k.size(); ++j)
        for (std::size_t c = 0; c < dh; ++c) out[i][off + c] += s[j] * v[j][off + c];
    }
  }
  return affine(out, w.o.w, w.o.b);
}

inline Mat mlp(const vit::Mlp<double>& m, const Mat& x) {
  return affine(gelu(affine(x, m.fc1.w, m.fc1.b)), m.fc2.w, m.fc2.b);
}

inline Mat layer(const vit::LayerWeights<double>& l, const Mat& x, int heads) {
  const Mat n1 = layer_norm(x, l.ln1.gamma, l.ln1.beta);
  const Mat h = add(x, attention(n1, n1, l.attn, heads));
  return add(h, mlp(l.mlp, layer_norm(h, l.ln2.gamma, l.ln2.beta)));
}

inline Mat bottleneck(const fsl::Bottleneck<double>& b, const Mat& x) {
  Mat h = affine(x, b.down.w, b.down.b);
  if (b.act == fsl::Activation::gelu) h = gelu(h);
  return affine(h, b.up.w, b.up.b);
}

struct LayerFeatures {
  Mat f_att, f_mlp, h;
};

// Frozen block: LN1 on both sides, cross-attention, residual, LN2 + MLP.
inline LayerFeatures frozen(const vit::LayerWeights<double>& w, const Mat& f, const Mat& x, int heads) {
  LayerFeatures o;
  o.f_att = add(attention(layer_norm(f, w.ln1.gamma, w.ln1.beta), layer_norm(x, w.ln1.gamma, w.ln1.beta), w.attn,
                          heads),
                f);
  o.f_mlp = mlp(w.mlp, layer_norm(o.f_att, w.ln2.gamma, w.ln2.beta));
  o.h = add(o.f_mlp, o.f_att);
  return o;
}

inline std::vector<double> mean_rows(const Mat& m) {
  std::vector<double> out(m[0].size(), 0.0);
  for (const auto& r : m)
    for (std::size_t j = 0; j < r.size(); ++j) out[j] += r[j] / static_cast<double>(m.size());
  return out;
}

// Weighted sum of shared projections for one batch entry, as a double loop.
inline Mat combine(const fsl::Bottleneck<double>& shared, const std::vector<Mat>& feats, const std::vector<double>& w) {
  Mat out(feats[0].size(), std::vector<double>(feats[0][0].size(), 0.0));
  for (std::size_t k = 0; k < feats.size(); ++k) {
    const Mat p = bottleneck(shared, feats[k]);
    for (std::size_t t = 0; t < p.size(); ++t)
      for (std::size_t j = 0; j < p[t].size(); ++j) out[t][j] += w[k] * p[t][j];
  }
  return out;
}

// Per-class means by explicit grouping.
inline Mat prototypes(const Mat& support, const std::vector<int>& labels, int ways) {
  Mat out(static_cast<std::size_t>(ways), std::vector<double>(support[0].size(), 0.0));
  for (int c = 0; c < ways; ++c) {
    double count = 0;
    for (std::size_t i = 0; i < support.size(); ++i) {
      if (labels[i] != c) continue;
      count += 1;
      for (std::size_t j = 0; j < support[i].size(); ++j) out[static_cast<std::size_t>(c)][j] += support[i][j];
    }
    for (auto& v : out[static_cast<std::size_t>(c)]) v /= count;
  }
  return out;
}

// alpha * A q + (1 - alpha) s, A[c][j] = <s_c, proj(q_j)>, per-row softmax
// of A / sqrt(d) when `normalised`.
inline Mat sq(const Mat& s, const Mat& q, const Mat& projected, double alpha, bool normalised) {
  const std::size_t d = s[0].size();
  Mat out = s;
  for (std::size_t c = 0; c < s.size(); ++c) {
    std::vector<double> a(q.size());
    for (std::size_t j = 0; j < q.size(); ++j) {
      double dot = 0;
      for (std::size_t e = 0; e < d; ++e) dot += s[c][e] * projected[j][e];
      a[j] = normalised ? dot / std::sqrt(static_cast<double>(d)) : dot;
    }
    if (normalised) a = softmax(a);
    for (std::size_t e = 0; e < d; ++e) {
      double mixed = 0;
      for (std::size_t j = 0; j < q.size(); ++j) mixed += a[j] * q[j][e];
      out[c][e] = alpha * mixed + (1 - alpha) * s[c][e];
    }
  }
  return out;
}

inline double max_diff(const Tensor<double>& t, std::size_t offset, const Mat& m) {
  double worst = 0;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j)
      worst = std::max(worst, std::abs(t[offset + i * m[i].size() + j] - m[i][j]));
  return worst;
}

inline double max_diff(const Mat& a, const Mat& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) worst = std::max(worst, std::abs(a[i][j] - b[i][j]));
  return worst;
}

}  // namespace efsl::oracle
