#pragma once

// Transformer and convolution building blocks with explicit backward passes.
//
// Activations are token matrices: one row per token, one column per feature.
// Every layer is a plain struct of parameter indices; forward() optionally
// fills a cache, backward() consumes it, accumulates parameter gradients into
// a ParamSet of the same layout and returns the input gradient.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "epact/nn/params.hpp"

namespace epact::nn {

template <typename S>
Mat<S> relu(const Mat<S>& x) {
  return x.cwiseMax(S(0));
}

/// Zeroes dy where the pre-activation was non-positive.
template <typename S>
Mat<S> relu_backward(const Mat<S>& pre, const Mat<S>& dy) {
  return (pre.array() > S(0)).select(dy, S(0));
}

struct Linear {
  std::size_t w = 0, b = 0;
  int in = 0, out = 0;

  static Linear make(ParamBuilder& pb, const std::string& name, int in, int out) {
    ParamBuilder::Scope scope(pb, name);
    Linear l;
    l.in = in;
    l.out = out;
    // Xavier-uniform weights, zero bias.
    l.w = pb.uniform("weight", out, in, std::sqrt(6.0 / (in + out)));
    l.b = pb.constant("bias", 1, out, 0.0);
    return l;
  }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& x) const {
    Mat<S> y = x * p[w].transpose();
    y.rowwise() += p[b].row(0);
    return y;
  }

  template <typename S>
  Mat<S> backward(const ParamSet<S>& p, const Mat<S>& x, const Mat<S>& dy, ParamSet<S>& g) const {
    g[w].noalias() += dy.transpose() * x;
    g[b].row(0) += dy.colwise().sum();
    return dy * p[w];
  }

  /// Parameter-gradient accumulation only (input gradient not needed).
  template <typename S>
  void backward_params(const Mat<S>& x, const Mat<S>& dy, ParamSet<S>& g) const {
    g[w].noalias() += dy.transpose() * x;
    g[b].row(0) += dy.colwise().sum();
  }
};

struct LayerNorm {
  std::size_t gamma = 0, beta = 0;
  int dim = 0;
  static constexpr double kEps = 1e-5;

  template <typename S>
  struct Cache {
    Mat<S> xhat;
    Vec<S> inv_std;
  };

  static LayerNorm make(ParamBuilder& pb, const std::string& name, int dim) {
    ParamBuilder::Scope scope(pb, name);
    LayerNorm l;
    l.dim = dim;
    l.gamma = pb.constant("gamma", 1, dim, 1.0);
    l.beta = pb.constant("beta", 1, dim, 0.0);
    return l;
  }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& x, Cache<S>* cache = nullptr) const {
    const Vec<S> mean = x.rowwise().mean();
    Mat<S> xc = x.colwise() - mean;
    const Vec<S> var = xc.array().square().rowwise().mean();
    const Vec<S> inv_std = (var.array() + S(kEps)).rsqrt();
    Mat<S> xhat = xc.array().colwise() * inv_std.array();
    Mat<S> y = xhat.array().rowwise() * p[gamma].row(0).array();
    y.rowwise() += p[beta].row(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = inv_std;
    }
    return y;
  }

  template <typename S>
  Mat<S> backward(const ParamSet<S>& p, const Cache<S>& c, const Mat<S>& dy, ParamSet<S>& g) const {
    g[gamma].row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    g[beta].row(0) += dy.colwise().sum();
    const Mat<S> dxhat = dy.array().rowwise() * p[gamma].row(0).array();
    const Vec<S> mean_dxhat = dxhat.rowwise().mean();
    const Vec<S> mean_dxhat_xhat = (dxhat.array() * c.xhat.array()).rowwise().mean();
    Mat<S> dx = dxhat.colwise() - mean_dxhat;
    dx.array() -= c.xhat.array().colwise() * mean_dxhat_xhat.array();
    return dx.array().colwise() * c.inv_std.array();
  }
};

/// Multi-head scaled dot-product attention (queries from xq, keys/values from xkv).
struct Attention {
  Linear q, k, v, o;
  int heads = 1;
  int dim = 0;

  template <typename S>
  struct Cache {
    Mat<S> xq, xkv, Q, K, V, concat;
    std::vector<Mat<S>> probs;
  };

  static Attention make(ParamBuilder& pb, const std::string& name, int dim, int heads) {
    if (heads < 1 || dim % heads != 0) throw Error(ErrorCode::InvalidConfig, "width must be divisible by heads");
    ParamBuilder::Scope scope(pb, name);
    Attention a;
    a.dim = dim;
    a.heads = heads;
    a.q = Linear::make(pb, "q", dim, dim);
    a.k = Linear::make(pb, "k", dim, dim);
    a.v = Linear::make(pb, "v", dim, dim);
    a.o = Linear::make(pb, "o", dim, dim);
    return a;
  }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& xq, const Mat<S>& xkv, Cache<S>* cache = nullptr) const {
    const int dh = dim / heads;
    const S scale = S(1) / std::sqrt(S(dh));
    Mat<S> Q = q.forward(p, xq), K = k.forward(p, xkv), V = v.forward(p, xkv);
    Mat<S> concat(xq.rows(), dim);
    std::vector<Mat<S>> probs;
    if (cache) probs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
      Mat<S> scores = (Q.middleCols(h * dh, dh) * K.middleCols(h * dh, dh).transpose()) * scale;
      const Vec<S> row_max = scores.rowwise().maxCoeff();
      scores = (scores.colwise() - row_max).array().exp();
      const Vec<S> row_sum = scores.rowwise().sum();
      scores = scores.array().colwise() / row_sum.array();
      concat.middleCols(h * dh, dh).noalias() = scores * V.middleCols(h * dh, dh);
      if (cache) probs.push_back(std::move(scores));
    }
    Mat<S> y = o.forward(p, concat);
    if (cache) {
      cache->xq = xq;
      cache->xkv = xkv;
      cache->Q = std::move(Q);
      cache->K = std::move(K);
      cache->V = std::move(V);
      cache->concat = std::move(concat);
      cache->probs = std::move(probs);
    }
    return y;
  }

  /// Returns (d xq, d xkv).
  template <typename S>
  std::pair<Mat<S>, Mat<S>> backward(const ParamSet<S>& p, const Cache<S>& c, const Mat<S>& dy, ParamSet<S>& g) const {
    const int dh = dim / heads;
    const S scale = S(1) / std::sqrt(S(dh));
    const Mat<S> dconcat = o.backward(p, c.concat, dy, g);
    Mat<S> dQ(c.Q.rows(), dim), dK(c.K.rows(), dim), dV(c.V.rows(), dim);
    for (int h = 0; h < heads; ++h) {
      const Mat<S>& P = c.probs[h];
      const auto dO = dconcat.middleCols(h * dh, dh);
      const Mat<S> dP = dO * c.V.middleCols(h * dh, dh).transpose();
      dV.middleCols(h * dh, dh).noalias() = P.transpose() * dO;
      const Vec<S> inner = (dP.array() * P.array()).rowwise().sum();
      const Mat<S> dScores = (P.array() * (dP.colwise() - inner).array()) * scale;
      dQ.middleCols(h * dh, dh).noalias() = dScores * c.K.middleCols(h * dh, dh);
      dK.middleCols(h * dh, dh).noalias() = dScores.transpose() * c.Q.middleCols(h * dh, dh);
    }
    Mat<S> dxq = q.backward(p, c.xq, dQ, g);
    Mat<S> dxkv = k.backward(p, c.xkv, dK, g);
    dxkv += v.backward(p, c.xkv, dV, g);
    return {std::move(dxq), std::move(dxkv)};
  }
};

/// Stack of Linear layers with ReLU between them (none after the last).
struct Mlp {
  std::vector<Linear> layers;

  template <typename S>
  struct Cache {
    std::vector<Mat<S>> inputs;  // input of each layer
    std::vector<Mat<S>> pre;     // pre-activation of each hidden layer
  };

  static Mlp make(ParamBuilder& pb, const std::string& name, const std::vector<int>& sizes) {
    ParamBuilder::Scope scope(pb, name);
    Mlp m;
    for (std::size_t i = 0; i + 1 < sizes.size(); ++i)
      m.layers.push_back(Linear::make(pb, "l" + std::to_string(i), sizes[i], sizes[i + 1]));
    return m;
  }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& x, Cache<S>* cache = nullptr) const {
    Mat<S> h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (cache) cache->inputs.push_back(h);
      Mat<S> y = layers[i].forward(p, h);
      if (i + 1 < layers.size()) {
        if (cache) cache->pre.push_back(y);
        h = relu(y);
      } else {
        h = std::move(y);
      }
    }
    return h;
  }

  template <typename S>
  Mat<S> backward(const ParamSet<S>& p, const Cache<S>& c, const Mat<S>& dy, ParamSet<S>& g) const {
    Mat<S> d = dy;
    for (std::size_t i = layers.size(); i-- > 0;) {
      if (i + 1 < layers.size()) d = relu_backward(c.pre[i], d);
      d = layers[i].backward(p, c.inputs[i], d, g);
    }
    return d;
  }
};

/// Pre-norm transformer encoder layer: x + Attn(LN x), then + FFN(LN x).
struct EncoderLayer {
  LayerNorm ln1, ln2;
  Attention attn;
  Mlp ffn;

  template <typename S>
  struct Cache {
    typename LayerNorm::template Cache<S> ln1, ln2;
    typename Attention::template Cache<S> attn;
    typename Mlp::template Cache<S> ffn;
  };

  static EncoderLayer make(ParamBuilder& pb, const std::string& name, int dim, int heads, int ffn_dim) {
    ParamBuilder::Scope scope(pb, name);
    EncoderLayer e;
    e.ln1 = LayerNorm::make(pb, "ln1", dim);
    e.attn = Attention::make(pb, "attn", dim, heads);
    e.ln2 = LayerNorm::make(pb, "ln2", dim);
    e.ffn = Mlp::make(pb, "ffn", {dim, ffn_dim, dim});
    return e;
  }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& x, Cache<S>* c = nullptr) const {
    const Mat<S> n1 = ln1.forward(p, x, c ? &c->ln1 : nullptr);
    Mat<S> x1 = x + attn.forward(p, n1, n1, c ? &c->attn : nullptr);
    const Mat<S> n2 = ln2.forward(p, x1, c ? &c->ln2 : nullptr);
    x1 += ffn.forward(p, n2, c ? &c->ffn : nullptr);
    return x1;
  }

  template <typename S>
  Mat<S> backward(const ParamSet<S>& p, const Cache<S>& c, const Mat<S>& dy, ParamSet<S>& g) const {
    Mat<S> dx1 = dy + ln2.backward(p, c.ln2, ffn.backward(p, c.ffn, dy, g), g);
    auto [dq, dkv] = attn.backward(p, c.attn, dx1, g);
    dq += dkv;
    dx1 += ln1.backward(p, c.ln1, dq, g);
    return dx1;
  }
};

/// Pre-norm decoder layer: self-attention, cross-attention to memory, FFN.
struct DecoderLayer {
  LayerNorm ln1, ln2, ln3;
  Attention self_attn, cross_attn;
  Mlp ffn;

  template <typename S>
  struct Cache {
    typename LayerNorm::template Cache<S> ln1, ln2, ln3;
    typename Attention::template Cache<S> self_attn, cross_attn;
    typename Mlp::template Cache<S> ffn;
  };

  static DecoderLayer make(ParamBuilder& pb, const std::string& name, int dim, int heads, int ffn_dim) {
    ParamBuilder::Scope scope(pb, name);
    DecoderLayer d;
    d.ln1 = LayerNorm::make(pb, "ln1", dim);
    d.self_attn = Attention::make(pb, "self_attn", dim, heads);
    d.ln2 = LayerNorm::make(pb, "ln2", dim);
    d.cross_attn = Attention::make(pb, "cross_attn", dim, heads);
    d.ln3 = LayerNorm::make(pb, "ln3", dim);
    d.ffn = Mlp::make(pb, "ffn", {dim, ffn_dim, dim});
    return d;
  }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& x, const Mat<S>& memory, Cache<S>* c = nullptr) const {
    const Mat<S> n1 = ln1.forward(p, x, c ? &c->ln1 : nullptr);
    Mat<S> h = x + self_attn.forward(p, n1, n1, c ? &c->self_attn : nullptr);
    const Mat<S> n2 = ln2.forward(p, h, c ? &c->ln2 : nullptr);
    h += cross_attn.forward(p, n2, memory, c ? &c->cross_attn : nullptr);
    const Mat<S> n3 = ln3.forward(p, h, c ? &c->ln3 : nullptr);
    h += ffn.forward(p, n3, c ? &c->ffn : nullptr);
    return h;
  }

  /// Returns d x; adds the memory gradient into dmemory.
  template <typename S>
  Mat<S> backward(const ParamSet<S>& p, const Cache<S>& c, const Mat<S>& dy, Mat<S>& dmemory, ParamSet<S>& g) const {
    Mat<S> dh = dy + ln3.backward(p, c.ln3, ffn.backward(p, c.ffn, dy, g), g);
    auto [dn2, dmem] = cross_attn.backward(p, c.cross_attn, dh, g);
    dmemory += dmem;
    dh += ln2.backward(p, c.ln2, dn2, g);
    auto [dq, dkv] = self_attn.backward(p, c.self_attn, dh, g);
    dq += dkv;
    dh += ln1.backward(p, c.ln1, dq, g);
    return dh;
  }
};

/// 3x3 convolution, stride 2, padding 1, on a (H*W) x C feature map
/// (row = y * W + x).
struct Conv2d {
  std::size_t w = 0, b = 0;
  int in_ch = 0, out_ch = 0;
  static constexpr int kKernel = 3, kStride = 2, kPad = 1;

  static int out_size(int n) { return (n + 2 * kPad - kKernel) / kStride + 1; }

  static Conv2d make(ParamBuilder& pb, const std::string& name, int in_ch, int out_ch) {
    ParamBuilder::Scope scope(pb, name);
    Conv2d c;
    c.in_ch = in_ch;
    c.out_ch = out_ch;
    const int fan_in = in_ch * kKernel * kKernel;
    // He-uniform for ReLU stacks.
    c.w = pb.uniform("weight", out_ch, fan_in, std::sqrt(6.0 / fan_in));
    c.b = pb.constant("bias", 1, out_ch, 0.0);
    return c;
  }

  template <typename S>
  Mat<S> im2col(const Mat<S>& x, int H, int W) const {
    const int Ho = out_size(H), Wo = out_size(W);
    Mat<S> col = Mat<S>::Zero(Ho * Wo, kKernel * kKernel * in_ch);
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        for (int ky = 0; ky < kKernel; ++ky) {
          const int iy = oy * kStride - kPad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ix = ox * kStride - kPad + kx;
            if (ix < 0 || ix >= W) continue;
            col.block(oy * Wo + ox, (ky * kKernel + kx) * in_ch, 1, in_ch) = x.row(iy * W + ix);
          }
        }
    return col;
  }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& x, int H, int W, Mat<S>* col_cache = nullptr) const {
    Mat<S> col = im2col(x, H, W);
    Mat<S> y = col * p[w].transpose();
    y.rowwise() += p[b].row(0);
    if (col_cache) *col_cache = std::move(col);
    return y;
  }

  /// Accumulates parameter gradients; returns the input gradient unless
  /// need_input_grad is false (first layer).
  template <typename S>
  Mat<S> backward(const ParamSet<S>& p, const Mat<S>& col, int H, int W, const Mat<S>& dy, ParamSet<S>& g,
                  bool need_input_grad = true) const {
    g[w].noalias() += dy.transpose() * col;
    g[b].row(0) += dy.colwise().sum();
    if (!need_input_grad) return {};
    const Mat<S> dcol = dy * p[w];
    const int Ho = out_size(H), Wo = out_size(W);
    Mat<S> dx = Mat<S>::Zero(H * W, in_ch);
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox)
        for (int ky = 0; ky < kKernel; ++ky) {
          const int iy = oy * kStride - kPad + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kKernel; ++kx) {
            const int ix = ox * kStride - kPad + kx;
            if (ix < 0 || ix >= W) continue;
            dx.row(iy * W + ix) += dcol.block(oy * Wo + ox, (ky * kKernel + kx) * in_ch, 1, in_ch);
          }
        }
    return dx;
  }
};

/// Strided conv + ReLU blocks; output is a token matrix (h*w) x channels.
struct ConvBackbone {
  std::vector<Conv2d> blocks;

  template <typename S>
  struct Cache {
    std::vector<Mat<S>> cols, pre;
    std::vector<std::pair<int, int>> sizes;  // input H, W per block
  };

  static ConvBackbone make(ParamBuilder& pb, const std::string& name, int in_ch, const std::vector<int>& channels) {
    ParamBuilder::Scope scope(pb, name);
    ConvBackbone bb;
    int c = in_ch;
    for (std::size_t i = 0; i < channels.size(); ++i) {
      bb.blocks.push_back(Conv2d::make(pb, "conv" + std::to_string(i), c, channels[i]));
      c = channels[i];
    }
    return bb;
  }

  static std::pair<int, int> output_size(std::size_t n_blocks, int H, int W) {
    for (std::size_t i = 0; i < n_blocks; ++i) {
      H = Conv2d::out_size(H);
      W = Conv2d::out_size(W);
    }
    return {H, W};
  }

  int out_channels() const { return blocks.back().out_ch; }

  template <typename S>
  Mat<S> forward(const ParamSet<S>& p, const Mat<S>& image, int H, int W, Cache<S>* c = nullptr) const {
    Mat<S> x = image;
    for (const auto& conv : blocks) {
      Mat<S> col;
      Mat<S> y = conv.forward(p, x, H, W, c ? &col : nullptr);
      if (c) {
        c->cols.push_back(std::move(col));
        c->sizes.emplace_back(H, W);
        c->pre.push_back(y);
      }
      x = relu(y);
      H = Conv2d::out_size(H);
      W = Conv2d::out_size(W);
    }
    return x;
  }

  template <typename S>
  void backward(const ParamSet<S>& p, const Cache<S>& c, const Mat<S>& dy, ParamSet<S>& g) const {
    Mat<S> d = dy;
    for (std::size_t i = blocks.size(); i-- > 0;) {
      d = relu_backward(c.pre[i], d);
      d = blocks[i].backward(p, c.cols[i], c.sizes[i].first, c.sizes[i].second, d, g, i > 0);
    }
  }
};

/// Fixed 1-D sinusoidal position table (n x dim).
template <typename S>
Mat<S> sinusoid_1d(int n, int dim) {
  Mat<S> pe(n, dim);
  for (int pos = 0; pos < n; ++pos)
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -2.0 * (i / 2) / dim);
      pe(pos, i) = S(i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
    }
  return pe;
}

/// Fixed 2-D sinusoidal table for an h x w grid: first half of the features
/// encodes the row, second half the column.
template <typename S>
Mat<S> sinusoid_2d(int h, int w, int dim) {
  const int half = dim / 2;
  const Mat<S> rows = sinusoid_1d<S>(h, half);
  const Mat<S> cols = sinusoid_1d<S>(w, dim - half);
  Mat<S> pe(h * w, dim);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      pe.block(y * w + x, 0, 1, half) = rows.row(y);
      pe.block(y * w + x, half, 1, dim - half) = cols.row(x);
    }
  return pe;
}

}  // namespace epact::nn
