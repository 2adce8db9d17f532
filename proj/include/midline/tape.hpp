#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <utility>

#include "midline/tensor.hpp"

namespace midline::ad {

/// Reverse-mode graph. Nodes are appended in evaluation order, so the
/// reverse sweep over node indices is a reverse topological order and
/// visits each node exactly once. Gradients accumulate additively, which
/// handles fan-out. A Tape is single-owner; it is never shared across
/// threads.
template <class S>
class Tape {
 public:
  struct Node {
    Tensor<S> value;
    std::vector<S> grad;
    std::function<void(Tape&)> back;  // empty for leaves/constants
    bool requires_grad = false;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int leaf(Tensor<S> t) { return make_node(std::move(t), true, nullptr); }
  int constant(Tensor<S> t) { return make_node(std::move(t), false, nullptr); }

  int make_node(Tensor<S> value, bool requires_grad, std::function<void(Tape&)> back) {
    nodes_.push_back(Node{std::move(value), {}, std::move(back), requires_grad});
    return (int)nodes_.size() - 1;
  }

  /// For op authors whose backward closure needs the node's own id.
  void set_back(int id, std::function<void(Tape&)> back) {
    if (nodes_[(size_t)id].requires_grad) nodes_[(size_t)id].back = std::move(back);
  }

  const Tensor<S>& value(int id) const { return nodes_[(size_t)id].value; }
  bool requires_grad(int id) const { return nodes_[(size_t)id].requires_grad; }
  size_t size() const { return nodes_.size(); }

  std::vector<S>& grad_buf(int id) {
    Node& n = nodes_[(size_t)id];
    if (n.grad.size() != n.value.v.size()) n.grad.assign(n.value.v.size(), S(0));
    return n.grad;
  }

  Tensor<S> grad_tensor(int id) {
    Tensor<S> g;
    g.shape = nodes_[(size_t)id].value.shape;
    g.v = grad_buf(id);
    return g;
  }

  /// Seeds d(root)/d(root) = 1 and sweeps the tape in reverse order.
  void backward(int root) {
    if (nodes_[(size_t)root].value.numel() != 1)
      throw std::invalid_argument("backward root must be scalar");
    for (int i = 0; i <= root; ++i) grad_buf(i);
    nodes_[(size_t)root].grad[0] = S(1);
    backward_calls_ = 0;
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[(size_t)i];
      if (n.back && n.requires_grad) {
        n.back(*this);
        ++backward_calls_;
      }
    }
  }

  int backward_calls() const { return backward_calls_; }

  // ---------------------------------------------------------------------
  // elementwise / arithmetic
  // ---------------------------------------------------------------------

  int add(int a, int b) {
    check_same_shape(a, b, "add");
    Tensor<S> out = value(a);
    const Tensor<S>& vb = value(b);
    for (int i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, int self, int pa, int pb) {
      const auto& g = t.nodes_[(size_t)self].grad;
      if (t.requires_grad(pa)) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.requires_grad(pb)) {
        auto& gb = t.grad_buf(pb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }

  int sub(int a, int b) {
    check_same_shape(a, b, "sub");
    Tensor<S> out = value(a);
    const Tensor<S>& vb = value(b);
    for (int i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, int self, int pa, int pb) {
      const auto& g = t.nodes_[(size_t)self].grad;
      if (t.requires_grad(pa)) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (t.requires_grad(pb)) {
        auto& gb = t.grad_buf(pb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    });
  }

  int scale(int a, S k) {
    Tensor<S> out = value(a);
    for (auto& x : out.v) x *= k;
    bool rq = requires_grad(a);
    int id = make_node(std::move(out), rq, nullptr);
    if (rq)
      nodes_[(size_t)id].back = [id, a, k](Tape& t) {
        const auto& g = t.nodes_[(size_t)id].grad;
        auto& ga = t.grad_buf(a);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
      };
    return id;
  }

  int elementwise_mul(int a, int b) {
    check_same_shape(a, b, "elementwise_mul");
    Tensor<S> out = value(a);
    const Tensor<S>& vb = value(b);
    for (int i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return unary_or_binary(std::move(out), a, b, [](Tape& t, int self, int pa, int pb) {
      const auto& g = t.nodes_[(size_t)self].grad;
      const auto& va = t.value(pa).v;
      const auto& vb2 = t.value(pb).v;
      if (t.requires_grad(pa)) {
        auto& ga = t.grad_buf(pa);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb2[i];
      }
      if (t.requires_grad(pb)) {
        auto& gb = t.grad_buf(pb);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
      }
    });
  }

  int reshape(int x, Shape sh) {
    if (shape_numel(sh) != value(x).numel())
      throw std::invalid_argument("reshape element count mismatch");
    Tensor<S> out = value(x);
    out.shape = std::move(sh);
    return simple_unary(std::move(out), x, [](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      auto& gx = t.grad_buf(p);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }

  int relu(int x) {
    Tensor<S> out = value(x);
    for (auto& e : out.v) e = e > S(0) ? e : S(0);
    return simple_unary(std::move(out), x, [](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      const auto& vx = t.value(p).v;
      auto& gx = t.grad_buf(p);
      // subgradient at 0 is 0
      for (size_t i = 0; i < g.size(); ++i) gx[i] += vx[i] > S(0) ? g[i] : S(0);
    });
  }

  int sigmoid(int x) {
    Tensor<S> out = value(x);
    for (auto& e : out.v) e = S(1) / (S(1) + std::exp(-e));
    int id = simple_unary(std::move(out), x, nullptr);
    if (requires_grad(x))
      nodes_[(size_t)id].back = [id, x](Tape& t) {
        const auto& g = t.nodes_[(size_t)id].grad;
        const auto& s = t.value(id).v;
        auto& gx = t.grad_buf(x);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (S(1) - s[i]);
      };
    return id;
  }

  int atan_elem(int x) {
    Tensor<S> out = value(x);
    for (auto& e : out.v) e = std::atan(e);
    return simple_unary(std::move(out), x, [](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      const auto& vx = t.value(p).v;
      auto& gx = t.grad_buf(p);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (S(1) + vx[i] * vx[i]);
    });
  }

  /// log(p / (1-p)) with inputs clamped to [eps, 1-eps]; clamped
  /// coordinates get zero gradient.
  int logit(int x) {
    const S eps = logit_eps();
    Tensor<S> out = value(x);
    for (auto& e : out.v) {
      S c = std::clamp(e, eps, S(1) - eps);
      e = std::log(c / (S(1) - c));
    }
    return simple_unary(std::move(out), x, [eps](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      const auto& vx = t.value(p).v;
      auto& gx = t.grad_buf(p);
      for (size_t i = 0; i < g.size(); ++i) {
        if (vx[i] > eps && vx[i] < S(1) - eps) gx[i] += g[i] / (vx[i] * (S(1) - vx[i]));
      }
    });
  }

  int sum(int x) {
    S acc = 0;
    for (S e : value(x).v) acc += e;
    return simple_unary(Tensor<S>::scalar(acc), x, [](Tape& t, int self, int p) {
      const S g = t.nodes_[(size_t)self].grad[0];
      auto& gx = t.grad_buf(p);
      for (auto& e : gx) e += g;
    });
  }

  /// Weighted sum of scalar nodes: sum_i w_i * x_i.
  int weighted_sum(const std::vector<std::pair<int, S>>& terms) {
    S acc = 0;
    bool rq = false;
    for (auto& [id, w] : terms) {
      if (value(id).numel() != 1) throw std::invalid_argument("weighted_sum expects scalar terms");
      acc += w * value(id)[0];
      rq = rq || requires_grad(id);
    }
    int out = make_node(Tensor<S>::scalar(acc), rq, nullptr);
    if (rq)
      nodes_[(size_t)out].back = [out, terms](Tape& t) {
        const S g = t.nodes_[(size_t)out].grad[0];
        for (auto& [id, w] : terms)
          if (t.requires_grad(id)) t.grad_buf(id)[0] += w * g;
      };
    return out;
  }

  // ---------------------------------------------------------------------
  // convolution and pooling
  // ---------------------------------------------------------------------

  /// Cross-correlation with zero padding. input [Cin,H,W], kernel
  /// [Cout,Cin,k,k], optional bias [Cout] (pass -1 for none).
  /// H' = (H + 2*pad - k)/stride + 1.
  int conv2d(int input, int kernel, int bias, int stride, int pad) {
    const Tensor<S>& in = value(input);
    const Tensor<S>& ker = value(kernel);
    if (in.shape.size() != 3 || ker.shape.size() != 4)
      throw std::invalid_argument("conv2d expects input [C,H,W] and kernel [Cout,Cin,k,k]");
    const int Cin = in.shape[0], H = in.shape[1], W = in.shape[2];
    const int Cout = ker.shape[0], k = ker.shape[2];
    if (ker.shape[1] != Cin)
      throw std::invalid_argument("conv2d channel mismatch: input has " + std::to_string(Cin) +
                                  " channels, kernel expects " + std::to_string(ker.shape[1]) +
                                  " (kernel " + shape_str(ker.shape) + ", input " + shape_str(in.shape) + ")");
    if (ker.shape[3] != k || k % 2 == 0) throw std::invalid_argument("conv2d kernel must be square with odd extent");
    if (stride < 1) throw std::invalid_argument("conv2d stride must be >= 1");
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho < 1 || Wo < 1) throw std::invalid_argument("conv2d output would be empty for input " + shape_str(in.shape));
    if (bias >= 0 && (value(bias).shape != Shape{Cout}))
      throw std::invalid_argument("conv2d bias must have shape [Cout]");

    std::vector<S> padded = pad_image(in, pad);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;

    Tensor<S> out = Tensor<S>::zeros({Cout, Ho, Wo});
    if (bias >= 0) {
      const Tensor<S>& b = value(bias);
      for (int co = 0; co < Cout; ++co)
        std::fill_n(out.v.begin() + (size_t)co * Ho * Wo, (size_t)Ho * Wo, b[co]);
    }
    for (int co = 0; co < Cout; ++co)
      for (int ci = 0; ci < Cin; ++ci)
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            const S w = ker.v[(size_t)(((co * Cin + ci) * k + dy) * k + dx)];
            if (w == S(0)) continue;
            for (int y = 0; y < Ho; ++y) {
              const S* irow = padded.data() + (size_t)(ci * Hp + y * stride + dy) * Wp + dx;
              S* orow = out.v.data() + (size_t)(co * Ho + y) * Wo;
              if (stride == 1) {
                for (int x = 0; x < Wo; ++x) orow[x] += w * irow[x];
              } else {
                for (int x = 0; x < Wo; ++x) orow[x] += w * irow[x * stride];
              }
            }
          }

    bool rq = requires_grad(input) || requires_grad(kernel) || (bias >= 0 && requires_grad(bias));
    int id = make_node(std::move(out), rq, nullptr);
    if (rq)
      nodes_[(size_t)id].back = [id, input, kernel, bias, stride, pad](Tape& t) {
        t.conv2d_backward(id, input, kernel, bias, stride, pad);
      };
    return id;
  }

  /// 2x2 non-overlapping max pool; H and W must be even. Backward routes
  /// the gradient to the argmax site, first-found in row-major order.
  int maxpool2(int x) {
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 3) throw std::invalid_argument("maxpool2 expects [C,H,W]");
    const int C = in.shape[0], H = in.shape[1], W = in.shape[2];
    if (H % 2 || W % 2)
      throw std::invalid_argument("maxpool2 requires even extents, got " + shape_str(in.shape));
    const int Ho = H / 2, Wo = W / 2;
    Tensor<S> out = Tensor<S>::zeros({C, Ho, Wo});
    std::vector<int> arg((size_t)C * Ho * Wo);
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y)
        for (int x2 = 0; x2 < Wo; ++x2) {
          int best = (c * H + 2 * y) * W + 2 * x2;
          S bv = in.v[(size_t)best];
          const int cand[3] = {best + 1, best + W, best + W + 1};
          for (int idx : cand)
            if (in.v[(size_t)idx] > bv) {
              bv = in.v[(size_t)idx];
              best = idx;
            }
          out.v[(size_t)((c * Ho + y) * Wo + x2)] = bv;
          arg[(size_t)((c * Ho + y) * Wo + x2)] = best;
        }
    return simple_unary(std::move(out), x, [arg = std::move(arg)](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      auto& gx = t.grad_buf(p);
      for (size_t i = 0; i < g.size(); ++i) gx[(size_t)arg[i]] += g[i];
    });
  }

  /// Bilinear upsample by an integer factor, align-corners-false:
  /// source coordinate s = (d + 0.5)/factor - 0.5, clamped to borders.
  int bilinear_upsample(int x, int factor) {
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 3) throw std::invalid_argument("bilinear_upsample expects [C,H,W]");
    if (factor < 1) throw std::invalid_argument("bilinear_upsample factor must be >= 1");
    const int C = in.shape[0], H = in.shape[1], W = in.shape[2];
    const int Ho = H * factor, Wo = W * factor;

    auto mk_axis = [factor](int n_in, int n_out) {
      std::vector<int> i0(n_out), i1(n_out);
      std::vector<S> w1(n_out);
      for (int d = 0; d < n_out; ++d) {
        double s = ((double)d + 0.5) / factor - 0.5;
        s = std::clamp(s, 0.0, (double)(n_in - 1));
        int lo = (int)std::floor(s);
        if (lo >= n_in - 1) lo = n_in - 2 >= 0 ? n_in - 2 : 0;
        int hi = std::min(lo + 1, n_in - 1);
        i0[d] = lo;
        i1[d] = hi;
        w1[d] = n_in == 1 ? S(0) : (S)(s - lo);
      }
      return std::tuple{i0, i1, w1};
    };
    auto [y0, y1, wy] = mk_axis(H, Ho);
    auto [x0, x1, wx] = mk_axis(W, Wo);

    Tensor<S> out = Tensor<S>::zeros({C, Ho, Wo});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < Ho; ++y) {
        const S* r0 = in.v.data() + (size_t)(c * H + y0[y]) * W;
        const S* r1 = in.v.data() + (size_t)(c * H + y1[y]) * W;
        S* orow = out.v.data() + (size_t)(c * Ho + y) * Wo;
        const S fy = wy[y];
        for (int xo = 0; xo < Wo; ++xo) {
          const S fx = wx[xo];
          const S top = r0[x0[xo]] * (S(1) - fx) + r0[x1[xo]] * fx;
          const S bot = r1[x0[xo]] * (S(1) - fx) + r1[x1[xo]] * fx;
          orow[xo] = top * (S(1) - fy) + bot * fy;
        }
      }
    return simple_unary(std::move(out), x,
                        [y0 = y0, y1 = y1, wy = wy, x0 = x0, x1 = x1, wx = wx, C, H, W, Ho, Wo](Tape& t, int self, int p) {
                          const auto& g = t.nodes_[(size_t)self].grad;
                          auto& gx = t.grad_buf(p);
                          for (int c = 0; c < C; ++c)
                            for (int y = 0; y < Ho; ++y) {
                              S* r0 = gx.data() + (size_t)(c * H + y0[y]) * W;
                              S* r1 = gx.data() + (size_t)(c * H + y1[y]) * W;
                              const S* grow = g.data() + (size_t)(c * Ho + y) * Wo;
                              const S fy = wy[y];
                              for (int xo = 0; xo < Wo; ++xo) {
                                const S fx = wx[xo];
                                const S gv = grow[xo];
                                r0[x0[xo]] += gv * (S(1) - fy) * (S(1) - fx);
                                r0[x1[xo]] += gv * (S(1) - fy) * fx;
                                r1[x0[xo]] += gv * fy * (S(1) - fx);
                                r1[x1[xo]] += gv * fy * fx;
                              }
                            }
                        });
  }

  int concat_channels(const std::vector<int>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_channels needs at least one input");
    const int H = value(xs[0]).shape[1], W = value(xs[0]).shape[2];
    int Ctot = 0;
    bool rq = false;
    for (int id : xs) {
      const auto& sh = value(id).shape;
      if (sh.size() != 3 || sh[1] != H || sh[2] != W)
        throw std::invalid_argument("concat_channels spatial extent mismatch");
      Ctot += sh[0];
      rq = rq || requires_grad(id);
    }
    Tensor<S> out = Tensor<S>::zeros({Ctot, H, W});
    size_t off = 0;
    for (int id : xs) {
      const auto& v = value(id).v;
      std::copy(v.begin(), v.end(), out.v.begin() + (long)off);
      off += v.size();
    }
    int id = make_node(std::move(out), rq, nullptr);
    if (rq)
      nodes_[(size_t)id].back = [id, xs](Tape& t) {
        const auto& g = t.nodes_[(size_t)id].grad;
        size_t off2 = 0;
        for (int p : xs) {
          const size_t n = t.value(p).v.size();
          if (t.requires_grad(p)) {
            auto& gp = t.grad_buf(p);
            for (size_t i = 0; i < n; ++i) gp[i] += g[off2 + i];
          }
          off2 += n;
        }
      };
    return id;
  }

  // ---------------------------------------------------------------------
  // pooling-style reductions and per-row ops
  // ---------------------------------------------------------------------

  /// [C,H,W] -> [C], mean over the spatial extent.
  int global_avg_pool(int x) {
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 3) throw std::invalid_argument("global_avg_pool expects [C,H,W]");
    const int C = in.shape[0];
    const int HW = in.shape[1] * in.shape[2];
    Tensor<S> out = Tensor<S>::zeros({C});
    for (int c = 0; c < C; ++c) {
      S acc = 0;
      const S* p = in.v.data() + (size_t)c * HW;
      for (int i = 0; i < HW; ++i) acc += p[i];
      out[c] = acc / (S)HW;
    }
    return simple_unary(std::move(out), x, [C, HW](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      auto& gx = t.grad_buf(p);
      for (int c = 0; c < C; ++c) {
        const S gc = g[(size_t)c] / (S)HW;
        S* q = gx.data() + (size_t)c * HW;
        for (int i = 0; i < HW; ++i) q[i] += gc;
      }
    });
  }

  /// [C,H,W] -> [C,H,1], mean over width only.
  int mean_over_width(int x) {
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 3) throw std::invalid_argument("mean_over_width expects [C,H,W]");
    const int C = in.shape[0], H = in.shape[1], W = in.shape[2];
    Tensor<S> out = Tensor<S>::zeros({C, H, 1});
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y) {
        S acc = 0;
        const S* p = in.v.data() + (size_t)(c * H + y) * W;
        for (int i = 0; i < W; ++i) acc += p[i];
        out.v[(size_t)(c * H + y)] = acc / (S)W;
      }
    return simple_unary(std::move(out), x, [C, H, W](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      auto& gx = t.grad_buf(p);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y) {
          const S gv = g[(size_t)(c * H + y)] / (S)W;
          S* q = gx.data() + (size_t)(c * H + y) * W;
          for (int i = 0; i < W; ++i) q[i] += gv;
        }
    });
  }

  /// y = W x + b with x [N], W [M,N], b [M] (pass -1 for no bias).
  int fully_connected(int x, int w, int b) {
    const Tensor<S>& vx = value(x);
    const Tensor<S>& vw = value(w);
    if (vw.shape.size() != 2) throw std::invalid_argument("fully_connected weight must be [M,N]");
    const int M = vw.shape[0], N = vw.shape[1];
    if (vx.numel() != N)
      throw std::invalid_argument("fully_connected shape mismatch: weight " + shape_str(vw.shape) +
                                  " vs input " + shape_str(vx.shape));
    if (b >= 0 && value(b).numel() != M) throw std::invalid_argument("fully_connected bias must be [M]");
    Tensor<S> out = Tensor<S>::zeros({M});
    for (int m = 0; m < M; ++m) {
      S acc = b >= 0 ? value(b)[m] : S(0);
      const S* wr = vw.v.data() + (size_t)m * N;
      for (int n = 0; n < N; ++n) acc += wr[n] * vx[n];
      out[m] = acc;
    }
    bool rq = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
    int id = make_node(std::move(out), rq, nullptr);
    if (rq)
      nodes_[(size_t)id].back = [id, x, w, b, M, N](Tape& t) {
        const auto& g = t.nodes_[(size_t)id].grad;
        const auto& vx2 = t.value(x).v;
        const auto& vw2 = t.value(w).v;
        if (t.requires_grad(x)) {
          auto& gx = t.grad_buf(x);
          for (int m = 0; m < M; ++m) {
            const S gm = g[(size_t)m];
            const S* wr = vw2.data() + (size_t)m * N;
            for (int n = 0; n < N; ++n) gx[(size_t)n] += gm * wr[n];
          }
        }
        if (t.requires_grad(w)) {
          auto& gw = t.grad_buf(w);
          for (int m = 0; m < M; ++m) {
            const S gm = g[(size_t)m];
            S* gwr = gw.data() + (size_t)m * N;
            for (int n = 0; n < N; ++n) gwr[n] += gm * vx2[(size_t)n];
          }
        }
        if (b >= 0 && t.requires_grad(b)) {
          auto& gb = t.grad_buf(b);
          for (int m = 0; m < M; ++m) gb[(size_t)m] += g[(size_t)m];
        }
      };
    return id;
  }

  /// Per-channel instance normalization with affine parameters
  /// gamma [C], beta [C]. Deterministic at batch size 1 and inference.
  int instance_norm(int x, int gamma, int beta) {
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 3) throw std::invalid_argument("instance_norm expects [C,H,W]");
    const int C = in.shape[0];
    const int HW = in.shape[1] * in.shape[2];
    if (value(gamma).numel() != C || value(beta).numel() != C)
      throw std::invalid_argument("instance_norm affine params must be [C]");
    const S eps = S(1e-5);
    Tensor<S> out = Tensor<S>::zeros(in.shape);
    std::vector<S> inv_std(C), mean(C);
    for (int c = 0; c < C; ++c) {
      const S* p = in.v.data() + (size_t)c * HW;
      S mu = 0;
      for (int i = 0; i < HW; ++i) mu += p[i];
      mu /= (S)HW;
      S var = 0;
      for (int i = 0; i < HW; ++i) var += (p[i] - mu) * (p[i] - mu);
      var /= (S)HW;
      const S is = S(1) / std::sqrt(var + eps);
      mean[c] = mu;
      inv_std[c] = is;
      const S gm = value(gamma)[c], bt = value(beta)[c];
      S* q = out.v.data() + (size_t)c * HW;
      for (int i = 0; i < HW; ++i) q[i] = gm * (p[i] - mu) * is + bt;
    }
    bool rq = requires_grad(x) || requires_grad(gamma) || requires_grad(beta);
    int id = make_node(std::move(out), rq, nullptr);
    if (rq)
      nodes_[(size_t)id].back = [id, x, gamma, beta, C, HW, mean = std::move(mean),
                                 inv_std = std::move(inv_std)](Tape& t) {
        const auto& g = t.nodes_[(size_t)id].grad;
        const auto& vx = t.value(x).v;
        for (int c = 0; c < C; ++c) {
          const S* p = vx.data() + (size_t)c * HW;
          const S* gr = g.data() + (size_t)c * HW;
          const S mu = mean[(size_t)c], is = inv_std[(size_t)c];
          S sum_g = 0, sum_gx = 0;
          for (int i = 0; i < HW; ++i) {
            sum_g += gr[i];
            sum_gx += gr[i] * (p[i] - mu) * is;
          }
          if (t.requires_grad(gamma)) t.grad_buf(gamma)[(size_t)c] += sum_gx;
          if (t.requires_grad(beta)) t.grad_buf(beta)[(size_t)c] += sum_g;
          if (t.requires_grad(x)) {
            auto& gx = t.grad_buf(x);
            S* q = gx.data() + (size_t)c * HW;
            const S gm = t.value(gamma)[c];
            const S mg = sum_g / (S)HW, mgx = sum_gx / (S)HW;
            for (int i = 0; i < HW; ++i) {
              const S xhat = (p[i] - mu) * is;
              q[i] += gm * is * (gr[i] - mg - xhat * mgx);
            }
          }
        }
      };
    return id;
  }

  /// Row-wise softmax of [H,W] at the given temperature; max-subtracted.
  int row_softmax(int x, S temperature) {
    if (temperature <= S(0)) throw std::invalid_argument("row_softmax temperature must be > 0");
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 2) throw std::invalid_argument("row_softmax expects [H,W]");
    const int H = in.shape[0], W = in.shape[1];
    Tensor<S> out = Tensor<S>::zeros(in.shape);
    for (int y = 0; y < H; ++y) {
      const S* p = in.v.data() + (size_t)y * W;
      S* q = out.v.data() + (size_t)y * W;
      S m = p[0];
      for (int i = 1; i < W; ++i) m = std::max(m, p[i]);
      S z = 0;
      for (int i = 0; i < W; ++i) {
        q[i] = std::exp((p[i] - m) / temperature);
        z += q[i];
      }
      for (int i = 0; i < W; ++i) q[i] /= z;
    }
    int id = simple_unary(std::move(out), x, nullptr);
    if (requires_grad(x))
      nodes_[(size_t)id].back = [id, x, H, W, temperature](Tape& t) {
        const auto& g = t.nodes_[(size_t)id].grad;
        const auto& s = t.value(id).v;
        auto& gx = t.grad_buf(x);
        for (int y = 0; y < H; ++y) {
          const S* gr = g.data() + (size_t)y * W;
          const S* sr = s.data() + (size_t)y * W;
          S dot = 0;
          for (int i = 0; i < W; ++i) dot += gr[i] * sr[i];
          S* q = gx.data() + (size_t)y * W;
          for (int i = 0; i < W; ++i) q[i] += sr[i] * (gr[i] - dot) / temperature;
        }
      };
    return id;
  }

  /// [H,W] row distributions -> [H] expectations sum_x x*p(x|y).
  int row_expectation(int x) {
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 2) throw std::invalid_argument("row_expectation expects [H,W]");
    const int H = in.shape[0], W = in.shape[1];
    Tensor<S> out = Tensor<S>::zeros({H});
    for (int y = 0; y < H; ++y) {
      const S* p = in.v.data() + (size_t)y * W;
      S acc = 0;
      for (int i = 0; i < W; ++i) acc += (S)i * p[i];
      out[y] = acc;
    }
    return simple_unary(std::move(out), x, [H, W](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      auto& gx = t.grad_buf(p);
      for (int y = 0; y < H; ++y) {
        const S gy = g[(size_t)y];
        S* q = gx.data() + (size_t)y * W;
        for (int i = 0; i < W; ++i) q[i] += gy * (S)i;
      }
    });
  }

  /// Per-channel rescale: x [C,H,W] * gate [C].
  int scale_channels(int x, int gate) {
    const Tensor<S>& in = value(x);
    const Tensor<S>& gt = value(gate);
    if (in.shape.size() != 3 || gt.numel() != in.shape[0])
      throw std::invalid_argument("scale_channels expects [C,H,W] and gate [C]");
    const int C = in.shape[0];
    const int HW = in.shape[1] * in.shape[2];
    Tensor<S> out = in;
    for (int c = 0; c < C; ++c) {
      S* q = out.v.data() + (size_t)c * HW;
      const S gv = gt[c];
      for (int i = 0; i < HW; ++i) q[i] *= gv;
    }
    return unary_or_binary(std::move(out), x, gate, [C, HW](Tape& t, int self, int px, int pg) {
      const auto& g = t.nodes_[(size_t)self].grad;
      const auto& vx = t.value(px).v;
      const auto& vg = t.value(pg).v;
      if (t.requires_grad(px)) {
        auto& gx = t.grad_buf(px);
        for (int c = 0; c < C; ++c) {
          const S gv = vg[(size_t)c];
          S* q = gx.data() + (size_t)c * HW;
          const S* gr = g.data() + (size_t)c * HW;
          for (int i = 0; i < HW; ++i) q[i] += gr[i] * gv;
        }
      }
      if (t.requires_grad(pg)) {
        auto& gg = t.grad_buf(pg);
        for (int c = 0; c < C; ++c) {
          const S* gr = g.data() + (size_t)c * HW;
          const S* xr = vx.data() + (size_t)c * HW;
          S acc = 0;
          for (int i = 0; i < HW; ++i) acc += gr[i] * xr[i];
          gg[(size_t)c] += acc;
        }
      }
    });
  }

  /// Squeeze-and-excitation: gate = sigmoid(w2 * relu(w1 * gap(x))),
  /// output = x rescaled per channel. w1 [C/r, C], w2 [C, C/r].
  /// Composed from primitives so the backward pass needs no extra code.
  int se_recalibrate(int x, int w1, int w2) {
    const Tensor<S>& in = value(x);
    if (in.shape.size() != 3) throw std::invalid_argument("se_recalibrate expects [C,H,W]");
    const int C = in.shape[0];
    const auto& s1 = value(w1).shape;
    const auto& s2 = value(w2).shape;
    if (s1.size() != 2 || s2.size() != 2 || s1[1] != C || s2[0] != C || s1[0] != s2[1] || s1[0] < 1 || C % s1[0] != 0)
      throw std::invalid_argument("se_recalibrate weight shapes must be [C/r,C] and [C,C/r] with r | C; got " +
                                  shape_str(s1) + " and " + shape_str(s2));
    int squeezed = global_avg_pool(x);
    int hidden = relu(fully_connected(squeezed, w1, -1));
    int gate = sigmoid(fully_connected(hidden, w2, -1));
    return scale_channels(x, gate);
  }

  /// Keep the entries of a length-H vector where mask is nonzero,
  /// in row order. Backward scatters into the kept slots.
  int restrict_rows(int x, const std::vector<uint8_t>& mask) {
    const Tensor<S>& in = value(x);
    if ((size_t)in.numel() != mask.size()) throw std::invalid_argument("restrict_rows mask length mismatch");
    std::vector<int> idx;
    for (size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) idx.push_back((int)i);
    if (idx.empty()) throw std::invalid_argument("restrict_rows: mask selects no rows");
    Tensor<S> out = Tensor<S>::zeros({(int)idx.size()});
    for (size_t i = 0; i < idx.size(); ++i) out[(int)i] = in[(size_t)idx[i]];
    return simple_unary(std::move(out), x, [idx = std::move(idx)](Tape& t, int self, int p) {
      const auto& g = t.nodes_[(size_t)self].grad;
      auto& gx = t.grad_buf(p);
      for (size_t i = 0; i < idx.size(); ++i) gx[(size_t)idx[i]] += g[i];
    });
  }

  /// Connectivity regular loss: sum_i max(0, |x_i - x_{i-1}| - delta).
  /// Subgradient at |dx| = delta is 0.
  int crl(int x, S delta) {
    if (delta <= S(0)) throw std::invalid_argument("crl delta must be > 0");
    const Tensor<S>& in = value(x);
    const int n = in.numel();
    S acc = 0;
    for (int i = 1; i < n; ++i) {
      const S d = std::abs(in[i] - in[i - 1]) - delta;
      if (d > S(0)) acc += d;
    }
    return simple_unary(Tensor<S>::scalar(acc), x, [n, delta](Tape& t, int self, int p) {
      const S g = t.nodes_[(size_t)self].grad[0];
      const auto& vx = t.value(p).v;
      auto& gx = t.grad_buf(p);
      for (int i = 1; i < n; ++i) {
        const S d = vx[(size_t)i] - vx[(size_t)i - 1];
        if (std::abs(d) > delta) {
          const S s = d > S(0) ? g : -g;
          gx[(size_t)i] += s;
          gx[(size_t)i - 1] -= s;
        }
      }
    });
  }

  // ---------------------------------------------------------------------
  // losses (targets are constants)
  // ---------------------------------------------------------------------

  int binary_cross_entropy(int pred, const Tensor<S>& target) {
    return cross_entropy_impl(pred, target, S(1), "binary_cross_entropy");
  }

  int weighted_cross_entropy(int pred, const Tensor<S>& target, S pos_weight) {
    return cross_entropy_impl(pred, target, pos_weight, "weighted_cross_entropy");
  }

  int l1_loss(int pred, const Tensor<S>& target) {
    const Tensor<S>& p = value(pred);
    if (p.shape != target.shape) throw std::invalid_argument("l1_loss shape mismatch");
    const int n = p.numel();
    S acc = 0;
    for (int i = 0; i < n; ++i) acc += std::abs(p[i] - target[i]);
    acc /= (S)n;
    return simple_unary(Tensor<S>::scalar(acc), pred, [target, n](Tape& t, int self, int pp) {
      const S g = t.nodes_[(size_t)self].grad[0] / (S)n;
      const auto& vp = t.value(pp).v;
      auto& gp = t.grad_buf(pp);
      for (int i = 0; i < n; ++i) {
        const S d = vp[(size_t)i] - target[i];
        gp[(size_t)i] += d > S(0) ? g : (d < S(0) ? -g : S(0));
      }
    });
  }

  int l2_loss(int pred, const Tensor<S>& target) {
    const Tensor<S>& p = value(pred);
    if (p.shape != target.shape) throw std::invalid_argument("l2_loss shape mismatch");
    const int n = p.numel();
    S acc = 0;
    for (int i = 0; i < n; ++i) acc += (p[i] - target[i]) * (p[i] - target[i]);
    acc /= (S)n;
    return simple_unary(Tensor<S>::scalar(acc), pred, [target, n](Tape& t, int self, int pp) {
      const S g = t.nodes_[(size_t)self].grad[0] / (S)n;
      const auto& vp = t.value(pp).v;
      auto& gp = t.grad_buf(pp);
      for (int i = 0; i < n; ++i) gp[(size_t)i] += S(2) * (vp[(size_t)i] - target[i]) * g;
    });
  }

  static constexpr S logit_eps() {
    if constexpr (sizeof(S) == 4)
      return S(1e-6);
    else
      return S(1e-12);
  }

 private:
  std::vector<Node> nodes_;
  int backward_calls_ = 0;

  void check_same_shape(int a, int b, const char* op) const {
    if (value(a).shape != value(b).shape)
      throw std::invalid_argument(std::string(op) + " shape mismatch: " + shape_str(value(a).shape) +
                                  " vs " + shape_str(value(b).shape));
  }

  int simple_unary(Tensor<S> out, int parent, std::function<void(Tape&, int, int)> back) {
    bool rq = requires_grad(parent);
    int id = make_node(std::move(out), rq, nullptr);
    if (rq && back)
      nodes_[(size_t)id].back = [id, parent, back = std::move(back)](Tape& t) { back(t, id, parent); };
    return id;
  }

  int unary_or_binary(Tensor<S> out, int a, int b, std::function<void(Tape&, int, int, int)> back) {
    bool rq = requires_grad(a) || requires_grad(b);
    int id = make_node(std::move(out), rq, nullptr);
    if (rq && back)
      nodes_[(size_t)id].back = [id, a, b, back = std::move(back)](Tape& t) { back(t, id, a, b); };
    return id;
  }

  static std::vector<S> pad_image(const Tensor<S>& in, int pad) {
    const int C = in.shape[0], H = in.shape[1], W = in.shape[2];
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    std::vector<S> padded((size_t)C * Hp * Wp, S(0));
    for (int c = 0; c < C; ++c)
      for (int y = 0; y < H; ++y)
        std::copy_n(in.v.data() + (size_t)(c * H + y) * W, W,
                    padded.data() + (size_t)(c * Hp + y + pad) * Wp + pad);
    return padded;
  }

  void conv2d_backward(int self, int input, int kernel, int bias, int stride, int pad) {
    const Tensor<S>& in = value(input);
    const Tensor<S>& ker = value(kernel);
    const auto& g = nodes_[(size_t)self].grad;
    const int Cin = in.shape[0], H = in.shape[1], W = in.shape[2];
    const int Cout = ker.shape[0], k = ker.shape[2];
    const int Ho = nodes_[(size_t)self].value.shape[1], Wo = nodes_[(size_t)self].value.shape[2];
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;

    if (bias >= 0 && requires_grad(bias)) {
      auto& gb = grad_buf(bias);
      for (int co = 0; co < Cout; ++co) {
        const S* gr = g.data() + (size_t)co * Ho * Wo;
        S a0 = 0, a1 = 0, a2 = 0, a3 = 0;
        int i = 0;
        const int n = Ho * Wo;
        for (; i + 4 <= n; i += 4) {
          a0 += gr[i];
          a1 += gr[i + 1];
          a2 += gr[i + 2];
          a3 += gr[i + 3];
        }
        for (; i < n; ++i) a0 += gr[i];
        gb[(size_t)co] += a0 + a1 + a2 + a3;
      }
    }

    if (requires_grad(kernel)) {
      std::vector<S> padded = pad_image(in, pad);
      auto& gk = grad_buf(kernel);
      for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              S a0 = 0, a1 = 0, a2 = 0, a3 = 0;
              for (int y = 0; y < Ho; ++y) {
                const S* irow = padded.data() + (size_t)(ci * Hp + y * stride + dy) * Wp + dx;
                const S* grow = g.data() + (size_t)(co * Ho + y) * Wo;
                int x = 0;
                if (stride == 1) {
                  for (; x + 4 <= Wo; x += 4) {
                    a0 += grow[x] * irow[x];
                    a1 += grow[x + 1] * irow[x + 1];
                    a2 += grow[x + 2] * irow[x + 2];
                    a3 += grow[x + 3] * irow[x + 3];
                  }
                  for (; x < Wo; ++x) a0 += grow[x] * irow[x];
                } else {
                  for (; x < Wo; ++x) a0 += grow[x] * irow[x * stride];
                }
              }
              gk[(size_t)(((co * Cin + ci) * k + dy) * k + dx)] += a0 + a1 + a2 + a3;
            }
    }

    if (requires_grad(input)) {
      std::vector<S> gpad((size_t)Cin * Hp * Wp, S(0));
      for (int co = 0; co < Cout; ++co)
        for (int ci = 0; ci < Cin; ++ci)
          for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx) {
              const S w = ker.v[(size_t)(((co * Cin + ci) * k + dy) * k + dx)];
              if (w == S(0)) continue;
              for (int y = 0; y < Ho; ++y) {
                S* prow = gpad.data() + (size_t)(ci * Hp + y * stride + dy) * Wp + dx;
                const S* grow = g.data() + (size_t)(co * Ho + y) * Wo;
                if (stride == 1) {
                  for (int x = 0; x < Wo; ++x) prow[x] += w * grow[x];
                } else {
                  for (int x = 0; x < Wo; ++x) prow[x * stride] += w * grow[x];
                }
              }
            }
      auto& gi = grad_buf(input);
      for (int ci = 0; ci < Cin; ++ci)
        for (int y = 0; y < H; ++y) {
          const S* src = gpad.data() + (size_t)(ci * Hp + y + pad) * Wp + pad;
          S* dst = gi.data() + (size_t)(ci * H + y) * W;
          for (int x = 0; x < W; ++x) dst[x] += src[x];
        }
    }
  }

  int cross_entropy_impl(int pred, const Tensor<S>& target, S pos_weight, const char* name) {
    const Tensor<S>& p = value(pred);
    if (p.numel() != target.numel()) throw std::invalid_argument(std::string(name) + " shape mismatch");
    const S eps = logit_eps();
    const int n = p.numel();
    S acc = 0;
    for (int i = 0; i < n; ++i) {
      const S q = std::clamp(p[i], eps, S(1) - eps);
      acc -= pos_weight * target[i] * std::log(q) + (S(1) - target[i]) * std::log(S(1) - q);
    }
    acc /= (S)n;
    return simple_unary(Tensor<S>::scalar(acc), pred, [target, pos_weight, eps, n](Tape& t, int self, int pp) {
      const S g = t.nodes_[(size_t)self].grad[0] / (S)n;
      const auto& vp = t.value(pp).v;
      auto& gp = t.grad_buf(pp);
      for (int i = 0; i < n; ++i) {
        const S q = vp[(size_t)i];
        if (q <= eps || q >= S(1) - eps) continue;  // clamped region
        gp[(size_t)i] += g * (-pos_weight * target[i] / q + (S(1) - target[i]) / (S(1) - q));
      }
    });
  }
};

}  // namespace midline::ad
