#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "ssmd/tensor.hpp"

namespace ssmd {

/// Handle into a Tape. Default-constructed handles are invalid.
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape over Tensor nodes. Values are computed eagerly as ops
/// are recorded; backward() replays the records in reverse.
///
/// Gradients only flow into nodes created with requires_grad (leaves) or
/// nodes reachable from them, so constants cost nothing during backward.
class Tape {
 public:
  struct Node {
    Tensor val;
    Tensor grad;  // allocated on demand during backward
    bool needs_grad = false;
    bool grad_ready = false;
    std::function<void(Tape&)> backward;  // null for leaves
  };

  Var leaf(Tensor v, bool requires_grad = false) {
    Node n;
    n.val = std::move(v);
    n.needs_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  const Tensor& val(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].val; }
  double scalar(Var v) const {
    const Tensor& t = val(v);
    if (t.size() != 1) throw std::invalid_argument("scalar(): variable is not scalar");
    return t.data[0];
  }
  bool needs_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  /// Gradient of the last backward() root w.r.t. v. Zero tensor if no
  /// gradient reached v.
  const Tensor& grad(Var v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.grad_ready) {
      n.grad = Tensor(n.val.c, n.val.h, n.val.w);
      n.grad_ready = true;
    }
    return n.grad;
  }

  void backward(Var root) {
    Node& r = nodes_[static_cast<std::size_t>(root.id)];
    if (r.val.size() != 1) throw std::invalid_argument("backward(): root must be scalar");
    for (auto& n : nodes_) {
      n.grad_ready = false;
    }
    accum_init(root.id);
    nodes_[static_cast<std::size_t>(root.id)].grad.data[0] = 1.0;
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.needs_grad && n.grad_ready) n.backward(*this);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    require_same_shape(x, y, "add");
    Tensor out = x;
    out.data += y.data;
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      t.accum(a, g.data);
      t.accum(b, g.data);
    });
  }

  Var sub(Var a, Var b) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    require_same_shape(x, y, "sub");
    Tensor out = x;
    out.data -= y.data;
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      t.accum(a, g.data);
      t.accum(b, -g.data);
    });
  }

  Var mul(Var a, Var b) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    require_same_shape(x, y, "mul");
    Tensor out = x;
    out.data *= y.data;
    return record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
      t.accum(a, g.data * t.val(b).data);
      t.accum(b, g.data * t.val(a).data);
    });
  }

  /// a*x + b with scalar coefficients.
  Var affine(Var v, double a, double b) {
    Tensor out = val(v);
    out.data = a * out.data + b;
    return record(std::move(out), {v}, [v, a](Tape& t, const Tensor& g) {
      t.accum(v, a * g.data);
    });
  }

  Var relu(Var v) {
    Tensor out = val(v);
    out.data = out.data.max(0.0);
    return record(std::move(out), {v}, [v](Tape& t, const Tensor& g) {
      t.accum(v, (t.val(v).data > 0.0).select(g.data, 0.0));
    });
  }

  Var sigmoid(Var v) {
    Tensor out = val(v);
    out.data = 1.0 / (1.0 + (-out.data).exp());
    Var r = record(std::move(out), {v}, nullptr);
    set_backward(r, [v, r](Tape& t, const Tensor& g) {
      const Array& s = t.val(r).data;
      t.accum(v, g.data * s * (1.0 - s));
    });
    return r;
  }

  Var square(Var v) {
    Tensor out = val(v);
    out.data = out.data.square();
    return record(std::move(out), {v}, [v](Tape& t, const Tensor& g) {
      t.accum(v, 2.0 * g.data * t.val(v).data);
    });
  }

  Var pow_const(Var v, double p) {
    Tensor out = val(v);
    out.data = out.data.pow(p);
    return record(std::move(out), {v}, [v, p](Tape& t, const Tensor& g) {
      t.accum(v, p * g.data * t.val(v).data.pow(p - 1.0));
    });
  }

  /// log(max(x, lo)); gradient is zero where the clamp is active.
  Var log_clamped(Var v, double lo) {
    Tensor out = val(v);
    out.data = out.data.max(lo).log();
    return record(std::move(out), {v, Var{}}, [v, lo](Tape& t, const Tensor& g) {
      const Array& x = t.val(v).data;
      t.accum(v, (x > lo).select(g.data / x.max(lo), 0.0));
    });
  }

  /// SmoothL1 applied elementwise: 0.5 d^2 for |d|<1, |d|-0.5 otherwise.
  Var smooth_l1(Var v) {
    Tensor out = val(v);
    out.data = (out.data.abs() < 1.0)
                   .select(0.5 * out.data.square(), out.data.abs() - 0.5);
    return record(std::move(out), {v}, [v](Tape& t, const Tensor& g) {
      t.accum(v, g.data * t.val(v).data.max(-1.0).min(1.0));
    });
  }

  // ---- shape / reduction ----

  Var sum(Var v) {
    Tensor out = Tensor::scalar(val(v).data.sum());
    return record(std::move(out), {v}, [v](Tape& t, const Tensor& g) {
      t.accum_const(v, g.data[0]);
    });
  }

  /// Per-channel broadcast product: x (C,H,W) times gate (C,1,1).
  Var mul_channel(Var x, Var gate) {
    const Tensor& xv = val(x);
    const Tensor& gv = val(gate);
    if (gv.c != xv.c || gv.h != 1 || gv.w != 1)
      throw std::invalid_argument("mul_channel: gate must be (C,1,1)");
    Tensor out = xv;
    const Eigen::Index plane = static_cast<Eigen::Index>(xv.h) * xv.w;
    for (int c = 0; c < xv.c; ++c)
      out.data.segment(c * plane, plane) *= gv.data[c];
    return record(std::move(out), {x, gate}, [x, gate, plane](Tape& t, const Tensor& g) {
      const Tensor& xv2 = t.val(x);
      const Tensor& gv2 = t.val(gate);
      if (t.needs_grad(x)) {
        Array dx(g.data.size());
        for (int c = 0; c < xv2.c; ++c)
          dx.segment(c * plane, plane) = g.data.segment(c * plane, plane) * gv2.data[c];
        t.accum(x, dx);
      }
      if (t.needs_grad(gate)) {
        Array dg(gv2.c);
        for (int c = 0; c < xv2.c; ++c)
          dg[c] = (g.data.segment(c * plane, plane) * xv2.data.segment(c * plane, plane)).sum();
        t.accum(gate, dg);
      }
    });
  }

  /// 2x2 average pooling, stride 2. Requires even spatial dims.
  Var avg_pool2(Var v) {
    const Tensor& x = val(v);
    if (x.h % 2 != 0 || x.w % 2 != 0)
      throw std::invalid_argument("avg_pool2: spatial dims must be even");
    Tensor out(x.c, x.h / 2, x.w / 2);
    for (int c = 0; c < x.c; ++c)
      for (int y = 0; y < out.h; ++y)
        for (int xx = 0; xx < out.w; ++xx)
          out.at(c, y, xx) = 0.25 * (x.at(c, 2 * y, 2 * xx) + x.at(c, 2 * y, 2 * xx + 1) +
                                     x.at(c, 2 * y + 1, 2 * xx) + x.at(c, 2 * y + 1, 2 * xx + 1));
    return record(std::move(out), {v}, [v](Tape& t, const Tensor& g) {
      const Tensor& xv = t.val(v);
      Tensor dx(xv.c, xv.h, xv.w);
      for (int c = 0; c < xv.c; ++c)
        for (int y = 0; y < g.h; ++y)
          for (int xx = 0; xx < g.w; ++xx) {
            const double gv = 0.25 * g.at(c, y, xx);
            dx.at(c, 2 * y, 2 * xx) += gv;
            dx.at(c, 2 * y, 2 * xx + 1) += gv;
            dx.at(c, 2 * y + 1, 2 * xx) += gv;
            dx.at(c, 2 * y + 1, 2 * xx + 1) += gv;
          }
      t.accum(v, dx.data);
    });
  }

  Var global_avg_pool(Var v) {
    const Tensor& x = val(v);
    Tensor out(x.c, 1, 1);
    const Eigen::Index plane = static_cast<Eigen::Index>(x.h) * x.w;
    for (int c = 0; c < x.c; ++c)
      out.data[c] = x.data.segment(c * plane, plane).mean();
    return record(std::move(out), {v}, [v, plane](Tape& t, const Tensor& g) {
      const Tensor& xv = t.val(v);
      Array dx(xv.data.size());
      for (int c = 0; c < xv.c; ++c)
        dx.segment(c * plane, plane).setConstant(g.data[c] / static_cast<double>(plane));
      t.accum(v, dx);
    });
  }

  /// Nearest-neighbour 2x upsampling.
  Var upsample2(Var v) {
    const Tensor& x = val(v);
    Tensor out(x.c, x.h * 2, x.w * 2);
    for (int c = 0; c < x.c; ++c)
      for (int y = 0; y < out.h; ++y)
        for (int xx = 0; xx < out.w; ++xx)
          out.at(c, y, xx) = x.at(c, y / 2, xx / 2);
    return record(std::move(out), {v}, [v](Tape& t, const Tensor& g) {
      const Tensor& xv = t.val(v);
      Tensor dx(xv.c, xv.h, xv.w);
      for (int c = 0; c < xv.c; ++c)
        for (int y = 0; y < g.h; ++y)
          for (int xx = 0; xx < g.w; ++xx)
            dx.at(c, y / 2, xx / 2) += g.at(c, y, xx);
      t.accum(v, dx.data);
    });
  }

  /// Softmax over consecutive channel groups of size `group` at every
  /// spatial position.
  Var softmax_groups(Var v, int group) {
    const Tensor& x = val(v);
    if (x.c % group != 0) throw std::invalid_argument("softmax_groups: C % group != 0");
    Tensor out = x;
    const int ngroups = x.c / group;
    for (int gi = 0; gi < ngroups; ++gi)
      for (int y = 0; y < x.h; ++y)
        for (int xx = 0; xx < x.w; ++xx) {
          double m = -1e300;
          for (int k = 0; k < group; ++k) m = std::max(m, x.at(gi * group + k, y, xx));
          double z = 0.0;
          for (int k = 0; k < group; ++k) {
            double e = std::exp(x.at(gi * group + k, y, xx) - m);
            out.at(gi * group + k, y, xx) = e;
            z += e;
          }
          for (int k = 0; k < group; ++k) out.at(gi * group + k, y, xx) /= z;
        }
    Var r = record(std::move(out), {v}, nullptr);
    set_backward(r, [v, r, group](Tape& t, const Tensor& g) {
      const Tensor& p = t.val(r);
      Tensor dx(p.c, p.h, p.w);
      const int ng = p.c / group;
      for (int gi = 0; gi < ng; ++gi)
        for (int y = 0; y < p.h; ++y)
          for (int xx = 0; xx < p.w; ++xx) {
            double dot = 0.0;
            for (int k = 0; k < group; ++k)
              dot += g.at(gi * group + k, y, xx) * p.at(gi * group + k, y, xx);
            for (int k = 0; k < group; ++k)
              dx.at(gi * group + k, y, xx) =
                  p.at(gi * group + k, y, xx) * (g.at(gi * group + k, y, xx) - dot);
          }
      t.accum(v, dx.data);
    });
    return r;
  }

  /// Sum consecutive channel groups: (G*g, H, W) -> (G, H, W).
  Var group_sum(Var v, int group) {
    const Tensor& x = val(v);
    if (x.c % group != 0) throw std::invalid_argument("group_sum: C % group != 0");
    Tensor out(x.c / group, x.h, x.w);
    const Eigen::Index plane = static_cast<Eigen::Index>(x.h) * x.w;
    for (int gi = 0; gi < out.c; ++gi)
      for (int k = 0; k < group; ++k)
        out.data.segment(gi * plane, plane) +=
            x.data.segment((gi * group + k) * plane, plane);
    return record(std::move(out), {v}, [v, group, plane](Tape& t, const Tensor& g) {
      const Tensor& xv = t.val(v);
      Array dx(xv.data.size());
      for (int gi = 0; gi < g.c; ++gi)
        for (int k = 0; k < group; ++k)
          dx.segment((gi * group + k) * plane, plane) = g.data.segment(gi * plane, plane);
      t.accum(v, dx);
    });
  }

  /// Pick channels {offset, offset+stride, ...}: (C,H,W) -> (C/stride, H, W).
  Var select_channels(Var v, int stride, int offset) {
    const Tensor& x = val(v);
    if (x.c % stride != 0) throw std::invalid_argument("select_channels: C % stride != 0");
    Tensor out(x.c / stride, x.h, x.w);
    const Eigen::Index plane = static_cast<Eigen::Index>(x.h) * x.w;
    for (int gi = 0; gi < out.c; ++gi)
      out.data.segment(gi * plane, plane) =
          x.data.segment((gi * stride + offset) * plane, plane);
    return record(std::move(out), {v, Var{}}, [v, stride, offset, plane](Tape& t, const Tensor& g) {
      const Tensor& xv = t.val(v);
      Array dx = Array::Zero(xv.data.size());
      for (int gi = 0; gi < g.c; ++gi)
        dx.segment((gi * stride + offset) * plane, plane) = g.data.segment(gi * plane, plane);
      t.accum(v, dx);
    });
  }

  /// Spatial mirror for a prediction grid whose channels come in per-anchor
  /// blocks of size comp_group. Optionally negates one component within each
  /// block per mirrored axis (the x-offset under a horizontal flip, the
  /// y-offset under a vertical one). Self-inverse, including the signs.
  Var mirror_grid(Var v, int comp_group, int neg_comp_h, int neg_comp_v,
                  bool horizontal, bool vertical) {
    Tensor out = mirror_tensor(val(v), comp_group, neg_comp_h, neg_comp_v, horizontal, vertical);
    return record(std::move(out), {v},
                  [v, comp_group, neg_comp_h, neg_comp_v, horizontal, vertical](
                      Tape& t, const Tensor& g) {
                    t.accum(v, mirror_tensor(g, comp_group, neg_comp_h, neg_comp_v,
                                             horizontal, vertical)
                                   .data);
                  });
  }

  static Tensor mirror_tensor(const Tensor& x, int comp_group, int neg_comp_h,
                              int neg_comp_v, bool horizontal, bool vertical) {
    if (comp_group <= 0 || x.c % comp_group != 0)
      throw std::invalid_argument("mirror_grid: C % comp_group != 0");
    Tensor out(x.c, x.h, x.w);
    for (int c = 0; c < x.c; ++c) {
      const int comp = c % comp_group;
      double sign = 1.0;
      if (horizontal && comp == neg_comp_h) sign = -sign;
      if (vertical && comp == neg_comp_v) sign = -sign;
      for (int y = 0; y < x.h; ++y) {
        const int sy = vertical ? x.h - 1 - y : y;
        for (int xx = 0; xx < x.w; ++xx) {
          const int sx = horizontal ? x.w - 1 - xx : xx;
          out.at(c, y, xx) = sign * x.at(c, sy, sx);
        }
      }
    }
    return out;
  }

  /// Gather flat elements into an (N,1,1) vector.
  Var gather(Var v, std::vector<Eigen::Index> idx) {
    const Tensor& x = val(v);
    Tensor out(static_cast<int>(idx.size()), 1, 1);
    for (std::size_t i = 0; i < idx.size(); ++i) out.data[static_cast<Eigen::Index>(i)] = x.data[idx[i]];
    auto shared = std::make_shared<std::vector<Eigen::Index>>(std::move(idx));
    return record(std::move(out), {v}, [v, shared](Tape& t, const Tensor& g) {
      const Tensor& xv = t.val(v);
      Array dx = Array::Zero(xv.data.size());
      for (std::size_t i = 0; i < shared->size(); ++i)
        dx[(*shared)[i]] += g.data[static_cast<Eigen::Index>(i)];
      t.accum(v, dx);
    });
  }

  /// 2-D convolution, stride 1, square kernel of side `k`, zero padding
  /// `pad`. Weights are (Cout, Cin*k*k, 1), bias (Cout,1,1).
  Var conv2d(Var x, Var w, Var b, int k, int pad) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const Tensor& bv = val(b);
    const int cin = xv.c;
    const int cout = wv.c;
    if (wv.h != cin * k * k || wv.w != 1)
      throw std::invalid_argument("conv2d: weight shape mismatch");
    if (bv.c != cout || bv.h != 1 || bv.w != 1)
      throw std::invalid_argument("conv2d: bias shape mismatch");
    const int oh = xv.h + 2 * pad - k + 1;
    const int ow = xv.w + 2 * pad - k + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: output would be empty");

    const Eigen::Index K = static_cast<Eigen::Index>(cin) * k * k;
    const Eigen::Index N = static_cast<Eigen::Index>(oh) * ow;
    auto col = std::make_shared<Eigen::MatrixXd>(K, N);
    im2col(xv, k, pad, oh, ow, *col);

    Tensor out(cout, oh, ow);
    using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<const RowMat> wm(wv.data.data(), cout, K);
    Eigen::Map<RowMat> om(out.data.data(), cout, N);
    om.noalias() = wm * (*col);
    for (int c = 0; c < cout; ++c) om.row(c).array() += bv.data[c];

    return record(std::move(out), {x, w, b},
                  [x, w, b, k, pad, col, K, N, cout](Tape& t, const Tensor& g) {
                    const Tensor& xv2 = t.val(x);
                    const Tensor& wv2 = t.val(w);
                    Eigen::Map<const RowMat> gm(g.data.data(), cout, N);
                    if (t.needs_grad(w)) {
                      Array dw(wv2.data.size());
                      Eigen::Map<RowMat> dwm(dw.data(), cout, K);
                      dwm.noalias() = gm * col->transpose();
                      t.accum(w, dw);
                    }
                    if (t.needs_grad(b)) {
                      Array db(cout);
                      for (int c = 0; c < cout; ++c) db[c] = gm.row(c).sum();
                      t.accum(b, db);
                    }
                    if (t.needs_grad(x)) {
                      Eigen::Map<const RowMat> wm2(wv2.data.data(), cout, K);
                      Eigen::MatrixXd dcol = wm2.transpose() * gm;
                      Tensor dx(xv2.c, xv2.h, xv2.w);
                      col2im(dcol, k, pad, g.h, g.w, dx);
                      t.accum(x, dx.data);
                    }
                  });
  }

 private:
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  static void im2col(const Tensor& x, int k, int pad, int oh, int ow, Eigen::MatrixXd& col) {
    col.setZero();
    for (int ci = 0; ci < x.c; ++ci)
      for (int dy = 0; dy < k; ++dy)
        for (int dx = 0; dx < k; ++dx) {
          const Eigen::Index row = (static_cast<Eigen::Index>(ci) * k + dy) * k + dx;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy + dy - pad;
            if (iy < 0 || iy >= x.h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox + dx - pad;
              if (ix < 0 || ix >= x.w) continue;
              col(row, static_cast<Eigen::Index>(oy) * ow + ox) = x.at(ci, iy, ix);
            }
          }
        }
  }

  static void col2im(const Eigen::MatrixXd& dcol, int k, int pad, int oh, int ow, Tensor& dx) {
    for (int ci = 0; ci < dx.c; ++ci)
      for (int dy = 0; dy < k; ++dy)
        for (int dxk = 0; dxk < k; ++dxk) {
          const Eigen::Index row = (static_cast<Eigen::Index>(ci) * k + dy) * k + dxk;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy + dy - pad;
            if (iy < 0 || iy >= dx.h) continue;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix = ox + dxk - pad;
              if (ix < 0 || ix >= dx.w) continue;
              dx.at(ci, iy, ix) += dcol(row, static_cast<Eigen::Index>(oy) * ow + ox);
            }
          }
        }
  }

  // Records a node whose backward receives the node's accumulated gradient.
  Var record(Tensor out, std::initializer_list<Var> parents,
             std::function<void(Tape&, const Tensor&)> back) {
    Node n;
    n.val = std::move(out);
    for (Var p : parents)
      if (p.valid() && nodes_[static_cast<std::size_t>(p.id)].needs_grad) n.needs_grad = true;
    nodes_.push_back(std::move(n));
    Var v{static_cast<int>(nodes_.size()) - 1};
    if (back) set_backward(v, std::move(back));
    return v;
  }

  void set_backward(Var v, std::function<void(Tape&, const Tensor&)> back) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.needs_grad) return;  // constant subgraph: no backward needed
    n.backward = [v, back = std::move(back)](Tape& t) {
      back(t, t.nodes_[static_cast<std::size_t>(v.id)].grad);
    };
  }

  void accum_init(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.grad_ready) {
      n.grad = Tensor(n.val.c, n.val.h, n.val.w);
      n.grad_ready = true;
    }
  }

  void accum(Var v, const Array& delta) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.needs_grad) return;
    accum_init(v.id);
    n.grad.data += delta;
  }

  void accum_const(Var v, double delta) {
    Node& n = nodes_[static_cast<std::size_t>(v.id)];
    if (!n.needs_grad) return;
    accum_init(v.id);
    n.grad.data += delta;
  }

  std::vector<Node> nodes_;
};

}  // namespace ssmd
