#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every intermediate value; a Var is an index into it. Ops are
// free functions that push a node and a closure propagating the node's
// gradient to its inputs. Param leaves copy their value in and add the
// accumulated gradient back into Param::grad when the sweep reaches them.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace i3d::ag {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
struct Param {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  Var<S> constant(Mat<S> v) { return push(std::move(v), false, nullptr); }

  Var<S> param(Param<S>& p) {
    Param<S>* pp = &p;
    return push(p.value, true, [pp](Tape& t, int self) {
      if (pp->grad.size() == 0) pp->zero_grad();
      pp->grad += t.grad(self);
    });
  }

  Var<S> push(Mat<S> v, bool requires_grad, Backward bw) {
    nodes_.push_back(Node{std::move(v), Mat<S>(), requires_grad, requires_grad ? std::move(bw) : Backward()});
    return Var<S>{this, static_cast<int>(nodes_.size()) - 1};
  }

  const Mat<S>& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Mat<S>& grad(int id) const { return nodes_[static_cast<size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }
  bool requires_grad(const Var<S>& v) const { return requires_grad(v.id); }

  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0)
      n.grad = g;
    else
      n.grad += g;
  }

  /// Adds an external gradient (e.g. d loss / d output) to v.
  template <typename Derived>
  void seed(const Var<S>& v, const Eigen::MatrixBase<Derived>& g) {
    if (g.rows() != v.rows() || g.cols() != v.cols()) throw std::invalid_argument("seed: gradient shape mismatch");
    accumulate(v.id, g);
  }

  void backward() {
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      auto& n = nodes_[static_cast<size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool requires_grad;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <typename S>
bool any_grad(const Var<S>& a) {
  return a.tape->requires_grad(a);
}
template <typename S, typename... Rest>
bool any_grad(const Var<S>& a, const Rest&... rest) {
  return a.tape->requires_grad(a) || any_grad(rest...);
}

template <typename S>
void check_same_tape(const Var<S>& a, const Var<S>& b) {
  if (a.tape != b.tape) throw std::invalid_argument("autograd: vars from different tapes");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra.

template <typename S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() * b.value(), detail::any_grad(a, b), [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

/// a * b^T
template <typename S>
Var<S> matmul_nt(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() * b.value().transpose(), detail::any_grad(a, b), [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

/// x * w + b with b a row vector broadcast over rows.
template <typename S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& b) {
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols())
    throw std::invalid_argument("linear: shape mismatch");
  const int ix = x.id, iw = w.id, ib = b.id;
  Mat<S> out = x.value() * w.value();
  out.rowwise() += b.value().row(0);
  return x.tape->push(std::move(out), detail::any_grad(x, w, b), [ix, iw, ib](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ix)) t.accumulate(ix, g * t.value(iw).transpose());
    if (t.requires_grad(iw)) t.accumulate(iw, t.value(ix).transpose() * g);
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
  });
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::check_same_tape(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("add: shape mismatch");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), detail::any_grad(a, b), [ia, ib](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
    t.accumulate(ib, t.grad(self));
  });
}

/// a + row, the 1 x n row broadcast over a's rows.
template <typename S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
  const int ia = a.id, ir = row.id;
  Mat<S> out = a.value();
  out.rowwise() += row.value().row(0);
  return a.tape->push(std::move(out), detail::any_grad(a, row), [ia, ir](Tape<S>& t, int self) {
    t.accumulate(ia, t.grad(self));
    if (t.requires_grad(ir)) t.accumulate(ir, t.grad(self).colwise().sum());
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S s) {
  const int ia = a.id;
  return a.tape->push(a.value() * s, detail::any_grad(a),
                      [ia, s](Tape<S>& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

// ---------------------------------------------------------------------------
// Shape ops.

template <typename S>
Var<S> slice_rows(const Var<S>& a, Eigen::Index start, Eigen::Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw std::out_of_range("slice_rows");
  const int ia = a.id;
  const Eigen::Index rows = a.rows(), cols = a.cols();
  return a.tape->push(a.value().middleRows(start, n), detail::any_grad(a),
                      [ia, start, n, rows, cols](Tape<S>& t, int self) {
                        Mat<S> g = Mat<S>::Zero(rows, cols);
                        g.middleRows(start, n) = t.grad(self);
                        t.accumulate(ia, g);
                      });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  bool req = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    req = req || p.tape->requires_grad(p);
  }
  Mat<S> out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> spans;
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    spans.emplace_back(p.id, p.rows());
    r += p.rows();
  }
  return parts.front().tape->push(std::move(out), req, [spans](Tape<S>& t, int self) {
    Eigen::Index r0 = 0;
    for (const auto& [id, n] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, t.grad(self).middleRows(r0, n));
      r0 += n;
    }
  });
}

/// (gh*gw) x (c*r*r) token grid -> (gh*r*gw*r) x c pixel grid. Channel
/// c*r*r + i*r + j of token (y, x) lands on pixel (y*r + i, x*r + j).
template <typename S>
Var<S> pixel_shuffle(const Var<S>& a, int gh, int gw, int r) {
  if (a.rows() != static_cast<Eigen::Index>(gh) * gw || a.cols() % (r * r) != 0)
    throw std::invalid_argument("pixel_shuffle: shape mismatch");
  const int c = static_cast<int>(a.cols()) / (r * r);
  const int ow = gw * r;
  const auto& in = a.value();
  Mat<S> out(static_cast<Eigen::Index>(gh) * r * ow, c);
  for (int y = 0; y < gh; ++y)
    for (int x = 0; x < gw; ++x)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const Eigen::Index pix = static_cast<Eigen::Index>(y * r + i) * ow + (x * r + j);
          for (int ch = 0; ch < c; ++ch) out(pix, ch) = in(y * gw + x, ch * r * r + i * r + j);
        }
  const int ia = a.id;
  return a.tape->push(std::move(out), detail::any_grad(a), [ia, gh, gw, r, c, ow](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    Mat<S> gi(static_cast<Eigen::Index>(gh) * gw, static_cast<Eigen::Index>(c) * r * r);
    for (int y = 0; y < gh; ++y)
      for (int x = 0; x < gw; ++x)
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < r; ++j) {
            const Eigen::Index pix = static_cast<Eigen::Index>(y * r + i) * ow + (x * r + j);
            for (int ch = 0; ch < c; ++ch) gi(y * gw + x, ch * r * r + i * r + j) = g(pix, ch);
          }
    t.accumulate(ia, gi);
  });
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.

template <typename S>
Var<S> relu(const Var<S>& a) {
  const int ia = a.id;
  return a.tape->push(a.value().cwiseMax(S(0)), detail::any_grad(a), [ia](Tape<S>& t, int self) {
    t.accumulate(ia, (t.value(ia).array() > S(0)).select(t.grad(self).array(), S(0)).matrix());
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  const int ia = a.id;
  Mat<S> y = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  return a.tape->push(std::move(y), detail::any_grad(a), [ia](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    t.accumulate(ia, (t.grad(self).array() * y.array() * (S(1) - y.array())).matrix());
  });
}

template <typename S>
Var<S> tanh(const Var<S>& a) {
  const int ia = a.id;
  return a.tape->push(a.value().array().tanh().matrix(), detail::any_grad(a), [ia](Tape<S>& t, int self) {
    const auto& y = t.value(self);
    t.accumulate(ia, (t.grad(self).array() * (S(1) - y.array().square())).matrix());
  });
}

/// tanh approximation of GELU.
template <typename S>
Var<S> gelu(const Var<S>& a) {
  const S k = S(0.7978845608028654);
  const S c = S(0.044715);
  const int ia = a.id;
  const auto x = a.value().array();
  Mat<S> y = (S(0.5) * x * (S(1) + (k * (x + c * x.cube())).tanh())).matrix();
  return a.tape->push(std::move(y), detail::any_grad(a), [ia, k, c](Tape<S>& t, int self) {
    const auto x = t.value(ia).array();
    const auto th = (k * (x + c * x.cube())).tanh();
    const auto d = S(0.5) * (S(1) + th) + S(0.5) * x * (S(1) - th.square()) * k * (S(1) + S(3) * c * x.square());
    t.accumulate(ia, (t.grad(self).array() * d).matrix());
  });
}

// ---------------------------------------------------------------------------
// Normalization and attention.

/// Row-wise layer norm with affine gamma / beta (1 x n each).
template <typename S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
  const Eigen::Index n = x.cols();
  if (gamma.cols() != n || beta.cols() != n) throw std::invalid_argument("layer_norm: shape mismatch");
  const auto& xv = x.value();
  auto xhat = std::make_shared<Mat<S>>(xv.rows(), n);
  auto rstd = std::make_shared<Eigen::Matrix<S, Eigen::Dynamic, 1>>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const S mu = xv.row(r).mean();
    const S var = (xv.row(r).array() - mu).square().mean();
    (*rstd)(r) = S(1) / std::sqrt(var + eps);
    xhat->row(r) = (xv.row(r).array() - mu) * (*rstd)(r);
  }
  Mat<S> y = xhat->array().rowwise() * gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  const int ix = x.id, ig = gamma.id, ib = beta.id;
  return x.tape->push(std::move(y), detail::any_grad(x, gamma, beta), [ix, ig, ib, xhat, rstd, n](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ig)) t.accumulate(ig, (g.array() * xhat->array()).colwise().sum().matrix());
    if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
    if (t.requires_grad(ix)) {
      Mat<S> gx(g.rows(), n);
      const auto gam = t.value(ig).row(0).array();
      for (Eigen::Index r = 0; r < g.rows(); ++r) {
        const Eigen::Array<S, 1, Eigen::Dynamic> gh = g.row(r).array() * gam;
        const S m1 = gh.mean();
        const S m2 = (gh * xhat->row(r).array()).mean();
        gx.row(r) = ((gh - m1 - xhat->row(r).array() * m2) * (*rstd)(r)).matrix();
      }
      t.accumulate(ix, gx);
    }
  });
}

/// Multi-head scaled dot-product attention on already projected inputs.
/// q: nq x d, k: nk x d, v: nk x d; heads split the columns evenly.
/// Each output row depends only on its own query row.
template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads) {
  const Eigen::Index d = q.cols();
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows() || heads <= 0 || d % heads != 0)
    throw std::invalid_argument("attention: shape mismatch");
  const Eigen::Index dh = d / heads;
  const S inv = S(1) / std::sqrt(static_cast<S>(dh));
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  auto probs = std::make_shared<std::vector<Mat<S>>>(static_cast<size_t>(heads));
  Mat<S> out(qv.rows(), d);
  for (int h = 0; h < heads; ++h) {
    Mat<S> s = (qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose()) * inv;
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const S mx = s.row(r).maxCoeff();
      s.row(r) = (s.row(r).array() - mx).exp().matrix();
      s.row(r) /= s.row(r).sum();
    }
    out.middleCols(h * dh, dh) = s * vv.middleCols(h * dh, dh);
    (*probs)[static_cast<size_t>(h)] = std::move(s);
  }
  const int iq = q.id, ik = k.id, iv = v.id;
  return q.tape->push(std::move(out), detail::any_grad(q, k, v), [iq, ik, iv, heads, dh, inv, probs](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    const auto& qv = t.value(iq);
    const auto& kv = t.value(ik);
    const auto& vv = t.value(iv);
    Mat<S> gq = Mat<S>::Zero(qv.rows(), qv.cols());
    Mat<S> gk = Mat<S>::Zero(kv.rows(), kv.cols());
    Mat<S> gv = Mat<S>::Zero(vv.rows(), vv.cols());
    for (int h = 0; h < heads; ++h) {
      const auto& p = (*probs)[static_cast<size_t>(h)];
      const auto go = g.middleCols(h * dh, dh);
      gv.middleCols(h * dh, dh) = p.transpose() * go;
      const Mat<S> gp = go * vv.middleCols(h * dh, dh).transpose();
      Mat<S> gs = (p.array() * (gp.array().colwise() - (gp.array() * p.array()).rowwise().sum())).matrix();
      gs *= inv;
      gq.middleCols(h * dh, dh) = gs * kv.middleCols(h * dh, dh);
      gk.middleCols(h * dh, dh) = gs.transpose() * qv.middleCols(h * dh, dh);
    }
    t.accumulate(iq, gq);
    t.accumulate(ik, gk);
    t.accumulate(iv, gv);
  });
}

/// 1 x 3 raw -> (tanh pair scaled to unit length, r unchanged).
template <typename S>
Var<S> axis_activation(const Var<S>& a) {
  if (a.rows() != 1 || a.cols() != 3) throw std::invalid_argument("axis_activation: expects 1 x 3");
  const auto& x = a.value();
  const S t0 = std::tanh(x(0, 0)), t1 = std::tanh(x(0, 1));
  const S n = std::max(std::sqrt(t0 * t0 + t1 * t1), S(1e-6));
  Mat<S> y(1, 3);
  y << t0 / n, t1 / n, x(0, 2);
  const int ia = a.id;
  return a.tape->push(std::move(y), detail::any_grad(a), [ia, t0, t1, n](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    const S u0 = t0 / n, u1 = t1 / n;
    // d(t/|t|) = (I - u u^T) / |t| dt, then through tanh.
    const S dot = g(0, 0) * u0 + g(0, 1) * u1;
    Mat<S> gi(1, 3);
    gi(0, 0) = (g(0, 0) - dot * u0) / n * (S(1) - t0 * t0);
    gi(0, 1) = (g(0, 1) - dot * u1) / n * (S(1) - t1 * t1);
    gi(0, 2) = g(0, 2);
    t.accumulate(ia, gi);
  });
}

/// (tanh a0, tanh a1, a2): the pair before renormalization.
template <typename S>
Var<S> axis_tanh(const Var<S>& a) {
  if (a.rows() != 1 || a.cols() != 3) throw std::invalid_argument("axis_tanh: expects 1 x 3");
  const auto& x = a.value();
  const S t0 = std::tanh(x(0, 0)), t1 = std::tanh(x(0, 1));
  Mat<S> y(1, 3);
  y << t0, t1, x(0, 2);
  const int ia = a.id;
  return a.tape->push(std::move(y), detail::any_grad(a), [ia, t0, t1](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    Mat<S> gi(1, 3);
    gi << g(0, 0) * (S(1) - t0 * t0), g(0, 1) * (S(1) - t1 * t1), g(0, 2);
    t.accumulate(ia, gi);
  });
}

}  // namespace i3d::ag
