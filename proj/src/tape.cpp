#include "stamp/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/special_functions/digamma.hpp>
#include <boost/math/special_functions/trigamma.hpp>
#include <cmath>
#include <memory>

namespace stamp {

namespace {

using MatrixRM =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatrixRM>;
using MapCM = Eigen::Map<const MatrixRM>;

constexpr double kEulerMascheroni = 0.5772156649015328606;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape) + " vs " + shape_str(b.shape));
}

struct ConvDims {
  int64_t n, ci, h, w, co, k, ho, wo;
  int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.ndim() != 4 || w.ndim() != 4)
    throw std::invalid_argument("conv2d: expects 4-d input and weight");
  ConvDims d;
  d.n = x.dim(0);
  d.ci = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.co = w.dim(0);
  d.k = w.dim(2);
  d.stride = stride;
  d.pad = pad;
  if (w.dim(1) != d.ci)
    throw std::invalid_argument("conv2d: input channels mismatch");
  if (w.dim(2) != w.dim(3)) throw std::invalid_argument("conv2d: square kernels only");
  d.ho = (d.h + 2 * pad - d.k) / stride + 1;
  d.wo = (d.w + 2 * pad - d.k) / stride + 1;
  if (d.ho < 1 || d.wo < 1) throw std::invalid_argument("conv2d: empty output");
  return d;
}

// col layout: [ci*k*k, n*ho*wo], column index (n*ho + oh)*wo + ow
void im2col(const Tensor& x, const ConvDims& d, std::vector<double>& col) {
  const int64_t rows = d.ci * d.k * d.k;
  const int64_t cols = d.n * d.ho * d.wo;
  col.assign(static_cast<size_t>(rows * cols), 0.0);
  const double* xp = x.ptr();
  for (int64_t n = 0; n < d.n; ++n) {
    for (int64_t c = 0; c < d.ci; ++c) {
      const double* xc = xp + (n * d.ci + c) * d.h * d.w;
      for (int64_t ki = 0; ki < d.k; ++ki) {
        for (int64_t kj = 0; kj < d.k; ++kj) {
          const int64_t row = (c * d.k + ki) * d.k + kj;
          double* dst = col.data() + row * cols + n * d.ho * d.wo;
          for (int64_t oh = 0; oh < d.ho; ++oh) {
            const int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.h) {
              dst += d.wo;
              continue;
            }
            for (int64_t ow = 0; ow < d.wo; ++ow) {
              const int64_t iw = ow * d.stride - d.pad + kj;
              *dst++ = (iw < 0 || iw >= d.w) ? 0.0 : xc[ih * d.w + iw];
            }
          }
        }
      }
    }
  }
}

void col2im_accumulate(const std::vector<double>& col, const ConvDims& d,
                       double* dx) {
  const int64_t cols = d.n * d.ho * d.wo;
  for (int64_t n = 0; n < d.n; ++n) {
    for (int64_t c = 0; c < d.ci; ++c) {
      double* xc = dx + (n * d.ci + c) * d.h * d.w;
      for (int64_t ki = 0; ki < d.k; ++ki) {
        for (int64_t kj = 0; kj < d.k; ++kj) {
          const int64_t row = (c * d.k + ki) * d.k + kj;
          const double* src = col.data() + row * cols + n * d.ho * d.wo;
          for (int64_t oh = 0; oh < d.ho; ++oh) {
            const int64_t ih = oh * d.stride - d.pad + ki;
            if (ih < 0 || ih >= d.h) {
              src += d.wo;
              continue;
            }
            for (int64_t ow = 0; ow < d.wo; ++ow) {
              const int64_t iw = ow * d.stride - d.pad + kj;
              const double v = *src++;
              if (iw >= 0 && iw < d.w) xc[ih * d.w + iw] += v;
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tape::Id Tape::push(Tensor out, bool requires, std::function<void(Tape&)> back) {
  Node n;
  n.value = std::move(out);
  n.requires = requires;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<Id>(nodes_.size() - 1);
}

Tape::Id Tape::leaf(Tensor t, bool requires_grad) {
  return push(std::move(t), requires_grad, nullptr);
}

Tensor& Tape::grad(Id id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (!n.grad_alloc) {
    n.gradient = Tensor::zeros(n.value.shape);
    n.grad_alloc = true;
  }
  return n.gradient;
}

void Tape::accumulate(Id id, const double* g, int64_t n) {
  Node& node = nodes_[static_cast<size_t>(id)];
  if (!node.requires) return;
  Tensor& dst = grad(id);
  for (int64_t i = 0; i < n; ++i) dst.data[static_cast<size_t>(i)] += g[i];
}

void Tape::backward(Id root) {
  Node& r = nodes_[static_cast<size_t>(root)];
  if (r.value.size() != 1)
    throw std::invalid_argument("backward: root must be a scalar");
  grad(root).data[0] = 1.0;
  for (Id id = root; id >= 0; --id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.back && n.grad_alloc && n.requires) n.back(*this);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Tape::Id Tape::add(Id a, Id b) {
  check_same_shape(val(a), val(b), "add");
  Tensor out = val(a);
  const Tensor& vb = val(b);
  for (int64_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
  Id id = push(std::move(out), requires_grad(a) || requires_grad(b),
               [a, b](Tape& t) {
                 Id self = t.last_id_;
                 const Tensor& g = t.grad(self);
                 t.accumulate(a, g.ptr(), g.size());
                 t.accumulate(b, g.ptr(), g.size());
               });
  return id;
}

Tape::Id Tape::sub(Id a, Id b) {
  check_same_shape(val(a), val(b), "sub");
  Tensor out = val(a);
  const Tensor& vb = val(b);
  for (int64_t i = 0; i < out.size(); ++i) out.data[i] -= vb.data[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t) {
                Id self = t.last_id_;
                const Tensor& g = t.grad(self);
                t.accumulate(a, g.ptr(), g.size());
                if (t.requires_grad(b)) {
                  Tensor neg = g;
                  for (double& x : neg.data) x = -x;
                  t.accumulate(b, neg.ptr(), neg.size());
                }
              });
}

Tape::Id Tape::mul(Id a, Id b) {
  check_same_shape(val(a), val(b), "mul");
  Tensor out = val(a);
  const Tensor& vb = val(b);
  for (int64_t i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t) {
                Id self = t.last_id_;
                const Tensor& g = t.grad(self);
                const int64_t n = g.size();
                if (t.requires_grad(a)) {
                  std::vector<double> da(static_cast<size_t>(n));
                  const Tensor& vb2 = t.val(b);
                  for (int64_t i = 0; i < n; ++i) da[i] = g.data[i] * vb2.data[i];
                  t.accumulate(a, da.data(), n);
                }
                if (t.requires_grad(b)) {
                  std::vector<double> db(static_cast<size_t>(n));
                  const Tensor& va = t.val(a);
                  for (int64_t i = 0; i < n; ++i) db[i] = g.data[i] * va.data[i];
                  t.accumulate(b, db.data(), n);
                }
              });
}

Tape::Id Tape::div(Id a, Id b) {
  check_same_shape(val(a), val(b), "div");
  Tensor out = val(a);
  const Tensor& vb = val(b);
  for (int64_t i = 0; i < out.size(); ++i) out.data[i] /= vb.data[i];
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b](Tape& t) {
                Id self = t.last_id_;
                const Tensor& g = t.grad(self);
                const Tensor& va = t.val(a);
                const Tensor& vb2 = t.val(b);
                const int64_t n = g.size();
                if (t.requires_grad(a)) {
                  std::vector<double> da(static_cast<size_t>(n));
                  for (int64_t i = 0; i < n; ++i) da[i] = g.data[i] / vb2.data[i];
                  t.accumulate(a, da.data(), n);
                }
                if (t.requires_grad(b)) {
                  std::vector<double> db(static_cast<size_t>(n));
                  for (int64_t i = 0; i < n; ++i)
                    db[i] = -g.data[i] * va.data[i] / (vb2.data[i] * vb2.data[i]);
                  t.accumulate(b, db.data(), n);
                }
              });
}

Tape::Id Tape::affine(Id x, double k, double c) {
  Tensor out = val(x);
  for (double& v : out.data) v = k * v + c;
  return push(std::move(out), requires_grad(x), [x, k](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    std::vector<double> dx(g.data.size());
    for (size_t i = 0; i < dx.size(); ++i) dx[i] = k * g.data[i];
    t.accumulate(x, dx.data(), g.size());
  });
}

Tape::Id Tape::relu(Id x) {
  Tensor out = val(x);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return push(std::move(out), requires_grad(x), [x](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const Tensor& vx = t.val(x);
    std::vector<double> dx(g.data.size());
    for (size_t i = 0; i < dx.size(); ++i)
      dx[i] = vx.data[i] > 0.0 ? g.data[i] : 0.0;
    t.accumulate(x, dx.data(), g.size());
  });
}

Tape::Id Tape::sigmoid(Id x) {
  Tensor out = val(x);
  for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
  return push(std::move(out), requires_grad(x), [x](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.val(self);
    std::vector<double> dx(g.data.size());
    for (size_t i = 0; i < dx.size(); ++i)
      dx[i] = g.data[i] * y.data[i] * (1.0 - y.data[i]);
    t.accumulate(x, dx.data(), g.size());
  });
}

Tape::Id Tape::exp_(Id x) {
  Tensor out = val(x);
  for (double& v : out.data) v = std::exp(v);
  return push(std::move(out), requires_grad(x), [x](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.val(self);
    std::vector<double> dx(g.data.size());
    for (size_t i = 0; i < dx.size(); ++i) dx[i] = g.data[i] * y.data[i];
    t.accumulate(x, dx.data(), g.size());
  });
}

Tape::Id Tape::log_(Id x) {
  Tensor out = val(x);
  for (double& v : out.data) v = std::log(v);
  return push(std::move(out), requires_grad(x), [x](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const Tensor& vx = t.val(x);
    std::vector<double> dx(g.data.size());
    for (size_t i = 0; i < dx.size(); ++i) dx[i] = g.data[i] / vx.data[i];
    t.accumulate(x, dx.data(), g.size());
  });
}

Tape::Id Tape::clamp_hard(Id x, double lo, double hi) {
  Tensor out = val(x);
  for (double& v : out.data) v = std::min(hi, std::max(lo, v));
  return push(std::move(out), requires_grad(x), [x, lo, hi](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const Tensor& vx = t.val(x);
    std::vector<double> dx(g.data.size());
    for (size_t i = 0; i < dx.size(); ++i)
      dx[i] = (vx.data[i] > lo && vx.data[i] < hi) ? g.data[i] : 0.0;
    t.accumulate(x, dx.data(), g.size());
  });
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tape::Id Tape::matmul(Id a, Id b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(va.shape) + " x " + shape_str(vb.shape));
  const int64_t n = va.dim(0), k = va.dim(1), m = vb.dim(1);
  Tensor out({n, m});
  MapM(out.ptr(), n, m) = MapCM(va.ptr(), n, k) * MapCM(vb.ptr(), k, m);
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b, n, k, m](Tape& t) {
                Id self = t.last_id_;
                MapCM g(t.grad(self).ptr(), n, m);
                if (t.requires_grad(a)) {
                  MatrixRM da = g * MapCM(t.val(b).ptr(), k, m).transpose();
                  t.accumulate(a, da.data(), n * k);
                }
                if (t.requires_grad(b)) {
                  MatrixRM db = MapCM(t.val(a).ptr(), n, k).transpose() * g;
                  t.accumulate(b, db.data(), k * m);
                }
              });
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(1))
    throw std::invalid_argument("matmul_nt: incompatible shapes");
  const int64_t n = va.dim(0), k = va.dim(1), m = vb.dim(0);
  Tensor out({n, m});
  MapM(out.ptr(), n, m) =
      MapCM(va.ptr(), n, k) * MapCM(vb.ptr(), m, k).transpose();
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b, n, k, m](Tape& t) {
                Id self = t.last_id_;
                MapCM g(t.grad(self).ptr(), n, m);
                if (t.requires_grad(a)) {
                  MatrixRM da = g * MapCM(t.val(b).ptr(), m, k);
                  t.accumulate(a, da.data(), n * k);
                }
                if (t.requires_grad(b)) {
                  MatrixRM db = g.transpose() * MapCM(t.val(a).ptr(), n, k);
                  t.accumulate(b, db.data(), m * k);
                }
              });
}

Tape::Id Tape::add_rows(Id x, Id row) {
  const Tensor& vx = val(x);
  const Tensor& vr = val(row);
  if (vx.ndim() != 2 || vr.size() != vx.dim(1))
    throw std::invalid_argument("add_rows: shape mismatch");
  const int64_t n = vx.dim(0), d = vx.dim(1);
  Tensor out = vx;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.data[i * d + j] += vr.data[j];
  return push(std::move(out), requires_grad(x) || requires_grad(row),
              [x, row, n, d](Tape& t) {
                Id self = t.last_id_;
                const Tensor& g = t.grad(self);
                t.accumulate(x, g.ptr(), g.size());
                if (t.requires_grad(row)) {
                  std::vector<double> dr(static_cast<size_t>(d), 0.0);
                  for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) dr[j] += g.data[i * d + j];
                  t.accumulate(row, dr.data(), d);
                }
              });
}

Tape::Id Tape::slice_cols(Id x, int64_t c0, int64_t c1) {
  const Tensor& vx = val(x);
  if (vx.ndim() != 2 || c0 < 0 || c1 > vx.dim(1) || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  const int64_t n = vx.dim(0), d = vx.dim(1), w = c1 - c0;
  Tensor out({n, w});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < w; ++j) out.data[i * w + j] = vx.data[i * d + c0 + j];
  return push(std::move(out), requires_grad(x), [x, n, d, c0, w](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad(x);
    if (!t.requires_grad(x)) return;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < w; ++j) dx.data[i * d + c0 + j] += g.data[i * w + j];
  });
}

Tape::Id Tape::concat_cols(const std::vector<Id>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty list");
  const int64_t n = val(xs[0]).dim(0);
  int64_t total = 0;
  bool req = false;
  for (Id id : xs) {
    if (val(id).ndim() != 2 || val(id).dim(0) != n)
      throw std::invalid_argument("concat_cols: row mismatch");
    total += val(id).dim(1);
    req = req || requires_grad(id);
  }
  Tensor out({n, total});
  int64_t off = 0;
  for (Id id : xs) {
    const Tensor& v = val(id);
    const int64_t w = v.dim(1);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < w; ++j)
        out.data[i * total + off + j] = v.data[i * w + j];
    off += w;
  }
  std::vector<Id> parents = xs;
  return push(std::move(out), req, [parents, n, total](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    int64_t off = 0;
    for (Id id : parents) {
      const int64_t w = t.val(id).dim(1);
      if (t.requires_grad(id)) {
        std::vector<double> dx(static_cast<size_t>(n * w));
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < w; ++j)
            dx[i * w + j] = g.data[i * total + off + j];
        t.accumulate(id, dx.data(), n * w);
      }
      off += w;
    }
  });
}

Tape::Id Tape::reshape(Id x, std::vector<int64_t> new_shape) {
  const Tensor& vx = val(x);
  if (Tensor::numel(new_shape) != vx.size())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(new_shape), vx.data);
  return push(std::move(out), requires_grad(x), [x](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    t.accumulate(x, g.ptr(), g.size());
  });
}

// ---------------------------------------------------------------------------
// row-wise nonlinear
// ---------------------------------------------------------------------------

Tape::Id Tape::softmax_rows(Id x) {
  const Tensor& vx = val(x);
  if (vx.ndim() != 2) throw std::invalid_argument("softmax_rows: expects 2-d");
  const int64_t n = vx.dim(0), m = vx.dim(1);
  Tensor out({n, m});
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = vx.ptr() + i * m;
    double* yi = out.ptr() + i * m;
    double mx = xi[0];
    for (int64_t j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (int64_t j = 0; j < m; ++j) s += (yi[j] = std::exp(xi[j] - mx));
    for (int64_t j = 0; j < m; ++j) yi[j] /= s;
  }
  return push(std::move(out), requires_grad(x), [x, n, m](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const Tensor& y = t.val(self);
    std::vector<double> dx(static_cast<size_t>(n * m));
    for (int64_t i = 0; i < n; ++i) {
      const double* gi = g.ptr() + i * m;
      const double* yi = y.ptr() + i * m;
      double dot = 0.0;
      for (int64_t j = 0; j < m; ++j) dot += gi[j] * yi[j];
      for (int64_t j = 0; j < m; ++j) dx[i * m + j] = yi[j] * (gi[j] - dot);
    }
    t.accumulate(x, dx.data(), n * m);
  });
}

Tape::Id Tape::layer_norm(Id x, Id gain, Id bias, double eps) {
  const Tensor& vx = val(x);
  if (vx.ndim() != 2) throw std::invalid_argument("layer_norm: expects 2-d");
  const int64_t n = vx.dim(0), d = vx.dim(1);
  if (val(gain).size() != d || val(bias).size() != d)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(n * d));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  Tensor out({n, d});
  const double* gp = val(gain).ptr();
  const double* bp = val(bias).ptr();
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = vx.ptr() + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += xi[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (xi[j] - mean) * is;
      (*xhat)[static_cast<size_t>(i * d + j)] = xh;
      out.data[i * d + j] = xh * gp[j] + bp[j];
    }
  }
  bool req = requires_grad(x) || requires_grad(gain) || requires_grad(bias);
  return push(std::move(out), req, [x, gain, bias, n, d, xhat, inv_std](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const double* gp = t.val(gain).ptr();
    if (t.requires_grad(x)) {
      std::vector<double> dx(static_cast<size_t>(n * d));
      for (int64_t i = 0; i < n; ++i) {
        const double* gi = g.ptr() + i * d;
        const double* xh = xhat->data() + i * d;
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          const double dxh = gi[j] * gp[j];
          m1 += dxh;
          m2 += dxh * xh[j];
        }
        m1 /= static_cast<double>(d);
        m2 /= static_cast<double>(d);
        const double is = (*inv_std)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < d; ++j)
          dx[i * d + j] = is * (gi[j] * gp[j] - m1 - xh[j] * m2);
      }
      t.accumulate(x, dx.data(), n * d);
    }
    if (t.requires_grad(gain)) {
      std::vector<double> dg(static_cast<size_t>(d), 0.0);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j)
          dg[j] += g.data[i * d + j] * (*xhat)[static_cast<size_t>(i * d + j)];
      t.accumulate(gain, dg.data(), d);
    }
    if (t.requires_grad(bias)) {
      std::vector<double> db(static_cast<size_t>(d), 0.0);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) db[j] += g.data[i * d + j];
      t.accumulate(bias, db.data(), d);
    }
  });
}

// ---------------------------------------------------------------------------
// convolutional
// ---------------------------------------------------------------------------

Tape::Id Tape::conv2d(Id x, Id w, Id b, int stride, int pad) {
  const Tensor& vx = val(x);
  const Tensor& vw = val(w);
  const ConvDims d = conv_dims(vx, vw, stride, pad);
  if (val(b).size() != d.co) throw std::invalid_argument("conv2d: bias size");
  std::vector<double> col;
  im2col(vx, d, col);
  const int64_t rows = d.ci * d.k * d.k;
  const int64_t cols = d.n * d.ho * d.wo;
  Tensor out({d.n, d.co, d.ho, d.wo});
  // out_mat[co, n*ho*wo] = W[co, rows] * col
  MatrixRM out_mat = MapCM(vw.ptr(), d.co, rows) * MapCM(col.data(), rows, cols);
  const double* bp = val(b).ptr();
  for (int64_t n = 0; n < d.n; ++n)
    for (int64_t co = 0; co < d.co; ++co) {
      double* op = out.ptr() + (n * d.co + co) * d.ho * d.wo;
      const double* src = out_mat.data() + co * cols + n * d.ho * d.wo;
      const double bias = bp[co];
      for (int64_t i = 0; i < d.ho * d.wo; ++i) op[i] = src[i] + bias;
    }
  bool req = requires_grad(x) || requires_grad(w) || requires_grad(b);
  return push(std::move(out), req, [x, w, b, d](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    const int64_t rows = d.ci * d.k * d.k;
    const int64_t cols = d.n * d.ho * d.wo;
    // regroup grad to [co, n*ho*wo]
    MatrixRM gmat(d.co, cols);
    for (int64_t n = 0; n < d.n; ++n)
      for (int64_t co = 0; co < d.co; ++co) {
        const double* gp = g.ptr() + (n * d.co + co) * d.ho * d.wo;
        double* dst = gmat.data() + co * cols + n * d.ho * d.wo;
        std::copy(gp, gp + d.ho * d.wo, dst);
      }
    if (t.requires_grad(b)) {
      std::vector<double> db(static_cast<size_t>(d.co), 0.0);
      for (int64_t co = 0; co < d.co; ++co)
        db[co] = gmat.row(co).sum();
      t.accumulate(b, db.data(), d.co);
    }
    // col is recomputed here rather than cached; tapes already hold every
    // activation and the extra pass is cheaper than doubling peak memory.
    std::vector<double> col;
    im2col(t.val(x), d, col);
    if (t.requires_grad(w)) {
      MatrixRM dw = gmat * MapCM(col.data(), rows, cols).transpose();
      t.accumulate(w, dw.data(), d.co * rows);
    }
    if (t.requires_grad(x)) {
      MatrixRM dcol = MapCM(t.val(w).ptr(), d.co, rows).transpose() * gmat;
      std::vector<double> dcol_v(dcol.data(), dcol.data() + rows * cols);
      Tensor& dx = t.grad(x);
      col2im_accumulate(dcol_v, d, dx.ptr());
    }
  });
}

Tape::Id Tape::avg_pool2(Id x) {
  const Tensor& vx = val(x);
  if (vx.ndim() != 4) throw std::invalid_argument("avg_pool2: expects 4-d");
  const int64_t n = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  const int64_t ho = h / 2, wo = w / 2;
  if (ho < 1 || wo < 1) throw std::invalid_argument("avg_pool2: input too small");
  Tensor out({n, c, ho, wo});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const double* xp = vx.ptr() + nc * h * w;
    double* op = out.ptr() + nc * ho * wo;
    for (int64_t i = 0; i < ho; ++i)
      for (int64_t j = 0; j < wo; ++j)
        op[i * wo + j] = 0.25 * (xp[(2 * i) * w + 2 * j] + xp[(2 * i) * w + 2 * j + 1] +
                                 xp[(2 * i + 1) * w + 2 * j] + xp[(2 * i + 1) * w + 2 * j + 1]);
  }
  return push(std::move(out), requires_grad(x), [x, n, c, h, w, ho, wo](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad(x);
    if (!t.requires_grad(x)) return;
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const double* gp = g.ptr() + nc * ho * wo;
      double* dp = dx.ptr() + nc * h * w;
      for (int64_t i = 0; i < ho; ++i)
        for (int64_t j = 0; j < wo; ++j) {
          const double v = 0.25 * gp[i * wo + j];
          dp[(2 * i) * w + 2 * j] += v;
          dp[(2 * i) * w + 2 * j + 1] += v;
          dp[(2 * i + 1) * w + 2 * j] += v;
          dp[(2 * i + 1) * w + 2 * j + 1] += v;
        }
    }
  });
}

Tape::Id Tape::global_avg_pool(Id x) {
  const Tensor& vx = val(x);
  if (vx.ndim() != 4) throw std::invalid_argument("global_avg_pool: expects 4-d");
  const int64_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
  Tensor out({n, c});
  for (int64_t nc = 0; nc < n * c; ++nc) {
    const double* xp = vx.ptr() + nc * hw;
    double s = 0.0;
    for (int64_t i = 0; i < hw; ++i) s += xp[i];
    out.data[nc] = s / static_cast<double>(hw);
  }
  return push(std::move(out), requires_grad(x), [x, n, c, hw](Tape& t) {
    Id self = t.last_id_;
    const Tensor& g = t.grad(self);
    if (!t.requires_grad(x)) return;
    Tensor& dx = t.grad(x);
    for (int64_t nc = 0; nc < n * c; ++nc) {
      const double v = g.data[nc] / static_cast<double>(hw);
      double* dp = dx.ptr() + nc * hw;
      for (int64_t i = 0; i < hw; ++i) dp[i] += v;
    }
  });
}

Tape::Id Tape::channel_affine(Id x, Id g, Id b) {
  const Tensor& vx = val(x);
  if (vx.ndim() != 4) throw std::invalid_argument("channel_affine: expects 4-d");
  const int64_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
  if (val(g).size() != c || val(b).size() != c)
    throw std::invalid_argument("channel_affine: parameter size mismatch");
  Tensor out = vx;
  const double* gp = val(g).ptr();
  const double* bp = val(b).ptr();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic) {
      double* op = out.ptr() + (in * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) op[i] = op[i] * gp[ic] + bp[ic];
    }
  bool req = requires_grad(x) || requires_grad(g) || requires_grad(b);
  return push(std::move(out), req, [x, g, b, n, c, hw](Tape& t) {
    Id self = t.last_id_;
    const Tensor& go = t.grad(self);
    const double* gp = t.val(g).ptr();
    if (t.requires_grad(x)) {
      std::vector<double> dx(go.data.size());
      for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic) {
          const double* gop = go.ptr() + (in * c + ic) * hw;
          double* dp = dx.data() + (in * c + ic) * hw;
          for (int64_t i = 0; i < hw; ++i) dp[i] = gop[i] * gp[ic];
        }
      t.accumulate(x, dx.data(), go.size());
    }
    if (t.requires_grad(g)) {
      std::vector<double> dg(static_cast<size_t>(c), 0.0);
      const Tensor& vx2 = t.val(x);
      for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic) {
          const double* gop = go.ptr() + (in * c + ic) * hw;
          const double* xp = vx2.ptr() + (in * c + ic) * hw;
          double s = 0.0;
          for (int64_t i = 0; i < hw; ++i) s += gop[i] * xp[i];
          dg[ic] += s;
        }
      t.accumulate(g, dg.data(), c);
    }
    if (t.requires_grad(b)) {
      std::vector<double> db(static_cast<size_t>(c), 0.0);
      for (int64_t in = 0; in < n; ++in)
        for (int64_t ic = 0; ic < c; ++ic) {
          const double* gop = go.ptr() + (in * c + ic) * hw;
          double s = 0.0;
          for (int64_t i = 0; i < hw; ++i) s += gop[i];
          db[ic] += s;
        }
      t.accumulate(b, db.data(), c);
    }
  });
}

Tape::Id Tape::channel_mul(Id x, Id m) {
  const Tensor& vx = val(x);
  if (vx.ndim() != 4) throw std::invalid_argument("channel_mul: expects 4-d");
  const int64_t n = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
  if (val(m).size() != c)
    throw std::invalid_argument("channel_mul: mask length " +
                                std::to_string(val(m).size()) + " vs channels " +
                                std::to_string(c));
  Tensor out = vx;
  const double* mp = val(m).ptr();
  for (int64_t in = 0; in < n; ++in)
    for (int64_t ic = 0; ic < c; ++ic) {
      double* op = out.ptr() + (in * c + ic) * hw;
      for (int64_t i = 0; i < hw; ++i) op[i] *= mp[ic];
    }
  return push(std::move(out), requires_grad(x) || requires_grad(m),
              [x, m, n, c, hw](Tape& t) {
                Id self = t.last_id_;
                const Tensor& go = t.grad(self);
                const double* mp = t.val(m).ptr();
                if (t.requires_grad(x)) {
                  std::vector<double> dx(go.data.size());
                  for (int64_t in = 0; in < n; ++in)
                    for (int64_t ic = 0; ic < c; ++ic) {
                      const double* gop = go.ptr() + (in * c + ic) * hw;
                      double* dp = dx.data() + (in * c + ic) * hw;
                      for (int64_t i = 0; i < hw; ++i) dp[i] = gop[i] * mp[ic];
                    }
                  t.accumulate(x, dx.data(), go.size());
                }
                if (t.requires_grad(m)) {
                  std::vector<double> dm(static_cast<size_t>(c), 0.0);
                  const Tensor& vx2 = t.val(x);
                  for (int64_t in = 0; in < n; ++in)
                    for (int64_t ic = 0; ic < c; ++ic) {
                      const double* gop = go.ptr() + (in * c + ic) * hw;
                      const double* xp = vx2.ptr() + (in * c + ic) * hw;
                      double s = 0.0;
                      for (int64_t i = 0; i < hw; ++i) s += gop[i] * xp[i];
                      dm[ic] += s;
                    }
                  t.accumulate(m, dm.data(), c);
                }
              });
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

Tape::Id Tape::sum_all(Id x) {
  const Tensor& vx = val(x);
  double s = 0.0;
  for (double v : vx.data) s += v;
  return push(Tensor::scalar(s), requires_grad(x), [x](Tape& t) {
    Id self = t.last_id_;
    const double g = t.grad(self).data[0];
    const int64_t n = t.val(x).size();
    std::vector<double> dx(static_cast<size_t>(n), g);
    t.accumulate(x, dx.data(), n);
  });
}

Tape::Id Tape::mean_all(Id x) {
  const int64_t n = val(x).size();
  return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

Tape::Id Tape::cross_entropy_mean(Id logits, std::vector<int64_t> labels) {
  const Tensor& vl = val(logits);
  if (vl.ndim() != 2 || static_cast<int64_t>(labels.size()) != vl.dim(0))
    throw std::invalid_argument("cross_entropy_mean: label count mismatch");
  const int64_t n = vl.dim(0), k = vl.dim(1);
  auto probs = std::make_shared<std::vector<double>>(static_cast<size_t>(n * k));
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= k)
      throw std::invalid_argument("cross_entropy_mean: label out of range");
    const double* xi = vl.ptr() + i * k;
    double mx = xi[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, xi[j]);
    double s = 0.0;
    for (int64_t j = 0; j < k; ++j) s += std::exp(xi[j] - mx);
    const double logz = mx + std::log(s);
    for (int64_t j = 0; j < k; ++j)
      (*probs)[static_cast<size_t>(i * k + j)] = std::exp(xi[j] - logz);
    loss -= xi[labels[static_cast<size_t>(i)]] - logz;
  }
  loss /= static_cast<double>(n);
  if (!std::isfinite(loss))
    throw std::runtime_error("cross_entropy_mean: non-finite loss");
  return push(Tensor::scalar(loss), requires_grad(logits),
              [logits, labels, probs, n, k](Tape& t) {
                Id self = t.last_id_;
                const double g = t.grad(self).data[0] / static_cast<double>(n);
                std::vector<double> dx(static_cast<size_t>(n * k));
                for (int64_t i = 0; i < n; ++i)
                  for (int64_t j = 0; j < k; ++j) {
                    double v = (*probs)[static_cast<size_t>(i * k + j)];
                    if (j == labels[static_cast<size_t>(i)]) v -= 1.0;
                    dx[i * k + j] = v * g;
                  }
                t.accumulate(logits, dx.data(), n * k);
              });
}

Tape::Id Tape::kumaraswamy_kl(Id a, Id b, double alpha) {
  check_same_shape(val(a), val(b), "kumaraswamy_kl");
  if (alpha <= 0.0) throw std::invalid_argument("kumaraswamy_kl: alpha must be > 0");
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  const int64_t n = va.size();
  Tensor out(va.shape);
  for (int64_t i = 0; i < n; ++i) {
    const double av = va.data[i], bv = vb.data[i];
    if (av <= 0.0 || bv <= 0.0)
      throw std::invalid_argument("kumaraswamy_kl: non-positive shape parameter");
    const double tt = -kEulerMascheroni - boost::math::digamma(bv) - 1.0 / bv;
    out.data[i] = ((av - alpha) / av) * tt + std::log(av * bv) - std::log(alpha) -
                  (bv - 1.0) / bv;
  }
  return push(std::move(out), requires_grad(a) || requires_grad(b),
              [a, b, alpha, n](Tape& t) {
                Id self = t.last_id_;
                const Tensor& g = t.grad(self);
                const Tensor& va2 = t.val(a);
                const Tensor& vb2 = t.val(b);
                if (t.requires_grad(a)) {
                  std::vector<double> da(static_cast<size_t>(n));
                  for (int64_t i = 0; i < n; ++i) {
                    const double av = va2.data[i], bv = vb2.data[i];
                    const double tt =
                        -kEulerMascheroni - boost::math::digamma(bv) - 1.0 / bv;
                    da[i] = g.data[i] * ((alpha / (av * av)) * tt + 1.0 / av);
                  }
                  t.accumulate(a, da.data(), n);
                }
                if (t.requires_grad(b)) {
                  std::vector<double> db(static_cast<size_t>(n));
                  for (int64_t i = 0; i < n; ++i) {
                    const double av = va2.data[i], bv = vb2.data[i];
                    const double dt = -boost::math::trigamma(bv) + 1.0 / (bv * bv);
                    db[i] = g.data[i] * ((1.0 - alpha / av) * dt + 1.0 / bv -
                                         1.0 / (bv * bv));
                  }
                  t.accumulate(b, db.data(), n);
                }
              });
}

}  // namespace stamp
