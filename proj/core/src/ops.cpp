#include "kwcap/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kwcap/errors.hpp"

namespace kwcap {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

ConstMap as_matrix(const Tensor& t) {
  return ConstMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MutMap as_matrix(Tensor& t) {
  return MutMap(t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_matrix(const char* op, const Tensor& t) {
  if (t.rank() > 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
}

template <typename F, typename D>
Var unary(const char* op, Var x, F f, D dfdx_from_xy) {
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  Tape* tape = &x.tape();
  NodeId xid = x.id();
  NodeId yid = tape->next_id();
  return tape->record(op, std::move(y), {xid}, [tape, xid, yid, dfdx_from_xy](const Tensor& g, GradientSink& sink) {
    Tensor* gx = sink.slot(xid);
    if (!gx) return;
    const Tensor& xs = tape->value(xid);
    const Tensor& ys = tape->value(yid);
    for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * dfdx_from_xy(xs[i], ys[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require_matrix("matmul", av);
  require_matrix("matmul", bv);
  if (bv.rank() != 2 || av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(av.shape()) + " and " +
                         shape_string(bv.shape()));
  }
  Tensor c({av.rows(), bv.cols()});
  as_matrix(c).noalias() = as_matrix(av) * as_matrix(bv);
  Tape* tape = &a.tape();
  NodeId aid = a.id(), bid = b.id();
  return tape->record("matmul", std::move(c), {aid, bid}, [tape, aid, bid](const Tensor& g, GradientSink& sink) {
    if (Tensor* ga = sink.slot(aid)) as_matrix(*ga).noalias() += as_matrix(g) * as_matrix(tape->value(bid)).transpose();
    if (Tensor* gb = sink.slot(bid)) as_matrix(*gb).noalias() += as_matrix(tape->value(aid)).transpose() * as_matrix(g);
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  require_matrix("transpose", av);
  Tensor t({av.cols(), av.rows()});
  as_matrix(t) = as_matrix(av).transpose();
  NodeId aid = a.id();
  return a.tape().record("transpose", std::move(t), {aid}, [aid](const Tensor& g, GradientSink& sink) {
    if (Tensor* ga = sink.slot(aid)) as_matrix(*ga) += as_matrix(g).transpose();
  });
}

Var add(Var a, Var b) {
  require_same_shape("add", a.value(), b.value());
  Tensor c = a.value();
  c += b.value();
  NodeId aid = a.id(), bid = b.id();
  return a.tape().record("add", std::move(c), {aid, bid}, [aid, bid](const Tensor& g, GradientSink& sink) {
    if (Tensor* ga = sink.slot(aid)) *ga += g;
    if (Tensor* gb = sink.slot(bid)) *gb += g;
  });
}

Var sub(Var a, Var b) {
  require_same_shape("sub", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor c(av.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] - bv[i];
  NodeId aid = a.id(), bid = b.id();
  return a.tape().record("sub", std::move(c), {aid, bid}, [aid, bid](const Tensor& g, GradientSink& sink) {
    if (Tensor* ga = sink.slot(aid)) *ga += g;
    if (Tensor* gb = sink.slot(bid))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  require_same_shape("mul", a.value(), b.value());
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor c(av.shape());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = av[i] * bv[i];
  Tape* tape = &a.tape();
  NodeId aid = a.id(), bid = b.id();
  return tape->record("mul", std::move(c), {aid, bid}, [tape, aid, bid](const Tensor& g, GradientSink& sink) {
    const Tensor& x = tape->value(aid);
    const Tensor& y = tape->value(bid);
    if (Tensor* ga = sink.slot(aid))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * y[i];
    if (Tensor* gb = sink.slot(bid))
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * x[i];
  });
}

Var scale(Var a, double s) {
  Tensor c = a.value();
  c *= s;
  NodeId aid = a.id();
  return a.tape().record("scale", std::move(c), {aid}, [aid, s](const Tensor& g, GradientSink& sink) {
    if (Tensor* ga = sink.slot(aid))
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += s * g[i];
  });
}

Var add_row(Var a, Var b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (bv.size() != av.cols()) {
    throw DimensionError("add_row: bias " + shape_string(bv.shape()) + " does not match last dimension of " +
                         shape_string(av.shape()));
  }
  Tensor c = av;
  std::size_t n = av.cols();
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t j = 0; j < n; ++j) c[r * n + j] += bv[j];
  NodeId aid = a.id(), bid = b.id();
  return a.tape().record("add_row", std::move(c), {aid, bid}, [aid, bid, n](const Tensor& g, GradientSink& sink) {
    if (Tensor* ga = sink.slot(aid)) *ga += g;
    if (Tensor* gb = sink.slot(bid)) {
      std::size_t rows = g.size() / std::max<std::size_t>(n, 1);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[r * n + j];
    }
  });
}

Var relu(Var x) {
  return unary(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var sigmoid(Var x) {
  return unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var x) {
  return unary(
      "tanh", x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var softmax_lastdim(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() == 0 || xv.cols() == 0) throw DimensionError("softmax_lastdim: empty last dimension");
  std::size_t n = xv.cols();
  Tensor y(xv.shape());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    const double* in = xv.data().data() + r * n;
    double* out = y.data().data() + r * n;
    double m = *std::max_element(in, in + n);
    if (m == -std::numeric_limits<double>::infinity()) continue;  // fully masked row stays zero
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - m);
      total += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= total;
  }
  Tape* tape = &x.tape();
  NodeId xid = x.id();
  NodeId yid = tape->next_id();
  return tape->record("softmax", std::move(y), {xid}, [tape, xid, yid, n](const Tensor& g, GradientSink& sink) {
    Tensor* gx = sink.slot(xid);
    if (!gx) return;
    const Tensor& ys = tape->value(yid);
    for (std::size_t r = 0; r < ys.rows(); ++r) {
      const double* yr = ys.data().data() + r * n;
      const double* gr = g.data().data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      double* out = gx->data().data() + r * n;
      for (std::size_t j = 0; j < n; ++j) out[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  std::size_t n = xv.cols();
  if (gamma.value().size() != n || beta.value().size() != n) {
    throw DimensionError("layer_norm: gamma " + shape_string(gamma.value().shape()) + " / beta " +
                         shape_string(beta.value().shape()) + " must match last dimension of " +
                         shape_string(xv.shape()));
  }
  std::size_t rows = xv.rows();
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(rows);
  Tensor y(xv.shape());
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data().data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      double h = (in[j] - mean) * inv_std[r];
      xhat[r * n + j] = h;
      y[r * n + j] = gv[j] * h + bv[j];
    }
  }
  Tape* tape = &x.tape();
  NodeId xid = x.id(), gid = gamma.id(), bid = beta.id();
  return tape->record(
      "layer_norm", std::move(y), {xid, gid, bid},
      [tape, xid, gid, bid, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Tensor& g,
                                                                                           GradientSink& sink) {
        const Tensor& gam = tape->value(gid);
        if (Tensor* gg = sink.slot(gid))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) (*gg)[j] += g[r * n + j] * xhat[r * n + j];
        if (Tensor* gb = sink.slot(bid))
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < n; ++j) (*gb)[j] += g[r * n + j];
        if (Tensor* gx = sink.slot(xid)) {
          double dn = static_cast<double>(n);
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_g = 0.0, mean_gx = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              double gh = g[r * n + j] * gam[j];
              mean_g += gh;
              mean_gx += gh * xhat[r * n + j];
            }
            mean_g /= dn;
            mean_gx /= dn;
            for (std::size_t j = 0; j < n; ++j) {
              double gh = g[r * n + j] * gam[j];
              (*gx)[r * n + j] += inv_std[r] * (gh - mean_g - xhat[r * n + j] * mean_gx);
            }
          }
        }
      });
}

Var concat_lastdim(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_lastdim: no inputs");
  std::size_t rows = parts[0].value().rows();
  Shape lead(parts[0].value().shape().begin(), parts[0].value().shape().end() - 1);
  std::size_t total = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    const Shape& s = p.value().shape();
    Shape l(s.begin(), s.end() - 1);
    if (l != lead) {
      throw DimensionError("concat_lastdim: leading shape mismatch " + shape_string(parts[0].value().shape()) +
                           " vs " + shape_string(s));
    }
    total += p.value().cols();
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
  }
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor out(out_shape);
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Tensor& v = p.value();
    std::size_t w = v.cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data().data() + r * w, w, out.data().data() + r * total + off);
    off += w;
  }
  return parts[0].tape().record("concat_lastdim", std::move(out), ids,
                                [ids, widths, rows, total](const Tensor& g, GradientSink& sink) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    std::size_t w = widths[k];
                                    if (Tensor* gp = sink.slot(ids[k]))
                                      for (std::size_t r = 0; r < rows; ++r)
                                        for (std::size_t j = 0; j < w; ++j)
                                          (*gp)[r * w + j] += g[r * total + off + j];
                                    off += w;
                                  }
                                });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  std::size_t cols = parts[0].value().cols();
  std::size_t rows = 0;
  std::vector<NodeId> ids;
  std::vector<std::size_t> sizes;
  for (const Var& p : parts) {
    if (p.value().cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + shape_string(parts[0].value().shape()) + " vs " +
                           shape_string(p.value().shape()));
    }
    rows += p.value().rows();
    ids.push_back(p.id());
    sizes.push_back(p.value().size());
  }
  Tensor out({rows, cols});
  std::size_t off = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  return parts[0].tape().record("concat_rows", std::move(out), ids, [ids, sizes](const Tensor& g, GradientSink& sink) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (Tensor* gp = sink.slot(ids[k]))
        for (std::size_t i = 0; i < sizes[k]; ++i) (*gp)[i] += g[off + i];
      off += sizes[k];
    }
  });
}

Var slice_lastdim(Var x, std::size_t offset, std::size_t length) {
  const Tensor& xv = x.value();
  std::size_t n = xv.cols();
  if (offset + length > n) {
    throw DimensionError("slice_lastdim: [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                         ") out of range for " + shape_string(xv.shape()));
  }
  Shape s = xv.shape();
  if (s.empty()) s.push_back(1);
  s.back() = length;
  Tensor out(s);
  std::size_t rows = xv.rows();
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data().data() + r * n + offset, length, out.data().data() + r * length);
  NodeId xid = x.id();
  return x.tape().record("slice_lastdim", std::move(out), {xid},
                         [xid, rows, n, offset, length](const Tensor& g, GradientSink& sink) {
                           if (Tensor* gx = sink.slot(xid))
                             for (std::size_t r = 0; r < rows; ++r)
                               for (std::size_t j = 0; j < length; ++j) (*gx)[r * n + offset + j] += g[r * length + j];
                         });
}

Var slice_rows(Var x, std::size_t offset, std::size_t length) {
  const Tensor& xv = x.value();
  require_matrix("slice_rows", xv);
  std::size_t n = xv.cols();
  if (offset + length > xv.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(offset) + ", " + std::to_string(offset + length) +
                         ") out of range for " + shape_string(xv.shape()));
  }
  Tensor out({length, n});
  std::copy_n(xv.data().data() + offset * n, length * n, out.data().data());
  NodeId xid = x.id();
  return x.tape().record("slice_rows", std::move(out), {xid}, [xid, offset, n](const Tensor& g, GradientSink& sink) {
    if (Tensor* gx = sink.slot(xid))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[offset * n + i] += g[i];
  });
}

Var gather_rows(Var table, std::span<const std::int32_t> ids) {
  const Tensor& tv = table.value();
  require_matrix("gather_rows", tv);
  std::size_t v = tv.rows(), e = tv.cols();
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  for (std::int32_t id : idv) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw VocabularyError("gather_rows: token id " + std::to_string(id) + " outside vocabulary of size " +
                            std::to_string(v));
    }
  }
  Tensor out({idv.size(), e});
  for (std::size_t i = 0; i < idv.size(); ++i)
    std::copy_n(tv.data().data() + static_cast<std::size_t>(idv[i]) * e, e, out.data().data() + i * e);
  NodeId tid = table.id();
  return table.tape().record("gather_rows", std::move(out), {tid},
                             [tid, e, idv = std::move(idv)](const Tensor& g, GradientSink& sink) {
                               if (Tensor* gt = sink.slot(tid))
                                 for (std::size_t i = 0; i < idv.size(); ++i)
                                   for (std::size_t j = 0; j < e; ++j)
                                     (*gt)[static_cast<std::size_t>(idv[i]) * e + j] += g[i * e + j];
                             });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  NodeId xid = x.id();
  return x.tape().record("reshape", std::move(out), {xid}, [xid](const Tensor& g, GradientSink& sink) {
    if (Tensor* gx = sink.slot(xid))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  NodeId xid = x.id();
  return x.tape().record("sum", Tensor::scalar(s), {xid}, [xid](const Tensor& g, GradientSink& sink) {
    if (Tensor* gx = sink.slot(xid))
      for (double& v : gx->data()) v += g[0];
  });
}

Var dropout(Var x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("dropout: probability must lie in [0, 1), got " + std::to_string(p));
  if (mode == Mode::Eval || p == 0.0) return x;
  const Tensor& xv = x.value();
  Tensor mask(xv.shape());
  double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.bernoulli(p) ? 0.0 : keep_scale;
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  NodeId xid = x.id();
  return x.tape().record("dropout", std::move(out), {xid}, [xid, mask = std::move(mask)](const Tensor& g, GradientSink& sink) {
    if (Tensor* gx = sink.slot(xid))
      for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * mask[i];
  });
}

Var nll_from_logits(Var logits, std::span<const std::int32_t> targets) {
  const Tensor& z = logits.value();
  std::size_t rows = z.rows(), n = z.cols();
  if (targets.size() != rows) {
    throw DimensionError("nll_from_logits: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(z.shape()));
  }
  Tensor probs(z.shape());
  double total = 0.0;
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  for (std::size_t r = 0; r < rows; ++r) {
    if (tv[r] < 0) continue;
    if (static_cast<std::size_t>(tv[r]) >= n) {
      throw VocabularyError("nll_from_logits: target id " + std::to_string(tv[r]) + " outside " + std::to_string(n) +
                            " classes");
    }
    const double* in = z.data().data() + r * n;
    double* out = probs.data().data() + r * n;
    double m = *std::max_element(in, in + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[j] = std::exp(in[j] - m);
      s += out[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] /= s;
    total += -(in[tv[r]] - m - std::log(s));
  }
  NodeId zid = logits.id();
  return logits.tape().record(
      "nll_from_logits", Tensor::scalar(total), {zid},
      [zid, n, tv = std::move(tv), probs = std::move(probs)](const Tensor& g, GradientSink& sink) {
        Tensor* gz = sink.slot(zid);
        if (!gz) return;
        for (std::size_t r = 0; r < tv.size(); ++r) {
          if (tv[r] < 0) continue;
          for (std::size_t j = 0; j < n; ++j) (*gz)[r * n + j] += g[0] * probs[r * n + j];
          (*gz)[r * n + static_cast<std::size_t>(tv[r])] -= g[0];
        }
      });
}

Var nll_from_probs(Var probs, std::span<const std::int32_t> targets) {
  const Tensor& p = probs.value();
  std::size_t rows = p.rows(), n = p.cols();
  if (targets.size() != rows) {
    throw DimensionError("nll_from_probs: " + std::to_string(targets.size()) + " targets for distributions " +
                         shape_string(p.shape()));
  }
  std::vector<std::int32_t> tv(targets.begin(), targets.end());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tv[r] < 0) continue;
    if (static_cast<std::size_t>(tv[r]) >= n) {
      throw VocabularyError("nll_from_probs: target id " + std::to_string(tv[r]) + " outside " + std::to_string(n) +
                            " classes");
    }
    total -= std::log(p[r * n + static_cast<std::size_t>(tv[r])]);
  }
  Tape* tape = &probs.tape();
  NodeId pid = probs.id();
  return tape->record("nll_from_probs", Tensor::scalar(total), {pid},
                      [tape, pid, n, tv = std::move(tv)](const Tensor& g, GradientSink& sink) {
                        Tensor* gp = sink.slot(pid);
                        if (!gp) return;
                        const Tensor& pv = tape->value(pid);
                        for (std::size_t r = 0; r < tv.size(); ++r) {
                          if (tv[r] < 0) continue;
                          std::size_t k = r * n + static_cast<std::size_t>(tv[r]);
                          (*gp)[k] -= g[0] / pv[k];
                        }
                      });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  const Tensor& z = logits.value();
  if (targets.size() != z.size()) {
    throw DimensionError("bce_with_logits: targets " + shape_string(targets.shape()) + " vs logits " +
                         shape_string(z.shape()));
  }
  double total = 0.0;
  Tensor p(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    double x = z[i];
    // log(1 + e^x) - t x, written to stay finite for large |x|.
    total += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
    p[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  NodeId zid = logits.id();
  return logits.tape().record("bce_with_logits", Tensor::scalar(total), {zid},
                              [zid, p = std::move(p), t = targets](const Tensor& g, GradientSink& sink) {
                                if (Tensor* gz = sink.slot(zid))
                                  for (std::size_t i = 0; i < p.size(); ++i) (*gz)[i] += g[0] * (p[i] - t[i]);
                              });
}

}  // namespace kwcap
