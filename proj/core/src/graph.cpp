#include "micromoe/graph.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace micromoe {

namespace {

constexpr double kLayerNormEps = 1e-5;

double gelu_value(double x) {
  return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
}

double gelu_derivative(double x) {
  double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

void check_shape(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

}  // namespace

void mm_nn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate) std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c (m,n) = a (m,k) * b^T where b is (n,k).
void mm_nt(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      if (accumulate)
        ci[j] += acc;
      else
        ci[j] = acc;
    }
  }
}

// c (m,n) = a^T * b where a is (k,m), b is (k,n).
void mm_tn(const double* a, const double* b, double* c, std::size_t m,
           std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double api = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

Val Graph::push(Node n, const char* op) {
  n.op = op;
  if (!n.value.all_finite())
    throw NumericalError(std::string("non-finite value produced by op '") +
                         op + "'");
  nodes_.push_back(std::move(n));
  return Val{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Graph::grad_ref(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.gradbuf.size() == 0)
    n.gradbuf = Tensor::zeros(n.value.rows(), n.value.cols());
  return n.gradbuf;
}

const Tensor& Graph::grad(Val v) const {
  const Node& n = node(v);
  if (n.gradbuf.size() == 0)
    throw std::logic_error("grad requested before backward reached this node");
  return n.gradbuf;
}

Val Graph::constant(Tensor t) {
  Node n;
  n.value = std::move(t);
  return push(std::move(n), "constant");
}

Val Graph::param(const std::shared_ptr<Tensor>& p) {
  auto it = param_ids_.find(p.get());
  if (it != param_ids_.end()) return Val{it->second};
  Node n;
  n.value = *p;
  n.bound = p;
  Val v = push(std::move(n), "param");
  param_ids_[p.get()] = v.id;
  return v;
}

Val Graph::add(Val a, Val b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_shape(ta.same_shape(tb), "add: shape mismatch");
  Node n;
  n.value = ta;
  for (std::size_t i = 0; i < tb.size(); ++i)
    n.value.values()[i] += tb.values()[i];
  n.parents = {a.id, b.id};
  n.back = [a, b](Graph& g, int self) {
    const Tensor& gr = g.grad_ref(self);
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gb = g.grad_ref(b.id);
    for (std::size_t i = 0; i < gr.size(); ++i) {
      ga.values()[i] += gr.values()[i];
      gb.values()[i] += gr.values()[i];
    }
  };
  return push(std::move(n), "add");
}

Val Graph::sub(Val a, Val b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_shape(ta.same_shape(tb), "sub: shape mismatch");
  Node n;
  n.value = ta;
  for (std::size_t i = 0; i < tb.size(); ++i)
    n.value.values()[i] -= tb.values()[i];
  n.parents = {a.id, b.id};
  n.back = [a, b](Graph& g, int self) {
    const Tensor& gr = g.grad_ref(self);
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gb = g.grad_ref(b.id);
    for (std::size_t i = 0; i < gr.size(); ++i) {
      ga.values()[i] += gr.values()[i];
      gb.values()[i] -= gr.values()[i];
    }
  };
  return push(std::move(n), "sub");
}

Val Graph::mul(Val a, Val b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_shape(ta.same_shape(tb), "mul: shape mismatch");
  Node n;
  n.value = ta;
  for (std::size_t i = 0; i < tb.size(); ++i)
    n.value.values()[i] *= tb.values()[i];
  n.parents = {a.id, b.id};
  n.back = [a, b](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& va = g.value(a);
    const Tensor& vb = g.value(b);
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gb = g.grad_ref(b.id);
    for (std::size_t i = 0; i < gr.size(); ++i) {
      ga.values()[i] += gr.values()[i] * vb.values()[i];
      gb.values()[i] += gr.values()[i] * va.values()[i];
    }
  };
  return push(std::move(n), "mul");
}

Val Graph::scale(Val a, double c) {
  Node n;
  n.value = value(a);
  for (double& x : n.value.values()) x *= c;
  n.parents = {a.id};
  n.back = [a, c](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < gr.size(); ++i)
      ga.values()[i] += c * gr.values()[i];
  };
  return push(std::move(n), "scale");
}

Val Graph::add_rowvec(Val a, Val bias) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(bias);
  check_shape(tb.rows() == 1 && tb.cols() == ta.cols(),
              "add_rowvec: bias must be (1, cols)");
  Node n;
  n.value = ta;
  for (std::size_t r = 0; r < ta.rows(); ++r) {
    double* out = n.value.row(r);
    const double* b = tb.row(0);
    for (std::size_t c = 0; c < ta.cols(); ++c) out[c] += b[c];
  }
  n.parents = {a.id, bias.id};
  n.back = [a, bias](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gb = g.grad_ref(bias.id);
    for (std::size_t i = 0; i < gr.size(); ++i)
      ga.values()[i] += gr.values()[i];
    for (std::size_t r = 0; r < gr.rows(); ++r) {
      const double* grow = gr.row(r);
      double* brow = gb.row(0);
      for (std::size_t c = 0; c < gr.cols(); ++c) brow[c] += grow[c];
    }
  };
  return push(std::move(n), "add_rowvec");
}

Val Graph::mul_rowvec(Val a, Val scale) {
  const Tensor& ta = value(a);
  const Tensor& ts = value(scale);
  check_shape(ts.rows() == 1 && ts.cols() == ta.cols(),
              "mul_rowvec: scale must be (1, cols)");
  Node n;
  n.value = ta;
  for (std::size_t r = 0; r < ta.rows(); ++r) {
    double* out = n.value.row(r);
    const double* s = ts.row(0);
    for (std::size_t c = 0; c < ta.cols(); ++c) out[c] *= s[c];
  }
  n.parents = {a.id, scale.id};
  n.back = [a, scale](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& va = g.value(a);
    const Tensor& vs = g.value(scale);
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gs = g.grad_ref(scale.id);
    for (std::size_t r = 0; r < gr.rows(); ++r) {
      const double* grow = gr.row(r);
      const double* arow = va.row(r);
      double* garow = ga.row(r);
      double* gsrow = gs.row(0);
      const double* srow = vs.row(0);
      for (std::size_t c = 0; c < gr.cols(); ++c) {
        garow[c] += grow[c] * srow[c];
        gsrow[c] += grow[c] * arow[c];
      }
    }
  };
  return push(std::move(n), "mul_rowvec");
}

Val Graph::matmul(Val a, Val b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_shape(ta.cols() == tb.rows(), "matmul: inner dimension mismatch");
  Node n;
  n.value = Tensor::zeros(ta.rows(), tb.cols());
  mm_nn(ta.data(), tb.data(), n.value.data(), ta.rows(), ta.cols(), tb.cols(),
        false);
  n.parents = {a.id, b.id};
  n.back = [a, b](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& va = g.value(a);
    const Tensor& vb = g.value(b);
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gb = g.grad_ref(b.id);
    // dA = G * B^T, dB = A^T * G
    mm_nt(gr.data(), vb.data(), ga.data(), gr.rows(), gr.cols(), vb.rows(),
          true);
    mm_tn(va.data(), gr.data(), gb.data(), va.cols(), va.rows(), gr.cols(),
          true);
  };
  return push(std::move(n), "matmul");
}

Val Graph::transpose(Val a) {
  const Tensor& ta = value(a);
  Node n;
  n.value = Tensor::zeros(ta.cols(), ta.rows());
  for (std::size_t r = 0; r < ta.rows(); ++r)
    for (std::size_t c = 0; c < ta.cols(); ++c) n.value.at(c, r) = ta.at(r, c);
  n.parents = {a.id};
  n.back = [a](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t r = 0; r < gr.rows(); ++r)
      for (std::size_t c = 0; c < gr.cols(); ++c) ga.at(c, r) += gr.at(r, c);
  };
  return push(std::move(n), "transpose");
}

Val Graph::gelu(Val a) {
  const Tensor& ta = value(a);
  Node n;
  n.value = ta;
  for (double& x : n.value.values()) x = gelu_value(x);
  n.parents = {a.id};
  n.back = [a](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& va = g.value(a);
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < gr.size(); ++i)
      ga.values()[i] += gr.values()[i] * gelu_derivative(va.values()[i]);
  };
  return push(std::move(n), "gelu");
}

Val Graph::relu(Val a) {
  const Tensor& ta = value(a);
  for (double x : ta.values()) kink_dist_ = std::min(kink_dist_, std::abs(x));
  Node n;
  n.value = ta;
  for (double& x : n.value.values()) x = x > 0.0 ? x : 0.0;
  n.parents = {a.id};
  n.back = [a](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& va = g.value(a);
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < gr.size(); ++i)
      if (va.values()[i] > 0.0) ga.values()[i] += gr.values()[i];
  };
  return push(std::move(n), "relu");
}

Val Graph::softmax_rows(Val a) {
  const Tensor& ta = value(a);
  Node n;
  n.value = Tensor::zeros(ta.rows(), ta.cols());
  for (std::size_t r = 0; r < ta.rows(); ++r) {
    const double* in = ta.row(r);
    double* out = n.value.row(r);
    double mx = in[0];
    for (std::size_t c = 1; c < ta.cols(); ++c) mx = std::max(mx, in[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < ta.cols(); ++c) {
      out[c] = std::exp(in[c] - mx);
      sum += out[c];
    }
    for (std::size_t c = 0; c < ta.cols(); ++c) out[c] /= sum;
  }
  n.parents = {a.id};
  n.back = [a](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& y = g.node(Val{self}).value;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      const double* yr = y.row(r);
      const double* grow = gr.row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < y.cols(); ++c) dot += grow[c] * yr[c];
      double* garow = ga.row(r);
      for (std::size_t c = 0; c < y.cols(); ++c)
        garow[c] += yr[c] * (grow[c] - dot);
    }
  };
  return push(std::move(n), "softmax_rows");
}

Val Graph::layer_norm(Val a, Val gain, Val bias) {
  const Tensor& ta = value(a);
  const Tensor& tg = value(gain);
  const Tensor& tb = value(bias);
  check_shape(
      tg.rows() == 1 && tg.cols() == ta.cols() && tb.rows() == 1 &&
          tb.cols() == ta.cols(),
      "layer_norm: gain/bias must be (1, cols)");
  std::size_t m = ta.rows(), d = ta.cols();
  auto xhat = std::make_shared<Tensor>(m, d);
  auto inv_sigma = std::make_shared<std::vector<double>>(m, 0.0);
  Node n;
  n.value = Tensor::zeros(m, d);
  for (std::size_t r = 0; r < m; ++r) {
    const double* x = ta.row(r);
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      double dd = x[c] - mean;
      var += dd * dd;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_sigma)[r] = inv;
    double* xh = xhat->row(r);
    double* out = n.value.row(r);
    for (std::size_t c = 0; c < d; ++c) {
      xh[c] = (x[c] - mean) * inv;
      out[c] = tg.at(0, c) * xh[c] + tb.at(0, c);
    }
  }
  n.parents = {a.id, gain.id, bias.id};
  n.back = [a, gain, bias, xhat, inv_sigma](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& tg = g.value(gain);
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gg = g.grad_ref(gain.id);
    Tensor& gb = g.grad_ref(bias.id);
    std::size_t m = gr.rows(), d = gr.cols();
    for (std::size_t r = 0; r < m; ++r) {
      const double* dy = gr.row(r);
      const double* xh = xhat->row(r);
      double inv = (*inv_sigma)[r];
      double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        double dxh = dy[c] * tg.at(0, c);
        mean_dxhat += dxh;
        mean_dxhat_xhat += dxh * xh[c];
        gg.at(0, c) += dy[c] * xh[c];
        gb.at(0, c) += dy[c];
      }
      mean_dxhat /= static_cast<double>(d);
      mean_dxhat_xhat /= static_cast<double>(d);
      double* garow = ga.row(r);
      for (std::size_t c = 0; c < d; ++c) {
        double dxh = dy[c] * tg.at(0, c);
        garow[c] += inv * (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat);
      }
    }
  };
  return push(std::move(n), "layer_norm");
}

Val Graph::mean_rows(Val a) {
  const Tensor& ta = value(a);
  check_shape(ta.rows() > 0, "mean_rows: empty input");
  Node n;
  n.value = Tensor::zeros(1, ta.cols());
  for (std::size_t r = 0; r < ta.rows(); ++r)
    for (std::size_t c = 0; c < ta.cols(); ++c)
      n.value.at(0, c) += ta.at(r, c);
  double invm = 1.0 / static_cast<double>(ta.rows());
  for (double& x : n.value.values()) x *= invm;
  n.parents = {a.id};
  n.back = [a, invm](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c)
        ga.at(r, c) += gr.at(0, c) * invm;
  };
  return push(std::move(n), "mean_rows");
}

Val Graph::sum_all(Val a) {
  const Tensor& ta = value(a);
  double s = 0.0;
  for (double x : ta.values()) s += x;
  Node n;
  n.value = Tensor::scalar(s);
  n.parents = {a.id};
  n.back = [a](Graph& g, int self) {
    double gs = g.node(Val{self}).gradbuf.at(0, 0);
    Tensor& ga = g.grad_ref(a.id);
    for (double& x : ga.values()) x += gs;
  };
  return push(std::move(n), "sum_all");
}

Val Graph::embedding_rows(Val table, const std::vector<int>& ids) {
  const Tensor& tt = value(table);
  Node n;
  n.value = Tensor::zeros(ids.size(), tt.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= tt.rows())
      throw std::invalid_argument("embedding_rows: id out of range");
    const double* src = tt.row(static_cast<std::size_t>(ids[i]));
    std::copy(src, src + tt.cols(), n.value.row(i));
  }
  n.parents = {table.id};
  n.back = [table, ids](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& gt = g.grad_ref(table.id);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = gt.row(static_cast<std::size_t>(ids[i]));
      const double* src = gr.row(i);
      for (std::size_t c = 0; c < gr.cols(); ++c) dst[c] += src[c];
    }
  };
  return push(std::move(n), "embedding_rows");
}

Val Graph::concat_rows(Val a, Val b) {
  const Tensor& ta = value(a);
  const Tensor& tb = value(b);
  check_shape(ta.cols() == tb.cols(), "concat_rows: column mismatch");
  Node n;
  n.value = Tensor::zeros(ta.rows() + tb.rows(), ta.cols());
  std::copy(ta.values().begin(), ta.values().end(), n.value.values().begin());
  std::copy(tb.values().begin(), tb.values().end(),
            n.value.values().begin() + static_cast<std::ptrdiff_t>(ta.size()));
  n.parents = {a.id, b.id};
  n.back = [a, b](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gb = g.grad_ref(b.id);
    std::size_t asz = ga.size();
    for (std::size_t i = 0; i < asz; ++i) ga.values()[i] += gr.values()[i];
    for (std::size_t i = 0; i < gb.size(); ++i)
      gb.values()[i] += gr.values()[asz + i];
  };
  return push(std::move(n), "concat_rows");
}

Val Graph::slice_cols(Val a, std::size_t from, std::size_t to) {
  const Tensor& ta = value(a);
  check_shape(from < to && to <= ta.cols(), "slice_cols: bad range");
  Node n;
  n.value = Tensor::zeros(ta.rows(), to - from);
  for (std::size_t r = 0; r < ta.rows(); ++r)
    std::copy(ta.row(r) + from, ta.row(r) + to, n.value.row(r));
  n.parents = {a.id};
  n.back = [a, from](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t r = 0; r < gr.rows(); ++r) {
      const double* src = gr.row(r);
      double* dst = ga.row(r) + from;
      for (std::size_t c = 0; c < gr.cols(); ++c) dst[c] += src[c];
    }
  };
  return push(std::move(n), "slice_cols");
}

Val Graph::concat_cols(const std::vector<Val>& parts) {
  check_shape(!parts.empty(), "concat_cols: no parts");
  std::size_t rows = value(parts[0]).rows();
  std::size_t cols = 0;
  for (Val p : parts) {
    check_shape(value(p).rows() == rows, "concat_cols: row mismatch");
    cols += value(p).cols();
  }
  Node n;
  n.value = Tensor::zeros(rows, cols);
  std::size_t at = 0;
  std::vector<std::size_t> offsets;
  for (Val p : parts) {
    offsets.push_back(at);
    const Tensor& tp = value(p);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(tp.row(r), tp.row(r) + tp.cols(), n.value.row(r) + at);
    at += tp.cols();
  }
  for (Val p : parts) n.parents.push_back(p.id);
  std::vector<Val> ps = parts;
  n.back = [ps, offsets](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    for (std::size_t k = 0; k < ps.size(); ++k) {
      Tensor& gp = g.grad_ref(ps[k].id);
      for (std::size_t r = 0; r < gp.rows(); ++r) {
        const double* src = gr.row(r) + offsets[k];
        double* dst = gp.row(r);
        for (std::size_t c = 0; c < gp.cols(); ++c) dst[c] += src[c];
      }
    }
  };
  return push(std::move(n), "concat_cols");
}

Val Graph::gather_rows(Val a, const std::vector<std::size_t>& idx) {
  const Tensor& ta = value(a);
  Node n;
  n.value = Tensor::zeros(idx.size(), ta.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    check_shape(idx[i] < ta.rows(), "gather_rows: index out of range");
    std::copy(ta.row(idx[i]), ta.row(idx[i]) + ta.cols(), n.value.row(i));
  }
  n.parents = {a.id};
  n.back = [a, idx](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* src = gr.row(i);
      double* dst = ga.row(idx[i]);
      for (std::size_t c = 0; c < gr.cols(); ++c) dst[c] += src[c];
    }
  };
  return push(std::move(n), "gather_rows");
}

Val Graph::scatter_rows(Val a, const std::vector<std::size_t>& idx,
                        std::size_t out_rows) {
  const Tensor& ta = value(a);
  check_shape(idx.size() == ta.rows(), "scatter_rows: index/row mismatch");
  Node n;
  n.value = Tensor::zeros(out_rows, ta.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    check_shape(idx[i] < out_rows, "scatter_rows: index out of range");
    const double* src = ta.row(i);
    double* dst = n.value.row(idx[i]);
    for (std::size_t c = 0; c < ta.cols(); ++c) dst[c] += src[c];
  }
  n.parents = {a.id};
  n.back = [a, idx](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const double* src = gr.row(idx[i]);
      double* dst = ga.row(i);
      for (std::size_t c = 0; c < ga.cols(); ++c) dst[c] += src[c];
    }
  };
  return push(std::move(n), "scatter_rows");
}

Val Graph::gather_cols_per_row(Val a,
                               const std::vector<std::vector<int>>& cols) {
  const Tensor& ta = value(a);
  check_shape(cols.size() == ta.rows(), "gather_cols_per_row: row mismatch");
  std::size_t k = cols.empty() ? 0 : cols[0].size();
  Node n;
  n.value = Tensor::zeros(cols.size(), k);
  for (std::size_t r = 0; r < cols.size(); ++r) {
    check_shape(cols[r].size() == k, "gather_cols_per_row: ragged indices");
    for (std::size_t j = 0; j < k; ++j) {
      int c = cols[r][j];
      check_shape(c >= 0 && static_cast<std::size_t>(c) < ta.cols(),
                  "gather_cols_per_row: index out of range");
      n.value.at(r, j) = ta.at(r, static_cast<std::size_t>(c));
    }
  }
  n.parents = {a.id};
  n.back = [a, cols](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t r = 0; r < cols.size(); ++r)
      for (std::size_t j = 0; j < cols[r].size(); ++j)
        ga.at(r, static_cast<std::size_t>(cols[r][j])) += gr.at(r, j);
  };
  return push(std::move(n), "gather_cols_per_row");
}

Val Graph::gather_cells(Val a, const std::vector<std::size_t>& r,
                        const std::vector<std::size_t>& c) {
  const Tensor& ta = value(a);
  check_shape(r.size() == c.size(), "gather_cells: index length mismatch");
  Node n;
  n.value = Tensor::zeros(r.size(), 1);
  for (std::size_t i = 0; i < r.size(); ++i) {
    check_shape(r[i] < ta.rows() && c[i] < ta.cols(),
                "gather_cells: index out of range");
    n.value.at(i, 0) = ta.at(r[i], c[i]);
  }
  n.parents = {a.id};
  n.back = [a, r, c](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    Tensor& ga = g.grad_ref(a.id);
    for (std::size_t i = 0; i < r.size(); ++i)
      ga.at(r[i], c[i]) += gr.at(i, 0);
  };
  return push(std::move(n), "gather_cells");
}

Val Graph::rowwise_scale(Val a, Val w) {
  const Tensor& ta = value(a);
  const Tensor& tw = value(w);
  check_shape(tw.rows() == ta.rows() && tw.cols() == 1,
              "rowwise_scale: w must be (rows, 1)");
  Node n;
  n.value = ta;
  for (std::size_t r = 0; r < ta.rows(); ++r) {
    double s = tw.at(r, 0);
    double* out = n.value.row(r);
    for (std::size_t c = 0; c < ta.cols(); ++c) out[c] *= s;
  }
  n.parents = {a.id, w.id};
  n.back = [a, w](Graph& g, int self) {
    const Tensor& gr = g.node(Val{self}).gradbuf;
    const Tensor& va = g.value(a);
    const Tensor& vw = g.value(w);
    Tensor& ga = g.grad_ref(a.id);
    Tensor& gw = g.grad_ref(w.id);
    for (std::size_t r = 0; r < gr.rows(); ++r) {
      double s = vw.at(r, 0);
      const double* grow = gr.row(r);
      const double* arow = va.row(r);
      double* garow = ga.row(r);
      double acc = 0.0;
      for (std::size_t c = 0; c < gr.cols(); ++c) {
        garow[c] += grow[c] * s;
        acc += grow[c] * arow[c];
      }
      gw.at(r, 0) += acc;
    }
  };
  return push(std::move(n), "rowwise_scale");
}

Val Graph::nll_sum(Val logits,
                   const std::vector<std::pair<std::size_t, int>>& targets) {
  const Tensor& tl = value(logits);
  double total = 0.0;
  for (const auto& [r, t] : targets) {
    check_shape(r < tl.rows() && t >= 0 &&
                    static_cast<std::size_t>(t) < tl.cols(),
                "nll_sum: target out of range");
    const double* row = tl.row(r);
    double mx = row[0];
    for (std::size_t c = 1; c < tl.cols(); ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < tl.cols(); ++c) sum += std::exp(row[c] - mx);
    total += mx + std::log(sum) - row[static_cast<std::size_t>(t)];
  }
  Node n;
  n.value = Tensor::scalar(total);
  n.parents = {logits.id};
  n.back = [logits, targets](Graph& g, int self) {
    double gs = g.node(Val{self}).gradbuf.at(0, 0);
    const Tensor& vl = g.value(logits);
    Tensor& gl = g.grad_ref(logits.id);
    for (const auto& [r, t] : targets) {
      const double* row = vl.row(r);
      double mx = row[0];
      for (std::size_t c = 1; c < vl.cols(); ++c) mx = std::max(mx, row[c]);
      double sum = 0.0;
      for (std::size_t c = 0; c < vl.cols(); ++c) sum += std::exp(row[c] - mx);
      double* grow = gl.row(r);
      for (std::size_t c = 0; c < vl.cols(); ++c) {
        double p = std::exp(row[c] - mx) / sum;
        grow[c] += gs * (p - (static_cast<std::size_t>(t) == c ? 1.0 : 0.0));
      }
    }
  };
  return push(std::move(n), "nll_sum");
}

void Graph::backward(Val loss) {
  if (loss.id < 0 || static_cast<std::size_t>(loss.id) >= nodes_.size())
    throw std::invalid_argument("backward: invalid loss node");
  if (node(loss).value.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar");
  if (backward_done_)
    throw std::logic_error("backward: tape already consumed");
  backward_done_ = true;

  // Mark ancestors of the loss.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<int> stack = {loss.id};
  reachable[static_cast<std::size_t>(loss.id)] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int p : nodes_[static_cast<std::size_t>(id)].parents) {
      if (!reachable[static_cast<std::size_t>(p)]) {
        reachable[static_cast<std::size_t>(p)] = 1;
        stack.push_back(p);
      }
    }
  }

  grad_ref(loss.id).at(0, 0) += 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!reachable[static_cast<std::size_t>(id)] || !n.back) continue;
    if (n.gradbuf.size() == 0) continue;  // no contribution flowed here
    n.back(*this, id);
  }

  // Fold leaf gradients into their parameter tensors.
  for (Node& n : nodes_) {
    if (!n.bound || !n.bound->requires_grad || n.gradbuf.size() == 0) continue;
    n.bound->ensure_grad();
    for (std::size_t i = 0; i < n.gradbuf.size(); ++i)
      n.bound->grad[i] += n.gradbuf.values()[i];
  }
}

}  // namespace micromoe
