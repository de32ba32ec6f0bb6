#include "clkit/tape.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace clkit {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

// C += A * B, shapes [m,k] [k,n] [m,n].
void mm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
            std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C += A * B^T, shapes [m,k] [n,k] [m,n].
void mm_nt_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// C += A^T * B, shapes [m,k] [m,n] [k,n].
void mm_tn_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
               std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

void require(bool cond, const char* what) {
  if (!cond) throw std::invalid_argument(std::string("Tape: ") + what);
}

}  // namespace

ValueRef Tape::param(std::size_t entry_id) {
  const ParamEntry& e = store_->entry(entry_id);
  Node n;
  n.op = Op::kParam;
  n.entry_id = entry_id;
  auto vals = store_->values(entry_id);
  n.value = Tensor(e.shape, std::vector<double>(vals.begin(), vals.end()));
  return push(std::move(n));
}

ValueRef Tape::constant(Tensor value) {
  Node n;
  n.op = Op::kConst;
  n.value = std::move(value);
  return push(std::move(n));
}

ValueRef Tape::matmul(ValueRef a, ValueRef b) {
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  require(av.shape().size() == 2 && bv.shape().size() == 2, "matmul needs 2-D operands");
  require(av.cols() == bv.rows(), "matmul inner-dimension mismatch");
  Node n;
  n.op = Op::kMatMul;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor({av.rows(), bv.cols()});
  mm_acc(av.data(), bv.data(), n.value.data(), av.rows(), av.cols(), bv.cols());
  return push(std::move(n));
}

ValueRef Tape::matmul_nt(ValueRef a, ValueRef b) {
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  require(av.shape().size() == 2 && bv.shape().size() == 2, "matmul_nt needs 2-D operands");
  require(av.cols() == bv.cols(), "matmul_nt inner-dimension mismatch");
  Node n;
  n.op = Op::kMatMulNT;
  n.a = a.id;
  n.b = b.id;
  n.value = Tensor({av.rows(), bv.rows()});
  mm_nt_acc(av.data(), bv.data(), n.value.data(), av.rows(), av.cols(), bv.rows());
  return push(std::move(n));
}

ValueRef Tape::add(ValueRef a, ValueRef b) {
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  require(av.same_shape(bv), "add shape mismatch");
  Node n;
  n.op = Op::kAdd;
  n.a = a.id;
  n.b = b.id;
  n.value = av;
  for (std::size_t i = 0; i < bv.size(); ++i) n.value[i] += bv[i];
  return push(std::move(n));
}

ValueRef Tape::add_bias(ValueRef mat, ValueRef bias) {
  const Tensor& mv = node(mat).value;
  const Tensor& bv = node(bias).value;
  require(mv.shape().size() == 2, "add_bias needs a 2-D matrix");
  require(bv.size() == mv.cols(), "add_bias width mismatch");
  Node n;
  n.op = Op::kAddBias;
  n.a = mat.id;
  n.b = bias.id;
  n.value = mv;
  for (std::size_t r = 0; r < mv.rows(); ++r) {
    for (std::size_t c = 0; c < mv.cols(); ++c) n.value.at2(r, c) += bv[c];
  }
  return push(std::move(n));
}

ValueRef Tape::mul(ValueRef a, ValueRef b) {
  const Tensor& av = node(a).value;
  const Tensor& bv = node(b).value;
  require(av.same_shape(bv), "mul shape mismatch");
  Node n;
  n.op = Op::kMul;
  n.a = a.id;
  n.b = b.id;
  n.value = av;
  for (std::size_t i = 0; i < bv.size(); ++i) n.value[i] *= bv[i];
  return push(std::move(n));
}

ValueRef Tape::scale(ValueRef a, double s) {
  Node n;
  n.op = Op::kScale;
  n.a = a.id;
  n.scalar = s;
  n.value = node(a).value;
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= s;
  return push(std::move(n));
}

ValueRef Tape::tanh_act(ValueRef a) {
  Node n;
  n.op = Op::kTanh;
  n.a = a.id;
  n.value = node(a).value;
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::tanh(n.value[i]);
  return push(std::move(n));
}

ValueRef Tape::gelu(ValueRef a) {
  Node n;
  n.op = Op::kGelu;
  n.a = a.id;
  n.value = node(a).value;
  for (std::size_t i = 0; i < n.value.size(); ++i) {
    double x = n.value[i];
    n.value[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  return push(std::move(n));
}

ValueRef Tape::dropout(ValueRef a, double rate) {
  if (rate <= 0.0 || dropout_rng_ == nullptr) return a;
  require(rate < 1.0, "dropout rate must be < 1");
  Node n;
  n.op = Op::kDropout;
  n.a = a.id;
  const Tensor& av = node(a).value;
  n.aux = Tensor(av.shape());
  double keep = 1.0 - rate;
  for (std::size_t i = 0; i < n.aux.size(); ++i) {
    n.aux[i] = dropout_rng_->uniform01() < keep ? 1.0 / keep : 0.0;
  }
  n.value = av;
  for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] *= n.aux[i];
  return push(std::move(n));
}

ValueRef Tape::slice_cols(ValueRef a, std::size_t col0, std::size_t ncols) {
  const Tensor& av = node(a).value;
  require(av.shape().size() == 2, "slice_cols needs a 2-D matrix");
  require(col0 + ncols <= av.cols(), "slice_cols out of range");
  Node n;
  n.op = Op::kSliceCols;
  n.a = a.id;
  n.col0 = col0;
  n.value = Tensor({av.rows(), ncols});
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < ncols; ++c) n.value.at2(r, c) = av.at2(r, col0 + c);
  }
  return push(std::move(n));
}

ValueRef Tape::concat_cols(const std::vector<ValueRef>& parts) {
  require(!parts.empty(), "concat_cols needs at least one part");
  std::size_t rows = node(parts[0]).value.rows();
  std::size_t total = 0;
  for (ValueRef p : parts) {
    require(node(p).value.rows() == rows, "concat_cols row mismatch");
    total += node(p).value.cols();
  }
  Node n;
  n.op = Op::kConcatCols;
  n.value = Tensor({rows, total});
  for (ValueRef p : parts) n.inputs.push_back(p.id);
  std::size_t at = 0;
  for (ValueRef p : parts) {
    const Tensor& pv = node(p).value;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) n.value.at2(r, at + c) = pv.at2(r, c);
    }
    at += pv.cols();
  }
  return push(std::move(n));
}

ValueRef Tape::embed_rows(ValueRef table, std::vector<int> ids) {
  const Tensor& tv = node(table).value;
  require(tv.shape().size() == 2, "embed_rows needs a 2-D table");
  for (int id : ids) {
    require(id >= 0 && static_cast<std::size_t>(id) < tv.rows(), "embed_rows id out of range");
  }
  Node n;
  n.op = Op::kEmbedRows;
  n.a = table.id;
  n.ids = std::move(ids);
  n.value = Tensor({n.ids.size(), tv.cols()});
  for (std::size_t r = 0; r < n.ids.size(); ++r) {
    const double* src = tv.data() + static_cast<std::size_t>(n.ids[r]) * tv.cols();
    std::copy(src, src + tv.cols(), n.value.data() + r * tv.cols());
  }
  return push(std::move(n));
}

ValueRef Tape::sum_all(ValueRef a) {
  Node n;
  n.op = Op::kSumAll;
  n.a = a.id;
  double acc = 0.0;
  for (double v : node(a).value.values()) acc += v;
  n.value = Tensor({1}, {acc});
  return push(std::move(n));
}

ValueRef Tape::layer_norm(ValueRef x, ValueRef weight, ValueRef bias, double eps) {
  const Tensor& xv = node(x).value;
  const Tensor& wv = node(weight).value;
  const Tensor& bv = node(bias).value;
  require(xv.shape().size() == 2, "layer_norm needs a 2-D input");
  require(wv.size() == xv.cols() && bv.size() == xv.cols(), "layer_norm width mismatch");
  std::size_t rows = xv.rows(), cols = xv.cols();
  Node n;
  n.op = Op::kLayerNorm;
  n.a = x.id;
  n.b = weight.id;
  n.c = bias.id;
  n.scalar = eps;
  n.value = Tensor({rows, cols});
  n.aux = Tensor({rows, cols});  // normalized rows
  n.aux2.resize(rows);           // 1/sigma per row
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      double d = xr[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    double inv = 1.0 / std::sqrt(var + eps);
    n.aux2[r] = inv;
    for (std::size_t c = 0; c < cols; ++c) {
      double xh = (xr[c] - mean) * inv;
      n.aux.at2(r, c) = xh;
      n.value.at2(r, c) = xh * wv[c] + bv[c];
    }
  }
  return push(std::move(n));
}

ValueRef Tape::causal_softmax(ValueRef scores) {
  const Tensor& sv = node(scores).value;
  require(sv.shape().size() == 2 && sv.rows() == sv.cols(), "causal_softmax needs square scores");
  std::size_t t = sv.rows();
  Node n;
  n.op = Op::kCausalSoftmax;
  n.a = scores.id;
  n.value = Tensor({t, t});
  for (std::size_t r = 0; r < t; ++r) {
    double mx = sv.at2(r, 0);
    for (std::size_t c = 1; c <= r; ++c) mx = std::max(mx, sv.at2(r, c));
    double denom = 0.0;
    for (std::size_t c = 0; c <= r; ++c) {
      double e = std::exp(sv.at2(r, c) - mx);
      n.value.at2(r, c) = e;
      denom += e;
    }
    for (std::size_t c = 0; c <= r; ++c) n.value.at2(r, c) /= denom;
  }
  return push(std::move(n));
}

ValueRef Tape::mean_label_log_prob(ValueRef logits, std::vector<int> labels) {
  const Tensor& lv = node(logits).value;
  require(lv.shape().size() == 2, "mean_label_log_prob needs 2-D logits");
  require(labels.size() == lv.rows(), "one label per logits row required");
  std::size_t rows = lv.rows(), cols = lv.cols();
  std::size_t supervised = 0;
  Node n;
  n.op = Op::kMeanLabelLogProb;
  n.a = logits.id;
  n.aux = Tensor({rows, cols});  // softmax rows (supervised rows only)
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    int y = labels[r];
    if (y < 0) continue;
    require(static_cast<std::size_t>(y) < cols, "label out of class range");
    const double* zr = lv.data() + r * cols;
    double mx = zr[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, zr[c]);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(zr[c] - mx);
    double log_denom = std::log(denom);
    for (std::size_t c = 0; c < cols; ++c) {
      n.aux.at2(r, c) = std::exp(zr[c] - mx) / denom;
    }
    total += (zr[static_cast<std::size_t>(y)] - mx) - log_denom;
    ++supervised;
  }
  require(supervised > 0, "mean_label_log_prob needs at least one supervised row");
  n.ids = std::move(labels);
  n.scalar = static_cast<double>(supervised);
  n.value = Tensor({1}, {total / static_cast<double>(supervised)});
  return push(std::move(n));
}

ValueRef Tape::soft_cross_entropy(ValueRef logits, ValueRef teacher_probs, double temperature) {
  require(temperature > 0.0, "soft_cross_entropy needs temperature > 0");
  const Tensor& lv = node(logits).value;
  const Tensor& qv = node(teacher_probs).value;
  require(lv.same_shape(qv), "soft_cross_entropy shape mismatch");
  std::size_t rows = lv.rows(), cols = lv.cols();
  Node n;
  n.op = Op::kSoftCrossEntropy;
  n.a = logits.id;
  n.b = teacher_probs.id;
  n.scalar = temperature;
  n.aux = Tensor({rows, cols});  // softmax(z/T)
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = lv.data() + r * cols;
    double mx = zr[0] / temperature;
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, zr[c] / temperature);
    double denom = 0.0;
    for (std::size_t c = 0; c < cols; ++c) denom += std::exp(zr[c] / temperature - mx);
    double log_denom = std::log(denom);
    for (std::size_t c = 0; c < cols; ++c) {
      double logp = zr[c] / temperature - mx - log_denom;
      n.aux.at2(r, c) = std::exp(logp);
      total -= qv.at2(r, c) * logp;
    }
  }
  n.value = Tensor({1}, {total / static_cast<double>(rows)});
  return push(std::move(n));
}

void Tape::backward(ValueRef root, std::span<double> param_grad) {
  require(node(root).value.size() == 1, "backward root must be scalar");
  require(param_grad.size() == store_->size(), "param_grad length must equal |theta|");
  ensure_grad(node(root));
  node(root).grad.fill(0.0);
  node(root).grad[0] = 1.0;

  for (std::uint32_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.value.size()) continue;  // not reached from root
    const Tensor& g = n.grad;
    switch (n.op) {
      case Op::kConst:
        break;
      case Op::kParam: {
        const ParamEntry& e = store_->entry(n.entry_id);
        double* out = param_grad.data() + e.offset;
        for (std::size_t i = 0; i < e.size; ++i) out[i] += g[i];
        break;
      }
      case Op::kMatMul: {
        const Tensor& av = nodes_[n.a].value;
        const Tensor& bv = nodes_[n.b].value;
        Tensor& ga = grad_of(n.a);
        Tensor& gb = grad_of(n.b);
        // dA += dY * B^T ; dB += A^T * dY
        mm_nt_acc(g.data(), bv.data(), ga.data(), av.rows(), bv.cols(), av.cols());
        mm_tn_acc(av.data(), g.data(), gb.data(), av.rows(), av.cols(), bv.cols());
        break;
      }
      case Op::kMatMulNT: {
        const Tensor& av = nodes_[n.a].value;
        const Tensor& bv = nodes_[n.b].value;
        Tensor& ga = grad_of(n.a);
        Tensor& gb = grad_of(n.b);
        // Y = A * B^T: dA += dY * B ; dB += dY^T * A
        mm_acc(g.data(), bv.data(), ga.data(), av.rows(), bv.rows(), av.cols());
        mm_tn_acc(g.data(), av.data(), gb.data(), av.rows(), bv.rows(), av.cols());
        break;
      }
      case Op::kAdd: {
        Tensor& ga = grad_of(n.a);
        Tensor& gb = grad_of(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i];
          gb[i] += g[i];
        }
        break;
      }
      case Op::kAddBias: {
        Tensor& ga = grad_of(n.a);
        Tensor& gb = grad_of(n.b);
        std::size_t rows = n.value.rows(), cols = n.value.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            ga.at2(r, c) += g.at2(r, c);
            gb[c] += g.at2(r, c);
          }
        }
        break;
      }
      case Op::kMul: {
        const Tensor& av = nodes_[n.a].value;
        const Tensor& bv = nodes_[n.b].value;
        Tensor& ga = grad_of(n.a);
        Tensor& gb = grad_of(n.b);
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += g[i] * bv[i];
          gb[i] += g[i] * av[i];
        }
        break;
      }
      case Op::kScale: {
        Tensor& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.scalar;
        break;
      }
      case Op::kTanh: {
        Tensor& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - n.value[i] * n.value[i]);
        break;
      }
      case Op::kGelu: {
        const Tensor& xv = nodes_[n.a].value;
        Tensor& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) {
          double x = xv[i];
          double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
          double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
          ga[i] += g[i] * (cdf + x * pdf);
        }
        break;
      }
      case Op::kDropout: {
        Tensor& ga = grad_of(n.a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * n.aux[i];
        break;
      }
      case Op::kSliceCols: {
        Tensor& ga = grad_of(n.a);
        std::size_t rows = n.value.rows(), cols = n.value.cols();
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) ga.at2(r, n.col0 + c) += g.at2(r, c);
        }
        break;
      }
      case Op::kConcatCols: {
        std::size_t rows = n.value.rows();
        std::size_t at = 0;
        for (std::uint32_t pid : n.inputs) {
          Tensor& gp = grad_of(pid);
          std::size_t pc = nodes_[pid].value.cols();
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < pc; ++c) gp.at2(r, c) += g.at2(r, at + c);
          }
          at += pc;
        }
        break;
      }
      case Op::kEmbedRows: {
        Tensor& gt = grad_of(n.a);
        std::size_t cols = n.value.cols();
        for (std::size_t r = 0; r < n.ids.size(); ++r) {
          double* dst = gt.data() + static_cast<std::size_t>(n.ids[r]) * cols;
          const double* src = g.data() + r * cols;
          for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
        }
        break;
      }
      case Op::kSumAll: {
        Tensor& ga = grad_of(n.a);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
        break;
      }
      case Op::kLayerNorm: {
        const Tensor& wv = nodes_[n.b].value;
        Tensor& gx = grad_of(n.a);
        Tensor& gw = grad_of(n.b);
        Tensor& gb = grad_of(n.c);
        std::size_t rows = n.value.rows(), cols = n.value.cols();
        double inv_cols = 1.0 / static_cast<double>(cols);
        for (std::size_t r = 0; r < rows; ++r) {
          double sum_dxh = 0.0, sum_dxh_xh = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            double dy = g.at2(r, c);
            double xh = n.aux.at2(r, c);
            gw[c] += dy * xh;
            gb[c] += dy;
            double dxh = dy * wv[c];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh;
          }
          double inv_sigma = n.aux2[r];
          for (std::size_t c = 0; c < cols; ++c) {
            double dxh = g.at2(r, c) * wv[c];
            double xh = n.aux.at2(r, c);
            gx.at2(r, c) +=
                inv_sigma * (dxh - inv_cols * sum_dxh - xh * inv_cols * sum_dxh_xh);
          }
        }
        break;
      }
      case Op::kCausalSoftmax: {
        Tensor& gs = grad_of(n.a);
        std::size_t t = n.value.rows();
        for (std::size_t r = 0; r < t; ++r) {
          double dot = 0.0;
          for (std::size_t c = 0; c <= r; ++c) dot += g.at2(r, c) * n.value.at2(r, c);
          for (std::size_t c = 0; c <= r; ++c) {
            gs.at2(r, c) += n.value.at2(r, c) * (g.at2(r, c) - dot);
          }
        }
        break;
      }
      case Op::kMeanLabelLogProb: {
        Tensor& gl = grad_of(n.a);
        std::size_t cols = gl.cols();
        double w = g[0] / n.scalar;  // scalar holds supervised row count
        for (std::size_t r = 0; r < n.ids.size(); ++r) {
          int y = n.ids[r];
          if (y < 0) continue;
          for (std::size_t c = 0; c < cols; ++c) {
            double onehot = (static_cast<std::size_t>(y) == c) ? 1.0 : 0.0;
            gl.at2(r, c) += w * (onehot - n.aux.at2(r, c));
          }
        }
        break;
      }
      case Op::kSoftCrossEntropy: {
        const Tensor& qv = nodes_[n.b].value;
        Tensor& gl = grad_of(n.a);
        std::size_t rows = n.value.size() == 1 ? n.aux.rows() : 0;
        std::size_t cols = n.aux.cols();
        double w = g[0] / (static_cast<double>(rows) * n.scalar);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < cols; ++c) {
            gl.at2(r, c) += w * (n.aux.at2(r, c) - qv.at2(r, c));
          }
        }
        break;
      }
    }
  }
}

}  // namespace clkit
