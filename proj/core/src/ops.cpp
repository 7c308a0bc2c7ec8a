#include "pivit/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

#include "pivit/error.hpp"

namespace pivit::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat as_mat(const Tensor& t) {
  return ConstMapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
MapMat as_mat(Tensor& t) {
  return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

Shape as2d(const Tensor& t) { return {t.rows(), t.cols()}; }

bool wants(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
Tensor& pgrad(Node& n, std::size_t i) { return n.parents[i]->ensure_grad(); }
const Tensor& pval(const Node& n, std::size_t i) { return n.parents[i]->value; }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.value().size() != b.value().size() || a.value().cols() != b.value().cols())
    throw ContractError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                        shape_string(b.shape()));
}

Var scalar_result(double v, std::vector<Var> parents, std::function<void(Node&)> fn) {
  if (!std::isfinite(v)) throw NumericError("loss evaluated to a non-finite value");
  return make_result(Tensor::scalar(v), std::move(parents), std::move(fn));
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows())
    throw ContractError("matmul: inner dimensions differ " + shape_string(a.shape()) + " x " +
                        shape_string(b.shape()));
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  return make_result(std::move(out), {a, b}, [](Node& n) {
    auto g = as_mat(static_cast<const Tensor&>(n.grad));
    if (wants(n, 0)) as_mat(pgrad(n, 0)).noalias() += g * as_mat(pval(n, 1)).transpose();
    if (wants(n, 1)) as_mat(pgrad(n, 1)).noalias() += as_mat(pval(n, 0)).transpose() * g;
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t p = 0; p < 2; ++p)
      if (wants(n, p)) {
        Tensor& g = pgrad(n, p);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
      }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (wants(n, 0)) {
      Tensor& g = pgrad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants(n, 1)) {
      Tensor& g = pgrad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_result(std::move(out), {a, b}, [](Node& n) {
    if (wants(n, 0)) {
      Tensor& g = pgrad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pval(n, 1)[i];
    }
    if (wants(n, 1)) {
      Tensor& g = pgrad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pval(n, 0)[i];
    }
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (bias.value().size() != cols)
    throw ContractError("add_bias: bias width " + std::to_string(bias.value().size()) + " vs " +
                        std::to_string(cols));
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += bias.value()[c];
  return make_result(std::move(out), {x, bias}, [cols](Node& n) {
    if (wants(n, 0)) {
      Tensor& g = pgrad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (wants(n, 1)) {
      Tensor& g = pgrad(n, 1);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % cols] += n.grad[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= s;
  return make_result(std::move(out), {x}, [s](Node& n) {
    Tensor& g = pgrad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * n.grad[i];
  });
}

Var sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return make_result(Tensor::scalar(total), {x}, [](Node& n) {
    Tensor& g = pgrad(n, 0);
    const double d = n.grad[0];
    for (auto& v : g.storage()) v += d;
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& n) {
    Tensor& g = pgrad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var gelu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return make_result(std::move(out), {x}, [](Node& n) {
    Tensor& g = pgrad(n, 0);
    const Tensor& xv = pval(n, 0);
    const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      g[i] += n.grad[i] * (cdf + v * pdf);
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {x}, [](Node& n) {
    Tensor& g = pgrad(n, 0);
    const Tensor& xv = pval(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) g[i] += n.grad[i];
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols)
    throw ContractError("layer_norm: affine width mismatch");
  Tensor out(xv.shape());
  Tensor xhat(as2d(xv));
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mean) * (row[c] - mean);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (row[c] - mean) * inv_std[r];
      xhat[r * cols + c] = h;
      out[r * cols + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                       const Tensor& gv = pval(n, 1);
                       if (wants(n, 1)) {
                         Tensor& gg = pgrad(n, 1);
                         for (std::size_t i = 0; i < n.grad.size(); ++i) gg[i % cols] += n.grad[i] * xhat[i];
                       }
                       if (wants(n, 2)) {
                         Tensor& gb = pgrad(n, 2);
                         for (std::size_t i = 0; i < n.grad.size(); ++i) gb[i % cols] += n.grad[i];
                       }
                       if (!wants(n, 0)) return;
                       Tensor& gx = pgrad(n, 0);
                       const double inv_n = 1.0 / static_cast<double>(cols);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double s1 = 0.0, s2 = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double dh = n.grad[r * cols + c] * gv[c];
                           s1 += dh;
                           s2 += dh * xhat[r * cols + c];
                         }
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double dh = n.grad[r * cols + c] * gv[c];
                           gx[r * cols + c] += inv_std[r] * (dh - inv_n * s1 - xhat[r * cols + c] * inv_n * s2);
                         }
                       }
                     });
}

Var gather_rows(const Var& x, const std::vector<std::size_t>& index) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  Tensor out = Tensor::matrix(index.size(), cols);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] == kZeroRow) continue;
    if (index[i] >= xv.rows()) throw ContractError("gather_rows: row index out of range");
    std::copy_n(xv.data() + index[i] * cols, cols, out.data() + i * cols);
  }
  return make_result(std::move(out), {x}, [index, cols](Node& n) {
    Tensor& g = pgrad(n, 0);
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] == kZeroRow) continue;
      for (std::size_t c = 0; c < cols; ++c) g[index[i] * cols + c] += n.grad[i * cols + c];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw ContractError("concat_rows: column mismatch");
    rows += p.value().rows();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.value().storage().begin(), p.value().storage().end(), out.data() + offset);
    offset += p.value().size();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      const std::size_t sz = n.parents[p]->value.size();
      if (wants(n, p)) {
        Tensor& g = pgrad(n, p);
        for (std::size_t i = 0; i < sz; ++i) g[i] += n.grad[off + i];
      }
      off += sz;
    }
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  const std::size_t rows = parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw ContractError("concat_cols: row mismatch");
    widths.push_back(p.value().cols());
    cols += widths.back();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t c0 = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[p], widths[p], out.data() + r * cols + c0);
    c0 += widths[p];
  }
  return make_result(std::move(out), parts, [rows, cols, widths](Node& n) {
    std::size_t c0 = 0;
    for (std::size_t p = 0; p < n.parents.size(); ++p) {
      if (wants(n, p)) {
        Tensor& g = pgrad(n, p);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[p]; ++c) g[r * widths[p] + c] += n.grad[r * cols + c0 + c];
      }
      c0 += widths[p];
    }
  });
}

Var mean_rows(const Var& x) {
  std::vector<std::size_t> all(x.value().rows());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  return segment_mean_rows(x, {all});
}

Var segment_mean_rows(const Var& x, const RowGroups& groups) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  Tensor out = Tensor::matrix(groups.size(), cols);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) throw ContractError("segment_mean_rows: empty group");
    const double w = 1.0 / static_cast<double>(groups[g].size());
    for (std::size_t r : groups[g]) {
      if (r >= xv.rows()) throw ContractError("segment_mean_rows: row index out of range");
      for (std::size_t c = 0; c < cols; ++c) out[g * cols + c] += w * xv[r * cols + c];
    }
  }
  return make_result(std::move(out), {x}, [groups, cols](Node& n) {
    Tensor& gx = pgrad(n, 0);
    for (std::size_t g = 0; g < groups.size(); ++g) {
      const double w = 1.0 / static_cast<double>(groups[g].size());
      for (std::size_t r : groups[g])
        for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += w * n.grad[g * cols + c];
    }
  });
}

Var grouped_attention(const Var& qkv, const RowGroups& groups, std::size_t heads, std::vector<Tensor>* capture) {
  const Tensor& in = qkv.value();
  const std::size_t rows = in.rows();
  const std::size_t width = in.cols();
  if (width % 3 != 0) throw ContractError("grouped_attention: qkv width must be a multiple of 3");
  const std::size_t d = width / 3;
  if (heads == 0 || d % heads != 0) throw ContractError("grouped_attention: width not divisible by heads");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<double> weight(rows, 0.0);
  for (const auto& g : groups)
    for (std::size_t r : g) {
      if (r >= rows) throw ContractError("grouped_attention: row index out of range");
      weight[r] += 1.0;
    }
  for (auto& w : weight) w = w > 0.0 ? 1.0 / w : 0.0;

  Tensor out = Tensor::matrix(rows, d);
  std::vector<Tensor> probs;
  probs.reserve(groups.size() * heads);
  for (const auto& g : groups) {
    const std::size_t n = g.size();
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
      Tensor p = Tensor::matrix(n, n);
      for (std::size_t a = 0; a < n; ++a) {
        const double* q = in.data() + g[a] * width + qo;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t b = 0; b < n; ++b) {
          const double* k = in.data() + g[b] * width + ko;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q[c] * k[c];
          p(a, b) = s * inv_sqrt;
          mx = std::max(mx, p(a, b));
        }
        double z = 0.0;
        for (std::size_t b = 0; b < n; ++b) z += (p(a, b) = std::exp(p(a, b) - mx));
        for (std::size_t b = 0; b < n; ++b) p(a, b) /= z;
        double* o = out.data() + g[a] * d + h * dh;
        for (std::size_t b = 0; b < n; ++b) {
          const double* v = in.data() + g[b] * width + vo;
          const double pw = p(a, b) * weight[g[a]];
          for (std::size_t c = 0; c < dh; ++c) o[c] += pw * v[c];
        }
      }
      if (capture) capture->push_back(p);
      probs.push_back(std::move(p));
    }
  }

  return make_result(
      std::move(out), {qkv},
      [groups, heads, d, dh, width, inv_sqrt, weight = std::move(weight), probs = std::move(probs)](Node& node) {
        const Tensor& in = pval(node, 0);
        Tensor& gin = pgrad(node, 0);
        std::size_t pi = 0;
        std::vector<double> go, gp;
        for (const auto& g : groups) {
          const std::size_t n = g.size();
          for (std::size_t h = 0; h < heads; ++h, ++pi) {
            const Tensor& p = probs[pi];
            const std::size_t qo = h * dh, ko = d + h * dh, vo = 2 * d + h * dh;
            gp.assign(n, 0.0);
            for (std::size_t a = 0; a < n; ++a) {
              const double w = weight[g[a]];
              const double* gout = node.grad.data() + g[a] * d + h * dh;
              // dP[a,b] = dO[a] . v[b]; dV[b] += P[a,b] dO[a]
              double dot_pg = 0.0;
              for (std::size_t b = 0; b < n; ++b) {
                const double* v = in.data() + g[b] * width + vo;
                double* gv = gin.data() + g[b] * width + vo;
                double s = 0.0;
                for (std::size_t c = 0; c < dh; ++c) {
                  s += w * gout[c] * v[c];
                  gv[c] += p(a, b) * w * gout[c];
                }
                gp[b] = s;
                dot_pg += p(a, b) * s;
              }
              const double* q = in.data() + g[a] * width + qo;
              double* gq = gin.data() + g[a] * width + qo;
              for (std::size_t b = 0; b < n; ++b) {
                const double ds = p(a, b) * (gp[b] - dot_pg) * inv_sqrt;
                if (ds == 0.0) continue;
                const double* k = in.data() + g[b] * width + ko;
                double* gk = gin.data() + g[b] * width + ko;
                for (std::size_t c = 0; c < dh; ++c) {
                  gq[c] += ds * k[c];
                  gk[c] += ds * q[c];
                }
              }
            }
          }
        }
      });
}

double log_sum_exp(const double* x, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, x[i]);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) z += std::exp(x[i] - mx);
  return mx + std::log(z);
}

std::vector<double> softmax(const std::vector<double>& logits) {
  const double lse = log_sum_exp(logits.data(), logits.size());
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = std::exp(logits[i] - lse);
  return p;
}

Var cross_entropy(const Var& logits, std::size_t label) {
  const Tensor& z = logits.value();
  if (!z.all_finite()) throw NumericError("cross_entropy: non-finite logits");
  if (label >= z.size()) throw ContractError("cross_entropy: label out of range");
  const double lse = log_sum_exp(z.data(), z.size());
  return scalar_result(lse - z[label], {logits}, [label, lse](Node& n) {
    Tensor& g = pgrad(n, 0);
    const Tensor& z = pval(n, 0);
    for (std::size_t i = 0; i < z.size(); ++i)
      g[i] += n.grad[0] * (std::exp(z[i] - lse) - (i == label ? 1.0 : 0.0));
  });
}

Var soft_cross_entropy(const Var& logits, const Tensor& target_probs) {
  const Tensor& z = logits.value();
  if (!z.all_finite()) throw NumericError("soft_cross_entropy: non-finite logits");
  if (target_probs.size() != z.size()) throw ContractError("soft_cross_entropy: class count mismatch");
  const double lse = log_sum_exp(z.data(), z.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) loss -= target_probs[i] * (z[i] - lse);
  return scalar_result(loss, {logits}, [target_probs, lse](Node& n) {
    Tensor& g = pgrad(n, 0);
    const Tensor& z = pval(n, 0);
    double mass = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) mass += target_probs[i];
    for (std::size_t i = 0; i < z.size(); ++i)
      g[i] += n.grad[0] * (mass * std::exp(z[i] - lse) - target_probs[i]);
  });
}

Var bce_with_logits(const Var& logits, const Tensor& targets, double divisor) {
  const Tensor& z = logits.value();
  if (!z.all_finite()) throw NumericError("bce_with_logits: non-finite logits");
  if (targets.size() != z.size()) throw ContractError("bce_with_logits: target shape mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x = z[i];
    loss += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return scalar_result(loss / divisor, {logits}, [targets, divisor](Node& n) {
    Tensor& g = pgrad(n, 0);
    const Tensor& z = pval(n, 0);
    const double s = n.grad[0] / divisor;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double sig = z[i] >= 0 ? 1.0 / (1.0 + std::exp(-z[i])) : std::exp(z[i]) / (1.0 + std::exp(z[i]));
      g[i] += s * (sig - targets[i]);
    }
  });
}

Var squared_error(const Var& pred, const Tensor& target, double divisor) {
  const Tensor& p = pred.value();
  if (!p.all_finite()) throw NumericError("squared_error: non-finite prediction");
  if (target.size() != p.size()) throw ContractError("squared_error: shape mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) loss += (p[i] - target[i]) * (p[i] - target[i]);
  return scalar_result(loss / divisor, {pred}, [target, divisor](Node& n) {
    Tensor& g = pgrad(n, 0);
    const Tensor& p = pval(n, 0);
    const double s = 2.0 * n.grad[0] / divisor;
    for (std::size_t i = 0; i < p.size(); ++i) g[i] += s * (p[i] - target[i]);
  });
}

Var masked_squared_error(const Var& pred, const Tensor& target, const Tensor& mask, double divisor) {
  const Tensor& p = pred.value();
  if (!p.all_finite()) throw NumericError("masked_squared_error: non-finite prediction");
  if (target.size() != p.size() || mask.size() != p.size())
    throw ContractError("masked_squared_error: shape mismatch");
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (mask[i] != 0.0) loss += (p[i] - target[i]) * (p[i] - target[i]);
  return scalar_result(loss / divisor, {pred}, [target, mask, divisor](Node& n) {
    Tensor& g = pgrad(n, 0);
    const Tensor& p = pval(n, 0);
    const double s = 2.0 * n.grad[0] / divisor;
    for (std::size_t i = 0; i < p.size(); ++i)
      if (mask[i] != 0.0) g[i] += s * (p[i] - target[i]);
  });
}

}  // namespace pivit::nn
