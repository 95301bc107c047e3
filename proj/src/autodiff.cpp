#include "katrec/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "katrec/error.hpp"

namespace katrec::ad {

namespace {

Var make(const char* op, Tensor value, std::vector<Var> inputs, Node::BackwardFn backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = op;
  for (const auto& in : inputs) {
    node->requires_grad = node->requires_grad || in.requires_grad();
    node->inputs.push_back(in.ptr());
  }
  if (node->requires_grad) node->backward = std::move(backward);
  return Var(std::move(node));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  fail(op, "shape mismatch ", shape_string(a), " vs ", shape_string(b));
}

void require_rank(const char* op, const Var& v, std::size_t rank) {
  if (v.value().rank() != rank) {
    fail(op, "expected rank ", rank, ", got shape ", shape_string(v.shape()));
  }
}

// C(m,n) += A(m,k) B(k,n)
void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C(m,n) += A(m,k) B(n,k)^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      c[i * n + j] += acc;
    }
  }
}

// C(m,n) += A(k,m)^T B(k,n)
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

}  // namespace

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "constant";
  return Var(std::move(node));
}

Var Var::parameter(Tensor value, std::string name) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = "parameter";
  node->name = std::move(name);
  node->requires_grad = true;
  return Var(std::move(node));
}

const Tensor* Gradients::find(const Var& v) const {
  auto it = grads_.find(v.node());
  return it == grads_.end() ? nullptr : &it->second;
}

const Tensor& Gradients::at(const Var& v) const {
  const Tensor* g = find(v);
  if (!g) fail("Gradients::at", "no gradient for '", v.name(), "'");
  return *g;
}

Gradients backward(const Var& loss) {
  if (!loss) fail("backward", "null loss");
  if (loss.value().size() != 1) {
    fail("backward", "loss must be scalar, got shape ", shape_string(loss.shape()));
  }
  Gradients result;
  if (!loss.requires_grad()) return result;

  // Iterative post-order DFS over the grad-requiring subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::unordered_map<const Node*, Tensor> grads;
  grads.emplace(loss.node(), Tensor(loss.shape(), 1.0));
  std::vector<Tensor*> slots;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    auto git = grads.find(node);
    if (git == grads.end()) continue;
    if (!node->backward) continue;  // leaf
    slots.assign(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(in);
      if (inserted) slot->second = Tensor(in->value.shape(), 0.0);
      slots[i] = &slot->second;
    }
    node->backward(git->second, slots);
    // Interior gradients are no longer needed once propagated.
    grads.erase(git);
  }
  for (auto& [node, g] : grads) {
    if (!node->backward && node->requires_grad) result.grads_.emplace(node, std::move(g));
  }
  return result;
}

// ---- linear algebra -------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0]) {
    shape_error("matmul", av.shape(), bv.shape());
  }
  const std::size_t m = av.shape()[0], k = av.shape()[1], n = bv.shape()[1];
  Tensor out({m, n});
  gemm_nn(av.data().data(), bv.data().data(), out.data().data(), m, k, n);
  auto an = a.ptr(), bn = b.ptr();
  return make("matmul", std::move(out), {a, b}, [an, bn, m, k, n](const Tensor& g, std::span<Tensor*> grads) {
    if (grads[0]) gemm_nt(g.data().data(), bn->value.data().data(), grads[0]->data().data(), m, n, k);
    if (grads[1]) gemm_tn(an->value.data().data(), g.data().data(), grads[1]->data().data(), k, m, n);
  });
}

Var transpose(const Var& a) {
  require_rank("transpose", a, 2);
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
  return make("transpose", std::move(out), {a}, [m, n](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) grads[0]->at(i, j) += g.at(j, i);
  });
}

namespace {

enum class Broadcast { none, row };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return Broadcast::none;
  if (b.rank() == 1 && a.rank() >= 1 && b.size() == a.cols()) return Broadcast::row;
  shape_error(op, a.shape(), b.shape());
}

Var add_sub(const char* op, const Var& a, const Var& b, double sign) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Broadcast kind = broadcast_kind(op, av, bv);
  Tensor out = av;
  const std::size_t cols = av.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] += sign * (kind == Broadcast::none ? bv[i] : bv[i % cols]);
  }
  return make(op, std::move(out), {a, b}, [kind, cols, sign](const Tensor& g, std::span<Tensor*> grads) {
    if (grads[0]) accumulate(*grads[0], g);
    if (grads[1]) {
      auto gb = grads[1]->data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gb[kind == Broadcast::none ? i : i % cols] += sign * g[i];
      }
    }
  });
}

}  // namespace

Var add(const Var& a, const Var& b) { return add_sub("add", a, b, 1.0); }
Var sub(const Var& a, const Var& b) { return add_sub("sub", a, b, -1.0); }

Var mul(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto an = a.ptr(), bn = b.ptr();
  return make("mul", std::move(out), {a, b}, [an, bn](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (grads[0]) (*grads[0])[i] += g[i] * bn->value[i];
      if (grads[1]) (*grads[1])[i] += g[i] * an->value[i];
    }
  });
}

Var scale(const Var& a, double factor) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= factor;
  return make("scale", std::move(out), {a}, [factor](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += factor * g[i];
  });
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) fail("concat", "no inputs");
  const Tensor& first = parts.front().value();
  const std::size_t rows = first.rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    if (v.rank() != first.rank() || v.rows() != rows) shape_error("concat", first.shape(), v.shape());
    widths.push_back(v.cols());
    total += v.cols();
  }
  Shape shape = first.shape();
  shape.back() = total;
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.row(r).begin(), widths[k], out.row(r).begin() + static_cast<std::ptrdiff_t>(offset));
    }
    offset += widths[k];
  }
  return make("concat", std::move(out), parts, [widths, rows, total](const Tensor& g, std::span<Tensor*> grads) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (grads[k]) {
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < widths[k]; ++c) grads[k]->at(r, c) += g[r * total + offset + c];
      }
      offset += widths[k];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) fail("concat_rows", "no inputs");
  const std::size_t cols = parts.front().value().cols();
  std::size_t rows = 0;
  std::vector<std::size_t> counts;
  for (const auto& p : parts) {
    require_rank("concat_rows", p, 2);
    if (p.value().cols() != cols) shape_error("concat_rows", parts.front().shape(), p.shape());
    counts.push_back(p.value().rows());
    rows += p.value().rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.value().data().begin(), p.value().data().end());
  return make("concat_rows", Tensor({rows, cols}, std::move(data)), parts,
              [counts, cols](const Tensor& g, std::span<Tensor*> grads) {
                std::size_t offset = 0;
                for (std::size_t k = 0; k < counts.size(); ++k) {
                  const std::size_t n = counts[k] * cols;
                  if (grads[k]) {
                    for (std::size_t i = 0; i < n; ++i) (*grads[k])[i] += g[offset + i];
                  }
                  offset += n;
                }
              });
}

// ---- nonlinearities -------------------------------------------------------

Var softmax(const Var& x, std::span<const std::uint8_t> key_mask) {
  const Tensor& in = x.value();
  const std::size_t cols = in.cols();
  if (!key_mask.empty() && key_mask.size() != cols) {
    fail("softmax", "key mask length ", key_mask.size(), " does not match last axis ", cols);
  }
  std::vector<std::uint8_t> mask(key_mask.begin(), key_mask.end());
  auto keep = [&mask](std::size_t c) { return mask.empty() || mask[c] != 0; };
  Tensor out(in.shape(), 0.0);
  for (std::size_t r = 0; r < in.rows(); ++r) {
    auto xr = in.row(r);
    auto yr = out.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (keep(c)) mx = std::max(mx, xr[c]);
    if (!std::isfinite(mx)) fail("softmax", "row ", r, " has no finite unmasked entry");
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      if (!keep(c)) continue;
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    for (std::size_t c = 0; c < cols; ++c) yr[c] /= z;
  }
  auto self = std::make_shared<Tensor>(out);
  return make("softmax", std::move(out), {x}, [self, cols](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t r = 0; r < self->rows(); ++r) {
      auto yr = self->row(r);
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * yr[c];
      auto gx = grads[0]->row(r);
      for (std::size_t c = 0; c < cols; ++c) gx[c] += yr[c] * (g[r * cols + c] - dot);
    }
  });
}

Var tanh(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x.value()[i]);
  auto y = std::make_shared<Tensor>(out);
  return make("tanh", std::move(out), {x}, [y](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * (1.0 - (*y)[i] * (*y)[i]);
  });
}

Var sigmoid(const Var& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  auto y = std::make_shared<Tensor>(out);
  return make("sigmoid", std::move(out), {x}, [y](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * (*y)[i] * (1.0 - (*y)[i]);
  });
}

Var log_sigmoid(const Var& x) {
  // log s(v) = -softplus(-v), d/dv = s(-v)
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = v >= 0 ? -std::log1p(std::exp(-v)) : v - std::log1p(std::exp(v));
  }
  auto xn = x.ptr();
  return make("log_sigmoid", std::move(out), {x}, [xn](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->value[i];
      const double s_neg = v >= 0 ? std::exp(-v) / (1.0 + std::exp(-v)) : 1.0 / (1.0 + std::exp(v));
      (*grads[0])[i] += g[i] * s_neg;
    }
  });
}

Var leaky_relu(const Var& x, double slope) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = v > 0 ? v : slope * v;
  }
  auto xn = x.ptr();
  return make("leaky_relu", std::move(out), {x}, [xn, slope](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * (xn->value[i] > 0 ? 1.0 : slope);
  });
}

Var gelu(const Var& x) {
  // Exact form: x * Phi(x).
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  }
  auto xn = x.ptr();
  return make("gelu", std::move(out), {x}, [xn](const Tensor& g, std::span<Tensor*> grads) {
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->value[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      (*grads[0])[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& in = x.value();
  const std::size_t cols = in.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols) {
    shape_error("layer_norm", in.shape(), gamma.shape());
  }
  const std::size_t rows = in.rows();
  auto xhat = std::make_shared<Tensor>(in.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(in.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto xr = in.row(r);
    double mu = 0.0;
    for (double v : xr) mu += v;
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : xr) var += (v - mu) * (v - mu);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mu) * is;
      xhat->at(r, c) = h;
      out.at(r, c) = h * gamma.value()[c] + beta.value()[c];
    }
  }
  auto gn = gamma.ptr();
  return make("layer_norm", std::move(out), {x, gamma, beta},
              [xhat, inv_std, gn, rows, cols](const Tensor& g, std::span<Tensor*> grads) {
                const double n = static_cast<double>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                  double sum_dh = 0.0, sum_dh_h = 0.0;
                  for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = g[r * cols + c] * gn->value[c];
                    sum_dh += dh;
                    sum_dh_h += dh * xhat->at(r, c);
                    if (grads[1]) (*grads[1])[c] += g[r * cols + c] * xhat->at(r, c);
                    if (grads[2]) (*grads[2])[c] += g[r * cols + c];
                  }
                  if (!grads[0]) continue;
                  for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = g[r * cols + c] * gn->value[c];
                    grads[0]->at(r, c) +=
                        (*inv_std)[r] * (dh - sum_dh / n - xhat->at(r, c) * sum_dh_h / n);
                  }
                }
              });
}

Var dropout(const Var& x, double rate, std::mt19937_64& rng, bool train) {
  if (!train || rate <= 0.0) return x;
  if (rate >= 1.0) fail("dropout", "rate must be < 1, got ", rate);
  const double keep_scale = 1.0 / (1.0 - rate);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = unif(rng) >= rate ? keep_scale : 0.0;
    out[i] = x.value()[i] * (*mask)[i];
  }
  return make("dropout", std::move(out), {x}, [mask](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) (*grads[0])[i] += g[i] * (*mask)[i];
  });
}

// ---- reductions -----------------------------------------------------------

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make("sum", Tensor::scalar(s), {x}, [](const Tensor& g, std::span<Tensor*> grads) {
    for (auto& v : grads[0]->data()) v += g[0];
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var row_sum(const Var& x) {
  const Tensor& in = x.value();
  const std::size_t rows = in.rows(), cols = in.cols();
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (double v : in.row(r)) s += v;
    out[r] = s;
  }
  return make("row_sum", std::move(out), {x}, [cols](const Tensor& g, std::span<Tensor*> grads) {
    auto gx = grads[0]->data();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i / cols];
  });
}

Var squared_norm(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v * v;
  auto xn = x.ptr();
  return make("squared_norm", Tensor::scalar(s), {x}, [xn](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < xn->value.size(); ++i) (*grads[0])[i] += 2.0 * g[0] * xn->value[i];
  });
}

Var log(const Var& x, double floor) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    if (v <= 0.0 && floor <= 0.0) fail("log", "non-positive input ", v, " at index ", i);
    out[i] = std::log(std::max(v, floor));
  }
  auto xn = x.ptr();
  return make("log", std::move(out), {x}, [xn, floor](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->value[i];
      if (v > floor) (*grads[0])[i] += g[i] / v;
    }
  });
}

// ---- indexing -------------------------------------------------------------

Var gather_rows(const Var& table, std::span<const std::size_t> rows) {
  require_rank("gather_rows", table, 2);
  const std::size_t n = table.shape()[0], cols = table.shape()[1];
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  if (idx.empty()) fail("gather_rows", "empty index list");
  Tensor out({idx.size(), cols});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= n) fail("gather_rows", "row ", idx[i], " out of range for table ", shape_string(table.shape()));
    std::copy_n(table.value().row(idx[i]).begin(), cols, out.row(i).begin());
  }
  return make("gather_rows", std::move(out), {table}, [idx, cols](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto dst = grads[0]->row(idx[i]);
      for (std::size_t c = 0; c < cols; ++c) dst[c] += g[i * cols + c];
    }
  });
}

Var pick(const Var& x, std::span<const std::size_t> cols) {
  const Tensor& in = x.value();
  if (cols.size() != in.rows()) fail("pick", "got ", cols.size(), " indices for ", in.rows(), " rows");
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  const std::size_t width = in.cols();
  Tensor out({idx.size()});
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= width) fail("pick", "column ", idx[r], " out of range ", width);
    out[r] = in.at(r, idx[r]);
  }
  return make("pick", std::move(out), {x}, [idx, width](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t r = 0; r < idx.size(); ++r) (*grads[0])[r * width + idx[r]] += g[r];
  });
}

Var relation_project(const Var& w, std::span<const std::size_t> rel, const Var& x) {
  require_rank("relation_project", w, 3);
  require_rank("relation_project", x, 2);
  const std::size_t num_rel = w.shape()[0], out_dim = w.shape()[1], in_dim = w.shape()[2];
  if (x.shape()[1] != in_dim || x.shape()[0] != rel.size()) shape_error("relation_project", w.shape(), x.shape());
  std::vector<std::size_t> rels(rel.begin(), rel.end());
  const std::size_t n = rels.size();
  Tensor out({n, out_dim});
  const double* wd = w.value().data().data();
  for (std::size_t i = 0; i < n; ++i) {
    if (rels[i] >= num_rel) fail("relation_project", "relation ", rels[i], " out of range ", num_rel);
    const double* wr = wd + rels[i] * out_dim * in_dim;
    auto xi = x.value().row(i);
    auto oi = out.row(i);
    for (std::size_t o = 0; o < out_dim; ++o) {
      double acc = 0.0;
      for (std::size_t k = 0; k < in_dim; ++k) acc += wr[o * in_dim + k] * xi[k];
      oi[o] = acc;
    }
  }
  auto wn = w.ptr(), xn = x.ptr();
  return make("relation_project", std::move(out), {w, x},
              [wn, xn, rels, out_dim, in_dim](const Tensor& g, std::span<Tensor*> grads) {
                const double* wd = wn->value.data().data();
                for (std::size_t i = 0; i < rels.size(); ++i) {
                  const double* gi = g.data().data() + i * out_dim;
                  auto xi = xn->value.row(i);
                  if (grads[0]) {
                    double* gw = grads[0]->data().data() + rels[i] * out_dim * in_dim;
                    for (std::size_t o = 0; o < out_dim; ++o)
                      for (std::size_t k = 0; k < in_dim; ++k) gw[o * in_dim + k] += gi[o] * xi[k];
                  }
                  if (grads[1]) {
                    const double* wr = wd + rels[i] * out_dim * in_dim;
                    auto gx = grads[1]->row(i);
                    for (std::size_t o = 0; o < out_dim; ++o)
                      for (std::size_t k = 0; k < in_dim; ++k) gx[k] += wr[o * in_dim + k] * gi[o];
                  }
                }
              });
}

Var segment_softmax(const Var& scores, std::span<const std::size_t> offsets) {
  require_rank("segment_softmax", scores, 1);
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  if (off.empty() || off.back() != scores.value().size()) {
    fail("segment_softmax", "offsets do not cover ", scores.value().size(), " scores");
  }
  Tensor out(scores.shape(), 0.0);
  const Tensor& s = scores.value();
  for (std::size_t seg = 0; seg + 1 < off.size(); ++seg) {
    const std::size_t b = off[seg], e = off[seg + 1];
    if (b == e) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = b; i < e; ++i) mx = std::max(mx, s[i]);
    double z = 0.0;
    for (std::size_t i = b; i < e; ++i) {
      out[i] = std::exp(s[i] - mx);
      z += out[i];
    }
    for (std::size_t i = b; i < e; ++i) out[i] /= z;
  }
  auto y = std::make_shared<Tensor>(out);
  return make("segment_softmax", std::move(out), {scores}, [y, off](const Tensor& g, std::span<Tensor*> grads) {
    for (std::size_t seg = 0; seg + 1 < off.size(); ++seg) {
      double dot = 0.0;
      for (std::size_t i = off[seg]; i < off[seg + 1]; ++i) dot += g[i] * (*y)[i];
      for (std::size_t i = off[seg]; i < off[seg + 1]; ++i) (*grads[0])[i] += (*y)[i] * (g[i] - dot);
    }
  });
}

Var segment_weighted_sum(const Var& weights, const Var& x, std::span<const std::size_t> offsets,
                         std::span<const std::size_t> cols) {
  require_rank("segment_weighted_sum", weights, 1);
  require_rank("segment_weighted_sum", x, 2);
  std::vector<std::size_t> off(offsets.begin(), offsets.end());
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  if (off.empty() || off.back() != idx.size() || idx.size() != weights.value().size()) {
    fail("segment_weighted_sum", "inconsistent CSR: ", off.size(), " offsets, ", idx.size(), " columns, ",
         weights.value().size(), " weights");
  }
  const std::size_t segments = off.size() - 1, dim = x.shape()[1], n = x.shape()[0];
  Tensor out({segments, dim}, 0.0);
  for (std::size_t seg = 0; seg < segments; ++seg) {
    auto o = out.row(seg);
    for (std::size_t e = off[seg]; e < off[seg + 1]; ++e) {
      if (idx[e] >= n) fail("segment_weighted_sum", "column ", idx[e], " out of range ", n);
      const double w = weights.value()[e];
      auto xr = x.value().row(idx[e]);
      for (std::size_t c = 0; c < dim; ++c) o[c] += w * xr[c];
    }
  }
  auto wn = weights.ptr(), xn = x.ptr();
  return make("segment_weighted_sum", std::move(out), {weights, x},
              [wn, xn, off, idx, dim](const Tensor& g, std::span<Tensor*> grads) {
                for (std::size_t seg = 0; seg + 1 < off.size(); ++seg) {
                  auto gs = g.row(seg);
                  for (std::size_t e = off[seg]; e < off[seg + 1]; ++e) {
                    auto xr = xn->value.row(idx[e]);
                    if (grads[0]) {
                      double acc = 0.0;
                      for (std::size_t c = 0; c < dim; ++c) acc += gs[c] * xr[c];
                      (*grads[0])[e] += acc;
                    }
                    if (grads[1]) {
                      auto gx = grads[1]->row(idx[e]);
                      const double w = wn->value[e];
                      for (std::size_t c = 0; c < dim; ++c) gx[c] += w * gs[c];
                    }
                  }
                }
              });
}

}  // namespace katrec::ad
