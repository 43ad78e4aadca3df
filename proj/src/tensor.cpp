#include "dubflow/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dubflow::numgrad {

namespace {

thread_local uint64_t g_next_id = 1;
thread_local int g_nograd_depth = 0;

NodePtr make_node(std::string op, Shape shape, std::vector<double> value) {
    auto n = std::make_shared<Node>();
    n->id = g_next_id++;
    n->op = std::move(op);
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

void ensure_grad(Node& n) {
    if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

[[noreturn]] void shape_fail(const std::string& op, const std::string& detail) {
    throw std::invalid_argument(op + ": " + detail);
}

void check_same_shape(const std::string& op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Wires parents/backprop unless grads are globally disabled or no parent
// needs them.
Tensor finish(NodePtr n, std::vector<NodePtr> parents, std::function<void(Node&)> bp) {
    if (g_nograd_depth == 0) {
        bool rg = false;
        for (auto& p : parents) rg = rg || p->requires_grad;
        if (rg) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(bp);
        }
    }
    return Tensor(n);
}

std::vector<size_t> strides_of(const Shape& s) {
    std::vector<size_t> st(s.size(), 1);
    for (size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
    return st;
}

}  // namespace

size_t numel(const Shape& s) {
    size_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

NoGradGuard::NoGradGuard() { ++g_nograd_depth; }
NoGradGuard::~NoGradGuard() { --g_nograd_depth; }
bool grad_enabled() { return g_nograd_depth == 0; }

Tensor Tensor::leaf(Shape shape, std::vector<double> value, bool requires_grad) {
    if (numel(shape) != value.size())
        shape_fail("leaf", "shape " + shape_str(shape) + " does not match " +
                               std::to_string(value.size()) + " values");
    auto n = make_node("leaf", std::move(shape), std::move(value));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::zeros(Shape shape, bool rg) {
    size_t n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, 0.0), rg);
}

Tensor Tensor::full(Shape shape, double v, bool rg) {
    size_t n = numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, v), rg);
}

Tensor Tensor::scalar(double v, bool rg) { return leaf({1}, {v}, rg); }

const std::vector<double>& Tensor::grad() const {
    static const std::vector<double> empty;
    if (!node->requires_grad) return empty;
    if (node->grad.size() != node->value.size()) {
        // never touched by backward: exact zero
        node->grad.assign(node->value.size(), 0.0);
    }
    return node->grad;
}

double Tensor::item() const {
    if (size() != 1) shape_fail("item", "tensor " + shape_str(shape()) + " is not scalar");
    return node->value[0];
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + b.value()[i];
    auto pa = a.node, pb = b.node;
    return finish(make_node("add", a.shape(), std::move(v)), {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) {
            ensure_grad(*pa);
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            ensure_grad(*pb);
            for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] - b.value()[i];
    auto pa = a.node, pb = b.node;
    return finish(make_node("sub", a.shape(), std::move(v)), {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) {
            ensure_grad(*pa);
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            ensure_grad(*pb);
            for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * b.value()[i];
    auto pa = a.node, pb = b.node;
    return finish(make_node("mul", a.shape(), std::move(v)), {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) {
            ensure_grad(*pa);
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            ensure_grad(*pb);
            for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
        }
    });
}

Tensor divide(const Tensor& a, const Tensor& b) {
    if (b.size() != 1) check_same_shape("divide", a, b);
    std::vector<double> v(a.size());
    const bool bs = b.size() == 1;
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] / b.value()[bs ? 0 : i];
    auto pa = a.node, pb = b.node;
    return finish(make_node("divide", a.shape(), std::move(v)), {pa, pb}, [pa, pb, bs](Node& n) {
        if (pa->requires_grad) {
            ensure_grad(*pa);
            for (size_t i = 0; i < n.grad.size(); ++i)
                pa->grad[i] += n.grad[i] / pb->value[bs ? 0 : i];
        }
        if (pb->requires_grad) {
            ensure_grad(*pb);
            for (size_t i = 0; i < n.grad.size(); ++i) {
                double bi = pb->value[bs ? 0 : i];
                pb->grad[bs ? 0 : i] -= n.grad[i] * pa->value[i] / (bi * bi);
            }
        }
    });
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] * s;
    auto pa = a.node;
    return finish(make_node("scale", a.shape(), std::move(v)), {pa}, [pa, s](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * s;
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = a.value()[i] + s;
    auto pa = a.node;
    return finish(make_node("add_scalar", a.shape(), std::move(v)), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    });
}

Tensor bias_add(const Tensor& x, const Tensor& bias) {
    if (bias.shape().size() != 1 || x.shape().empty() || x.shape().back() != bias.shape()[0])
        shape_fail("bias_add", "bias " + shape_str(bias.shape()) + " does not match last axis of " +
                                   shape_str(x.shape()));
    size_t d = bias.size();
    std::vector<double> v(x.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = x.value()[i] + bias.value()[i % d];
    auto px = x.node, pb = bias.node;
    return finish(make_node("bias_add", x.shape(), std::move(v)), {px, pb}, [px, pb, d](Node& n) {
        if (px->requires_grad) {
            ensure_grad(*px);
            for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
        }
        if (pb->requires_grad) {
            ensure_grad(*pb);
            for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i % d] += n.grad[i];
        }
    });
}

Tensor mul_lastdim(const Tensor& x, const Tensor& w) {
    if (w.shape().size() != 1 || x.shape().empty() || x.shape().back() != w.shape()[0])
        shape_fail("mul_lastdim", "weight " + shape_str(w.shape()) +
                                      " does not match last axis of " + shape_str(x.shape()));
    size_t d = w.size();
    std::vector<double> v(x.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = x.value()[i] * w.value()[i % d];
    auto px = x.node, pw = w.node;
    return finish(make_node("mul_lastdim", x.shape(), std::move(v)), {px, pw}, [px, pw, d](Node& n) {
        if (px->requires_grad) {
            ensure_grad(*px);
            for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i] * pw->value[i % d];
        }
        if (pw->requires_grad) {
            ensure_grad(*pw);
            for (size_t i = 0; i < n.grad.size(); ++i) pw->grad[i % d] += n.grad[i] * px->value[i];
        }
    });
}

Tensor mul_bcast_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) shape_fail("mul_bcast_scalar", "scalar operand has " +
                                                          std::to_string(s.size()) + " elements");
    double sv = s.value()[0];
    std::vector<double> v(x.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = x.value()[i] * sv;
    auto px = x.node, ps = s.node;
    return finish(make_node("mul_bcast_scalar", x.shape(), std::move(v)), {px, ps},
                  [px, ps](Node& n) {
                      if (px->requires_grad) {
                          ensure_grad(*px);
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              px->grad[i] += n.grad[i] * ps->value[0];
                      }
                      if (ps->requires_grad) {
                          ensure_grad(*ps);
                          double acc = 0.0;
                          for (size_t i = 0; i < n.grad.size(); ++i)
                              acc += n.grad[i] * px->value[i];
                          ps->grad[0] += acc;
                      }
                  });
}

// ---- matmul ----------------------------------------------------------------

namespace {
void dgemm(bool ta, bool tb, int m, int n, int k, const double* A, const double* B, double* C,
           double beta = 0.0) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n,
                k, 1.0, A, ta ? m : k, B, tb ? k : n, beta, C, n);
}
}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    size_t batch = 1, m, k, n;
    bool a3 = sa.size() == 3, b3 = sb.size() == 3;
    if (sa.size() == 2 && sb.size() == 2) {
        m = sa[0]; k = sa[1]; n = sb[1];
        if (sb[0] != k) shape_fail("matmul", shape_str(sa) + " x " + shape_str(sb));
    } else if (a3 && (b3 || sb.size() == 2)) {
        batch = sa[0]; m = sa[1]; k = sa[2]; n = b3 ? sb[2] : sb[1];
        if ((b3 && (sb[0] != batch || sb[1] != k)) || (!b3 && sb[0] != k))
            shape_fail("matmul", shape_str(sa) + " x " + shape_str(sb));
    } else {
        shape_fail("matmul", "unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
    }
    Shape so = a3 ? Shape{batch, m, n} : Shape{m, n};
    std::vector<double> v(numel(so));
    const size_t stA = m * k, stB = b3 ? k * n : 0, stC = m * n;
    for (size_t bi = 0; bi < batch; ++bi)
        dgemm(false, false, (int)m, (int)n, (int)k, a.value().data() + bi * stA,
              b.value().data() + bi * stB, v.data() + bi * stC);
    auto pa = a.node, pb = b.node;
    return finish(make_node("matmul", so, std::move(v)), {pa, pb},
                  [pa, pb, batch, m, k, n, stA, stB, stC, b3](Node& nd) {
                      if (pa->requires_grad) {
                          ensure_grad(*pa);
                          // dA = dC * B^T
                          for (size_t bi = 0; bi < batch; ++bi)
                              dgemm(false, true, (int)m, (int)k, (int)n, nd.grad.data() + bi * stC,
                                    pb->value.data() + bi * stB, pa->grad.data() + bi * stA, 1.0);
                      }
                      if (pb->requires_grad) {
                          ensure_grad(*pb);
                          // dB = A^T * dC (accumulated across batch when B is shared)
                          for (size_t bi = 0; bi < batch; ++bi)
                              dgemm(true, false, (int)k, (int)n, (int)m, pa->value.data() + bi * stA,
                                    nd.grad.data() + bi * stC, pb->grad.data() + bi * stB, 1.0);
                      }
                  });
}

// ---- layout ops ------------------------------------------------------------

Tensor permute(const Tensor& a, const std::vector<size_t>& perm) {
    const Shape& s = a.shape();
    if (perm.size() != s.size()) shape_fail("permute", "perm rank mismatch for " + shape_str(s));
    Shape so(s.size());
    for (size_t d = 0; d < s.size(); ++d) so[d] = s[perm[d]];
    auto ist = strides_of(s);
    std::vector<size_t> ost_in(s.size());  // stride in input per output axis
    for (size_t d = 0; d < s.size(); ++d) ost_in[d] = ist[perm[d]];
    std::vector<double> v(a.size());
    const size_t rank = s.size();
    std::vector<size_t> idx(rank, 0);
    const auto& av = a.value();
    for (size_t o = 0; o < v.size(); ++o) {
        size_t off = 0;
        for (size_t d = 0; d < rank; ++d) off += idx[d] * ost_in[d];
        v[o] = av[off];
        for (size_t d = rank; d-- > 0;) {
            if (++idx[d] < so[d]) break;
            idx[d] = 0;
        }
    }
    auto pa = a.node;
    auto so_copy = so;
    return finish(make_node("permute", std::move(so), std::move(v)), {pa},
                  [pa, so_copy, ost_in](Node& n) {
                      ensure_grad(*pa);
                      const size_t rank = so_copy.size();
                      std::vector<size_t> idx(rank, 0);
                      for (size_t o = 0; o < n.grad.size(); ++o) {
                          size_t off = 0;
                          for (size_t d = 0; d < rank; ++d) off += idx[d] * ost_in[d];
                          pa->grad[off] += n.grad[o];
                          for (size_t d = rank; d-- > 0;) {
                              if (++idx[d] < so_copy[d]) break;
                              idx[d] = 0;
                          }
                      }
                  });
}

Tensor transpose_last2(const Tensor& a) {
    std::vector<size_t> perm(a.shape().size());
    for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    if (perm.size() < 2) shape_fail("transpose_last2", "rank < 2");
    std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
    return permute(a, perm);
}

Tensor reshape(const Tensor& a, Shape s) {
    if (numel(s) != a.size())
        shape_fail("reshape", shape_str(a.shape()) + " -> " + shape_str(s));
    auto pa = a.node;
    return finish(make_node("reshape", std::move(s), a.value()), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
    });
}

Tensor slice(const Tensor& a, size_t axis, size_t start, size_t len) {
    const Shape& s = a.shape();
    if (axis >= s.size() || start + len > s[axis])
        shape_fail("slice", "axis " + std::to_string(axis) + " [" + std::to_string(start) + "," +
                                std::to_string(start + len) + ") out of " + shape_str(s));
    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= s[d];
    for (size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Shape so = s;
    so[axis] = len;
    std::vector<double> v(outer * len * inner);
    for (size_t o = 0; o < outer; ++o)
        std::memcpy(v.data() + o * len * inner,
                    a.value().data() + (o * s[axis] + start) * inner, len * inner * sizeof(double));
    auto pa = a.node;
    size_t ax_len = s[axis];
    return finish(make_node("slice", std::move(so), std::move(v)), {pa},
                  [pa, outer, inner, len, start, ax_len](Node& n) {
                      ensure_grad(*pa);
                      for (size_t o = 0; o < outer; ++o) {
                          const double* g = n.grad.data() + o * len * inner;
                          double* dst = pa->grad.data() + (o * ax_len + start) * inner;
                          for (size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                      }
                  });
}

Tensor concat(const std::vector<Tensor>& parts, size_t axis) {
    if (parts.empty()) shape_fail("concat", "no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) shape_fail("concat", "axis out of range");
    size_t total = 0;
    for (auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != s0.size()) shape_fail("concat", "rank mismatch");
        for (size_t d = 0; d < s.size(); ++d)
            if (d != axis && s[d] != s0[d])
                shape_fail("concat", shape_str(s) + " vs " + shape_str(s0));
        total += s[axis];
    }
    size_t outer = 1, inner = 1;
    for (size_t d = 0; d < axis; ++d) outer *= s0[d];
    for (size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
    Shape so = s0;
    so[axis] = total;
    std::vector<double> v(outer * total * inner);
    std::vector<size_t> lens;
    size_t pos = 0;
    for (auto& p : parts) {
        size_t len = p.shape()[axis];
        lens.push_back(len);
        for (size_t o = 0; o < outer; ++o)
            std::memcpy(v.data() + (o * total + pos) * inner, p.value().data() + o * len * inner,
                        len * inner * sizeof(double));
        pos += len;
    }
    std::vector<NodePtr> ps;
    for (auto& p : parts) ps.push_back(p.node);
    return finish(make_node("concat", std::move(so), std::move(v)), ps,
                  [ps, lens, outer, inner, total](Node& n) {
                      size_t pos = 0;
                      for (size_t pi = 0; pi < ps.size(); ++pi) {
                          size_t len = lens[pi];
                          if (ps[pi]->requires_grad) {
                              ensure_grad(*ps[pi]);
                              for (size_t o = 0; o < outer; ++o) {
                                  const double* g = n.grad.data() + (o * total + pos) * inner;
                                  double* dst = ps[pi]->grad.data() + o * len * inner;
                                  for (size_t i = 0; i < len * inner; ++i) dst[i] += g[i];
                              }
                          }
                          pos += len;
                      }
                  });
}

Tensor embedding_lookup(const Tensor& table, const std::vector<size_t>& ids) {
    const Shape& s = table.shape();
    if (s.size() != 2) shape_fail("embedding_lookup", "table must be rank 2, got " + shape_str(s));
    size_t d = s[1];
    std::vector<double> v(ids.size() * d);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= s[0]) shape_fail("embedding_lookup", "id out of range");
        std::memcpy(v.data() + i * d, table.value().data() + ids[i] * d, d * sizeof(double));
    }
    auto pt = table.node;
    return finish(make_node("embedding_lookup", {ids.size(), d}, std::move(v)), {pt},
                  [pt, ids, d](Node& n) {
                      ensure_grad(*pt);
                      for (size_t i = 0; i < ids.size(); ++i)
                          for (size_t j = 0; j < d; ++j)
                              pt->grad[ids[i] * d + j] += n.grad[i * d + j];
                  });
}

// ---- nonlinear -------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
    const Shape& s = a.shape();
    if (s.empty()) shape_fail("softmax", "rank 0");
    size_t d = s.back(), rows = a.size() / d;
    std::vector<double> v(a.size());
    const auto& av = a.value();
    for (size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * d;
        double* y = v.data() + r * d;
        double mx = x[0];
        for (size_t i = 1; i < d; ++i) mx = std::max(mx, x[i]);
        double sum = 0.0;
        for (size_t i = 0; i < d; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        for (size_t i = 0; i < d; ++i) y[i] /= sum;
    }
    auto pa = a.node;
    return finish(make_node("softmax", s, std::move(v)), {pa}, [pa, d, rows](Node& n) {
        ensure_grad(*pa);
        for (size_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * d;
            const double* dy = n.grad.data() + r * d;
            double dot = 0.0;
            for (size_t i = 0; i < d; ++i) dot += dy[i] * y[i];
            double* dx = pa->grad.data() + r * d;
            for (size_t i = 0; i < d; ++i) dx[i] += y[i] * (dy[i] - dot);
        }
    });
}

Tensor layer_norm_lastdim(const Tensor& a, double eps) {
    const Shape& s = a.shape();
    if (s.empty()) shape_fail("layer_norm", "rank 0");
    size_t d = s.back(), rows = a.size() / d;
    std::vector<double> v(a.size());
    std::vector<double> inv_sigma(rows);
    const auto& av = a.value();
    for (size_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * d;
        double mu = 0.0;
        for (size_t i = 0; i < d; ++i) mu += x[i];
        mu /= (double)d;
        double var = 0.0;
        for (size_t i = 0; i < d; ++i) var += (x[i] - mu) * (x[i] - mu);
        var /= (double)d;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        double* y = v.data() + r * d;
        for (size_t i = 0; i < d; ++i) y[i] = (x[i] - mu) * is;
    }
    auto pa = a.node;
    return finish(make_node("layer_norm", s, std::move(v)), {pa},
                  [pa, inv_sigma = std::move(inv_sigma), d, rows](Node& n) {
        ensure_grad(*pa);
        for (size_t r = 0; r < rows; ++r) {
            const double* y = n.value.data() + r * d;
            const double* dy = n.grad.data() + r * d;
            double m_dy = 0.0, m_dyy = 0.0;
            for (size_t i = 0; i < d; ++i) {
                m_dy += dy[i];
                m_dyy += dy[i] * y[i];
            }
            m_dy /= (double)d;
            m_dyy /= (double)d;
            double* dx = pa->grad.data() + r * d;
            for (size_t i = 0; i < d; ++i)
                dx[i] += inv_sigma[r] * (dy[i] - m_dy - y[i] * m_dyy);
        }
    });
}

Tensor reduce_sum(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.value()) acc += x;
    auto pa = a.node;
    return finish(make_node("reduce_sum", {1}, {acc}), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (auto& g : pa->grad) g += n.grad[0];
    });
}

Tensor reduce_mean(const Tensor& a) {
    double acc = 0.0;
    for (double x : a.value()) acc += x;
    double inv = 1.0 / (double)a.size();
    auto pa = a.node;
    return finish(make_node("reduce_mean", {1}, {acc * inv}), {pa}, [pa, inv](Node& n) {
        ensure_grad(*pa);
        for (auto& g : pa->grad) g += n.grad[0] * inv;
    });
}

Tensor exp(const Tensor& a) {
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::exp(a.value()[i]);
    auto pa = a.node;
    return finish(make_node("exp", a.shape(), std::move(v)), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * n.value[i];
    });
}

Tensor log(const Tensor& a) {
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::log(a.value()[i]);
    auto pa = a.node;
    return finish(make_node("log", a.shape(), std::move(v)), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] / pa->value[i];
    });
}

Tensor sqrt(const Tensor& a) {
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = std::sqrt(a.value()[i]);
    auto pa = a.node;
    return finish(make_node("sqrt", a.shape(), std::move(v)), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * 0.5 / n.value[i];
    });
}

Tensor gelu(const Tensor& a) {
    constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); ++i) {
        double x = a.value()[i];
        double u = c * (x + 0.044715 * x * x * x);
        v[i] = 0.5 * x * (1.0 + std::tanh(u));
    }
    auto pa = a.node;
    return finish(make_node("gelu", a.shape(), std::move(v)), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double x = pa->value[i];
            double u = c * (x + 0.044715 * x * x * x);
            double th = std::tanh(u);
            double d = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * 0.044715 * x * x);
            pa->grad[i] += n.grad[i] * d;
        }
    });
}

Tensor rotate_half_pairs(const Tensor& a) {
    if (a.shape().empty() || a.shape().back() % 2 != 0)
        shape_fail("rotate_half_pairs", "last axis must be even: " + shape_str(a.shape()));
    std::vector<double> v(a.size());
    for (size_t i = 0; i < v.size(); i += 2) {
        v[i] = -a.value()[i + 1];
        v[i + 1] = a.value()[i];
    }
    auto pa = a.node;
    return finish(make_node("rotate_half_pairs", a.shape(), std::move(v)), {pa}, [pa](Node& n) {
        ensure_grad(*pa);
        for (size_t i = 0; i < n.grad.size(); i += 2) {
            pa->grad[i + 1] -= n.grad[i];
            pa->grad[i] += n.grad[i + 1];
        }
    });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
    check_same_shape("cosine_similarity", a, b);
    Tensor dot = reduce_sum(mul(a, b));
    Tensor na = sqrt(add_scalar(reduce_sum(mul(a, a)), eps));
    Tensor nb = sqrt(add_scalar(reduce_sum(mul(b, b)), eps));
    return divide(dot, mul(na, nb));
}

// ---- backward --------------------------------------------------------------

void backward(const Tensor& scalar_out) {
    if (scalar_out.size() != 1)
        throw std::invalid_argument("backward: output " + shape_str(scalar_out.shape()) +
                                    " is not scalar");
    // collect reachable subgraph
    std::vector<Node*> order;
    std::vector<NodePtr> keep;
    {
        std::vector<NodePtr> stack{scalar_out.node};
        std::map<Node*, bool> seen;
        while (!stack.empty()) {
            NodePtr n = stack.back();
            stack.pop_back();
            if (seen[n.get()]) continue;
            seen[n.get()] = true;
            keep.push_back(n);
            order.push_back(n.get());
            for (auto& p : n->parents) stack.push_back(p);
        }
    }
    // reset grads, then accumulate in strictly decreasing id order
    for (Node* n : order) n->grad.assign(n->value.size(), 0.0);
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
    scalar_out.node->grad[0] = 1.0;
    for (Node* n : order)
        if (n->backprop && n->requires_grad) n->backprop(*n);
}

// ---- grad check ------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                           const std::vector<std::pair<std::string, Tensor>>& inputs,
                           double tolerance, double step) {
    std::vector<Tensor> leaves;
    for (auto& [name, t] : inputs) {
        leaves.push_back(t);
        leaves.back().node->requires_grad = true;
    }
    Tensor out = fn(leaves);
    backward(out);
    std::vector<std::vector<double>> analytic;
    for (auto& t : leaves) analytic.push_back(t.grad());

    GradCheckReport report;
    for (size_t ii = 0; ii < leaves.size(); ++ii) {
        GradCheckEntry e;
        e.name = inputs[ii].first;
        auto& vals = leaves[ii].raw_value();
        for (size_t j = 0; j < vals.size(); ++j) {
            double orig = vals[j];
            double fp, fm;
            {
                NoGradGuard ng;
                vals[j] = orig + step;
                fp = fn(leaves).item();
                vals[j] = orig - step;
                fm = fn(leaves).item();
                vals[j] = orig;
            }
            double num = (fp - fm) / (2.0 * step);
            double ana = analytic[ii][j];
            double rel = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            e.max_rel_err = std::max(e.max_rel_err, rel);
        }
        e.pass = e.max_rel_err <= tolerance;
        report.pass = report.pass && e.pass;
        report.entries.push_back(e);
    }
    return report;
}

std::string GradCheckReport::summary() const {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL");
    for (auto& e : entries)
        os << " | " << e.name << " max_rel_err=" << e.max_rel_err << (e.pass ? "" : " (FAIL)");
    return os.str();
}

// ---- serialization ---------------------------------------------------------

namespace {
template <class T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <class T>
T read_pod(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw std::runtime_error("tensor read: truncated stream");
    return v;
}
}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("DFT1", 4);
    write_pod<uint32_t>(os, (uint32_t)t.shape().size());
    for (auto e : t.shape()) write_pod<uint32_t>(os, (uint32_t)e);
    os.write(reinterpret_cast<const char*>(t.value().data()),
             (std::streamsize)(t.size() * sizeof(double)));
}

Tensor read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "DFT1", 4) != 0)
        throw std::runtime_error("tensor read: bad magic");
    uint32_t rank = read_pod<uint32_t>(is);
    Shape s(rank);
    for (auto& e : s) e = read_pod<uint32_t>(is);
    std::vector<double> v(numel(s));
    is.read(reinterpret_cast<char*>(v.data()), (std::streamsize)(v.size() * sizeof(double)));
    if (!is) throw std::runtime_error("tensor read: truncated payload");
    return Tensor::leaf(std::move(s), std::move(v));
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return read_tensor(is);
}

Tensor& TensorStore::at(const std::string& name) {
    auto it = items.find(name);
    if (it == items.end()) throw std::runtime_error("TensorStore: missing tensor " + name);
    return it->second;
}

const Tensor& TensorStore::at(const std::string& name) const {
    auto it = items.find(name);
    if (it == items.end()) throw std::runtime_error("TensorStore: missing tensor " + name);
    return it->second;
}

void TensorStore::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    std::ofstream idx(path + ".idx");
    if (!os || !idx) throw std::runtime_error("cannot open for write: " + path);
    for (auto& [name, t] : items) {
        idx << name << " " << os.tellp();
        for (auto e : t.shape()) idx << " " << e;
        idx << "\n";
        write_tensor(os, t);
    }
}

TensorStore TensorStore::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    std::ifstream idx(path + ".idx");
    if (!is || !idx) throw std::runtime_error("cannot open: " + path);
    TensorStore store;
    std::string line;
    while (std::getline(idx, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name;
        uint64_t offset;
        ls >> name >> offset;
        is.seekg((std::streamoff)offset);
        store.items[name] = read_tensor(is);
    }
    return store;
}

}  // namespace dubflow::numgrad
