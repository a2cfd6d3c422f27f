#include "coopadapt/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace coopadapt::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using MapRMConst = Eigen::Map<const RowMat>;

Value make_node(Tensor val, std::vector<Value> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) rg = rg || (p && p->requires_grad);
  }
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(fn);
    n->requires_grad = true;
  }
  return n;
}

void check_same_shape(const Value& a, const Value& b, const char* op) {
  if (!a->val.same_shape(b->val)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }
}

double softplus(double x) { return std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0); }

double sigmoid_stable(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

Value constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  return n;
}

Value parameter(std::string name, Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->requires_grad = true;
  n->name = std::move(name);
  return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Value& root) {
  if (!root) throw std::invalid_argument("backward: null root");
  if (root->val.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS; parents of a node precede it in `order`.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next].get();
      ++next;
      if (p && p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->ensure_grad();
  root->grad.data[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) {
      n->ensure_grad();
      n->backprop(*n);
    }
  }
}

// ---------------------------------------------------------------- elementwise

Value add(const Value& a, const Value& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    for (int k = 0; k < 2; ++k) {
      if (!self.parents[k]->requires_grad) continue;
      auto& g = self.parents[k]->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    }
  });
}

Value sub(const Value& a, const Value& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

Value mul(const Value& a, const Value& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= b->val[i];
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * bv[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * av[i];
    }
  });
}

Value scale(const Value& a, double c) {
  Tensor out = a->val;
  for (auto& v : out.data) v *= c;
  return make_node(std::move(out), {a}, [c](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += c * self.grad[i];
  });
}

Value add_scalar(const Value& a, double c) {
  Tensor out = a->val;
  for (auto& v : out.data) v += c;
  return make_node(std::move(out), {a}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
  });
}

Value relu(const Value& x) {
  Tensor out = x->val;
  for (auto& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_node(std::move(out), {x}, [](Node& self) {
    const Tensor& xv = self.parents[0]->val;
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      if (xv[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Value sigmoid(const Value& x) {
  Tensor out = x->val;
  for (auto& v : out.data) v = sigmoid_stable(v);
  Tensor cached = out;
  return make_node(std::move(out), {x}, [cached](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      const double s = cached[i];
      g[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

Value ew_max(const Value& a, const Value& b) {
  check_same_shape(a, b, "ew_max");
  Tensor out = a->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] = std::max(a->val[i], b->val[i]);
  return make_node(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->val;
    const Tensor& bv = self.parents[1]->val;
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      const int k = av[i] >= bv[i] ? 0 : 1;
      if (self.parents[k]->requires_grad) self.parents[k]->ensure_grad()[i] += self.grad[i];
    }
  });
}

Value reshape(const Value& x, std::vector<std::int64_t> shape) {
  if (Tensor::numel_of(shape) != x->val.numel()) {
    throw std::invalid_argument("reshape: element count mismatch");
  }
  Tensor out(std::move(shape), x->val.data);
  return make_node(std::move(out), {x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i];
  });
}

Value concat_channels(const Value& a, const Value& b) {
  if (a->val.ndim() != 3 || b->val.ndim() != 3 || a->val.shape[1] != b->val.shape[1] ||
      a->val.shape[2] != b->val.shape[2]) {
    throw std::invalid_argument("concat_channels: incompatible shapes");
  }
  const std::int64_t ca = a->val.shape[0], cb = b->val.shape[0];
  const std::int64_t hw = a->val.shape[1] * a->val.shape[2];
  Tensor out({ca + cb, a->val.shape[1], a->val.shape[2]});
  std::copy(a->val.data.begin(), a->val.data.end(), out.data.begin());
  std::copy(b->val.data.begin(), b->val.data.end(), out.data.begin() + ca * hw);
  return make_node(std::move(out), {a, b}, [ca, cb, hw](Node& self) {
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::int64_t i = 0; i < ca * hw; ++i) g[i] += self.grad[i];
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::int64_t i = 0; i < cb * hw; ++i) g[i] += self.grad[ca * hw + i];
    }
  });
}

// ------------------------------------------------------------- linear algebra

Value matmul(const Value& a, const Value& b) {
  if (a->val.ndim() != 2 || b->val.ndim() != 2 || a->val.shape[1] != b->val.shape[0]) {
    throw std::invalid_argument("matmul: incompatible shapes");
  }
  const std::int64_t m = a->val.shape[0], k = a->val.shape[1], n = b->val.shape[1];
  Tensor out({m, n});
  {
    MapRMConst am(a->val.data.data(), m, k);
    MapRMConst bm(b->val.data.data(), k, n);
    MapRM om(out.data.data(), m, n);
    om.noalias() = am * bm;
  }
  return make_node(std::move(out), {a, b}, [m, k, n](Node& self) {
    MapRMConst gm(self.grad.data.data(), m, n);
    if (self.parents[0]->requires_grad) {
      MapRMConst bm(self.parents[1]->val.data.data(), k, n);
      MapRM ga(self.parents[0]->ensure_grad().data.data(), m, k);
      ga.noalias() += gm * bm.transpose();
    }
    if (self.parents[1]->requires_grad) {
      MapRMConst am(self.parents[0]->val.data.data(), m, k);
      MapRM gb(self.parents[1]->ensure_grad().data.data(), k, n);
      gb.noalias() += am.transpose() * gm;
    }
  });
}

Value linear(const Value& x, const Value& w, const Value& b) {
  if (x->val.ndim() != 2 || w->val.ndim() != 2 || b->val.ndim() != 1 ||
      x->val.shape[1] != w->val.shape[0] || w->val.shape[1] != b->val.shape[0]) {
    throw std::invalid_argument("linear: incompatible shapes");
  }
  const std::int64_t m = x->val.shape[0], k = x->val.shape[1], n = w->val.shape[1];
  Tensor out({m, n});
  {
    MapRMConst xm(x->val.data.data(), m, k);
    MapRMConst wm(w->val.data.data(), k, n);
    MapRM om(out.data.data(), m, n);
    om.noalias() = xm * wm;
    for (std::int64_t r = 0; r < m; ++r) {
      for (std::int64_t c = 0; c < n; ++c) om(r, c) += b->val[c];
    }
  }
  return make_node(std::move(out), {x, w, b}, [m, k, n](Node& self) {
    MapRMConst gm(self.grad.data.data(), m, n);
    if (self.parents[0]->requires_grad) {
      MapRMConst wm(self.parents[1]->val.data.data(), k, n);
      MapRM gx(self.parents[0]->ensure_grad().data.data(), m, k);
      gx.noalias() += gm * wm.transpose();
    }
    if (self.parents[1]->requires_grad) {
      MapRMConst xm(self.parents[0]->val.data.data(), m, k);
      MapRM gw(self.parents[1]->ensure_grad().data.data(), k, n);
      gw.noalias() += xm.transpose() * gm;
    }
    if (self.parents[2]->requires_grad) {
      auto& gb = self.parents[2]->ensure_grad();
      for (std::int64_t r = 0; r < m; ++r) {
        for (std::int64_t c = 0; c < n; ++c) gb[c] += gm(r, c);
      }
    }
  });
}

// ---------------------------------------------------------------- conv / grid

namespace {

Eigen::MatrixXd im2col(const Tensor& x, int ci, int h, int w, int kh, int kw, int stride, int pad,
                       int ho, int wo) {
  Eigen::MatrixXd m(static_cast<std::int64_t>(ci) * kh * kw, static_cast<std::int64_t>(ho) * wo);
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const std::int64_t col = static_cast<std::int64_t>(oy) * wo + ox;
      const int iy0 = oy * stride - pad;
      const int ix0 = ox * stride - pad;
      std::int64_t row = 0;
      for (int c = 0; c < ci; ++c) {
        const double* xc = x.data.data() + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = iy0 + ky;
          for (int kx = 0; kx < kw; ++kx, ++row) {
            const int ix = ix0 + kx;
            m(row, col) =
                (iy >= 0 && iy < h && ix >= 0 && ix < w) ? xc[static_cast<std::int64_t>(iy) * w + ix] : 0.0;
          }
        }
      }
    }
  }
  return m;
}

void col2im_accum(const Eigen::MatrixXd& cols, Tensor& dx, int ci, int h, int w, int kh, int kw,
                  int stride, int pad, int ho, int wo) {
  for (int oy = 0; oy < ho; ++oy) {
    for (int ox = 0; ox < wo; ++ox) {
      const std::int64_t col = static_cast<std::int64_t>(oy) * wo + ox;
      const int iy0 = oy * stride - pad;
      const int ix0 = ox * stride - pad;
      std::int64_t row = 0;
      for (int c = 0; c < ci; ++c) {
        double* xc = dx.data.data() + static_cast<std::size_t>(c) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = iy0 + ky;
          for (int kx = 0; kx < kw; ++kx, ++row) {
            const int ix = ix0 + kx;
            if (iy >= 0 && iy < h && ix >= 0 && ix < w) {
              xc[static_cast<std::int64_t>(iy) * w + ix] += cols(row, col);
            }
          }
        }
      }
    }
  }
}

}  // namespace

Value conv2d(const Value& x, const Value& w, const Value& b, int stride, int pad) {
  if (x->val.ndim() != 3 || w->val.ndim() != 4 || b->val.ndim() != 1) {
    throw std::invalid_argument("conv2d: bad tensor ranks");
  }
  const int ci = static_cast<int>(x->val.shape[0]);
  const int h = static_cast<int>(x->val.shape[1]);
  const int wd = static_cast<int>(x->val.shape[2]);
  const int co = static_cast<int>(w->val.shape[0]);
  const int kh = static_cast<int>(w->val.shape[2]);
  const int kw = static_cast<int>(w->val.shape[3]);
  if (w->val.shape[1] != ci || b->val.shape[0] != co) {
    throw std::invalid_argument("conv2d: channel mismatch");
  }
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const int ho = (h + 2 * pad - kh) / stride + 1;
  const int wo = (wd + 2 * pad - kw) / stride + 1;
  if (ho <= 0 || wo <= 0) throw std::invalid_argument("conv2d: empty output");

  auto cols = std::make_shared<Eigen::MatrixXd>(im2col(x->val, ci, h, wd, kh, kw, stride, pad, ho, wo));
  Tensor out({co, ho, wo});
  {
    MapRMConst wm(w->val.data.data(), co, static_cast<std::int64_t>(ci) * kh * kw);
    MapRM om(out.data.data(), co, static_cast<std::int64_t>(ho) * wo);
    om.noalias() = wm * (*cols);
    for (int c = 0; c < co; ++c) om.row(c).array() += b->val[c];
  }
  return make_node(std::move(out), {x, w, b},
                   [cols, ci, h, wd, co, kh, kw, stride, pad, ho, wo](Node& self) {
                     MapRMConst gm(self.grad.data.data(), co, static_cast<std::int64_t>(ho) * wo);
                     if (self.parents[1]->requires_grad) {
                       MapRM gw(self.parents[1]->ensure_grad().data.data(), co,
                                static_cast<std::int64_t>(ci) * kh * kw);
                       gw.noalias() += gm * cols->transpose();
                     }
                     if (self.parents[2]->requires_grad) {
                       auto& gb = self.parents[2]->ensure_grad();
                       for (int c = 0; c < co; ++c) gb[c] += gm.row(c).sum();
                     }
                     if (self.parents[0]->requires_grad) {
                       MapRMConst wm(self.parents[1]->val.data.data(), co,
                                     static_cast<std::int64_t>(ci) * kh * kw);
                       const Eigen::MatrixXd dcols = wm.transpose() * gm;
                       col2im_accum(dcols, self.parents[0]->ensure_grad(), ci, h, wd, kh, kw,
                                    stride, pad, ho, wo);
                     }
                   });
}

Value mul_bcast_hw(const Value& x, const Value& m) {
  if (x->val.ndim() != 3 || m->val.ndim() != 2 || x->val.shape[1] != m->val.shape[0] ||
      x->val.shape[2] != m->val.shape[1]) {
    throw std::invalid_argument("mul_bcast_hw: shape mismatch");
  }
  const std::int64_t c = x->val.shape[0], hw = x->val.shape[1] * x->val.shape[2];
  Tensor out = x->val;
  for (std::int64_t ci = 0; ci < c; ++ci) {
    for (std::int64_t i = 0; i < hw; ++i) out[ci * hw + i] *= m->val[i];
  }
  return make_node(std::move(out), {x, m}, [c, hw](Node& self) {
    const Tensor& xv = self.parents[0]->val;
    const Tensor& mv = self.parents[1]->val;
    if (self.parents[0]->requires_grad) {
      auto& g = self.parents[0]->ensure_grad();
      for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t i = 0; i < hw; ++i) g[ci * hw + i] += self.grad[ci * hw + i] * mv[i];
      }
    }
    if (self.parents[1]->requires_grad) {
      auto& g = self.parents[1]->ensure_grad();
      for (std::int64_t ci = 0; ci < c; ++ci) {
        for (std::int64_t i = 0; i < hw; ++i) g[i] += self.grad[ci * hw + i] * xv[ci * hw + i];
      }
    }
  });
}

Value mean_hw(const Value& x) {
  if (x->val.ndim() != 3) throw std::invalid_argument("mean_hw: expected [C,H,W]");
  const std::int64_t c = x->val.shape[0], hw = x->val.shape[1] * x->val.shape[2];
  if (hw == 0) throw std::invalid_argument("mean_hw: empty grid");
  Tensor out({c});
  for (std::int64_t ci = 0; ci < c; ++ci) {
    double s = 0.0;
    for (std::int64_t i = 0; i < hw; ++i) s += x->val[ci * hw + i];
    out[ci] = s / static_cast<double>(hw);
  }
  return make_node(std::move(out), {x}, [c, hw](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const double gc = self.grad[ci] / static_cast<double>(hw);
      for (std::int64_t i = 0; i < hw; ++i) g[ci * hw + i] += gc;
    }
  });
}

Value channel_max(const Value& x) {
  if (x->val.ndim() != 3) throw std::invalid_argument("channel_max: expected [A,H,W]");
  const std::int64_t a = x->val.shape[0], hw = x->val.shape[1] * x->val.shape[2];
  Tensor out({x->val.shape[1], x->val.shape[2]});
  auto arg = std::make_shared<std::vector<std::int32_t>>(hw, 0);
  for (std::int64_t i = 0; i < hw; ++i) {
    double best = x->val[i];
    std::int32_t bi = 0;
    for (std::int64_t ai = 1; ai < a; ++ai) {
      const double v = x->val[ai * hw + i];
      if (v > best) {
        best = v;
        bi = static_cast<std::int32_t>(ai);
      }
    }
    out[i] = best;
    (*arg)[i] = bi;
  }
  return make_node(std::move(out), {x}, [arg, hw](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < hw; ++i) g[(*arg)[i] * hw + i] += self.grad[i];
  });
}

// ------------------------------------------------------------- pillar plumbing

Value segment_max(const Value& x, std::vector<int> seg, int n_seg) {
  if (x->val.ndim() != 2) throw std::invalid_argument("segment_max: expected [N,D]");
  const std::int64_t n = x->val.shape[0], d = x->val.shape[1];
  if (static_cast<std::int64_t>(seg.size()) != n) {
    throw std::invalid_argument("segment_max: segment id count mismatch");
  }
  Tensor out({n_seg, d});
  auto arg = std::make_shared<std::vector<std::int32_t>>(static_cast<std::size_t>(n_seg) * d, -1);
  for (std::int64_t r = 0; r < n; ++r) {
    const int s = seg[static_cast<std::size_t>(r)];
    if (s < 0 || s >= n_seg) throw std::invalid_argument("segment_max: segment id out of range");
    for (std::int64_t c = 0; c < d; ++c) {
      const double v = x->val[r * d + c];
      auto& a = (*arg)[static_cast<std::size_t>(s) * d + c];
      if (a < 0 || v > out[s * d + c]) {
        out[s * d + c] = v;
        a = static_cast<std::int32_t>(r);
      }
    }
  }
  for (const auto a : *arg) {
    if (a < 0) throw std::invalid_argument("segment_max: empty segment");
  }
  return make_node(std::move(out), {x}, [arg, d](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) {
      g[static_cast<std::int64_t>((*arg)[i]) * d + (i % d)] += self.grad[i];
    }
  });
}

Value scatter_hw(const Value& x, std::vector<int> cells, int height, int width) {
  if (x->val.ndim() != 2) throw std::invalid_argument("scatter_hw: expected [S,D]");
  const std::int64_t s = x->val.shape[0], d = x->val.shape[1];
  if (static_cast<std::int64_t>(cells.size()) != s) {
    throw std::invalid_argument("scatter_hw: cell count mismatch");
  }
  const std::int64_t hw = static_cast<std::int64_t>(height) * width;
  Tensor out({d, height, width});
  std::vector<bool> seen(static_cast<std::size_t>(hw), false);
  for (std::int64_t si = 0; si < s; ++si) {
    const int cell = cells[static_cast<std::size_t>(si)];
    if (cell < 0 || cell >= hw) throw std::invalid_argument("scatter_hw: cell index out of range");
    if (seen[static_cast<std::size_t>(cell)]) {
      throw std::invalid_argument("scatter_hw: duplicate cell");
    }
    seen[static_cast<std::size_t>(cell)] = true;
    for (std::int64_t c = 0; c < d; ++c) out[c * hw + cell] = x->val[si * d + c];
  }
  auto cells_keep = std::make_shared<std::vector<int>>(std::move(cells));
  return make_node(std::move(out), {x}, [cells_keep, d, hw](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t si = 0; si < cells_keep->size(); ++si) {
      const int cell = (*cells_keep)[si];
      for (std::int64_t c = 0; c < d; ++c) {
        g[static_cast<std::int64_t>(si) * d + c] += self.grad[c * hw + cell];
      }
    }
  });
}

// ------------------------------------------------------------------ reductions

Value sum(const Value& x) {
  double s = 0.0;
  for (double v : x->val.data) s += v;
  return make_node(Tensor::scalar(s), {x}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double up = self.grad[0];
    for (auto& v : g.data) v += up;
  });
}

Value mean_all(const Value& x) {
  const std::int64_t n = x->val.numel();
  if (n == 0) throw std::invalid_argument("mean_all: empty tensor");
  double s = 0.0;
  for (double v : x->val.data) s += v;
  return make_node(Tensor::scalar(s / static_cast<double>(n)), {x}, [n](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const double up = self.grad[0] / static_cast<double>(n);
    for (auto& v : g.data) v += up;
  });
}

// ------------------------------------------------------------------ stochastic

Value dropout(const Value& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0,1)");
  Tensor mask(x->val.shape);
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& m : mask.data) m = rng.uniform() >= p ? keep_scale : 0.0;
  Tensor out = x->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= mask[i];
  auto mask_keep = std::make_shared<Tensor>(std::move(mask));
  return make_node(std::move(out), {x}, [mask_keep](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * (*mask_keep)[i];
  });
}

// ------------------------------------------------------------------------- grl

Value grl(const Value& x, double gamma) {
  Tensor out = x->val;
  return make_node(std::move(out), {x}, [gamma](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += gamma * self.grad[i];
  });
}

// ---------------------------------------------------------------- fused losses

Value bce_with_logits(const Value& logits, const Tensor& labels) {
  if (!logits->val.same_shape(labels)) {
    throw std::invalid_argument("bce_with_logits: label shape mismatch");
  }
  Tensor out(logits->val.shape);
  auto dz = std::make_shared<Tensor>(logits->val.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double z = logits->val[i];
    const double y = labels[i];
    out[i] = softplus(z) - z * y;
    (*dz)[i] = sigmoid_stable(z) - y;
  }
  return make_node(std::move(out), {logits}, [dz](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * (*dz)[i];
  });
}

Value focal_loss_with_logits(const Value& logits, const Tensor& targets, const Tensor& mask,
                             double alpha, double gamma) {
  if (!logits->val.same_shape(targets) || !logits->val.same_shape(mask)) {
    throw std::invalid_argument("focal_loss_with_logits: shape mismatch");
  }
  Tensor out(logits->val.shape);
  auto dz = std::make_shared<Tensor>(logits->val.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    if (mask[i] == 0.0) continue;
    const double z = logits->val[i];
    const bool pos = targets[i] > 0.5;
    const double p = sigmoid_stable(z);
    const double pt = pos ? p : 1.0 - p;
    const double at = pos ? alpha : 1.0 - alpha;
    const double log_pt = pos ? -softplus(-z) : -softplus(z);
    const double one_m_pt = 1.0 - pt;
    out[i] = mask[i] * (-at * std::pow(one_m_pt, gamma) * log_pt);
    // dL/dz = s * at * (1-pt)^gamma * (gamma*pt*log(pt) + pt - 1), where the
    // sign s flips for negatives because dpt/dz does.
    const double core = std::pow(one_m_pt, gamma) * (gamma * pt * log_pt + pt - 1.0);
    (*dz)[i] = mask[i] * (pos ? at * core : -at * core);
  }
  return make_node(std::move(out), {logits}, [dz](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * (*dz)[i];
  });
}

Value smooth_l1(const Value& pred, const Tensor& target, const Tensor& mask, double delta) {
  if (!pred->val.same_shape(target) || !pred->val.same_shape(mask)) {
    throw std::invalid_argument("smooth_l1: shape mismatch");
  }
  if (delta <= 0.0) throw std::invalid_argument("smooth_l1: delta must be positive");
  Tensor out(pred->val.shape);
  auto dz = std::make_shared<Tensor>(pred->val.shape);
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    if (mask[i] == 0.0) continue;
    const double e = pred->val[i] - target[i];
    const double ae = std::abs(e);
    if (ae <= delta) {
      out[i] = mask[i] * 0.5 * e * e;
      (*dz)[i] = mask[i] * e;
    } else {
      out[i] = mask[i] * delta * (ae - 0.5 * delta);
      (*dz)[i] = mask[i] * (e > 0.0 ? delta : -delta);
    }
  }
  return make_node(std::move(out), {pred}, [dz](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * (*dz)[i];
  });
}

Value softmax_ce_map(const Value& logits, int label) {
  if (logits->val.ndim() != 3) throw std::invalid_argument("softmax_ce_map: expected [K,H,W]");
  const std::int64_t k = logits->val.shape[0];
  const std::int64_t hw = logits->val.shape[1] * logits->val.shape[2];
  if (label < 0 || label >= k) throw std::invalid_argument("softmax_ce_map: label out of range");
  Tensor out({logits->val.shape[1], logits->val.shape[2]});
  auto probs = std::make_shared<Tensor>(logits->val.shape);
  for (std::int64_t i = 0; i < hw; ++i) {
    double mx = logits->val[i];
    for (std::int64_t c = 1; c < k; ++c) mx = std::max(mx, logits->val[c * hw + i]);
    double denom = 0.0;
    for (std::int64_t c = 0; c < k; ++c) denom += std::exp(logits->val[c * hw + i] - mx);
    const double log_denom = std::log(denom);
    for (std::int64_t c = 0; c < k; ++c) {
      (*probs)[c * hw + i] = std::exp(logits->val[c * hw + i] - mx) / denom;
    }
    out[i] = -(logits->val[label * hw + i] - mx - log_denom);
  }
  return make_node(std::move(out), {logits}, [probs, k, hw, label](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < hw; ++i) {
      const double up = self.grad[i];
      for (std::int64_t c = 0; c < k; ++c) {
        g[c * hw + i] += up * ((*probs)[c * hw + i] - (c == label ? 1.0 : 0.0));
      }
    }
  });
}

Value mul_const(const Value& x, const Tensor& w) {
  if (!x->val.same_shape(w)) throw std::invalid_argument("mul_const: shape mismatch");
  Tensor out = x->val;
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= w[i];
  auto wk = std::make_shared<Tensor>(w);
  return make_node(std::move(out), {x}, [wk](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::int64_t i = 0; i < self.grad.numel(); ++i) g[i] += self.grad[i] * (*wk)[i];
  });
}

}  // namespace coopadapt::ad
