#include "migkit/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace migkit {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

}  // namespace detail

using detail::Node;

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

CMapMat cmap(const std::vector<double>& v, int rows, int cols) { return CMapMat(v.data(), rows, cols); }
MapMat map(std::vector<double>& v, int rows, int cols) { return MapMat(v.data(), rows, cols); }

// Gradient buffer of a parent, or nullptr when the parent needs none.
std::vector<double>* pgrad(Node& self, size_t i) {
  Node& p = *self.parents[i];
  if (!p.requires_grad) return nullptr;
  return &p.ensure_grad();
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

}  // namespace

struct OpBuilder {
  // Builds the result node; records the tape entry only when grad mode is on
  // and at least one input requires a gradient.
  static Tensor make(Shape shape, std::vector<double> data, const std::vector<const Tensor*>& inputs,
                     std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    if (g_grad_enabled) {
      bool any = false;
      for (const Tensor* t : inputs) any = any || (t->defined() && t->node_->requires_grad);
      if (any) {
        node->requires_grad = true;
        for (const Tensor* t : inputs) {
          // Undefined optional inputs become inert placeholders so parent
          // indices stay positional.
          node->parents.push_back(t->defined() ? t->node_ : std::make_shared<Node>());
        }
        node->backward_fn = std::move(backward_fn);
      }
    }
    return Tensor(std::move(node));
  }
  static const std::vector<double>& data(const Tensor& t) { return t.node_->data; }
};

namespace {
const std::vector<double>& D(const Tensor& t) { return OpBuilder::data(t); }
}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  for (int d : shape) require(d > 0, "tensor extents must be positive: " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->data.assign(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(node));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data) {
  for (int d : shape) require(d > 0, "tensor extents must be positive: " + shape_str(shape));
  require(static_cast<int64_t>(data.size()) == shape_numel(shape),
          "data size " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->data = std::move(data);
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng) {
  Tensor t = zeros(shape);
  for (double& v : t.node_->data) v = rng.normal();
  return t;
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, Rng& rng) {
  Tensor t = zeros(shape);
  for (double& v : t.node_->data) v = rng.uniform(lo, hi);
  return t;
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::dim(int i) const { return node_->shape.at(static_cast<size_t>(i)); }
int64_t Tensor::numel() const { return static_cast<int64_t>(node_->data.size()); }
std::span<const double> Tensor::data() const { return node_->data; }
std::span<double> Tensor::mutable_data() { return node_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  if (!on) node_->grad.clear();
  return *this;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }
std::span<double> Tensor::mutable_grad() { return node_->ensure_grad(); }

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const { return detach(); }

void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Release the tape; leaves keep their accumulated gradients.
  for (Node* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------------------
// elementwise

namespace {
void require_same(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  std::vector<double> out(D(a));
  const auto& bd = D(b);
  for (size_t i = 0; i < out.size(); ++i) out[i] += bd[i];
  return OpBuilder::make(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    for (size_t p = 0; p < 2; ++p)
      if (auto* g = pgrad(self, p))
        for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  std::vector<double> out(D(a));
  const auto& bd = D(b);
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bd[i];
  return OpBuilder::make(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = pgrad(self, 1))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  const auto& ad = D(a);
  const auto& bd = D(b);
  std::vector<double> out(ad.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return OpBuilder::make(a.shape(), std::move(out), {&a, &b}, [](Node& self) {
    const auto& ad = self.parents[0]->data;
    const auto& bd = self.parents[1]->data;
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bd[i];
    if (auto* g = pgrad(self, 1))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * ad[i];
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(D(a));
  for (double& v : out) v *= s;
  return OpBuilder::make(a.shape(), std::move(out), {&a}, [s](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * s;
  });
}

Tensor divide(const Tensor& a, double d) {
  if (d == 0.0) throw std::invalid_argument("divide: zero divisor");
  std::vector<double> out(D(a));
  for (double& v : out) v /= d;
  return OpBuilder::make(a.shape(), std::move(out), {&a}, [d](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] / d;
  });
}

Tensor square(const Tensor& x) { return mul(x, x); }

Tensor silu(const Tensor& x) {
  const auto& xd = D(x);
  std::vector<double> out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = xd[i] / (1.0 + std::exp(-xd[i]));
  return OpBuilder::make(x.shape(), std::move(out), {&x}, [](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    const auto& xd = self.parents[0]->data;
    for (size_t i = 0; i < g->size(); ++i) {
      const double s = 1.0 / (1.0 + std::exp(-xd[i]));
      (*g)[i] += self.grad[i] * (s + xd[i] * s * (1.0 - s));
    }
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& x) {
  const auto& xd = D(x);
  double s = std::accumulate(xd.begin(), xd.end(), 0.0);
  return OpBuilder::make({1}, {s}, {&x}, [](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (double& v : *g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
  require_same(pred, target, "mse_loss");
  const auto& pd = D(pred);
  const auto& td = D(target);
  double s = 0.0;
  for (size_t i = 0; i < pd.size(); ++i) {
    const double d = pd[i] - td[i];
    s += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(pd.size());
  return OpBuilder::make({1}, {s * inv_n}, {&pred, &target}, [inv_n](Node& self) {
    const auto& pd = self.parents[0]->data;
    const auto& td = self.parents[1]->data;
    const double g0 = self.grad[0] * 2.0 * inv_n;
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += g0 * (pd[i] - td[i]);
    if (auto* g = pgrad(self, 1))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] -= g0 * (pd[i] - td[i]);
  });
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& x, const Shape& shape) {
  require(shape_numel(shape) == x.numel(), "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  return OpBuilder::make(shape, D(x), {&x}, [](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x) {
  require(x.ndim() == 2, "transpose expects a matrix, got " + shape_str(x.shape()));
  const int n = x.dim(0), d = x.dim(1);
  const auto& xd = D(x);
  std::vector<double> out(xd.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j) * n + i] = xd[static_cast<size_t>(i) * d + j];
  return OpBuilder::make({d, n}, std::move(out), {&x}, [n, d](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) (*g)[static_cast<size_t>(i) * d + j] += self.grad[static_cast<size_t>(j) * n + i];
  });
}

namespace {
Tensor concat_leading(const std::vector<Tensor>& parts, const char* op) {
  require(!parts.empty(), std::string(op) + ": empty input list");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  int lead = 0;
  std::vector<double> out;
  std::vector<const Tensor*> inputs;
  std::vector<size_t> offsets;
  for (const Tensor& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    require(t == tail, std::string(op) + ": trailing shape mismatch " + shape_str(p.shape()));
    offsets.push_back(out.size());
    lead += p.dim(0);
    out.insert(out.end(), D(p).begin(), D(p).end());
    inputs.push_back(&p);
  }
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return OpBuilder::make(shape, std::move(out), inputs, [offsets](Node& self) {
    for (size_t p = 0; p < offsets.size(); ++p)
      if (auto* g = pgrad(self, p))
        for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[offsets[p] + i];
  });
}

Tensor slice_leading(const Tensor& x, int begin, int end, const char* op) {
  require(0 <= begin && begin < end && end <= x.dim(0),
          std::string(op) + ": bad range [" + std::to_string(begin) + "," + std::to_string(end) + ") for " +
              shape_str(x.shape()));
  const size_t inner = static_cast<size_t>(x.numel() / x.dim(0));
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> out(D(x).begin() + static_cast<std::ptrdiff_t>(inner * begin),
                          D(x).begin() + static_cast<std::ptrdiff_t>(inner * end));
  const size_t off = inner * static_cast<size_t>(begin);
  return OpBuilder::make(shape, std::move(out), {&x}, [off](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < self.grad.size(); ++i) (*g)[off + i] += self.grad[i];
  });
}
}  // namespace

Tensor concat_rows(const std::vector<Tensor>& parts) {
  for (const Tensor& p : parts) require(p.ndim() == 2, "concat_rows expects matrices");
  return concat_leading(parts, "concat_rows");
}

Tensor slice_rows(const Tensor& x, int begin, int end) {
  require(x.ndim() == 2, "slice_rows expects a matrix");
  return slice_leading(x, begin, end, "slice_rows");
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  for (const Tensor& p : parts) require(p.ndim() == 3, "concat_channels expects [C,H,W] tensors");
  return concat_leading(parts, "concat_channels");
}

Tensor slice_channels(const Tensor& x, int begin, int end) {
  require(x.ndim() == 3, "slice_channels expects a [C,H,W] tensor");
  return slice_leading(x, begin, end, "slice_channels");
}

Tensor mean_rows(const Tensor& x) {
  require(x.ndim() == 2, "mean_rows expects a matrix");
  const int n = x.dim(0), d = x.dim(1);
  const auto& xd = D(x);
  std::vector<double> out(static_cast<size_t>(d), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += xd[static_cast<size_t>(i) * d + j];
  for (double& v : out) v /= n;
  return OpBuilder::make({1, d}, std::move(out), {&x}, [n, d](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) (*g)[static_cast<size_t>(i) * d + j] += self.grad[j] / n;
  });
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& rows) {
  require(table.ndim() == 2, "gather_rows expects a matrix table");
  require(!rows.empty(), "gather_rows: empty index list");
  const int r = table.dim(0), d = table.dim(1);
  const auto& td = D(table);
  std::vector<double> out;
  out.reserve(rows.size() * static_cast<size_t>(d));
  for (int idx : rows) {
    require(0 <= idx && idx < r, "gather_rows: index " + std::to_string(idx) + " out of range");
    out.insert(out.end(), td.begin() + static_cast<std::ptrdiff_t>(idx) * d,
               td.begin() + static_cast<std::ptrdiff_t>(idx + 1) * d);
  }
  return OpBuilder::make({static_cast<int>(rows.size()), d}, std::move(out), {&table}, [rows, d](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < d; ++j) (*g)[static_cast<size_t>(rows[i]) * d + j] += self.grad[i * d + j];
  });
}

// ---------------------------------------------------------------------------
// broadcasts

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  require(x.ndim() == 3 && b.numel() == x.dim(0),
          "add_channel_bias: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  const int c = x.dim(0);
  const size_t hw = static_cast<size_t>(x.dim(1)) * x.dim(2);
  std::vector<double> out(D(x));
  const auto& bd = D(b);
  for (int k = 0; k < c; ++k)
    for (size_t i = 0; i < hw; ++i) out[k * hw + i] += bd[k];
  return OpBuilder::make(x.shape(), std::move(out), {&x, &b}, [c, hw](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = pgrad(self, 1))
      for (int k = 0; k < c; ++k) {
        double s = 0.0;
        for (size_t i = 0; i < hw; ++i) s += self.grad[k * hw + i];
        (*g)[k] += s;
      }
  });
}

Tensor add_row_bias(const Tensor& x, const Tensor& b) {
  require(x.ndim() == 2 && b.numel() == x.dim(1),
          "add_row_bias: " + shape_str(x.shape()) + " with bias " + shape_str(b.shape()));
  const int n = x.dim(0), d = x.dim(1);
  std::vector<double> out(D(x));
  const auto& bd = D(b);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(i) * d + j] += bd[j];
  return OpBuilder::make(x.shape(), std::move(out), {&x, &b}, [n, d](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = pgrad(self, 1))
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) (*g)[j] += self.grad[static_cast<size_t>(i) * d + j];
  });
}

Tensor modulate(const Tensor& x, std::span<const double> map_values) {
  require(x.ndim() == 3 && static_cast<int64_t>(map_values.size()) == static_cast<int64_t>(x.dim(1)) * x.dim(2),
          "modulate: map size does not match " + shape_str(x.shape()));
  const int c = x.dim(0);
  const size_t hw = map_values.size();
  std::vector<double> m(map_values.begin(), map_values.end());
  std::vector<double> out(D(x));
  for (int k = 0; k < c; ++k)
    for (size_t i = 0; i < hw; ++i) out[k * hw + i] *= m[i];
  return OpBuilder::make(x.shape(), std::move(out), {&x}, [c, hw, m = std::move(m)](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (int k = 0; k < c; ++k)
        for (size_t i = 0; i < hw; ++i) (*g)[k * hw + i] += self.grad[k * hw + i] * m[i];
  });
}

// ---------------------------------------------------------------------------
// dense layers

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  std::vector<double> out(static_cast<size_t>(n) * m);
  map(out, n, m).noalias() = cmap(D(a), n, k) * cmap(D(b), k, m);
  return OpBuilder::make({n, m}, std::move(out), {&a, &b}, [n, k, m](Node& self) {
    auto go = cmap(self.grad, n, m);
    if (auto* g = pgrad(self, 0)) map(*g, n, k).noalias() += go * cmap(self.parents[1]->data, k, m).transpose();
    if (auto* g = pgrad(self, 1)) map(*g, k, m).noalias() += cmap(self.parents[0]->data, n, k).transpose() * go;
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1),
          "linear: input " + shape_str(x.shape()) + " weight " + shape_str(w.shape()));
  const int n = x.dim(0), din = x.dim(1), dout = w.dim(0);
  if (bias.defined()) require(bias.numel() == dout, "linear: bias size mismatch");
  std::vector<double> out(static_cast<size_t>(n) * dout);
  auto o = map(out, n, dout);
  o.noalias() = cmap(D(x), n, din) * cmap(D(w), dout, din).transpose();
  if (bias.defined()) {
    Eigen::Map<const Eigen::RowVectorXd> bv(D(bias).data(), dout);
    o.rowwise() += bv;
  }
  return OpBuilder::make({n, dout}, std::move(out), {&x, &w, &bias}, [n, din, dout](Node& self) {
    auto go = cmap(self.grad, n, dout);
    if (auto* g = pgrad(self, 0)) map(*g, n, din).noalias() += go * cmap(self.parents[1]->data, dout, din);
    if (auto* g = pgrad(self, 1)) map(*g, dout, din).noalias() += go.transpose() * cmap(self.parents[0]->data, n, din);
    if (auto* g = pgrad(self, 2)) {
      // fixed summation order
      const double* gd = self.grad.data();
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < dout; ++j) (*g)[j] += gd[static_cast<size_t>(i) * dout + j];
    }
  });
}

Tensor softmax_rows(const Tensor& x) {
  require(x.ndim() == 2, "softmax_rows expects a matrix");
  const int n = x.dim(0), d = x.dim(1);
  const auto& xd = D(x);
  std::vector<double> out(xd.size());
  for (int i = 0; i < n; ++i) {
    const double* r = &xd[static_cast<size_t>(i) * d];
    double* o = &out[static_cast<size_t>(i) * d];
    const double mx = *std::max_element(r, r + d);
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += (o[j] = std::exp(r[j] - mx));
    for (int j = 0; j < d; ++j) o[j] /= s;
  }
  std::vector<double> y = out;
  return OpBuilder::make({n, d}, std::move(out), {&x}, [n, d, y = std::move(y)](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (int i = 0; i < n; ++i) {
      const size_t o = static_cast<size_t>(i) * d;
      double dot = 0.0;
      for (int j = 0; j < d; ++j) dot += self.grad[o + j] * y[o + j];
      for (int j = 0; j < d; ++j) (*g)[o + j] += y[o + j] * (self.grad[o + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d (3x3) via im2col + GEMM

namespace {

struct ConvGeom {
  int c, h, w, k, stride, pad, oh, ow;
};

void im2col(const double* x, const ConvGeom& g, std::vector<double>& cols) {
  const int ohw = g.oh * g.ow;
  cols.assign(static_cast<size_t>(g.c) * 9 * ohw, 0.0);
  for (int ci = 0; ci < g.c; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        double* row = &cols[(static_cast<size_t>(ci) * 9 + ky * 3 + kx) * ohw];
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const double* src = x + (static_cast<size_t>(ci) * g.h + iy) * g.w;
          double* dst = row + static_cast<size_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ox] = src[ix];
          }
        }
      }
}

void col2im_add(const std::vector<double>& cols, const ConvGeom& g, double* dx) {
  const int ohw = g.oh * g.ow;
  for (int ci = 0; ci < g.c; ++ci)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const double* row = &cols[(static_cast<size_t>(ci) * 9 + ky * 3 + kx) * ohw];
        for (int oy = 0; oy < g.oh; ++oy) {
          const int iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          double* dst = dx + (static_cast<size_t>(ci) * g.h + iy) * g.w;
          const double* src = row + static_cast<size_t>(oy) * g.ow;
          for (int ox = 0; ox < g.ow; ++ox) {
            const int ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require(x.ndim() == 3, "conv2d: input must be [C,H,W], got " + shape_str(x.shape()));
  require(w.ndim() == 4 && w.dim(2) == 3 && w.dim(3) == 3, "conv2d: kernel must be [K,C,3,3], got " + shape_str(w.shape()));
  require(w.dim(1) == x.dim(0), "conv2d: channel mismatch " + shape_str(x.shape()) + " vs kernel " + shape_str(w.shape()));
  require(stride == 1 || stride == 2, "conv2d: stride must be 1 or 2");
  require(pad == 0 || pad == 1, "conv2d: pad must be 0 or 1");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), w.dim(0), stride, pad, 0, 0};
  g.oh = (g.h + 2 * pad - 3) / stride + 1;
  g.ow = (g.w + 2 * pad - 3) / stride + 1;
  require(g.oh >= 1 && g.ow >= 1, "conv2d: input too small " + shape_str(x.shape()));
  if (b.defined()) require(b.numel() == g.k, "conv2d: bias size mismatch");

  const int ohw = g.oh * g.ow, ckk = g.c * 9;
  std::vector<double> cols;
  im2col(D(x).data(), g, cols);
  std::vector<double> out(static_cast<size_t>(g.k) * ohw);
  auto o = map(out, g.k, ohw);
  o.noalias() = cmap(D(w), g.k, ckk) * cmap(cols, ckk, ohw);
  if (b.defined()) {
    Eigen::Map<const Eigen::VectorXd> bv(D(b).data(), g.k);
    o.colwise() += bv;
  }
  // Keep the column buffer only when a weight gradient will be needed.
  const bool keep_cols = g_grad_enabled && w.requires_grad();
  if (!keep_cols) cols.clear();
  return OpBuilder::make({g.k, g.oh, g.ow}, std::move(out), {&x, &w, &b},
                         [g, ohw, ckk, cols = std::move(cols)](Node& self) {
                           auto go = cmap(self.grad, g.k, ohw);
                           if (auto* gw = pgrad(self, 1))
                             map(*gw, g.k, ckk).noalias() += go * cmap(cols, ckk, ohw).transpose();
                           if (auto* gb = pgrad(self, 2)) {
                             const double* gd = self.grad.data();
                             for (int k = 0; k < g.k; ++k) {
                               double acc = 0.0;
                               for (int i = 0; i < ohw; ++i) acc += gd[static_cast<size_t>(k) * ohw + i];
                               (*gb)[k] += acc;
                             }
                           }
                           if (auto* gx = pgrad(self, 0)) {
                             std::vector<double> dcols(static_cast<size_t>(ckk) * ohw);
                             map(dcols, ckk, ohw).noalias() = cmap(self.parents[1]->data, g.k, ckk).transpose() * go;
                             col2im_add(dcols, g, gx->data());
                           }
                         });
}

// ---------------------------------------------------------------------------
// bilinear interpolation (align_corners = false)

namespace {

struct Tap {
  int i0, i1;
  double l1;  // weight of i1; i0 gets 1 - l1
};

std::vector<Tap> taps(int in, int out) {
  std::vector<Tap> t(static_cast<size_t>(out));
  const double sc = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * sc - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    t[o] = {i0, i1, src - i0};
  }
  return t;
}

}  // namespace

Tensor bilinear_interp(const Tensor& x, int out_h, int out_w) {
  require(x.ndim() == 3 || x.ndim() == 2, "bilinear_interp expects [C,H,W] or [H,W], got " + shape_str(x.shape()));
  require(out_h >= 1 && out_w >= 1, "bilinear_interp: target extent must be >= 1");
  const bool planar = x.ndim() == 2;
  const int c = planar ? 1 : x.dim(0);
  const int h = planar ? x.dim(0) : x.dim(1);
  const int w = planar ? x.dim(1) : x.dim(2);
  auto ty = taps(h, out_h);
  auto tx = taps(w, out_w);
  const auto& xd = D(x);
  std::vector<double> out(static_cast<size_t>(c) * out_h * out_w);
  for (int k = 0; k < c; ++k) {
    const double* src = &xd[static_cast<size_t>(k) * h * w];
    double* dst = &out[static_cast<size_t>(k) * out_h * out_w];
    for (int oy = 0; oy < out_h; ++oy) {
      const Tap& a = ty[oy];
      const double* r0 = src + static_cast<size_t>(a.i0) * w;
      const double* r1 = src + static_cast<size_t>(a.i1) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const Tap& bt = tx[ox];
        const double top = r0[bt.i0] * (1.0 - bt.l1) + r0[bt.i1] * bt.l1;
        const double bot = r1[bt.i0] * (1.0 - bt.l1) + r1[bt.i1] * bt.l1;
        dst[static_cast<size_t>(oy) * out_w + ox] = top * (1.0 - a.l1) + bot * a.l1;
      }
    }
  }
  Shape shape = planar ? Shape{out_h, out_w} : Shape{c, out_h, out_w};
  return OpBuilder::make(shape, std::move(out), {&x}, [c, h, w, out_h, out_w, ty, tx](Node& self) {
    auto* g = pgrad(self, 0);
    if (!g) return;
    for (int k = 0; k < c; ++k) {
      double* dsrc = g->data() + static_cast<size_t>(k) * h * w;
      const double* go = &self.grad[static_cast<size_t>(k) * out_h * out_w];
      for (int oy = 0; oy < out_h; ++oy) {
        const Tap& a = ty[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const Tap& bt = tx[ox];
          const double v = go[static_cast<size_t>(oy) * out_w + ox];
          const double vt = v * (1.0 - a.l1), vb = v * a.l1;
          dsrc[static_cast<size_t>(a.i0) * w + bt.i0] += vt * (1.0 - bt.l1);
          dsrc[static_cast<size_t>(a.i0) * w + bt.i1] += vt * bt.l1;
          dsrc[static_cast<size_t>(a.i1) * w + bt.i0] += vb * (1.0 - bt.l1);
          dsrc[static_cast<size_t>(a.i1) * w + bt.i1] += vb * bt.l1;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// attention

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<bool>& key_mask,
                 const Tensor& bias) {
  require(q.ndim() == 2 && k.ndim() == 2 && v.ndim() == 2, "attention expects matrices");
  require(q.dim(1) == k.dim(1) && q.dim(1) > 0, "attention: Q/K width mismatch");
  require(k.dim(0) == v.dim(0), "attention: K/V length mismatch");
  const int n = q.dim(0), d = q.dim(1), m = k.dim(0), dv = v.dim(1);
  require(key_mask.empty() || static_cast<int>(key_mask.size()) == m, "attention: mask length must equal key count");
  if (bias.defined()) require(bias.ndim() == 2 && bias.dim(0) == n && bias.dim(1) == m, "attention: bias must be [n,m]");

  // Masked keys are dropped before any arithmetic.
  std::vector<int> kept;
  for (int j = 0; j < m; ++j)
    if (key_mask.empty() || key_mask[j]) kept.push_back(j);
  if (kept.empty()) throw std::invalid_argument("attention: all keys are masked");
  const int mk = static_cast<int>(kept.size());
  const bool compact = mk != m;

  std::vector<double> kc, vc;
  const double* kp = D(k).data();
  const double* vp = D(v).data();
  if (compact) {
    kc.resize(static_cast<size_t>(mk) * d);
    vc.resize(static_cast<size_t>(mk) * dv);
    for (int j = 0; j < mk; ++j) {
      std::copy_n(kp + static_cast<size_t>(kept[j]) * d, d, &kc[static_cast<size_t>(j) * d]);
      std::copy_n(vp + static_cast<size_t>(kept[j]) * dv, dv, &vc[static_cast<size_t>(j) * dv]);
    }
    kp = kc.data();
    vp = vc.data();
  }
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  Eigen::Map<const RowMat> K(kp, mk, d), V(vp, mk, dv);
  RowMat P = (cmap(D(q), n, d) * K.transpose()) * inv_sqrt_d;
  if (bias.defined()) {
    const auto& bd = D(bias);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < mk; ++j) P(i, j) += bd[static_cast<size_t>(i) * m + kept[j]];
  }
  for (int i = 0; i < n; ++i) {
    const double mx = P.row(i).maxCoeff();
    double s = 0.0;
    for (int j = 0; j < mk; ++j) s += (P(i, j) = std::exp(P(i, j) - mx));
    P.row(i) /= s;
  }
  std::vector<double> out(static_cast<size_t>(n) * dv);
  map(out, n, dv).noalias() = P * V;

  return OpBuilder::make(
      {n, dv}, std::move(out), {&q, &k, &v, &bias},
      [n, d, m, dv, mk, kept = std::move(kept), P = std::move(P), kc = std::move(kc), vc = std::move(vc), compact,
       inv_sqrt_d](Node& self) {
        const double* kp = compact ? kc.data() : self.parents[1]->data.data();
        const double* vp = compact ? vc.data() : self.parents[2]->data.data();
        Eigen::Map<const RowMat> K(kp, mk, d), V(vp, mk, dv);
        auto go = cmap(self.grad, n, dv);
        RowMat dP = go * V.transpose();
        RowMat dS(n, mk);
        for (int i = 0; i < n; ++i) {
          const double dot = dP.row(i).dot(P.row(i));
          dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix();
        }
        if (auto* g = pgrad(self, 0)) map(*g, n, d).noalias() += (dS * K) * inv_sqrt_d;
        if (auto* g = pgrad(self, 1)) {
          RowMat dK = (dS.transpose() * cmap(self.parents[0]->data, n, d)) * inv_sqrt_d;
          for (int j = 0; j < mk; ++j)
            for (int c = 0; c < d; ++c) (*g)[static_cast<size_t>(kept[j]) * d + c] += dK(j, c);
        }
        if (auto* g = pgrad(self, 2)) {
          RowMat dV = P.transpose() * go;
          for (int j = 0; j < mk; ++j)
            for (int c = 0; c < dv; ++c) (*g)[static_cast<size_t>(kept[j]) * dv + c] += dV(j, c);
        }
        if (auto* g = pgrad(self, 3))
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < mk; ++j) (*g)[static_cast<size_t>(i) * m + kept[j]] += dS(i, j);
      });
}

// ---------------------------------------------------------------------------
// patchify

namespace {
// Flat index map: token-major position -> [C,H,W] position.
std::vector<size_t> patch_index(int c, int h, int w, int p) {
  const int gh = h / p, gw = w / p;
  std::vector<size_t> idx;
  idx.reserve(static_cast<size_t>(c) * h * w);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px)
      for (int ch = 0; ch < c; ++ch)
        for (int dy = 0; dy < p; ++dy)
          for (int dx = 0; dx < p; ++dx)
            idx.push_back((static_cast<size_t>(ch) * h + py * p + dy) * w + px * p + dx);
  return idx;
}
}  // namespace

Tensor patchify(const Tensor& x, int p) {
  require(x.ndim() == 3 && p >= 1 && x.dim(1) % p == 0 && x.dim(2) % p == 0,
          "patchify: " + shape_str(x.shape()) + " not divisible by patch " + std::to_string(p));
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto idx = patch_index(c, h, w, p);
  const auto& xd = D(x);
  std::vector<double> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[i] = xd[idx[i]];
  return OpBuilder::make({(h / p) * (w / p), c * p * p}, std::move(out), {&x}, [idx](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < idx.size(); ++i) (*g)[idx[i]] += self.grad[i];
  });
}

Tensor unpatchify(const Tensor& tokens, int channels, int h, int w, int p) {
  require(h % p == 0 && w % p == 0, "unpatchify: extents not divisible by patch");
  require(tokens.ndim() == 2 && tokens.dim(0) == (h / p) * (w / p) && tokens.dim(1) == channels * p * p,
          "unpatchify: token shape " + shape_str(tokens.shape()) + " does not match target");
  auto idx = patch_index(channels, h, w, p);
  const auto& td = D(tokens);
  std::vector<double> out(idx.size());
  for (size_t i = 0; i < idx.size(); ++i) out[idx[i]] = td[i];
  return OpBuilder::make({channels, h, w}, std::move(out), {&tokens}, [idx](Node& self) {
    if (auto* g = pgrad(self, 0))
      for (size_t i = 0; i < idx.size(); ++i) (*g)[i] += self.grad[idx[i]];
  });
}

// ---------------------------------------------------------------------------
// finite differences

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps,
                                  int64_t max_coords_per_param, Rng* coord_rng) {
  std::vector<Tensor> ps = params;
  for (Tensor& p : ps) p.zero_grad();
  {
    Tensor loss = f();
    if (loss.numel() != 1) throw ShapeError("finite_diff_check: loss must be scalar");
    loss.backward();
  }
  GradCheckResult res;
  NoGradGuard ng;
  for (Tensor& p : ps) {
    std::vector<double> analytic(static_cast<size_t>(p.numel()), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    std::vector<int64_t> coords(static_cast<size_t>(p.numel()));
    std::iota(coords.begin(), coords.end(), 0);
    if (max_coords_per_param > 0 && static_cast<int64_t>(coords.size()) > max_coords_per_param) {
      if (coord_rng) std::shuffle(coords.begin(), coords.end(), coord_rng->engine());
      coords.resize(static_cast<size_t>(max_coords_per_param));
    }
    auto data = p.mutable_data();
    for (int64_t c : coords) {
      const double orig = data[c];
      data[c] = orig + eps;
      const double fp = f().item();
      data[c] = orig - eps;
      const double fm = f().item();
      data[c] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[static_cast<size_t>(c)];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
      ++res.checked;
    }
  }
  for (Tensor& p : ps) p.zero_grad();
  return res;
}

}  // namespace migkit
