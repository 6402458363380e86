#include "migkit/nn.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace migkit::nn {

Tensor init_uniform(const Shape& shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  return Tensor::uniform(shape, -bound, bound, rng);
}

// ---------------------------------------------------------------------------
// Linear

Linear::Linear(std::string name, int d_in, int d_out, bool bias, Rng& rng, Role role) : s_(std::make_shared<State>()) {
  s_->name = std::move(name);
  s_->role = role;
  s_->weight = init_uniform({d_out, d_in}, d_in, rng);
  if (bias) s_->bias = init_uniform({d_out}, d_in, rng);
}

Linear Linear::zeros(std::string name, int d_in, int d_out, bool bias, Role role) {
  Linear l;
  l.s_ = std::make_shared<State>();
  l.s_->name = std::move(name);
  l.s_->role = role;
  l.s_->weight = Tensor::zeros({d_out, d_in});
  if (bias) l.s_->bias = Tensor::zeros({d_out});
  return l;
}

Linear Linear::identity(std::string name, int d, Role role) {
  Linear l = zeros(std::move(name), d, d, false, role);
  auto w = l.s_->weight.mutable_data();
  for (int i = 0; i < d; ++i) w[static_cast<size_t>(i) * d + i] = 1.0;
  return l;
}

Tensor Linear::forward(const Tensor& x, bool with_adapter) const {
  Tensor y = linear(x, s_->weight, s_->bias);
  if (with_adapter && s_->adapter && !s_->merged) {
    const LoraAdapter& ad = *s_->adapter;
    Tensor delta = linear(linear(x, ad.a, {}), ad.b, {});
    y = add(y, scale(delta, ad.scaling()));
  }
  return y;
}

void Linear::attach_adapter(int rank, double alpha, Rng& rng) {
  if (rank < 1) throw std::invalid_argument("LoRA rank must be >= 1");
  if (!(alpha > 0.0)) throw std::invalid_argument("LoRA alpha must be positive");
  if (s_->adapter) throw std::logic_error("adapter already attached to " + s_->name);
  auto ad = std::make_unique<LoraAdapter>();
  ad->rank = rank;
  ad->alpha = alpha;
  ad->a = init_uniform({rank, d_in()}, d_in(), rng);
  ad->b = Tensor::zeros({d_out(), rank});
  ad->a.set_requires_grad(true);
  ad->b.set_requires_grad(true);
  s_->adapter = std::move(ad);
  s_->merged = false;
}

void Linear::merge_adapter() {
  if (!s_->adapter) throw std::logic_error("no adapter attached to " + s_->name);
  if (s_->merged) throw std::logic_error("adapter on " + s_->name + " is already merged");
  const LoraAdapter& ad = *s_->adapter;
  const int dout = d_out(), din = d_in(), r = ad.rank;
  const double sc = ad.scaling();
  auto w = s_->weight.mutable_data();
  auto a = ad.a.data();
  auto b = ad.b.data();
  for (int o = 0; o < dout; ++o)
    for (int i = 0; i < din; ++i) {
      double s = 0.0;
      for (int k = 0; k < r; ++k) s += b[static_cast<size_t>(o) * r + k] * a[static_cast<size_t>(k) * din + i];
      w[static_cast<size_t>(o) * din + i] += sc * s;
    }
  s_->merged = true;
}

void Linear::detach_adapter() {
  if (!s_->adapter) throw std::logic_error("no adapter attached to " + s_->name);
  if (s_->merged) throw std::logic_error("cannot detach merged adapter on " + s_->name);
  s_->adapter.reset();
}

// ---------------------------------------------------------------------------
// Conv2d

Conv2d::Conv2d(std::string name, int c_in, int c_out, int stride, Rng& rng, Role role, bool bias)
    : s_(std::make_shared<State>()) {
  s_->name = std::move(name);
  s_->stride = stride;
  s_->role = role;
  s_->weight = init_uniform({c_out, c_in, 3, 3}, c_in * 9, rng);
  if (bias) s_->bias = init_uniform({c_out}, c_in * 9, rng);
}

Conv2d Conv2d::zeros(std::string name, int c_in, int c_out, int stride, Role role, bool bias) {
  Conv2d c;
  c.s_ = std::make_shared<State>();
  c.s_->name = std::move(name);
  c.s_->stride = stride;
  c.s_->role = role;
  c.s_->weight = Tensor::zeros({c_out, c_in, 3, 3});
  if (bias) c.s_->bias = Tensor::zeros({c_out});
  return c;
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, s_->weight, s_->bias, s_->stride, 1); }

Tensor pixelwise(const Linear& l, const Tensor& x, bool with_adapter) {
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor rows = transpose(reshape(x, {c, h * w}));
  Tensor y = l.forward(rows, with_adapter);
  return reshape(transpose(y), {l.d_out(), h, w});
}

// ---------------------------------------------------------------------------
// Module

Linear& Module::add_layer(Linear l) {
  linears_.push_back(std::move(l));
  return linears_.back();
}

Conv2d& Module::add_layer(Conv2d c) {
  convs_.push_back(std::move(c));
  return convs_.back();
}

Tensor& Module::add_tensor(std::string name, Tensor t, Role role) {
  tensors_.push_back({std::move(name), std::move(t), role});
  return tensors_.back().tensor;
}

std::vector<NamedTensor> Module::parameters() const {
  std::vector<NamedTensor> out;
  for (const Conv2d& c : convs_) {
    out.push_back({c.name() + ".weight", c.weight(), c.role()});
    if (c.bias().defined()) out.push_back({c.name() + ".bias", c.bias(), c.role()});
  }
  for (const Linear& l : linears_) {
    out.push_back({l.name() + ".weight", l.weight(), l.role()});
    if (l.bias().defined()) out.push_back({l.name() + ".bias", l.bias(), l.role()});
    if (const LoraAdapter* ad = l.adapter()) {
      out.push_back({"lora." + l.name() + ".A", ad->a, Role::kAdapter});
      out.push_back({"lora." + l.name() + ".B", ad->b, Role::kAdapter});
    }
  }
  for (const NamedTensor& t : tensors_) out.push_back(t);
  for (const Module* c : children_) {
    auto sub = c->parameters();
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

std::vector<Linear> Module::linears() const {
  std::vector<Linear> out = linears_;
  for (const Module* c : children_) {
    auto sub = c->linears();
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

void Module::set_trainable(bool base, bool layout, bool adapter) {
  for (NamedTensor& p : parameters()) {
    const bool on = p.role == Role::kBase ? base : p.role == Role::kLayout ? layout : adapter;
    p.tensor.set_requires_grad(on);
  }
}

std::vector<Tensor> Module::trainable_parameters() const {
  std::vector<Tensor> out;
  for (const NamedTensor& p : parameters())
    if (p.tensor.requires_grad()) out.push_back(p.tensor);
  return out;
}

void Module::zero_grad() {
  for (NamedTensor& p : parameters()) p.tensor.zero_grad();
}

StateDict Module::state_dict() const {
  StateDict sd;
  for (const NamedTensor& p : parameters()) sd.emplace(p.name, p.tensor);
  return sd;
}

void Module::load_state_dict(const StateDict& sd, bool allow_partial) {
  std::set<std::string> used;
  for (NamedTensor& p : parameters()) {
    auto it = sd.find(p.name);
    if (it == sd.end()) {
      if (allow_partial) continue;
      throw std::invalid_argument("checkpoint is missing parameter " + p.name);
    }
    if (it->second.shape() != p.tensor.shape())
      throw std::invalid_argument("shape mismatch for " + p.name + ": " + shape_str(it->second.shape()) + " vs " +
                                  shape_str(p.tensor.shape()));
    auto dst = p.tensor.mutable_data();
    auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
    used.insert(p.name);
  }
  for (const auto& [name, _] : sd)
    if (!used.count(name) && !allow_partial) throw std::invalid_argument("checkpoint has unknown parameter " + name);
}

int64_t Module::count_parameters(Role role) const {
  int64_t n = 0;
  for (const NamedTensor& p : parameters())
    if (p.role == role) n += p.tensor.numel();
  return n;
}

}  // namespace migkit::nn
