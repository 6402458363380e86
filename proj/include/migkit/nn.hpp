#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "migkit/rng.hpp"
#include "migkit/tensor.hpp"

namespace migkit::nn {

// Who owns a parameter. Base weights belong to the frozen backbone; layout
// weights are the spatial-conditioning branch; adapter weights are LoRA A/B.
enum class Role { kBase, kLayout, kAdapter };

struct NamedTensor {
  std::string name;
  Tensor tensor;
  Role role = Role::kBase;
};

// Low-rank delta attached to a Linear: y += (alpha / rank) * B (A x).
struct LoraAdapter {
  Tensor a;  // [rank, d_in]
  Tensor b;  // [d_out, rank]
  int rank = 0;
  double alpha = 0.0;
  double scaling() const { return alpha / rank; }
};

// Fully connected layer over rows: y = x W^T + b.
// Handle type; copies share weights.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int d_in, int d_out, bool bias, Rng& rng, Role role = Role::kBase);

  // Frozen identity projection (used where a LoRA slot must start as a no-op).
  static Linear identity(std::string name, int d, Role role);
  static Linear zeros(std::string name, int d_in, int d_out, bool bias, Role role);

  // with_adapter=false evaluates the bare weight even when a LoRA delta is
  // attached and not merged.
  Tensor forward(const Tensor& x, bool with_adapter = true) const;

  const std::string& name() const { return s_->name; }
  int d_in() const { return s_->weight.dim(1); }
  int d_out() const { return s_->weight.dim(0); }
  Role role() const { return s_->role; }
  Tensor& weight() { return s_->weight; }
  const Tensor& weight() const { return s_->weight; }
  Tensor& bias() { return s_->bias; }
  const Tensor& bias() const { return s_->bias; }

  bool has_adapter() const { return s_->adapter != nullptr; }
  bool merged() const { return s_->merged; }
  LoraAdapter* adapter() { return s_->adapter.get(); }
  const LoraAdapter* adapter() const { return s_->adapter.get(); }
  void attach_adapter(int rank, double alpha, Rng& rng);
  void merge_adapter();
  void detach_adapter();

  bool defined() const { return s_ != nullptr; }

 private:
  struct State {
    std::string name;
    Tensor weight, bias;
    Role role = Role::kBase;
    std::unique_ptr<LoraAdapter> adapter;
    bool merged = false;
  };
  std::shared_ptr<State> s_;
};

// 3x3 convolution over [C,H,W].
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int c_in, int c_out, int stride, Rng& rng, Role role = Role::kBase, bool bias = true);
  static Conv2d zeros(std::string name, int c_in, int c_out, int stride, Role role, bool bias = true);

  Tensor forward(const Tensor& x) const;

  const std::string& name() const { return s_->name; }
  Role role() const { return s_->role; }
  Tensor& weight() { return s_->weight; }
  const Tensor& weight() const { return s_->weight; }
  Tensor& bias() { return s_->bias; }
  const Tensor& bias() const { return s_->bias; }
  int c_in() const { return s_->weight.dim(1); }
  int c_out() const { return s_->weight.dim(0); }

 private:
  struct State {
    std::string name;
    Tensor weight, bias;
    int stride = 1;
    Role role = Role::kBase;
  };
  std::shared_ptr<State> s_;
};

// Per-pixel Linear over a [C,H,W] map (1x1 convolution).
Tensor pixelwise(const Linear& l, const Tensor& x, bool with_adapter = true);

// uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))
Tensor init_uniform(const Shape& shape, int fan_in, Rng& rng);

using StateDict = std::map<std::string, Tensor>;

// Registry of named layers and loose tensors that make up a model. Child
// modules are registered by pointer, so modules are neither copyable nor
// movable.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  // Own and child parameters, LoRA A/B included.
  std::vector<NamedTensor> parameters() const;
  // Own and child Linear layers (shared handles).
  std::vector<Linear> linears() const;

  // Sets requires_grad per role.
  void set_trainable(bool base, bool layout, bool adapter);
  std::vector<Tensor> trainable_parameters() const;
  void zero_grad();

  StateDict state_dict() const;
  // Copies values by name into existing parameters. Missing or unknown names
  // are errors unless allow_partial is set.
  void load_state_dict(const StateDict& sd, bool allow_partial = false);

  int64_t count_parameters(Role role) const;

 protected:
  Linear& add_layer(Linear l);
  Conv2d& add_layer(Conv2d c);
  Tensor& add_tensor(std::string name, Tensor t, Role role);
  void add_child(const Module* child) { children_.push_back(child); }

 private:
  std::vector<const Module*> children_;
  std::vector<Linear> linears_;
  std::vector<Conv2d> convs_;
  std::vector<NamedTensor> tensors_;
};

}  // namespace migkit::nn
