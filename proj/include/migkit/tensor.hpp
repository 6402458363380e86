#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "migkit/rng.hpp"

namespace migkit {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Node;
}

// Dense row-major double tensor with an optional reverse-mode tape.
//
// A Tensor is a handle: copies share storage. Ops never mutate their inputs;
// only parameter updates (optimizer, LoRA merge, checkpoint load) write into
// existing storage through mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor randn(const Shape& shape, Rng& rng);
  static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int dim(int i) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(int64_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Same storage, no tape history.
  Tensor detach() const;
  // Fresh storage copy, no tape history.
  Tensor clone() const;

  // Reverse-mode sweep from a scalar. Accumulates into .grad() of every leaf
  // with requires_grad set.
  void backward() const;

  const detail::Node* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct OpBuilder;
};

// Disables tape recording for the lifetime of the guard (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- elementwise -----------------------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor divide(const Tensor& a, double d);
Tensor silu(const Tensor& x);
Tensor square(const Tensor& x);

// ---- reductions / losses ---------------------------------------------------
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mse_loss(const Tensor& pred, const Tensor& target);

// ---- shape ops ---------------------------------------------------------------
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor transpose(const Tensor& x);  // [n,d] -> [d,n]
Tensor concat_rows(const std::vector<Tensor>& parts);      // [n_i,d] -> [sum n_i, d]
Tensor slice_rows(const Tensor& x, int begin, int end);    // [n,d] -> [end-begin, d]
Tensor concat_channels(const std::vector<Tensor>& parts);  // [C_i,H,W] -> [sum C_i,H,W]
Tensor slice_channels(const Tensor& x, int begin, int end);
Tensor mean_rows(const Tensor& x);  // [n,d] -> [1,d]
Tensor gather_rows(const Tensor& table, const std::vector<int>& rows);  // [R,d] -> [n,d]

// ---- bias-style broadcasts ---------------------------------------------------
// x[C,H,W] + b[C] per channel.
Tensor add_channel_bias(const Tensor& x, const Tensor& b);
// x[n,d] + b[d] per row.
Tensor add_row_bias(const Tensor& x, const Tensor& b);
// x[C,H,W] * map[H,W] with a constant (non-differentiable) spatial map.
Tensor modulate(const Tensor& x, std::span<const double> map);

// ---- dense layers --------------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b);  // [n,k] x [k,m]
// x[n,d_in] W[d_out,d_in]^T + bias[d_out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);
Tensor softmax_rows(const Tensor& x);

// x[C,H,W], w[K,C,3,3], b[K] (may be undefined). stride in {1,2}, pad in {0,1}.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// Bilinear resampling of x[C,H,W] (or [H,W]) to out_h x out_w,
// align_corners=false.
Tensor bilinear_interp(const Tensor& x, int out_h, int out_w);

// softmax(Q K^T / sqrt(d) + bias) V with masked keys excluded.
// Q[n,d], K[m,d], V[m,dv]; key_mask[j] == true keeps key j; bias is [n,m] or
// undefined.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v,
                 const std::vector<bool>& key_mask = {}, const Tensor& bias = {});

// Patch extraction for a [C,H,W] latent with patch p -> [(H/p)(W/p), C p p].
Tensor patchify(const Tensor& x, int p);
Tensor unpatchify(const Tensor& tokens, int channels, int h, int w, int p);

// Central-difference check of d f / d params against reverse mode.
// Returns the maximum relative error |g_a - g_n| / max(1, |g_a|, |g_n|)
// over every checked coordinate.
struct GradCheckResult {
  double max_rel_error = 0.0;
  int64_t checked = 0;
};
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                                  double eps = 1e-5, int64_t max_coords_per_param = -1,
                                  Rng* coord_rng = nullptr);

}  // namespace migkit
