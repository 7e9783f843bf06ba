#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace maad {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorData;

// Backward contract: given the gradient of the node output, accumulate input
// gradients through sink(i), which returns a zero-initialized buffer for
// inputs[i] on first use. Repeated inputs share one buffer, so fan-in
// gradients sum naturally.
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::function<void(const std::vector<double>& grad_out,
                     const std::function<std::vector<double>&(size_t)>& sink)>
      backward;
};

struct TensorData {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // populated for leaves only, empty until backward
  std::shared_ptr<Node> node;
  bool backward_ran = false;
};

// Disables graph construction in scope; ops produce constant tensors.
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

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> data) : data_(std::move(data)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(size_t i) const;
  int64_t numel() const;
  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);

  const std::vector<double>& values() const;
  std::vector<double>& values();
  double item() const;

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  // Reverse-mode sweep from a scalar tensor. Leaf gradients accumulate into
  // .grad across calls (PyTorch convention); interior gradients are
  // transient. Running twice on the same root is an error.
  void backward() const;

  std::shared_ptr<TensorData> impl() const { return data_; }

 private:
  std::shared_ptr<TensorData> data_;
};

// Elementwise binary ops broadcast size-1 axes; ranks must match.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double c);
Tensor scale(const Tensor& x, double c);
Tensor abs(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
// Gradient is zero where the input was clipped.
Tensor clamp(const Tensor& x, double lo, double hi);

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double alpha);
Tensor sigmoid(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// NCHW -> NC mean over the spatial plane.
Tensor spatial_mean(const Tensor& x);

// Concatenate along the batch axis; all other dims must match.
Tensor concat0(const Tensor& a, const Tensor& b);

struct Padding2d {
  int64_t top = 0;
  int64_t bottom = 0;
  int64_t left = 0;
  int64_t right = 0;
};

// input NCHW, weight (out_c, in_c, kh, kw), optional bias (out_c).
// Output H' = floor((H + top + bottom - kh) / stride) + 1, same for W.
// Accumulation per output element runs in (in_c, kh, kw) ascending order, so
// results reproduce a naive nested-loop reference.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int64_t stride, Padding2d padding);
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int64_t stride, int64_t padding);

// Train mode normalizes by biased batch statistics and updates running stats
// in place; eval mode normalizes by the running stats as passed.
Tensor batch_norm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                    std::vector<double>& running_mean,
                    std::vector<double>& running_var, bool training,
                    double momentum, double eps);

// NCHW -> N,2,H,W: channel 0 per-pixel mean over C, channel 1 per-pixel max.
// Max gradient routes to the first argmax channel on ties.
Tensor channel_pool(const Tensor& x);

// Gradient reversal: forward is a bitwise identity copy; backward multiplies
// the upstream gradient by -lambda_p.
Tensor grl(const Tensor& x, double lambda_p);

// Biased V-statistic MMD with RBF kernel k(x,y) = exp(-|x-y|^2 / (2 sigma^2))
// over row vectors of xs (Ns x D) and xt (Nt x D).
Tensor mmd_rbf(const Tensor& xs, const Tensor& xt, double sigma);
// Median pairwise distance over the pooled rows; bandwidth heuristic.
double mmd_median_bandwidth(const Tensor& xs, const Tensor& xt);

// Test hook: observes every grl forward/backward while set.
struct GrlProbe {
  std::function<void(const std::vector<double>& input,
                     const std::vector<double>& output)>
      on_forward;
  std::function<void(double lambda_p, const std::vector<double>& grad_out,
                     const std::vector<double>& grad_in)>
      on_backward;
};
void set_grl_probe(GrlProbe probe);
void clear_grl_probe();

}  // namespace maad
