#pragma once

#include <random>
#include <string>
#include <vector>

#include "maad/tensor.hpp"

namespace maad {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

// Non-trainable state that still belongs in checkpoints (BN running stats).
struct NamedBuffer {
  std::string name;
  std::vector<double>* data;
};

void init_normal(Tensor& t, std::mt19937_64& rng, double stddev);
// Fan-in Kaiming normal with leaky-ReLU gain sqrt(2 / (1 + alpha^2)).
void init_kaiming_normal(Tensor& t, std::mt19937_64& rng, double leaky_alpha);
void fill_tensor(Tensor& t, double value);

class Conv2d {
 public:
  Conv2d(int64_t in_c, int64_t out_c, int64_t kernel, int64_t stride,
         Padding2d padding, bool with_bias = true);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedParam>& out);

  Tensor weight;
  Tensor bias;  // undefined when constructed without bias
  int64_t stride = 1;
  Padding2d padding;
};

class BatchNorm2d {
 public:
  explicit BatchNorm2d(int64_t channels, double momentum = 0.1,
                       double eps = 1e-5);

  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, std::vector<NamedParam>& out);
  void collect_buffers(const std::string& prefix,
                       std::vector<NamedBuffer>& out);

  Tensor gamma;
  Tensor beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double eps = 1e-5;
};

}  // namespace maad
