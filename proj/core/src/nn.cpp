#include "maad/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace maad {

void init_normal(Tensor& t, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (double& v : t.values()) v = dist(rng);
}

void init_kaiming_normal(Tensor& t, std::mt19937_64& rng, double leaky_alpha) {
  const Shape& s = t.shape();
  if (s.size() != 4) {
    throw std::invalid_argument("init_kaiming_normal: expected conv weight");
  }
  const double fan_in = static_cast<double>(s[1] * s[2] * s[3]);
  const double gain = std::sqrt(2.0 / (1.0 + leaky_alpha * leaky_alpha));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(fan_in));
  for (double& v : t.values()) v = dist(rng);
}

void fill_tensor(Tensor& t, double value) {
  for (double& v : t.values()) v = value;
}

Conv2d::Conv2d(int64_t in_c, int64_t out_c, int64_t kernel, int64_t stride,
               Padding2d padding, bool with_bias)
    : stride(stride), padding(padding) {
  weight = Tensor::zeros({out_c, in_c, kernel, kernel}, true);
  if (with_bias) bias = Tensor::zeros({out_c}, true);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return conv2d(x, weight, bias, stride, padding);
}

void Conv2d::collect(const std::string& prefix, std::vector<NamedParam>& out) {
  out.push_back({prefix + ".weight", weight});
  if (bias.defined()) out.push_back({prefix + ".bias", bias});
}

BatchNorm2d::BatchNorm2d(int64_t channels, double momentum, double eps)
    : momentum(momentum), eps(eps) {
  gamma = Tensor::full({channels}, 1.0, true);
  beta = Tensor::zeros({channels}, true);
  running_mean.assign(channels, 0.0);
  running_var.assign(channels, 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  return batch_norm2d(x, gamma, beta, running_mean, running_var, training,
                      momentum, eps);
}

void BatchNorm2d::collect(const std::string& prefix,
                          std::vector<NamedParam>& out) {
  out.push_back({prefix + ".gamma", gamma});
  out.push_back({prefix + ".beta", beta});
}

void BatchNorm2d::collect_buffers(const std::string& prefix,
                                  std::vector<NamedBuffer>& out) {
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

}  // namespace maad
