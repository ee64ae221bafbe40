#include "fusionscope/layers.hpp"

#include <cmath>

#include "fusionscope/errors.hpp"

namespace fusionscope::nn {

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride_, int pad_, bool with_bias,
               Rng& rng)
    : stride(stride_), pad(pad_) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1)
        throw ValidationError("Conv2d: bad dimensions");
    weight = Tensor::zeros({out_channels, in_channels, kernel, kernel}, true);
    double fan_in = static_cast<double>(in_channels) * kernel * kernel;
    double std_dev = std::sqrt(2.0 / fan_in);
    double* w = weight.data();
    for (std::int64_t i = 0; i < weight.numel(); ++i) w[i] = rng.normal() * std_dev;
    if (with_bias) bias = Tensor::zeros({out_channels}, true);
}

Tensor Conv2d::forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

void Conv2d::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", weight, true});
    if (bias.defined()) out.push_back({prefix + ".bias", bias, true});
}

BatchNorm2d::BatchNorm2d(int channels) {
    gamma = Tensor::full({channels}, 1.0, true);
    beta = Tensor::zeros({channels}, true);
    running_mean = Tensor::zeros({channels});
    running_var = Tensor::full({channels}, 1.0);
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
    if (train) return batchnorm_train(x, gamma, beta, running_mean, running_var, momentum, eps);
    return batchnorm_eval(x, gamma, beta, running_mean, running_var, eps);
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".gamma", gamma, true});
    out.push_back({prefix + ".beta", beta, true});
    out.push_back({prefix + ".running_mean", running_mean, false});
    out.push_back({prefix + ".running_var", running_var, false});
}

Linear::Linear(int in_features, int out_features, Rng& rng) {
    if (in_features < 1 || out_features < 1) throw ValidationError("Linear: bad dimensions");
    weight = Tensor::zeros({out_features, in_features}, true);
    double std_dev = std::sqrt(2.0 / static_cast<double>(in_features));
    double* w = weight.data();
    for (std::int64_t i = 0; i < weight.numel(); ++i) w[i] = rng.normal() * std_dev;
    bias = Tensor::zeros({out_features}, true);
}

Tensor Linear::forward(const Tensor& x) const { return linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, ParamList& out) {
    out.push_back({prefix + ".weight", weight, true});
    out.push_back({prefix + ".bias", bias, true});
}

} // namespace fusionscope::nn
