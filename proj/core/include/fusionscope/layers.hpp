#pragma once

#include <string>
#include <vector>

#include "fusionscope/rng.hpp"
#include "fusionscope/tensor.hpp"

namespace fusionscope::nn {

/// Checkpoint/optimizer entry. Non-trainable entries (normalization
/// statistics) are persisted but never stepped.
struct NamedParam {
    std::string name;
    Tensor tensor;
    bool trainable = true;
};

using ParamList = std::vector<NamedParam>;

/// 1x1/3x3/7x7 convolution with He-normal initialization.
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, bool bias, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out);

    int in_channels() const { return weight.defined() ? weight.dim(1) : 0; }
    int out_channels() const { return weight.defined() ? weight.dim(0) : 0; }

    Tensor weight;
    Tensor bias; // undefined when constructed bias-free
    int stride = 1;
    int pad = 0;
};

class BatchNorm2d {
public:
    BatchNorm2d() = default;
    explicit BatchNorm2d(int channels);

    Tensor forward(const Tensor& x, bool train);
    void collect(const std::string& prefix, ParamList& out);

    Tensor gamma, beta;
    Tensor running_mean, running_var; // buffers, frozen in eval mode
    double momentum = 0.1;
    double eps = 1e-5;
};

class Linear {
public:
    Linear() = default;
    Linear(int in_features, int out_features, Rng& rng);

    Tensor forward(const Tensor& x) const;
    void collect(const std::string& prefix, ParamList& out);

    Tensor weight, bias;
};

} // namespace fusionscope::nn
