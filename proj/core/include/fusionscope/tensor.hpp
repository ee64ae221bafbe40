#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "fusionscope/rng.hpp"

namespace fusionscope::nn {

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Thread-local autograd switch. Ops record no graph while disabled, which
/// makes eval-mode forwards allocation-light and safe for concurrent use.
bool grad_enabled();

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Dense double tensor with reverse-mode autodiff. Shapes follow the
/// pipeline's conventions: [N,C,H,W] for feature maps, [N,F] for vectors,
/// [] (rank 0) for scalars such as losses.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int dim(int i) const;
    std::int64_t numel() const;

    double* data();
    const double* data() const;
    double at(std::initializer_list<int> index) const;

    bool requires_grad() const;
    /// Marks a leaf as trainable. Only valid on graph-less tensors.
    void set_requires_grad(bool value);

    /// Gradient buffer, allocated zero-filled on first access.
    double* grad();
    /// Null until a backward pass (or grad()) touched this tensor.
    const double* grad_data() const;
    void zero_grad();

    double item() const;

    /// Reverse-mode accumulation from a rank-0 root. Releases the graph
    /// afterwards; leaf tensors keep their gradients.
    void backward();

    /// Deep copy, detached from any graph.
    Tensor clone() const;

    /// True if both handles share storage.
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

    struct Impl;

private:
    explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<Impl> impl_;
    friend struct OpAccess;
};

// ---------------------------------------------------------------------------
// Differentiable ops. All record the backward graph unless grad is disabled
// or no input requires gradients.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b); // elementwise, equal shapes
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum(const Tensor& a);  // -> rank 0
Tensor mean(const Tensor& a); // -> rank 0

/// x:[N,Cin,H,W], w:[Cout,Cin,kh,kw], b:[Cout] or undefined for bias-free.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int pad);

/// [N,C,H,W] -> [N,C] spatial mean. Adaptive average pooling to 1x1 reduces
/// to the same operation.
Tensor global_avg_pool(const Tensor& x);

/// Bilinear resize with half-pixel centers (corner alignment disabled).
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);

/// Softmax over the H*W positions of a [N,1,H,W] map.
Tensor softmax_spatial(const Tensor& x);

/// x:[N,C,H,W] scaled per position by alpha:[N,1,H,W] broadcast over C.
Tensor gate_scale(const Tensor& x, const Tensor& alpha);

Tensor concat_channels(const Tensor& a, const Tensor& b); // [N,Ca+Cb,H,W]

/// [N,d1,...,dk] -> [N, d1*...*dk]
Tensor flatten2(const Tensor& x);

Tensor concat_cols(const std::vector<Tensor>& parts); // [N,fi] -> [N,sum fi]

/// x:[N,F], w:[O,F], b:[O] or undefined. Returns [N,O].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

/// Inverted dropout: train-time scaling by 1/(1-rate), eval is identity.
Tensor dropout(const Tensor& x, double rate, Rng* rng, bool train);

Tensor softmax_rows(const Tensor& x);     // [N,K]
Tensor log_softmax_rows(const Tensor& x); // [N,K]

/// Mean cross-entropy of [N,K] logits against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Batch statistics path. Normalizes with biased batch variance and updates
/// the running buffers in place (momentum m: run = (1-m)*run + m*batch,
/// unbiased variance in the running buffer).
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       Tensor& running_mean, Tensor& running_var,
                       double momentum, double eps);

/// Frozen-statistics path.
Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const Tensor& running_mean, const Tensor& running_var,
                      double eps);

bool all_finite(const Tensor& t);

} // namespace fusionscope::nn
