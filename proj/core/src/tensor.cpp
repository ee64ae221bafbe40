#include "fusionscope/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "fusionscope/errors.hpp"

namespace fusionscope::nn {

namespace {

thread_local bool g_grad_enabled = true;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

} // namespace

std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

struct Tensor::Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(Impl&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
};

struct OpAccess {
    static Tensor wrap(std::shared_ptr<Tensor::Impl> impl) { return Tensor(std::move(impl)); }
    static Tensor::Impl* impl(const Tensor& t) { return t.impl_.get(); }
};

namespace {

std::shared_ptr<Tensor::Impl> new_impl(Shape shape) {
    auto impl = std::make_shared<Tensor::Impl>();
    impl->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    impl->shape = std::move(shape);
    return impl;
}

double* grad_buf(Tensor::Impl& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.data.size(), 0.0);
    return impl.grad.data();
}

bool tracks(const Tensor& t) { return t.defined() && t.requires_grad(); }

/// Finalizes an op result: wires parents + backward when grad is on and at
/// least one input tracks gradients.
Tensor make_result(std::shared_ptr<Tensor::Impl> impl, std::vector<Tensor> parents,
                   std::function<void(Tensor::Impl&)> backward_fn) {
    bool need = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (tracks(p)) need = true;
    }
    if (need) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backward_fn = std::move(backward_fn);
    }
    return OpAccess::wrap(std::move(impl));
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ValidationError(std::string(op) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
}

} // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto impl = new_impl(std::move(shape));
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    auto t = zeros(std::move(shape), requires_grad);
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values, bool requires_grad) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
        throw ValidationError("from_data: " + std::to_string(values.size()) +
                              " values for shape " + shape_str(shape));
    auto impl = std::make_shared<Impl>();
    impl->shape = std::move(shape);
    impl->data = std::move(values);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({}, {value}); }

const Shape& Tensor::shape() const {
    static const Shape empty;
    return impl_ ? impl_->shape : empty;
}

int Tensor::dim(int i) const {
    const Shape& s = shape();
    int rank = static_cast<int>(s.size());
    if (i < 0) i += rank;
    if (i < 0 || i >= rank) throw ValidationError("dim index out of range");
    return s[static_cast<std::size_t>(i)];
}

std::int64_t Tensor::numel() const { return impl_ ? static_cast<std::int64_t>(impl_->data.size()) : 0; }

double* Tensor::data() { return impl_->data.data(); }
const double* Tensor::data() const { return impl_->data.data(); }

double Tensor::at(std::initializer_list<int> index) const {
    const Shape& s = shape();
    if (index.size() != s.size()) throw ValidationError("at: rank mismatch");
    std::int64_t flat = 0;
    std::size_t axis = 0;
    for (int i : index) {
        flat = flat * s[axis] + i;
        ++axis;
    }
    return impl_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
    if (!impl_) throw ValidationError("set_requires_grad on undefined tensor");
    if (value && impl_->backward_fn)
        throw ValidationError("set_requires_grad: tensor already part of a graph");
    impl_->requires_grad = value;
}

double* Tensor::grad() { return grad_buf(*impl_); }

const double* Tensor::grad_data() const {
    return (impl_ && !impl_->grad.empty()) ? impl_->grad.data() : nullptr;
}

void Tensor::zero_grad() {
    if (impl_ && !impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (!impl_ || impl_->data.size() != 1) throw ValidationError("item(): not a scalar");
    return impl_->data[0];
}

Tensor Tensor::clone() const {
    if (!impl_) return Tensor();
    auto impl = std::make_shared<Impl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad && impl_->is_leaf();
    return Tensor(std::move(impl));
}

void Tensor::backward() {
    if (!impl_) throw ValidationError("backward on undefined tensor");
    if (impl_->data.size() != 1) throw ValidationError("backward requires a scalar root");

    // Reverse post-order over parent edges: consumers run before producers.
    std::vector<Impl*> order;
    std::unordered_set<Impl*> visited;
    struct Frame {
        Impl* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            Impl* p = OpAccess::impl(f.node->parents[f.next_parent++]);
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    grad_buf(*impl_)[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Impl* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
    // Release the tape; leaves keep their gradients.
    for (Impl* node : order) {
        node->backward_fn = nullptr;
        node->parents.clear();
    }
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_defined(a, "add");
    check_defined(b, "add");
    check_same_shape(a, b, "add");
    auto impl = new_impl(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data[i] = pa[i] + pb[i];
    return make_result(std::move(impl), {a, b}, [a, b](Tensor::Impl& self) {
        const double* g = self.grad.data();
        std::size_t n = self.data.size();
        if (tracks(a)) {
            double* ga = grad_buf(*OpAccess::impl(a));
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (tracks(b)) {
            double* gb = grad_buf(*OpAccess::impl(b));
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_defined(a, "sub");
    check_defined(b, "sub");
    check_same_shape(a, b, "sub");
    auto impl = new_impl(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data[i] = pa[i] - pb[i];
    return make_result(std::move(impl), {a, b}, [a, b](Tensor::Impl& self) {
        const double* g = self.grad.data();
        std::size_t n = self.data.size();
        if (tracks(a)) {
            double* ga = grad_buf(*OpAccess::impl(a));
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
        }
        if (tracks(b)) {
            double* gb = grad_buf(*OpAccess::impl(b));
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_defined(a, "mul");
    check_defined(b, "mul");
    check_same_shape(a, b, "mul");
    auto impl = new_impl(a.shape());
    const double* pa = a.data();
    const double* pb = b.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data[i] = pa[i] * pb[i];
    return make_result(std::move(impl), {a, b}, [a, b](Tensor::Impl& self) {
        const double* g = self.grad.data();
        const double* pa = a.data();
        const double* pb = b.data();
        std::size_t n = self.data.size();
        if (tracks(a)) {
            double* ga = grad_buf(*OpAccess::impl(a));
            for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * pb[i];
        }
        if (tracks(b)) {
            double* gb = grad_buf(*OpAccess::impl(b));
            for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * pa[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    check_defined(a, "scale");
    auto impl = new_impl(a.shape());
    const double* pa = a.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data[i] = pa[i] * c;
    return make_result(std::move(impl), {a}, [a, c](Tensor::Impl& self) {
        if (!tracks(a)) return;
        const double* g = self.grad.data();
        double* ga = grad_buf(*OpAccess::impl(a));
        for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += g[i] * c;
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    check_defined(a, "add_scalar");
    auto impl = new_impl(a.shape());
    const double* pa = a.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data[i] = pa[i] + c;
    return make_result(std::move(impl), {a}, [a](Tensor::Impl& self) {
        if (!tracks(a)) return;
        const double* g = self.grad.data();
        double* ga = grad_buf(*OpAccess::impl(a));
        for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += g[i];
    });
}

Tensor relu(const Tensor& a) {
    check_defined(a, "relu");
    auto impl = new_impl(a.shape());
    const double* pa = a.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data[i] = pa[i] > 0.0 ? pa[i] : 0.0;
    return make_result(std::move(impl), {a}, [a](Tensor::Impl& self) {
        if (!tracks(a)) return;
        const double* g = self.grad.data();
        const double* pa = a.data();
        double* ga = grad_buf(*OpAccess::impl(a));
        for (std::size_t i = 0; i < self.data.size(); ++i)
            if (pa[i] > 0.0) ga[i] += g[i];
    });
}

Tensor sigmoid(const Tensor& a) {
    check_defined(a, "sigmoid");
    auto impl = new_impl(a.shape());
    const double* pa = a.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) impl->data[i] = 1.0 / (1.0 + std::exp(-pa[i]));
    return make_result(std::move(impl), {a}, [a](Tensor::Impl& self) {
        if (!tracks(a)) return;
        const double* g = self.grad.data();
        const double* y = self.data.data();
        double* ga = grad_buf(*OpAccess::impl(a));
        for (std::size_t i = 0; i < self.data.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    });
}

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    double total = 0.0;
    const double* pa = a.data();
    for (std::int64_t i = 0; i < a.numel(); ++i) total += pa[i];
    auto impl = new_impl({});
    impl->data[0] = total;
    return make_result(std::move(impl), {a}, [a](Tensor::Impl& self) {
        if (!tracks(a)) return;
        double g = self.grad[0];
        double* ga = grad_buf(*OpAccess::impl(a));
        for (std::int64_t i = 0; i < a.numel(); ++i) ga[i] += g;
    });
}

Tensor mean(const Tensor& a) {
    check_defined(a, "mean");
    if (a.numel() == 0) throw ValidationError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
    int n, cin, h, w;
    int cout, kh, kw;
    int stride, pad;
    int hout, wout;
    std::int64_t patch; // cin*kh*kw
    std::int64_t cols;  // hout*wout
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
    if (x.shape().size() != 4) throw ValidationError("conv2d: input must be [N,C,H,W]");
    if (w.shape().size() != 4) throw ValidationError("conv2d: weight must be [F,C,kh,kw]");
    ConvDims d;
    d.n = x.dim(0);
    d.cin = x.dim(1);
    d.h = x.dim(2);
    d.w = x.dim(3);
    d.cout = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    if (w.dim(1) != d.cin)
        throw ValidationError("conv2d: channel mismatch, input " + std::to_string(d.cin) +
                              " vs weight " + std::to_string(w.dim(1)));
    if (stride < 1 || pad < 0) throw ValidationError("conv2d: bad stride/pad");
    d.hout = (d.h + 2 * pad - d.kh) / stride + 1;
    d.wout = (d.w + 2 * pad - d.kw) / stride + 1;
    if (d.hout < 1 || d.wout < 1)
        throw ValidationError("conv2d: kernel larger than padded input");
    d.patch = static_cast<std::int64_t>(d.cin) * d.kh * d.kw;
    d.cols = static_cast<std::int64_t>(d.hout) * d.wout;
    return d;
}

void im2col(const double* x, const ConvDims& d, double* col) {
    // col is [patch x cols], row r = (c*kh + ki)*kw + kj.
    for (int c = 0; c < d.cin; ++c) {
        const double* xc = x + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                double* row =
                    col + (static_cast<std::int64_t>(c) * d.kh * d.kw + ki * d.kw + kj) * d.cols;
                for (int oh = 0; oh < d.hout; ++oh) {
                    int ih = oh * d.stride - d.pad + ki;
                    double* dst = row + static_cast<std::int64_t>(oh) * d.wout;
                    if (ih < 0 || ih >= d.h) {
                        std::fill(dst, dst + d.wout, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<std::int64_t>(ih) * d.w;
                    for (int ow = 0; ow < d.wout; ++ow) {
                        int iw = ow * d.stride - d.pad + kj;
                        dst[ow] = (iw >= 0 && iw < d.w) ? src[iw] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_add(const double* col, const ConvDims& d, double* dx) {
    for (int c = 0; c < d.cin; ++c) {
        double* xc = dx + static_cast<std::int64_t>(c) * d.h * d.w;
        for (int ki = 0; ki < d.kh; ++ki) {
            for (int kj = 0; kj < d.kw; ++kj) {
                const double* row =
                    col + (static_cast<std::int64_t>(c) * d.kh * d.kw + ki * d.kw + kj) * d.cols;
                for (int oh = 0; oh < d.hout; ++oh) {
                    int ih = oh * d.stride - d.pad + ki;
                    if (ih < 0 || ih >= d.h) continue;
                    const double* src = row + static_cast<std::int64_t>(oh) * d.wout;
                    double* dst = xc + static_cast<std::int64_t>(ih) * d.w;
                    for (int ow = 0; ow < d.wout; ++ow) {
                        int iw = ow * d.stride - d.pad + kj;
                        if (iw >= 0 && iw < d.w) dst[iw] += src[ow];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_defined(x, "conv2d");
    check_defined(w, "conv2d");
    ConvDims d = conv_dims(x, w, stride, pad);
    if (b.defined() && (b.shape().size() != 1 || b.dim(0) != d.cout))
        throw ValidationError("conv2d: bias must be [Cout]");

    auto impl = new_impl({d.n, d.cout, d.hout, d.wout});
    std::vector<double> col(static_cast<std::size_t>(d.patch * d.cols));
    CMapM wmat(w.data(), d.cout, d.patch);
    for (int n = 0; n < d.n; ++n) {
        im2col(x.data() + static_cast<std::int64_t>(n) * d.cin * d.h * d.w, d, col.data());
        CMapM colm(col.data(), d.patch, d.cols);
        MapM out(impl->data.data() + static_cast<std::int64_t>(n) * d.cout * d.cols, d.cout, d.cols);
        out.noalias() = wmat * colm;
        if (b.defined()) {
            const double* pb = b.data();
            for (int f = 0; f < d.cout; ++f) out.row(f).array() += pb[f];
        }
    }

    std::vector<Tensor> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return make_result(std::move(impl), std::move(parents), [x, w, b, d](Tensor::Impl& self) {
        std::vector<double> col(static_cast<std::size_t>(d.patch * d.cols));
        std::vector<double> gcol;
        CMapM wmat(w.data(), d.cout, d.patch);
        bool need_x = tracks(x);
        bool need_w = tracks(w);
        bool need_b = b.defined() && tracks(b);
        double* gx = need_x ? grad_buf(*OpAccess::impl(x)) : nullptr;
        double* gw = need_w ? grad_buf(*OpAccess::impl(w)) : nullptr;
        double* gb = need_b ? grad_buf(*OpAccess::impl(b)) : nullptr;
        if (need_x) gcol.resize(static_cast<std::size_t>(d.patch * d.cols));
        for (int n = 0; n < d.n; ++n) {
            CMapM gout(self.grad.data() + static_cast<std::int64_t>(n) * d.cout * d.cols, d.cout,
                       d.cols);
            if (need_w || need_x)
                im2col(x.data() + static_cast<std::int64_t>(n) * d.cin * d.h * d.w, d, col.data());
            if (need_w) {
                CMapM colm(col.data(), d.patch, d.cols);
                MapM gwm(gw, d.cout, d.patch);
                gwm.noalias() += gout * colm.transpose();
            }
            if (need_b) {
                for (int f = 0; f < d.cout; ++f) gb[f] += gout.row(f).sum();
            }
            if (need_x) {
                MapM gcolm(gcol.data(), d.patch, d.cols);
                gcolm.noalias() = wmat.transpose() * gout;
                col2im_add(gcol.data(), d, gx + static_cast<std::int64_t>(n) * d.cin * d.h * d.w);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor maxpool2d(const Tensor& x, int kernel, int stride, int pad) {
    check_defined(x, "maxpool2d");
    if (x.shape().size() != 4) throw ValidationError("maxpool2d: input must be [N,C,H,W]");
    if (pad >= kernel) throw ValidationError("maxpool2d: pad must be < kernel");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    int hout = (h + 2 * pad - kernel) / stride + 1;
    int wout = (w + 2 * pad - kernel) / stride + 1;
    if (hout < 1 || wout < 1) throw ValidationError("maxpool2d: window larger than padded input");

    auto impl = new_impl({n, c, hout, wout});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(impl->data.size());
    const double* px = x.data();
    std::int64_t out_i = 0;
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            const double* plane = px + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
            std::int64_t plane_off = (static_cast<std::int64_t>(ni) * c + ci) * h * w;
            for (int oh = 0; oh < hout; ++oh) {
                for (int ow = 0; ow < wout; ++ow, ++out_i) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::int64_t best_idx = -1;
                    for (int ki = 0; ki < kernel; ++ki) {
                        int ih = oh * stride - pad + ki;
                        if (ih < 0 || ih >= h) continue;
                        for (int kj = 0; kj < kernel; ++kj) {
                            int iw = ow * stride - pad + kj;
                            if (iw < 0 || iw >= w) continue;
                            double v = plane[static_cast<std::int64_t>(ih) * w + iw];
                            if (v > best) {
                                best = v;
                                best_idx = plane_off + static_cast<std::int64_t>(ih) * w + iw;
                            }
                        }
                    }
                    impl->data[static_cast<std::size_t>(out_i)] = best;
                    (*argmax)[static_cast<std::size_t>(out_i)] = best_idx;
                }
            }
        }
    }
    return make_result(std::move(impl), {x}, [x, argmax](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
}

Tensor global_avg_pool(const Tensor& x) {
    check_defined(x, "global_avg_pool");
    if (x.shape().size() != 4) throw ValidationError("global_avg_pool: input must be [N,C,H,W]");
    int n = x.dim(0), c = x.dim(1);
    std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    auto impl = new_impl({n, c});
    const double* px = x.data();
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * c; ++i) {
        double acc = 0.0;
        const double* plane = px + i * hw;
        for (std::int64_t k = 0; k < hw; ++k) acc += plane[k];
        impl->data[static_cast<std::size_t>(i)] = acc / static_cast<double>(hw);
    }
    return make_result(std::move(impl), {x}, [x, n, c, hw](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        double inv = 1.0 / static_cast<double>(hw);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * c; ++i) {
            double gv = g[i] * inv;
            double* plane = gx + i * hw;
            for (std::int64_t k = 0; k < hw; ++k) plane[k] += gv;
        }
    });
}

// ---------------------------------------------------------------------------
// Bilinear resize (half-pixel centers)
// ---------------------------------------------------------------------------

namespace {

struct LerpAxis {
    std::vector<int> i0, i1;
    std::vector<double> w1; // weight of i1; weight of i0 is (1 - w1)
};

LerpAxis lerp_axis(int in, int out) {
    LerpAxis ax;
    ax.i0.resize(out);
    ax.i1.resize(out);
    ax.w1.resize(out);
    double scale = static_cast<double>(in) / out;
    for (int i = 0; i < out; ++i) {
        double src = (i + 0.5) * scale - 0.5;
        double fl = std::floor(src);
        int lo = static_cast<int>(fl);
        double f = src - fl;
        int lo_c = std::clamp(lo, 0, in - 1);
        int hi_c = std::clamp(lo + 1, 0, in - 1);
        ax.i0[i] = lo_c;
        ax.i1[i] = hi_c;
        ax.w1[i] = f;
    }
    return ax;
}

} // namespace

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
    check_defined(x, "upsample_bilinear");
    if (x.shape().size() != 4) throw ValidationError("upsample_bilinear: input must be [N,C,H,W]");
    if (out_h < 1 || out_w < 1) throw ValidationError("upsample_bilinear: bad target size");
    int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    auto ay = std::make_shared<LerpAxis>(lerp_axis(h, out_h));
    auto axx = std::make_shared<LerpAxis>(lerp_axis(w, out_w));
    auto impl = new_impl({n, c, out_h, out_w});
    const double* px = x.data();
    double* po = impl->data.data();
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
        const double* plane = px + p * h * w;
        double* out = po + p * static_cast<std::int64_t>(out_h) * out_w;
        for (int i = 0; i < out_h; ++i) {
            const double* r0 = plane + static_cast<std::int64_t>(ay->i0[i]) * w;
            const double* r1 = plane + static_cast<std::int64_t>(ay->i1[i]) * w;
            double fy = ay->w1[i];
            for (int j = 0; j < out_w; ++j) {
                double fx = axx->w1[j];
                double top = (1.0 - fx) * r0[axx->i0[j]] + fx * r0[axx->i1[j]];
                double bot = (1.0 - fx) * r1[axx->i0[j]] + fx * r1[axx->i1[j]];
                out[static_cast<std::int64_t>(i) * out_w + j] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    int in_h = h, in_w = w;
    return make_result(std::move(impl), {x}, [x, ay, axx, n, c, in_h, in_w, out_h, out_w](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(n) * c; ++p) {
            double* plane = gx + p * in_h * in_w;
            const double* go = g + p * static_cast<std::int64_t>(out_h) * out_w;
            for (int i = 0; i < out_h; ++i) {
                double fy = ay->w1[i];
                for (int j = 0; j < out_w; ++j) {
                    double fx = axx->w1[j];
                    double gv = go[static_cast<std::int64_t>(i) * out_w + j];
                    plane[static_cast<std::int64_t>(ay->i0[i]) * in_w + axx->i0[j]] +=
                        gv * (1.0 - fy) * (1.0 - fx);
                    plane[static_cast<std::int64_t>(ay->i0[i]) * in_w + axx->i1[j]] +=
                        gv * (1.0 - fy) * fx;
                    plane[static_cast<std::int64_t>(ay->i1[i]) * in_w + axx->i0[j]] +=
                        gv * fy * (1.0 - fx);
                    plane[static_cast<std::int64_t>(ay->i1[i]) * in_w + axx->i1[j]] += gv * fy * fx;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Attention helpers
// ---------------------------------------------------------------------------

Tensor softmax_spatial(const Tensor& x) {
    check_defined(x, "softmax_spatial");
    if (x.shape().size() != 4 || x.dim(1) != 1)
        throw ValidationError("softmax_spatial: input must be [N,1,H,W]");
    int n = x.dim(0);
    std::int64_t m = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    auto impl = new_impl(x.shape());
    const double* px = x.data();
    double* po = impl->data.data();
    for (int ni = 0; ni < n; ++ni) {
        const double* in = px + ni * m;
        double* out = po + ni * m;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::int64_t i = 0; i < m; ++i) mx = std::max(mx, in[i]);
        double total = 0.0;
        for (std::int64_t i = 0; i < m; ++i) {
            out[i] = std::exp(in[i] - mx);
            total += out[i];
        }
        for (std::int64_t i = 0; i < m; ++i) out[i] /= total;
    }
    return make_result(std::move(impl), {x}, [x, n, m](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        const double* y = self.data.data();
        for (int ni = 0; ni < n; ++ni) {
            const double* gr = g + ni * m;
            const double* yr = y + ni * m;
            double* gxr = gx + ni * m;
            double dot = 0.0;
            for (std::int64_t i = 0; i < m; ++i) dot += gr[i] * yr[i];
            for (std::int64_t i = 0; i < m; ++i) gxr[i] += yr[i] * (gr[i] - dot);
        }
    });
}

Tensor gate_scale(const Tensor& x, const Tensor& alpha) {
    check_defined(x, "gate_scale");
    check_defined(alpha, "gate_scale");
    if (x.shape().size() != 4 || alpha.shape().size() != 4 || alpha.dim(1) != 1 ||
        x.dim(0) != alpha.dim(0) || x.dim(2) != alpha.dim(2) || x.dim(3) != alpha.dim(3))
        throw ValidationError("gate_scale: x [N,C,H,W] and alpha [N,1,H,W] must align");
    int n = x.dim(0), c = x.dim(1);
    std::int64_t m = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    auto impl = new_impl(x.shape());
    const double* px = x.data();
    const double* pa = alpha.data();
    double* po = impl->data.data();
    for (int ni = 0; ni < n; ++ni) {
        const double* arow = pa + ni * m;
        for (int ci = 0; ci < c; ++ci) {
            const double* xr = px + (static_cast<std::int64_t>(ni) * c + ci) * m;
            double* orow = po + (static_cast<std::int64_t>(ni) * c + ci) * m;
            for (std::int64_t i = 0; i < m; ++i) orow[i] = xr[i] * arow[i];
        }
    }
    return make_result(std::move(impl), {x, alpha}, [x, alpha, n, c, m](Tensor::Impl& self) {
        const double* g = self.grad.data();
        const double* px = x.data();
        const double* pa = alpha.data();
        if (tracks(x)) {
            double* gx = grad_buf(*OpAccess::impl(x));
            for (int ni = 0; ni < n; ++ni) {
                const double* arow = pa + ni * m;
                for (int ci = 0; ci < c; ++ci) {
                    std::int64_t off = (static_cast<std::int64_t>(ni) * c + ci) * m;
                    for (std::int64_t i = 0; i < m; ++i) gx[off + i] += g[off + i] * arow[i];
                }
            }
        }
        if (tracks(alpha)) {
            double* ga = grad_buf(*OpAccess::impl(alpha));
            for (int ni = 0; ni < n; ++ni) {
                double* garow = ga + ni * m;
                for (int ci = 0; ci < c; ++ci) {
                    std::int64_t off = (static_cast<std::int64_t>(ni) * c + ci) * m;
                    for (std::int64_t i = 0; i < m; ++i) garow[i] += g[off + i] * px[off + i];
                }
            }
        }
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check_defined(a, "concat_channels");
    check_defined(b, "concat_channels");
    if (a.shape().size() != 4 || b.shape().size() != 4 || a.dim(0) != b.dim(0) ||
        a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3))
        throw ValidationError("concat_channels: spatial/batch dims must match");
    int n = a.dim(0), ca = a.dim(1), cb = b.dim(1);
    std::int64_t m = static_cast<std::int64_t>(a.dim(2)) * a.dim(3);
    auto impl = new_impl({n, ca + cb, a.dim(2), a.dim(3)});
    for (int ni = 0; ni < n; ++ni) {
        double* dst = impl->data.data() + static_cast<std::int64_t>(ni) * (ca + cb) * m;
        std::memcpy(dst, a.data() + static_cast<std::int64_t>(ni) * ca * m,
                    sizeof(double) * static_cast<std::size_t>(ca * m));
        std::memcpy(dst + static_cast<std::int64_t>(ca) * m,
                    b.data() + static_cast<std::int64_t>(ni) * cb * m,
                    sizeof(double) * static_cast<std::size_t>(cb * m));
    }
    return make_result(std::move(impl), {a, b}, [a, b, n, ca, cb, m](Tensor::Impl& self) {
        const double* g = self.grad.data();
        for (int ni = 0; ni < n; ++ni) {
            const double* grow = g + static_cast<std::int64_t>(ni) * (ca + cb) * m;
            if (tracks(a)) {
                double* ga = grad_buf(*OpAccess::impl(a)) + static_cast<std::int64_t>(ni) * ca * m;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(ca) * m; ++i) ga[i] += grow[i];
            }
            if (tracks(b)) {
                double* gb = grad_buf(*OpAccess::impl(b)) + static_cast<std::int64_t>(ni) * cb * m;
                const double* gsrc = grow + static_cast<std::int64_t>(ca) * m;
                for (std::int64_t i = 0; i < static_cast<std::int64_t>(cb) * m; ++i) gb[i] += gsrc[i];
            }
        }
    });
}

Tensor flatten2(const Tensor& x) {
    check_defined(x, "flatten2");
    if (x.shape().empty()) throw ValidationError("flatten2: rank must be >= 1");
    int n = x.dim(0);
    std::int64_t rest = x.numel() / n;
    auto impl = new_impl({n, static_cast<int>(rest)});
    impl->data.assign(x.data(), x.data() + x.numel());
    return make_result(std::move(impl), {x}, [x](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += g[i];
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ValidationError("concat_cols: no inputs");
    int n = parts[0].dim(0);
    int total = 0;
    for (const auto& p : parts) {
        check_defined(p, "concat_cols");
        if (p.shape().size() != 2 || p.dim(0) != n)
            throw ValidationError("concat_cols: all inputs must be [N,f]");
        total += p.dim(1);
    }
    auto impl = new_impl({n, total});
    {
        std::int64_t col = 0;
        for (const auto& p : parts) {
            int f = p.dim(1);
            for (int ni = 0; ni < n; ++ni)
                std::memcpy(impl->data.data() + static_cast<std::int64_t>(ni) * total + col,
                            p.data() + static_cast<std::int64_t>(ni) * f,
                            sizeof(double) * static_cast<std::size_t>(f));
            col += f;
        }
    }
    std::vector<Tensor> parents = parts;
    return make_result(std::move(impl), parents, [parts, n, total](Tensor::Impl& self) {
        const double* g = self.grad.data();
        std::int64_t col = 0;
        for (const auto& p : parts) {
            int f = p.dim(1);
            if (tracks(p)) {
                double* gp = grad_buf(*OpAccess::impl(p));
                for (int ni = 0; ni < n; ++ni) {
                    const double* src = g + static_cast<std::int64_t>(ni) * total + col;
                    double* dst = gp + static_cast<std::int64_t>(ni) * f;
                    for (int i = 0; i < f; ++i) dst[i] += src[i];
                }
            }
            col += f;
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_defined(x, "linear");
    check_defined(w, "linear");
    if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(1))
        throw ValidationError("linear: x [N,F] and w [O,F] must agree, got " +
                              shape_str(x.shape()) + " and " + shape_str(w.shape()));
    int n = x.dim(0), f = x.dim(1), o = w.dim(0);
    if (b.defined() && (b.shape().size() != 1 || b.dim(0) != o))
        throw ValidationError("linear: bias must be [O]");
    auto impl = new_impl({n, o});
    {
        CMapM xm(x.data(), n, f);
        CMapM wm(w.data(), o, f);
        MapM om(impl->data.data(), n, o);
        om.noalias() = xm * wm.transpose();
        if (b.defined()) {
            const double* pb = b.data();
            for (int ni = 0; ni < n; ++ni)
                for (int oi = 0; oi < o; ++oi) om(ni, oi) += pb[oi];
        }
    }
    std::vector<Tensor> parents = {x, w};
    if (b.defined()) parents.push_back(b);
    return make_result(std::move(impl), std::move(parents), [x, w, b, n, f, o](Tensor::Impl& self) {
        CMapM g(self.grad.data(), n, o);
        if (tracks(x)) {
            CMapM wm(w.data(), o, f);
            MapM gx(grad_buf(*OpAccess::impl(x)), n, f);
            gx.noalias() += g * wm;
        }
        if (tracks(w)) {
            CMapM xm(x.data(), n, f);
            MapM gw(grad_buf(*OpAccess::impl(w)), o, f);
            gw.noalias() += g.transpose() * xm;
        }
        if (b.defined() && tracks(b)) {
            double* gb = grad_buf(*OpAccess::impl(b));
            for (int oi = 0; oi < o; ++oi) gb[oi] += g.col(oi).sum();
        }
    });
}

Tensor dropout(const Tensor& x, double rate, Rng* rng, bool train) {
    check_defined(x, "dropout");
    if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout: rate must be in [0,1)");
    if (!train || rate == 0.0) return x;
    if (!rng) throw ValidationError("dropout: train mode requires an rng");
    auto impl = new_impl(x.shape());
    auto keep = std::make_shared<std::vector<double>>(impl->data.size());
    double inv = 1.0 / (1.0 - rate);
    const double* px = x.data();
    for (std::size_t i = 0; i < impl->data.size(); ++i) {
        double k = rng->uniform() >= rate ? inv : 0.0;
        (*keep)[i] = k;
        impl->data[i] = px[i] * k;
    }
    return make_result(std::move(impl), {x}, [x, keep](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        for (std::size_t i = 0; i < self.data.size(); ++i) gx[i] += g[i] * (*keep)[i];
    });
}

// ---------------------------------------------------------------------------
// Softmax / losses
// ---------------------------------------------------------------------------

namespace {

void softmax_into(const double* in, double* out, int n, int k) {
    for (int ni = 0; ni < n; ++ni) {
        const double* row = in + static_cast<std::int64_t>(ni) * k;
        double* orow = out + static_cast<std::int64_t>(ni) * k;
        double mx = row[0];
        for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
        double total = 0.0;
        for (int i = 0; i < k; ++i) {
            orow[i] = std::exp(row[i] - mx);
            total += orow[i];
        }
        for (int i = 0; i < k; ++i) orow[i] /= total;
    }
}

} // namespace

Tensor softmax_rows(const Tensor& x) {
    check_defined(x, "softmax_rows");
    if (x.shape().size() != 2) throw ValidationError("softmax_rows: input must be [N,K]");
    int n = x.dim(0), k = x.dim(1);
    auto impl = new_impl(x.shape());
    softmax_into(x.data(), impl->data.data(), n, k);
    return make_result(std::move(impl), {x}, [x, n, k](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        const double* y = self.data.data();
        for (int ni = 0; ni < n; ++ni) {
            const double* gr = g + static_cast<std::int64_t>(ni) * k;
            const double* yr = y + static_cast<std::int64_t>(ni) * k;
            double* gxr = gx + static_cast<std::int64_t>(ni) * k;
            double dot = 0.0;
            for (int i = 0; i < k; ++i) dot += gr[i] * yr[i];
            for (int i = 0; i < k; ++i) gxr[i] += yr[i] * (gr[i] - dot);
        }
    });
}

Tensor log_softmax_rows(const Tensor& x) {
    check_defined(x, "log_softmax_rows");
    if (x.shape().size() != 2) throw ValidationError("log_softmax_rows: input must be [N,K]");
    int n = x.dim(0), k = x.dim(1);
    auto impl = new_impl(x.shape());
    const double* px = x.data();
    for (int ni = 0; ni < n; ++ni) {
        const double* row = px + static_cast<std::int64_t>(ni) * k;
        double* orow = impl->data.data() + static_cast<std::int64_t>(ni) * k;
        double mx = row[0];
        for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
        double total = 0.0;
        for (int i = 0; i < k; ++i) total += std::exp(row[i] - mx);
        double lse = mx + std::log(total);
        for (int i = 0; i < k; ++i) orow[i] = row[i] - lse;
    }
    return make_result(std::move(impl), {x}, [x, n, k](Tensor::Impl& self) {
        if (!tracks(x)) return;
        double* gx = grad_buf(*OpAccess::impl(x));
        const double* g = self.grad.data();
        const double* lsm = self.data.data();
        for (int ni = 0; ni < n; ++ni) {
            const double* gr = g + static_cast<std::int64_t>(ni) * k;
            const double* lr = lsm + static_cast<std::int64_t>(ni) * k;
            double* gxr = gx + static_cast<std::int64_t>(ni) * k;
            double gsum = 0.0;
            for (int i = 0; i < k; ++i) gsum += gr[i];
            for (int i = 0; i < k; ++i) gxr[i] += gr[i] - std::exp(lr[i]) * gsum;
        }
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    check_defined(logits, "cross_entropy");
    if (logits.shape().size() != 2) throw ValidationError("cross_entropy: logits must be [N,K]");
    int n = logits.dim(0), k = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw ValidationError("cross_entropy: " + std::to_string(labels.size()) +
                              " labels for batch of " + std::to_string(n));
    for (int l : labels)
        if (l < 0 || l >= k)
            throw ValidationError("cross_entropy: label " + std::to_string(l) +
                                  " outside [0," + std::to_string(k) + ")");
    auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * k);
    softmax_into(logits.data(), probs->data(), n, k);
    double loss = 0.0;
    const double* px = logits.data();
    for (int ni = 0; ni < n; ++ni) {
        const double* row = px + static_cast<std::int64_t>(ni) * k;
        double mx = row[0];
        for (int i = 1; i < k; ++i) mx = std::max(mx, row[i]);
        double total = 0.0;
        for (int i = 0; i < k; ++i) total += std::exp(row[i] - mx);
        loss -= row[labels[static_cast<std::size_t>(ni)]] - mx - std::log(total);
    }
    loss /= n;
    auto impl = new_impl({});
    impl->data[0] = loss;
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    return make_result(std::move(impl), {logits}, [logits, probs, labels_copy, n, k](Tensor::Impl& self) {
        if (!tracks(logits)) return;
        double g = self.grad[0] / n;
        double* gx = grad_buf(*OpAccess::impl(logits));
        for (int ni = 0; ni < n; ++ni) {
            const double* pr = probs->data() + static_cast<std::int64_t>(ni) * k;
            double* gxr = gx + static_cast<std::int64_t>(ni) * k;
            int label = (*labels_copy)[static_cast<std::size_t>(ni)];
            for (int i = 0; i < k; ++i) gxr[i] += g * (pr[i] - (i == label ? 1.0 : 0.0));
        }
    });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

namespace {

void check_bn_args(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const Tensor& rmean, const Tensor& rvar) {
    if (x.shape().size() != 4) throw ValidationError("batchnorm: input must be [N,C,H,W]");
    int c = x.dim(1);
    for (const Tensor* t : {&gamma, &beta, &rmean, &rvar})
        if (t->shape().size() != 1 || t->dim(0) != c)
            throw ValidationError("batchnorm: per-channel params must be [C]");
}

} // namespace

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       Tensor& running_mean, Tensor& running_var, double momentum, double eps) {
    check_defined(x, "batchnorm_train");
    check_bn_args(x, gamma, beta, running_mean, running_var);
    int n = x.dim(0), c = x.dim(1);
    std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    std::int64_t m = static_cast<std::int64_t>(n) * hw;
    if (m < 1) throw ValidationError("batchnorm_train: empty batch");

    auto mean_c = std::make_shared<std::vector<double>>(c, 0.0);
    auto ivar_c = std::make_shared<std::vector<double>>(c, 0.0);
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(x.numel()));
    const double* px = x.data();
    for (int ci = 0; ci < c; ++ci) {
        double mu = 0.0;
        for (int ni = 0; ni < n; ++ni) {
            const double* plane = px + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) mu += plane[i];
        }
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (int ni = 0; ni < n; ++ni) {
            const double* plane = px + (static_cast<std::int64_t>(ni) * c + ci) * hw;
            for (std::int64_t i = 0; i < hw; ++i) {
                double d = plane[i] - mu;
                var += d * d;
            }
        }
        var /= static_cast<double>(m);
        (*mean_c)[ci] = mu;
        (*ivar_c)[ci] = 1.0 / std::sqrt(var + eps);
        double unbiased = m > 1 ? var * static_cast<double>(m) / (m - 1) : var;
        running_mean.data()[ci] = (1.0 - momentum) * running_mean.data()[ci] + momentum * mu;
        running_var.data()[ci] = (1.0 - momentum) * running_var.data()[ci] + momentum * unbiased;
    }

    auto impl = new_impl(x.shape());
    const double* pg = gamma.data();
    const double* pb = beta.data();
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            std::int64_t off = (static_cast<std::int64_t>(ni) * c + ci) * hw;
            double mu = (*mean_c)[ci], iv = (*ivar_c)[ci];
            for (std::int64_t i = 0; i < hw; ++i) {
                double xh = (px[off + i] - mu) * iv;
                (*xhat)[static_cast<std::size_t>(off + i)] = xh;
                impl->data[static_cast<std::size_t>(off + i)] = pg[ci] * xh + pb[ci];
            }
        }
    }

    return make_result(std::move(impl), {x, gamma, beta},
                       [x, gamma, beta, xhat, ivar_c, n, c, hw, m](Tensor::Impl& self) {
        const double* g = self.grad.data();
        const double* pg = gamma.data();
        bool need_x = tracks(x);
        bool need_gamma = tracks(gamma);
        bool need_beta = tracks(beta);
        double* gx = need_x ? grad_buf(*OpAccess::impl(x)) : nullptr;
        double* gw = need_gamma ? grad_buf(*OpAccess::impl(gamma)) : nullptr;
        double* gb = need_beta ? grad_buf(*OpAccess::impl(beta)) : nullptr;
        for (int ci = 0; ci < c; ++ci) {
            double sum_g = 0.0, sum_gxh = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                std::int64_t off = (static_cast<std::int64_t>(ni) * c + ci) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum_g += g[off + i];
                    sum_gxh += g[off + i] * (*xhat)[static_cast<std::size_t>(off + i)];
                }
            }
            if (need_gamma) gw[ci] += sum_gxh;
            if (need_beta) gb[ci] += sum_g;
            if (need_x) {
                double iv = (*ivar_c)[ci];
                double k1 = sum_g / static_cast<double>(m);
                double k2 = sum_gxh / static_cast<double>(m);
                for (int ni = 0; ni < n; ++ni) {
                    std::int64_t off = (static_cast<std::int64_t>(ni) * c + ci) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        double xh = (*xhat)[static_cast<std::size_t>(off + i)];
                        gx[off + i] += pg[ci] * iv * (g[off + i] - k1 - xh * k2);
                    }
                }
            }
        }
    });
}

Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const Tensor& running_mean, const Tensor& running_var, double eps) {
    check_defined(x, "batchnorm_eval");
    check_bn_args(x, gamma, beta, running_mean, running_var);
    int n = x.dim(0), c = x.dim(1);
    std::int64_t hw = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    auto impl = new_impl(x.shape());
    const double* px = x.data();
    const double* pg = gamma.data();
    const double* pb = beta.data();
    const double* pm = running_mean.data();
    const double* pv = running_var.data();
    std::vector<double> ivar(static_cast<std::size_t>(c));
    for (int ci = 0; ci < c; ++ci) ivar[static_cast<std::size_t>(ci)] = 1.0 / std::sqrt(pv[ci] + eps);
    for (int ni = 0; ni < n; ++ni) {
        for (int ci = 0; ci < c; ++ci) {
            std::int64_t off = (static_cast<std::int64_t>(ni) * c + ci) * hw;
            double mu = pm[ci], iv = ivar[static_cast<std::size_t>(ci)];
            for (std::int64_t i = 0; i < hw; ++i)
                impl->data[static_cast<std::size_t>(off + i)] = pg[ci] * (px[off + i] - mu) * iv + pb[ci];
        }
    }
    auto ivar_copy = std::make_shared<std::vector<double>>(std::move(ivar));
    Tensor rm = running_mean;
    return make_result(std::move(impl), {x, gamma, beta},
                       [x, gamma, beta, rm, ivar_copy, n, c, hw](Tensor::Impl& self) {
        const double* g = self.grad.data();
        const double* px = x.data();
        const double* pg = gamma.data();
        const double* pm = rm.data();
        bool need_x = tracks(x);
        bool need_gamma = tracks(gamma);
        bool need_beta = tracks(beta);
        double* gx = need_x ? grad_buf(*OpAccess::impl(x)) : nullptr;
        double* gw = need_gamma ? grad_buf(*OpAccess::impl(gamma)) : nullptr;
        double* gb = need_beta ? grad_buf(*OpAccess::impl(beta)) : nullptr;
        for (int ci = 0; ci < c; ++ci) {
            double iv = (*ivar_copy)[static_cast<std::size_t>(ci)];
            double sum_g = 0.0, sum_gxh = 0.0;
            for (int ni = 0; ni < n; ++ni) {
                std::int64_t off = (static_cast<std::int64_t>(ni) * c + ci) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    sum_g += g[off + i];
                    sum_gxh += g[off + i] * (px[off + i] - pm[ci]) * iv;
                    if (need_x) gx[off + i] += g[off + i] * pg[ci] * iv;
                }
            }
            if (need_gamma) gw[ci] += sum_gxh;
            if (need_beta) gb[ci] += sum_g;
        }
    });
}

bool all_finite(const Tensor& t) {
    if (!t.defined()) return false;
    const double* p = t.data();
    for (std::int64_t i = 0; i < t.numel(); ++i)
        if (!std::isfinite(p[i])) return false;
    return true;
}

} // namespace fusionscope::nn
