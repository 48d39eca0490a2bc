#include "drc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace drc {

namespace {

thread_local bool g_param_grads_enabled = true;

std::shared_ptr<TensorImpl> new_impl_uninit(std::vector<i64> shape) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::make_shared<DataVec>(static_cast<size_t>(impl->numel()));
    return impl;
}

std::shared_ptr<TensorImpl> new_impl(std::vector<i64> shape) {
    auto impl = new_impl_uninit(std::move(shape));
    std::fill(impl->data->begin(), impl->data->end(), 0.0);
    return impl;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch");
}

}  // namespace

// A tensor participates in the graph only if it wants gradients and, for
// parameters, parameter gradients are currently enabled. The decision is
// captured when an op is built, not at backward time.
bool tracks_grad(const Tensor& t) {
    if (!t.defined() || !t.requires_grad()) return false;
    if (t.impl()->is_param && !g_param_grads_enabled) return false;
    return true;
}

ParamGradGuard::ParamGradGuard(bool enable) : prev_(g_param_grads_enabled) {
    g_param_grads_enabled = enable;
}
ParamGradGuard::~ParamGradGuard() { g_param_grads_enabled = prev_; }
bool ParamGradGuard::enabled() { return g_param_grads_enabled; }

Tensor Tensor::zeros(std::vector<i64> shape, bool requires_grad) {
    auto impl = new_impl(std::move(shape));
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::full(std::vector<i64> shape, double value, bool requires_grad) {
    auto impl = new_impl(std::move(shape));
    std::fill(impl->data->begin(), impl->data->end(), value);
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::from_data(std::vector<i64> shape, std::vector<double> values,
                         bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    if (static_cast<i64>(values.size()) != impl->numel())
        throw ConfigError("from_data: value count does not match shape");
    impl->data = std::make_shared<DataVec>(values.begin(), values.end());
    impl->requires_grad = requires_grad;
    return Tensor(impl);
}

Tensor Tensor::randn(std::vector<i64> shape, Rng& rng, double stddev) {
    auto impl = new_impl_uninit(std::move(shape));
    for (double& v : *impl->data) v = rng.normal() * stddev;
    return Tensor(impl);
}

const std::vector<i64>& Tensor::shape() const { return impl_->shape; }
i64 Tensor::dim(int i) const { return impl_->shape.at(static_cast<size_t>(i)); }
i64 Tensor::numel() const { return impl_->numel(); }

double* Tensor::data() { return impl_->data->data(); }
const double* Tensor::data() const { return impl_->data->data(); }

double Tensor::item() const {
    if (numel() != 1) throw ConfigError("item(): tensor is not scalar");
    return (*impl_->data)[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
}

Tensor& Tensor::mark_parameter() {
    impl_->is_param = true;
    impl_->requires_grad = true;
    return *this;
}

bool Tensor::is_parameter() const { return impl_ && impl_->is_param; }

double* Tensor::grad() { return impl_->ensure_grad().data(); }
const double* Tensor::grad() const {
    return impl_->grad ? impl_->grad->data() : nullptr;
}
bool Tensor::has_grad() const { return impl_->grad != nullptr; }

void Tensor::zero_grad() {
    if (impl_->grad) std::fill(impl_->grad->begin(), impl_->grad->end(), 0.0);
}

void Tensor::backward() const {
    if (numel() != 1) throw ConfigError("backward(): root must be scalar");
    if (!impl_->requires_grad) return;

    // Post-order DFS, then reverse sweep. Parents lists contain only nodes
    // that were tracking gradients when the op was built.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* node;
        size_t next_child;
    };
    std::vector<Frame> stack;
    stack.push_back({impl_.get(), 0});
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.node->parents.size()) {
            TensorImpl* child = f.node->parents[f.next_child++].get();
            if (!visited.count(child)) {
                visited.insert(child);
                stack.push_back({child, 0});
            }
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    impl_->ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn) node->backward_fn(*node);
    }
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    return Tensor(impl);
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = std::make_shared<DataVec>(*impl_->data);
    return Tensor(impl);
}

// Builds the result tensor and wires the graph. `parents` must contain only
// inputs for which tracks_grad() was true when the op was assembled. The
// output buffer is uninitialized; every op overwrites it in full.
Tensor make_op(std::vector<i64> shape, std::vector<Tensor> parents,
               std::function<void(TensorImpl&)> backward_fn) {
    auto impl = new_impl_uninit(std::move(shape));
    if (!parents.empty()) {
        impl->requires_grad = true;
        for (const auto& p : parents) impl->parents.push_back(p.impl());
        impl->backward_fn = std::move(backward_fn);
    }
    return Tensor(impl);
}

namespace {

std::vector<Tensor> tracked(std::initializer_list<Tensor> ts) {
    std::vector<Tensor> out;
    for (const auto& t : ts)
        if (tracks_grad(t)) out.push_back(t);
    return out;
}

}  // namespace

// ---------------- elementwise ----------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    const i64 n = a.numel();
    const bool na = tracks_grad(a), nb = tracks_grad(b);
    auto pa = a.impl(), pb = b.impl();
    Tensor out = make_op(a.shape(), tracked({a, b}),
                         [pa, pb, n, na, nb](TensorImpl& self) {
                             const double* g = self.grad->data();
                             if (na) {
                                 double* ga = pa->ensure_grad().data();
                                 for (i64 i = 0; i < n; ++i) ga[i] += g[i];
                             }
                             if (nb) {
                                 double* gb = pb->ensure_grad().data();
                                 for (i64 i = 0; i < n; ++i) gb[i] += g[i];
                             }
                         });
    const double* da = a.data();
    const double* db = b.data();
    double* o = out.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (i64 i = 0; i < n; ++i) o[i] = da[i] + db[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    const i64 n = a.numel();
    const bool na = tracks_grad(a), nb = tracks_grad(b);
    auto pa = a.impl(), pb = b.impl();
    Tensor out = make_op(a.shape(), tracked({a, b}),
                         [pa, pb, n, na, nb](TensorImpl& self) {
                             const double* g = self.grad->data();
                             if (na) {
                                 double* ga = pa->ensure_grad().data();
                                 for (i64 i = 0; i < n; ++i) ga[i] += g[i];
                             }
                             if (nb) {
                                 double* gb = pb->ensure_grad().data();
                                 for (i64 i = 0; i < n; ++i) gb[i] -= g[i];
                             }
                         });
    const double* da = a.data();
    const double* db = b.data();
    double* o = out.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (i64 i = 0; i < n; ++i) o[i] = da[i] - db[i];
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    const i64 n = a.numel();
    const bool na = tracks_grad(a), nb = tracks_grad(b);
    auto pa = a.impl(), pb = b.impl();
    Tensor out = make_op(a.shape(), tracked({a, b}),
                         [pa, pb, n, na, nb](TensorImpl& self) {
                             const double* g = self.grad->data();
                             if (na) {
                                 double* ga = pa->ensure_grad().data();
                                 const double* db = pb->data->data();
                                 for (i64 i = 0; i < n; ++i) ga[i] += g[i] * db[i];
                             }
                             if (nb) {
                                 double* gb = pb->ensure_grad().data();
                                 const double* da = pa->data->data();
                                 for (i64 i = 0; i < n; ++i) gb[i] += g[i] * da[i];
                             }
                         });
    const double* da = a.data();
    const double* db = b.data();
    double* o = out.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (i64 i = 0; i < n; ++i) o[i] = da[i] * db[i];
    return out;
}

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx_from_xy) {
    const i64 n = a.numel();
    const bool na = tracks_grad(a);
    auto pa = a.impl();
    Tensor out =
        make_op(a.shape(), na ? std::vector<Tensor>{a} : std::vector<Tensor>{},
                [pa, n, dfdx_from_xy](TensorImpl& self) {
                    const double* g = self.grad->data();
                    const double* x = pa->data->data();
                    const double* y = self.data->data();
                    double* ga = pa->ensure_grad().data();
#pragma omp parallel for schedule(static) if (n > 32768)
                    for (i64 i = 0; i < n; ++i) ga[i] += g[i] * dfdx_from_xy(x[i], y[i]);
                });
    const double* x = a.data();
    double* y = out.data();
#pragma omp parallel for schedule(static) if (n > 32768)
    for (i64 i = 0; i < n; ++i) y[i] = fwd(x[i]);
    return out;
}

}  // namespace

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x + c; },
                    [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
    return unary_op(a, [c](double x) { return x * c; },
                    [c](double, double) { return c; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Tensor tanh(const Tensor& a) {
    return unary_op(a, [](double x) { return std::tanh(x); },
                    [](double, double y) { return 1.0 - y * y; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(a,
                    [](double x) {
                        if (x >= 0) {
                            double e = std::exp(-x);
                            return 1.0 / (1.0 + e);
                        }
                        double e = std::exp(x);
                        return e / (1.0 + e);
                    },
                    [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
    return unary_op(a, [](double x) { return std::abs(x); },
                    [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor square(const Tensor& a) {
    return unary_op(a, [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary_op(a, [slope](double x) { return x > 0 ? x : slope * x; },
                    [slope](double x, double) { return x > 0 ? 1.0 : slope; });
}

// ---------------- shape ----------------

Tensor reshape(const Tensor& a, std::vector<i64> shape) {
    i64 n = 1;
    for (i64 d : shape) n *= d;
    if (n != a.numel()) throw ConfigError("reshape: element count mismatch");
    const i64 count = n;
    const bool na = tracks_grad(a);
    auto pa = a.impl();
    Tensor out = make_op(std::move(shape),
                         na ? std::vector<Tensor>{a} : std::vector<Tensor>{},
                         [pa, count](TensorImpl& self) {
                             const double* g = self.grad->data();
                             double* ga = pa->ensure_grad().data();
                             for (i64 i = 0; i < count; ++i) ga[i] += g[i];
                         });
    std::memcpy(out.data(), a.data(), sizeof(double) * static_cast<size_t>(count));
    return out;
}

Tensor narrow_channels(const Tensor& a, i64 start, i64 count) {
    const auto& s = a.shape();
    if (s.size() != 4) throw ConfigError("narrow_channels: expected NCHW");
    const i64 n = s[0], c = s[1], h = s[2], w = s[3];
    if (start < 0 || count <= 0 || start + count > c)
        throw ConfigError("narrow_channels: range out of bounds");
    const i64 hw = h * w;
    const bool na = tracks_grad(a);
    auto pa = a.impl();
    Tensor out = make_op({n, count, h, w},
                         na ? std::vector<Tensor>{a} : std::vector<Tensor>{},
                         [pa, n, c, count, start, hw](TensorImpl& self) {
                             const double* g = self.grad->data();
                             double* ga = pa->ensure_grad().data();
                             for (i64 in = 0; in < n; ++in)
                                 for (i64 ic = 0; ic < count; ++ic) {
                                     const double* gs = g + (in * count + ic) * hw;
                                     double* gd = ga + (in * c + start + ic) * hw;
                                     for (i64 i = 0; i < hw; ++i) gd[i] += gs[i];
                                 }
                         });
    const double* src = a.data();
    double* dst = out.data();
    for (i64 in = 0; in < n; ++in)
        for (i64 ic = 0; ic < count; ++ic)
            std::memcpy(dst + (in * count + ic) * hw,
                        src + (in * c + start + ic) * hw,
                        sizeof(double) * static_cast<size_t>(hw));
    return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] ||
        sa[3] != sb[3])
        throw ConfigError("concat_channels: incompatible shapes");
    const i64 n = sa[0], ca = sa[1], cb = sb[1], h = sa[2], w = sa[3];
    const i64 hw = h * w, c = ca + cb;
    const bool na = tracks_grad(a), nb = tracks_grad(b);
    auto pa = a.impl(), pb = b.impl();
    Tensor out = make_op({n, c, h, w}, tracked({a, b}),
                         [pa, pb, n, ca, cb, c, hw, na, nb](TensorImpl& self) {
                             const double* g = self.grad->data();
                             if (na) {
                                 double* ga = pa->ensure_grad().data();
                                 for (i64 in = 0; in < n; ++in)
                                     for (i64 ic = 0; ic < ca; ++ic) {
                                         const double* gs = g + (in * c + ic) * hw;
                                         double* gd = ga + (in * ca + ic) * hw;
                                         for (i64 i = 0; i < hw; ++i) gd[i] += gs[i];
                                     }
                             }
                             if (nb) {
                                 double* gb = pb->ensure_grad().data();
                                 for (i64 in = 0; in < n; ++in)
                                     for (i64 ic = 0; ic < cb; ++ic) {
                                         const double* gs = g + (in * c + ca + ic) * hw;
                                         double* gd = gb + (in * cb + ic) * hw;
                                         for (i64 i = 0; i < hw; ++i) gd[i] += gs[i];
                                     }
                             }
                         });
    const double* da = a.data();
    const double* db = b.data();
    double* o = out.data();
    for (i64 in = 0; in < n; ++in) {
        std::memcpy(o + in * c * hw, da + in * ca * hw,
                    sizeof(double) * static_cast<size_t>(ca * hw));
        std::memcpy(o + (in * c + ca) * hw, db + in * cb * hw,
                    sizeof(double) * static_cast<size_t>(cb * hw));
    }
    return out;
}

// ---------------- reductions ----------------

Tensor sum(const Tensor& a) {
    const i64 n = a.numel();
    const bool na = tracks_grad(a);
    auto pa = a.impl();
    Tensor out = make_op({1}, na ? std::vector<Tensor>{a} : std::vector<Tensor>{},
                         [pa, n](TensorImpl& self) {
                             const double g = (*self.grad)[0];
                             double* ga = pa->ensure_grad().data();
                             for (i64 i = 0; i < n; ++i) ga[i] += g;
                         });
    const double* x = a.data();
    double acc = 0.0;
    for (i64 i = 0; i < n; ++i) acc += x[i];
    out.data()[0] = acc;
    return out;
}

Tensor mean(const Tensor& a) {
    const i64 n = a.numel();
    const double inv = 1.0 / static_cast<double>(n);
    const bool na = tracks_grad(a);
    auto pa = a.impl();
    Tensor out = make_op({1}, na ? std::vector<Tensor>{a} : std::vector<Tensor>{},
                         [pa, n, inv](TensorImpl& self) {
                             const double g = (*self.grad)[0] * inv;
                             double* ga = pa->ensure_grad().data();
                             for (i64 i = 0; i < n; ++i) ga[i] += g;
                         });
    const double* x = a.data();
    double acc = 0.0;
    for (i64 i = 0; i < n; ++i) acc += x[i];
    out.data()[0] = acc * inv;
    return out;
}

Tensor sum_channels_keepdim(const Tensor& a) {
    const auto& s = a.shape();
    if (s.size() != 4) throw ConfigError("sum_channels_keepdim: expected NCHW");
    const i64 n = s[0], c = s[1], h = s[2], w = s[3], hw = h * w;
    const bool na = tracks_grad(a);
    auto pa = a.impl();
    Tensor out = make_op({n, 1, h, w},
                         na ? std::vector<Tensor>{a} : std::vector<Tensor>{},
                         [pa, n, c, hw](TensorImpl& self) {
                             const double* g = self.grad->data();
                             double* ga = pa->ensure_grad().data();
                             for (i64 in = 0; in < n; ++in)
                                 for (i64 ic = 0; ic < c; ++ic) {
                                     const double* gs = g + in * hw;
                                     double* gd = ga + (in * c + ic) * hw;
                                     for (i64 i = 0; i < hw; ++i) gd[i] += gs[i];
                                 }
                         });
    const double* x = a.data();
    double* o = out.data();
    for (i64 in = 0; in < n; ++in) {
        double* od = o + in * hw;
        std::fill(od, od + hw, 0.0);
        for (i64 ic = 0; ic < c; ++ic) {
            const double* xs = x + (in * c + ic) * hw;
            for (i64 i = 0; i < hw; ++i) od[i] += xs[i];
        }
    }
    return out;
}

// ---------------- plain helpers ----------------

double max_abs(const Tensor& a) {
    const double* x = a.data();
    double m = 0.0;
    for (i64 i = 0, n = a.numel(); i < n; ++i) m = std::max(m, std::abs(x[i]));
    return m;
}

bool all_finite(const Tensor& a) {
    const double* x = a.data();
    for (i64 i = 0, n = a.numel(); i < n; ++i)
        if (!std::isfinite(x[i])) return false;
    return true;
}

}  // namespace drc
