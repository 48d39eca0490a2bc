#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "drc/common.hpp"
#include "drc/rng.hpp"

namespace drc {

class Rng;
struct TensorImpl;

namespace detail {

// Default-initializing allocator: op outputs are fully overwritten, so the
// usual zero-fill would only add memory traffic.
template <class T>
struct uninit_alloc {
    using value_type = T;
    uninit_alloc() = default;
    template <class U>
    uninit_alloc(const uninit_alloc<U>&) {}
    T* allocate(std::size_t n) { return std::allocator<T>().allocate(n); }
    void deallocate(T* p, std::size_t n) { std::allocator<T>().deallocate(p, n); }
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        if constexpr (sizeof...(Args) == 0)
            ::new (static_cast<void*>(p)) U;
        else
            ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
    bool operator==(const uninit_alloc&) const { return true; }
    bool operator!=(const uninit_alloc&) const { return false; }
};

}  // namespace detail

using DataVec = std::vector<double, detail::uninit_alloc<double>>;

// Dense double tensor with reverse-mode autodiff. Tensors are treated as
// immutable once produced by an op; gradients accumulate into leaf nodes on
// backward(). All kernels sum in a fixed per-element order, so results are
// bit-reproducible for any thread count.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<i64> shape, bool requires_grad = false);
    static Tensor full(std::vector<i64> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<i64> shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor randn(std::vector<i64> shape, Rng& rng, double stddev = 1.0);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<i64>& shape() const;
    i64 dim(int i) const;
    i64 numel() const;

    double* data();
    const double* data() const;
    double item() const;

    bool requires_grad() const;
    Tensor& set_requires_grad(bool v);
    Tensor& mark_parameter();
    bool is_parameter() const;

    // Gradient buffer of a leaf (allocated on demand, zero-initialized).
    double* grad();
    const double* grad() const;
    bool has_grad() const;
    void zero_grad();

    // Reverse-mode sweep from a scalar.
    void backward() const;

    Tensor detach() const;  // shares data, drops the graph
    Tensor clone() const;   // deep copy, leaf

    std::shared_ptr<TensorImpl> impl() const { return impl_; }
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

private:
    std::shared_ptr<TensorImpl> impl_;
};

struct TensorImpl {
    std::vector<i64> shape;
    std::shared_ptr<DataVec> data;
    std::unique_ptr<std::vector<double>> grad;  // zero-initialized on demand
    bool requires_grad = false;
    bool is_param = false;
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    i64 numel() const {
        i64 n = 1;
        for (i64 d : shape) n *= d;
        return n;
    }
    std::vector<double>& ensure_grad() {
        if (!grad) grad = std::make_unique<std::vector<double>>(numel(), 0.0);
        return *grad;
    }
};

// While disabled, parameter leaves are treated as constants: ops do not
// record them and backward skips their gradient kernels. Langevin sampling
// runs under this guard since only latent gradients are needed there.
class ParamGradGuard {
public:
    explicit ParamGradGuard(bool enable);
    ~ParamGradGuard();
    static bool enabled();

private:
    bool prev_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor mul_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor square(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);

// ---- shape ----
Tensor reshape(const Tensor& a, std::vector<i64> shape);
Tensor narrow_channels(const Tensor& a, i64 start, i64 count);   // NCHW
Tensor concat_channels(const Tensor& a, const Tensor& b);        // NCHW

// Multiply [N,C,H,W] by a per-pixel map [N,1,H,W].
Tensor bcast_mul(const Tensor& x, const Tensor& m);

// ---- reductions ----
Tensor sum(const Tensor& a);   // -> [1]
Tensor mean(const Tensor& a);  // -> [1]
Tensor sum_channels_keepdim(const Tensor& a);  // [N,C,H,W] -> [N,1,H,W]

// ---- neural-net ops ----
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[N,I] w[O,I] b[O]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, i64 stride, i64 pad);
Tensor upsample_nearest2(const Tensor& x);
Tensor instance_norm(const Tensor& x, double eps = 1e-5);
// grid: [N,2,H,W], channel 0 = x-coordinate, channel 1 = y-coordinate, both in
// the [-1,1] convention that spans pixel centers; out-of-range clamps to border.
// Positions within 1e-9 of a pixel center snap onto it, so identity_grid()
// resamples any image exactly.
Tensor grid_sample(const Tensor& image, const Tensor& grid);
Tensor identity_grid(i64 n, i64 h, i64 w);
Tensor tv_norm(const Tensor& x);                      // [N,C,H,W] -> [N]
// Frobenius norm of the off-diagonal Gram matrix of the row-flattened weight.
Tensor orthogonal_reg(const Tensor& w);               // -> [1]
Tensor logsumexp_rows(const Tensor& x);               // [N,K] -> [N]
Tensor softmax_rows(const Tensor& x);                 // [N,K] -> [N,K]
// Mean over rows of H(P_n, softmax(logits_n)); P is treated as constant.
Tensor cross_entropy_mean(const Tensor& p_target, const Tensor& logits);

// ---- plain (non-autodiff) helpers ----
double max_abs(const Tensor& a);
bool all_finite(const Tensor& a);

// Fixed-order blocked GEMM used by the nn ops; exposed for benchmarks/tests.
// C[M,N] (+)= A·B with optional transposes; row-major, ld* = row strides.
void gemm(bool trans_a, bool trans_b, i64 m, i64 n, i64 k, double alpha,
          const double* a, i64 lda, const double* b, i64 ldb, double beta,
          double* c, i64 ldc);

}  // namespace drc
