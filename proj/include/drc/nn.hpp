#pragma once

#include <string>
#include <vector>

#include "drc/tensor.hpp"

namespace drc {

// Haar-distributed orthogonal rows/columns (whichever fits), PyTorch-style:
// the weight is flattened to [rows, cols] and the smaller side becomes
// orthonormal. Gain scales the result.
void orthogonal_init(Tensor& w, Rng& rng, double gain = 1.0);

struct Linear {
    Tensor w;  // [out, in]
    Tensor b;  // [out]

    Linear() = default;
    Linear(i64 in, i64 out, Rng& rng);
    Tensor forward(const Tensor& x) const { return linear(x, w, b); }
};

struct Conv2d {
    Tensor w;  // [oc, ic, k, k]
    Tensor b;  // [oc]
    i64 stride = 1;
    i64 pad = 1;

    Conv2d() = default;
    Conv2d(i64 in_ch, i64 out_ch, i64 kernel, i64 stride, i64 pad, Rng& rng);
    Tensor forward(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
};

// Adam with one instance per parameter group.
class Adam {
public:
    Adam() = default;
    Adam(std::vector<Tensor> params, double lr, double beta1 = 0.5,
         double beta2 = 0.999, double eps = 1e-8);

    void zero_grad();
    void step();

    double lr = 0.0;
    const std::vector<Tensor>& params() const { return params_; }

    void save(std::ostream& os) const;
    void load(std::istream& is);

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double beta1_ = 0.5, beta2_ = 0.999, eps_ = 1e-8;
    i64 t_ = 0;
};

}  // namespace drc
