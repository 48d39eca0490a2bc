#pragma once

#include "drc/tensor.hpp"

namespace drc {

bool tracks_grad(const Tensor& t);

// Result construction for ops: `parents` holds only grad-tracking inputs.
Tensor make_op(std::vector<i64> shape, std::vector<Tensor> parents,
               std::function<void(TensorImpl&)> backward_fn);

}  // namespace drc
