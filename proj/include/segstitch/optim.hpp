#pragma once

#include "segstitch/tensor.hpp"

namespace segstitch {

// v <- momentum*v + g; p <- p - lr*v, elementwise over aligned collections.
template <typename T>
void sgd_momentum_step(std::vector<TensorT<T>>& params,
                       const std::vector<TensorT<T>>& grads,
                       std::vector<TensorT<T>>& velocity, T lr, T momentum);

// Same update reading each parameter's own grad buffer; grads left intact.
template <typename T>
void sgd_momentum_step(std::vector<TensorT<T>>& params,
                       std::vector<TensorT<T>>& velocity, T lr, T momentum,
                       T grad_scale = T(1));

}  // namespace segstitch
