#include "segstitch/optim.hpp"

namespace segstitch {

namespace {

template <typename T>
void check_aligned(const TensorT<T>& p, const TensorT<T>& other, size_t i,
                   const char* what) {
  if (p.shape() != other.shape())
    throw DimensionError("sgd_momentum_step: " + std::string(what) + " #" +
                         std::to_string(i) + " shape " +
                         shape_str(other.shape()) + " does not match param " +
                         shape_str(p.shape()));
}

}  // namespace

template <typename T>
void sgd_momentum_step(std::vector<TensorT<T>>& params,
                       const std::vector<TensorT<T>>& grads,
                       std::vector<TensorT<T>>& velocity, T lr, T momentum) {
  if (params.size() != grads.size() || params.size() != velocity.size())
    throw DimensionError("sgd_momentum_step: collection sizes differ (" +
                         std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " +
                         std::to_string(velocity.size()) + " velocities)");
  for (size_t i = 0; i < params.size(); ++i) {
    check_aligned(params[i], grads[i], i, "grad");
    check_aligned(params[i], velocity[i], i, "velocity");
    T* p = params[i].data();
    const T* g = grads[i].data();
    T* v = velocity[i].data();
    const int64_t n = params[i].numel();
    for (int64_t j = 0; j < n; ++j) {
      v[j] = momentum * v[j] + g[j];
      p[j] -= lr * v[j];
    }
  }
}

template <typename T>
void sgd_momentum_step(std::vector<TensorT<T>>& params,
                       std::vector<TensorT<T>>& velocity, T lr, T momentum,
                       T grad_scale) {
  if (params.size() != velocity.size())
    throw DimensionError("sgd_momentum_step: collection sizes differ (" +
                         std::to_string(params.size()) + " params, " +
                         std::to_string(velocity.size()) + " velocities)");
  for (size_t i = 0; i < params.size(); ++i) {
    check_aligned(params[i], velocity[i], i, "velocity");
    T* p = params[i].data();
    T* v = velocity[i].data();
    const std::vector<T>* gp = params[i].grad_if_any();
    const int64_t n = params[i].numel();
    for (int64_t j = 0; j < n; ++j) {
      const T g = gp ? (*gp)[static_cast<size_t>(j)] * grad_scale : T(0);
      v[j] = momentum * v[j] + g;
      p[j] -= lr * v[j];
    }
  }
}

template void sgd_momentum_step<float>(std::vector<TensorT<float>>&,
                                       const std::vector<TensorT<float>>&,
                                       std::vector<TensorT<float>>&, float, float);
template void sgd_momentum_step<double>(std::vector<TensorT<double>>&,
                                        const std::vector<TensorT<double>>&,
                                        std::vector<TensorT<double>>&, double, double);
template void sgd_momentum_step<float>(std::vector<TensorT<float>>&,
                                       std::vector<TensorT<float>>&, float, float, float);
template void sgd_momentum_step<double>(std::vector<TensorT<double>>&,
                                        std::vector<TensorT<double>>&, double, double, double);

}  // namespace segstitch
