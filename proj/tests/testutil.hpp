#pragma once

#include <functional>
#include <vector>

#include "rimae/tensor.hpp"

namespace rimae::testutil {

// Max relative error between analytic gradients already stored in `leaves`
// and central finite differences of `eval` (a tape-free re-evaluation of the
// same loss). `stride` samples every n-th entry of large tensors.
template <class S>
double fd_max_rel_err(std::vector<TensorT<S>*> leaves, const std::function<double()>& eval,
                      double h = 1e-6, Index stride = 1) {
  double worst = 0.0;
  for (TensorT<S>* leaf : leaves) {
    const auto& g = leaf->grad_view();
    for (Index i = 0; i < leaf->size(); i += stride) {
      const S keep = leaf->data()[i];
      leaf->data()[i] = keep + static_cast<S>(h);
      const double fp = eval();
      leaf->data()[i] = keep - static_cast<S>(h);
      const double fm = eval();
      leaf->data()[i] = keep;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = static_cast<double>(g[static_cast<std::size_t>(i)]);
      const double rel = std::abs(fd - an) / std::max(std::abs(fd) + std::abs(an), 1e-3);
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff: shape mismatch");
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return worst;
}

}  // namespace rimae::testutil
