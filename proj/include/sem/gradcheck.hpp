#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace sem {

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) for every element of x.
/// x is perturbed in place and restored, so f may read it through any shared handle.
template <typename T, typename F>
Tensor<T> finite_difference_grad(F&& f, Tensor<T>& x, T eps = T(1e-5)) {
    NoGradGuard no_grad;
    auto values = x.mutable_data();
    std::vector<T> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const T saved = values[i];
        values[i] = saved + eps;
        const T up = static_cast<T>(f(x));
        values[i] = saved - eps;
        const T down = static_cast<T>(f(x));
        values[i] = saved;
        out[i] = (up - down) / (T(2) * eps);
    }
    return Tensor<T>::from(x.shape(), std::move(out));
}

/// |a - b| / max(|a|, |b|), with magnitudes below `floor` treated as `floor`.
template <typename T>
T relative_error(T a, T b, T floor = T(1e-8)) {
    const T denom = std::max({std::abs(a), std::abs(b), floor});
    return std::abs(a - b) / denom;
}

template <typename T>
T max_relative_error(const std::vector<T>& analytic, const std::vector<T>& numeric, T floor = T(1e-8)) {
    T worst = T(0);
    for (std::size_t i = 0; i < analytic.size(); ++i) worst = std::max(worst, relative_error(analytic[i], numeric[i], floor));
    return worst;
}

struct GradCheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t elements = 0;
};

/// Compare backward() against finite differences for each named tensor.
/// `loss` builds a scalar from the current tensor values.
template <typename T>
std::vector<GradCheckResult> check_gradients(const std::function<Tensor<T>()>& loss,
                                             std::vector<std::pair<std::string, Tensor<T>>> inputs,
                                             T eps = T(1e-5), T floor = T(1e-8)) {
    for (auto& [name, t] : inputs) {
        t.set_requires_grad(true);
        t.zero_grad();
    }
    backward(loss());
    std::vector<GradCheckResult> results;
    for (auto& [name, t] : inputs) {
        std::vector<T> analytic(t.numel(), T(0));
        if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
        auto numeric = finite_difference_grad([&](const Tensor<T>&) { return loss().item(); }, t, eps);
        std::vector<T> num(numeric.data().begin(), numeric.data().end());
        results.push_back({name, static_cast<double>(max_relative_error(analytic, num, floor)), t.numel()});
    }
    return results;
}

}  // namespace sem
