#pragma once

#include <cstddef>
#include <vector>

#include "tensor.hpp"

namespace sem {

struct SgdOptions {
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + (grad + weight_decay * param);  param <- param - lr * v
template <typename T>
class Sgd {
  public:
    Sgd(std::vector<Tensor<T>> params, SgdOptions options) : params_(std::move(params)), options_(options) {
        velocity_.reserve(params_.size());
        for (const auto& p : params_) velocity_.emplace_back(p.numel(), T(0));
    }

    void set_lr(double lr) { options_.lr = lr; }
    double lr() const { return options_.lr; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        const T lr = static_cast<T>(options_.lr);
        const T mu = static_cast<T>(options_.momentum);
        const T wd = static_cast<T>(options_.weight_decay);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto values = params_[i].mutable_data();
            auto grad = params_[i].grad();
            auto& v = velocity_[i];
            const bool has_grad = !grad.empty();
            for (std::size_t j = 0; j < values.size(); ++j) {
                const T g = (has_grad ? grad[j] : T(0)) + wd * values[j];
                v[j] = mu * v[j] + g;
                values[j] -= lr * v[j];
            }
        }
    }

    const std::vector<std::vector<T>>& velocity() const { return velocity_; }

  private:
    std::vector<Tensor<T>> params_;
    std::vector<std::vector<T>> velocity_;
    SgdOptions options_;
};

/// Step schedule: initial lr divided by 10 at each milestone epoch.
struct StepSchedule {
    double initial = 0.1;
    double divisor = 10.0;
    std::vector<int> milestones{81, 122};

    double at(int epoch) const {
        double lr = initial;
        for (int m : milestones)
            if (epoch >= m) lr /= divisor;
        return lr;
    }
};

}  // namespace sem
