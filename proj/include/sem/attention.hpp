#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ops.hpp"
#include "rng.hpp"

namespace sem {

enum class Operator { fc = 0, cnn = 1, ie = 2 };

inline std::string_view to_string(Operator op) {
    switch (op) {
        case Operator::fc: return "fc";
        case Operator::cnn: return "cnn";
        case Operator::ie: return "ie";
    }
    return "?";
}

/// Enabled subset of {FC, CNN, IE}, always iterated in that order. Decision index i
/// refers to the i-th enabled member.
class OperatorSet {
  public:
    OperatorSet() = default;
    OperatorSet(std::initializer_list<Operator> ops) {
        for (auto op : ops) {
            if (contains(op)) throw DomainError("operator set: duplicate operator " + std::string(to_string(op)));
            enabled_[static_cast<int>(op)] = true;
        }
    }

    static OperatorSet all() { return {Operator::fc, Operator::cnn, Operator::ie}; }

    /// Parses "fc,cnn,ie" (any order, '+' also accepted as separator).
    static OperatorSet parse(std::string_view text) {
        OperatorSet set;
        std::size_t start = 0;
        while (start <= text.size()) {
            std::size_t end = text.find_first_of(",+", start);
            if (end == std::string_view::npos) end = text.size();
            auto token = text.substr(start, end - start);
            Operator op;
            if (token == "fc") op = Operator::fc;
            else if (token == "cnn" || token == "eca") op = Operator::cnn;
            else if (token == "ie") op = Operator::ie;
            else throw DomainError("operator set: unknown operator '" + std::string(token) + "'");
            if (set.contains(op)) throw DomainError("operator set: duplicate operator '" + std::string(token) + "'");
            set.enabled_[static_cast<int>(op)] = true;
            start = end + 1;
        }
        if (set.empty()) throw DomainError("operator set: empty");
        return set;
    }

    bool contains(Operator op) const { return enabled_[static_cast<int>(op)]; }
    bool empty() const { return size() == 0; }
    std::size_t size() const { return std::size_t(enabled_[0]) + enabled_[1] + enabled_[2]; }

    std::vector<Operator> members() const {
        std::vector<Operator> out;
        for (int i = 0; i < 3; ++i)
            if (enabled_[i]) out.push_back(static_cast<Operator>(i));
        return out;
    }

    /// Position of `op` in members(), or -1 when disabled.
    int index_of(Operator op) const {
        if (!contains(op)) return -1;
        int idx = 0;
        for (int i = 0; i < static_cast<int>(op); ++i) idx += enabled_[i];
        return idx;
    }

    std::string str() const {
        std::string out;
        for (auto op : members()) {
            if (!out.empty()) out += ",";
            out += to_string(op);
        }
        return out;
    }

    bool operator==(const OperatorSet&) const = default;

  private:
    std::array<bool, 3> enabled_{false, false, false};
};

struct EcaHyper {
    int gamma = 2;
    int b = 1;
};

/// Adaptive 1-D kernel size: t = (log2(C) + b) / gamma, truncated toward zero and bumped
/// to the next odd integer when even; never below 1.
inline int eca_kernel_size(long long channels, EcaHyper hyper = {}) {
    if (channels < 1) throw DomainError("eca_kernel_size: channel count must be >= 1, got " + std::to_string(channels));
    if (hyper.gamma < 1) throw DomainError("eca_kernel_size: gamma must be >= 1");
    const double t = (std::log2(static_cast<double>(channels)) + hyper.b) / hyper.gamma;
    int k = static_cast<int>(std::abs(t));
    if (k % 2 == 0) k += 1;
    return std::max(k, 1);
}

struct SemOptions {
    std::size_t reduction = 16;
    Activation switch_activation = Activation::sigmoid;
    bool decision = true;        // false: no W_d, the decision vector is fixed to ones
    bool decision_bias = false;  // off by default: w = sigmoid(W_d m)
    std::optional<int> kernel_size;  // overrides eca_kernel_size
    EcaHyper eca{};
};

/// Per-layer parameters. Only tensors for enabled operators are allocated.
template <typename T>
struct SemParams {
    OperatorSet ops;
    std::size_t channels = 0;
    SemOptions options;

    Tensor<T> decision_weight;  // (N, C)
    Tensor<T> decision_bias;    // (N), only with options.decision_bias
    Tensor<T> fc_w1;            // (hidden, C)
    Tensor<T> fc_w2;            // (C, hidden)
    Tensor<T> eca_kernel;       // (k)
    Tensor<T> ie_gamma;         // (1,1)
    Tensor<T> ie_beta;          // (1,1)

    std::size_t hidden() const { return std::max<std::size_t>(1, channels / options.reduction); }
    std::size_t kernel_size() const { return eca_kernel.defined() ? eca_kernel.numel() : 0; }
    bool has_decision() const { return decision_weight.defined(); }

    /// Fan-in scaled uniform weights; IE starts at gamma = 0, beta = -1.
    static SemParams init(std::size_t channels, OperatorSet ops, RngState& rng, SemOptions options = {}) {
        if (channels < 1) throw DomainError("SemParams: channels must be >= 1");
        if (ops.empty()) throw DomainError("SemParams: operator set is empty");
        if (options.reduction < 1) throw DomainError("SemParams: reduction ratio must be >= 1");
        SemParams p;
        p.ops = ops;
        p.channels = channels;
        p.options = options;
        auto uniform = [&rng](Shape shape, std::size_t fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::vector<T> v(numel(shape));
            for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
            return Tensor<T>::from(std::move(shape), std::move(v), true);
        };
        const std::size_t n = ops.size();
        if (options.decision) {
            p.decision_weight = uniform({n, channels}, channels);
            if (options.decision_bias) p.decision_bias = uniform({n}, channels);
        }
        if (ops.contains(Operator::fc)) {
            p.fc_w1 = uniform({p.hidden(), channels}, channels);
            p.fc_w2 = uniform({channels, p.hidden()}, p.hidden());
        }
        if (ops.contains(Operator::cnn)) {
            const int k = options.kernel_size ? *options.kernel_size
                                              : eca_kernel_size(static_cast<long long>(channels), options.eca);
            if (k < 1 || k % 2 == 0) throw DomainError("SemParams: ECA kernel size must be odd, got " + std::to_string(k));
            p.eca_kernel = uniform({static_cast<std::size_t>(k)}, static_cast<std::size_t>(k));
        }
        if (ops.contains(Operator::ie)) {
            p.ie_gamma = Tensor<T>::full({1, 1}, T(0), true);
            p.ie_beta = Tensor<T>::full({1, 1}, T(-1), true);
        }
        return p;
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        if (decision_weight.defined()) out.emplace_back("decision_weight", decision_weight);
        if (decision_bias.defined()) out.emplace_back("decision_bias", decision_bias);
        if (fc_w1.defined()) out.emplace_back("fc_w1", fc_w1);
        if (fc_w2.defined()) out.emplace_back("fc_w2", fc_w2);
        if (eca_kernel.defined()) out.emplace_back("eca_kernel", eca_kernel);
        if (ie_gamma.defined()) out.emplace_back("ie_gamma", ie_gamma);
        if (ie_beta.defined()) out.emplace_back("ie_beta", ie_beta);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (const auto& [name, t] : named_parameters()) total += t.numel();
        return total;
    }
};

// ---------------------------------------------------------------------------
// Stages of the module
// ---------------------------------------------------------------------------

/// Channel descriptor m (B,C): spatial mean of x (B,C,H,W).
template <typename T>
Tensor<T> squeeze(const Tensor<T>& x) {
    auto pooled = global_avg_pool(x);
    return reshape(pooled, {x.dim(0), x.dim(1)});
}

/// Decision vector w = sigmoid(m W_d^T), shape (B,N).
template <typename T>
Tensor<T> decide(const Tensor<T>& m, const Tensor<T>& decision_weight,
                 const std::optional<Tensor<T>>& bias = std::nullopt) {
    return sigmoid(affine(m, decision_weight, bias));
}

/// FC bottleneck W_2 relu(W_1 m). Pre-activation: no sigmoid here.
template <typename T>
Tensor<T> excite_fc(const Tensor<T>& m, const Tensor<T>& w1, const Tensor<T>& w2) {
    return affine(relu(affine(m, w1)), w2);
}

/// Shared k-tap convolution across channels. Pre-activation.
template <typename T>
Tensor<T> excite_cnn(const Tensor<T>& m, const Tensor<T>& kernel) {
    return conv1d_channel(m, kernel);
}

/// Instance enhance: m * gamma + beta with scalar (1,1) gamma and beta.
template <typename T>
Tensor<T> excite_ie(const Tensor<T>& m, const Tensor<T>& gamma, const Tensor<T>& beta) {
    return add(mul(m, gamma), beta);
}

/// v = prod_i act(branch_i * w[:, i]). Branches are (B,C); w is (B,N).
template <typename T>
Tensor<T> switch_map(const std::vector<Tensor<T>>& branches, const Tensor<T>& w,
                     Activation activation = Activation::sigmoid) {
    if (branches.empty()) throw DomainError("switch: no branches");
    if (w.rank() != 2 || w.dim(1) != branches.size() || w.dim(0) != branches[0].dim(0)) {
        throw DomainError("switch: decision vector " + to_string(w.shape()) + " does not match " +
                          std::to_string(branches.size()) + " branches");
    }
    Tensor<T> v;
    for (std::size_t i = 0; i < branches.size(); ++i) {
        auto gated = activate(mul(branches[i], column(w, i)), activation);
        v = v.defined() ? mul(v, gated) : gated;
    }
    return v;
}

/// x_att = x * v, v (B,C) broadcast over H,W.
template <typename T>
Tensor<T> recalibrate(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.rank() != 4 || v.rank() != 2 || v.dim(0) != x.dim(0) || v.dim(1) != x.dim(1)) {
        throw DomainError("recalibrate: attention map " + to_string(v.shape()) + " does not match feature map " +
                          to_string(x.shape()));
    }
    return mul(x, reshape(v, {x.dim(0), x.dim(1), 1, 1}));
}

/// Branch outputs v_op (B,C) for every enabled operator, in canonical order.
template <typename T>
std::vector<Tensor<T>> excite_all(const Tensor<T>& m, const SemParams<T>& p) {
    std::vector<Tensor<T>> branches;
    for (auto op : p.ops.members()) {
        switch (op) {
            case Operator::fc: branches.push_back(excite_fc(m, p.fc_w1, p.fc_w2)); break;
            case Operator::cnn: branches.push_back(excite_cnn(m, p.eca_kernel)); break;
            case Operator::ie: branches.push_back(excite_ie(m, p.ie_gamma, p.ie_beta)); break;
        }
    }
    return branches;
}

struct SemOverrides {
    bool unit_decision = false;  // w == 1 (decision-module removal)
    bool unit_map = false;       // v == 1 (attention disabled, shapes kept)
};

template <typename T>
struct SemTrace {
    Tensor<T> m;  // (B,C)
    Tensor<T> w;  // (B,N)
    Tensor<T> v;  // (B,C)
};

/// squeeze -> decide -> excite each operator -> switch -> recalibrate.
template <typename T>
Tensor<T> sem_forward(const Tensor<T>& x, const SemParams<T>& p, SemOverrides overrides = {},
                      SemTrace<T>* trace = nullptr) {
    if (x.rank() != 4 || x.dim(1) != p.channels) {
        throw DomainError("sem_forward: input " + to_string(x.shape()) + " does not have " +
                          std::to_string(p.channels) + " channels");
    }
    const std::size_t batch = x.dim(0);
    auto m = squeeze(x);
    Tensor<T> w;
    if (overrides.unit_decision || !p.has_decision()) {
        w = Tensor<T>::ones({batch, p.ops.size()});
    } else {
        std::optional<Tensor<T>> bias;
        if (p.decision_bias.defined()) bias = p.decision_bias;
        w = decide(m, p.decision_weight, bias);
    }
    auto branches = excite_all(m, p);
    auto v = overrides.unit_map ? Tensor<T>::ones({batch, p.channels})
                                : switch_map(branches, w, p.options.switch_activation);
    if (trace) *trace = {m, w, v};
    return recalibrate(x, v);
}

enum class BaselineKind { se, eca, ie };

inline Operator baseline_operator(BaselineKind kind) {
    switch (kind) {
        case BaselineKind::se: return Operator::fc;
        case BaselineKind::eca: return Operator::cnn;
        case BaselineKind::ie: return Operator::ie;
    }
    return Operator::fc;
}

/// Standalone single-operator module: x * sigmoid(branch(m)).
template <typename T>
Tensor<T> baseline_forward(const Tensor<T>& x, BaselineKind kind, const SemParams<T>& p) {
    const Operator op = baseline_operator(kind);
    if (!p.ops.contains(op)) {
        throw DomainError("baseline_forward: parameters lack operator " + std::string(to_string(op)));
    }
    auto m = squeeze(x);
    Tensor<T> branch;
    switch (op) {
        case Operator::fc: branch = excite_fc(m, p.fc_w1, p.fc_w2); break;
        case Operator::cnn: branch = excite_cnn(m, p.eca_kernel); break;
        case Operator::ie: branch = excite_ie(m, p.ie_gamma, p.ie_beta); break;
    }
    return recalibrate(x, sigmoid(branch));
}

}  // namespace sem
