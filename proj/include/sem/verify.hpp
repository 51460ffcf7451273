#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "gradcheck.hpp"

namespace sem {

struct GradcheckReport {
    std::string scope;
    std::vector<GradCheckResult> groups;

    double max_error() const {
        double worst = 0.0;
        for (const auto& g : groups) worst = std::max(worst, g.max_rel_error);
        return worst;
    }
    bool passed(double tolerance = 1e-4) const { return max_error() <= tolerance; }
};

namespace detail {

using D = double;

inline Tensor<D> random_tensor(RngState& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<D> v(numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor<D>::from(std::move(shape), std::move(v));
}

/// Values with magnitude in [0.1, 1] and random sign, away from ReLU kinks.
inline Tensor<D> random_away_from_zero(RngState& rng, Shape shape) {
    std::vector<D> v(numel(shape));
    for (auto& x : v) x = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.uniform(0.1, 1.0);
    return Tensor<D>::from(std::move(shape), std::move(v));
}

/// Scalar probe sum(out * R) with a fixed random R, so no gradient is trivially zero.
inline std::function<Tensor<D>(const Tensor<D>&)> probe(RngState& rng, const Shape& shape) {
    auto weights = random_tensor(rng, shape);
    return [weights](const Tensor<D>& out) { return sum(mul(out, weights)); };
}

using Group = std::pair<std::string, Tensor<D>>;

inline GradcheckReport check(const std::string& scope, std::vector<Group> inputs,
                             const std::function<Tensor<D>()>& forward, RngState& rng) {
    Tensor<D> sample;
    {
        NoGradGuard g;
        sample = forward();
    }
    auto loss_of = probe(rng, sample.shape());
    GradcheckReport report{scope, {}};
    report.groups = check_gradients<D>([&] { return loss_of(forward()); }, std::move(inputs), 1e-5, 1e-7);
    return report;
}

}  // namespace detail

/// Every scope accepted by run_gradcheck.
inline std::vector<std::string> gradcheck_scopes() {
    return {"global_avg_pool", "affine",     "conv2d",    "conv1d_channel", "sigmoid",       "tanh",
            "relu",            "leaky_relu", "mul",       "add",            "scale",         "reshape",
            "column",          "batch_norm", "softmax_cross_entropy",       "squeeze",       "decide",
            "excite_fc",       "excite_cnn", "excite_ie", "switch",         "recalibrate",   "sem-layer",
            "full-block"};
}

/// Finite-difference check (f64, eps = 1e-5) of one operation, a full attention layer
/// ("sem-layer") or a bottleneck block with attention ("full-block").
inline GradcheckReport run_gradcheck(const std::string& scope, std::uint64_t seed = 0, std::size_t channels = 8) {
    using detail::D;
    using detail::random_tensor;
    using detail::random_away_from_zero;
    RngState rng(seed, 77);

    if (scope == "global_avg_pool") {
        auto x = random_tensor(rng, {2, 3, 4, 5});
        return detail::check(scope, {{"x", x}}, [=] { return global_avg_pool(x); }, rng);
    }
    if (scope == "affine") {
        auto x = random_tensor(rng, {3, 4});
        auto w = random_tensor(rng, {5, 4});
        auto b = random_tensor(rng, {5});
        return detail::check(scope, {{"x", x}, {"weight", w}, {"bias", b}},
                             [=] { return affine(x, w, std::optional<Tensor<D>>(b)); }, rng);
    }
    if (scope == "conv2d") {
        auto x = random_tensor(rng, {2, 2, 5, 5});
        auto k = random_tensor(rng, {3, 2, 3, 3});
        auto r1 = detail::check(scope, {{"x", x}, {"kernel", k}}, [=] { return conv2d(x, k, 1, 1); }, rng);
        auto xs = random_tensor(rng, {2, 3, 6, 6});
        auto ks = random_tensor(rng, {4, 3, 1, 1});
        auto r2 = detail::check(scope, {{"x(stride2)", xs}, {"kernel(stride2)", ks}}, [=] { return conv2d(xs, ks, 2, 0); }, rng);
        r1.groups.insert(r1.groups.end(), r2.groups.begin(), r2.groups.end());
        return r1;
    }
    if (scope == "conv1d_channel") {
        auto m = random_tensor(rng, {2, channels});
        auto k = random_tensor(rng, {3});
        return detail::check(scope, {{"m", m}, {"kernel", k}}, [=] { return conv1d_channel(m, k); }, rng);
    }
    for (auto kind : {Activation::sigmoid, Activation::tanh, Activation::relu, Activation::leaky_relu}) {
        if (scope == to_string(kind)) {
            auto x = random_away_from_zero(rng, {3, 7});
            return detail::check(scope, {{"x", x}}, [=] { return activate(x, kind); }, rng);
        }
    }
    if (scope == "mul" || scope == "add") {
        auto a = random_tensor(rng, {2, 3, 4, 4});
        auto b = random_tensor(rng, {2, 3, 1, 1});
        const bool is_mul = scope == "mul";
        return detail::check(scope, {{"a", a}, {"b(broadcast)", b}}, [=] { return is_mul ? mul(a, b) : add(a, b); }, rng);
    }
    if (scope == "scale") {
        auto x = random_tensor(rng, {4, 3});
        return detail::check(scope, {{"x", x}}, [=] { return scale(x, 0.37); }, rng);
    }
    if (scope == "reshape") {
        auto x = random_tensor(rng, {2, 6});
        return detail::check(scope, {{"x", x}}, [=] { return reshape(x, {3, 4}); }, rng);
    }
    if (scope == "column") {
        auto x = random_tensor(rng, {4, 3});
        return detail::check(scope, {{"x", x}}, [=] { return column(x, 1); }, rng);
    }
    if (scope == "batch_norm") {
        auto x = random_tensor(rng, {4, 3, 3, 3});
        auto gamma = random_tensor(rng, {3}, 0.5, 1.5);
        auto beta = random_tensor(rng, {3});
        auto stats = std::make_shared<BatchNormStats<D>>(3);
        auto train = detail::check(scope, {{"x", x}, {"gamma", gamma}, {"beta", beta}},
                                   [=] { return batch_norm(x, gamma, beta, *stats, Mode::train); }, rng);
        auto xe = random_tensor(rng, {4, 3, 3, 3});
        auto eval = detail::check(scope, {{"x(eval)", xe}, {"gamma(eval)", gamma}, {"beta(eval)", beta}},
                                  [=] { return batch_norm(xe, gamma, beta, *stats, Mode::eval); }, rng);
        train.groups.insert(train.groups.end(), eval.groups.begin(), eval.groups.end());
        return train;
    }
    if (scope == "softmax_cross_entropy") {
        auto z = random_tensor(rng, {4, 5}, -2.0, 2.0);
        std::vector<int> labels{0, 3, 4, 1};
        GradcheckReport report{scope, {}};
        report.groups = check_gradients<D>([=] { return softmax_cross_entropy(z, std::span<const int>(labels)); }, {{"logits", z}});
        return report;
    }

    // Attention stages, C = channels.
    const std::size_t c = channels;
    SemOptions opts;
    opts.reduction = 2;  // keeps the FC hidden layer non-trivial at small C
    auto params = SemParams<D>::init(c, OperatorSet::all(), rng, opts);
    // move IE off its constant initialization so every path carries signal
    params.ie_gamma.mutable_data()[0] = 0.7;
    params.ie_beta.mutable_data()[0] = -0.4;
    auto x = random_tensor(rng, {2, c, 3, 3});
    auto m = random_away_from_zero(rng, {2, c});

    if (scope == "squeeze") return detail::check(scope, {{"x", x}}, [=] { return squeeze(x); }, rng);
    if (scope == "decide") {
        return detail::check(scope, {{"m", m}, {"decision_weight", params.decision_weight}},
                             [=] { return decide(m, params.decision_weight); }, rng);
    }
    if (scope == "excite_fc") {
        return detail::check(scope, {{"m", m}, {"fc_w1", params.fc_w1}, {"fc_w2", params.fc_w2}},
                             [=] { return excite_fc(m, params.fc_w1, params.fc_w2); }, rng);
    }
    if (scope == "excite_cnn") {
        return detail::check(scope, {{"m", m}, {"eca_kernel", params.eca_kernel}},
                             [=] { return excite_cnn(m, params.eca_kernel); }, rng);
    }
    if (scope == "excite_ie") {
        return detail::check(scope, {{"m", m}, {"ie_gamma", params.ie_gamma}, {"ie_beta", params.ie_beta}},
                             [=] { return excite_ie(m, params.ie_gamma, params.ie_beta); }, rng);
    }
    if (scope == "switch") {
        std::vector<Tensor<D>> branches{random_tensor(rng, {2, c}, -2, 2), random_tensor(rng, {2, c}, -2, 2),
                                        random_tensor(rng, {2, c}, -2, 2)};
        auto w = random_tensor(rng, {2, 3}, 0.05, 0.95);
        return detail::check(scope,
                             {{"v_fc", branches[0]}, {"v_cnn", branches[1]}, {"v_ie", branches[2]}, {"w", w}},
                             [=] { return switch_map(branches, w); }, rng);
    }
    if (scope == "recalibrate") {
        auto v = random_tensor(rng, {2, c}, 0.0, 1.0);
        return detail::check(scope, {{"x", x}, {"v", v}}, [=] { return recalibrate(x, v); }, rng);
    }
    if (scope == "sem-layer") {
        std::vector<detail::Group> groups{{"x", x}};
        for (auto& [name, t] : params.named_parameters()) groups.emplace_back(name, t);
        return detail::check(scope, groups, [=] { return sem_forward(x, params); }, rng);
    }
    if (scope == "full-block") {
        RngState block_rng(seed, 78);
        RngState attn_rng(seed, 79);
        const std::size_t width = std::max<std::size_t>(2, c / 4);
        auto blk = std::make_shared<BottleneckBlock<D>>(make_block<D>(1, c, width, 4, 2, AttentionMode::sem,
                                                                      OperatorSet::all(), opts, block_rng, attn_rng));
        blk->attention->params.ie_gamma.mutable_data()[0] = 0.7;
        blk->attention->params.ie_beta.mutable_data()[0] = -0.4;
        auto xb = random_tensor(rng, {3, c, 6, 6});
        std::vector<detail::Group> groups{{"x", xb},
                                          {"conv1", blk->conv1.weight},
                                          {"conv2", blk->conv2.weight},
                                          {"conv3", blk->conv3.weight},
                                          {"bn1.gamma", blk->bn1.gamma},
                                          {"bn2.beta", blk->bn2.beta}};
        if (blk->shortcut) groups.emplace_back("shortcut", blk->shortcut->weight);
        for (auto& [name, t] : blk->attention->params.named_parameters()) groups.emplace_back("attention." + name, t);
        return detail::check(scope, groups, [=] { return blk->forward(xb, Mode::train, {}, nullptr); }, rng);
    }
    throw UsageError("gradcheck: unknown scope '" + scope + "'");
}

}  // namespace sem
