#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "attention.hpp"

namespace sem {

enum class AttentionMode { none, se, eca, ie, sem, random_single, random_double };

inline std::string_view to_string(AttentionMode mode) {
    switch (mode) {
        case AttentionMode::none: return "none";
        case AttentionMode::se: return "se";
        case AttentionMode::eca: return "eca";
        case AttentionMode::ie: return "ie";
        case AttentionMode::sem: return "sem";
        case AttentionMode::random_single: return "random_single";
        case AttentionMode::random_double: return "random_double";
    }
    return "?";
}

inline AttentionMode parse_attention_mode(std::string_view name) {
    for (auto mode : {AttentionMode::none, AttentionMode::se, AttentionMode::eca, AttentionMode::ie, AttentionMode::sem,
                      AttentionMode::random_single, AttentionMode::random_double}) {
        if (name == to_string(mode)) return mode;
    }
    throw DomainError("unknown attention mode '" + std::string(name) + "'");
}

/// Blocks per stage of a 3-stage bottleneck ResNet: depth = 9n + 2.
inline int depth_to_blocks(int depth) {
    if (depth < 11 || (depth - 2) % 9 != 0) {
        const int below = depth < 11 ? 11 : depth - ((depth - 2) % 9);
        const int above = depth < 11 ? 11 : below + 9;
        std::string hint = below == above ? std::to_string(below) : std::to_string(below) + " or " + std::to_string(above);
        throw DomainError("invalid depth " + std::to_string(depth) + ": (depth - 2) must be a positive multiple of 9; nearest valid: " +
                          hint);
    }
    return (depth - 2) / 9;
}

/// Per-block operator sets for the random-assignment experiments.
using AttentionAssignment = std::vector<OperatorSet>;

/// i.i.d. uniform choice per block: one of the 3 operators (arity 1) or one of the
/// 3 unordered pairs (arity 2).
inline AttentionAssignment assign_random_operators(std::size_t n_blocks, int arity, std::uint64_t seed) {
    if (arity != 1 && arity != 2) throw DomainError("assign_random_operators: arity must be 1 or 2");
    static const std::array<OperatorSet, 3> singles{OperatorSet{Operator::fc}, OperatorSet{Operator::cnn},
                                                    OperatorSet{Operator::ie}};
    static const std::array<OperatorSet, 3> pairs{OperatorSet{Operator::fc, Operator::cnn},
                                                  OperatorSet{Operator::fc, Operator::ie},
                                                  OperatorSet{Operator::cnn, Operator::ie}};
    RngState rng(seed, 0xA551);
    AttentionAssignment out;
    out.reserve(n_blocks);
    for (std::size_t i = 0; i < n_blocks; ++i) {
        const auto pick = static_cast<std::size_t>(rng.integer(0, 2));
        out.push_back(arity == 1 ? singles[pick] : pairs[pick]);
    }
    return out;
}

struct NetworkConfig {
    int depth = 20;
    int num_classes = 10;
    AttentionMode attention = AttentionMode::none;
    OperatorSet operator_set = OperatorSet::all();
    Activation switch_activation = Activation::sigmoid;
    std::size_t reduction = 16;
    bool decision_removal = false;  // w fixed to 1
    std::uint64_t assignment_seed = 0;
    std::size_t stem_channels = 16;
    std::array<std::size_t, 3> widths{16, 32, 64};
    std::size_t expansion = 4;

    int blocks_per_stage() const { return depth_to_blocks(depth); }
    std::size_t total_blocks() const { return 3 * static_cast<std::size_t>(blocks_per_stage()); }

    void validate() const {
        depth_to_blocks(depth);
        if (num_classes < 2) throw DomainError("num_classes must be >= 2");
        if (operator_set.empty()) throw DomainError("operator set must be non-empty");
        if (reduction < 1) throw DomainError("reduction ratio must be >= 1");
    }
};

/// Operator set used by each block, or empty sets when attention is off.
inline AttentionAssignment resolve_assignment(const NetworkConfig& cfg) {
    const std::size_t blocks = cfg.total_blocks();
    switch (cfg.attention) {
        case AttentionMode::none: return AttentionAssignment(blocks);
        case AttentionMode::se: return AttentionAssignment(blocks, OperatorSet{Operator::fc});
        case AttentionMode::eca: return AttentionAssignment(blocks, OperatorSet{Operator::cnn});
        case AttentionMode::ie: return AttentionAssignment(blocks, OperatorSet{Operator::ie});
        case AttentionMode::sem: return AttentionAssignment(blocks, cfg.operator_set);
        case AttentionMode::random_single: return assign_random_operators(blocks, 1, cfg.assignment_seed);
        case AttentionMode::random_double: return assign_random_operators(blocks, 2, cfg.assignment_seed);
    }
    return {};
}

/// Named view into model state, used by checkpoints.
template <typename T>
struct StateEntry {
    std::string name;
    Shape shape;
    std::span<T> values;
};

namespace layers {

template <typename T>
struct Conv2d {
    Tensor<T> weight;
    std::size_t stride = 1;
    std::size_t pad = 0;

    static Conv2d init(std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride, RngState& rng) {
        // fan-in scaled uniform, the same rule as the attention weights
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
        std::vector<T> w(cout * cin * k * k);
        for (auto& v : w) v = static_cast<T>(rng.uniform(-bound, bound));
        return {Tensor<T>::from({cout, cin, k, k}, std::move(w), true), stride, (k - 1) / 2};
    }
    Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, stride, pad); }
};

template <typename T>
struct BatchNorm2d {
    Tensor<T> gamma;
    Tensor<T> beta;
    BatchNormStats<T> stats;

    static BatchNorm2d init(std::size_t channels) {
        return {Tensor<T>::ones({channels}, true), Tensor<T>::zeros({channels}, true), BatchNormStats<T>(channels)};
    }
    Tensor<T> operator()(const Tensor<T>& x, Mode mode) { return batch_norm(x, gamma, beta, stats, mode); }
};

template <typename T>
struct AttentionLayer {
    AttentionMode mode = AttentionMode::none;
    SemParams<T> params;

    /// Baselines apply sigmoid directly; every other mode goes through the switch.
    Tensor<T> operator()(const Tensor<T>& x, SemOverrides overrides, SemTrace<T>* trace) const {
        switch (mode) {
            case AttentionMode::se: return baseline_or_unit(x, BaselineKind::se, overrides);
            case AttentionMode::eca: return baseline_or_unit(x, BaselineKind::eca, overrides);
            case AttentionMode::ie: return baseline_or_unit(x, BaselineKind::ie, overrides);
            default: return sem_forward(x, params, overrides, trace);
        }
    }

  private:
    Tensor<T> baseline_or_unit(const Tensor<T>& x, BaselineKind kind, SemOverrides overrides) const {
        if (overrides.unit_map) return recalibrate(x, Tensor<T>::ones({x.dim(0), x.dim(1)}));
        return baseline_forward(x, kind, params);
    }
};

}  // namespace layers

/// Pre-activation bottleneck: BN-ReLU-1x1, BN-ReLU-3x3(stride), BN-ReLU-1x1, then attention
/// on the residual branch before the skip addition.
template <typename T>
struct BottleneckBlock {
    int stage = 0;
    std::size_t in_channels = 0;
    std::size_t width = 0;
    std::size_t out_channels = 0;
    layers::BatchNorm2d<T> bn1, bn2, bn3;
    layers::Conv2d<T> conv1, conv2, conv3;
    std::optional<layers::Conv2d<T>> shortcut;
    std::optional<layers::AttentionLayer<T>> attention;

    Tensor<T> forward(const Tensor<T>& x, Mode mode, SemOverrides overrides, SemTrace<T>* trace) {
        auto pre = relu(bn1(x, mode));
        auto skip = shortcut ? (*shortcut)(pre) : x;
        auto r = conv1(pre);
        r = conv2(relu(bn2(r, mode)));
        r = conv3(relu(bn3(r, mode)));
        if (attention) r = (*attention)(r, overrides, trace);
        return add(r, skip);
    }
};

inline SemOptions attention_options(const NetworkConfig& cfg) {
    SemOptions opts;
    opts.reduction = cfg.reduction;
    opts.switch_activation = cfg.switch_activation;
    opts.decision = cfg.attention == AttentionMode::sem && !cfg.decision_removal;
    return opts;
}

/// One block with `in` input channels and `width * expansion` outputs. Attention weights
/// come from `attn_rng`, everything else from `rng`.
template <typename T>
BottleneckBlock<T> make_block(int stage, std::size_t in, std::size_t width, std::size_t expansion, std::size_t stride,
                              AttentionMode attention, const OperatorSet& ops, const SemOptions& options, RngState& rng,
                              RngState& attn_rng) {
    BottleneckBlock<T> blk;
    blk.stage = stage;
    blk.in_channels = in;
    blk.width = width;
    blk.out_channels = width * expansion;
    blk.bn1 = layers::BatchNorm2d<T>::init(in);
    blk.conv1 = layers::Conv2d<T>::init(in, width, 1, 1, rng);
    blk.bn2 = layers::BatchNorm2d<T>::init(width);
    blk.conv2 = layers::Conv2d<T>::init(width, width, 3, stride, rng);
    blk.bn3 = layers::BatchNorm2d<T>::init(width);
    blk.conv3 = layers::Conv2d<T>::init(width, blk.out_channels, 1, 1, rng);
    if (stride != 1 || in != blk.out_channels) {
        blk.shortcut = layers::Conv2d<T>::init(in, blk.out_channels, 1, stride, rng);
    }
    if (attention != AttentionMode::none) {
        layers::AttentionLayer<T> layer;
        layer.mode = attention;
        layer.params = SemParams<T>::init(blk.out_channels, ops, attn_rng, options);
        blk.attention = std::move(layer);
    }
    return blk;
}

template <typename T>
class Model {
  public:
    static Model build(const NetworkConfig& cfg, const RngState& rng) {
        cfg.validate();
        Model model;
        model.cfg_ = cfg;
        model.assignment_ = resolve_assignment(cfg);
        // Backbone and attention weights draw from separate streams so that attention
        // variants share identical backbone weights for a given seed.
        RngState backbone_rng = rng.fork(0);
        model.stem_ = layers::Conv2d<T>::init(3, cfg.stem_channels, 3, 1, backbone_rng);
        const int n = cfg.blocks_per_stage();
        std::size_t in = cfg.stem_channels;
        std::size_t index = 0;
        for (int s = 0; s < 3; ++s) {
            for (int j = 0; j < n; ++j, ++index) {
                const std::size_t stride = (s > 0 && j == 0) ? 2 : 1;
                RngState attn_rng = rng.fork(1000 + index);
                auto blk = make_block<T>(s + 1, in, cfg.widths[s], cfg.expansion, stride, cfg.attention,
                                         model.assignment_[index], attention_options(cfg), backbone_rng, attn_rng);
                in = blk.out_channels;
                model.blocks_.push_back(std::move(blk));
            }
        }
        model.final_bn_ = layers::BatchNorm2d<T>::init(in);
        const double bound = 1.0 / std::sqrt(static_cast<double>(in));
        const auto classes = static_cast<std::size_t>(cfg.num_classes);
        std::vector<T> w(classes * in), b(classes);
        for (auto& v : w) v = static_cast<T>(backbone_rng.uniform(-bound, bound));
        for (auto& v : b) v = static_cast<T>(backbone_rng.uniform(-bound, bound));
        model.fc_weight_ = Tensor<T>::from({classes, in}, std::move(w), true);
        model.fc_bias_ = Tensor<T>::from({classes}, std::move(b), true);
        return model;
    }

    /// Logits (B, num_classes) for images (B,3,H,W). With `traces`, one entry per
    /// attention layer is appended.
    Tensor<T> forward(const Tensor<T>& x, Mode mode, std::vector<SemTrace<T>>* traces = nullptr) {
        auto h = stem_(x);
        for (auto& blk : blocks_) {
            SemTrace<T> trace;
            h = blk.forward(h, mode, overrides_, traces ? &trace : nullptr);
            if (traces && blk.attention) traces->push_back(std::move(trace));
        }
        return head(h, mode);
    }

    /// Name of the first parameter or layer output that is non-finite, or empty.
    std::string first_nonfinite_layer(const Tensor<T>& x, Mode mode) {
        for (auto& [name, t] : named_parameters()) {
            if (!all_finite(t)) return name;
        }
        NoGradGuard no_grad;
        auto h = stem_(x);
        if (!all_finite(h)) return "stem";
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            h = blocks_[i].forward(h, mode, overrides_, nullptr);
            if (!all_finite(h)) return "block" + std::to_string(i);
        }
        if (!all_finite(head(h, mode))) return "head";
        return {};
    }

    std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor<T>>> out;
        out.emplace_back("stem.weight", stem_.weight);
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& blk = blocks_[i];
            const std::string p = "block" + std::to_string(i) + ".";
            out.emplace_back(p + "bn1.gamma", blk.bn1.gamma);
            out.emplace_back(p + "bn1.beta", blk.bn1.beta);
            out.emplace_back(p + "conv1.weight", blk.conv1.weight);
            out.emplace_back(p + "bn2.gamma", blk.bn2.gamma);
            out.emplace_back(p + "bn2.beta", blk.bn2.beta);
            out.emplace_back(p + "conv2.weight", blk.conv2.weight);
            out.emplace_back(p + "bn3.gamma", blk.bn3.gamma);
            out.emplace_back(p + "bn3.beta", blk.bn3.beta);
            out.emplace_back(p + "conv3.weight", blk.conv3.weight);
            if (blk.shortcut) out.emplace_back(p + "shortcut.weight", blk.shortcut->weight);
            if (blk.attention) {
                for (auto& [name, t] : blk.attention->params.named_parameters()) out.emplace_back(p + "attention." + name, t);
            }
        }
        out.emplace_back("final_bn.gamma", final_bn_.gamma);
        out.emplace_back("final_bn.beta", final_bn_.beta);
        out.emplace_back("fc.weight", fc_weight_);
        out.emplace_back("fc.bias", fc_bias_);
        return out;
    }

    std::vector<Tensor<T>> parameters() const {
        std::vector<Tensor<T>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t total = 0;
        for (auto& [name, t] : named_parameters()) total += t.numel();
        return total;
    }

    /// Trainable tensors plus batch-norm running statistics.
    std::vector<StateEntry<T>> state() {
        std::vector<StateEntry<T>> out;
        for (auto& [name, t] : named_parameters()) {
            Tensor<T> handle = t;
            out.push_back({name, t.shape(), handle.mutable_data()});
        }
        auto add_stats = [&out](const std::string& prefix, layers::BatchNorm2d<T>& bn) {
            out.push_back({prefix + ".running_mean", {bn.stats.running_mean.size()}, bn.stats.running_mean});
            out.push_back({prefix + ".running_var", {bn.stats.running_var.size()}, bn.stats.running_var});
        };
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const std::string p = "block" + std::to_string(i) + ".";
            add_stats(p + "bn1", blocks_[i].bn1);
            add_stats(p + "bn2", blocks_[i].bn2);
            add_stats(p + "bn3", blocks_[i].bn3);
        }
        add_stats("final_bn", final_bn_);
        return out;
    }

    void set_overrides(SemOverrides overrides) { overrides_ = overrides; }
    const NetworkConfig& config() const { return cfg_; }
    const AttentionAssignment& assignment() const { return assignment_; }
    const std::vector<BottleneckBlock<T>>& blocks() const { return blocks_; }
    std::vector<BottleneckBlock<T>>& blocks() { return blocks_; }

  private:
    Tensor<T> head(const Tensor<T>& h, Mode mode) {
        auto pooled = global_avg_pool(relu(final_bn_(h, mode)));
        auto flat = reshape(pooled, {h.dim(0), h.dim(1)});
        return affine(flat, fc_weight_, std::optional<Tensor<T>>(fc_bias_));
    }

    NetworkConfig cfg_;
    AttentionAssignment assignment_;
    layers::Conv2d<T> stem_;
    std::vector<BottleneckBlock<T>> blocks_;
    layers::BatchNorm2d<T> final_bn_;
    Tensor<T> fc_weight_;
    Tensor<T> fc_bias_;
    SemOverrides overrides_{};
};

template <typename T>
Model<T> build_network(const NetworkConfig& cfg, const RngState& rng) {
    return Model<T>::build(cfg, rng);
}

/// Closed-form count of the attention parameters a block with C output channels adds.
inline std::size_t attention_parameter_formula(std::size_t channels, const OperatorSet& ops, std::size_t reduction,
                                               bool with_decision, EcaHyper eca = {}) {
    std::size_t total = with_decision ? ops.size() * channels : 0;
    if (ops.contains(Operator::fc)) total += 2 * channels * std::max<std::size_t>(1, channels / reduction);
    if (ops.contains(Operator::cnn)) total += static_cast<std::size_t>(eca_kernel_size(static_cast<long long>(channels), eca));
    if (ops.contains(Operator::ie)) total += 2;
    return total;
}

}  // namespace sem
