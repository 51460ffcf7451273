#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace sem {

enum class Activation { sigmoid, tanh, relu, leaky_relu };

inline std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::sigmoid: return "sigmoid";
        case Activation::tanh: return "tanh";
        case Activation::relu: return "relu";
        case Activation::leaky_relu: return "leaky_relu";
    }
    return "?";
}

inline Activation parse_activation(std::string_view name) {
    if (name == "sigmoid") return Activation::sigmoid;
    if (name == "tanh") return Activation::tanh;
    if (name == "relu") return Activation::relu;
    if (name == "leaky_relu" || name == "leakyrelu") return Activation::leaky_relu;
    throw DomainError("unknown activation '" + std::string(name) + "'");
}

enum class Mode { train, eval };

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size()) {
        throw DomainError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
    }
    Shape out(a.size());
    for (std::size_t d = 0; d < a.size(); ++d) {
        if (a[d] == b[d] || b[d] == 1) {
            out[d] = a[d];
        } else if (a[d] == 1) {
            out[d] = b[d];
        } else {
            throw DomainError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                              " do not broadcast");
        }
    }
    return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& s, const Shape& out) {
    std::vector<std::size_t> strides(s.size(), 0);
    std::size_t stride = 1;
    for (std::size_t d = s.size(); d-- > 0;) {
        strides[d] = (s[d] == 1 && out[d] != 1) ? 0 : stride;
        stride *= s[d];
    }
    return strides;
}

/// Visit the output in runs: f(out_offset, a_offset, b_offset, length, a_step, b_step), where
/// each step is 0 (operand broadcast along the run) or 1. Adjacent dims are merged first so
/// that runs are as long as possible.
template <typename F>
void broadcast_runs(const Shape& out_shape, const std::vector<std::size_t>& sa_in, const std::vector<std::size_t>& sb_in,
                    F&& f) {
    const std::size_t total = numel(out_shape);
    if (total == 0) return;
    // drop unit dims, then merge neighbours whose strides line up for both operands
    std::vector<std::size_t> out, sa, sb;
    for (std::size_t d = 0; d < out_shape.size(); ++d) {
        if (out_shape[d] == 1) continue;
        if (!out.empty()) {
            const std::size_t n = out_shape[d];
            const bool a_ok = sa.back() == sa_in[d] * n;
            const bool b_ok = sb.back() == sb_in[d] * n;
            if (a_ok && b_ok) {
                out.back() *= n;
                sa.back() = sa_in[d];
                sb.back() = sb_in[d];
                continue;
            }
        }
        out.push_back(out_shape[d]);
        sa.push_back(sa_in[d]);
        sb.push_back(sb_in[d]);
    }
    if (out.empty()) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0}, std::size_t{1}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t rank = out.size();
    const std::size_t inner = out[rank - 1];
    const std::size_t step_a = sa[rank - 1];
    const std::size_t step_b = sb[rank - 1];
    if (step_a > 1 || step_b > 1) {
        // innermost dim is strided for some operand: fall back to single-element runs
        std::vector<std::size_t> idx(rank, 0);
        for (std::size_t i = 0; i < total; ++i) {
            std::size_t oa = 0, ob = 0;
            for (std::size_t d = 0; d < rank; ++d) {
                oa += idx[d] * sa[d];
                ob += idx[d] * sb[d];
            }
            f(i, oa, ob, std::size_t{1}, std::size_t{0}, std::size_t{0});
            for (std::size_t d = rank; d-- > 0;) {
                if (++idx[d] < out[d]) break;
                idx[d] = 0;
            }
        }
        return;
    }
    std::vector<std::size_t> idx(rank, 0);
    std::size_t oa = 0;
    std::size_t ob = 0;
    for (std::size_t i = 0; i < total; i += inner) {
        f(i, oa, ob, inner, step_a, step_b);
        for (std::size_t d = rank - 1; d-- > 0;) {
            ++idx[d];
            oa += sa[d];
            ob += sb[d];
            if (idx[d] < out[d]) break;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sum of f(i) for i < n in a fixed lane order, independent of pointer alignment, so equal
/// inputs give bit-equal sums wherever they live.
template <typename T, typename F>
inline T lane_sum(std::size_t n, F&& f) {
    constexpr std::size_t lanes = 16;
    T acc[lanes] = {};
    std::size_t i = 0;
    for (; i + lanes <= n; i += lanes)
        for (std::size_t l = 0; l < lanes; ++l) acc[l] += f(i + l);
    T tail = T(0);
    for (; i < n; ++i) tail += f(i);
    for (std::size_t w = lanes / 2; w > 0; w /= 2)
        for (std::size_t l = 0; l < w; ++l) acc[l] += acc[l + w];
    return acc[0] + tail;
}

/// y[i] = op(a[i*sa], b[i*sb]) for i < n, with sa, sb in {0, 1}.
template <typename T, typename Op>
inline void binary_run(T* y, const T* a, const T* b, std::size_t n, std::size_t sa, std::size_t sb, Op op) {
    if (sa && sb) {
        for (std::size_t i = 0; i < n; ++i) y[i] = op(a[i], b[i]);
    } else if (sa) {
        const T vb = b[0];
        for (std::size_t i = 0; i < n; ++i) y[i] = op(a[i], vb);
    } else if (sb) {
        const T va = a[0];
        for (std::size_t i = 0; i < n; ++i) y[i] = op(va, b[i]);
    } else {
        const T v = op(a[0], b[0]);
        for (std::size_t i = 0; i < n; ++i) y[i] = v;
    }
}

/// Accumulate g[0..n) into dst: elementwise when step is 1, summed into dst[0] when 0.
template <typename T>
inline void accumulate_run(T* dst, const T* g, std::size_t n, std::size_t step) {
    if (step) {
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[i];
    } else {
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) acc += g[i];
        dst[0] += acc;
    }
}

/// Accumulate g[i] * other[i*so] into dst (step sd), the product-rule half of mul's backward.
template <typename T>
inline void accumulate_product_run(T* dst, std::size_t sd, const T* g, const T* other, std::size_t so, std::size_t n) {
    if (sd && so) {
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * other[i];
    } else if (sd) {
        const T v = other[0];
        for (std::size_t i = 0; i < n; ++i) dst[i] += g[i] * v;
    } else if (so) {
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) acc += g[i] * other[i];
        dst[0] += acc;
    } else {
        T acc = T(0);
        for (std::size_t i = 0; i < n; ++i) acc += g[i];
        dst[0] += acc * other[0];
    }
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with same-rank singleton broadcasting.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    Shape out = detail::broadcast_shape(a.shape(), b.shape(), "add");
    auto sa = detail::broadcast_strides(a.shape(), out);
    auto sb = detail::broadcast_strides(b.shape(), out);
    std::vector<T> y(numel(out));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    detail::broadcast_runs(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib, std::size_t n, std::size_t ka,
                                            std::size_t kb) {
        detail::binary_run(y.data() + i, pa + ia, pb + ib, n, ka, kb, [](T u, T v) { return u + v; });
    });
    auto na = a.node();
    auto nb = b.node();
    return detail::make_result<T>(out, std::move(y), "add", {na, nb}, [na, nb, sa, sb](detail::Node<T>& self) {
        const T* g = self.grad.data();
        const std::size_t total = self.grad.size();
        // an operand with the output's shape can take the gradient by plain copy
        auto take_full = [&](detail::Node<T>& in) {
            if (!in.requires_grad || in.data.size() != total) return false;
            bool fresh;
            T* dst = in.grad_for_overwrite(fresh);
            if (fresh) {
                std::copy(g, g + total, dst);
            } else {
                for (std::size_t i = 0; i < total; ++i) dst[i] += g[i];
            }
            return true;
        };
        T* ga = na->requires_grad && !take_full(*na) ? na->grad_buffer() : nullptr;
        T* gb = nb->requires_grad && !take_full(*nb) ? nb->grad_buffer() : nullptr;
        if (!ga && !gb) return;
        detail::broadcast_runs(self.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib, std::size_t n,
                                                       std::size_t ka, std::size_t kb) {
            if (ga) detail::accumulate_run(ga + ia, g + i, n, ka);
            if (gb) detail::accumulate_run(gb + ib, g + i, n, kb);
        });
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    Shape out = detail::broadcast_shape(a.shape(), b.shape(), "mul");
    auto sa = detail::broadcast_strides(a.shape(), out);
    auto sb = detail::broadcast_strides(b.shape(), out);
    std::vector<T> y(numel(out));
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    detail::broadcast_runs(out, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib, std::size_t n, std::size_t ka,
                                            std::size_t kb) {
        detail::binary_run(y.data() + i, pa + ia, pb + ib, n, ka, kb, [](T u, T v) { return u * v; });
    });
    auto na = a.node();
    auto nb = b.node();
    return detail::make_result<T>(out, std::move(y), "mul", {na, nb}, [na, nb, sa, sb](detail::Node<T>& self) {
        const T* g = self.grad.data();
        const T* va = na->data.data();
        const T* vb = nb->data.data();
        const std::size_t total = self.grad.size();
        bool fresh_a = false, fresh_b = false;
        T* ga = nullptr;
        T* gb = nullptr;
        if (na->requires_grad) ga = na->data.size() == total ? na->grad_for_overwrite(fresh_a) : na->grad_buffer();
        if (nb->requires_grad) gb = nb->data.size() == total ? nb->grad_for_overwrite(fresh_b) : nb->grad_buffer();
        auto times = [](T u, T v) { return u * v; };
        detail::broadcast_runs(self.shape, sa, sb, [&](std::size_t i, std::size_t ia, std::size_t ib, std::size_t n,
                                                       std::size_t ka, std::size_t kb) {
            if (fresh_a) {
                detail::binary_run(ga + ia, g + i, vb + ib, n, 1, kb, times);
            } else if (ga) {
                detail::accumulate_product_run(ga + ia, ka, g + i, vb + ib, kb, n);
            }
            if (fresh_b) {
                detail::binary_run(gb + ib, g + i, va + ia, n, 1, ka, times);
            } else if (gb) {
                detail::accumulate_product_run(gb + ib, kb, g + i, va + ia, ka, n);
            }
        });
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> y(x.data().begin(), x.data().end());
    for (auto& v : y) v *= factor;
    auto nx = x.node();
    return detail::make_result<T>(x.shape(), std::move(y), "scale", {nx}, [nx, factor](detail::Node<T>& self) {
        T* gx = nx->grad_buffer();
        for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += factor * self.grad[i];
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T total = T(0);
    for (T v : x.data()) total += v;
    auto nx = x.node();
    return detail::make_result<T>({}, {total}, "sum", {nx}, [nx](detail::Node<T>& self) {
        T* gx = nx->grad_buffer();
        const T g = self.grad[0];
        for (std::size_t i = 0; i < nx->data.size(); ++i) gx[i] += g;
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) throw DomainError("mean(): empty tensor");
    return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw DomainError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape) + " changes element count");
    }
    std::vector<T> y(x.data().begin(), x.data().end());
    auto nx = x.node();
    return detail::make_result<T>(std::move(shape), std::move(y), "reshape", {nx}, [nx](detail::Node<T>& self) {
        bool fresh;
        T* gx = nx->grad_for_overwrite(fresh);
        if (fresh) {
            std::copy(self.grad.begin(), self.grad.end(), gx);
        } else {
            for (std::size_t i = 0; i < self.grad.size(); ++i) gx[i] += self.grad[i];
        }
    });
}

/// Column `index` of a (B,N) tensor as (B,1).
template <typename T>
Tensor<T> column(const Tensor<T>& x, std::size_t index) {
    if (x.rank() != 2 || index >= x.dim(1)) {
        throw DomainError("column: index " + std::to_string(index) + " invalid for " + to_string(x.shape()));
    }
    const std::size_t rows = x.dim(0);
    const std::size_t cols = x.dim(1);
    std::vector<T> y(rows);
    for (std::size_t r = 0; r < rows; ++r) y[r] = x.data()[r * cols + index];
    auto nx = x.node();
    return detail::make_result<T>({rows, 1}, std::move(y), "column", {nx},
                                  [nx, rows, cols, index](detail::Node<T>& self) {
                                      T* gx = nx->grad_buffer();
                                      for (std::size_t r = 0; r < rows; ++r) gx[r * cols + index] += self.grad[r];
                                  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> activate(const Tensor<T>& x, Activation kind, T leaky_slope = T(0.01)) {
    const std::size_t n = x.numel();
    std::vector<T> y(n);
    const T* px = x.data().data();
    switch (kind) {
        case Activation::sigmoid:
            for (std::size_t i = 0; i < n; ++i) y[i] = detail::sigmoid_scalar(px[i]);
            break;
        case Activation::tanh:
            for (std::size_t i = 0; i < n; ++i) y[i] = std::tanh(px[i]);
            break;
        case Activation::relu:
            for (std::size_t i = 0; i < n; ++i) y[i] = px[i] > T(0) ? px[i] : T(0);
            break;
        case Activation::leaky_relu:
            for (std::size_t i = 0; i < n; ++i) y[i] = px[i] > T(0) ? px[i] : leaky_slope * px[i];
            break;
    }
    static constexpr const char* names[] = {"sigmoid", "tanh", "relu", "leaky_relu"};
    auto nx = x.node();
    return detail::make_result<T>(
        x.shape(), std::move(y), names[static_cast<int>(kind)], {nx}, [nx, kind, leaky_slope](detail::Node<T>& self) {
            bool fresh;
            T* gx = nx->grad_for_overwrite(fresh);
            if (fresh) std::fill(gx, gx + self.grad.size(), T(0));
            const T* g = self.grad.data();
            const T* out = self.data.data();
            const T* in = nx->data.data();
            const std::size_t n = self.grad.size();
            switch (kind) {
                case Activation::sigmoid:
                    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * out[i] * (T(1) - out[i]);
                    break;
                case Activation::tanh:
                    for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * (T(1) - out[i] * out[i]);
                    break;
                case Activation::relu:
                    if (fresh) {
                        for (std::size_t i = 0; i < n; ++i) gx[i] = in[i] > T(0) ? g[i] : T(0);
                    } else {
                        for (std::size_t i = 0; i < n; ++i) gx[i] += in[i] > T(0) ? g[i] : T(0);
                    }
                    break;
                case Activation::leaky_relu:
                    for (std::size_t i = 0; i < n; ++i) gx[i] += in[i] > T(0) ? g[i] : leaky_slope * g[i];
                    break;
            }
        });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return activate(x, Activation::sigmoid);
}
template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return activate(x, Activation::relu);
}

// ---------------------------------------------------------------------------
// Pooling, dense and convolution layers
// ---------------------------------------------------------------------------

/// (B,C,H,W) -> (B,C,1,1) spatial mean.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    if (x.rank() != 4) throw DomainError("global_avg_pool: expected (B,C,H,W), got " + to_string(x.shape()));
    const std::size_t planes = x.dim(0) * x.dim(1);
    const std::size_t area = x.dim(2) * x.dim(3);
    if (area == 0) throw DomainError("global_avg_pool: zero-extent spatial dims " + to_string(x.shape()));
    std::vector<T> y(planes);
    const T* px = x.data().data();
    for (std::size_t p = 0; p < planes; ++p) {
        T acc = T(0);
        for (std::size_t i = 0; i < area; ++i) acc += px[p * area + i];
        y[p] = acc / static_cast<T>(area);
    }
    auto nx = x.node();
    return detail::make_result<T>({x.dim(0), x.dim(1), 1, 1}, std::move(y), "global_avg_pool", {nx},
                                  [nx, planes, area](detail::Node<T>& self) {
                                      T* gx = nx->grad_buffer();
                                      const T inv = T(1) / static_cast<T>(area);
                                      for (std::size_t p = 0; p < planes; ++p) {
                                          const T g = self.grad[p] * inv;
                                          for (std::size_t i = 0; i < area; ++i) gx[p * area + i] += g;
                                      }
                                  });
}

/// y = x W^T (+ bias) with x (B,Cin), W (Cout,Cin), bias (Cout).
template <typename T>
Tensor<T> affine(const Tensor<T>& x, const Tensor<T>& weight, const std::optional<Tensor<T>>& bias = std::nullopt) {
    if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
        throw DomainError("affine: cannot apply weight " + to_string(weight.shape()) + " to input " +
                          to_string(x.shape()));
    }
    const std::size_t batch = x.dim(0);
    const std::size_t in = x.dim(1);
    const std::size_t out = weight.dim(0);
    if (bias && (bias->rank() != 1 || bias->dim(0) != out)) {
        throw DomainError("affine: bias " + to_string(bias->shape()) + " does not match " + std::to_string(out) +
                          " outputs");
    }
    std::vector<T> y(batch * out);
    detail::MapMat<T> Y(y.data(), batch, out);
    detail::ConstMapMat<T> X(x.data().data(), batch, in);
    detail::ConstMapMat<T> Wm(weight.data().data(), out, in);
    Y.noalias() = X * Wm.transpose();
    if (bias) {
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t o = 0; o < out; ++o) y[b * out + o] += bias->data()[o];
    }
    auto nx = x.node();
    auto nw = weight.node();
    std::vector<std::shared_ptr<detail::Node<T>>> inputs{nx, nw};
    std::shared_ptr<detail::Node<T>> nb = bias ? bias->node() : nullptr;
    if (nb) inputs.push_back(nb);
    return detail::make_result<T>(
        {batch, out}, std::move(y), "affine", std::move(inputs), [nx, nw, nb, batch, in, out](detail::Node<T>& self) {
            detail::ConstMapMat<T> G(self.grad.data(), batch, out);
            if (nx->requires_grad) {
                detail::MapMat<T> GX(nx->grad_buffer(), batch, in);
                GX.noalias() += G * detail::ConstMapMat<T>(nw->data.data(), out, in);
            }
            if (nw->requires_grad) {
                detail::MapMat<T> GW(nw->grad_buffer(), out, in);
                GW.noalias() += G.transpose() * detail::ConstMapMat<T>(nx->data.data(), batch, in);
            }
            if (nb && nb->requires_grad) {
                T* gb = nb->grad_buffer();
                for (std::size_t b = 0; b < batch; ++b)
                    for (std::size_t o = 0; o < out; ++o) gb[o] += self.grad[b * out + o];
            }
        });
}

namespace detail {

inline std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    const long long span = static_cast<long long>(in) + 2 * static_cast<long long>(pad) - static_cast<long long>(k);
    if (span < 0) return 0;
    return static_cast<std::size_t>(span) / stride + 1;
}

/// Unfold one (Cin,H,W) image into a (Cin*k*k, Ho*Wo) patch matrix.
/// Output columns [lo, hi) whose input column ox*stride + kx - pad lies inside [0, w).
inline std::pair<std::size_t, std::size_t> valid_columns(std::size_t w, std::size_t kx, std::size_t stride,
                                                         std::size_t pad, std::size_t wo) {
    std::size_t lo = kx >= pad ? 0 : (pad - kx + stride - 1) / stride;
    // largest ox with ox*stride + kx - pad <= w - 1
    const long long top = static_cast<long long>(w) - 1 + static_cast<long long>(pad) - static_cast<long long>(kx);
    std::size_t hi = top < 0 ? 0 : std::min(wo, static_cast<std::size_t>(top) / stride + 1);
    lo = std::min(lo, hi);
    return {lo, hi};
}

template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* col) {
    for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((c * k + ky) * k + kx) * ho * wo;
                const auto [lo, hi] = valid_columns(w, kx, stride, pad, wo);
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(pad);
                    T* dst = row + oy * wo;
                    if (iy < 0 || iy >= static_cast<long long>(h)) {
                        std::fill(dst, dst + wo, T(0));
                        continue;
                    }
                    std::fill(dst, dst + lo, T(0));
                    if (lo < hi) {
                        const T* src = x + (c * h + static_cast<std::size_t>(iy)) * w + (lo * stride + kx - pad);
                        if (stride == 1) {
                            std::copy(src, src + (hi - lo), dst + lo);
                        } else {
                            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[(ox - lo) * stride];
                        }
                    }
                    std::fill(dst + hi, dst + wo, T(0));
                }
            }
        }
    }
}

template <typename T>
void col2im(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* x) {
    for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((c * k + ky) * k + kx) * ho * wo;
                const auto [lo, hi] = valid_columns(w, kx, stride, pad, wo);
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const long long iy = static_cast<long long>(oy * stride + ky) - static_cast<long long>(pad);
                    if (iy < 0 || iy >= static_cast<long long>(h)) continue;
                    if (lo >= hi) continue;
                    T* dst = x + (c * h + static_cast<std::size_t>(iy)) * w + (lo * stride + kx - pad);
                    const T* src = row + oy * wo;
                    for (std::size_t ox = lo; ox < hi; ++ox) dst[(ox - lo) * stride] += src[ox];
                }
            }
        }
    }
}

}  // namespace detail

/// Zero-padded cross-correlation. x (B,Cin,H,W), kernel (Cout,Cin,k,k).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride = 1, std::size_t pad = 0) {
    if (x.rank() != 4 || kernel.rank() != 4 || kernel.dim(1) != x.dim(1) || kernel.dim(2) != kernel.dim(3)) {
        throw DomainError("conv2d: kernel " + to_string(kernel.shape()) + " incompatible with input " +
                          to_string(x.shape()));
    }
    if (stride < 1) throw DomainError("conv2d: stride must be >= 1");
    const std::size_t batch = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
    const std::size_t ho = detail::conv_extent(h, k, stride, pad);
    const std::size_t wo = detail::conv_extent(w, k, stride, pad);
    if (ho < 1 || wo < 1) {
        throw DomainError("conv2d: output extent < 1 for input " + to_string(x.shape()) + ", k=" + std::to_string(k) +
                          ", stride=" + std::to_string(stride) + ", pad=" + std::to_string(pad));
    }
    const std::size_t rows = cin * k * k;
    const std::size_t cols = ho * wo;
    const bool direct = (k == 1 && stride == 1 && pad == 0);

    std::vector<T> y(batch * cout * cols);
    std::vector<T> col(direct ? 0 : rows * cols);
    detail::ConstMapMat<T> K(kernel.data().data(), cout, rows);
    const T* px = x.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const T* xb = px + b * cin * h * w;
        const T* patches = xb;
        if (!direct) {
            detail::im2col(xb, cin, h, w, k, stride, pad, ho, wo, col.data());
            patches = col.data();
        }
        detail::MapMat<T> Y(y.data() + b * cout * cols, cout, cols);
        Y.noalias() = K * detail::ConstMapMat<T>(patches, rows, cols);
    }

    auto nx = x.node();
    auto nk = kernel.node();
    return detail::make_result<T>(
        {batch, cout, ho, wo}, std::move(y), "conv2d", {nx, nk},
        [=](detail::Node<T>& self) {
            std::vector<T> patches_buf(direct ? 0 : rows * cols);
            std::vector<T> dcol(direct ? 0 : rows * cols);
            detail::ConstMapMat<T> Km(nk->data.data(), cout, rows);
            bool fresh_x = false;
            for (std::size_t b = 0; b < batch; ++b) {
                const T* xb = nx->data.data() + b * cin * h * w;
                detail::ConstMapMat<T> G(self.grad.data() + b * cout * cols, cout, cols);
                const T* patches = xb;
                if (!direct && nk->requires_grad) {
                    detail::im2col(xb, cin, h, w, k, stride, pad, ho, wo, patches_buf.data());
                    patches = patches_buf.data();
                }
                if (nk->requires_grad) {
                    detail::MapMat<T> GK(nk->grad_buffer(), cout, rows);
                    GK.noalias() += G * detail::ConstMapMat<T>(patches, rows, cols).transpose();
                }
                if (nx->requires_grad) {
                    T* gxb = (b == 0 ? nx->grad_for_overwrite(fresh_x) : nx->grad.data()) + b * cin * h * w;
                    const bool fresh = fresh_x;
                    if (direct) {
                        detail::MapMat<T> GX(gxb, rows, cols);
                        if (fresh) {
                            GX.noalias() = Km.transpose() * G;
                        } else {
                            GX.noalias() += Km.transpose() * G;
                        }
                    } else {
                        if (fresh) std::fill(gxb, gxb + cin * h * w, T(0));
                        detail::MapMat<T> DC(dcol.data(), rows, cols);
                        DC.noalias() = Km.transpose() * G;
                        detail::col2im(dcol.data(), cin, h, w, k, stride, pad, ho, wo, gxb);
                    }
                }
            }
        });
}

/// 1-D convolution along the channel axis of m (B,C) with one shared odd-length kernel,
/// zero padding (k-1)/2 and no bias.
template <typename T>
Tensor<T> conv1d_channel(const Tensor<T>& m, const Tensor<T>& kernel) {
    if (m.rank() != 2) throw DomainError("conv1d_channel: expected (B,C), got " + to_string(m.shape()));
    if (kernel.rank() != 1 || kernel.dim(0) % 2 == 0) {
        throw DomainError("conv1d_channel: kernel must be 1-D with odd length, got " + to_string(kernel.shape()));
    }
    const std::size_t batch = m.dim(0), channels = m.dim(1), k = kernel.dim(0);
    const long long half = static_cast<long long>(k - 1) / 2;
    std::vector<T> y(batch * channels, T(0));
    const T* pm = m.data().data();
    const T* pk = kernel.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) {
                const long long src = static_cast<long long>(c) + static_cast<long long>(p) - half;
                if (src >= 0 && src < static_cast<long long>(channels)) acc += pk[p] * pm[b * channels + src];
            }
            y[b * channels + c] = acc;
        }
    }
    auto nm = m.node();
    auto nk = kernel.node();
    return detail::make_result<T>(
        m.shape(), std::move(y), "conv1d_channel", {nm, nk}, [=](detail::Node<T>& self) {
            T* gm = nm->requires_grad ? nm->grad_buffer() : nullptr;
            T* gk = nk->requires_grad ? nk->grad_buffer() : nullptr;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < channels; ++c) {
                    const T g = self.grad[b * channels + c];
                    for (std::size_t p = 0; p < k; ++p) {
                        const long long src = static_cast<long long>(c) + static_cast<long long>(p) - half;
                        if (src < 0 || src >= static_cast<long long>(channels)) continue;
                        if (gm) gm[b * channels + src] += nk->data[p] * g;
                        if (gk) gk[p] += nm->data[b * channels + src] * g;
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormStats {
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T momentum = T(0.9);  // running <- momentum * running + (1 - momentum) * batch
    T eps = T(1e-5);

    explicit BatchNormStats(std::size_t channels = 0) : running_mean(channels, T(0)), running_var(channels, T(1)) {}
};

/// Per-channel normalization of x (B,C,...) over every axis except 1.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, BatchNormStats<T>& stats,
                     Mode mode) {
    if (x.rank() < 2) throw DomainError("batch_norm: expected at least (B,C), got " + to_string(x.shape()));
    const std::size_t batch = x.dim(0), channels = x.dim(1);
    const std::size_t inner = x.numel() / std::max<std::size_t>(1, batch * channels);
    if (gamma.numel() != channels || beta.numel() != channels || stats.running_mean.size() != channels ||
        stats.running_var.size() != channels) {
        throw DomainError("batch_norm: parameters sized " + std::to_string(gamma.numel()) + " for " +
                          std::to_string(channels) + " channels");
    }
    const std::size_t count = batch * inner;
    if (mode == Mode::train && count == 0) throw DomainError("batch_norm: empty batch");

    std::vector<T> mean(channels), inv_std(channels);
    const T* px = x.data().data();
    if (mode == Mode::train) {
        for (std::size_t c = 0; c < channels; ++c) {
            T acc = T(0);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = px + (b * channels + c) * inner;
                acc += detail::lane_sum<T>(inner, [p](std::size_t i) { return p[i]; });
            }
            const T mu = acc / static_cast<T>(count);
            T sq = T(0);
            for (std::size_t b = 0; b < batch; ++b) {
                const T* p = px + (b * channels + c) * inner;
                sq += detail::lane_sum<T>(inner, [p, mu](std::size_t i) { return (p[i] - mu) * (p[i] - mu); });
            }
            const T var = sq / static_cast<T>(count);
            mean[c] = mu;
            inv_std[c] = T(1) / std::sqrt(var + stats.eps);
            const T unbiased = count > 1 ? sq / static_cast<T>(count - 1) : var;
            stats.running_mean[c] = stats.momentum * stats.running_mean[c] + (T(1) - stats.momentum) * mu;
            stats.running_var[c] = stats.momentum * stats.running_var[c] + (T(1) - stats.momentum) * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < channels; ++c) {
            mean[c] = stats.running_mean[c];
            inv_std[c] = T(1) / std::sqrt(stats.running_var[c] + stats.eps);
        }
    }

    std::vector<T> y(x.numel());
    const T* pg = gamma.data().data();
    const T* pb = beta.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t c = 0; c < channels; ++c) {
            const std::size_t base = (b * channels + c) * inner;
            const T s = pg[c] * inv_std[c];
            const T shift = pb[c] - mean[c] * s;
            for (std::size_t i = 0; i < inner; ++i) y[base + i] = px[base + i] * s + shift;
        }
    }

    auto nx = x.node();
    auto ng = gamma.node();
    auto nb = beta.node();
    return detail::make_result<T>(
        x.shape(), std::move(y), "batch_norm", {nx, ng, nb},
        [=, mean = std::move(mean), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            const T* g = self.grad.data();
            const T* xv = nx->data.data();
            bool fresh = false;
            T* gx = nx->requires_grad ? nx->grad_for_overwrite(fresh) : nullptr;
            if (fresh) std::fill(gx, gx + self.grad.size(), T(0));
            T* gg = ng->requires_grad ? ng->grad_buffer() : nullptr;
            T* gb = nb->requires_grad ? nb->grad_buffer() : nullptr;
            for (std::size_t c = 0; c < channels; ++c) {
                T sum_g = T(0), sum_gx = T(0);
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t base = (b * channels + c) * inner;
                    const T* gp = g + base;
                    const T* xp = xv + base;
                    const T mu = mean[c];
                    sum_g += detail::lane_sum<T>(inner, [gp](std::size_t i) { return gp[i]; });
                    sum_gx += detail::lane_sum<T>(inner, [gp, xp, mu](std::size_t i) { return gp[i] * (xp[i] - mu); });
                }
                sum_gx *= inv_std[c];
                if (gg) gg[c] += sum_gx;
                if (gb) gb[c] += sum_g;
                if (!gx) continue;
                const T gam = ng->data[c];
                if (mode == Mode::eval) {
                    for (std::size_t b = 0; b < batch; ++b) {
                        const std::size_t base = (b * channels + c) * inner;
                        for (std::size_t i = 0; i < inner; ++i) gx[base + i] += g[base + i] * gam * inv_std[c];
                    }
                    continue;
                }
                const T n = static_cast<T>(count);
                const T k = gam * inv_std[c] / n;
                // gx += k * (n*g - sum_g - xhat*sum_gx), expanded into a*g + b*x + d
                const T a = k * n;
                const T bx = -k * inv_std[c] * sum_gx;
                const T d = -k * sum_g - bx * mean[c];
                for (std::size_t b = 0; b < batch; ++b) {
                    const std::size_t base = (b * channels + c) * inner;
                    for (std::size_t i = 0; i < inner; ++i) gx[base + i] += a * g[base + i] + bx * xv[base + i] + d;
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw DomainError("softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                          std::to_string(labels.size()) + " labels");
    }
    const std::size_t batch = logits.dim(0), classes = logits.dim(1);
    std::vector<T> probs(batch * classes);
    std::vector<int> targets(labels.begin(), labels.end());
    T loss = T(0);
    const T* z = logits.data().data();
    for (std::size_t b = 0; b < batch; ++b) {
        const int label = targets[b];
        if (label < 0 || static_cast<std::size_t>(label) >= classes) {
            throw DomainError("softmax_cross_entropy: label " + std::to_string(label) + " outside [0," +
                              std::to_string(classes) + ")");
        }
        const T* row = z + b * classes;
        const T peak = *std::max_element(row, row + classes);
        T denom = T(0);
        for (std::size_t c = 0; c < classes; ++c) {
            probs[b * classes + c] = std::exp(row[c] - peak);
            denom += probs[b * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) probs[b * classes + c] /= denom;
        loss += -(row[label] - peak - std::log(denom));
    }
    loss /= static_cast<T>(batch);
    auto nz = logits.node();
    return detail::make_result<T>(
        {}, {loss}, "softmax_cross_entropy", {nz},
        [nz, probs = std::move(probs), targets = std::move(targets), batch, classes](detail::Node<T>& self) {
            T* gz = nz->grad_buffer();
            const T g = self.grad[0] / static_cast<T>(batch);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t c = 0; c < classes; ++c) {
                    const T onehot = static_cast<int>(c) == targets[b] ? T(1) : T(0);
                    gz[b * classes + c] += g * (probs[b * classes + c] - onehot);
                }
            }
        });
}

}  // namespace sem
