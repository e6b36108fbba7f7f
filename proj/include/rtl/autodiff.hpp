#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rtl/error.hpp"
#include "rtl/tensor.hpp"

namespace rtl {

/// Handle to a value recorded on a Tape.
struct Var {
    std::size_t id = 0;
};

enum class BnMode {
    Eval,   ///< normalize with running statistics
    Train,  ///< normalize with batch statistics
};

/// Per-channel batch statistics observed by a training-mode batch-norm op.
/// `var` is the unbiased estimate used for running-variance updates.
struct BatchStats {
    std::vector<double> mean;
    std::vector<double> var;
};

/// Reverse-mode tape. One tape records one forward pass; backward may be
/// replayed exactly once.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;
    Tape(Tape&&) = default;
    Tape& operator=(Tape&&) = default;

    // ---- leaves ----------------------------------------------------------

    Var constant(Tensor t) { return push(std::move(t), false, {}); }

    /// Leaf bound to `t`. When t.requires_grad(), backward accumulates
    /// d(loss)/dt into t's gradient slot; `t` must outlive the backward call.
    Var leaf(Tensor& t) {
        Tensor copy(t.shape(), t.values());
        Var v = push(std::move(copy), t.requires_grad(), {});
        nodes_[v.id].bound = &t;
        return v;
    }

    /// Leaf whose value is read from `source`; gradients are retrieved with
    /// grad_for(source) rather than written back.
    Var parameter(const Tensor& source, bool track) {
        Tensor copy(source.shape(), source.values());
        Var v = push(std::move(copy), track, {});
        nodes_[v.id].source = &source;
        return v;
    }

    // ---- accessors -------------------------------------------------------

    const Tensor& value(Var v) const { return node(v).value; }

    /// Gradient of the last backward pass with respect to `v` (zeros if none reached it).
    std::vector<double> grad(Var v) const {
        const Node& n = node(v);
        if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
        return n.grad;
    }

    /// Sum of gradients over every parameter leaf registered from `source`.
    std::vector<double> grad_for(const Tensor& source) const {
        std::vector<double> out(source.size(), 0.0);
        for (const Node& n : nodes_) {
            if (n.source != &source || n.grad.empty()) continue;
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += n.grad[i];
        }
        return out;
    }

    std::size_t size() const noexcept { return nodes_.size(); }
    bool consumed() const noexcept { return consumed_; }

    /// Smallest distance of any relu input to 0, or of any max-pool winner to
    /// its runner-up. Finite-difference checks are only meaningful when this
    /// comfortably exceeds the probe step.
    double kink_margin() const noexcept { return kink_margin_; }

    // ---- primitive ops ---------------------------------------------------

    Var conv2d(Var input, Var kernel, std::size_t stride, std::size_t padding) {
        const Tensor& x = value(input);
        const Tensor& w = value(kernel);
        if (x.rank() != 4) throw DimensionError("conv2d input must be N,C,H,W; got " + shape_string(x.shape()));
        if (w.rank() != 4) throw DimensionError("conv2d kernel must be K,C,R,S; got " + shape_string(w.shape()));
        if (x.dim(1) != w.dim(1)) {
            throw DimensionError("conv2d channel axis mismatch: input C=" + std::to_string(x.dim(1)) +
                                 ", kernel C=" + std::to_string(w.dim(1)));
        }
        if (stride == 0) throw DimensionError("conv2d stride must be positive");
        const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t K = w.dim(0), R = w.dim(2), S = w.dim(3);
        if (H + 2 * padding < R || W + 2 * padding < S) {
            throw DimensionError("conv2d kernel " + std::to_string(R) + "x" + std::to_string(S) +
                                 " larger than padded input on axes H,W");
        }
        if ((H + 2 * padding - R) % stride != 0 || (W + 2 * padding - S) % stride != 0) {
            throw DimensionError("conv2d output extent on axes H,W is not an integer for stride " +
                                 std::to_string(stride));
        }
        const std::size_t OH = (H + 2 * padding - R) / stride + 1;
        const std::size_t OW = (W + 2 * padding - S) / stride + 1;

        Tensor y(Shape{N, K, OH, OW});
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < K; ++k)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t r = 0; r < R; ++r)
                        for (std::size_t s = 0; s < S; ++s) {
                            const double wv = w.at(k, c, r, s);
                            for (std::size_t oh = 0; oh < OH; ++oh) {
                                const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + r) -
                                                          static_cast<std::ptrdiff_t>(padding);
                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t ow = 0; ow < OW; ++ow) {
                                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + s) -
                                                              static_cast<std::ptrdiff_t>(padding);
                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                    y.at(n, k, oh, ow) +=
                                        wv * x.at(n, c, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw));
                                }
                            }
                        }

        const std::size_t xi = input.id, wi = kernel.id;
        return push(std::move(y), needs(input) || needs(kernel),
                    [xi, wi, stride, padding](Tape& t, std::size_t self) {
                        const Tensor& x = t.nodes_[xi].value;
                        const Tensor& w = t.nodes_[wi].value;
                        const Tensor& yv = t.nodes_[self].value;
                        const std::vector<double>& dy = t.nodes_[self].grad;
                        const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
                        const std::size_t K = w.dim(0), R = w.dim(2), S = w.dim(3);
                        const std::size_t OH = yv.dim(2), OW = yv.dim(3);
                        const bool want_x = t.nodes_[xi].needs_grad, want_w = t.nodes_[wi].needs_grad;
                        std::vector<double>* dx = want_x ? &t.grad_buffer(xi) : nullptr;
                        std::vector<double>* dw = want_w ? &t.grad_buffer(wi) : nullptr;
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t k = 0; k < K; ++k)
                                for (std::size_t c = 0; c < C; ++c)
                                    for (std::size_t r = 0; r < R; ++r)
                                        for (std::size_t s = 0; s < S; ++s) {
                                            const std::size_t widx = ((k * C + c) * R + r) * S + s;
                                            const double wv = w[widx];
                                            double acc_w = 0.0;
                                            for (std::size_t oh = 0; oh < OH; ++oh) {
                                                const std::ptrdiff_t ih =
                                                    static_cast<std::ptrdiff_t>(oh * stride + r) -
                                                    static_cast<std::ptrdiff_t>(padding);
                                                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                                                for (std::size_t ow = 0; ow < OW; ++ow) {
                                                    const std::ptrdiff_t iw =
                                                        static_cast<std::ptrdiff_t>(ow * stride + s) -
                                                        static_cast<std::ptrdiff_t>(padding);
                                                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                                                    const double g = dy[((n * K + k) * OH + oh) * OW + ow];
                                                    const std::size_t xidx =
                                                        ((n * C + c) * H + static_cast<std::size_t>(ih)) * W +
                                                        static_cast<std::size_t>(iw);
                                                    if (dx) (*dx)[xidx] += g * wv;
                                                    acc_w += g * x[xidx];
                                                }
                                            }
                                            if (dw) (*dw)[widx] += acc_w;
                                        }
                    });
    }

    Var matmul(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0)) {
            throw DimensionError("matmul needs [M,K]x[K,N]; got " + shape_string(A.shape()) + "x" +
                                 shape_string(B.shape()));
        }
        const std::size_t M = A.dim(0), K = A.dim(1), N = B.dim(1);
        Tensor y(Shape{M, N});
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t k = 0; k < K; ++k) {
                const double av = A[i * K + k];
                for (std::size_t j = 0; j < N; ++j) y[i * N + j] += av * B[k * N + j];
            }
        const std::size_t ai = a.id, bi = b.id;
        return push(std::move(y), needs(a) || needs(b), [ai, bi, M, K, N](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            if (t.nodes_[ai].needs_grad) {
                const Tensor& B = t.nodes_[bi].value;
                std::vector<double>& da = t.grad_buffer(ai);
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t k = 0; k < K; ++k) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < N; ++j) acc += dy[i * N + j] * B[k * N + j];
                        da[i * K + k] += acc;
                    }
            }
            if (t.nodes_[bi].needs_grad) {
                const Tensor& A = t.nodes_[ai].value;
                std::vector<double>& db = t.grad_buffer(bi);
                for (std::size_t i = 0; i < M; ++i)
                    for (std::size_t k = 0; k < K; ++k) {
                        const double av = A[i * K + k];
                        for (std::size_t j = 0; j < N; ++j) db[k * N + j] += av * dy[i * N + j];
                    }
            }
        });
    }

    /// Adds a per-channel bias along axis 1 of an [N,C] or [N,C,H,W] tensor.
    Var add_bias(Var input, Var bias) {
        const Tensor& x = value(input);
        const Tensor& b = value(bias);
        if ((x.rank() != 2 && x.rank() != 4) || b.rank() != 1 || b.dim(0) != x.dim(1)) {
            throw DimensionError("add_bias needs bias [C] matching axis 1 of " + shape_string(x.shape()) +
                                 "; got " + shape_string(b.shape()));
        }
        const std::size_t N = x.dim(0), C = x.dim(1), inner = x.size() / (N * C);
        Tensor y = copy_of(x);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < inner; ++i) y[(n * C + c) * inner + i] += b[c];
        const std::size_t xi = input.id, bi = bias.id;
        return push(std::move(y), needs(input) || needs(bias), [xi, bi, N, C, inner](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            if (t.nodes_[xi].needs_grad) {
                std::vector<double>& dx = t.grad_buffer(xi);
                for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
            }
            if (t.nodes_[bi].needs_grad) {
                std::vector<double>& db = t.grad_buffer(bi);
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t i = 0; i < inner; ++i) db[c] += dy[(n * C + c) * inner + i];
            }
        });
    }

    Var add(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.shape() != B.shape()) {
            throw DimensionError("add shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
        }
        Tensor y = copy_of(A);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] += B[i];
        const std::size_t ai = a.id, bi = b.id;
        return push(std::move(y), needs(a) || needs(b), [ai, bi](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            for (std::size_t idx : {ai, bi}) {
                if (!t.nodes_[idx].needs_grad) continue;
                std::vector<double>& d = t.grad_buffer(idx);
                for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
            }
        });
    }

    /// Elementwise product of equally shaped tensors.
    Var mul(Var a, Var b) {
        const Tensor& A = value(a);
        const Tensor& B = value(b);
        if (A.shape() != B.shape()) {
            throw DimensionError("mul shape mismatch " + shape_string(A.shape()) + " vs " + shape_string(B.shape()));
        }
        Tensor y = copy_of(A);
        for (std::size_t i = 0; i < y.size(); ++i) y[i] *= B[i];
        const std::size_t ai = a.id, bi = b.id;
        return push(std::move(y), needs(a) || needs(b), [ai, bi](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            if (t.nodes_[ai].needs_grad) {
                const Tensor& B = t.nodes_[bi].value;
                std::vector<double>& d = t.grad_buffer(ai);
                for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * B[i];
            }
            if (t.nodes_[bi].needs_grad) {
                const Tensor& A = t.nodes_[ai].value;
                std::vector<double>& d = t.grad_buffer(bi);
                for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * A[i];
            }
        });
    }

    Var scale(Var input, double factor) {
        Tensor y = copy_of(value(input));
        for (double& v : y.values()) v *= factor;
        const std::size_t xi = input.id;
        return push(std::move(y), needs(input), [xi, factor](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            std::vector<double>& d = t.grad_buffer(xi);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i] * factor;
        });
    }

    /// ReLU with subgradient 0 at 0.
    Var relu(Var input) {
        const Tensor& x = value(input);
        Tensor y = copy_of(x);
        for (double& v : y.values()) {
            kink_margin_ = std::min(kink_margin_, std::abs(v));
            if (!(v > 0.0)) v = 0.0;
        }
        const std::size_t xi = input.id;
        return push(std::move(y), needs(input), [xi](Tape& t, std::size_t self) {
            const Tensor& x = t.nodes_[xi].value;
            const std::vector<double>& dy = t.nodes_[self].grad;
            std::vector<double>& d = t.grad_buffer(xi);
            for (std::size_t i = 0; i < dy.size(); ++i)
                if (x[i] > 0.0) d[i] += dy[i];
        });
    }

    /// Non-overlapping 2x2 max pooling (ties resolve to the first element in row-major order).
    Var max_pool2d(Var input) {
        const Tensor& x = value(input);
        if (x.rank() != 4 || x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
            throw DimensionError("max_pool2d needs N,C,H,W with even H,W; got " + shape_string(x.shape()));
        }
        const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
        const std::size_t OH = H / 2, OW = W / 2;
        Tensor y(Shape{N, C, OH, OW});
        std::vector<std::size_t> winner(y.size());
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t oh = 0; oh < OH; ++oh)
                    for (std::size_t ow = 0; ow < OW; ++ow) {
                        double best = -std::numeric_limits<double>::infinity();
                        double second = best;
                        std::size_t arg = 0;
                        for (std::size_t dh = 0; dh < 2; ++dh)
                            for (std::size_t dw = 0; dw < 2; ++dw) {
                                const std::size_t idx = ((n * C + c) * H + 2 * oh + dh) * W + 2 * ow + dw;
                                if (x[idx] > best) {
                                    second = best;
                                    best = x[idx];
                                    arg = idx;
                                } else if (x[idx] > second) {
                                    second = x[idx];
                                }
                            }
                        // A tie of exact zeros comes from clamped ReLU outputs; it stays a tie
                        // under perturbations smaller than the ReLU margin, so it is not a kink.
                        if (best != 0.0 || second != 0.0) kink_margin_ = std::min(kink_margin_, best - second);
                        const std::size_t o = ((n * C + c) * OH + oh) * OW + ow;
                        y[o] = best;
                        winner[o] = arg;
                    }
        const std::size_t xi = input.id;
        return push(std::move(y), needs(input), [xi, winner = std::move(winner)](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            std::vector<double>& d = t.grad_buffer(xi);
            for (std::size_t o = 0; o < dy.size(); ++o) d[winner[o]] += dy[o];
        });
    }

    /// Mean over the spatial axes: [N,C,H,W] -> [N,C].
    Var spatial_mean(Var input) {
        const Tensor& x = value(input);
        if (x.rank() != 4) throw DimensionError("spatial_mean needs N,C,H,W; got " + shape_string(x.shape()));
        const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
        Tensor y(Shape{N, C});
        for (std::size_t nc = 0; nc < N * C; ++nc) {
            double acc = 0.0;
            for (std::size_t i = 0; i < HW; ++i) acc += x[nc * HW + i];
            y[nc] = acc / static_cast<double>(HW);
        }
        const std::size_t xi = input.id;
        return push(std::move(y), needs(input), [xi, HW](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            std::vector<double>& d = t.grad_buffer(xi);
            const double inv = 1.0 / static_cast<double>(HW);
            for (std::size_t nc = 0; nc < dy.size(); ++nc)
                for (std::size_t i = 0; i < HW; ++i) d[nc * HW + i] += dy[nc] * inv;
        });
    }

    Var sum(Var input) {
        const Tensor& x = value(input);
        double acc = 0.0;
        for (double v : x.values()) acc += v;
        const std::size_t xi = input.id;
        return push(Tensor::scalar(acc), needs(input), [xi](Tape& t, std::size_t self) {
            const double g = t.nodes_[self].grad[0];
            for (double& d : t.grad_buffer(xi)) d += g;
        });
    }

    Var mean(Var input) {
        const Tensor& x = value(input);
        double acc = 0.0;
        for (double v : x.values()) acc += v;
        const double n = static_cast<double>(x.size());
        const std::size_t xi = input.id;
        return push(Tensor::scalar(acc / n), needs(input), [xi, n](Tape& t, std::size_t self) {
            const double g = t.nodes_[self].grad[0] / n;
            for (double& d : t.grad_buffer(xi)) d += g;
        });
    }

    Var reshape(Var input, Shape shape) {
        const Tensor& x = value(input);
        if (shape_size(shape) != x.size()) {
            throw DimensionError("cannot reshape " + shape_string(x.shape()) + " to " + shape_string(shape));
        }
        const std::size_t xi = input.id;
        return push(x.reshaped(std::move(shape)), needs(input), [xi](Tape& t, std::size_t self) {
            const std::vector<double>& dy = t.nodes_[self].grad;
            std::vector<double>& d = t.grad_buffer(xi);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
        });
    }

    /// Batch normalization over axis 1 of [N,C] or [N,C,H,W]. In Train mode the
    /// batch statistics are written to `observed` (when non-null) for the owner
    /// to fold into its running averages; the tape itself never mutates them.
    Var batch_norm(Var input, Var gamma, Var beta, BnMode mode, std::span<const double> running_mean,
                   std::span<const double> running_var, double eps, BatchStats* observed = nullptr) {
        const Tensor& x = value(input);
        const Tensor& g = value(gamma);
        const Tensor& b = value(beta);
        if (x.rank() != 2 && x.rank() != 4) {
            throw DimensionError("batch_norm needs [N,C] or [N,C,H,W]; got " + shape_string(x.shape()));
        }
        const std::size_t N = x.dim(0), C = x.dim(1), inner = x.size() / (N * C);
        if (g.size() != C || b.size() != C || running_mean.size() != C || running_var.size() != C) {
            throw DimensionError("batch_norm channel parameters must have C=" + std::to_string(C) + " entries");
        }
        const double count = static_cast<double>(N * inner);
        std::vector<double> mu(C), inv_std(C);
        if (mode == BnMode::Train) {
            std::vector<double> var(C);
            for (std::size_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < inner; ++i) acc += x[(n * C + c) * inner + i];
                mu[c] = acc / count;
                double sq = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < inner; ++i) {
                        const double d = x[(n * C + c) * inner + i] - mu[c];
                        sq += d * d;
                    }
                var[c] = sq / count;
                inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
                if (observed) {
                    observed->mean.push_back(mu[c]);
                    observed->var.push_back(count > 1.0 ? sq / (count - 1.0) : var[c]);
                }
            }
        } else {
            for (std::size_t c = 0; c < C; ++c) {
                mu[c] = running_mean[c];
                inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
            }
        }
        Tensor xhat(x.shape());
        Tensor y(x.shape());
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t i = 0; i < inner; ++i) {
                    const std::size_t idx = (n * C + c) * inner + i;
                    xhat[idx] = (x[idx] - mu[c]) * inv_std[c];
                    y[idx] = g[c] * xhat[idx] + b[c];
                }
        const std::size_t xi = input.id, gi = gamma.id, bi = beta.id;
        const bool batch_coupled = mode == BnMode::Train;
        return push(std::move(y), needs(input) || needs(gamma) || needs(beta),
                    [xi, gi, bi, N, C, inner, count, batch_coupled, inv_std = std::move(inv_std),
                     xhat = std::move(xhat)](Tape& t, std::size_t self) {
                        const std::vector<double>& dy = t.nodes_[self].grad;
                        const Tensor& g = t.nodes_[gi].value;
                        std::vector<double> sum_dy(C, 0.0), sum_dy_xhat(C, 0.0);
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t i = 0; i < inner; ++i) {
                                    const std::size_t idx = (n * C + c) * inner + i;
                                    sum_dy[c] += dy[idx];
                                    sum_dy_xhat[c] += dy[idx] * xhat[idx];
                                }
                        if (t.nodes_[gi].needs_grad) {
                            std::vector<double>& dg = t.grad_buffer(gi);
                            for (std::size_t c = 0; c < C; ++c) dg[c] += sum_dy_xhat[c];
                        }
                        if (t.nodes_[bi].needs_grad) {
                            std::vector<double>& db = t.grad_buffer(bi);
                            for (std::size_t c = 0; c < C; ++c) db[c] += sum_dy[c];
                        }
                        if (!t.nodes_[xi].needs_grad) return;
                        std::vector<double>& dx = t.grad_buffer(xi);
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t i = 0; i < inner; ++i) {
                                    const std::size_t idx = (n * C + c) * inner + i;
                                    if (batch_coupled) {
                                        dx[idx] += g[c] * inv_std[c] *
                                                   (dy[idx] - sum_dy[c] / count - xhat[idx] * sum_dy_xhat[c] / count);
                                    } else {
                                        dx[idx] += g[c] * inv_std[c] * dy[idx];
                                    }
                                }
                    });
    }

    /// Mean over the batch of -log softmax(logits)[label].
    Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
        const Tensor& z = value(logits);
        if (z.rank() != 2) throw DimensionError("logits must be [N,C]; got " + shape_string(z.shape()));
        const std::size_t N = z.dim(0), C = z.dim(1);
        if (labels.size() != N) {
            throw DimensionError("label count " + std::to_string(labels.size()) + " != batch axis N=" +
                                 std::to_string(N));
        }
        std::vector<double> prob(N * C);
        double total = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const int y = labels[n];
            if (y < 0 || static_cast<std::size_t>(y) >= C) {
                throw IndexError("label " + std::to_string(y) + " at row " + std::to_string(n) +
                                 " outside [0," + std::to_string(C) + ")");
            }
            double m = z[n * C];
            for (std::size_t c = 1; c < C; ++c) m = std::max(m, z[n * C + c]);
            double se = 0.0;
            for (std::size_t c = 0; c < C; ++c) se += std::exp(z[n * C + c] - m);
            const double lse = m + std::log(se);
            for (std::size_t c = 0; c < C; ++c) prob[n * C + c] = std::exp(z[n * C + c] - lse);
            total += lse - z[n * C + static_cast<std::size_t>(y)];
        }
        std::vector<int> ys(labels.begin(), labels.end());
        const std::size_t zi = logits.id;
        return push(Tensor::scalar(total / static_cast<double>(N)), needs(logits),
                    [zi, N, C, prob = std::move(prob), ys = std::move(ys)](Tape& t, std::size_t self) {
                        const double g = t.nodes_[self].grad[0] / static_cast<double>(N);
                        std::vector<double>& d = t.grad_buffer(zi);
                        for (std::size_t n = 0; n < N; ++n)
                            for (std::size_t c = 0; c < C; ++c) {
                                const double onehot = static_cast<int>(c) == ys[n] ? 1.0 : 0.0;
                                d[n * C + c] += g * (prob[n * C + c] - onehot);
                            }
                    });
    }

    // ---- reverse pass ----------------------------------------------------

    void backward(Var loss) {
        if (consumed_) throw StateError("backward already ran on this tape; record a new forward pass");
        const Node& l = node(loss);
        if (l.value.size() != 1) {
            throw ContractError("backward needs a scalar loss; got shape " + shape_string(l.value.shape()));
        }
        consumed_ = true;
        if (!l.needs_grad) return;
        grad_buffer(loss.id)[0] = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
            n.backward(*this, i);
        }
        for (Node& n : nodes_) {
            if (!n.bound || !n.needs_grad) continue;
            std::span<double> g = n.bound->mutable_grad();
            if (n.grad.empty()) continue;
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    }

private:
    struct Node {
        Tensor value;
        std::vector<double> grad;
        bool needs_grad = false;
        std::function<void(Tape&, std::size_t)> backward;
        Tensor* bound = nullptr;
        const Tensor* source = nullptr;
    };

    static Tensor copy_of(const Tensor& t) { return Tensor(t.shape(), t.values()); }

    const Node& node(Var v) const {
        if (v.id >= nodes_.size()) throw IndexError("variable not recorded on this tape");
        return nodes_[v.id];
    }
    bool needs(Var v) const { return node(v).needs_grad; }

    std::vector<double>& grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    Var push(Tensor value, bool needs_grad, std::function<void(Tape&, std::size_t)> backward) {
        if (consumed_) throw StateError("tape already consumed by backward");
        nodes_.push_back(Node{std::move(value), {}, needs_grad, needs_grad ? std::move(backward) : nullptr});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
    double kink_margin_ = std::numeric_limits<double>::infinity();
};

/// Scalar-valued function of one tensor, recorded on a caller-provided tape.
using TapeFunction = std::function<Var(Tape&, Var)>;

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double grad_check(const TapeFunction& f, const Tensor& point, double h) {
    Tensor p(point.shape(), point.values());
    p.set_requires_grad(true);
    Tape tape;
    const Var out = f(tape, tape.leaf(p));
    if (tape.value(out).size() != 1) {
        throw ContractError("grad_check needs a scalar function; got shape " +
                            shape_string(tape.value(out).shape()));
    }
    tape.backward(out);
    const std::vector<double> analytic(p.grad().begin(), p.grad().end());

    auto eval = [&](const Tensor& at) {
        Tape t;
        return t.value(f(t, t.constant(Tensor(at.shape(), at.values()))))[0];
    };
    double worst = 0.0;
    Tensor probe(point.shape(), point.values());
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double up = eval(probe);
        probe[i] = orig - h;
        const double down = eval(probe);
        probe[i] = orig;
        const double fd = (up - down) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    return worst;
}

/// Same error measure over tensors that `f` registers via Tape::parameter or
/// Tape::leaf; the tensors are perturbed in place and restored.
inline double grad_check_params(const std::function<Var(Tape&)>& f, std::span<Tensor* const> params, double h) {
    Tape tape;
    const Var out = f(tape);
    if (tape.value(out).size() != 1) {
        throw ContractError("grad_check needs a scalar function; got shape " +
                            shape_string(tape.value(out).shape()));
    }
    tape.backward(out);
    auto eval = [&]() {
        Tape t;
        return t.value(f(t))[0];
    };
    double worst = 0.0;
    for (Tensor* p : params) {
        const std::vector<double> analytic = tape.grad_for(*p);
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double orig = (*p)[i];
            (*p)[i] = orig + h;
            const double up = eval();
            (*p)[i] = orig - h;
            const double down = eval();
            (*p)[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0, std::abs(fd)));
        }
    }
    return worst;
}

}  // namespace rtl
