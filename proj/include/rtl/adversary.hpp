#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtl/autodiff.hpp"
#include "rtl/datasets.hpp"
#include "rtl/error.hpp"
#include "rtl/models.hpp"
#include "rtl/tensor.hpp"

namespace rtl {

enum class Norm { L2, Linf };

inline std::string to_string(Norm n) { return n == Norm::L2 ? "l2" : "linf"; }
inline Norm norm_from_string(std::string_view s) {
    if (s == "l2" || s == "L2") return Norm::L2;
    if (s == "linf" || s == "Linf" || s == "LINF") return Norm::Linf;
    throw ConfigError("unknown norm '" + std::string(s) + "' (expected l2 or linf)");
}

/// Budget and schedule of a PGD attack. epsilon is in input units ([0,1] pixels).
struct AttackSpec {
    Norm norm = Norm::L2;
    double epsilon = 0.0;
    std::size_t steps = 3;
    double step_size = 0.0;
    bool random_start = false;
    /// Clamp x + delta to [0,1] after each projection.
    bool clip_to_unit = false;
    std::uint64_t seed = 0;

    /// Training attack: 3 steps of size 2*epsilon/3.
    static AttackSpec training(Norm norm, double epsilon) {
        AttackSpec s;
        s.norm = norm;
        s.epsilon = epsilon;
        s.steps = 3;
        s.step_size = epsilon * 2.0 / 3.0;
        return s;
    }

    /// Evaluation attack: 20 steps of size 2.5*epsilon/20.
    static AttackSpec evaluation(Norm norm, double epsilon) {
        AttackSpec s;
        s.norm = norm;
        s.epsilon = epsilon;
        s.steps = 20;
        s.step_size = epsilon * 2.5 / 20.0;
        return s;
    }

    void validate() const {
        if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack epsilon must be finite and >= 0");
        if (epsilon > 0.0 && steps > 0 && !(step_size > 0.0)) throw ConfigError("attack step_size must be positive");
    }

    bool operator==(const AttackSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const AttackSpec& s) {
    j = nlohmann::json{{"norm", to_string(s.norm)}, {"epsilon", s.epsilon},         {"steps", s.steps},
                       {"step_size", s.step_size},  {"random_start", s.random_start}, {"clip_to_unit", s.clip_to_unit},
                       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, AttackSpec& s) {
    s.norm = norm_from_string(j.value("norm", std::string("l2")));
    s.epsilon = j.value("epsilon", 0.0);
    const AttackSpec preset = AttackSpec::training(s.norm, s.epsilon);
    s.steps = j.value("steps", preset.steps);
    s.step_size = j.value("step_size", preset.step_size);
    s.random_start = j.value("random_start", false);
    s.clip_to_unit = j.value("clip_to_unit", false);
    s.seed = j.value("seed", std::uint64_t{0});
}

inline double vector_norm(std::span<const double> v, Norm norm) {
    if (norm == Norm::Linf) {
        double m = 0.0;
        for (double x : v) m = std::max(m, std::abs(x));
        return m;
    }
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

/// Exact projection onto the epsilon-ball. Points already within
/// epsilon*(1+1e-12) are left bitwise unchanged, which keeps the projection
/// idempotent.
inline void project_inplace(std::span<double> delta, Norm norm, double epsilon) {
    if (norm == Norm::Linf) {
        for (double& v : delta) v = std::min(epsilon, std::max(-epsilon, v));
        return;
    }
    const double n = vector_norm(delta, Norm::L2);
    if (n <= epsilon * (1.0 + 1e-12)) return;
    if (epsilon == 0.0) {
        std::fill(delta.begin(), delta.end(), 0.0);
        return;
    }
    const double factor = epsilon / n;
    for (double& v : delta) v *= factor;
}

/// Projects the whole tensor, viewed as one vector.
inline Tensor project(const Tensor& delta, const AttackSpec& spec) {
    Tensor out(delta.shape(), delta.values());
    project_inplace(out.data(), spec.norm, spec.epsilon);
    return out;
}

struct AttackDiagnostics {
    /// (sample, step) pairs skipped because the input gradient was exactly zero.
    std::size_t skipped_steps = 0;
};

/// Scalar loss of a batch, recorded on a tape: loss(tape, inputs, labels).
template <class F>
concept AttackLoss = std::invocable<const F&, Tape&, Var, std::span<const int>> &&
                     std::same_as<std::invoke_result_t<const F&, Tape&, Var, std::span<const int>>, Var>;

/// Mean cross-entropy of a network; parameters enter the tape as constants,
/// so the attack cannot touch them.
struct NetworkLoss {
    const Network& net;
    BnMode bn = BnMode::Eval;

    Var operator()(Tape& tape, Var x, std::span<const int> y) const {
        return tape.softmax_cross_entropy(net.forward(tape, x, {bn}), y);
    }
};

/// Linear score loss  -mean_i (w.x_i + b)(2 y_i - 1)  with labels in {0,1}.
/// Its maximizer over a norm ball has a closed form.
struct LinearMarginLoss {
    std::vector<double> weights;
    double bias = 0.0;

    Var operator()(Tape& tape, Var x, std::span<const int> y) const {
        const Tensor& xv = tape.value(x);
        const std::size_t N = xv.dim(0), D = xv.size() / N;
        if (D != weights.size()) throw DimensionError("linear model expects " + std::to_string(weights.size()) + " features");
        const Var flat = tape.reshape(x, Shape{N, D});
        const Var score = tape.matmul(flat, tape.constant(Tensor(Shape{D, 1}, weights)));
        const Var shifted = tape.add_bias(score, tape.constant(Tensor(Shape{1}, std::vector<double>{bias})));
        std::vector<double> sign(N);
        for (std::size_t i = 0; i < N; ++i) sign[i] = -(2.0 * y[i] - 1.0);
        return tape.mean(tape.mul(shifted, tape.constant(Tensor(Shape{N, 1}, sign))));
    }

    std::vector<int> classify(const Tensor& x) const {
        const std::size_t N = x.dim(0), D = x.size() / N;
        std::vector<int> out(N);
        for (std::size_t i = 0; i < N; ++i) {
            double s = bias;
            for (std::size_t k = 0; k < D; ++k) s += weights[k] * x[i * D + k];
            out[i] = s > 0.0 ? 1 : 0;
        }
        return out;
    }
};

/// Projected gradient ascent on `loss` within the spec's ball around each
/// sample. Steps follow g/||g||_2 (L2) or sign(g) (Linf) per sample.
template <AttackLoss F>
Tensor pgd_attack(const F& loss, const Tensor& x, std::span<const int> y, const AttackSpec& spec,
                  AttackDiagnostics* diag = nullptr) {
    spec.validate();
    if (spec.epsilon == 0.0) return Tensor(x.shape(), x.values());
    const std::size_t N = x.dim(0), D = x.size() / N;
    Tensor delta(x.shape(), 0.0);

    auto apply_constraints = [&](std::size_t i) {
        std::span<double> d(delta.values().data() + i * D, D);
        project_inplace(d, spec.norm, spec.epsilon);
        if (spec.clip_to_unit) {
            for (std::size_t k = 0; k < D; ++k) {
                const double xv = x[i * D + k];
                d[k] = std::min(1.0, std::max(0.0, xv + d[k])) - xv;
            }
        }
    };

    if (spec.random_start) {
        std::mt19937_64 rng(spec.seed);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        std::normal_distribution<double> normal(0.0, 1.0);
        for (std::size_t i = 0; i < N; ++i) {
            std::span<double> d(delta.values().data() + i * D, D);
            if (spec.norm == Norm::Linf) {
                for (double& v : d) v = spec.epsilon * (2.0 * unit(rng) - 1.0);
            } else {
                for (double& v : d) v = normal(rng);
                const double n = vector_norm(d, Norm::L2);
                const double r = spec.epsilon * std::pow(unit(rng), 1.0 / static_cast<double>(D));
                for (double& v : d) v *= n > 0.0 ? r / n : 0.0;
            }
            apply_constraints(i);
        }
    }

    for (std::size_t step = 0; step < spec.steps; ++step) {
        Tensor current(x.shape(), x.values());
        for (std::size_t k = 0; k < current.size(); ++k) current[k] += delta[k];
        current.set_requires_grad(true);
        Tape tape;
        tape.backward(loss(tape, tape.leaf(current), y));
        const std::span<const double> g = current.grad();
        for (std::size_t i = 0; i < N; ++i) {
            std::span<const double> gi = g.subspan(i * D, D);
            std::span<double> d(delta.values().data() + i * D, D);
            if (spec.norm == Norm::L2) {
                const double gn = vector_norm(gi, Norm::L2);
                if (gn == 0.0) {
                    if (diag) ++diag->skipped_steps;
                    continue;
                }
                for (std::size_t k = 0; k < D; ++k) d[k] += spec.step_size * gi[k] / gn;
            } else {
                if (vector_norm(gi, Norm::Linf) == 0.0) {
                    if (diag) ++diag->skipped_steps;
                    continue;
                }
                for (std::size_t k = 0; k < D; ++k) {
                    const double s = gi[k] > 0.0 ? 1.0 : (gi[k] < 0.0 ? -1.0 : 0.0);
                    d[k] += spec.step_size * s;
                }
            }
            apply_constraints(i);
        }
    }
    Tensor out(x.shape(), x.values());
    for (std::size_t k = 0; k < out.size(); ++k) out[k] += delta[k];
    return out;
}

inline Tensor pgd_attack(const Network& net, const Tensor& x, std::span<const int> y, const AttackSpec& spec,
                         BnMode bn = BnMode::Eval, AttackDiagnostics* diag = nullptr) {
    return pgd_attack(NetworkLoss{net, bn}, x, y, spec, diag);
}

/// Fraction of samples still classified correctly after the PGD attack,
/// evaluated with running batch-norm statistics.
inline double robust_accuracy(const Network& net, const Dataset& data, const AttackSpec& spec,
                              std::size_t batch_size = 128) {
    if (data.size() == 0) throw ContractError("robust_accuracy on an empty dataset");
    Network eval_net = net;
    eval_net.set_mode(NetMode::Eval);
    std::size_t correct = 0;
    for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
        const std::size_t count = std::min(batch_size, data.size() - begin);
        const Tensor xb = data.images.slice_rows(begin, count);
        std::span<const int> yb(data.labels.data() + begin, count);
        const Tensor adv = pgd_attack(eval_net, xb, yb, spec, BnMode::Eval);
        const std::vector<int> pred = eval_net.classify(adv);
        for (std::size_t i = 0; i < count; ++i) correct += pred[i] == yb[i];
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

using BatchClassifier = std::function<std::vector<int>(const Tensor&)>;

/// Robust accuracy under a brute-force adversary: a sample counts as robust
/// only if every candidate perturbation is classified correctly. Candidates
/// are points x + project(t * (x' - x)) for every distinct image x' of another
/// class and t on a uniform grid over [0, 1], plus the PGD point when
/// `pgd_loss` is provided. Intended for datasets with few distinct images.
inline double exhaustive_robust_accuracy(const BatchClassifier& classify, const Dataset& data, Norm norm,
                                         double epsilon, std::size_t grid = 21,
                                         const std::function<Tensor(const Tensor&, std::span<const int>)>& pgd = {}) {
    if (data.size() == 0) throw ContractError("robust accuracy on an empty dataset");
    const std::size_t D = data.images.size() / data.size();
    // Distinct images per class.
    std::map<int, std::vector<std::vector<double>>> distinct;
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::vector<double> img(data.images.values().begin() + static_cast<std::ptrdiff_t>(i * D),
                                data.images.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * D));
        auto& bucket = distinct[data.labels[i]];
        if (std::find(bucket.begin(), bucket.end(), img) == bucket.end()) bucket.push_back(std::move(img));
    }
    std::size_t robust = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        std::span<const double> x(data.images.values().data() + i * D, D);
        std::vector<double> cand_data;
        std::size_t n_cand = 0;
        auto add = [&](std::vector<double> delta) {
            project_inplace(delta, norm, epsilon);
            for (std::size_t k = 0; k < D; ++k) cand_data.push_back(x[k] + delta[k]);
            ++n_cand;
        };
        add(std::vector<double>(D, 0.0));
        for (const auto& [label, images] : distinct) {
            if (label == data.labels[i]) continue;
            for (const auto& other : images)
                for (std::size_t g = 1; g < grid; ++g) {
                    const double t = static_cast<double>(g) / static_cast<double>(grid - 1);
                    std::vector<double> delta(D);
                    for (std::size_t k = 0; k < D; ++k) delta[k] = t * (other[k] - x[k]);
                    add(std::move(delta));
                }
        }
        Shape shape = data.images.shape();
        if (pgd) {
            shape[0] = 1;
            const int yi = data.labels[i];
            const Tensor adv = pgd(Tensor(shape, std::vector<double>(x.begin(), x.end())), std::span(&yi, 1));
            cand_data.insert(cand_data.end(), adv.values().begin(), adv.values().end());
            ++n_cand;
        }
        shape[0] = n_cand;
        const std::vector<int> pred = classify(Tensor(shape, std::move(cand_data)));
        robust += std::all_of(pred.begin(), pred.end(), [&](int p) { return p == data.labels[i]; });
    }
    return static_cast<double>(robust) / static_cast<double>(data.size());
}

inline double exhaustive_robust_accuracy(const Network& net, const Dataset& data, Norm norm, double epsilon,
                                         std::size_t grid = 21) {
    Network eval_net = net;
    eval_net.set_mode(NetMode::Eval);
    const AttackSpec spec = AttackSpec::evaluation(norm, epsilon);
    return exhaustive_robust_accuracy([&](const Tensor& x) { return eval_net.classify(x); }, data, norm, epsilon, grid,
                                      [&](const Tensor& x, std::span<const int> y) {
                                          return pgd_attack(eval_net, x, y, spec, BnMode::Eval);
                                      });
}

}  // namespace rtl
