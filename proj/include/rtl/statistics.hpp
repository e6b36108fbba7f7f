#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtl/datasets.hpp"
#include "rtl/error.hpp"

namespace rtl {

inline double top1(std::span<const int> preds, std::span<const int> labels) {
    if (preds.size() != labels.size()) {
        throw ContractError("top1: " + std::to_string(preds.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
    }
    if (labels.empty()) throw ContractError("top1 on an empty set");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += preds[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Unweighted mean over classes of per-class recall.
inline double mean_per_class(std::span<const int> preds, std::span<const int> labels, std::size_t class_count) {
    if (preds.size() != labels.size()) {
        throw ContractError("mean_per_class: " + std::to_string(preds.size()) + " predictions for " +
                            std::to_string(labels.size()) + " labels");
    }
    std::vector<std::size_t> total(class_count, 0), hit(class_count, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= class_count) {
            throw ContractError("label " + std::to_string(labels[i]) + " outside [0," + std::to_string(class_count) + ")");
        }
        const auto c = static_cast<std::size_t>(labels[i]);
        ++total[c];
        hit[c] += preds[i] == labels[i];
    }
    double acc = 0.0;
    for (std::size_t c = 0; c < class_count; ++c) {
        if (total[c] == 0) throw ContractError("class " + std::to_string(c) + " is absent from the labels");
        acc += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    }
    return acc / static_cast<double>(class_count);
}

inline double metric_value(MetricKind kind, std::span<const int> preds, std::span<const int> labels,
                           std::size_t class_count) {
    return kind == MetricKind::Top1 ? top1(preds, labels) : mean_per_class(preds, labels, class_count);
}

// ---- t distribution -------------------------------------------------------------

namespace detail {

/// Continued fraction for the incomplete beta function (modified Lentz).
inline double beta_continued_fraction(double a, double b, double x) {
    constexpr int kMaxIter = 10000;
    constexpr double kEps = 1e-16;
    constexpr double kTiny = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < kTiny) d = kTiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kTiny) d = kTiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < kTiny) c = kTiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) return h;
    }
    return h;
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw ContractError("incomplete_beta needs a, b > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(log_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * detail::beta_continued_fraction(b, a, 1.0 - x) / b;
}

/// P(|T| >= |t|) for Student's t with df degrees of freedom.
inline double student_t_two_tailed(double t, double df) {
    if (!(df > 0.0)) throw ContractError("t distribution needs df > 0");
    if (std::isinf(t)) return 0.0;
    return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

// ---- trial sets -----------------------------------------------------------------

struct TrialSet {
    std::string label;
    std::vector<double> observations;

    double mean() const {
        if (observations.empty()) throw ContractError("trial set '" + label + "' has no observations");
        return std::accumulate(observations.begin(), observations.end(), 0.0) / static_cast<double>(observations.size());
    }

    /// Bessel-corrected variance; needs two observations.
    double variance() const {
        if (observations.size() < 2) throw ContractError("variance of '" + label + "' needs two observations");
        const double m = mean();
        double s = 0.0;
        for (double v : observations) s += (v - m) * (v - m);
        return s / static_cast<double>(observations.size() - 1);
    }
};

struct Aggregate {
    double mean = 0.0;
    std::optional<double> std;  ///< absent for a single observation
    std::size_t count = 0;
};

inline Aggregate aggregate(const TrialSet& trials) {
    Aggregate out;
    out.mean = trials.mean();
    out.count = trials.observations.size();
    if (out.count >= 2) out.std = std::sqrt(trials.variance());
    return out;
}

struct WelchResult {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;
    bool significant_at_95 = false;
};

/// Two-sided Welch's unequal-variance t-test.
inline WelchResult welch_t_test(const TrialSet& a, const TrialSet& b) {
    if (a.observations.size() < 2 || b.observations.size() < 2) {
        throw ContractError("Welch's t-test needs at least two observations per set");
    }
    const double na = static_cast<double>(a.observations.size());
    const double nb = static_cast<double>(b.observations.size());
    const double ma = a.mean(), mb = b.mean();
    const double va = a.variance(), vb = b.variance();
    WelchResult r;
    if (va == 0.0 && vb == 0.0) {
        if (ma != mb) throw ContractError("Welch's t-test is undefined: both sets have zero variance and different means");
        r.t = 0.0;
        r.df = na + nb - 2.0;
        r.p = 1.0;
        return r;
    }
    const double sa = va / na, sb = vb / nb;
    const double se2 = sa + sb;
    r.t = (ma - mb) / std::sqrt(se2);
    r.df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    r.p = student_t_two_tailed(r.t, r.df);
    r.significant_at_95 = r.p < 0.05;
    return r;
}

enum class Bold { A, B, Both };

/// Bold the higher mean when the difference is significant, otherwise both.
inline Bold bolding_rule(const TrialSet& a, const TrialSet& b) {
    const WelchResult w = welch_t_test(a, b);
    if (!w.significant_at_95) return Bold::Both;
    return a.mean() > b.mean() ? Bold::A : Bold::B;
}

/// Squared Pearson correlation, i.e. R^2 of the least-squares line y ~ x.
inline double r_squared(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ContractError("r_squared needs equally long samples");
    if (x.size() < 3) throw ContractError("r_squared needs at least 3 points");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0) throw ContractError("r_squared: x is constant");
    if (syy == 0.0) throw ContractError("r_squared: y is constant");
    return (sxy * sxy) / (sxx * syy);
}

}  // namespace rtl
