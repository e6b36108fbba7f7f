#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "rtl/adversary.hpp"
#include "rtl/datasets.hpp"
#include "rtl/error.hpp"
#include "rtl/models.hpp"
#include "rtl/statistics.hpp"

namespace rtl {

struct TrainConfig {
    std::size_t epochs = 90;
    std::size_t batch_size = 512;
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double lr_drop_factor = 10.0;
    std::size_t lr_drop_every = 30;
    /// Present: adversarial training against this attack; absent: standard ERM.
    std::optional<AttackSpec> attack;
    /// Batch-norm statistics used while computing attack gradients.
    BnMode attack_bn_mode = BnMode::Train;
    /// Only the head receives gradient updates; batch-norm running statistics still update.
    bool freeze_backbone = false;
    AugmentPolicy augment = AugmentPolicy::none();
    std::uint64_t seed = 0;

    /// Source-model recipe: SGD, batch 512, momentum 0.9, wd 1e-4, lr 0.1 dropping x10 every 30 of 90 epochs.
    static TrainConfig pretraining() { return {}; }

    /// Transfer recipe: 150 epochs, batch 64, momentum 0.9, wd 5e-4, lr dropping x10 every 50 epochs.
    static TrainConfig transfer(double lr) {
        TrainConfig c;
        c.epochs = 150;
        c.batch_size = 64;
        c.lr = lr;
        c.momentum = 0.9;
        c.weight_decay = 5e-4;
        c.lr_drop_factor = 10.0;
        c.lr_drop_every = 50;
        return c;
    }

    /// Same schedule shape compressed to `epochs` (drop points scale proportionally).
    TrainConfig scaled(std::size_t new_epochs) const {
        TrainConfig c = *this;
        c.epochs = new_epochs;
        c.lr_drop_every = std::max<std::size_t>(1, lr_drop_every * new_epochs / std::max<std::size_t>(1, epochs));
        return c;
    }

    void validate() const {
        if (batch_size == 0) throw ConfigError("batch_size must be positive");
        if (!(lr >= 0.0)) throw ConfigError("lr must be nonnegative");
        if (lr_drop_every == 0) throw ConfigError("lr_drop_every must be positive");
        if (!(lr_drop_factor > 0.0)) throw ConfigError("lr_drop_factor must be positive");
        if (attack) attack->validate();
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"batch_size", c.batch_size},
                       {"lr", c.lr},
                       {"momentum", c.momentum},
                       {"weight_decay", c.weight_decay},
                       {"lr_drop_factor", c.lr_drop_factor},
                       {"lr_drop_every", c.lr_drop_every},
                       {"attack_bn_mode", c.attack_bn_mode == BnMode::Train ? "train" : "eval"},
                       {"seed", c.seed}};
    if (c.attack) j["attack"] = *c.attack;
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    const TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.batch_size = j.value("batch_size", d.batch_size);
    c.lr = j.value("lr", d.lr);
    c.momentum = j.value("momentum", d.momentum);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.lr_drop_factor = j.value("lr_drop_factor", d.lr_drop_factor);
    c.lr_drop_every = j.value("lr_drop_every", d.lr_drop_every);
    c.attack_bn_mode = j.value("attack_bn_mode", std::string("train")) == "eval" ? BnMode::Eval : BnMode::Train;
    c.seed = j.value("seed", d.seed);
    if (j.contains("attack") && !j["attack"].is_null()) c.attack = j["attack"].get<AttackSpec>();
}

/// Step schedule: lr / drop_factor^floor(epoch / drop_every).
inline double lr_at(const TrainConfig& config, std::size_t epoch) {
    if (epoch >= config.epochs) {
        throw ContractError("epoch " + std::to_string(epoch) + " outside [0," + std::to_string(config.epochs) + ")");
    }
    const auto drops = static_cast<double>(epoch / config.lr_drop_every);
    return config.lr / std::pow(config.lr_drop_factor, drops);
}

/// v <- momentum*v + (grad + weight_decay*param);  param <- param - lr*v.
inline void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
                     double momentum, double weight_decay) {
    if (params.size() != grads.size() || params.size() != velocity.size()) {
        throw DimensionError("sgd_step: params/grads/velocity lengths " + std::to_string(params.size()) + "/" +
                             std::to_string(grads.size()) + "/" + std::to_string(velocity.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + (grads[i] + weight_decay * params[i]);
        params[i] -= lr * velocity[i];
    }
}

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    /// Clean accuracy over the training set with running statistics, after the epoch.
    double train_accuracy = 0.0;
    /// Accuracy on the attacked batches as they were trained on.
    std::optional<double> robust_train_accuracy;
    double seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    double seconds = 0.0;

    const EpochLog& last() const {
        if (epochs.empty()) throw StateError("training log is empty");
        return epochs.back();
    }

    /// One JSON object per epoch, newline-terminated.
    std::string to_jsonl() const {
        std::string out;
        for (const EpochLog& e : epochs) {
            nlohmann::json j{{"epoch", e.epoch},
                             {"lr", e.lr},
                             {"train_loss", e.train_loss},
                             {"train_accuracy", e.train_accuracy},
                             {"seconds", e.seconds}};
            j["robust_train_accuracy"] = e.robust_train_accuracy ? nlohmann::json(*e.robust_train_accuracy) : nlohmann::json();
            out += j.dump() + "\n";
        }
        return out;
    }
};

struct TrainResult {
    Network net;
    TrainLog log;
};

/// Deterministic stream for (seed, epoch, purpose).
inline std::mt19937_64 derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
    return std::mt19937_64(seq);
}

/// Predictions with running statistics, batched.
inline std::vector<int> predict_labels(const Network& net, const Tensor& images, std::size_t batch_size = 256) {
    Network eval_net = net;
    eval_net.set_mode(NetMode::Eval);
    std::vector<int> out;
    const std::size_t n = images.dim(0);
    for (std::size_t begin = 0; begin < n; begin += batch_size) {
        const std::size_t count = std::min(batch_size, n - begin);
        const std::vector<int> p = eval_net.classify(images.slice_rows(begin, count));
        out.insert(out.end(), p.begin(), p.end());
    }
    return out;
}

/// Dataset metric (its declared metric kind) of `net` with running statistics.
inline double evaluate(const Network& net, const Dataset& data) {
    const std::vector<int> pred = predict_labels(net, data.images);
    return metric_value(data.metric_kind, pred, data.labels, data.class_count);
}

/// Minibatch SGD. Without config.attack this is standard ERM; with it, each
/// batch is replaced by its PGD adversarial counterpart (computed against the
/// current parameters) before the gradient step. Returns the net in Eval mode.
inline TrainResult train(Network net, const Dataset& data, const TrainConfig& config) {
    config.validate();
    if (data.size() == 0) throw ContractError("cannot train on an empty dataset");
    net.check_input(data.images.slice_rows(0, 1));
    if (data.class_count > net.num_classes()) {
        throw DimensionError("dataset has " + std::to_string(data.class_count) + " classes but the head has " +
                             std::to_string(net.num_classes()));
    }
    const auto start = std::chrono::steady_clock::now();
    std::vector<Tensor*> params = config.freeze_backbone ? net.head_parameters() : net.parameters();
    std::vector<std::vector<double>> velocity;
    for (Tensor* p : params) velocity.emplace_back(p->size(), 0.0);

    TrainLog log;
    const std::size_t n = data.size();
    for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        const double lr = lr_at(config, epoch);
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 shuffle_rng = derived_rng(config.seed, epoch, 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        std::mt19937_64 augment_rng = derived_rng(config.seed, epoch, 1);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        std::size_t batch_index = 0;
        for (std::size_t begin = 0; begin < n; begin += config.batch_size, ++batch_index) {
            const std::size_t count = std::min(config.batch_size, n - begin);
            std::span<const std::size_t> rows(order.data() + begin, count);
            Tensor xb = data.images.gather_rows(rows);
            std::vector<int> yb;
            yb.reserve(count);
            for (std::size_t r : rows) yb.push_back(data.labels[r]);
            if (!config.augment.identity()) xb = augment(xb, config.augment, augment_rng, data.orientation_sensitive);
            if (config.attack) xb = pgd_attack(net, xb, yb, *config.attack, config.attack_bn_mode);

            Tape tape;
            ForwardTrace trace;
            const Var logits = net.forward(tape, tape.constant(std::move(xb)),
                                           {BnMode::Train, !config.freeze_backbone, true}, &trace);
            const Var loss = tape.softmax_cross_entropy(logits, yb);
            const double loss_value = tape.value(loss)[0];
            if (!std::isfinite(loss_value)) throw DivergenceError(epoch, batch_index, "non-finite training loss");
            tape.backward(loss);
            net.absorb_batch_stats(trace);
            for (std::size_t k = 0; k < params.size(); ++k) {
                const std::vector<double> g = tape.grad_for(*params[k]);
                sgd_step(params[k]->data(), g, velocity[k], lr, config.momentum, config.weight_decay);
            }
            loss_sum += loss_value * static_cast<double>(count);
            const std::vector<int> pred = Network::argmax_rows(tape.value(logits));
            for (std::size_t i = 0; i < count; ++i) correct += pred[i] == yb[i];
        }

        EpochLog e;
        e.epoch = epoch;
        e.lr = lr;
        e.train_loss = loss_sum / static_cast<double>(n);
        e.train_accuracy = top1(predict_labels(net, data.images), data.labels);
        if (config.attack) e.robust_train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        e.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
        log.epochs.push_back(e);
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    net.set_mode(NetMode::Eval);
    return {std::move(net), std::move(log)};
}

}  // namespace rtl
