#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rtl/datasets.hpp"
#include "rtl/error.hpp"
#include "rtl/models.hpp"
#include "rtl/trainer.hpp"

namespace rtl {

enum class TransferMode {
    FixedFeature,  ///< frozen backbone weights, trained head, live batch statistics
    FullNetwork,   ///< every parameter fine-tuned
};

inline std::string to_string(TransferMode m) {
    return m == TransferMode::FixedFeature ? "fixed_feature" : "full_network";
}

inline TransferMode transfer_mode_from_string(std::string_view s) {
    if (s == "fixed_feature" || s == "fixed") return TransferMode::FixedFeature;
    if (s == "full_network" || s == "full") return TransferMode::FullNetwork;
    throw ConfigError("unknown transfer mode '" + std::string(s) + "' (expected fixed_feature or full_network)");
}

struct TransferConfig {
    /// Hyperparameters shared by every grid point; `lr` is overridden by lr_grid.
    TrainConfig train = TrainConfig::transfer(0.01);
    std::vector<double> lr_grid{0.01, 0.001};
    /// Random resized crop + flip on training batches.
    bool augment = true;
    /// Resize to 8/7 of the input size and center crop for evaluation.
    bool test_resize_crop = true;
};

struct LrOutcome {
    double lr = 0.0;
    double metric = 0.0;
};

struct TransferOutcome {
    Network net;  ///< network trained with the selected lr
    double metric = 0.0;
    double lr = 0.0;
    std::vector<LrOutcome> grid;
    TrainLog log;
};

namespace detail {

inline Tensor fit_to_input(const Tensor& images, std::size_t size) {
    return resize(images, size, size, Resampling::Bilinear);
}

}  // namespace detail

/// Test-split images as the network will see them at evaluation time.
inline Dataset prepare_test_split(const Dataset& test, std::size_t input_size, bool resize_crop) {
    Dataset out = test;
    out.images = resize_crop ? resize_center_crop(test.images, input_size) : detail::fit_to_input(test.images, input_size);
    return out;
}

/// One training run with a fixed lr (config.train.lr).
inline TrainResult transfer_once(const Network& pretrained, const Dataset& train_split, TransferMode mode,
                                 const TransferConfig& config, double lr, std::uint64_t head_seed) {
    if (pretrained.head().weight.dim(0) != pretrained.config().feature_dim()) {
        throw ContractError("pretrained head input width " + std::to_string(pretrained.head().weight.dim(0)) +
                            " does not match feature_dim " + std::to_string(pretrained.config().feature_dim()));
    }
    if (train_split.channels() != pretrained.config().input_channels) {
        throw DimensionError("target has " + std::to_string(train_split.channels()) + " channels; network expects " +
                             std::to_string(pretrained.config().input_channels));
    }
    Network net = replace_head(pretrained, train_split.class_count, head_seed);
    net.set_mode(NetMode::Train);
    TrainConfig tc = config.train;
    tc.lr = lr;
    tc.attack.reset();
    tc.freeze_backbone = mode == TransferMode::FixedFeature;
    const std::size_t input = pretrained.config().input_size;
    Dataset train_data = train_split;
    if (config.augment) {
        tc.augment = AugmentPolicy::standard(train_split.orientation_sensitive);
        tc.augment.output_size = input;
    } else {
        tc.augment = AugmentPolicy::none();
        train_data.images = detail::fit_to_input(train_data.images, input);
    }
    return train(std::move(net), train_data, tc);
}

/// Replace the head, train under `mode` for every lr in the grid, and keep the
/// run with the best test metric (earliest grid entry on ties).
inline TransferOutcome transfer(const Network& pretrained, const SplitDataset& target, TransferMode mode,
                                const TransferConfig& config, std::uint64_t head_seed) {
    if (target.train.size() == 0 || target.test.size() == 0) throw ContractError("transfer target split is empty");
    if (config.lr_grid.empty()) throw ConfigError("transfer lr grid is empty");
    const Dataset test = prepare_test_split(target.test, pretrained.config().input_size, config.test_resize_crop);
    std::optional<TransferOutcome> best;
    std::vector<LrOutcome> grid;
    for (double lr : config.lr_grid) {
        TrainResult run = transfer_once(pretrained, target.train, mode, config, lr, head_seed);
        const double metric = evaluate(run.net, test);
        grid.push_back({lr, metric});
        if (!best || metric > best->metric) {
            best = TransferOutcome{std::move(run.net), metric, lr, {}, std::move(run.log)};
        }
    }
    best->grid = std::move(grid);
    return std::move(*best);
}

struct FeatureMatrix {
    Tensor features;  ///< [N, feature_dim]
    std::vector<int> labels;
};

/// Penultimate features with running statistics (eval mode).
inline FeatureMatrix probe_features(const Network& pretrained, const Dataset& data, std::size_t batch_size = 256) {
    if (data.size() == 0) throw ContractError("probe_features on an empty dataset");
    pretrained.check_input(data.images.slice_rows(0, 1));
    Network eval_net = pretrained;
    eval_net.set_mode(NetMode::Eval);
    const std::size_t d = eval_net.feature_dim();
    std::vector<double> values;
    values.reserve(data.size() * d);
    for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
        const std::size_t count = std::min(batch_size, data.size() - begin);
        const Tensor f = eval_net.features(data.images.slice_rows(begin, count));
        values.insert(values.end(), f.values().begin(), f.values().end());
    }
    return {Tensor(Shape{data.size(), d}, std::move(values)), data.labels};
}

}  // namespace rtl
