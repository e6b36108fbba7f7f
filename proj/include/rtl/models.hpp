#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "rtl/autodiff.hpp"
#include "rtl/error.hpp"
#include "rtl/hash.hpp"
#include "rtl/tensor.hpp"

namespace rtl {

struct ModelConfig {
    std::size_t input_channels = 3;
    std::size_t input_size = 8;
    std::size_t base_channels = 4;
    std::size_t width_multiplier = 1;
    std::size_t num_blocks = 2;
    std::size_t num_classes = 10;
    bool use_batchnorm = true;
    std::uint64_t seed = 0;

    std::size_t block_channels(std::size_t block) const {
        return base_channels * width_multiplier * (std::size_t{1} << block);
    }
    std::size_t feature_dim() const { return block_channels(num_blocks - 1); }

    void validate() const {
        if (input_channels == 0 || base_channels == 0 || num_blocks == 0) {
            throw ConfigError("input_channels, base_channels and num_blocks must be positive");
        }
        if (width_multiplier == 0) throw ConfigError("width_multiplier must be positive");
        if (num_classes < 2) throw ConfigError("num_classes must be at least 2");
        const std::size_t factor = std::size_t{1} << num_blocks;
        if (input_size == 0 || input_size % factor != 0) {
            throw ConfigError("input_size " + std::to_string(input_size) + " is not divisible by 2^num_blocks = " +
                              std::to_string(factor));
        }
    }

    bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"input_channels", c.input_channels}, {"input_size", c.input_size},
                       {"base_channels", c.base_channels},   {"width_multiplier", c.width_multiplier},
                       {"num_blocks", c.num_blocks},         {"num_classes", c.num_classes},
                       {"use_batchnorm", c.use_batchnorm},   {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    const ModelConfig d;
    c.input_channels = j.value("input_channels", d.input_channels);
    c.input_size = j.value("input_size", d.input_size);
    c.base_channels = j.value("base_channels", d.base_channels);
    c.width_multiplier = j.value("width_multiplier", d.width_multiplier);
    c.num_blocks = j.value("num_blocks", d.num_blocks);
    c.num_classes = j.value("num_classes", d.num_classes);
    c.use_batchnorm = j.value("use_batchnorm", d.use_batchnorm);
    c.seed = j.value("seed", d.seed);
}

enum class NetMode { Train, Eval };

struct ForwardOptions {
    BnMode bn = BnMode::Eval;
    /// Register parameters as gradient-tracked leaves.
    bool track_backbone = false;
    bool track_head = false;
};

/// Side outputs of a forward pass: batch statistics from each batch-norm
/// layer that ran in Train mode, in block order.
struct ForwardTrace {
    std::vector<BatchStats> batch_stats;
};

struct ConvBlock {
    Tensor weight;               // [out, in, 3, 3]
    std::optional<Tensor> bias;  // [out], only without batch-norm
    struct Norm {
        Tensor gamma, beta, running_mean, running_var;
    };
    std::optional<Norm> norm;
};

struct LinearHead {
    Tensor weight;  // [feature_dim, num_classes]
    Tensor bias;    // [num_classes]
};

/// Plain conv stack: blocks of conv3x3 -> [batch-norm] -> relu -> 2x2 max-pool,
/// then global average pooling (the penultimate features) and a linear head.
class Network {
public:
    static constexpr double kBnMomentum = 0.1;
    static constexpr double kBnEps = 1e-5;

    Network(ModelConfig config, std::vector<ConvBlock> blocks, LinearHead head)
        : config_(std::move(config)), blocks_(std::move(blocks)), head_(std::move(head)) {}

    const ModelConfig& config() const noexcept { return config_; }
    std::size_t feature_dim() const noexcept { return head_.weight.dim(0); }
    std::size_t num_classes() const noexcept { return head_.weight.dim(1); }

    NetMode mode() const noexcept { return mode_; }
    void set_mode(NetMode m) noexcept { mode_ = m; }
    BnMode bn_mode() const noexcept { return mode_ == NetMode::Train ? BnMode::Train : BnMode::Eval; }

    const std::vector<ConvBlock>& blocks() const noexcept { return blocks_; }
    const LinearHead& head() const noexcept { return head_; }

    void check_input(const Tensor& x) const {
        if (x.rank() != 4 || x.dim(1) != config_.input_channels || x.dim(2) != config_.input_size ||
            x.dim(3) != config_.input_size) {
            throw DimensionError("network expects [N," + std::to_string(config_.input_channels) + "," +
                                 std::to_string(config_.input_size) + "," + std::to_string(config_.input_size) +
                                 "] input; got " + shape_string(x.shape()));
        }
    }

    /// Penultimate activations [N, feature_dim].
    Var forward_features(Tape& tape, Var x, const ForwardOptions& opt, ForwardTrace* trace = nullptr) const {
        check_input(tape.value(x));
        Var h = x;
        for (const ConvBlock& b : blocks_) {
            h = tape.conv2d(h, tape.parameter(b.weight, opt.track_backbone), 1, 1);
            if (b.bias) h = tape.add_bias(h, tape.parameter(*b.bias, opt.track_backbone));
            if (b.norm) {
                BatchStats stats;
                h = tape.batch_norm(h, tape.parameter(b.norm->gamma, opt.track_backbone),
                                    tape.parameter(b.norm->beta, opt.track_backbone), opt.bn,
                                    b.norm->running_mean.data(), b.norm->running_var.data(), kBnEps,
                                    opt.bn == BnMode::Train ? &stats : nullptr);
                if (trace && opt.bn == BnMode::Train) trace->batch_stats.push_back(std::move(stats));
            }
            h = tape.relu(h);
            h = tape.max_pool2d(h);
        }
        return tape.spatial_mean(h);
    }

    Var apply_head(Tape& tape, Var features, bool track) const {
        const Var z = tape.matmul(features, tape.parameter(head_.weight, track));
        return tape.add_bias(z, tape.parameter(head_.bias, track));
    }

    /// Logits [N, num_classes].
    Var forward(Tape& tape, Var x, const ForwardOptions& opt, ForwardTrace* trace = nullptr) const {
        return apply_head(tape, forward_features(tape, x, opt, trace), opt.track_head);
    }

    /// Penultimate features under the current mode (Train mode uses batch
    /// statistics but does not update the running averages).
    Tensor features(const Tensor& x) const {
        Tape tape;
        const Var f = forward_features(tape, tape.constant(Tensor(x.shape(), x.values())), {bn_mode()});
        return Tensor(tape.value(f).shape(), tape.value(f).values());
    }

    Tensor predict(const Tensor& x) const {
        Tape tape;
        const Var z = forward(tape, tape.constant(Tensor(x.shape(), x.values())), {bn_mode()});
        return Tensor(tape.value(z).shape(), tape.value(z).values());
    }

    std::vector<int> classify(const Tensor& x) const { return argmax_rows(predict(x)); }

    static std::vector<int> argmax_rows(const Tensor& logits) {
        const std::size_t N = logits.dim(0), C = logits.dim(1);
        std::vector<int> out(N);
        for (std::size_t n = 0; n < N; ++n) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < C; ++c)
                if (logits[n * C + c] > logits[n * C + best]) best = c;
            out[n] = static_cast<int>(best);
        }
        return out;
    }

    /// Fold observed batch statistics into the running averages.
    void absorb_batch_stats(const ForwardTrace& trace) {
        std::size_t k = 0;
        for (ConvBlock& b : blocks_) {
            if (!b.norm) continue;
            if (k >= trace.batch_stats.size()) throw StateError("batch statistics missing for a batch-norm layer");
            const BatchStats& s = trace.batch_stats[k++];
            for (std::size_t c = 0; c < s.mean.size(); ++c) {
                b.norm->running_mean[c] = (1.0 - kBnMomentum) * b.norm->running_mean[c] + kBnMomentum * s.mean[c];
                b.norm->running_var[c] = (1.0 - kBnMomentum) * b.norm->running_var[c] + kBnMomentum * s.var[c];
            }
        }
    }

    std::vector<Tensor*> backbone_parameters() {
        std::vector<Tensor*> out;
        for (ConvBlock& b : blocks_) {
            out.push_back(&b.weight);
            if (b.bias) out.push_back(&*b.bias);
            if (b.norm) {
                out.push_back(&b.norm->gamma);
                out.push_back(&b.norm->beta);
            }
        }
        return out;
    }
    std::vector<Tensor*> head_parameters() { return {&head_.weight, &head_.bias}; }
    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out = backbone_parameters();
        out.push_back(&head_.weight);
        out.push_back(&head_.bias);
        return out;
    }
    std::vector<Tensor*> running_statistics() {
        std::vector<Tensor*> out;
        for (ConvBlock& b : blocks_)
            if (b.norm) {
                out.push_back(&b.norm->running_mean);
                out.push_back(&b.norm->running_var);
            }
        return out;
    }

    /// Every stored tensor in checkpoint declaration order, with names.
    std::vector<std::pair<std::string, const Tensor*>> named_tensors() const {
        return collect_tensors<const Tensor*>(*this);
    }
    std::vector<std::pair<std::string, Tensor*>> named_tensors() { return collect_tensors<Tensor*>(*this); }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const ConvBlock& b : blocks_) {
            n += b.weight.size();
            if (b.bias) n += b.bias->size();
            if (b.norm) n += b.norm->gamma.size() + b.norm->beta.size();
        }
        return n + head_.weight.size() + head_.bias.size();
    }

    /// FNV-1a over backbone parameters and running statistics.
    std::uint64_t backbone_hash() const {
        Fnv1a h;
        for (const auto& [name, t] : named_tensors())
            if (name.rfind("head.", 0) != 0) h.update(t->data());
        return h.digest();
    }
    std::uint64_t backbone_weight_hash() const {
        Fnv1a h;
        for (const auto& [name, t] : named_tensors())
            if (name.rfind("head.", 0) != 0 && name.find("running_") == std::string::npos) h.update(t->data());
        return h.digest();
    }
    std::uint64_t head_hash() const {
        Fnv1a h;
        h.update(head_.weight.data());
        h.update(head_.bias.data());
        return h.digest();
    }

    void set_head(LinearHead head, std::size_t num_classes) {
        head_ = std::move(head);
        config_.num_classes = num_classes;
    }

private:
    template <class Ptr, class Self>
    static std::vector<std::pair<std::string, Ptr>> collect_tensors(Self& self) {
        std::vector<std::pair<std::string, Ptr>> out;
        for (std::size_t i = 0; i < self.blocks_.size(); ++i) {
            auto& b = self.blocks_[i];
            const std::string p = "block" + std::to_string(i) + ".";
            out.emplace_back(p + "weight", &b.weight);
            if (b.bias) out.emplace_back(p + "bias", &*b.bias);
            if (b.norm) {
                out.emplace_back(p + "bn.gamma", &b.norm->gamma);
                out.emplace_back(p + "bn.beta", &b.norm->beta);
                out.emplace_back(p + "bn.running_mean", &b.norm->running_mean);
                out.emplace_back(p + "bn.running_var", &b.norm->running_var);
            }
        }
        out.emplace_back("head.weight", &self.head_.weight);
        out.emplace_back("head.bias", &self.head_.bias);
        return out;
    }

    ModelConfig config_;
    std::vector<ConvBlock> blocks_;
    LinearHead head_;
    NetMode mode_ = NetMode::Train;
};

namespace detail {

inline Tensor he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : t.values()) v = dist(rng);
    return t;
}

inline LinearHead make_head(std::size_t feature_dim, std::size_t num_classes, std::mt19937_64& rng) {
    return LinearHead{he_normal(Shape{feature_dim, num_classes}, feature_dim, rng), Tensor(Shape{num_classes}, 0.0)};
}

}  // namespace detail

/// Deterministic He-normal (fan-in) initialization from config.seed. The head
/// is drawn last, so configs differing only in num_classes share a backbone.
inline Network build(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    std::vector<ConvBlock> blocks;
    std::size_t in = config.input_channels;
    for (std::size_t i = 0; i < config.num_blocks; ++i) {
        const std::size_t out = config.block_channels(i);
        ConvBlock b{detail::he_normal(Shape{out, in, 3, 3}, in * 9, rng), std::nullopt, std::nullopt};
        if (config.use_batchnorm) {
            b.norm = ConvBlock::Norm{Tensor(Shape{out}, 1.0), Tensor(Shape{out}, 0.0), Tensor(Shape{out}, 0.0),
                                     Tensor(Shape{out}, 1.0)};
        } else {
            b.bias = Tensor(Shape{out}, 0.0);
        }
        blocks.push_back(std::move(b));
        in = out;
    }
    LinearHead head = detail::make_head(config.feature_dim(), config.num_classes, rng);
    return Network(config, std::move(blocks), std::move(head));
}

/// Copy of `net` with a freshly initialized head; the backbone is untouched.
inline Network replace_head(const Network& net, std::size_t num_classes, std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("replacement head needs at least 2 classes");
    Network out = net;
    std::mt19937_64 rng(seed);
    out.set_head(detail::make_head(net.feature_dim(), num_classes, rng), num_classes);
    return out;
}

// ---- checkpoints ------------------------------------------------------------
//
// "RTLCKPT1\n", one JSON line {version, config, mode, tensors:[names]}, the
// tensors in declaration order (tensor serialization format), then the
// FNV-1a hash of all preceding bytes as 8 little-endian bytes.

inline constexpr std::string_view kCheckpointMagic = "RTLCKPT1";
inline constexpr int kCheckpointVersion = 1;

inline std::string checkpoint_save(const Network& net) {
    std::ostringstream out(std::ios::binary);
    out << kCheckpointMagic << '\n';
    nlohmann::json meta;
    meta["version"] = kCheckpointVersion;
    meta["config"] = net.config();
    meta["mode"] = net.mode() == NetMode::Train ? "train" : "eval";
    std::vector<std::string> names;
    for (const auto& nt : net.named_tensors()) names.push_back(nt.first);
    meta["tensors"] = names;
    out << meta.dump() << '\n';
    for (const auto& nt : net.named_tensors()) write_tensor(out, *nt.second);
    std::string bytes = out.str();
    const std::uint64_t h = fnv1a(bytes);
    bytes.append(reinterpret_cast<const char*>(&h), sizeof h);
    return bytes;
}

inline Network checkpoint_load(std::string_view bytes) {
    if (bytes.size() < kCheckpointMagic.size() + 1 + sizeof(std::uint64_t) ||
        bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
        throw CorruptCheckpoint("bad checkpoint magic or truncated file");
    }
    const std::string_view body = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
    std::uint64_t stored = 0;
    std::memcpy(&stored, bytes.data() + body.size(), sizeof stored);
    if (fnv1a(body) != stored) throw CorruptCheckpoint("checkpoint content hash mismatch");

    std::istringstream in{std::string(body), std::ios::binary};
    std::string line;
    std::getline(in, line);
    if (!std::getline(in, line)) throw CorruptCheckpoint("checkpoint metadata missing");
    nlohmann::json meta;
    ModelConfig config;
    std::vector<std::string> names;
    try {
        meta = nlohmann::json::parse(line);
        if (meta.at("version").get<int>() != kCheckpointVersion) {
            throw CorruptCheckpoint("unsupported checkpoint version " + meta.at("version").dump());
        }
        config = meta.at("config").get<ModelConfig>();
        names = meta.at("tensors").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw CorruptCheckpoint(std::string("checkpoint metadata invalid: ") + e.what());
    }
    Network net = [&] {
        try {
            return build(config);
        } catch (const ConfigError& e) {
            throw CorruptCheckpoint(std::string("checkpoint config invalid: ") + e.what());
        }
    }();
    auto expected = net.named_tensors();
    if (expected.size() != names.size()) throw CorruptCheckpoint("checkpoint tensor list does not match config");
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (expected[i].first != names[i]) throw CorruptCheckpoint("unexpected tensor " + names[i]);
        Tensor t;
        try {
            t = read_tensor(in);
        } catch (const LoadError& e) {
            throw CorruptCheckpoint(names[i] + ": " + e.what());
        }
        if (t.shape() != expected[i].second->shape()) {
            throw CorruptCheckpoint(names[i] + ": shape " + shape_string(t.shape()) + " does not match config");
        }
        *expected[i].second = std::move(t);
    }
    if (in.peek() != std::char_traits<char>::eof()) throw CorruptCheckpoint("trailing bytes in checkpoint");
    net.set_mode(meta.value("mode", "train") == "eval" ? NetMode::Eval : NetMode::Train);
    return net;
}

inline void save_checkpoint_file(const Network& net, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingArtifact("cannot write checkpoint " + path);
    const std::string bytes = checkpoint_save(net);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Network load_checkpoint_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("checkpoint not found: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return checkpoint_load(buf.str());
}

}  // namespace rtl
