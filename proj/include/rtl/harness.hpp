#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "rtl/adversary.hpp"
#include "rtl/datasets.hpp"
#include "rtl/error.hpp"
#include "rtl/hash.hpp"
#include "rtl/models.hpp"
#include "rtl/statistics.hpp"
#include "rtl/trainer.hpp"
#include "rtl/transfer.hpp"

namespace rtl {

namespace fs = std::filesystem;

/// Shortest decimal that parses back to the same double.
inline std::string format_real(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline double parse_real(std::string_view s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw LoadError("not a number: '" + std::string(s) + "'");
    return v;
}

/// Relative paths are taken relative to the experiment root.
inline fs::path resolve_path(const fs::path& root, const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() || root.empty() ? q : root / q;
}

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline nlohmann::json read_json_file(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

// ---- datasets by reference --------------------------------------------------------

/// A target dataset named in a config: generated from a synthetic spec, or
/// loaded from "<path>.train.rtd" / "<path>.test.rtd".
struct DatasetSource {
    std::string name;
    std::optional<SyntheticSpec> synthetic;
    std::string path;
};

inline void to_json(nlohmann::json& j, const DatasetSource& d) {
    j = nlohmann::json{{"name", d.name}};
    if (d.synthetic) j["synthetic"] = *d.synthetic;
    else j["path"] = d.path;
}

inline void from_json(const nlohmann::json& j, DatasetSource& d) {
    d.name = j.value("name", std::string());
    if (j.contains("synthetic")) {
        d.synthetic = j["synthetic"].get<SyntheticSpec>();
        if (d.name.empty()) d.name = d.synthetic->name;
        d.synthetic->name = d.name;
    } else if (j.contains("path")) {
        d.path = j["path"].get<std::string>();
        if (d.name.empty()) d.name = fs::path(d.path).filename().string();
    } else {
        throw ConfigError("dataset '" + d.name + "' needs either \"synthetic\" or \"path\"");
    }
}

inline std::string split_path(const std::string& prefix, Split split) { return prefix + "." + to_string(split) + ".rtd"; }

inline void save_split(const SplitDataset& d, const std::string& prefix) {
    const fs::path parent = fs::path(prefix).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    save(d.train, split_path(prefix, Split::Train));
    save(d.test, split_path(prefix, Split::Test));
}

inline SplitDataset load_split(const std::string& prefix) {
    for (Split s : {Split::Train, Split::Test})
        if (!fs::exists(split_path(prefix, s))) throw MissingArtifact("dataset file " + split_path(prefix, s) + " not found");
    SplitDataset d{load(split_path(prefix, Split::Train)), load(split_path(prefix, Split::Test))};
    if (d.train.class_count != d.test.class_count) {
        throw LoadError("train/test class counts differ for " + prefix);
    }
    return d;
}

inline SplitDataset materialize(const DatasetSource& source, const fs::path& root) {
    SplitDataset d = source.synthetic ? make_synthetic(*source.synthetic)
                                      : load_split(resolve_path(root, source.path).string());
    d.train.name = source.name;
    d.test.name = source.name;
    return d;
}

/// Nearest down-then-up transform of both splits; low must divide the image size.
inline SplitDataset coarsen(const SplitDataset& d, std::size_t low) {
    const std::size_t h = d.train.height(), w = d.train.width();
    if (low == 0 || h % low != 0 || w % low != 0) {
        throw ConfigError("resolution " + std::to_string(low) + " does not divide image size " + std::to_string(h) +
                          "x" + std::to_string(w));
    }
    SplitDataset out = d;
    out.train.images = downscale_upscale(d.train.images, low, h, Resampling::Nearest);
    out.test.images = downscale_upscale(d.test.images, low, h, Resampling::Nearest);
    return out;
}

inline std::string split_hash(const SplitDataset& d) {
    Fnv1a h;
    h.update(d.train.serialize());
    h.update(d.test.serialize());
    return hex64(h.digest());
}

// ---- records --------------------------------------------------------------------

struct ExperimentRecord {
    std::string run_id;
    std::string phase;  ///< "selection" or "evaluation"
    std::string source_model;
    std::size_t width = 1;
    std::string norm = "l2";
    double epsilon = 0.0;
    std::string mode;
    std::string dataset;
    std::string dataset_hash;
    std::size_t resolution = 0;  ///< 0: native images; otherwise the coarsened size
    double lr = 0.0;
    std::uint64_t seed = 0;
    double metric = 0.0;
    std::string metric_kind = "top1";
    double source_accuracy = 0.0;
    double seconds = 0.0;
    std::string checkpoint_hash;

    bool operator==(const ExperimentRecord&) const = default;
};

inline void to_json(nlohmann::json& j, const ExperimentRecord& r) {
    j = nlohmann::json{{"run_id", r.run_id},
                       {"phase", r.phase},
                       {"source_model", r.source_model},
                       {"width", r.width},
                       {"norm", r.norm},
                       {"epsilon", r.epsilon},
                       {"mode", r.mode},
                       {"dataset", r.dataset},
                       {"dataset_hash", r.dataset_hash},
                       {"resolution", r.resolution},
                       {"lr", r.lr},
                       {"seed", r.seed},
                       {"metric", r.metric},
                       {"metric_kind", r.metric_kind},
                       {"source_accuracy", r.source_accuracy},
                       {"seconds", r.seconds},
                       {"checkpoint_hash", r.checkpoint_hash}};
}

inline void from_json(const nlohmann::json& j, ExperimentRecord& r) {
    r.run_id = j.at("run_id").get<std::string>();
    r.phase = j.at("phase").get<std::string>();
    r.source_model = j.at("source_model").get<std::string>();
    r.width = j.at("width").get<std::size_t>();
    r.norm = j.at("norm").get<std::string>();
    r.epsilon = j.at("epsilon").get<double>();
    r.mode = j.at("mode").get<std::string>();
    r.dataset = j.at("dataset").get<std::string>();
    r.dataset_hash = j.at("dataset_hash").get<std::string>();
    r.resolution = j.value("resolution", std::size_t{0});
    r.lr = j.at("lr").get<double>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.metric = j.at("metric").get<double>();
    r.metric_kind = j.at("metric_kind").get<std::string>();
    r.source_accuracy = j.value("source_accuracy", 0.0);
    r.seconds = j.value("seconds", 0.0);
    r.checkpoint_hash = j.value("checkpoint_hash", std::string());
}

/// Identity of a run: everything that determines its outcome except the data bytes.
inline std::string make_run_id(const ExperimentRecord& r) {
    const std::string key = r.phase + "|" + r.source_model + "|" + r.checkpoint_hash + "|" + r.dataset + "|" +
                            r.dataset_hash + "|" + r.mode + "|" + std::to_string(r.width) + "|" + r.norm + "|" +
                            format_real(r.epsilon) + "|" + std::to_string(r.resolution) + "|" + std::to_string(r.seed);
    return hex64(fnv1a(key));
}

/// Append-only JSON-lines store. Lines are {"planned": id} (written before a
/// phase starts) or {"record": {...}}. A path-less store lives in memory.
class RecordStore {
public:
    RecordStore() = default;

    explicit RecordStore(fs::path path) : path_(std::move(path)) {
        if (fs::exists(path_)) load_lines(read_file(path_));
    }

    struct FromText {};
    RecordStore(FromText, std::string_view text) { load_lines(text); }

    const fs::path& path() const noexcept { return path_; }
    const std::vector<ExperimentRecord>& records() const noexcept { return records_; }
    const std::vector<std::string>& planned() const noexcept { return planned_; }

    std::optional<ExperimentRecord> find(const std::string& run_id) const {
        std::lock_guard lock(mu_);
        const auto it = index_.find(run_id);
        if (it == index_.end()) return std::nullopt;
        return records_[it->second];
    }

    void plan(const std::vector<std::string>& run_ids) {
        std::lock_guard lock(mu_);
        std::string lines;
        for (const std::string& id : run_ids) {
            if (planned_set_.insert(id).second) {
                planned_.push_back(id);
                lines += nlohmann::json{{"planned", id}}.dump() + "\n";
            }
        }
        write(lines);
    }

    /// Records are immutable: a second record with the same run id is an error.
    void append(const ExperimentRecord& r) {
        std::lock_guard lock(mu_);
        if (index_.count(r.run_id)) throw StateError("run " + r.run_id + " is already recorded");
        index_[r.run_id] = records_.size();
        records_.push_back(r);
        write(nlohmann::json{{"record", r}}.dump() + "\n");
    }

    /// Planned run ids that have no record yet, in plan order.
    std::vector<std::string> missing() const {
        std::vector<std::string> out;
        for (const std::string& id : planned_)
            if (!index_.count(id)) out.push_back(id);
        return out;
    }

private:
    void write(const std::string& lines) {
        if (path_.empty() || lines.empty()) return;
        if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
        std::ofstream out(path_, std::ios::binary | std::ios::app);
        if (!out) throw Error("cannot append to " + path_.string());
        out << lines;
        out.flush();
    }

    void load_lines(std::string_view text) {
        std::size_t line_no = 0;
        std::size_t pos = 0;
        while (pos < text.size()) {
            std::size_t end = text.find('\n', pos);
            if (end == std::string_view::npos) end = text.size();
            const std::string_view line = text.substr(pos, end - pos);
            pos = end + 1;
            ++line_no;
            if (line.empty()) continue;
            try {
                const nlohmann::json j = nlohmann::json::parse(line);
                if (j.contains("planned")) {
                    const std::string id = j["planned"].get<std::string>();
                    if (planned_set_.insert(id).second) planned_.push_back(id);
                } else if (j.contains("record")) {
                    ExperimentRecord r = j["record"].get<ExperimentRecord>();
                    if (index_.count(r.run_id)) throw LoadError("duplicate run id " + r.run_id);
                    index_[r.run_id] = records_.size();
                    records_.push_back(std::move(r));
                } else {
                    throw LoadError("neither a plan nor a record entry");
                }
            } catch (const nlohmann::json::exception& e) {
                throw LoadError("record store line " + std::to_string(line_no) + ": " + e.what());
            } catch (const LoadError& e) {
                throw LoadError("record store line " + std::to_string(line_no) + ": " + e.what());
            }
        }
    }

    fs::path path_;
    mutable std::mutex mu_;
    std::vector<ExperimentRecord> records_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> planned_;
    std::set<std::string> planned_set_;
};

// ---- checkpoint registry --------------------------------------------------------

struct RegistryEntry {
    std::string id;
    std::size_t width = 1;
    std::string norm = "l2";
    double epsilon = 0.0;
    std::string path;
    double source_accuracy = 0.0;
    std::string hash;
};

inline void to_json(nlohmann::json& j, const RegistryEntry& e) {
    j = nlohmann::json{{"id", e.id},     {"width", e.width},     {"norm", e.norm}, {"epsilon", e.epsilon},
                       {"path", e.path}, {"source_accuracy", e.source_accuracy}, {"hash", e.hash}};
}

inline void from_json(const nlohmann::json& j, RegistryEntry& e) {
    e.id = j.at("id").get<std::string>();
    e.width = j.value("width", std::size_t{1});
    e.norm = j.value("norm", std::string("l2"));
    e.epsilon = j.value("epsilon", 0.0);
    e.path = j.at("path").get<std::string>();
    e.source_accuracy = j.value("source_accuracy", 0.0);
    e.hash = j.value("hash", std::string());
}

struct Registry {
    std::vector<RegistryEntry> models;

    /// ε = 0 entries are standard models and match either norm.
    const RegistryEntry* find(std::size_t width, Norm norm, double epsilon) const {
        for (const RegistryEntry& e : models) {
            if (e.width != width || e.epsilon != epsilon) continue;
            if (epsilon == 0.0 || e.norm == to_string(norm)) return &e;
        }
        return nullptr;
    }

    void add(RegistryEntry e) {
        std::erase_if(models, [&](const RegistryEntry& m) { return m.id == e.id; });
        models.push_back(std::move(e));
    }

    static Registry load(const fs::path& path) {
        if (!fs::exists(path)) throw MissingArtifact("checkpoint registry " + path.string() + " not found");
        const nlohmann::json j = read_json_file(path);
        Registry r;
        try {
            r.models = j.at("models").get<std::vector<RegistryEntry>>();
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(path.string() + ": " + e.what());
        }
        return r;
    }

    void save(const fs::path& path) const { write_file(path, nlohmann::json{{"models", models}}.dump(2) + "\n"); }
};

// ---- pretraining ----------------------------------------------------------------

struct PretrainConfig {
    DatasetSource source;
    ModelConfig model;
    TrainConfig train = TrainConfig::pretraining();
    Norm norm = Norm::L2;
    std::vector<double> epsilons{0.0};
    std::vector<std::size_t> widths{1};
    std::string out_dir = "checkpoints";
    std::string registry = "registry.json";
};

inline void from_json(const nlohmann::json& j, PretrainConfig& c) {
    c.source = j.at("source").get<DatasetSource>();
    if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
    if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
    c.norm = norm_from_string(j.value("norm", std::string("l2")));
    c.epsilons = j.value("epsilons", c.epsilons);
    c.widths = j.value("widths", c.widths);
    c.out_dir = j.value("out_dir", c.out_dir);
    c.registry = j.value("registry", c.registry);
}

inline std::string model_id(std::size_t width, Norm norm, double epsilon) {
    return "w" + std::to_string(width) + "-" + (epsilon == 0.0 ? std::string("std") : to_string(norm)) + "-eps" +
           format_real(epsilon);
}

/// Train one source model per (width, ε), save checkpoints under out_dir and
/// update the registry file. Returns the updated registry.
inline Registry pretrain(const PretrainConfig& config, const fs::path& root, std::ostream* log = nullptr) {
    if (config.epsilons.empty() || config.widths.empty()) throw ConfigError("pretrain needs epsilons and widths");
    const SplitDataset source = materialize(config.source, root);
    const fs::path registry_path = resolve_path(root, config.registry);
    Registry registry = fs::exists(registry_path) ? Registry::load(registry_path) : Registry{};
    for (std::size_t width : config.widths) {
        for (double eps : config.epsilons) {
            ModelConfig mc = config.model;
            mc.width_multiplier = width;
            mc.num_classes = source.train.class_count;
            mc.input_channels = source.train.channels();
            mc.validate();
            TrainConfig tc = config.train;
            if (eps > 0.0) tc.attack = AttackSpec::training(config.norm, eps);
            else tc.attack.reset();
            TrainResult run = train(build(mc), source.train, tc);
            RegistryEntry e;
            e.id = model_id(width, config.norm, eps);
            e.width = width;
            e.norm = to_string(config.norm);
            e.epsilon = eps;
            e.path = (fs::path(config.out_dir) / (e.id + ".ckpt")).string();
            e.source_accuracy = evaluate(run.net, source.test);
            const std::string bytes = checkpoint_save(run.net);
            e.hash = hex64(fnv1a(bytes));
            write_file(resolve_path(root, e.path), bytes);
            write_file(resolve_path(root, e.path).replace_extension(".log.jsonl"), run.log.to_jsonl());
            if (log) *log << e.id << " source_accuracy=" << format_real(e.source_accuracy) << "\n";
            registry.add(std::move(e));
        }
    }
    registry.save(registry_path);
    return registry;
}

// ---- sweep plans ----------------------------------------------------------------

struct SweepPlan {
    std::string registry = "registry.json";
    Norm norm = Norm::L2;
    std::vector<double> epsilons;
    std::vector<std::size_t> widths{1};
    std::vector<std::uint64_t> selection_seeds{0, 1, 2};
    std::vector<std::uint64_t> evaluation_seeds{100, 101, 102};
    std::vector<TransferMode> modes{TransferMode::FixedFeature, TransferMode::FullNetwork};
    std::vector<DatasetSource> datasets;
    TransferConfig transfer;
    /// Nonzero: coarsen every target to this resolution first (granularity runs).
    std::size_t resolution = 0;
    std::optional<std::size_t> granularity_low;
    std::string records = "records.jsonl";
    std::size_t workers = 1;

    static std::vector<double> default_epsilons(Norm norm) {
        if (norm == Norm::L2) return {0, 0.01, 0.03, 0.05, 0.1, 0.25, 0.5, 1, 3, 5};
        return {0.5 / 255, 1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255};
    }

    void validate() const {
        if (epsilons.empty()) throw ConfigError("sweep plan has an empty epsilon grid");
        for (double e : epsilons)
            if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("epsilon " + format_real(e) + " is not >= 0");
        if (widths.empty()) throw ConfigError("sweep plan has no widths");
        if (std::find(widths.begin(), widths.end(), std::size_t{0}) != widths.end()) throw ConfigError("width 0");
        if (selection_seeds.empty() || evaluation_seeds.empty()) throw ConfigError("both seed sets must be nonempty");
        for (std::uint64_t s : selection_seeds)
            if (std::find(evaluation_seeds.begin(), evaluation_seeds.end(), s) != evaluation_seeds.end()) {
                throw ConfigError("seed " + std::to_string(s) + " appears in both selection and evaluation seeds");
            }
        if (modes.empty()) throw ConfigError("sweep plan has no transfer modes");
        if (datasets.empty()) throw ConfigError("sweep plan has no datasets");
        std::set<std::string> names;
        for (const DatasetSource& d : datasets)
            if (!names.insert(d.name).second) throw ConfigError("duplicate dataset name '" + d.name + "'");
        if (transfer.lr_grid.empty()) throw ConfigError("transfer lr grid is empty");
        if (workers == 0) throw ConfigError("workers must be positive");
        transfer.train.validate();
    }
};

inline void to_json(nlohmann::json& j, const SweepPlan& p) {
    std::vector<std::string> modes;
    for (TransferMode m : p.modes) modes.push_back(to_string(m));
    const TrainConfig& t = p.transfer.train;
    j = nlohmann::json{{"registry", p.registry},
                       {"norm", to_string(p.norm)},
                       {"epsilons", p.epsilons},
                       {"widths", p.widths},
                       {"selection_seeds", p.selection_seeds},
                       {"evaluation_seeds", p.evaluation_seeds},
                       {"modes", modes},
                       {"datasets", p.datasets},
                       {"transfer",
                        {{"epochs", t.epochs},
                         {"batch_size", t.batch_size},
                         {"momentum", t.momentum},
                         {"weight_decay", t.weight_decay},
                         {"lr_drop_factor", t.lr_drop_factor},
                         {"lr_drop_every", t.lr_drop_every},
                         {"lr_grid", p.transfer.lr_grid},
                         {"augment", p.transfer.augment},
                         {"test_resize_crop", p.transfer.test_resize_crop}}},
                       {"resolution", p.resolution},
                       {"records", p.records},
                       {"workers", p.workers}};
    if (p.granularity_low) j["granularity_low"] = *p.granularity_low;
}

inline void from_json(const nlohmann::json& j, SweepPlan& p) {
    const SweepPlan d;
    p.registry = j.value("registry", d.registry);
    p.norm = norm_from_string(j.value("norm", std::string("l2")));
    p.epsilons = j.contains("epsilons") ? j["epsilons"].get<std::vector<double>>() : SweepPlan::default_epsilons(p.norm);
    p.widths = j.value("widths", d.widths);
    p.selection_seeds = j.value("selection_seeds", d.selection_seeds);
    p.evaluation_seeds = j.value("evaluation_seeds", d.evaluation_seeds);
    if (j.contains("modes")) {
        p.modes.clear();
        for (const auto& m : j["modes"]) p.modes.push_back(transfer_mode_from_string(m.get<std::string>()));
    }
    p.datasets = j.value("datasets", d.datasets);
    if (j.contains("transfer")) {
        const nlohmann::json& t = j["transfer"];
        TrainConfig& tc = p.transfer.train;
        tc.epochs = t.value("epochs", tc.epochs);
        tc.batch_size = t.value("batch_size", tc.batch_size);
        tc.momentum = t.value("momentum", tc.momentum);
        tc.weight_decay = t.value("weight_decay", tc.weight_decay);
        tc.lr_drop_factor = t.value("lr_drop_factor", tc.lr_drop_factor);
        tc.lr_drop_every = t.value("lr_drop_every", tc.lr_drop_every);
        p.transfer.lr_grid = t.value("lr_grid", p.transfer.lr_grid);
        p.transfer.augment = t.value("augment", p.transfer.augment);
        p.transfer.test_resize_crop = t.value("test_resize_crop", p.transfer.test_resize_crop);
    }
    p.resolution = j.value("resolution", d.resolution);
    if (j.contains("granularity_low")) p.granularity_low = j["granularity_low"].get<std::size_t>();
    p.records = j.value("records", d.records);
    p.workers = j.value("workers", d.workers);
}

inline SweepPlan load_plan(const fs::path& path) {
    try {
        SweepPlan p = read_json_file(path).get<SweepPlan>();
        p.validate();
        return p;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

// ---- execution ------------------------------------------------------------------

/// Run fn(0..n-1) on up to `workers` threads. The first failing index (in
/// index order) has its exception rethrown after all workers stop.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<std::exception_ptr> errors(n);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < std::min(workers, n); ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n && !failed; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                        failed = true;
                    }
                }
            });
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
}

struct SelectionKey {
    std::string dataset;
    std::string mode;
    std::size_t width = 1;
    std::string norm = "l2";
    std::size_t resolution = 0;

    auto operator<=>(const SelectionKey&) const = default;
};

inline SelectionKey selection_key(const ExperimentRecord& r) {
    return {r.dataset, r.mode, r.width, r.norm, r.resolution};
}

/// ε* = argmax over ε of the mean selection-phase metric for `key`; ties go
/// to the smaller ε. Evaluation-phase records are ignored.
inline double select_epsilon(std::span<const ExperimentRecord> records, const SelectionKey& key) {
    std::map<double, std::pair<double, std::size_t>> sums;
    for (const ExperimentRecord& r : records) {
        if (r.phase != "selection" || selection_key(r) != key) continue;
        auto& [sum, count] = sums[r.epsilon];
        sum += r.metric;
        ++count;
    }
    if (sums.empty()) {
        throw ContractError("no selection records for " + key.dataset + "/" + key.mode + "/w" + std::to_string(key.width));
    }
    double best_eps = 0.0, best_mean = -std::numeric_limits<double>::infinity();
    for (const auto& [eps, sc] : sums) {
        const double mean = sc.first / static_cast<double>(sc.second);
        if (mean > best_mean) {
            best_mean = mean;
            best_eps = eps;
        }
    }
    return best_eps;
}

namespace detail {

struct LoadedModel {
    const RegistryEntry* entry = nullptr;
    Network net;
};

struct LoadedDataset {
    SplitDataset data;
    std::string hash;
};

struct TransferTask {
    std::string phase;
    const LoadedModel* model = nullptr;
    std::size_t dataset = 0;
    TransferMode mode = TransferMode::FixedFeature;
    std::uint64_t seed = 0;
};

struct SweepContext {
    const SweepPlan& plan;
    std::map<std::string, LoadedModel> models;
    std::vector<LoadedDataset> datasets;
    RecordStore& store;
    std::ostream* log = nullptr;
    std::mutex log_mu;
};

inline ExperimentRecord task_header(const SweepContext& ctx, const TransferTask& t) {
    const RegistryEntry& e = *t.model->entry;
    const LoadedDataset& d = ctx.datasets[t.dataset];
    ExperimentRecord r;
    r.phase = t.phase;
    r.source_model = e.id;
    r.width = e.width;
    r.norm = to_string(ctx.plan.norm);
    r.epsilon = e.epsilon;
    r.mode = to_string(t.mode);
    r.dataset = d.data.train.name;
    r.dataset_hash = d.hash;
    r.resolution = ctx.plan.resolution;
    r.seed = t.seed;
    r.metric_kind = to_string(d.data.test.metric_kind);
    r.source_accuracy = e.source_accuracy;
    r.checkpoint_hash = e.hash;
    r.run_id = make_run_id(r);
    return r;
}

inline std::vector<ExperimentRecord> run_tasks(SweepContext& ctx, const std::vector<TransferTask>& tasks) {
    std::vector<ExperimentRecord> out(tasks.size());
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        out[i] = task_header(ctx, tasks[i]);
        ids.push_back(out[i].run_id);
    }
    ctx.store.plan(ids);
    std::atomic<std::size_t> done{0};
    parallel_for(tasks.size(), ctx.plan.workers, [&](std::size_t i) {
        if (auto existing = ctx.store.find(out[i].run_id)) {
            out[i] = *existing;
            ++done;
            return;
        }
        const TransferTask& t = tasks[i];
        TransferConfig tc = ctx.plan.transfer;
        tc.train.seed = t.seed;
        const auto start = std::chrono::steady_clock::now();
        const TransferOutcome outcome = transfer(t.model->net, ctx.datasets[t.dataset].data, t.mode, tc, t.seed);
        ExperimentRecord& r = out[i];
        r.lr = outcome.lr;
        r.metric = outcome.metric;
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        ctx.store.append(r);
        const std::size_t n = ++done;
        if (ctx.log) {
            std::lock_guard lock(ctx.log_mu);
            *ctx.log << "[" << r.phase << " " << n << "/" << tasks.size() << "] " << r.dataset << " " << r.mode << " "
                     << r.source_model << " seed=" << r.seed << " metric=" << format_real(r.metric) << "\n";
        }
    });
    return out;
}

}  // namespace detail

/// ε sweep with disjoint seeds: phase 1 transfers every grid ε over the
/// selection seeds; phase 2 reruns ε* and the ε=0 baseline over the
/// evaluation seeds. Every checkpoint is resolved before any training.
/// Runs already present in the store are reused, not repeated.
inline std::vector<ExperimentRecord> run_sweep(const SweepPlan& plan, const Registry& registry, RecordStore& store,
                                               const fs::path& root = {}, std::ostream* log = nullptr) {
    plan.validate();
    detail::SweepContext ctx{plan, {}, {}, store, log, {}};

    std::vector<double> needed = plan.epsilons;
    needed.push_back(0.0);
    std::vector<std::string> missing;
    for (std::size_t w : plan.widths)
        for (double eps : needed) {
            const RegistryEntry* e = registry.find(w, plan.norm, eps);
            if (!e) {
                missing.push_back("width " + std::to_string(w) + " " + to_string(plan.norm) + " eps " + format_real(eps));
            } else if (!fs::exists(resolve_path(root, e->path))) {
                missing.push_back(e->id + " (" + resolve_path(root, e->path).string() + ")");
            }
        }
    if (!missing.empty()) {
        std::string msg = "missing checkpoints:";
        for (const std::string& m : missing) msg += "\n  " + m;
        throw MissingArtifact(msg);
    }
    auto model_for = [&](std::size_t w, double eps) -> const detail::LoadedModel* {
        const RegistryEntry* e = registry.find(w, plan.norm, eps);
        auto it = ctx.models.find(e->id);
        if (it == ctx.models.end()) {
            const std::string bytes = read_file(resolve_path(root, e->path));
            if (!e->hash.empty() && hex64(fnv1a(bytes)) != e->hash) {
                throw CorruptCheckpoint(e->id + ": checkpoint hash does not match the registry");
            }
            it = ctx.models.emplace(e->id, detail::LoadedModel{e, checkpoint_load(bytes)}).first;
        }
        return &it->second;
    };
    for (std::size_t w : plan.widths)
        for (double eps : needed) model_for(w, eps);

    for (const DatasetSource& src : plan.datasets) {
        SplitDataset d = materialize(src, root);
        if (plan.resolution) {
            for (const auto& [id, m] : ctx.models) {
                if (m.net.config().input_size % plan.resolution != 0) {
                    throw ConfigError("resolution " + std::to_string(plan.resolution) + " does not divide model input size " +
                                      std::to_string(m.net.config().input_size));
                }
            }
            d = coarsen(d, plan.resolution);
        }
        std::string hash = split_hash(d);
        ctx.datasets.push_back({std::move(d), std::move(hash)});
    }

    std::vector<detail::TransferTask> selection;
    for (std::size_t w : plan.widths)
        for (std::size_t di = 0; di < plan.datasets.size(); ++di)
            for (TransferMode mode : plan.modes)
                for (double eps : plan.epsilons)
                    for (std::uint64_t seed : plan.selection_seeds)
                        selection.push_back({"selection", model_for(w, eps), di, mode, seed});
    std::vector<ExperimentRecord> records = detail::run_tasks(ctx, selection);

    std::vector<detail::TransferTask> evaluation;
    for (std::size_t w : plan.widths)
        for (std::size_t di = 0; di < plan.datasets.size(); ++di)
            for (TransferMode mode : plan.modes) {
                const SelectionKey key{ctx.datasets[di].data.train.name, to_string(mode), w, to_string(plan.norm),
                                       plan.resolution};
                const double best = select_epsilon(records, key);
                std::vector<double> chosen{0.0};
                if (best != 0.0) chosen.push_back(best);
                for (double eps : chosen)
                    for (std::uint64_t seed : plan.evaluation_seeds)
                        evaluation.push_back({"evaluation", model_for(w, eps), di, mode, seed});
            }
    std::vector<ExperimentRecord> eval_records = detail::run_tasks(ctx, evaluation);
    records.insert(records.end(), eval_records.begin(), eval_records.end());
    return records;
}

/// The ε sweep repeated for every width of the plan; records carry their width.
inline std::vector<ExperimentRecord> width_sweep(const SweepPlan& plan, const Registry& registry, RecordStore& store,
                                                 const fs::path& root = {}, std::ostream* log = nullptr) {
    if (plan.widths.empty()) throw ConfigError("width sweep needs at least one width");
    return run_sweep(plan, registry, store, root, log);
}

/// Fixed-feature ε sweep on targets coarsened to `low` pixels per side.
inline std::vector<ExperimentRecord> granularity_experiment(const SweepPlan& plan, std::size_t low,
                                                            const Registry& registry, RecordStore& store,
                                                            const fs::path& root = {}, std::ostream* log = nullptr) {
    if (low == 0) throw ConfigError("granularity resolution must be positive");
    SweepPlan coarse = plan;
    coarse.modes = {TransferMode::FixedFeature};
    coarse.resolution = low;
    coarse.granularity_low.reset();
    return run_sweep(coarse, registry, store, root, log);
}

// ---- reports --------------------------------------------------------------------

inline const std::vector<std::string>& csv_columns() {
    static const std::vector<std::string> cols{"run_id",     "phase",   "source_model", "width",           "norm",
                                               "epsilon",    "mode",    "dataset",      "dataset_hash",    "resolution",
                                               "lr",         "seed",    "metric",       "metric_kind",     "source_accuracy",
                                               "seconds",    "checkpoint_hash"};
    return cols;
}

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::vector<std::string> csv_split(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') cur += '"', ++i;
            else if (c == '"') quoted = false;
            else cur += c;
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline bool record_order(const ExperimentRecord& a, const ExperimentRecord& b) {
    auto key = [](const ExperimentRecord& r) {
        return std::make_tuple(r.phase != "selection", r.dataset, r.mode, r.width, r.norm, r.resolution, r.epsilon,
                               r.seed, r.run_id);
    };
    return key(a) < key(b);
}

inline std::string fixed4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f", v);
    return buf;
}

inline std::string sig4(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string mean_std(const TrialSet& t) {
    const Aggregate a = aggregate(t);
    return fixed4(a.mean) + (a.std ? " ± " + fixed4(*a.std) : std::string());
}

inline std::string resolution_label(std::size_t r) { return r == 0 ? "native" : std::to_string(r); }

}  // namespace detail

inline std::string records_csv(std::vector<ExperimentRecord> records) {
    std::sort(records.begin(), records.end(), detail::record_order);
    std::string out;
    for (std::size_t i = 0; i < csv_columns().size(); ++i) out += (i ? "," : "") + csv_columns()[i];
    out += "\n";
    for (const ExperimentRecord& r : records) {
        const std::vector<std::string> f{r.run_id,
                                         r.phase,
                                         r.source_model,
                                         std::to_string(r.width),
                                         r.norm,
                                         format_real(r.epsilon),
                                         r.mode,
                                         r.dataset,
                                         r.dataset_hash,
                                         std::to_string(r.resolution),
                                         format_real(r.lr),
                                         std::to_string(r.seed),
                                         format_real(r.metric),
                                         r.metric_kind,
                                         format_real(r.source_accuracy),
                                         format_real(r.seconds),
                                         r.checkpoint_hash};
        for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + detail::csv_field(f[i]);
        out += "\n";
    }
    return out;
}

inline std::vector<ExperimentRecord> parse_records_csv(std::string_view csv) {
    std::vector<ExperimentRecord> out;
    std::size_t pos = 0, line_no = 0;
    while (pos < csv.size()) {
        std::size_t end = csv.find('\n', pos);
        if (end == std::string_view::npos) end = csv.size();
        const std::string_view line = csv.substr(pos, end - pos);
        pos = end + 1;
        if (line_no++ == 0 || line.empty()) continue;
        const std::vector<std::string> f = detail::csv_split(line);
        if (f.size() != csv_columns().size()) {
            throw LoadError("csv line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
        }
        ExperimentRecord r;
        r.run_id = f[0];
        r.phase = f[1];
        r.source_model = f[2];
        r.width = std::stoull(f[3]);
        r.norm = f[4];
        r.epsilon = parse_real(f[5]);
        r.mode = f[6];
        r.dataset = f[7];
        r.dataset_hash = f[8];
        r.resolution = std::stoull(f[9]);
        r.lr = parse_real(f[10]);
        r.seed = std::stoull(f[11]);
        r.metric = parse_real(f[12]);
        r.metric_kind = f[13];
        r.source_accuracy = parse_real(f[14]);
        r.seconds = parse_real(f[15]);
        r.checkpoint_hash = f[16];
        out.push_back(std::move(r));
    }
    return out;
}

/// Markdown summary of a record set. Depends only on the records (not on
/// their order or on wall-clock fields), so regeneration is byte-identical.
inline std::string report_markdown(const std::vector<ExperimentRecord>& records) {
    using detail::fixed4;
    using detail::sig4;
    std::ostringstream md;
    md << "# Transfer report\n\n";
    md << "Hyperparameter search spans backbone width and ε only; the architecture family is fixed. "
          "ε* is chosen on selection seeds and reported on disjoint evaluation seeds.\n";

    // Robust vs standard on evaluation seeds.
    struct Cell {
        std::map<double, TrialSet> by_eps;
        std::string metric_kind;
    };
    std::map<std::pair<std::string, std::string>, std::map<std::tuple<std::size_t, std::string, std::size_t>, Cell>>
        eval;
    for (const ExperimentRecord& r : records) {
        if (r.phase != "evaluation") continue;
        Cell& c = eval[{r.dataset, r.mode}][{r.width, r.norm, r.resolution}];
        c.metric_kind = r.metric_kind;
        TrialSet& t = c.by_eps[r.epsilon];
        t.label = "eps=" + format_real(r.epsilon);
        t.observations.push_back(r.metric);
    }
    // Sort observations so float summation order does not depend on record order.
    for (auto& [k, rows] : eval)
        for (auto& [rk, cell] : rows)
            for (auto& [e, t] : cell.by_eps) std::sort(t.observations.begin(), t.observations.end());

    md << "\n## Robust vs standard (evaluation seeds)\n";
    if (eval.empty()) md << "\nNo evaluation records.\n";
    for (const auto& [key, rows] : eval) {
        md << "\n### " << key.first << " / " << key.second << "\n\n";
        md << "| width | norm | resolution | metric | standard (ε=0) | robust ε* | robust | gap | t | df | p |\n";
        md << "|---|---|---|---|---|---|---|---|---|---|---|\n";
        for (const auto& [rk, cell] : rows) {
            const auto& [width, norm, resolution] = rk;
            const auto std_it = cell.by_eps.find(0.0);
            auto rob_it = std::prev(cell.by_eps.end());
            if (cell.by_eps.size() > 1 && rob_it->first == 0.0) rob_it = cell.by_eps.begin();
            md << "| " << width << " | " << norm << " | " << detail::resolution_label(resolution) << " | "
               << cell.metric_kind << " | ";
            if (std_it == cell.by_eps.end()) {
                md << "n/a | " << format_real(rob_it->first) << " | " << detail::mean_std(rob_it->second)
                   << " | n/a | n/a | n/a | n/a |\n";
                continue;
            }
            const TrialSet& standard = std_it->second;
            const TrialSet& robust = rob_it->second;
            std::string s = detail::mean_std(standard), r = detail::mean_std(robust);
            std::string t = "n/a", df = "n/a", p = "n/a";
            Bold bold = Bold::Both;
            try {
                const WelchResult w = welch_t_test(robust, standard);
                t = sig4(w.t);
                df = sig4(w.df);
                p = sig4(w.p);
                bold = w.significant_at_95 ? (robust.mean() > standard.mean() ? Bold::A : Bold::B) : Bold::Both;
            } catch (const ContractError&) {
            }
            if (bold != Bold::B) r = "**" + r + "**";
            if (bold != Bold::A) s = "**" + s + "**";
            char gap[32];
            std::snprintf(gap, sizeof gap, "%+.4f", robust.mean() - standard.mean());
            md << s << " | " << format_real(rob_it->first) << " | " << r << " | " << gap << " | " << t << " | " << df
               << " | " << p << " |\n";
        }
    }

    // Selection sweep: one row per (dataset, mode, width, resolution, ε).
    std::map<std::tuple<std::string, std::string, std::size_t, std::string, std::size_t, double>, TrialSet> sel;
    for (const ExperimentRecord& r : records) {
        if (r.phase != "selection") continue;
        sel[{r.dataset, r.mode, r.width, r.norm, r.resolution, r.epsilon}].observations.push_back(r.metric);
    }
    for (auto& [k, t] : sel) std::sort(t.observations.begin(), t.observations.end());
    md << "\n## Selection sweep (width × ε)\n\n";
    md << "| dataset | mode | width | norm | resolution | ε | mean | std | n |\n";
    md << "|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& [k, t] : sel) {
        const auto& [dataset, mode, width, norm, resolution, eps] = k;
        const Aggregate a = aggregate(t);
        md << "| " << dataset << " | " << mode << " | " << width << " | " << norm << " | "
           << detail::resolution_label(resolution) << " | " << format_real(eps) << " | " << fixed4(a.mean) << " | "
           << (a.std ? fixed4(*a.std) : std::string("n/a")) << " | " << a.count << " |\n";
    }

    // Native vs coarsened curves, when both exist.
    std::set<std::size_t> resolutions;
    for (const auto& [k, t] : sel) resolutions.insert(std::get<4>(k));
    if (resolutions.size() > 1 && resolutions.count(0)) {
        md << "\n## Granularity (native vs coarsened, selection seeds)\n\n";
        md << "| dataset | mode | width | ε |";
        for (std::size_t r : resolutions) md << " " << detail::resolution_label(r) << " |";
        md << "\n|---|---|---|---|";
        for (std::size_t i = 0; i < resolutions.size(); ++i) md << "---|";
        md << "\n";
        std::set<std::tuple<std::string, std::string, std::size_t, std::string, double>> rows;
        for (const auto& [k, t] : sel) rows.insert({std::get<0>(k), std::get<1>(k), std::get<2>(k), std::get<3>(k), std::get<5>(k)});
        for (const auto& [dataset, mode, width, norm, eps] : rows) {
            md << "| " << dataset << " | " << mode << " | " << width << " | " << format_real(eps) << " |";
            for (std::size_t r : resolutions) {
                const auto it = sel.find({dataset, mode, width, norm, r, eps});
                md << " " << (it == sel.end() ? std::string("n/a") : fixed4(it->second.mean())) << " |";
            }
            md << "\n";
        }
    }

    // Source accuracy vs mean target metric across widths at fixed ε.
    std::map<std::tuple<std::string, std::string, std::size_t, double>, std::map<std::size_t, std::pair<double, TrialSet>>>
        by_width;
    for (const ExperimentRecord& r : records) {
        if (r.phase != "selection") continue;
        auto& slot = by_width[{r.mode, r.norm, r.resolution, r.epsilon}][r.width];
        slot.first = r.source_accuracy;
        slot.second.observations.push_back(r.metric);
    }
    bool header = false;
    for (auto& [k, widths] : by_width) {
        if (widths.size() < 3) continue;
        if (!header) {
            md << "\n## Source accuracy vs transfer metric across widths\n\n";
            md << "| mode | norm | resolution | ε | widths | R² |\n|---|---|---|---|---|---|\n";
            header = true;
        }
        std::vector<double> x, y;
        std::string names;
        for (auto& [w, slot] : widths) {
            std::sort(slot.second.observations.begin(), slot.second.observations.end());
            x.push_back(slot.first);
            y.push_back(slot.second.mean());
            names += (names.empty() ? "" : ",") + std::to_string(w);
        }
        std::string r2 = "n/a";
        try {
            r2 = fixed4(r_squared(x, y));
        } catch (const ContractError&) {
        }
        const auto& [mode, norm, resolution, eps] = k;
        md << "| " << mode << " | " << norm << " | " << detail::resolution_label(resolution) << " | " << format_real(eps)
           << " | " << names << " | " << r2 << " |\n";
    }
    return md.str();
}

struct ReportFiles {
    std::string csv;
    std::string markdown;
};

/// Fails with ReportError if any planned run has no record.
inline ReportFiles build_report(const RecordStore& store) {
    const std::vector<std::string> missing = store.missing();
    if (!missing.empty()) {
        std::string msg = std::to_string(missing.size()) + " planned run(s) have no record:";
        for (const std::string& id : missing) msg += " " + id;
        throw ReportError(msg);
    }
    if (store.records().empty()) throw ReportError("record store is empty");
    return {records_csv(store.records()), report_markdown(store.records())};
}

inline ReportFiles write_report(const fs::path& records_path, const fs::path& out_dir) {
    if (!fs::exists(records_path)) throw MissingArtifact("record store " + records_path.string() + " not found");
    const RecordStore store(records_path);
    ReportFiles files = build_report(store);
    write_file(out_dir / "records.csv", files.csv);
    write_file(out_dir / "report.md", files.markdown);
    return files;
}

}  // namespace rtl
