// rtl: command-line front end for pretraining, transfer sweeps and reports.
#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "rtl/rtl.hpp"

namespace {

using namespace rtl;

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kDivergence = 3, kMissing = 4 };

fs::path experiment_root(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("RTL_ROOT")) return env;
    return {};
}

int cmd_pretrain(const fs::path& root, const std::string& config_path) {
    PretrainConfig config;
    try {
        config = read_json_file(resolve_path(root, config_path)).get<PretrainConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(config_path + ": " + e.what());
    }
    const Registry registry = pretrain(config, root, &std::cerr);
    std::cout << nlohmann::json{{"models", registry.models}}.dump(2) << "\n";
    return kOk;
}

int cmd_transfer(const fs::path& root, const std::string& checkpoint, const std::string& dataset,
                 const std::string& mode_name, std::uint64_t seed, std::size_t epochs, const std::vector<double>& lrs,
                 bool no_augment, const std::string& records) {
    const TransferMode mode = transfer_mode_from_string(mode_name);
    const fs::path ckpt_path = resolve_path(root, checkpoint);
    const std::string bytes = read_file(ckpt_path);
    const Network net = checkpoint_load(bytes);
    const SplitDataset data = load_split(resolve_path(root, dataset).string());
    TransferConfig tc;
    if (epochs) tc.train = tc.train.scaled(epochs);
    if (!lrs.empty()) tc.lr_grid = lrs;
    tc.augment = !no_augment;
    tc.train.seed = seed;
    const TransferOutcome out = transfer(net, data, mode, tc, seed);

    ExperimentRecord r;
    r.phase = "adhoc";
    r.source_model = ckpt_path.stem().string();
    r.width = net.config().width_multiplier;
    r.mode = to_string(mode);
    r.dataset = data.train.name;
    r.dataset_hash = split_hash(data);
    r.lr = out.lr;
    r.seed = seed;
    r.metric = out.metric;
    r.metric_kind = to_string(data.test.metric_kind);
    r.seconds = out.log.seconds;
    r.checkpoint_hash = hex64(fnv1a(bytes));
    r.run_id = make_run_id(r);
    if (!records.empty()) {
        RecordStore store(resolve_path(root, records));
        if (!store.find(r.run_id)) store.append(r);
    }
    nlohmann::json j = r;
    nlohmann::json grid = nlohmann::json::array();
    for (const LrOutcome& g : out.grid) grid.push_back({{"lr", g.lr}, {"metric", g.metric}});
    j["lr_grid"] = grid;
    std::cout << j.dump(2) << "\n";
    return kOk;
}

int cmd_sweep(const fs::path& root, const std::string& plan_path) {
    const SweepPlan plan = load_plan(resolve_path(root, plan_path));
    const Registry registry = Registry::load(resolve_path(root, plan.registry));
    RecordStore store(resolve_path(root, plan.records));
    std::vector<ExperimentRecord> records = run_sweep(plan, registry, store, root, &std::cerr);
    if (plan.granularity_low) {
        const auto coarse = granularity_experiment(plan, *plan.granularity_low, registry, store, root, &std::cerr);
        records.insert(records.end(), coarse.begin(), coarse.end());
    }
    std::cout << records.size() << " records in " << store.path().string() << "\n";
    return kOk;
}

int cmd_report(const fs::path& root, const std::string& records, const std::string& out_dir) {
    const fs::path out = resolve_path(root, out_dir);
    write_report(resolve_path(root, records), out);
    std::cout << (out / "records.csv").string() << "\n" << (out / "report.md").string() << "\n";
    return kOk;
}

int cmd_dataset_gen(const fs::path& root, const std::string& spec_path, const std::string& out) {
    SyntheticSpec spec;
    try {
        spec = read_json_file(resolve_path(root, spec_path)).get<SyntheticSpec>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(spec_path + ": " + e.what());
    }
    const SplitDataset d = make_synthetic(spec);
    const std::string prefix = resolve_path(root, out).string();
    if (fs::path(prefix).has_parent_path()) fs::create_directories(fs::path(prefix).parent_path());
    save_split(d, prefix);
    std::cout << split_path(prefix, Split::Train) << " " << hex64(d.train.content_hash()) << "\n"
              << split_path(prefix, Split::Test) << " " << hex64(d.test.content_hash()) << "\n";
    return kOk;
}

int cmd_dataset_inspect(const fs::path& root, const std::string& path) {
    const fs::path p = resolve_path(root, path);
    if (!fs::exists(p)) throw MissingArtifact("dataset file " + p.string() + " not found");
    const Dataset d = load(p.string());
    std::map<int, std::size_t> counts;
    for (int y : d.labels) ++counts[y];
    nlohmann::json per_class = nlohmann::json::object();
    for (const auto& [c, n] : counts) per_class[std::to_string(c)] = n;
    std::cout << nlohmann::json{{"name", d.name},
                                {"split", to_string(d.split)},
                                {"shape", d.images.shape()},
                                {"class_count", d.class_count},
                                {"metric_kind", to_string(d.metric_kind)},
                                {"orientation_sensitive", d.orientation_sensitive},
                                {"per_class", per_class},
                                {"content_hash", hex64(d.content_hash())}}
                     .dump(2)
              << "\n";
    return kOk;
}

int cmd_attack(const fs::path& root, const std::string& checkpoint, double eps, const std::string& norm_name,
               const std::string& dataset, std::size_t steps) {
    const Norm norm = norm_from_string(norm_name);
    const Network net = load_checkpoint_file(resolve_path(root, checkpoint).string());
    const fs::path p = resolve_path(root, dataset);
    const Dataset data = fs::exists(p) ? load(p.string()) : load_split(p.string()).test;
    AttackSpec spec = AttackSpec::evaluation(norm, eps);
    if (steps) {
        spec.steps = steps;
        spec.step_size = 2.5 * eps / static_cast<double>(steps);
    }
    spec.validate();
    std::cout << nlohmann::json{{"dataset", data.name},
                                {"norm", to_string(norm)},
                                {"epsilon", eps},
                                {"epsilon_text", format_real(eps)},
                                {"steps", spec.steps},
                                {"clean_accuracy", evaluate(net, data)},
                                {"robust_accuracy", robust_accuracy(net, data, spec)}}
                     .dump(2)
              << "\n";
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"rtl: robust pretraining, transfer sweeps and reports"};
    app.require_subcommand(1);
    std::string root_flag;
    app.add_option("--root", root_flag, "experiment root (default: $RTL_ROOT or the working directory)");

    std::string config, checkpoint, dataset, mode, plan, records, out, spec, norm = "l2";
    std::uint64_t seed = 0;
    std::size_t epochs = 0, steps = 0;
    std::vector<double> lrs;
    bool no_augment = false;
    double eps = 0.0;

    auto* pretrain_cmd = app.add_subcommand("pretrain", "train source models for every (width, epsilon)");
    pretrain_cmd->add_option("--config", config, "pretrain config JSON")->required();

    auto* transfer_cmd = app.add_subcommand("transfer", "transfer one checkpoint to one dataset");
    transfer_cmd->add_option("--checkpoint", checkpoint)->required();
    transfer_cmd->add_option("--dataset", dataset, "dataset prefix (<prefix>.train.rtd, <prefix>.test.rtd)")->required();
    transfer_cmd->add_option("--mode", mode, "fixed_feature or full_network")->required();
    transfer_cmd->add_option("--seed", seed);
    transfer_cmd->add_option("--epochs", epochs, "compress the transfer schedule to this many epochs");
    transfer_cmd->add_option("--lr", lrs, "learning-rate grid");
    transfer_cmd->add_flag("--no-augment", no_augment);
    transfer_cmd->add_option("--records", records, "append the record to this store");

    auto* sweep_cmd = app.add_subcommand("sweep", "run an epsilon sweep plan");
    sweep_cmd->add_option("--plan", plan, "sweep plan JSON")->required();

    auto* report_cmd = app.add_subcommand("report", "write records.csv and report.md");
    report_cmd->add_option("--records", records)->required();
    report_cmd->add_option("--out", out)->required();

    auto* dataset_cmd = app.add_subcommand("dataset", "generate or inspect dataset files");
    dataset_cmd->require_subcommand(1);
    auto* gen_cmd = dataset_cmd->add_subcommand("gen", "generate a synthetic dataset");
    gen_cmd->add_option("--spec", spec, "synthetic spec JSON")->required();
    gen_cmd->add_option("--out", out, "output prefix")->required();
    auto* inspect_cmd = dataset_cmd->add_subcommand("inspect", "summarize a dataset file");
    inspect_cmd->add_option("path", dataset)->required();

    auto* attack_cmd = app.add_subcommand("attack", "robust accuracy of a checkpoint under PGD");
    attack_cmd->add_option("--checkpoint", checkpoint)->required();
    attack_cmd->add_option("--eps", eps)->required();
    attack_cmd->add_option("--norm", norm)->check(CLI::IsMember({"l2", "linf"}));
    attack_cmd->add_option("--dataset", dataset, "dataset file, or prefix (test split is used)")->required();
    attack_cmd->add_option("--steps", steps);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    const fs::path root = experiment_root(root_flag);
    try {
        if (*pretrain_cmd) return cmd_pretrain(root, config);
        if (*transfer_cmd) return cmd_transfer(root, checkpoint, dataset, mode, seed, epochs, lrs, no_augment, records);
        if (*sweep_cmd) return cmd_sweep(root, plan);
        if (*report_cmd) return cmd_report(root, records, out);
        if (*gen_cmd) return cmd_dataset_gen(root, spec, out);
        if (*inspect_cmd) return cmd_dataset_inspect(root, dataset);
        if (*attack_cmd) return cmd_attack(root, checkpoint, eps, norm, dataset, steps);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const DivergenceError& e) {
        std::cerr << "diverged: " << e.what() << "\n";
        return kDivergence;
    } catch (const MissingArtifact& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return kMissing;
    } catch (const CorruptCheckpoint& e) {
        std::cerr << "corrupt checkpoint: " << e.what() << "\n";
        return kMissing;
    } catch (const LoadError& e) {
        std::cerr << "unreadable artifact: " << e.what() << "\n";
        return kMissing;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kFailure;
}
