#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include <unistd.h>

#include "rtl/harness.hpp"

using namespace rtl;
namespace fs = std::filesystem;

namespace {

class TempDir {
public:
    TempDir() {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        path_ = fs::temp_directory_path() /
                ("rtl_" + std::string(info->test_suite_name()) + "_" + info->name() + "_" + std::to_string(::getpid()));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~TempDir() { fs::remove_all(path_); }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

ModelConfig tiny_model(std::size_t width, std::uint64_t seed) {
    ModelConfig c;
    c.input_channels = 3;
    c.input_size = 8;
    c.base_channels = 2;
    c.width_multiplier = width;
    c.num_blocks = 2;
    c.num_classes = 4;
    c.seed = seed;
    return c;
}

/// Untrained checkpoints for every (width, ε) plus ε=0, registered under root.
Registry write_checkpoints(const fs::path& root, const std::vector<std::size_t>& widths,
                           const std::vector<double>& epsilons, Norm norm = Norm::L2) {
    std::vector<double> all = epsilons;
    if (std::find(all.begin(), all.end(), 0.0) == all.end()) all.push_back(0.0);
    Registry reg;
    std::uint64_t seed = 1;
    for (std::size_t w : widths)
        for (double eps : all) {
            RegistryEntry e;
            e.id = model_id(w, norm, eps);
            e.width = w;
            e.norm = to_string(norm);
            e.epsilon = eps;
            e.path = "ckpt/" + e.id + ".ckpt";
            e.source_accuracy = 0.5 + 0.1 * static_cast<double>(w) - eps / 10.0;
            const std::string bytes = checkpoint_save(build(tiny_model(w, seed++)));
            e.hash = hex64(fnv1a(bytes));
            write_file(root / e.path, bytes);
            reg.add(e);
        }
    reg.save(root / "registry.json");
    return reg;
}

DatasetSource blob_source(const std::string& name, std::uint64_t seed) {
    SyntheticSpec s;
    s.name = name;
    s.class_count = 2;
    s.n_per_class = 8;
    s.channels = 3;
    s.size = 8;
    s.margin = 2.0;
    s.sigma = 0.2;
    s.template_resolution = 4;
    s.seed = seed;
    return {name, s, ""};
}

SweepPlan tiny_plan(std::vector<double> epsilons) {
    SweepPlan p;
    p.epsilons = std::move(epsilons);
    p.selection_seeds = {0, 1};
    p.evaluation_seeds = {10, 11};
    p.datasets = {blob_source("alpha", 1)};
    p.transfer.train = TrainConfig::transfer(0.01).scaled(2);
    p.transfer.train.batch_size = 8;
    p.transfer.lr_grid = {0.01};
    p.transfer.augment = false;
    p.transfer.test_resize_crop = false;
    return p;
}

ExperimentRecord record(const std::string& phase, double eps, std::uint64_t seed, double metric,
                        const std::string& dataset = "d", const std::string& mode = "fixed_feature",
                        std::size_t width = 1) {
    ExperimentRecord r;
    r.phase = phase;
    r.source_model = model_id(width, Norm::L2, eps);
    r.width = width;
    r.epsilon = eps;
    r.mode = mode;
    r.dataset = dataset;
    r.dataset_hash = "00";
    r.seed = seed;
    r.metric = metric;
    r.lr = 0.01;
    r.run_id = make_run_id(r);
    return r;
}

std::vector<ExperimentRecord> without_timing(std::vector<ExperimentRecord> records) {
    for (ExperimentRecord& r : records) r.seconds = 0.0;
    return records;
}

std::size_t count_lines_starting(const std::string& text, const std::string& section, const std::string& prefix) {
    const std::size_t begin = text.find(section);
    if (begin == std::string::npos) return 0;
    std::size_t end = text.find("\n## ", begin + 1);
    if (end == std::string::npos) end = text.size();
    std::istringstream in(text.substr(begin, end - begin));
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += line.rfind(prefix, 0) == 0;
    return n;
}

}  // namespace

TEST(SelectEpsilon, MatchesBruteForceArgmax) {
    std::mt19937_64 rng(1);
    const std::vector<double> grid{0, 0.01, 0.05, 0.25, 0.5, 1};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<ExperimentRecord> records;
        for (double eps : grid)
            for (std::uint64_t seed = 0; seed < 3; ++seed) {
                // Coarse metric values make exact ties common.
                records.push_back(record("selection", eps, seed, std::floor(u(rng) * 4) / 4));
                records.push_back(record("evaluation", eps, seed + 100, 2.0 + u(rng)));
            }
        records.push_back(record("selection", 0.5, 0, 5.0, "other"));
        std::shuffle(records.begin(), records.end(), rng);

        double best = 0, best_mean = -1;
        for (double eps : grid) {
            double sum = 0;
            int n = 0;
            for (const ExperimentRecord& r : records)
                if (r.phase == "selection" && r.dataset == "d" && r.epsilon == eps) sum += r.metric, ++n;
            if (sum / n > best_mean) best_mean = sum / n, best = eps;
        }
        EXPECT_EQ(select_epsilon(records, {"d", "fixed_feature", 1, "l2", 0}), best);
    }
}

TEST(SelectEpsilon, TieGoesToSmallerEpsilon) {
    const std::vector<ExperimentRecord> records{record("selection", 0.5, 0, 0.8), record("selection", 0.25, 0, 0.8),
                                                record("selection", 0.5, 1, 0.6), record("selection", 0.25, 1, 0.6),
                                                record("selection", 0.0, 0, 0.1)};
    EXPECT_EQ(select_epsilon(records, {"d", "fixed_feature", 1, "l2", 0}), 0.25);
}

TEST(SelectEpsilon, EvaluationRecordsIgnored) {
    const std::vector<ExperimentRecord> only_eval{record("evaluation", 0.5, 0, 0.9)};
    EXPECT_THROW(select_epsilon(only_eval, {"d", "fixed_feature", 1, "l2", 0}), ContractError);
}

TEST(SweepPlan, Validation) {
    SweepPlan p = tiny_plan({0.25});
    EXPECT_NO_THROW(p.validate());
    p.evaluation_seeds = {1, 5};
    EXPECT_THROW(p.validate(), ConfigError);
    p = tiny_plan({});
    EXPECT_THROW(p.validate(), ConfigError);
    p = tiny_plan({0.25});
    p.datasets.push_back(p.datasets[0]);
    EXPECT_THROW(p.validate(), ConfigError);
}

TEST(SweepPlan, DefaultGrids) {
    EXPECT_EQ(SweepPlan::default_epsilons(Norm::L2), (std::vector<double>{0, 0.01, 0.03, 0.05, 0.1, 0.25, 0.5, 1, 3, 5}));
    const std::vector<double> linf = SweepPlan::default_epsilons(Norm::Linf);
    ASSERT_EQ(linf.size(), 5u);
    EXPECT_EQ(linf.front(), 0.5 / 255);
    EXPECT_EQ(linf.back(), 8.0 / 255);
}

TEST(SweepPlan, JsonRoundTrip) {
    SweepPlan p = tiny_plan({0.1, 0.5});
    p.norm = Norm::Linf;
    p.widths = {1, 2};
    p.granularity_low = 4;
    const nlohmann::json j = p;
    const SweepPlan back = j.get<SweepPlan>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(back.epsilons, p.epsilons);
    EXPECT_EQ(back.granularity_low, std::optional<std::size_t>(4));
}

TEST(RunSweep, OverlappingSeedsRejectedBeforeTraining) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.25});
    SweepPlan p = tiny_plan({0.25});
    p.evaluation_seeds = {0, 10};
    RecordStore store;
    EXPECT_THROW(run_sweep(p, reg, store, dir.path()), ConfigError);
    EXPECT_TRUE(store.planned().empty());
}

TEST(RunSweep, MissingCheckpointFailsBeforeTraining) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.25});
    fs::remove(dir.path() / "ckpt" / (model_id(1, Norm::L2, 0.25) + ".ckpt"));
    SweepPlan p = tiny_plan({0.25, 0.5});
    RecordStore store(dir.path() / "records.jsonl");
    try {
        run_sweep(p, reg, store, dir.path());
        FAIL() << "expected MissingArtifact";
    } catch (const MissingArtifact& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("eps 0.5"), std::string::npos);
        EXPECT_NE(msg.find(model_id(1, Norm::L2, 0.25)), std::string::npos);
    }
    EXPECT_TRUE(store.records().empty());
    EXPECT_FALSE(fs::exists(dir.path() / "records.jsonl"));
}

TEST(RunSweep, TamperedCheckpointDetected) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.25});
    const fs::path ckpt = dir.path() / "ckpt" / (model_id(1, Norm::L2, 0.25) + ".ckpt");
    std::string bytes = read_file(ckpt);
    bytes[bytes.size() / 2] ^= 1;
    write_file(ckpt, bytes);
    RecordStore store;
    EXPECT_THROW(run_sweep(tiny_plan({0.25}), reg, store, dir.path()), CorruptCheckpoint);
}

TEST(RunSweep, SingleEpsilonStillRunsEvaluation) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.25});
    SweepPlan p = tiny_plan({0.25});
    p.modes = {TransferMode::FixedFeature};
    RecordStore store;
    const std::vector<ExperimentRecord> out = run_sweep(p, reg, store, dir.path());
    std::size_t selection = 0, robust_eval = 0, standard_eval = 0;
    for (const ExperimentRecord& r : out) {
        if (r.phase == "selection") {
            ++selection;
            EXPECT_EQ(r.epsilon, 0.25);
        } else {
            (r.epsilon == 0.0 ? standard_eval : robust_eval) += 1;
            EXPECT_TRUE(r.seed == 10 || r.seed == 11);
        }
    }
    EXPECT_EQ(selection, 2u);
    EXPECT_EQ(robust_eval, 2u);
    EXPECT_EQ(standard_eval, 2u);
    EXPECT_TRUE(store.missing().empty());
}

TEST(RunSweep, EvaluationUsesSelectedEpsilonAndResumes) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.1, 0.5});
    SweepPlan p = tiny_plan({0.0, 0.1, 0.5});
    p.datasets.push_back(blob_source("beta", 2));
    p.workers = 2;
    const fs::path records = dir.path() / "records.jsonl";
    std::vector<ExperimentRecord> first;
    {
        RecordStore store(records);
        first = run_sweep(p, reg, store, dir.path());
    }
    const auto selection = std::count_if(first.begin(), first.end(),
                                         [](const ExperimentRecord& r) { return r.phase == "selection"; });
    EXPECT_EQ(selection, 2 * 2 * 3 * 2);
    std::map<std::pair<std::string, std::string>, std::set<double>> evaluated;
    for (const ExperimentRecord& r : first)
        if (r.phase == "evaluation") evaluated[{r.dataset, r.mode}].insert(r.epsilon);
    ASSERT_EQ(evaluated.size(), 4u);
    std::size_t evaluation_count = 0;
    for (const auto& [key, eps] : evaluated) {
        const double star = select_epsilon(first, {key.first, key.second, 1, "l2", 0});
        std::set<double> expected{0.0, star};
        EXPECT_EQ(eps, expected);
        evaluation_count += 2 * expected.size();
    }
    EXPECT_EQ(first.size(), static_cast<std::size_t>(selection) + evaluation_count);
    const std::string before = read_file(records);
    RecordStore reopened(records);
    // Every run is found in the store, so nothing is retrained or appended.
    const std::vector<ExperimentRecord> again = run_sweep(p, reg, reopened, dir.path());
    EXPECT_EQ(again, first);
    EXPECT_EQ(read_file(records), before);
}

TEST(WidthSweep, SingleWidthIsPlainSweep) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.25});
    SweepPlan p = tiny_plan({0.0, 0.25});
    p.modes = {TransferMode::FullNetwork};
    RecordStore a, b;
    EXPECT_EQ(without_timing(width_sweep(p, reg, a, dir.path())), without_timing(run_sweep(p, reg, b, dir.path())));
}

TEST(WidthSweep, ReportCardinalityAndRegrouping) {
    TempDir dir;
    const std::vector<std::size_t> widths{1, 2, 4};
    const Registry reg = write_checkpoints(dir.path(), widths, {0.25});
    SweepPlan p = tiny_plan({0.0, 0.25});
    p.widths = widths;
    p.selection_seeds = {0};
    p.evaluation_seeds = {10};
    RecordStore store;
    const std::vector<ExperimentRecord> out = width_sweep(p, reg, store, dir.path());
    const std::string md = build_report(store).markdown;
    EXPECT_EQ(count_lines_starting(md, "## Selection sweep", "| alpha |"), widths.size() * 2 * 2 * 1);
    EXPECT_NE(md.find("## Source accuracy vs transfer metric across widths"), std::string::npos);

    std::map<std::size_t, std::vector<ExperimentRecord>> grouped;
    for (const ExperimentRecord& r : out) grouped[r.width].push_back(r);
    EXPECT_EQ(grouped.size(), widths.size());
    std::vector<ExperimentRecord> flat;
    for (const auto& [w, rs] : grouped) flat.insert(flat.end(), rs.begin(), rs.end());
    auto by_id = [](const ExperimentRecord& x, const ExperimentRecord& y) { return x.run_id < y.run_id; };
    std::vector<ExperimentRecord> original = out;
    std::sort(flat.begin(), flat.end(), by_id);
    std::sort(original.begin(), original.end(), by_id);
    EXPECT_EQ(flat, original);
}

TEST(Granularity, FullResolutionMatchesPlainSweep) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.25});
    SweepPlan p = tiny_plan({0.0, 0.25});
    p.modes = {TransferMode::FixedFeature};
    RecordStore plain_store, coarse_store;
    const std::vector<ExperimentRecord> plain = run_sweep(p, reg, plain_store, dir.path());
    const std::vector<ExperimentRecord> coarse = granularity_experiment(p, 8, reg, coarse_store, dir.path());
    ASSERT_EQ(plain.size(), coarse.size());
    for (std::size_t i = 0; i < plain.size(); ++i) {
        EXPECT_EQ(coarse[i].resolution, 8u);
        EXPECT_EQ(plain[i].resolution, 0u);
        EXPECT_EQ(coarse[i].metric, plain[i].metric);
        EXPECT_EQ(coarse[i].epsilon, plain[i].epsilon);
        EXPECT_EQ(coarse[i].seed, plain[i].seed);
        EXPECT_EQ(coarse[i].dataset_hash, plain[i].dataset_hash);
        EXPECT_NE(coarse[i].run_id, plain[i].run_id);
    }
}

TEST(Granularity, CoarseRunsTaggedAndPaired) {
    TempDir dir;
    const Registry reg = write_checkpoints(dir.path(), {1}, {0.25});
    SweepPlan p = tiny_plan({0.0, 0.25});
    p.modes = {TransferMode::FixedFeature, TransferMode::FullNetwork};
    RecordStore store;
    run_sweep(p, reg, store, dir.path());
    const std::vector<ExperimentRecord> coarse = granularity_experiment(p, 4, reg, store, dir.path());
    for (const ExperimentRecord& r : coarse) {
        EXPECT_EQ(r.resolution, 4u);
        EXPECT_EQ(r.mode, "fixed_feature");
    }
    const std::string md = build_report(store).markdown;
    EXPECT_NE(md.find("## Granularity"), std::string::npos);
    EXPECT_THROW(granularity_experiment(p, 3, reg, store, dir.path()), ConfigError);
}

TEST(Report, CsvRoundTrip) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<ExperimentRecord> records;
    for (int i = 0; i < 40; ++i) {
        ExperimentRecord r = record(i % 3 ? "selection" : "evaluation", std::vector<double>{0, 1.0 / 255, 0.25}[i % 3],
                                    static_cast<std::uint64_t>(i), u(rng), i % 2 ? "a,b" : "plain\"quoted\"");
        r.seconds = u(rng) * 100;
        r.source_accuracy = u(rng);
        r.run_id = make_run_id(r);
        records.push_back(r);
    }
    const std::string csv = records_csv(records);
    EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), records.size() + 1);
    std::vector<ExperimentRecord> back = parse_records_csv(csv);
    auto by_id = [](const ExperimentRecord& x, const ExperimentRecord& y) { return x.run_id < y.run_id; };
    std::sort(back.begin(), back.end(), by_id);
    std::sort(records.begin(), records.end(), by_id);
    EXPECT_EQ(back, records);
    EXPECT_THROW(parse_records_csv("header\n1,2,3\n"), LoadError);
}

TEST(Report, RegenerationIsByteIdentical) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.5, 0.9);
    std::vector<ExperimentRecord> records;
    for (double eps : {0.0, 0.25, 1.0})
        for (std::uint64_t seed : {0u, 1u, 2u}) records.push_back(record("selection", eps, seed, u(rng)));
    for (double eps : {0.0, 0.25})
        for (std::uint64_t seed : {10u, 11u, 12u}) records.push_back(record("evaluation", eps, seed, u(rng)));
    const std::string md = report_markdown(records);
    const std::string csv = records_csv(records);
    std::shuffle(records.begin(), records.end(), rng);
    for (ExperimentRecord& r : records) r.seconds += 1.0;
    EXPECT_EQ(report_markdown(records), md);
    RecordStore store;
    for (const ExperimentRecord& r : records) store.append(r);
    EXPECT_EQ(build_report(store).markdown, md);
    EXPECT_EQ(count_lines_starting(csv, "run_id", ""), records.size() + 1);
}

TEST(Report, IdenticalTrialSetsBothBold) {
    std::vector<ExperimentRecord> records;
    for (std::uint64_t seed : {10u, 11u, 12u}) {
        const double m = 0.7 + 0.01 * static_cast<double>(seed - 10);
        records.push_back(record("evaluation", 0.0, seed, m));
        records.push_back(record("evaluation", 0.25, seed, m));
    }
    const std::string md = report_markdown(records);
    EXPECT_NE(md.find("| **0.7100 ± 0.0100** | 0.25 | **0.7100 ± 0.0100** | +0.0000 |"), std::string::npos) << md;
}

TEST(Report, SeparatedTrialSetsBoldOnlyTheWinner) {
    std::vector<ExperimentRecord> records;
    for (std::uint64_t seed : {10u, 11u, 12u}) {
        const double d = 0.001 * static_cast<double>(seed - 10);
        records.push_back(record("evaluation", 0.0, seed, 0.60 + d));
        records.push_back(record("evaluation", 0.25, seed, 0.80 + d));
    }
    const std::string md = report_markdown(records);
    EXPECT_NE(md.find("| 0.6010 ± 0.0010 | 0.25 | **0.8010 ± 0.0010** |"), std::string::npos) << md;
}

TEST(Report, PublishedAccuracyRowsThroughRSquaredPath) {
    const std::vector<double> source{77.37, 77.32, 73.66, 65.26, 64.25, 60.97};
    const std::vector<double> target{97.84, 97.47, 96.08, 95.86, 95.82, 95.55};
    std::vector<ExperimentRecord> records;
    for (std::size_t i = 0; i < source.size(); ++i) {
        ExperimentRecord r = record("selection", 0.0, 0, target[i], "cifar", "fixed_feature", i + 1);
        r.source_accuracy = source[i];
        r.run_id = make_run_id(r);
        records.push_back(r);
    }
    const std::string md = report_markdown(records);
    const std::size_t at = md.find("| 1,2,3,4,5,6 | ");
    ASSERT_NE(at, std::string::npos) << md;
    const double r2 = std::stod(md.substr(at + 16, 6));
    EXPECT_NEAR(r2, 0.79, 0.01);
}

TEST(Report, MissingRunsListed) {
    RecordStore store;
    const ExperimentRecord done = record("selection", 0.0, 0, 0.5);
    store.plan({done.run_id, "feedface00000001", "feedface00000002"});
    store.append(done);
    try {
        build_report(store);
        FAIL();
    } catch (const ReportError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("feedface00000001"), std::string::npos);
        EXPECT_NE(msg.find("feedface00000002"), std::string::npos);
        EXPECT_EQ(msg.find(done.run_id), std::string::npos);
    }
    EXPECT_THROW(build_report(RecordStore{}), ReportError);
}

TEST(Report, WriteFilesFromStore) {
    TempDir dir;
    {
        RecordStore store(dir.path() / "records.jsonl");
        store.append(record("selection", 0.0, 0, 0.5));
        store.append(record("selection", 0.0, 1, 0.6));
    }
    const ReportFiles files = write_report(dir.path() / "records.jsonl", dir.path() / "out");
    EXPECT_EQ(read_file(dir.path() / "out" / "report.md"), files.markdown);
    EXPECT_EQ(read_file(dir.path() / "out" / "records.csv"), files.csv);
    EXPECT_THROW(write_report(dir.path() / "absent.jsonl", dir.path() / "out"), MissingArtifact);
}

TEST(RecordStore, PersistsAndRejectsDuplicates) {
    TempDir dir;
    const fs::path path = dir.path() / "r.jsonl";
    const ExperimentRecord a = record("selection", 0.0, 0, 0.5);
    const ExperimentRecord b = record("selection", 0.25, 0, 0.75);
    {
        RecordStore store(path);
        store.plan({a.run_id, b.run_id});
        store.append(a);
        EXPECT_THROW(store.append(a), StateError);
    }
    RecordStore reopened(path);
    ASSERT_EQ(reopened.records().size(), 1u);
    EXPECT_EQ(reopened.records()[0], a);
    EXPECT_EQ(reopened.missing(), std::vector<std::string>{b.run_id});
    reopened.append(b);
    EXPECT_TRUE(RecordStore(path).missing().empty());
    EXPECT_THROW(RecordStore(RecordStore::FromText{}, "{\"record\": 3}\n"), LoadError);
    EXPECT_THROW(RecordStore(RecordStore::FromText{}, "not json\n"), LoadError);
}

TEST(RunId, DependsOnEveryIdentityField) {
    const ExperimentRecord base = record("selection", 0.25, 0, 0.5);
    ExperimentRecord r = base;
    r.metric = 0.9;
    r.seconds = 12;
    EXPECT_EQ(make_run_id(r), base.run_id);
    for (int field = 0; field < 6; ++field) {
        r = base;
        switch (field) {
            case 0: r.seed = 1; break;
            case 1: r.epsilon = 0.5; break;
            case 2: r.mode = "full_network"; break;
            case 3: r.dataset_hash = "01"; break;
            case 4: r.resolution = 4; break;
            case 5: r.phase = "evaluation"; break;
        }
        EXPECT_NE(make_run_id(r), base.run_id) << field;
    }
}

TEST(Registry, StandardModelsMatchEitherNorm) {
    Registry reg;
    reg.add({"w1-std-eps0", 1, "l2", 0.0, "a.ckpt", 0.9, ""});
    reg.add({"w1-linf-eps0.5", 1, "linf", 0.5, "b.ckpt", 0.8, ""});
    EXPECT_NE(reg.find(1, Norm::Linf, 0.0), nullptr);
    EXPECT_NE(reg.find(1, Norm::L2, 0.0), nullptr);
    EXPECT_EQ(reg.find(1, Norm::L2, 0.5), nullptr);
    EXPECT_EQ(reg.find(2, Norm::Linf, 0.5), nullptr);
    reg.add({"w1-std-eps0", 1, "l2", 0.0, "c.ckpt", 0.9, ""});
    EXPECT_EQ(reg.models.size(), 2u);
    EXPECT_EQ(reg.find(1, Norm::L2, 0.0)->path, "c.ckpt");
}

TEST(Registry, MissingFile) {
    EXPECT_THROW(Registry::load("/nonexistent/registry.json"), MissingArtifact);
}

TEST(Pretrain, WritesCheckpointsAndRegistry) {
    TempDir dir;
    PretrainConfig c;
    c.source = blob_source("src", 3);
    c.model = tiny_model(1, 4);
    c.train = TrainConfig::pretraining().scaled(2);
    c.train.batch_size = 8;
    c.epsilons = {0.0, 0.5};
    const Registry reg = pretrain(c, dir.path());
    ASSERT_EQ(reg.models.size(), 2u);
    const Registry reloaded = Registry::load(dir.path() / "registry.json");
    ASSERT_EQ(reloaded.models.size(), 2u);
    for (const RegistryEntry& e : reloaded.models) {
        const std::string bytes = read_file(dir.path() / e.path);
        EXPECT_EQ(hex64(fnv1a(bytes)), e.hash);
        EXPECT_EQ(checkpoint_load(bytes).num_classes(), 2u);
        EXPECT_GE(e.source_accuracy, 0.0);
        EXPECT_LE(e.source_accuracy, 1.0);
        EXPECT_TRUE(fs::exists((dir.path() / e.path).replace_extension(".log.jsonl")));
    }
    EXPECT_EQ(reloaded.find(1, Norm::L2, 0.5)->id, "w1-l2-eps0.5");
}

TEST(Datasets, SourceJsonAndFiles) {
    TempDir dir;
    const DatasetSource synth = blob_source("gen", 7);
    const SplitDataset d = materialize(synth, dir.path());
    save_split(d, (dir.path() / "data" / "gen").string());
    EXPECT_TRUE(fs::exists(dir.path() / "data" / "gen.train.rtd"));
    const DatasetSource from_file = nlohmann::json{{"name", "gen"}, {"path", "data/gen"}}.get<DatasetSource>();
    EXPECT_EQ(split_hash(materialize(from_file, dir.path())), split_hash(d));
    const DatasetSource missing = nlohmann::json{{"name", "x"}, {"path", "data/none"}}.get<DatasetSource>();
    EXPECT_THROW(materialize(missing, dir.path()), MissingArtifact);
    EXPECT_THROW(coarsen(d, 3), ConfigError);
    EXPECT_EQ(split_hash(coarsen(d, 8)), split_hash(d));
}
