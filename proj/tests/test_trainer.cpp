#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "rtl/trainer.hpp"
#include "test_util.hpp"

using namespace rtl;

namespace {

SyntheticSpec single_pixel_spec() {
    SyntheticSpec s;
    s.kind = SyntheticKind::SinglePixel;
    s.name = "single_pixel";
    s.delta = 0.1;
    s.n_per_class = 200;
    s.channels = 1;
    s.size = 4;
    return s;
}

ModelConfig single_pixel_model() {
    ModelConfig c;
    c.input_channels = 1;
    c.input_size = 4;
    c.base_channels = 4;
    c.num_blocks = 1;
    c.num_classes = 2;
    c.seed = 3;
    return c;
}

TrainConfig quick_config(std::size_t epochs) {
    TrainConfig c;
    c.epochs = epochs;
    c.batch_size = 32;
    c.lr = 0.1;
    c.lr_drop_every = 1000;
    c.seed = 11;
    return c;
}

Dataset blob_data() {
    SyntheticSpec s;
    s.name = "blobs";
    s.class_count = 3;
    s.n_per_class = 20;
    s.channels = 3;
    s.size = 8;
    s.margin = 3.0;
    s.sigma = 0.1;
    s.seed = 4;
    return make_synthetic(s).train;
}

ModelConfig blob_model() {
    ModelConfig c;
    c.input_channels = 3;
    c.input_size = 8;
    c.num_classes = 3;
    c.seed = 5;
    return c;
}

std::vector<double> flat_parameters(Network& net) {
    std::vector<double> out;
    for (Tensor* p : net.parameters()) out.insert(out.end(), p->values().begin(), p->values().end());
    return out;
}

}  // namespace

TEST(LrSchedule, PretrainingPreset) {
    const TrainConfig c = TrainConfig::pretraining();
    EXPECT_EQ(c.batch_size, 512u);
    EXPECT_EQ(c.epochs, 90u);
    EXPECT_EQ(lr_at(c, 0), 0.1);
    EXPECT_EQ(lr_at(c, 29), 0.1);
    EXPECT_NEAR(lr_at(c, 30), 0.01, 1e-15);
    EXPECT_NEAR(lr_at(c, 60), 0.001, 1e-15);
    EXPECT_NEAR(lr_at(c, 89), 0.001, 1e-15);
    EXPECT_THROW(lr_at(c, 90), ContractError);
}

TEST(LrSchedule, TransferPreset) {
    const TrainConfig c = TrainConfig::transfer(0.01);
    EXPECT_EQ(c.epochs, 150u);
    EXPECT_EQ(c.batch_size, 64u);
    EXPECT_EQ(c.weight_decay, 5e-4);
    EXPECT_EQ(lr_at(c, 0), 0.01);
    EXPECT_NEAR(lr_at(c, 50), 0.001, 1e-16);
    EXPECT_NEAR(lr_at(c, 100), 0.0001, 1e-17);
}

TEST(LrSchedule, ScaledKeepsShape) {
    const TrainConfig c = TrainConfig::pretraining().scaled(9);
    EXPECT_EQ(c.lr_drop_every, 3u);
    EXPECT_EQ(lr_at(c, 2), 0.1);
    EXPECT_NEAR(lr_at(c, 3), 0.01, 1e-15);
}

TEST(SgdStep, VanillaStep) {
    std::vector<double> p{1.0}, g{0.5}, v{0.0};
    sgd_step(p, g, v, 0.1, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(p[0], 0.95);
}

TEST(SgdStep, ZeroGradientIsFixedPoint) {
    std::vector<double> p{1.5, -2.0}, g{0.0, 0.0}, v{0.0, 0.0};
    sgd_step(p, g, v, 0.1, 0.9, 0.0);
    EXPECT_EQ(p, (std::vector<double>{1.5, -2.0}));
}

TEST(SgdStep, MomentumTwoSteps) {
    const double lr = 0.05, g0 = 0.3;
    std::vector<double> p{2.0}, g{g0}, v{0.0};
    sgd_step(p, g, v, lr, 0.9, 0.0);
    sgd_step(p, g, v, lr, 0.9, 0.0);
    EXPECT_NEAR(2.0 - p[0], lr * g0 * 2.9, 1e-12);
}

TEST(SgdStep, WeightDecayShrinksGeometrically) {
    const double lr = 0.1, wd = 0.01;
    std::vector<double> p{3.0, -1.0}, g{0.0, 0.0}, v{0.0, 0.0};
    for (int step = 1; step <= 20; ++step) {
        sgd_step(p, g, v, lr, 0.0, wd);
        EXPECT_NEAR(p[0], 3.0 * std::pow(1.0 - lr * wd, step), 1e-13);
        EXPECT_NEAR(p[1], -1.0 * std::pow(1.0 - lr * wd, step), 1e-13);
    }
}

TEST(SgdStep, ShapeMismatch) {
    std::vector<double> p{1.0, 2.0}, g{1.0}, v{0.0, 0.0};
    EXPECT_THROW(sgd_step(p, g, v, 0.1, 0.9, 0.0), DimensionError);
}

TEST(SinglePixel, PerceptronSeparates) {
    // The separability claim itself, checked without the network.
    const Dataset d = make_synthetic(single_pixel_spec()).train;
    const std::size_t D = d.images.size() / d.size();
    std::vector<double> w(D, 0.0);
    double b = 0.0;
    bool clean = false;
    for (int pass = 0; pass < 1000 && !clean; ++pass) {
        clean = true;
        for (std::size_t i = 0; i < d.size(); ++i) {
            const double s = d.labels[i] == 1 ? 1.0 : -1.0;
            double z = b;
            for (std::size_t k = 0; k < D; ++k) z += w[k] * d.images[i * D + k];
            if (s * z <= 0.0) {
                clean = false;
                for (std::size_t k = 0; k < D; ++k) w[k] += s * d.images[i * D + k];
                b += s;
            }
        }
    }
    EXPECT_TRUE(clean);
}

TEST(SinglePixel, StandardTrainingFitsWithin30Epochs) {
    const Dataset d = make_synthetic(single_pixel_spec()).train;
    ASSERT_EQ(d.size(), 200u);
    const TrainResult r = train(build(single_pixel_model()), d, quick_config(30));
    ASSERT_EQ(r.log.epochs.size(), 30u);
    EXPECT_EQ(r.log.last().train_accuracy, 1.0);
    EXPECT_EQ(top1(predict_labels(r.net, d.images), d.labels), 1.0);
}

TEST(SinglePixel, AdversarialTrainingCannotBeRobust) {
    const Dataset d = make_synthetic(single_pixel_spec()).train;
    TrainConfig c = quick_config(20);
    c.attack = AttackSpec::training(Norm::L2, 0.25);
    const TrainResult r = train(build(single_pixel_model()), d, c);
    ASSERT_TRUE(r.log.last().robust_train_accuracy.has_value());
    // The two class images are 0.1 apart, so both balls contain the midpoint.
    EXPECT_LE(exhaustive_robust_accuracy(r.net, d, Norm::L2, 0.25), 0.55);
}

TEST(Train, ZeroEpsilonAttackMatchesStandardBitwise) {
    const Dataset d = blob_data();
    TrainConfig standard = quick_config(3);
    TrainConfig adversarial = standard;
    adversarial.attack = AttackSpec::training(Norm::L2, 0.0);
    TrainResult a = train(build(blob_model()), d, standard);
    TrainResult b = train(build(blob_model()), d, adversarial);
    EXPECT_EQ(flat_parameters(a.net), flat_parameters(b.net));
    EXPECT_EQ(checkpoint_save(a.net), checkpoint_save(b.net));
    for (std::size_t e = 0; e < 3; ++e) EXPECT_EQ(a.log.epochs[e].train_loss, b.log.epochs[e].train_loss);
}

TEST(Train, DeterministicAndSeedSensitive) {
    const Dataset d = blob_data();
    TrainConfig c = quick_config(2);
    c.attack = AttackSpec::training(Norm::Linf, 0.05);
    c.augment = AugmentPolicy::standard(false);
    TrainResult a = train(build(blob_model()), d, c);
    TrainResult b = train(build(blob_model()), d, c);
    EXPECT_EQ(checkpoint_save(a.net), checkpoint_save(b.net));
    c.seed = 12;
    TrainResult other = train(build(blob_model()), d, c);
    EXPECT_NE(checkpoint_save(a.net), checkpoint_save(other.net));
}

TEST(Train, LogFollowsSchedule) {
    const Dataset d = blob_data();
    TrainConfig c = quick_config(4);
    c.lr_drop_every = 2;
    const TrainResult r = train(build(blob_model()), d, c);
    ASSERT_EQ(r.log.epochs.size(), 4u);
    for (std::size_t e = 0; e < 4; ++e) {
        EXPECT_EQ(r.log.epochs[e].epoch, e);
        EXPECT_EQ(r.log.epochs[e].lr, lr_at(c, e));
        EXPECT_FALSE(r.log.epochs[e].robust_train_accuracy.has_value());
    }
    EXPECT_EQ(r.net.mode(), NetMode::Eval);
    const std::string jsonl = r.log.to_jsonl();
    EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'), 4);
}

TEST(Train, InputDatasetUntouched) {
    const Dataset d = blob_data();
    const std::string before = d.serialize();
    TrainConfig c = quick_config(1);
    c.augment = AugmentPolicy::standard(false);
    c.attack = AttackSpec::training(Norm::L2, 0.5);
    (void)train(build(blob_model()), d, c);
    EXPECT_EQ(d.serialize(), before);
}

TEST(Train, FrozenBackboneOnlyMovesHead) {
    const Dataset d = blob_data();
    const Network net = build(blob_model());
    TrainConfig c = quick_config(2);
    c.freeze_backbone = true;
    const TrainResult r = train(net, d, c);
    EXPECT_NE(r.net.head_hash(), net.head_hash());
    for (std::size_t b = 0; b < net.blocks().size(); ++b)
        EXPECT_TRUE(r.net.blocks()[b].weight.bit_equal(net.blocks()[b].weight));
}

TEST(Train, DivergenceCarriesPosition) {
    const Dataset d = blob_data();
    TrainConfig c = quick_config(5);
    c.lr = 1e200;
    try {
        (void)train(build(blob_model()), d, c);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_LT(e.epoch(), 5u);
        EXPECT_NE(std::string(e.what()).find("batch"), std::string::npos);
    }
}

TEST(Train, Contracts) {
    const Dataset d = blob_data();
    EXPECT_THROW(train(build(blob_model()), Dataset{}, quick_config(1)), ContractError);
    ModelConfig wrong = blob_model();
    wrong.input_size = 16;
    EXPECT_THROW(train(build(wrong), d, quick_config(1)), DimensionError);
    ModelConfig narrow = blob_model();
    narrow.num_classes = 2;
    EXPECT_THROW(train(build(narrow), d, quick_config(1)), DimensionError);
    TrainConfig bad = quick_config(1);
    bad.batch_size = 0;
    EXPECT_THROW(train(build(blob_model()), d, bad), ConfigError);
}
