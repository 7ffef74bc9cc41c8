#include "mtlcnn/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace mtlcnn;

namespace {

TrunkConfig tiny_trunk() {
    TrunkConfig t;
    t.image_size = 16;
    t.dropout_ratio = 0.4;
    t.blocks = {{4, 1, Pool::Max, 2, 2}, {8, 1, Pool::Avg, 8, 8}};
    return t;
}

Dataset toy_dataset(int ids = 3, std::vector<double> poses = {0, 30}, int illum = 1, int expr = 1,
                    double frac = 0.67) {
    FactorSpec spec;
    spec.num_identities = ids;
    spec.pose_bins = std::move(poses);
    spec.illum_bins = illum;
    spec.expr_bins = expr;
    spec.image_size = 16;
    spec.noise_std = 0.01;
    spec.seed = 3;
    return generate_splits(spec, frac);
}

TrainConfig toy_config(Mode mode, int epochs, int batch = 2, std::uint64_t seed = 1) {
    TrainConfig cfg;
    cfg.mode = mode;
    cfg.epochs = epochs;
    cfg.batch_size = batch;
    cfg.seed = seed;
    cfg.trunk = tiny_trunk();
    return cfg;
}

std::vector<NamedParam> single_param(Tensor t) { return {{"w", std::move(t), false, true}}; }

TEST(Sgd, PlainGradientDescentWhenDegenerate) {
    Tensor w = Tensor::parameter({2}, {1.0, 2.0});
    w.node->grad = {0.5, -1.0};
    auto params = single_param(w);
    auto st = SgdState::for_params(params);
    sgd_step(params, st, 0.1, 0.0, 0.0);
    EXPECT_DOUBLE_EQ(w.data()[0], 1.0 - 0.1 * 0.5);
    EXPECT_DOUBLE_EQ(w.data()[1], 2.0 + 0.1);
}

TEST(Sgd, ZeroGradZeroVelocityIsNoOp) {
    Tensor w = Tensor::parameter({3}, {1, -2, 3});
    auto params = single_param(w);
    auto st = SgdState::for_params(params);
    sgd_step(params, st, 0.5, 0.9, 0.0);
    EXPECT_EQ(w.data(), (std::vector<double>{1, -2, 3}));
}

TEST(Sgd, MomentumMatchesScalarRecurrence) {
    const double lr = 0.1, momentum = 0.9, target = 3.0;
    Tensor w = Tensor::parameter({1}, {0.0});
    auto params = single_param(w);
    auto st = SgdState::for_params(params);

    double ref_w = 0.0, ref_v = 0.0;
    for (int step = 0; step < 5; ++step) {
        w.node->grad = {w.data()[0] - target};  // d/dw of 0.5 (w - target)^2
        sgd_step(params, st, lr, momentum, 0.0);
        const double g = ref_w - target;
        ref_v = momentum * ref_v - lr * g;
        ref_w += ref_v;
        EXPECT_NEAR(w.data()[0], ref_w, 1e-12) << "step " << step;
    }
}

TEST(Sgd, WeightDecaySkipsExemptParameters) {
    Tensor decayed = Tensor::parameter({2}, {4.0, -2.0});
    Tensor exempt = Tensor::parameter({2}, {4.0, -2.0});
    std::vector<NamedParam> params = {{"w", decayed, false, true}, {"b", exempt, true, true}};
    auto st = SgdState::for_params(params);
    sgd_step(params, st, 0.1, 0.0, 0.01);  // zero gradients: only decay can move values
    EXPECT_DOUBLE_EQ(decayed.data()[0], 4.0 * (1.0 - 0.1 * 0.01));
    EXPECT_DOUBLE_EQ(decayed.data()[1], -2.0 * (1.0 - 0.1 * 0.01));
    EXPECT_EQ(exempt.data(), (std::vector<double>{4.0, -2.0}));
}

TEST(Schedule, DropArithmetic) {
    TrainConfig cfg;
    cfg.lr = 0.01;
    cfg.lr_drops = {{10, 0.1}};
    EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 9), 0.01);
    EXPECT_DOUBLE_EQ(lr_at_epoch(cfg, 11), 0.001);

    TrainConfig full;
    EXPECT_DOUBLE_EQ(lr_at_epoch(full, 1), 0.01);
    EXPECT_DOUBLE_EQ(lr_at_epoch(full, 10), 0.001);
    EXPECT_DOUBLE_EQ(lr_at_epoch(full, 15), 0.0001);
    EXPECT_DOUBLE_EQ(lr_at_epoch(full, 20), 0.00001);
}

TEST(Schedule, ConfigValidation) {
    TrainConfig cfg;
    cfg.batch_size = 1;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.lr_drops = {{5, 1.5}};
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    cfg = TrainConfig{};
    cfg.momentum = 1.0;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Train, DatasetModeMismatchFailsBeforeTraining) {
    auto data = toy_dataset(3, {0}, 2, 1);  // single pose bin
    auto cfg = toy_config(Mode::Multi, 1);
    EXPECT_THROW(train(data, cfg), std::invalid_argument);
}

TEST(Train, DeterministicGivenSeed) {
    auto data = toy_dataset(4, {-60, 0, 60}, 2, 1, 0.75);
    auto cfg = toy_config(Mode::PoseDirected, 2, 4, 17);
    auto a = train(data, cfg);
    auto b = train(data, cfg);
    auto pa = a.net.named_parameters();
    auto pb = b.net.named_parameters();
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i)
        EXPECT_EQ(pa[i].tensor.data(), pb[i].tensor.data()) << pa[i].name;
    ASSERT_EQ(a.logs.size(), b.logs.size());
    for (std::size_t i = 0; i < a.logs.size(); ++i) {
        EXPECT_EQ(a.logs[i].loss_total, b.logs[i].loss_total);
        EXPECT_EQ(a.logs[i].mu_s, b.logs[i].mu_s);
        EXPECT_EQ(a.logs[i].mu_m, b.logs[i].mu_m);
    }
}

TEST(Train, SeparableToyFitsAndLossDrops) {
    auto data = toy_dataset();  // 2 training identities, 2 poses
    auto cfg = toy_config(Mode::Single, 20, 4);
    auto result = train(data, cfg);
    ASSERT_EQ(result.logs.size(), 20u);
    EXPECT_LT(result.logs.back().loss_total, result.logs.front().loss_total);
    EXPECT_LT(result.logs.back().loss_total, 0.5);  // a separable toy must fit
}

TEST(Train, MuLogsSumToOneEveryEpoch) {
    auto data = toy_dataset(4, {-60, 0, 60}, 2, 2, 0.75);
    auto cfg = toy_config(Mode::PoseDirected, 3, 4);
    auto result = train(data, cfg);
    for (const auto& log : result.logs) {
        ASSERT_TRUE(log.has_mu_s);
        ASSERT_TRUE(log.has_mu_m);
        EXPECT_NEAR(log.mu_s[0] + log.mu_s[1] + log.mu_s[2], 1.0, 1e-10);
        EXPECT_NEAR(log.mu_m[0] + log.mu_m[1], 1.0, 1e-10);
    }
}

TEST(Train, DivergenceAborts) {
    auto data = toy_dataset();
    auto cfg = toy_config(Mode::Single, 10);
    cfg.lr = 1e15;
    cfg.lr_drops.clear();
    EXPECT_THROW(train(data, cfg), TrainingDiverged);
}

TEST(Train, WritesLogsAndCheckpoints) {
    const auto dir = std::filesystem::temp_directory_path() / "mtlcnn_train_test";
    std::filesystem::remove_all(dir);
    auto data = toy_dataset(4, {-60, 0, 60}, 2, 1, 0.75);
    auto cfg = toy_config(Mode::Multi, 3, 4);
    cfg.checkpoint_every = 1;
    cfg.lr_drops = {{2, 0.1}};
    auto result = train(data, cfg, dir);

    EXPECT_TRUE(std::filesystem::exists(dir / "epochs.csv"));
    EXPECT_TRUE(std::filesystem::exists(dir / "checkpoint" / "model.json"));
    for (int e = 1; e <= 3; ++e) {
        char name[32];
        std::snprintf(name, sizeof(name), "epoch_%03d", e);
        EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / name / "weights.bin")) << name;
    }

    auto reloaded = load_checkpoint(dir / "checkpoint");
    EXPECT_EQ(reloaded.epoch, 3);
    auto pa = result.net.named_parameters();
    auto pb = reloaded.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i)
        EXPECT_EQ(pa[i].tensor.data(), pb[i].tensor.data()) << pa[i].name;

    const std::string csv = io::read_text(dir / "epochs.csv");
    EXPECT_NE(csv.find("mu_p"), std::string::npos);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 4);  // header + 3 epochs
    std::filesystem::remove_all(dir);
}

TEST(Train, FrozenDynamicHeadsStayAtZero) {
    auto data = toy_dataset(4, {-60, 0, 60}, 2, 1, 0.75);
    auto cfg = toy_config(Mode::Multi, 2, 4);
    cfg.freeze_dynamic_heads = true;
    auto result = train(data, cfg);
    for (double v : result.net.omega_s.data()) EXPECT_EQ(v, 0.0);
    for (double v : result.net.eps_s.data()) EXPECT_EQ(v, 0.0);
    for (const auto& log : result.logs)
        for (double v : log.mu_s) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(WeightSearch, SingleCandidateReturnedUnchanged) {
    auto data = toy_dataset();
    TrainConfig cfg = toy_config(Mode::Multi, 4);
    auto r = weight_search(data, cfg, {0.07});
    EXPECT_DOUBLE_EQ(r.best_phi, 0.07);
    EXPECT_TRUE(r.scores.empty());
    EXPECT_THROW(weight_search(data, cfg, {}), std::invalid_argument);
}

TEST(WeightSearch, OneRunPerCandidateAndMemberResult) {
    auto data = toy_dataset(8, {-60, 0, 60}, 2, 1, 0.75);
    TrainConfig cfg = toy_config(Mode::Multi, 2, 4);
    const std::vector<double> candidates = {0.05, 0.3};
    auto r = weight_search(data, cfg, candidates, 1);
    EXPECT_EQ(r.scores.size(), candidates.size());  // |candidates| training runs, not k^t
    EXPECT_EQ(r.epochs_used, 1);
    EXPECT_TRUE(r.best_phi == 0.05 || r.best_phi == 0.3);
    double best = -1;
    for (const auto& [phi, score] : r.scores) {
        EXPECT_GE(score, 0.0);
        EXPECT_LE(score, 1.0);
        best = std::max(best, score);
    }
    for (const auto& [phi, score] : r.scores)
        if (score == best) {
            EXPECT_DOUBLE_EQ(r.best_phi, phi);  // ties break to the earlier candidate
            break;
        }
}

}  // namespace
