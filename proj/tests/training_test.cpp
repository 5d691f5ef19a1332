#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "peps/training.hpp"
#include "test_util.hpp"

using peps::Checkpoint;
using peps::Dataset;
using peps::FeatureKind;
using peps::Image;
using peps::Tensor;
using testutil::rel_err;

namespace {

Image random_image(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    Image img{n, n, {}};
    img.pixels.resize(n * n);
    for (double& p : img.pixels) p = dist(rng);
    return img;
}

// Tiny synthetic task on a 4x4 image grid (2x2 lattice): class 0 images are
// dark, class 1 bright. Linearly separable through the feature map.
Dataset toy_dataset(std::size_t per_class, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> lo(0.0, 0.15), hi(0.85, 1.0);
    Dataset data;
    for (std::size_t k = 0; k < per_class; ++k)
        for (std::size_t label = 0; label < 2; ++label) {
            Image img{4, 4, {}};
            img.pixels.resize(16);
            for (double& p : img.pixels) p = label ? hi(rng) : lo(rng);
            data.images.push_back(std::move(img));
            data.labels.push_back(label);
        }
    return data;
}

Checkpoint toy_model(std::size_t T, std::uint64_t seed) {
    Checkpoint model;
    model.grid = peps::init_grid(2, 2, 16, T, seed);
    model.positivity = false;
    model.feature = FeatureKind::product;
    return model;
}

}  // namespace

TEST(Softmax, SumsToOneAndShiftInvariant) {
    std::vector<double> logits{0.3, -1.2, 2.0, 0.0};
    std::vector<double> p = peps::softmax(logits);
    double sum = 0.0;
    for (double v : p) sum += v;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    std::vector<double> shifted = logits;
    for (double& v : shifted) v += 100.0;
    std::vector<double> q = peps::softmax(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(q[i], p[i], 1e-12);
}

TEST(Softmax, MatchesDirectFormula) {
    std::vector<double> logits{1.0, 2.0, 3.0};
    std::vector<double> p = peps::softmax(logits);
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (std::size_t i = 0; i < 3; ++i)
        EXPECT_NEAR(p[i], std::exp(logits[i]) / z, 1e-15);
}

TEST(Softmax, ExtremeLogitsNoOverflow) {
    std::vector<double> p = peps::softmax({1000.0, -1000.0});
    EXPECT_NEAR(p[0], 1.0, 1e-15);
    EXPECT_NEAR(p[1], 0.0, 1e-15);
}

TEST(CrossEntropyLoss, Goldens) {
    EXPECT_NEAR(peps::cross_entropy_loss(std::vector<double>(10, 0.7), 3), std::log(10.0),
                1e-12);
    EXPECT_NEAR(peps::cross_entropy_loss({1.0, 2.0, 3.0}, 0), 2.40760596444438, 1e-11);
    // true-label logit dominating drives the loss to zero
    EXPECT_NEAR(peps::cross_entropy_loss({50.0, 0.0, 0.0}, 0), 0.0, 1e-12);
}

TEST(Adam, MatchesHandComputedScalarSteps) {
    // three steps on a single scalar with constant gradient, against the
    // update equations evaluated by hand
    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8, g = 2.0;
    double p = 1.0, m = 0.0, v = 0.0;
    double p_ref = 1.0, m_ref = 0.0, v_ref = 0.0;
    for (std::size_t t = 1; t <= 3; ++t) {
        peps::adam_update(p, m, v, g, t, lr, b1, b2, eps);
        m_ref = b1 * m_ref + (1 - b1) * g;
        v_ref = b2 * v_ref + (1 - b2) * g * g;
        const double mhat = m_ref / (1 - std::pow(b1, double(t)));
        const double vhat = v_ref / (1 - std::pow(b2, double(t)));
        p_ref -= lr * mhat / (std::sqrt(vhat) + eps);
        ASSERT_NEAR(p, p_ref, 1e-12) << "step " << t;
    }
    // constant gradient: mhat = g, vhat = g^2, so each step is ~ -lr * sign(g)
    EXPECT_NEAR(p, 1.0 - 3 * lr * (2.0 / (2.0 + eps)), 1e-9);
}

TEST(Optimizer, SgdStep) {
    Tensor p({2}, {1.0, -0.5});
    Tensor g({2}, {2.0, 4.0});
    peps::Optimizer opt("sgd", 0.1);
    std::vector<Tensor*> params{&p};
    std::vector<const Tensor*> grads{&g};
    opt.step(params, grads);
    EXPECT_NEAR(p[0], 0.8, 1e-15);
    EXPECT_NEAR(p[1], -0.9, 1e-15);
}

TEST(Optimizer, ZeroGradientLeavesSgdUnchanged) {
    Tensor p({2}, {1.0, -0.5});
    Tensor g = Tensor::zeros({2});
    peps::Optimizer opt("sgd", 0.1);
    std::vector<Tensor*> params{&p};
    std::vector<const Tensor*> grads{&g};
    opt.step(params, grads);
    EXPECT_EQ(p[0], 1.0);
    EXPECT_EQ(p[1], -0.5);
}

TEST(Optimizer, UnknownKindRejected) {
    EXPECT_THROW(peps::Optimizer("adamw", 0.1), std::invalid_argument);
}

TEST(ArgmaxLabel, FirstIndexWinsTies) {
    EXPECT_EQ(peps::argmax_label(Tensor({4}, {0.5, 0.5, 0.5, 0.5})), 0u);
    EXPECT_EQ(peps::argmax_label(Tensor({4}, {0.1, 0.7, 0.7, 0.2})), 1u);
}

TEST(Evaluate, FreshInitLossNearUniform) {
    // with a fresh tiny-entry init the model has no preference, so the loss
    // is close to ln T; statistical check over 5 seeds
    Dataset data = toy_dataset(5, 3);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Checkpoint model = toy_model(10, seed);
        peps::EvalResult r = peps::evaluate(model, data, 4);
        EXPECT_NEAR(r.loss, std::log(10.0), 0.2 * std::log(10.0)) << "seed " << seed;
    }
}

TEST(TrainEpoch, ZeroLearningRateLeavesModelUnchanged) {
    Dataset data = toy_dataset(2, 4);
    Checkpoint model = toy_model(2, 1);
    const Checkpoint before = model;
    peps::TrainConfig cfg;
    cfg.chi = 4;
    cfg.batch = 1;
    cfg.T = 2;
    peps::Optimizer opt("sgd", 0.0);
    peps::EpochStats st = peps::train_epoch(model, data, cfg, opt, 0);
    EXPECT_GT(st.train_loss, 0.0);
    for (std::size_t s = 0; s < model.grid.tensors.size(); ++s)
        EXPECT_EQ(peps::max_abs_diff(model.grid.tensors[s], before.grid.tensors[s]), 0.0);
}

TEST(TrainEpoch, LearnsSeparableToyTask) {
    Dataset data = toy_dataset(10, 5);
    Checkpoint model = toy_model(2, 2);
    peps::TrainConfig cfg;
    cfg.chi = 4;
    cfg.batch = 4;
    cfg.lr = 5e-3;
    cfg.T = 2;
    cfg.seed = 7;
    peps::Optimizer opt("adam", cfg.lr);
    double final_acc = 0.0, first_loss = 0.0, last_loss = 0.0;
    for (std::size_t epoch = 0; epoch < 20; ++epoch) {
        peps::EpochStats st = peps::train_epoch(model, data, cfg, opt, epoch);
        if (epoch == 0) first_loss = st.train_loss;
        last_loss = st.train_loss;
        final_acc = st.train_acc;
    }
    EXPECT_LT(last_loss, first_loss);
    EXPECT_DOUBLE_EQ(final_acc, 1.0);
    EXPECT_DOUBLE_EQ(peps::evaluate(model, data, 4).accuracy, 1.0);
}

TEST(TrainEpoch, PositivityKeepsEntriesNonNegative) {
    Dataset data = toy_dataset(3, 6);
    Checkpoint model = toy_model(2, 3);
    model.positivity = true;
    model.grid = peps::apply_positivity(model.grid);
    peps::TrainConfig cfg;
    cfg.chi = 4;
    cfg.batch = 2;
    cfg.lr = 1e-2;
    cfg.T = 2;
    cfg.positivity = true;
    peps::Optimizer opt("adam", cfg.lr);
    for (std::size_t epoch = 0; epoch < 3; ++epoch)
        peps::train_epoch(model, data, cfg, opt, epoch);
    EXPECT_GE(model.grid.min_entry(), 0.0);
}

TEST(TrainEpoch, DeterministicAcrossRuns) {
    Dataset data = toy_dataset(4, 8);
    peps::TrainConfig cfg;
    cfg.chi = 4;
    cfg.batch = 4;
    cfg.lr = 1e-3;
    cfg.T = 2;
    cfg.seed = 11;
    auto run = [&] {
        Checkpoint model = toy_model(2, 9);
        peps::Optimizer opt("adam", cfg.lr);
        peps::EpochStats st = peps::train_epoch(model, data, cfg, opt, 0);
        return std::pair{std::move(model), st};
    };
    auto [m1, s1] = run();
    auto [m2, s2] = run();
    EXPECT_EQ(s1.train_loss, s2.train_loss);
    EXPECT_EQ(s1.train_acc, s2.train_acc);
    for (std::size_t s = 0; s < m1.grid.tensors.size(); ++s)
        EXPECT_EQ(peps::max_abs_diff(m1.grid.tensors[s], m2.grid.tensors[s]), 0.0);
}

TEST(MetricsWriter, HeaderAndRows) {
    const auto path = std::filesystem::temp_directory_path() / "peps_metrics_test.csv";
    {
        peps::MetricsWriter w(path, {{"lr", "0.0001"}, {"chi", "10"}});
        w.row(0, 2.302585, 0.1, 0.11, 0.09, 12.345);
        w.row(1, 1.5, 0.5, 0.45, 0.44, 11.5);
    }
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "# lr=0.0001");
    std::getline(in, line);
    EXPECT_EQ(line, "# chi=10");
    std::getline(in, line);
    EXPECT_EQ(line, "epoch,train_loss,train_acc,val_acc,test_acc,seconds");
    std::getline(in, line);
    EXPECT_EQ(line.substr(0, 11), "0,2.302585,");
    std::getline(in, line);
    EXPECT_EQ(line, "1,1.5,0.5,0.45,0.44,11.500");
    std::filesystem::remove(path);
}

TEST(LogitProbabilities, NormalizedMagnitudesAndScaleInvariance) {
    Tensor v({3}, {0.2, -1.0, 1.0});
    std::vector<double> p = peps::logit_probabilities(v);
    // softmax of log|v_i| + log_scale reduces to |v_i| / sum_j |v_j|
    const double sum = 0.2 + 1.0 + 1.0;
    EXPECT_NEAR(p[0], 0.2 / sum, 1e-15);
    EXPECT_NEAR(p[1], 1.0 / sum, 1e-15);
    EXPECT_NEAR(p[2], 1.0 / sum, 1e-15);

    Tensor w({3}, {0.2e-100, -1.0e-100, 1.0e-100});
    std::vector<double> q = peps::logit_probabilities(w);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(q[i], p[i], 1e-15);

    std::vector<double> z = peps::logit_probabilities(Tensor::zeros({4}));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(z[i], 0.25);
}
