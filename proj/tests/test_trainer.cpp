#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "aclseg/data/benchmark.hpp"
#include "aclseg/trainer/aclseg_learner.hpp"
#include "test_util.hpp"

using namespace aclseg;
using namespace aclseg::trainer;
namespace fs = std::filesystem;

namespace {

model::ModelConfig tiny_model(std::uint64_t seed = 0) {
    model::ModelConfig m;
    m.height = m.width = 32;
    m.latent_dim = 4;
    m.base_channels = 4;
    m.aspp_rates = {1, 2};
    m.seed = seed;
    return m;
}

TrainConfig tiny_train(std::size_t epochs = 2) {
    TrainConfig c;
    c.max_epochs = epochs;
    c.batch_size = 4;
    c.deterministic = true;
    return c;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

// One small benchmark shared by the whole suite.
class SmallBenchmark : public ::testing::Test {
protected:
    static void SetUpTestSuite() {
        dir_ = new testutil::TempDir;
        data::generate_benchmark(11, {8, 4, 6}, 32, 32, dir_->path() / "ds");
        ds_ = new data::Dataset(data::load_dataset(dir_->path() / "ds" / "manifest.json"));
    }
    static void TearDownTestSuite() {
        delete ds_;
        delete dir_;
    }
    static const data::Dataset& ds() { return *ds_; }
    static fs::path root() { return dir_->path(); }

private:
    static inline testutil::TempDir* dir_ = nullptr;
    static inline data::Dataset* ds_ = nullptr;
};

}  // namespace

TEST(Adam, ZeroGradientLeavesParametersAndDecaysMoments) {
    model::ParameterList<float> params{{"w", num::Tensor<float>({1}, std::vector<float>{2.0f}, true)}};
    Adam<float> opt;
    params[0].tensor.mutable_grad()[0] = 1.0f;
    opt.step(params, 1e-3);
    const float after_first = params[0].tensor.data()[0];
    const double m1 = opt.slot(params[0].tensor)->m[0], v1 = opt.slot(params[0].tensor)->v[0];
    params[0].tensor.zero_grad();
    params[0].tensor.mutable_grad()[0] = 0.0f;
    opt.step(params, 1e-3);
    const auto* s = opt.slot(params[0].tensor);
    EXPECT_NEAR(s->m[0], 0.9 * m1, 1e-12);
    EXPECT_NEAR(s->v[0], 0.999 * v1, 1e-12);
    // A zero gradient leaves a nonzero first moment, so only a fresh state is
    // truly inert.
    model::ParameterList<float> fresh{{"u", num::Tensor<float>({3}, std::vector<float>{1, 2, 3}, true)}};
    Adam<float> opt2;
    fresh[0].tensor.mutable_grad();
    opt2.step(fresh, 1e-3);
    EXPECT_EQ(fresh[0].tensor.values(), (num::Buffer<float>{1, 2, 3}));
    EXPECT_NE(after_first, 2.0f);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    model::ParameterList<double> params{{"w", num::Tensor<double>({1}, std::vector<double>{0.5}, true)}};
    Adam<double> opt;
    params[0].tensor.mutable_grad()[0] = 1.0;
    opt.step(params, 1e-3);
    EXPECT_NEAR(params[0].tensor.data()[0] - 0.5, -1e-3, 1e-9);
}

TEST(Adam, QuadraticDecreasesMonotonically) {
    auto x = num::Tensor<double>({1}, std::vector<double>{1.0}, true);
    model::ParameterList<double> params{{"x", x}};
    Adam<double> opt;
    double prev = 1.0;
    for (int i = 0; i < 10; ++i) {
        x.zero_grad();
        num::backward(num::mul(x, x));
        opt.step(params, 1e-2);
        const double f = x.data()[0] * x.data()[0];
        EXPECT_LT(f, prev);
        prev = f;
    }
}

TEST(Adam, FrozenParametersLoseTheirState) {
    auto a = num::Tensor<float>({2}, std::vector<float>{1, 1}, true);
    auto b = num::Tensor<float>({2}, std::vector<float>{1, 1}, true);
    model::ParameterList<float> params{{"a", a}, {"b", b}};
    Adam<float> opt;
    a.mutable_grad()[0] = 1;
    b.mutable_grad()[0] = 1;
    opt.step(params, 1e-3);
    EXPECT_EQ(opt.tracked(), 2u);
    b.set_requires_grad(false);
    const auto frozen = b.values();
    opt.step(params, 1e-3);
    EXPECT_EQ(opt.tracked(), 1u);
    EXPECT_EQ(b.values(), frozen);
}

TEST(Plateau, DividesByFactorAfterPatience) {
    PlateauScheduler s(1e-3, 3.0, 5, 1e-5);
    for (int i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(s.observe(1.0), 1e-3);
    EXPECT_NEAR(s.observe(1.0), 3.333e-4, 1e-7);
}

TEST(Plateau, ImprovementResetsAndFloorHolds) {
    PlateauScheduler s(1e-3, 3.0, 2, 2e-4);
    s.observe(1.0);
    s.observe(1.0);
    s.observe(0.5);
    EXPECT_DOUBLE_EQ(s.lr(), 1e-3);
    for (int i = 0; i < 10; ++i) s.observe(0.9);
    EXPECT_DOUBLE_EQ(s.lr(), 2e-4);
}

TEST(EarlyStop, StopsAfterPatienceAndRemembersBest) {
    EarlyStopping e(3);
    EXPECT_TRUE(e.observe(1.0, 1));
    EXPECT_TRUE(e.observe(0.8, 2));
    EXPECT_FALSE(e.observe(0.9, 3));
    EXPECT_FALSE(e.observe(0.8, 4));
    EXPECT_FALSE(e.should_stop());
    EXPECT_FALSE(e.observe(0.85, 5));
    EXPECT_TRUE(e.should_stop());
    EXPECT_EQ(e.best_epoch(), 2u);
    EXPECT_DOUBLE_EQ(e.best(), 0.8);
}

TEST(Schedule, PresetsAndCustomOrders) {
    EXPECT_EQ(TaskSchedule::preset("A").order, (std::vector<int>{1, 2, 3, 4, 5}));
    EXPECT_EQ(TaskSchedule::preset("OrderB").order, (std::vector<int>{5, 4, 3, 2, 1}));
    EXPECT_EQ(TaskSchedule::parse("C").order, (std::vector<int>{3, 2, 1, 4, 5}));
    EXPECT_EQ(TaskSchedule::parse("4,2,1,3,5").order, (std::vector<int>{4, 2, 1, 3, 5}));
    EXPECT_THROW(TaskSchedule::parse("4,2,2,3,5"), ConfigError);
    EXPECT_THROW(TaskSchedule::parse("1,2,3"), ConfigError);
    EXPECT_THROW(TaskSchedule::parse("1,2,x,4,5"), ConfigError);
    EXPECT_THROW(TaskSchedule::parse("D"), ConfigError);
    EXPECT_EQ(TaskSchedule::preset("A").to_json().at("classes")[4], "oesophagus");
}

TEST(Config, MergeRejectsUnknownKeys) {
    TrainConfig c;
    c.merge_json({{"lr0", 5e-4}, {"weights", {{"lambda2", 0.1}}}});
    EXPECT_DOUBLE_EQ(c.lr0, 5e-4);
    EXPECT_DOUBLE_EQ(c.weights.lambda2, 0.1);
    EXPECT_DOUBLE_EQ(c.weights.lambda1, 1.0);
    EXPECT_THROW(c.merge_json({{"learning_rate", 1.0}}), ConfigError);
    EXPECT_THROW(c.merge_json({{"weights", {{"lambda4", 1.0}}}}), ConfigError);
    EXPECT_THROW(c.merge_json({{"batch_size", "eight"}}), ConfigError);
    TrainConfig bad;
    bad.plateau_factor = 1.0;
    EXPECT_THROW(bad.validate(), ConfigError);
}

TEST_F(SmallBenchmark, StepsTouchOnlyTheirOwnParameters) {
    ACLSegLearner learner(tiny_model());
    learner.add_task();
    learner.add_task();
    learner.begin_phase({{1, 2}}, ds(), tiny_train());
    const auto& m = learner.model();
    const auto batch = data::make_batch<float>(ds(), std::span(ds().manifest.train[1]).first(4), 2);
    const auto zs = m.forward_shared(batch.images);

    const auto task = model::snapshot_values(m.task_parameters(1));
    const auto shared = model::snapshot_values(m.shared_parameters());
    const auto disc = model::snapshot_values(m.discriminator_parameters());
    const auto frozen = model::snapshot_values(m.private_parameters(0));
    learner.discriminator_step(1, zs, 1e-2);
    EXPECT_EQ(model::snapshot_values(m.task_parameters(1)), task);
    EXPECT_NE(model::snapshot_values(m.discriminator_parameters()), disc);

    const auto disc_after = model::snapshot_values(m.discriminator_parameters());
    learner.main_step(1, batch, zs, 1e-2);
    EXPECT_EQ(model::snapshot_values(m.discriminator_parameters()), disc_after);
    EXPECT_NE(model::snapshot_values(m.shared_parameters()), shared);
    EXPECT_EQ(model::snapshot_values(m.private_parameters(0)), frozen);
}

TEST_F(SmallBenchmark, NonFiniteLossAbortsNamingTheTerm) {
    ACLSegLearner learner(tiny_model());
    learner.add_task();
    learner.begin_phase({{0, 1}}, ds(), tiny_train());
    auto batch = data::make_batch<float>(ds(), std::span(ds().manifest.train[0]).first(2), 1);
    batch.images.data()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        learner.train_batch({0, 1}, batch, 1e-3);
        FAIL() << "expected TrainingAborted";
    } catch (const TrainingAborted& e) {
        EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("discriminator"), std::string::npos);
    }
}

TEST_F(SmallBenchmark, SequenceWritesRecordAndFreezesFinishedTasks) {
    const auto out = root() / "run_freeze";
    ACLSegLearner learner(tiny_model(3));
    auto cfg = tiny_train();
    cfg.seed = 3;
    const auto rec = run_sequence(learner, TaskSchedule::preset("A"), ds(), cfg, cfg.to_json(), out);

    EXPECT_EQ(rec.matrix.steps(), 5u);
    for (std::size_t i = 1; i <= 5; ++i) EXPECT_EQ(rec.matrix.rows[i - 1].size(), i);
    for (const char* f : {"config.json", "schedule.json", "epochs.jsonl", "matrix.csv"}) EXPECT_TRUE(fs::exists(out / f)) << f;
    EXPECT_FALSE(fs::exists(out / "timing.json"));
    std::size_t lines = 0;
    std::ifstream is(out / "epochs.jsonl");
    for (std::string line; std::getline(is, line);) {
        const auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(std::isfinite(j.at("train").at("total").get<double>()));
        EXPECT_FALSE(j.contains("seconds"));
        ++lines;
    }
    EXPECT_EQ(lines, rec.epochs.size());

    const auto last = model::read_checkpoint(out / "checkpoints" / "task_5");
    for (std::size_t k = 0; k < 4; ++k) {
        const auto at_k = model::read_checkpoint(out / "checkpoints" / ("task_" + std::to_string(k + 1)));
        for (const auto& [name, t] : at_k.tensors) {
            const bool own = name.rfind("private." + std::to_string(k) + ".", 0) == 0 ||
                             name.rfind("head." + std::to_string(k) + ".", 0) == 0;
            if (own) EXPECT_EQ(t.values, last.tensors.at(name).values) << name;
        }
    }
}

TEST_F(SmallBenchmark, DeterministicRunsAreByteIdentical) {
    metrics::IdealScores ideal;
    ideal.per_class = {0.9, 0.9, 0.9, 0.9, 0.5};
    std::string matrices[2], omegas[2];
    for (int r = 0; r < 2; ++r) {
        const auto out = root() / ("run_det" + std::to_string(r));
        ACLSegLearner learner(tiny_model(5));
        auto cfg = tiny_train();
        cfg.seed = 5;
        run_sequence(learner, TaskSchedule::preset("A"), ds(), cfg, cfg.to_json(), out, ideal);
        matrices[r] = slurp(out / "matrix.csv");
        omegas[r] = slurp(out / "omega.json");
    }
    EXPECT_FALSE(matrices[0].empty());
    EXPECT_EQ(matrices[0], matrices[1]);
    EXPECT_EQ(omegas[0], omegas[1]);
}

TEST_F(SmallBenchmark, EarlyStoppingRestoresTheBestEpoch) {
    // A learning rate this large makes validation loss climb after the first
    // epoch, so the final parameters must come from epoch 1.
    ACLSegLearner learner(tiny_model(2));
    learner.add_task();
    auto cfg = tiny_train(4);
    cfg.lr0 = 0.5;
    cfg.min_lr = 0;
    cfg.early_stop_patience = 2;
    std::vector<double> vals;
    std::vector<std::vector<num::Buffer<float>>> snaps;
    const auto summary = train_phase(learner, {{0, 1}}, ds(), cfg, 1, [&](const nlohmann::json& e) {
        vals.push_back(e.at("val_bce").get<double>());
        snaps.push_back(model::snapshot_values(learner.parameters()));
    });
    ASSERT_FALSE(vals.empty());
    const auto best = static_cast<std::size_t>(std::min_element(vals.begin(), vals.end()) - vals.begin());
    EXPECT_EQ(summary.best_epoch, best + 1);
    EXPECT_EQ(model::snapshot_values(learner.parameters()), snaps[best]);
    EXPECT_NEAR(validation_bce(learner, {{0, 1}}, ds(), 16), vals[best], 1e-6);
}

TEST_F(SmallBenchmark, DiscriminatorBeatsChanceWithinFirstTask) {
    ACLSegLearner learner(tiny_model(1));
    learner.add_task();
    auto cfg = tiny_train(12);
    cfg.early_stop_patience = 100;
    std::vector<double> acc, dloss;
    train_phase(learner, {{0, 1}}, ds(), cfg, 1, [&](const nlohmann::json& e) {
        acc.push_back(e.at("train").at("disc_acc").get<double>());
        dloss.push_back(e.at("train").at("adv_disc").get<double>());
    });
    ASSERT_EQ(acc.size(), 12u);
    const auto median = [](std::vector<double> v) {
        std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2), v.end());
        return v[v.size() / 2];
    };
    const std::vector<double> first(dloss.begin(), dloss.begin() + 4), last(dloss.end() - 4, dloss.end());
    EXPECT_GT(median({acc.end() - 4, acc.end()}), 0.5);
    EXPECT_LT(median(last), median(first));
}
