#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "aclseg/model/aclseg_model.hpp"
#include "aclseg/model/checkpoint.hpp"
#include "aclseg/numerics/gradcheck.hpp"
#include "test_util.hpp"

using namespace aclseg;
using namespace aclseg::model;
using num::Shape;
using num::Tensor;

namespace {

ModelConfig small_config(Variant v = Variant::full) {
    ModelConfig c;
    c.height = c.width = 32;
    c.latent_dim = 4;
    c.base_channels = 4;
    c.aspp_rates = {1, 2};
    c.variant = v;
    c.seed = 17;
    return c;
}

bool all_finite(const Tensor<float>& t) {
    for (float v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

template <typename T>
auto values_of(const ParameterList<T>& params) {
    return snapshot_values(params);
}

}  // namespace

TEST(Shared, ShapeAndFiniteOnZeroImage) {
    ACLSegModel<float> m(ModelConfig{});
    const auto z = m.forward_shared(Tensor<float>({2, 1, 128, 128}, 0.0f));
    EXPECT_EQ(z.shape(), (Shape{2, 64}));
    EXPECT_TRUE(all_finite(z));
}

TEST(Shared, GradientReachesEveryParameter) {
    ACLSegModel<float> m(small_config());
    num::backward(num::sum(m.forward_shared(num::random_normal<float>({2, 1, 32, 32}, 4))));
    for (const auto& p : m.shared_parameters()) {
        ASSERT_TRUE(p.tensor.has_grad()) << p.name;
        double norm = 0;
        for (float g : p.tensor.grad()) norm += std::abs(g);
        EXPECT_GT(norm, 0.0) << p.name;
    }
}

TEST(Shared, WrongInputSizeIsShapeError) {
    ACLSegModel<float> m(small_config());
    EXPECT_THROW(m.forward_shared(Tensor<float>({1, 1, 48, 32}, 0.0f)), ShapeError);
}

TEST(Config, LatentMustMatchGrid) {
    auto c = small_config();
    c.latent_dim = 5;
    EXPECT_THROW(ACLSegModel<float>{c}, ConfigError);
}

TEST(Private, ShapeAndDistinctTasks) {
    ACLSegModel<float> m(ModelConfig{});
    m.add_task();
    m.add_task();
    const auto x = num::random_normal<float>({2, 1, 128, 128}, 9);
    const auto a = m.forward_private(0, x), b = m.forward_private(1, x);
    EXPECT_EQ(a.shape(), (Shape{2, 64}));
    EXPECT_NE(a.values(), b.values());
}

TEST(Private, SmallerThanShared) {
    ACLSegModel<float> m(ModelConfig{});
    m.add_task();
    EXPECT_LT(count_parameters(m.private_parameters(0)), count_parameters(m.shared_parameters()));
}

TEST(Private, OutOfRangeTask) {
    ACLSegModel<float> m(small_config());
    EXPECT_THROW(m.forward_private(0, Tensor<float>({1, 1, 32, 32}, 0.0f)), ContractError);
}

TEST(Fuse, ZeroPrivateGivesZeroProductAndSharedSum) {
    ACLSegModel<float> m(small_config());
    const auto zs = num::random_normal<float>({3, 4}, 2);
    const auto f = m.fuse(zs, Tensor<float>({3, 4}, 0.0f));
    ASSERT_EQ(f.shape(), (Shape{3, 2, 2, 2}));
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t i = 0; i < 4; ++i) {
            EXPECT_EQ(f[n * 8 + i], 0.0f);
            EXPECT_EQ(f[n * 8 + 4 + i], zs[n * 4 + i]);
        }
}

TEST(Fuse, SquaresAndDoubles) {
    ACLSegModel<float> m(small_config());
    const Tensor<float> z({1, 4}, std::vector<float>{1, 2, 3, 4});
    const auto f = m.fuse(z, z);
    EXPECT_EQ(f.values(), (num::Buffer<float>{1, 4, 9, 16, 2, 4, 6, 8}));
}

TEST(Fuse, Symmetric) {
    ACLSegModel<float> m(small_config());
    const auto a = num::random_normal<float>({2, 4}, 5), b = num::random_normal<float>({2, 4}, 6);
    EXPECT_EQ(m.fuse(a, b).values(), m.fuse(b, a).values());
}

TEST(Fuse, LengthMismatch) {
    ACLSegModel<float> m(small_config());
    EXPECT_THROW(m.fuse(Tensor<float>({1, 4}, 0.0f), Tensor<float>({1, 3}, 0.0f)), ShapeError);
}

TEST(Head, UpsamplesSixteenTimes) {
    for (auto v : {Variant::full, Variant::aspp_ps, Variant::basic_enc}) {
        ModelConfig c;
        c.variant = v;
        ACLSegModel<float> m(c);
        m.add_task();
        const auto y = m.forward_head(0, num::random_normal<float>({1, 2, 8, 8}, 1));
        EXPECT_EQ(y.shape(), (Shape{1, 1, 128, 128})) << to_string(v);
        EXPECT_EQ(m.segment(0, Tensor<float>({1, 1, 128, 128}, 0.5f)).shape(), (Shape{1, 1, 128, 128}));
    }
}

TEST(Head, FiniteDifferencesInDouble) {
    ModelConfig c;
    c.height = c.width = 16;
    c.latent_dim = 1;
    c.base_channels = 2;
    c.aspp_rates = {1};
    for (auto v : {Variant::full, Variant::basic_enc}) {
        c.variant = v;
        ACLSegModel<double> m(c);
        m.add_task();
        std::vector<Tensor<double>> inputs{num::random_normal<double>({2, 2, 1, 1}, 3)};
        inputs[0].set_requires_grad(true);
        for (const auto& p : m.head_parameters(0)) inputs.push_back(p.tensor);
        // Nonzero biases keep the leaky-ReLU kinks away from exact zeros.
        num::Rng rng(5);
        for (auto& t : inputs)
            if (t.rank() == 1) num::fill_normal(t, rng, 0.1);
        const double err = num::check_gradients(
            [&](const std::vector<Tensor<double>>& in) { return m.forward_head(0, in[0]); }, inputs, 8);
        EXPECT_LE(err, 1e-4) << to_string(v);
    }
}

TEST(Discriminator, GrowsOnePerTask) {
    ACLSegModel<float> m(small_config());
    EXPECT_EQ(m.discriminator_width(), 1u);
    for (int i = 0; i < 3; ++i) m.add_task();
    EXPECT_EQ(m.discriminator_width(), 4u);
    EXPECT_EQ(m.forward_discriminator(Tensor<float>({5, 4}, 0.1f)).shape(), (Shape{5, 4}));
}

TEST(Discriminator, GrowthPreservesOldLogits) {
    ACLSegModel<float> m(small_config());
    m.add_task();
    m.add_task();
    const auto z = num::random_normal<float>({3, 4}, 12);
    const auto before = m.forward_discriminator(z);
    m.add_task();
    const auto after = m.forward_discriminator(z);
    for (std::size_t n = 0; n < 3; ++n)
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(before[n * 3 + j], after[n * 4 + j]);
}

TEST(Discriminator, SoftmaxRowsSumToOne) {
    ACLSegModel<double> m(small_config());
    m.add_task();
    m.add_task();
    const auto ls = num::log_softmax(m.forward_discriminator(num::random_normal<double>({4, 4}, 3)));
    for (std::size_t n = 0; n < 4; ++n) {
        double s = 0;
        for (std::size_t j = 0; j < 3; ++j) s += std::exp(ls[n * 3 + j]);
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Discriminator, WrongLatentWidth) {
    ACLSegModel<float> m(small_config());
    EXPECT_THROW(m.forward_discriminator(Tensor<float>({1, 5}, 0.0f)), ShapeError);
}

TEST(Tasks, ConstantParameterDelta) {
    ACLSegModel<float> m(ModelConfig{});
    std::vector<std::size_t> counts{count_parameters(m.parameters())};
    for (int i = 0; i < 4; ++i) {
        m.add_task();
        counts.push_back(count_parameters(m.parameters()));
    }
    for (std::size_t i = 2; i < counts.size(); ++i) EXPECT_EQ(counts[i] - counts[i - 1], counts[2] - counts[1]);
}

TEST(Tasks, FrozenThroughAdvances) {
    ACLSegModel<float> m(small_config());
    m.add_task();
    EXPECT_EQ(m.frozen_through(), -1);
    m.add_task();
    m.add_task();
    EXPECT_EQ(m.frozen_through(), 1);
    EXPECT_TRUE(m.is_frozen(1));
    EXPECT_FALSE(m.is_frozen(2));
}

TEST(Tasks, TrainableCountIsSharedDiscriminatorAndCurrentTask) {
    ACLSegModel<float> m(ModelConfig{});
    for (int i = 0; i < 3; ++i) m.add_task();
    const std::size_t expected = count_parameters(m.shared_parameters()) +
                                 count_parameters(m.discriminator_parameters()) +
                                 count_parameters(m.private_parameters(2)) + count_parameters(m.head_parameters(2));
    EXPECT_EQ(count_parameters(m.parameters(), true), expected);
}

TEST(Tasks, FrozenModulesSurviveTrainingSteps) {
    ACLSegModel<float> m(small_config());
    m.add_task();
    m.add_task();
    auto frozen = m.private_parameters(0);
    const auto head0 = m.head_parameters(0);
    frozen.insert(frozen.end(), head0.begin(), head0.end());
    const auto before = values_of(frozen);
    const auto x = num::random_normal<float>({2, 1, 32, 32}, 1);
    for (int step = 0; step < 3; ++step) {
        auto params = m.parameters();
        zero_grads(params);
        auto loss = num::add(num::mean(m.segment(0, x)), num::mean(m.segment(1, x)));
        num::backward(loss);
        for (auto& p : params) {
            if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
            auto t = p.tensor;
            for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] -= 0.1f * t.grad()[i];
        }
    }
    EXPECT_EQ(values_of(frozen), before);
}

TEST(Checkpoint, RoundTripIsBitExact) {
    testutil::TempDir dir;
    ACLSegModel<float> m(small_config());
    m.add_task();
    m.add_task();
    m.add_task();
    save_model(m, dir.path() / "ckpt");
    const auto back = load_model<float>(dir.path() / "ckpt");
    EXPECT_EQ(back.task_count(), 3u);
    EXPECT_EQ(back.frozen_through(), 1);
    EXPECT_EQ(values_of(back.parameters()), values_of(m.parameters()));
    const auto x = num::random_normal<float>({1, 1, 32, 32}, 2);
    EXPECT_EQ(back.segment(2, x).values(), m.segment(2, x).values());
}

TEST(Checkpoint, ShapeMismatchRejected) {
    testutil::TempDir dir;
    ACLSegModel<float> m(small_config());
    m.add_task();
    save_model(m, dir.path());
    auto other = small_config();
    other.base_channels = 6;
    ACLSegModel<float> wrong(other);
    wrong.add_task();
    EXPECT_THROW(assign_parameters(read_checkpoint(dir.path()), wrong.parameters()), ShapeError);
}

TEST(Checkpoint, TruncatedBlobIsCorruption) {
    testutil::TempDir dir;
    ACLSegModel<float> m(small_config());
    save_model(m, dir.path());
    std::filesystem::resize_file(dir.path() / "params.bin", 8);
    EXPECT_THROW(read_checkpoint(dir.path()), CorruptionError);
}
