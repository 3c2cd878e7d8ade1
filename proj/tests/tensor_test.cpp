#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tilegrad/tensor.hpp"

using namespace tilegrad;

namespace {

LayerSpec conv(int k, int s, int out, Activation act = Activation::none) {
    LayerSpec l;
    l.kind = LayerKind::convolution;
    l.kernel = k;
    l.stride = s;
    l.pad = k / 2;
    l.out_channels = out;
    l.activation = act;
    return l;
}

LayerSpec pool(int k, int s = 0) {
    LayerSpec l;
    l.kind = LayerKind::maxpool;
    l.kernel = k;
    l.stride = s == 0 ? k : s;
    return l;
}

template <typename T>
Tensor<T> filled(int w, int h, int d, T v) {
    Tensor<T> t(w, h, d);
    for (auto& x : t.data)
        x = v;
    return t;
}

} // namespace

TEST(ConvForward, PointwiseIdentity) {
    Tensor<float> in(4, 4, 1);
    for (int i = 0; i < 16; ++i)
        in.data[i] = float(i) - 7.5f;
    FilterBank<float> bank(1, 1, 1);
    bank.weight(0, 0, 0, 0) = 1.0f;
    Tensor<float> out = conv_forward(in, bank, conv(1, 1, 1));
    EXPECT_EQ(out.data, in.data);
}

TEST(ConvForward, OnesKernelCountsCoverage) {
    // 3x3 ones against a 3x3 ones map with same padding: each output counts
    // how many taps land inside the map.
    Tensor<float> in = filled(3, 3, 1, 1.0f);
    FilterBank<float> bank(3, 1, 1);
    for (auto& w : bank.weights)
        w = 1.0f;
    Tensor<float> out = conv_forward(in, bank, conv(3, 1, 1));
    std::vector<float> want = {4, 6, 4, 6, 9, 6, 4, 6, 4};
    EXPECT_EQ(out.data, want);
}

TEST(ConvForward, StrideHalvesOutput) {
    Tensor<float> in = filled(4, 4, 1, 1.0f);
    FilterBank<float> bank(3, 1, 1);
    Tensor<float> out = conv_forward(in, bank, conv(3, 2, 1));
    EXPECT_EQ(out.width, 2);
    EXPECT_EQ(out.height, 2);
}

TEST(ConvForward, ChannelsAccumulate) {
    Tensor<float> in(2, 2, 2);
    for (int c = 0; c < 2; ++c)
        for (int y = 0; y < 2; ++y)
            for (int x = 0; x < 2; ++x)
                in.at(x, y, c) = c == 0 ? 1.0f : 10.0f;
    FilterBank<float> bank(1, 2, 1);
    bank.weight(0, 0, 0, 0) = 2.0f;
    bank.weight(0, 1, 0, 0) = 3.0f;
    Tensor<float> out = conv_forward(in, bank, conv(1, 1, 1));
    for (float v : out.data)
        EXPECT_FLOAT_EQ(v, 32.0f);
}

TEST(ConvForward, LeakyActivationScalesNegatives) {
    Tensor<float> in = filled(1, 1, 1, -2.0f);
    FilterBank<float> bank(1, 1, 1);
    bank.weight(0, 0, 0, 0) = 1.0f;
    Tensor<float> out = conv_forward(in, bank, conv(1, 1, 1, Activation::leaky));
    EXPECT_FLOAT_EQ(out.data[0], -0.2f);
}

TEST(ConvForward, IsLinearInInput) {
    ModelSpec m;
    m.input = {6, 5, 2};
    LayerSpec layer = conv(3, 1, 3);
    FilterBank<double> bank(3, 2, 3);
    tgtest::fill_random(bank, 7);
    Tensor<double> a(6, 5, 2), b(6, 5, 2);
    tgtest::fill_random(a, 1);
    tgtest::fill_random(b, 2);
    Tensor<double> mix(6, 5, 2);
    for (size_t i = 0; i < mix.data.size(); ++i)
        mix.data[i] = 2.0 * a.data[i] - 0.5 * b.data[i];
    Tensor<double> out_mix = conv_forward(mix, bank, layer);
    Tensor<double> out_a = conv_forward(a, bank, layer);
    Tensor<double> out_b = conv_forward(b, bank, layer);
    for (size_t i = 0; i < out_mix.data.size(); ++i)
        EXPECT_NEAR(out_mix.data[i], 2.0 * out_a.data[i] - 0.5 * out_b.data[i], 1e-12);
}

TEST(ConvForward, MismatchedBankRejected) {
    Tensor<float> in(4, 4, 2);
    FilterBank<float> bank(3, 1, 1);
    EXPECT_THROW(conv_forward(in, bank, conv(3, 1, 1)), shape_error);
}

TEST(ConvForward, KernelExceedingPaddedMapRejected) {
    LayerSpec l = conv(5, 1, 1);
    l.pad = 0;
    EXPECT_THROW(layer_output_dims(l, {3, 3, 1}), shape_error);
}

TEST(ConvBackwardDelta, ZeroDeltaStaysZero) {
    Tensor<float> delta(3, 3, 2);
    FilterBank<float> bank(3, 1, 2);
    tgtest::fill_random(bank, 3);
    Tensor<float> out = conv_backward_delta(delta, bank, conv(3, 1, 2), {3, 3, 1});
    for (float v : out.data)
        EXPECT_EQ(v, 0.0f);
}

TEST(ConvBackwardDelta, ScalarChainMultipliesByWeight) {
    Tensor<float> delta = filled(1, 1, 1, 3.0f);
    FilterBank<float> bank(1, 1, 1);
    bank.weight(0, 0, 0, 0) = -0.5f;
    Tensor<float> out = conv_backward_delta(delta, bank, conv(1, 1, 1), {1, 1, 1});
    EXPECT_FLOAT_EQ(out.data[0], -1.5f);
}

TEST(MaxPool, PicksWindowMaximum) {
    Tensor<float> in(2, 2, 1);
    in.data = {1, 2, 3, 4};
    auto [out, idx] = maxpool_forward(in, pool(2));
    ASSERT_EQ(out.data.size(), 1u);
    EXPECT_FLOAT_EQ(out.data[0], 4.0f);
    EXPECT_EQ(idx.data[0], (PoolIdx{1, 1}));
}

TEST(MaxPool, TiesGoToFirstInScanOrder) {
    Tensor<float> in = filled(2, 2, 1, 5.0f);
    auto [out, idx] = maxpool_forward(in, pool(2));
    EXPECT_EQ(idx.data[0], (PoolIdx{0, 0}));
}

TEST(MaxPool, AscendingMapKeepsBlockMaxima) {
    Tensor<float> in(4, 4, 1);
    for (int i = 0; i < 16; ++i)
        in.data[i] = float(i);
    auto [out, idx] = maxpool_forward(in, pool(2));
    std::vector<float> want = {5, 7, 13, 15};
    EXPECT_EQ(out.data, want);
}

TEST(MaxPool, WindowLargerThanMapRejected) {
    Tensor<float> in(3, 3, 1);
    EXPECT_THROW(maxpool_forward(in, pool(4)), shape_error);
}

TEST(MaxPoolBackward, RoutesDeltaToArgmax) {
    Tensor<float> in(4, 2, 1);
    in.data = {0, 9, 1, 2,
               3, 4, 5, 6};
    auto [out, idx] = maxpool_forward(in, pool(2));
    Tensor<float> delta(2, 1, 1);
    delta.data = {7.0f, 11.0f};
    Tensor<float> back = maxpool_backward(delta, idx, pool(2), in.dims());
    std::vector<float> want = {0, 7, 0, 0,
                               0, 0, 0, 11};
    EXPECT_EQ(back.data, want);
}

TEST(MaxPoolBackward, ConservesDeltaMass) {
    Tensor<float> in(8, 8, 3);
    tgtest::fill_random(in, 11);
    auto [out, idx] = maxpool_forward(in, pool(2));
    Tensor<float> delta(out.dims());
    tgtest::fill_random(delta, 12);
    Tensor<float> back = maxpool_backward(delta, idx, pool(2), in.dims());
    double in_sum = 0, out_sum = 0;
    for (float v : delta.data)
        in_sum += v;
    for (float v : back.data)
        out_sum += v;
    EXPECT_NEAR(in_sum, out_sum, 1e-4);
}

TEST(MaxPoolBackward, OverlappingWindowsSumContributions) {
    // Kernel 3, stride 2 on a width-5 strip: input column 2 sits in both
    // windows; make it the maximum so both deltas land there.
    Tensor<float> in(5, 3, 1);
    in.data = {0, 0, 9, 0, 0,
               0, 0, 0, 0, 0,
               0, 0, 0, 0, 0};
    auto [out, idx] = maxpool_forward(in, pool(3, 2));
    ASSERT_EQ(out.width, 2);
    Tensor<float> delta(out.dims());
    delta.data = {2.0f, 5.0f};
    Tensor<float> back = maxpool_backward(delta, idx, pool(3, 2), in.dims());
    EXPECT_FLOAT_EQ(back.at(2, 0, 0), 7.0f);
}

TEST(MaxPoolBackward, MismatchedIndexMapRejected) {
    Tensor<float> delta(2, 2, 1);
    Tensor<PoolIdx> idx;
    idx.width = idx.height = 1;
    idx.depth = 1;
    idx.data.resize(1);
    EXPECT_THROW(maxpool_backward(delta, idx, pool(2), {4, 4, 1}), shape_error);
}

// ---------------------------------------------------------------------------
// Gradient checks against central finite differences (forward-only oracle)
// ---------------------------------------------------------------------------

namespace {

// Runs the analytic backward pass and compares every weight and input
// gradient against finite differences.
void gradcheck(const ModelSpec& model, std::uint64_t seed,
               double rel = 1e-3, double abs_floor = 1e-5) {
    std::vector<FilterBank<double>> banks;
    for (int l = 0, cin = model.input.depth; l < model.layer_count(); ++l) {
        const auto& layer = model.layers[l];
        if (layer.is_conv()) {
            FilterBank<double> b(layer.kernel, cin, layer.out_channels);
            tgtest::fill_random(b, seed + 100 + l, 0.5);
            cin = layer.out_channels;
            banks.push_back(std::move(b));
        } else {
            banks.emplace_back(0, 0, 0);
        }
    }
    Tensor<double> sample(model.input);
    Tensor<double> target(model.map_dims(model.layer_count()));
    tgtest::fill_random(sample, seed);
    tgtest::fill_random(target, seed + 1);

    auto work = banks;
    for (auto& b : work)
        b.zero_grads();
    auto result = reference_train_step(model, work, sample, target);

    const double eps = 1e-3;
    for (int l = 0; l < model.layer_count(); ++l) {
        if (!model.layers[l].is_conv())
            continue;
        for (size_t wi = 0; wi < work[l].weights.size(); ++wi) {
            double fd = tgtest::fd_weight_gradient(model, banks, sample, target, l, wi, eps);
            ASSERT_TRUE(tgtest::close(work[l].grads[wi], fd, rel, abs_floor))
                << "layer " << l << " weight " << wi
                << " analytic=" << work[l].grads[wi] << " fd=" << fd;
        }
    }
    for (size_t i = 0; i < sample.data.size(); ++i) {
        double fd = tgtest::fd_input_gradient(model, banks, sample, target, i, eps);
        ASSERT_TRUE(tgtest::close(result.deltas[0].data[i], fd, rel, abs_floor))
            << "input element " << i
            << " analytic=" << result.deltas[0].data[i] << " fd=" << fd;
    }
}

} // namespace

TEST(GradCheck, SingleConvLayer) {
    ModelSpec m;
    m.input = {6, 6, 2};
    m.layers = {conv(3, 1, 3, Activation::leaky)};
    gradcheck(m, 21);
}

TEST(GradCheck, StridedConv) {
    ModelSpec m;
    m.input = {7, 7, 1};
    m.layers = {conv(3, 2, 2, Activation::leaky)};
    gradcheck(m, 22);
}

TEST(GradCheck, ConvPoolConvStack) {
    ModelSpec m;
    m.input = {8, 8, 2};
    m.layers = {conv(3, 1, 3, Activation::leaky), pool(2), conv(3, 1, 2, Activation::leaky)};
    gradcheck(m, 23);
}

TEST(GradCheck, FourLayerStack) {
    ModelSpec m;
    m.input = {12, 12, 2};
    m.layers = {conv(3, 1, 3, Activation::leaky), conv(1, 1, 4, Activation::leaky), pool(2),
                conv(3, 1, 2, Activation::leaky)};
    gradcheck(m, 24);
}

TEST(GradCheck, NoActivationStack) {
    ModelSpec m;
    m.input = {6, 6, 1};
    m.layers = {conv(3, 1, 2), conv(3, 1, 1)};
    gradcheck(m, 25);
}

// ---------------------------------------------------------------------------
// Reference trainer
// ---------------------------------------------------------------------------

TEST(ReferenceStep, PerfectPredictionGivesZeroGradients) {
    ModelSpec m;
    m.input = {5, 5, 1};
    m.layers = {conv(3, 1, 2, Activation::leaky)};
    std::vector<FilterBank<float>> banks = {FilterBank<float>(3, 1, 2)};
    tgtest::fill_random(banks[0], 31);
    Tensor<float> sample(m.input);
    tgtest::fill_random(sample, 32);
    Tensor<float> target = conv_forward(sample, banks[0], m.layers[0]);
    auto r = reference_train_step(m, banks, sample, target);
    EXPECT_EQ(r.loss, 0.0f);
    for (float g : banks[0].grads)
        EXPECT_EQ(g, 0.0f);
}

TEST(ReferenceStep, ScalarClosedForm) {
    // One 1x1 input x, one 1x1 weight w: loss = (w*x - t)^2 / 2, so
    // dL/dw = (w*x - t) * x.
    ModelSpec m;
    m.input = {1, 1, 1};
    m.layers = {conv(1, 1, 1)};
    std::vector<FilterBank<float>> banks = {FilterBank<float>(1, 1, 1)};
    banks[0].weight(0, 0, 0, 0) = 0.75f;
    Tensor<float> sample = filled(1, 1, 1, 2.0f);
    Tensor<float> target = filled(1, 1, 1, 0.5f);
    auto r = reference_train_step(m, banks, sample, target);
    float residual = 0.75f * 2.0f - 0.5f;
    EXPECT_FLOAT_EQ(r.loss, residual * residual / 2.0f);
    EXPECT_FLOAT_EQ(banks[0].grads[0], residual * 2.0f);
}

TEST(ReferenceStep, DeterministicAcrossRuns) {
    ModelSpec m;
    m.input = {9, 7, 2};
    m.layers = {conv(3, 1, 3, Activation::leaky), pool(2), conv(3, 1, 2, Activation::leaky)};
    auto run = [&] {
        std::vector<FilterBank<float>> banks = {FilterBank<float>(3, 2, 3), FilterBank<float>(0, 0, 0),
                                                FilterBank<float>(3, 3, 2)};
        tgtest::fill_random(banks[0], 41);
        tgtest::fill_random(banks[2], 42);
        Tensor<float> sample(m.input);
        Tensor<float> target(m.map_dims(3));
        tgtest::fill_random(sample, 43);
        tgtest::fill_random(target, 44);
        auto r = reference_train_step(m, banks, sample, target);
        return std::make_pair(banks, r.loss);
    };
    auto [banks1, loss1] = run();
    auto [banks2, loss2] = run();
    EXPECT_EQ(loss1, loss2);
    for (size_t l = 0; l < banks1.size(); ++l)
        EXPECT_EQ(banks1[l].grads, banks2[l].grads);
}

TEST(ReferenceStep, AllValuesFinite) {
    ModelSpec m;
    m.input = {10, 10, 3};
    m.layers = {conv(3, 1, 4, Activation::leaky), pool(2), conv(3, 2, 2, Activation::leaky)};
    std::vector<FilterBank<float>> banks = {FilterBank<float>(3, 3, 4), FilterBank<float>(0, 0, 0),
                                            FilterBank<float>(3, 4, 2)};
    tgtest::fill_random(banks[0], 51);
    tgtest::fill_random(banks[2], 52);
    Tensor<float> sample(m.input);
    Tensor<float> target(m.map_dims(3));
    tgtest::fill_random(sample, 53);
    tgtest::fill_random(target, 54);
    auto r = reference_train_step(m, banks, sample, target);
    EXPECT_TRUE(all_finite(r.activations[3].data));
    EXPECT_TRUE(all_finite(r.deltas[0].data));
    EXPECT_TRUE(all_finite(banks[0].grads));
    EXPECT_TRUE(std::isfinite(r.loss));
}

TEST(Sgd, AppliesScaledGradient) {
    FilterBank<float> bank(1, 1, 1);
    bank.weights[0] = 1.0f;
    bank.grads[0] = 2.0f;
    sgd_update(bank, 0.1f, 1);
    EXPECT_FLOAT_EQ(bank.weights[0], 0.8f);
    EXPECT_EQ(bank.grads[0], 0.0f);
}

TEST(Sgd, BatchAveragesGradient) {
    FilterBank<float> bank(1, 1, 1);
    bank.weights[0] = 1.0f;
    bank.grads[0] = 2.0f;
    sgd_update(bank, 0.1f, 4);
    EXPECT_FLOAT_EQ(bank.weights[0], 0.95f);
}

TEST(Sgd, RejectsNonPositiveBatch) {
    FilterBank<float> bank(1, 1, 1);
    EXPECT_THROW(sgd_update(bank, 0.1f, 0), shape_error);
}

TEST(DimensionAlgebra, ChainMatchesPerMapQueries) {
    ModelSpec m;
    m.input = {48, 48, 3};
    m.layers = {conv(3, 1, 8, Activation::leaky), conv(3, 1, 8, Activation::leaky), pool(2),
                conv(3, 1, 12, Activation::leaky), pool(2), conv(3, 1, 8, Activation::leaky)};
    auto dims = m.all_map_dims();
    ASSERT_EQ(dims.size(), 7u);
    EXPECT_EQ(dims[2], (MapDims{48, 48, 8}));
    EXPECT_EQ(dims[3], (MapDims{24, 24, 8}));
    EXPECT_EQ(dims[5], (MapDims{12, 12, 12}));
    EXPECT_EQ(dims[6], (MapDims{12, 12, 8}));
    for (int i = 0; i <= m.layer_count(); ++i)
        EXPECT_EQ(m.map_dims(i), dims[i]);
}
