#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "pcarch/checkpoint.hpp"
#include "pcarch/net.hpp"
#include "pcarch/profiler.hpp"
#include "support.hpp"

using namespace pcarch;
using namespace pcarch::testing;

namespace {

ArchConfig config(const std::string& vec, InputShape in, std::size_t classes, bool bn = true) {
    ArchConfig c;
    c.tokens = parse_vector_notation(vec);
    c.input = in;
    c.classes = classes;
    c.batch_norm = bn;
    return c;
}

// Direct nested-loop evaluation of the eval-mode pipeline, returning the
// per-conv taps (post-BN, pre-ReLU) and the logits.
struct NaiveOut {
    std::vector<std::vector<double>> taps;
    std::vector<double> logits;
};

NaiveOut naive_forward(const NetParams<float>& p, const std::vector<float>& input, std::size_t n) {
    const auto& cfg = p.config;
    std::size_t h = cfg.input.h, w = cfg.input.w, c = cfg.input.c;
    std::vector<double> x(input.begin(), input.end());
    NaiveOut out;
    std::size_t conv = 0;
    for (const auto& t : cfg.tokens) {
        if (is_conv(t)) {
            const auto& cp = p.convs[conv++];
            const std::size_t co = cp.out_channels;
            std::vector<double> y(n * h * w * co, 0.0);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < h; ++i)
                    for (std::size_t j = 0; j < w; ++j)
                        for (std::size_t o = 0; o < co; ++o) {
                            double s = cp.bias[o];
                            for (std::size_t ci = 0; ci < c; ++ci)
                                for (int dy = -1; dy <= 1; ++dy)
                                    for (int dx = -1; dx <= 1; ++dx) {
                                        const long yy = long(i) + dy, xx = long(j) + dx;
                                        if (yy < 0 || xx < 0 || yy >= long(h) || xx >= long(w)) continue;
                                        s += double(cp.weight[((o * c + ci) * 3 + (dy + 1)) * 3 + (dx + 1)]) *
                                             x[((b * h + yy) * w + xx) * c + ci];
                                    }
                            if (cfg.batch_norm)
                                s = (s - cp.running_mean[o]) / std::sqrt(double(cp.running_var[o]) + 1e-5) *
                                        cp.bn_scale[o] +
                                    cp.bn_shift[o];
                            y[((b * h + i) * w + j) * co + o] = s;
                        }
            out.taps.push_back(y);
            for (auto& v : y) v = std::max(v, 0.0);
            x = std::move(y);
            c = co;
        } else {
            std::vector<double> y(n * (h / 2) * (w / 2) * c);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t i = 0; i < h / 2; ++i)
                    for (std::size_t j = 0; j < w / 2; ++j)
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            double m = -INFINITY;
                            for (std::size_t a = 0; a < 2; ++a)
                                for (std::size_t d = 0; d < 2; ++d)
                                    m = std::max(m, x[((b * h + 2 * i + a) * w + 2 * j + d) * c + ch]);
                            y[((b * (h / 2) + i) * (w / 2) + j) * c + ch] = m;
                        }
            x = std::move(y);
            h /= 2;
            w /= 2;
        }
    }
    const std::size_t flat = h * w * c;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t k = 0; k < cfg.classes; ++k) {
            double s = p.dense_bias[k];
            for (std::size_t f = 0; f < flat; ++f) s += double(p.dense_weight[k * flat + f]) * x[b * flat + f];
            out.logits.push_back(s);
        }
    return out;
}

std::vector<float> random_input(const ArchConfig& cfg, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g;
    std::vector<float> v(n * cfg.input.h * cfg.input.w * cfg.input.c);
    for (auto& x : v) x = g(rng);
    return v;
}

void randomize_bn(NetParams<float>& p, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<float> u(0.5f, 1.5f), s(-0.5f, 0.5f);
    for (auto& c : p.convs) {
        for (auto& v : c.bias) v = s(rng);
        for (auto& v : c.bn_scale) v = u(rng);
        for (auto& v : c.bn_shift) v = s(rng);
        for (auto& v : c.running_mean) v = s(rng);
        for (auto& v : c.running_var) v = u(rng);
    }
}

// Two-class set separable by the sign of the mean intensity.
Dataset separable(std::size_t count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> g(0.0f, 0.3f);
    Dataset d{4, 4, 1, 2, {}, {}};
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t label = i % 2;
        for (std::size_t k = 0; k < 16; ++k) d.images.push_back((label ? 1.0f : -1.0f) + g(rng));
        d.labels.push_back(label);
    }
    return d;
}

}  // namespace

TEST(Build, DeterministicPerSeed) {
    const auto cfg = config("[4, 'M', 6]", {8, 8, 3}, 5);
    const auto a = build<float>(cfg, 17), b = build<float>(cfg, 17), c = build<float>(cfg, 18);
    EXPECT_EQ(a.convs[1].weight, b.convs[1].weight);
    EXPECT_EQ(a.dense_weight, b.dense_weight);
    EXPECT_NE(a.convs[0].weight, c.convs[0].weight);
}

TEST(Build, ClassifierInputDimension) {
    const auto p = build<float>(config("[8, 'M', 16]", {8, 8, 1}, 10), 1);
    EXPECT_EQ(p.flat_dim(), 16u * 4 * 4);
    EXPECT_EQ(parameter_count(p), std::size_t(count(p.config).params));
}

TEST(Build, Vgg16HasThirteenConvs) {
    const auto p = build<float>(vgg16_cifar10(), 1);
    EXPECT_EQ(p.convs.size(), 13u);
    EXPECT_EQ(p.flat_dim(), 512u);
}

TEST(Forward, ZeroWeightsGiveShiftAndEqualLogits) {
    auto p = build<float>(config("[4, 'M', 3]", {4, 4, 2}, 3), 1);
    for (auto& c : p.convs) std::fill(c.weight.begin(), c.weight.end(), 0.0f);
    std::fill(p.dense_weight.begin(), p.dense_weight.end(), 0.0f);
    const auto in = random_input(p.config, 2, 3);
    const auto r = forward(p, std::span<const float>(in), 2, {Mode::eval, TapPoint::post_bn, true});
    for (const auto& t : r.taps)
        for (float v : t.data) EXPECT_EQ(v, 0.0f);
    for (std::size_t i = 1; i < r.logits.size(); ++i) EXPECT_EQ(r.logits[i], r.logits[0]);
}

TEST(Forward, IdentityKernelTapsInput) {
    auto p = build<float>(config("[1]", {3, 3, 1}, 2, false), 1);
    std::fill(p.convs[0].weight.begin(), p.convs[0].weight.end(), 0.0f);
    p.convs[0].weight[4] = 1.0f;
    const auto in = random_input(p.config, 2, 5);
    const auto r = forward(p, std::span<const float>(in), 2, {Mode::eval, TapPoint::post_bn, true});
    ASSERT_EQ(r.taps.size(), 1u);
    EXPECT_EQ(r.taps[0].data, in);
    EXPECT_EQ(r.taps[0].dims, (TensorDims{2, 3, 3, 1}));
}

TEST(Forward, MatchesDirectConvolutionOracle) {
    for (bool bn : {true, false}) {
        auto p = build<float>(config("[5, 'M', 4, 'M', 'M', 3]", {9, 9, 2}, 4, bn), 3);
        if (bn) randomize_bn(p, 4);
        const auto in = random_input(p.config, 3, 6);
        const auto r = forward(p, std::span<const float>(in), 3, {Mode::eval, TapPoint::post_bn, true});
        const auto o = naive_forward(p, in, 3);
        ASSERT_EQ(r.taps.size(), o.taps.size());
        for (std::size_t l = 0; l < o.taps.size(); ++l)
            for (std::size_t i = 0; i < o.taps[l].size(); ++i)
                ASSERT_NEAR(r.taps[l].data[i], o.taps[l][i], 1e-5 * std::max(1.0, std::abs(o.taps[l][i])));
        for (std::size_t i = 0; i < o.logits.size(); ++i) EXPECT_NEAR(r.logits[i], o.logits[i], 1e-4);
    }
}

TEST(Forward, PreBnTapSkipsNormalization) {
    auto p = build<float>(config("[3]", {4, 4, 1}, 2), 2);
    randomize_bn(p, 9);
    const auto in = random_input(p.config, 1, 1);
    const auto pre = forward(p, std::span<const float>(in), 1, {Mode::eval, TapPoint::pre_bn, true});
    const auto post = forward(p, std::span<const float>(in), 1, {Mode::eval, TapPoint::post_bn, true});
    const auto& c = p.convs[0];
    for (std::size_t i = 0; i < pre.taps[0].data.size(); ++i) {
        const std::size_t o = i % 3;
        const double expect = (pre.taps[0].data[i] - c.running_mean[o]) / std::sqrt(c.running_var[o] + 1e-5) *
                                  c.bn_scale[o] +
                              c.bn_shift[o];
        EXPECT_NEAR(post.taps[0].data[i], expect, 1e-5);
    }
    EXPECT_EQ(pre.logits, post.logits);
}

TEST(Forward, RejectsWrongInputSize) {
    const auto p = build<float>(config("[2]", {4, 4, 1}, 2), 1);
    std::vector<float> in(10);
    EXPECT_THROW(forward(p, std::span<const float>(in), 1), DimensionError);
}

TEST(Loss, UniformLogits) {
    std::vector<double> logits(2 * 4, 0.3), d;
    std::vector<std::uint32_t> labels{1, 3};
    const double l = softmax_cross_entropy<double>(logits, labels, 4, &d);
    EXPECT_NEAR(l, std::log(4.0), 1e-12);
    EXPECT_NEAR(d[1], (0.25 - 1.0) / 2.0, 1e-12);
    EXPECT_NEAR(d[0], 0.25 / 2.0, 1e-12);
}

TEST(Gradient, MatchesFiniteDifferencesWithBatchNorm) {
    const auto cfg = config("[3, 'M', 4]", {6, 6, 2}, 3);
    for (const auto& g : gradient_check(build<double>(cfg, 5), random_batch(cfg, 4, 8)))
        EXPECT_TRUE(g.pass) << g.name << " diff " << g.diff_norm << " analytic " << g.analytic_norm;
}

TEST(Gradient, MatchesFiniteDifferencesWithoutBatchNorm) {
    const auto cfg = config("[3, 'M', 4]", {6, 6, 2}, 3, false);
    for (const auto& g : gradient_check(build<double>(cfg, 6), random_batch(cfg, 4, 9)))
        EXPECT_TRUE(g.pass) << g.name << " diff " << g.diff_norm << " analytic " << g.analytic_norm;
}

TEST(Train, ZeroLearningRateOnlyMovesRunningStats) {
    const auto cfg = config("[3]", {4, 4, 1}, 2);
    const auto p0 = build<float>(cfg, 1);
    Hyper h;
    h.epochs = 2;
    h.learning_rate = 0.0;
    h.batch_size = 8;
    const auto r = train(p0, separable(32, 1), h, 3);
    EXPECT_EQ(r.params.convs[0].weight, p0.convs[0].weight);
    EXPECT_EQ(r.params.convs[0].bn_scale, p0.convs[0].bn_scale);
    EXPECT_EQ(r.params.dense_weight, p0.dense_weight);
    EXPECT_NE(r.params.convs[0].running_mean, p0.convs[0].running_mean);
    EXPECT_EQ(r.history.size(), 2u);
}

TEST(Train, FitsSeparableData) {
    const auto cfg = config("[4]", {4, 4, 1}, 2);
    Hyper h;
    h.epochs = 20;
    h.batch_size = 16;
    const auto data = separable(200, 2);
    const auto r = train(build<float>(cfg, 2), data, h, 4);
    EXPECT_GE(r.history.back().train_accuracy, 0.99);
    EXPECT_GE(evaluate(r.params, data), 0.99);
}

TEST(Train, DeterministicPerSeed) {
    const auto cfg = config("[3, 'M', 3]", {4, 4, 1}, 2);
    Hyper h;
    h.epochs = 2;
    h.batch_size = 8;
    const auto data = separable(40, 3);
    const auto a = train(build<float>(cfg, 1), data, h, 5), b = train(build<float>(cfg, 1), data, h, 5);
    EXPECT_EQ(a.params.dense_weight, b.params.dense_weight);
    EXPECT_EQ(a.params.convs[1].running_var, b.params.convs[1].running_var);
}

TEST(Train, Errors) {
    const auto cfg = config("[2]", {4, 4, 1}, 2);
    auto data = separable(8, 1);
    data.labels[3] = 5;
    EXPECT_THROW(train(build<float>(cfg, 1), data, Hyper{}, 1), DataError);
    EXPECT_THROW(train(build<float>(cfg, 1), Dataset{}, Hyper{}, 1), ArgumentError);
    Hyper wild;
    wild.learning_rate = 1e30;
    wild.epochs = 3;
    wild.batch_size = 4;
    EXPECT_THROW(train(build<float>(cfg, 1), separable(16, 1), wild, 1), TrainingError);
}

TEST(Evaluate, ConstantLogitsAreChance) {
    auto p = build<float>(config("[2]", {4, 4, 1}, 10), 1);
    std::fill(p.dense_weight.begin(), p.dense_weight.end(), 0.0f);
    Dataset d{4, 4, 1, 10, std::vector<float>(100 * 16, 0.5f), {}};
    for (std::uint32_t i = 0; i < 100; ++i) d.labels.push_back(i % 10);
    EXPECT_DOUBLE_EQ(evaluate(p, d), 0.1);
}

TEST(Evaluate, HandBuiltPerfectClassifier) {
    // one-pixel images, conv copies the pixel, class 1 wins when the pixel exceeds 0.5
    auto p = build<float>(config("[1]", {1, 1, 1}, 2, false), 1);
    std::fill(p.convs[0].weight.begin(), p.convs[0].weight.end(), 0.0f);
    p.convs[0].weight[4] = 1.0f;
    p.dense_weight = {0.0f, 1.0f};
    p.dense_bias = {0.5f, 0.0f};
    Dataset d{1, 1, 1, 2, {0.0f, 1.0f, 0.2f, 0.9f}, {0, 1, 0, 1}};
    EXPECT_DOUBLE_EQ(evaluate(p, d), 1.0);
    EXPECT_THROW(evaluate(p, Dataset{}), ArgumentError);
}

TEST(Evaluate, OrderIndependent) {
    const auto data = make_synthetic(60, 3);
    const auto p = build<float>(config("[4, 'M', 4]", {16, 16, 3}, 10), 2);
    std::vector<std::size_t> idx(60);
    for (std::size_t i = 0; i < 60; ++i) idx[i] = (i * 37) % 60;
    EXPECT_DOUBLE_EQ(evaluate(p, data, 7), evaluate(p, select(data, idx), 16));
}

TEST(RemoveFilter, EquivalentToSilencingTheFilter) {
    for (std::size_t layer : {0u, 1u}) {
        auto p = build<float>(config("[4, 'M', 3]", {4, 4, 2}, 3, false), 7);
        const auto reduced = remove_filter(p, layer, 1);
        EXPECT_EQ(reduced.convs[layer].out_channels, 4u - layer - 1);
        EXPECT_EQ(reduced.config.conv_widths()[layer], 4u - layer - 1);
        // zero the outgoing weights of filter 1 in the full net
        if (layer == 0) {
            for (std::size_t o = 0; o < 3; ++o)
                for (std::size_t k = 0; k < 9; ++k) p.convs[1].weight[(o * 4 + 1) * 9 + k] = 0.0f;
        } else {
            const std::size_t flat = p.flat_dim();
            for (std::size_t k = 0; k < 3; ++k)
                for (std::size_t pos = 0; pos < 4; ++pos) p.dense_weight[k * flat + pos * 3 + 1] = 0.0f;
        }
        const auto in = random_input(p.config, 2, 1);
        const auto a = forward(p, std::span<const float>(in), 2);
        const auto b = forward(reduced, std::span<const float>(in), 2);
        for (std::size_t i = 0; i < a.logits.size(); ++i) EXPECT_NEAR(a.logits[i], b.logits[i], 1e-5);
    }
    const auto p = build<float>(config("[2]", {4, 4, 1}, 2), 1);
    EXPECT_THROW(remove_filter(p, 1, 0), ArgumentError);
    EXPECT_THROW(remove_filter(p, 0, 2), ArgumentError);
    EXPECT_THROW(remove_filter(remove_filter(p, 0, 0), 0, 0), ArgumentError);
}

TEST(Checkpoint, RoundTripAndErrors) {
    TempDir dir("ckpt");
    auto p = build<float>(config("[3, 'M', 2]", {4, 4, 1}, 2), 4);
    randomize_bn(p, 2);
    save_checkpoint(p, dir / "m.ckpt");
    const auto q = load_checkpoint<float>(dir / "m.ckpt");
    EXPECT_EQ(q.config, p.config);
    EXPECT_EQ(q.convs[1].weight, p.convs[1].weight);
    EXPECT_EQ(q.convs[0].running_var, p.convs[0].running_var);
    EXPECT_EQ(q.dense_bias, p.dense_bias);
    const auto d = convert<double>(q);
    EXPECT_EQ(d.convs[0].weight[0], static_cast<double>(p.convs[0].weight[0]));

    std::filesystem::resize_file(dir / "m.ckpt", std::filesystem::file_size(dir / "m.ckpt") - 4);
    EXPECT_THROW(load_checkpoint<float>(dir / "m.ckpt"), LengthError);
    EXPECT_THROW(load_checkpoint<float>(dir / "absent.ckpt"), FormatError);
    save_checkpoint(p, dir / "m.ckpt");
    save_checkpoint(build<float>(config("[5]", {4, 4, 1}, 2), 1), dir / "other.ckpt");
    std::filesystem::copy_file(dir / "m.ckpt.json", dir / "other.ckpt.json",
                               std::filesystem::copy_options::overwrite_existing);
    EXPECT_THROW(load_checkpoint<float>(dir / "other.ckpt"), ConsistencyError);
}
