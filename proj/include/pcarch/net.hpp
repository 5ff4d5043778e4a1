#pragma once

// A small VGG-style CNN engine: 3x3/stride-1/pad-1 convolutions with optional
// batch norm and ReLU, 2x2 max-pool, one dense classifier. Tensors are NHWC.
// Enough to train, tap and retrain desk-scale nets; not a general framework.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pcarch/arch.hpp"
#include "pcarch/dataset.hpp"
#include "pcarch/errors.hpp"
#include "pcarch/filters.hpp"
#include "pcarch/tensor.hpp"

namespace pcarch {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using MatrixMap = Eigen::Map<RowMatrix<Real>>;
template <typename Real>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Real>>;

inline constexpr double kBatchNormEpsilon = 1e-5;

enum class Mode { train, eval };
enum class TapPoint { post_bn, pre_bn };

template <typename Real>
struct ConvParams {
    std::size_t in_channels = 0;
    std::size_t out_channels = 0;
    std::vector<Real> weight;  // out x in x 3 x 3
    std::vector<Real> bias;
    std::vector<Real> bn_scale;  // empty without batch norm
    std::vector<Real> bn_shift;
    std::vector<Real> running_mean;
    std::vector<Real> running_var;

    std::size_t kernel_size() const noexcept { return in_channels * 9; }
};

template <typename Real>
struct NetParams {
    ArchConfig config;
    std::vector<ConvParams<Real>> convs;
    std::vector<Real> dense_weight;  // classes x flat
    std::vector<Real> dense_bias;

    std::size_t flat_dim() const { return dense_bias.empty() ? 0 : dense_weight.size() / dense_bias.size(); }
};

/// Visits the learnable tensors in token order. `decayed` marks the tensors
/// that take weight decay (conv and dense weights).
template <typename Params, typename Fn>
void for_each_learnable(Params& p, Fn&& fn) {
    for (std::size_t i = 0; i < p.convs.size(); ++i) {
        auto& c = p.convs[i];
        const std::string prefix = "conv" + std::to_string(i) + ".";
        fn(prefix + "weight", std::span(c.weight), true);
        fn(prefix + "bias", std::span(c.bias), false);
        if (!c.bn_scale.empty()) {
            fn(prefix + "bn_scale", std::span(c.bn_scale), false);
            fn(prefix + "bn_shift", std::span(c.bn_shift), false);
        }
    }
    fn(std::string("classifier.weight"), std::span(p.dense_weight), true);
    fn(std::string("classifier.bias"), std::span(p.dense_bias), false);
}

template <typename Real>
std::size_t parameter_count(const NetParams<Real>& p) {
    std::size_t n = 0;
    for_each_learnable(p, [&](const std::string&, auto span, bool) { n += span.size(); });
    return n;
}

/// Deterministic initialization: conv weights ~ N(0, 2/fan_in), dense
/// weights ~ N(0, 1/fan_in), zero biases, unit BN scale, zero BN shift.
template <typename Real>
NetParams<Real> build(const ArchConfig& cfg, std::uint64_t seed) {
    const Geometry g = geometry(cfg);
    NetParams<Real> p;
    p.config = cfg;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (const auto& cg : g.convs) {
        ConvParams<Real> c;
        c.in_channels = cg.in_channels;
        c.out_channels = cg.out_channels;
        const double sd = std::sqrt(2.0 / static_cast<double>(9 * cg.in_channels));
        c.weight.resize(cg.out_channels * cg.in_channels * 9);
        for (auto& w : c.weight) w = static_cast<Real>(sd * gauss(rng));
        c.bias.assign(cg.out_channels, Real(0));
        if (cfg.batch_norm) {
            c.bn_scale.assign(cg.out_channels, Real(1));
            c.bn_shift.assign(cg.out_channels, Real(0));
            c.running_mean.assign(cg.out_channels, Real(0));
            c.running_var.assign(cg.out_channels, Real(1));
        }
        p.convs.push_back(std::move(c));
    }
    const std::size_t flat = g.flat_dim();
    const double sd = std::sqrt(1.0 / static_cast<double>(flat));
    p.dense_weight.resize(cfg.classes * flat);
    for (auto& w : p.dense_weight) w = static_cast<Real>(sd * gauss(rng));
    p.dense_bias.assign(cfg.classes, Real(0));
    return p;
}

/// Element-type conversion, e.g. float checkpoint -> double for gradient checks.
template <typename To, typename From>
NetParams<To> convert(const NetParams<From>& p) {
    auto cv = [](const std::vector<From>& v) { return std::vector<To>(v.begin(), v.end()); };
    NetParams<To> out;
    out.config = p.config;
    for (const auto& c : p.convs)
        out.convs.push_back({c.in_channels, c.out_channels, cv(c.weight), cv(c.bias), cv(c.bn_scale),
                             cv(c.bn_shift), cv(c.running_mean), cv(c.running_var)});
    out.dense_weight = cv(p.dense_weight);
    out.dense_bias = cv(p.dense_bias);
    return out;
}

template <typename Real>
FilterBank filter_bank(const NetParams<Real>& p, std::size_t layer) {
    if (layer >= p.convs.size()) throw ArgumentError("no conv layer " + std::to_string(layer));
    const auto& c = p.convs[layer];
    FilterBank fb(c.out_channels, c.in_channels, 3);
    std::copy(c.weight.begin(), c.weight.end(), fb.data.begin());
    return fb;
}

/// Input batch in NHWC layout matching the config's input shape.
template <typename Real>
struct Batch {
    std::size_t n = 0;
    std::vector<Real> data;
    std::vector<std::uint32_t> labels;
};

template <typename Real>
Batch<Real> make_batch(const Dataset& d, std::span<const std::size_t> indices) {
    Batch<Real> b;
    b.n = indices.size();
    b.data.reserve(b.n * d.image_size());
    for (std::size_t i : indices) {
        auto img = d.image(i);
        for (float v : img) b.data.push_back(static_cast<Real>(v));
        b.labels.push_back(d.labels[i]);
    }
    return b;
}

template <typename Real>
Batch<Real> make_batch(const Dataset& d, std::size_t first, std::size_t count) {
    std::vector<std::size_t> idx(count);
    std::iota(idx.begin(), idx.end(), first);
    return make_batch<Real>(d, idx);
}

namespace detail {

// Rows (n, y, x), columns (ci, ky, kx) to line up with the weight layout.
template <typename Real>
void im2col(std::span<const Real> in, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
            std::vector<Real>& cols) {
    const std::size_t k = c * 9;
    cols.assign(n * h * w * k, Real(0));
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                Real* row = cols.data() + ((b * h + y) * w + x) * k;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                    if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + kx) - 1;
                        if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                        const Real* px = in.data() + ((b * h + static_cast<std::size_t>(yy)) * w +
                                                      static_cast<std::size_t>(xx)) * c;
                        for (std::size_t ci = 0; ci < c; ++ci) row[ci * 9 + ky * 3 + kx] = px[ci];
                    }
                }
            }
}

template <typename Real>
void col2im(std::span<const Real> cols, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
            std::vector<Real>& out) {
    const std::size_t k = c * 9;
    out.assign(n * h * w * c, Real(0));
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const Real* row = cols.data() + ((b * h + y) * w + x) * k;
                for (std::size_t ky = 0; ky < 3; ++ky) {
                    const std::ptrdiff_t yy = static_cast<std::ptrdiff_t>(y + ky) - 1;
                    if (yy < 0 || yy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const std::ptrdiff_t xx = static_cast<std::ptrdiff_t>(x + kx) - 1;
                        if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(w)) continue;
                        Real* px = out.data() + ((b * h + static_cast<std::size_t>(yy)) * w +
                                                 static_cast<std::size_t>(xx)) * c;
                        for (std::size_t ci = 0; ci < c; ++ci) px[ci] += row[ci * 9 + ky * 3 + kx];
                    }
                }
            }
}

// 2x2 stride-2 max-pool (floor); argmax holds input offsets, first max wins.
template <typename Real>
void maxpool(std::span<const Real> in, std::size_t n, std::size_t h, std::size_t w, std::size_t c,
             std::vector<Real>& out, std::vector<std::uint32_t>& argmax) {
    const std::size_t oh = h / 2, ow = w / 2;
    out.assign(n * oh * ow * c, Real(0));
    argmax.assign(out.size(), 0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t x = 0; x < ow; ++x)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    std::size_t best = ((b * h + 2 * y) * w + 2 * x) * c + ch;
                    for (std::size_t dy = 0; dy < 2; ++dy)
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t idx = ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch;
                            if (in[idx] > in[best]) best = idx;
                        }
                    const std::size_t o = ((b * oh + y) * ow + x) * c + ch;
                    out[o] = in[best];
                    argmax[o] = static_cast<std::uint32_t>(best);
                }
}

}  // namespace detail

/// Everything the backward pass needs from one forward pass.
template <typename Real>
struct LayerCache {
    std::size_t h = 0, w = 0;
    std::vector<Real> cols;
    std::vector<Real> xhat;  // normalized pre-activation (BN only)
    std::vector<Real> inv_std;
    std::vector<Real> batch_mean;
    std::vector<Real> batch_var;  // biased
    std::vector<Real> y;          // post-BN, pre-ReLU
    struct Pool {
        std::size_t in_h, in_w;
        std::vector<std::uint32_t> argmax;
    };
    std::vector<Pool> pools;
};

template <typename Real>
struct ForwardCache {
    std::size_t n = 0;
    std::vector<LayerCache<Real>> layers;
    std::vector<Real> flat;  // n x flat_dim
};

template <typename Real>
struct ForwardResult {
    std::size_t n = 0;
    std::vector<Real> logits;  // n x classes
    std::vector<ActivationTensor> taps;

    std::size_t predict(std::size_t i, std::size_t classes) const {
        const Real* row = logits.data() + i * classes;
        return static_cast<std::size_t>(std::max_element(row, row + classes) - row);
    }
};

struct ForwardOptions {
    Mode mode = Mode::eval;
    TapPoint tap = TapPoint::post_bn;
    bool taps = false;
};

/// Forward pass. Never mutates params; in train mode batch statistics are
/// recorded in the cache so the caller can update running averages.
template <typename Real>
ForwardResult<Real> forward(const NetParams<Real>& p, std::span<const Real> input, std::size_t n,
                            const ForwardOptions& opt = {}, ForwardCache<Real>* cache = nullptr) {
    const auto& cfg = p.config;
    const Geometry g = geometry(cfg);
    const std::size_t in_size = cfg.input.h * cfg.input.w * cfg.input.c;
    if (n == 0 || input.size() != n * in_size)
        throw DimensionError("forward: batch holds " + std::to_string(input.size()) + " values, expected " +
                             std::to_string(n) + " x " + std::to_string(cfg.input.h) + "x" +
                             std::to_string(cfg.input.w) + "x" + std::to_string(cfg.input.c));
    ForwardResult<Real> res;
    res.n = n;
    if (cache) {
        cache->n = n;
        cache->layers.assign(g.convs.size(), {});
    }

    std::vector<Real> x(input.begin(), input.end());
    std::vector<Real> cols, z, pooled;
    std::vector<std::uint32_t> argmax;
    for (std::size_t l = 0; l < g.convs.size(); ++l) {
        const auto& cg = g.convs[l];
        const auto& cp = p.convs[l];
        const std::size_t h = cg.h, w = cg.w, cin = cg.in_channels, cout = cg.out_channels;
        const std::size_t rows = n * h * w, k = cin * 9;
        detail::im2col<Real>(x, n, h, w, cin, cols);
        z.resize(rows * cout);
        {
            ConstMatrixMap<Real> cm(cols.data(), rows, k);
            ConstMatrixMap<Real> wm(cp.weight.data(), cout, k);
            MatrixMap<Real> zm(z.data(), rows, cout);
            zm.noalias() = cm * wm.transpose();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cout; ++c) z[r * cout + c] += cp.bias[c];
        }
        LayerCache<Real>* lc = cache ? &cache->layers[l] : nullptr;
        if (opt.taps && opt.tap == TapPoint::pre_bn) {
            ActivationTensor t{static_cast<std::uint32_t>(l),
                               {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(h),
                                static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(cout)},
                               std::vector<float>(z.begin(), z.end())};
            res.taps.push_back(std::move(t));
        }

        std::vector<Real> y = z;
        if (!cp.bn_scale.empty()) {
            std::vector<Real> mean(cout, Real(0)), var(cout, Real(0));
            if (opt.mode == Mode::train) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cout; ++c) mean[c] += z[r * cout + c];
                for (auto& m : mean) m /= static_cast<Real>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cout; ++c) {
                        const Real d = z[r * cout + c] - mean[c];
                        var[c] += d * d;
                    }
                for (auto& v : var) v /= static_cast<Real>(rows);
            } else {
                mean = cp.running_mean;
                var = cp.running_var;
            }
            std::vector<Real> inv_std(cout);
            for (std::size_t c = 0; c < cout; ++c)
                inv_std[c] = Real(1) / std::sqrt(var[c] + static_cast<Real>(kBatchNormEpsilon));
            std::vector<Real> xhat(rows * cout);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cout; ++c) {
                    const std::size_t i = r * cout + c;
                    xhat[i] = (z[i] - mean[c]) * inv_std[c];
                    y[i] = cp.bn_scale[c] * xhat[i] + cp.bn_shift[c];
                }
            if (lc) {
                lc->xhat = std::move(xhat);
                lc->inv_std = std::move(inv_std);
                lc->batch_mean = std::move(mean);
                lc->batch_var = std::move(var);
            }
        }
        if (opt.taps && opt.tap == TapPoint::post_bn) {
            ActivationTensor t{static_cast<std::uint32_t>(l),
                               {static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(h),
                                static_cast<std::uint32_t>(w), static_cast<std::uint32_t>(cout)},
                               std::vector<float>(y.begin(), y.end())};
            res.taps.push_back(std::move(t));
        }

        x.resize(y.size());
        for (std::size_t i = 0; i < y.size(); ++i) x[i] = y[i] > Real(0) ? y[i] : Real(0);
        std::size_t ch = h, cw = w;
        for (std::size_t k2 = 0; k2 < cg.pools_after; ++k2) {
            detail::maxpool<Real>(x, n, ch, cw, cout, pooled, argmax);
            if (lc) lc->pools.push_back({ch, cw, argmax});
            x.swap(pooled);
            ch /= 2;
            cw /= 2;
        }
        if (lc) {
            lc->h = h;
            lc->w = w;
            lc->cols = std::move(cols);
            lc->y = std::move(y);
            cols = {};
        }
    }

    const std::size_t flat = g.flat_dim(), classes = cfg.classes;
    res.logits.resize(n * classes);
    {
        ConstMatrixMap<Real> fm(x.data(), n, flat);
        ConstMatrixMap<Real> wm(p.dense_weight.data(), classes, flat);
        MatrixMap<Real> lm(res.logits.data(), n, classes);
        lm.noalias() = fm * wm.transpose();
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t c = 0; c < classes; ++c) res.logits[b * classes + c] += p.dense_bias[c];
    }
    if (cache) cache->flat = std::move(x);
    return res;
}

/// Eval-mode forward that also returns every conv layer's activations.
template <typename Real>
ForwardResult<Real> forward_with_taps(const NetParams<Real>& p, const Batch<Real>& batch,
                                      TapPoint tap = TapPoint::post_bn, Mode mode = Mode::eval) {
    return forward(p, std::span<const Real>(batch.data), batch.n, {mode, tap, true});
}

/// Mean softmax cross-entropy and its gradient w.r.t. logits.
template <typename Real>
double softmax_cross_entropy(std::span<const Real> logits, std::span<const std::uint32_t> labels,
                             std::size_t classes, std::vector<Real>* dlogits = nullptr) {
    const std::size_t n = labels.size();
    double loss = 0.0;
    if (dlogits) dlogits->assign(n * classes, Real(0));
    for (std::size_t b = 0; b < n; ++b) {
        const Real* row = logits.data() + b * classes;
        const double mx = *std::max_element(row, row + classes);
        double se = 0.0;
        for (std::size_t c = 0; c < classes; ++c) se += std::exp(static_cast<double>(row[c]) - mx);
        const double lse = mx + std::log(se);
        loss += lse - static_cast<double>(row[labels[b]]);
        if (dlogits)
            for (std::size_t c = 0; c < classes; ++c) {
                const double pr = std::exp(static_cast<double>(row[c]) - lse);
                (*dlogits)[b * classes + c] =
                    static_cast<Real>((pr - (c == labels[b] ? 1.0 : 0.0)) / static_cast<double>(n));
            }
    }
    return loss / static_cast<double>(n);
}

/// Gradients of the batch loss w.r.t. every learnable tensor, returned in a
/// NetParams-shaped container (running statistics left empty).
template <typename Real>
NetParams<Real> backward(const NetParams<Real>& p, const ForwardCache<Real>& cache,
                         std::span<const Real> dlogits) {
    const Geometry g = geometry(p.config);
    const std::size_t n = cache.n, classes = p.config.classes, flat = g.flat_dim();
    NetParams<Real> grad;
    grad.config = p.config;
    grad.convs.resize(p.convs.size());
    grad.dense_weight.assign(p.dense_weight.size(), Real(0));
    grad.dense_bias.assign(classes, Real(0));

    ConstMatrixMap<Real> dl(dlogits.data(), n, classes);
    ConstMatrixMap<Real> fm(cache.flat.data(), n, flat);
    MatrixMap<Real>(grad.dense_weight.data(), classes, flat).noalias() = dl.transpose() * fm;
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t c = 0; c < classes; ++c) grad.dense_bias[c] += dlogits[b * classes + c];
    std::vector<Real> dx(n * flat);
    MatrixMap<Real>(dx.data(), n, flat).noalias() =
        dl * ConstMatrixMap<Real>(p.dense_weight.data(), classes, flat);

    std::vector<Real> up, dcols;
    for (std::size_t li = p.convs.size(); li-- > 0;) {
        const auto& cp = p.convs[li];
        const auto& lc = cache.layers[li];
        auto& gc = grad.convs[li];
        const std::size_t h = lc.h, w = lc.w, cin = cp.in_channels, cout = cp.out_channels;
        const std::size_t rows = n * h * w, k = cin * 9;
        gc.in_channels = cin;
        gc.out_channels = cout;

        // Route the gradient back through the pools.
        for (std::size_t pi = lc.pools.size(); pi-- > 0;) {
            const auto& pool = lc.pools[pi];
            up.assign(n * pool.in_h * pool.in_w * cout, Real(0));
            for (std::size_t i = 0; i < dx.size(); ++i) up[pool.argmax[i]] += dx[i];
            dx.swap(up);
        }
        // ReLU.
        for (std::size_t i = 0; i < dx.size(); ++i)
            if (!(lc.y[i] > Real(0))) dx[i] = Real(0);
        // Batch norm (training statistics).
        if (!cp.bn_scale.empty()) {
            gc.bn_scale.assign(cout, Real(0));
            gc.bn_shift.assign(cout, Real(0));
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cout; ++c) {
                    const std::size_t i = r * cout + c;
                    gc.bn_scale[c] += dx[i] * lc.xhat[i];
                    gc.bn_shift[c] += dx[i];
                }
            const Real inv_rows = Real(1) / static_cast<Real>(rows);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cout; ++c) {
                    const std::size_t i = r * cout + c;
                    dx[i] = cp.bn_scale[c] * lc.inv_std[c] * inv_rows *
                            (static_cast<Real>(rows) * dx[i] - gc.bn_shift[c] - lc.xhat[i] * gc.bn_scale[c]);
                }
        }
        gc.bias.assign(cout, Real(0));
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cout; ++c) gc.bias[c] += dx[r * cout + c];
        gc.weight.assign(cout * k, Real(0));
        ConstMatrixMap<Real> dz(dx.data(), rows, cout);
        MatrixMap<Real>(gc.weight.data(), cout, k).noalias() =
            dz.transpose() * ConstMatrixMap<Real>(lc.cols.data(), rows, k);
        if (li == 0) break;
        dcols.resize(rows * k);
        MatrixMap<Real>(dcols.data(), rows, k).noalias() = dz * ConstMatrixMap<Real>(cp.weight.data(), cout, k);
        detail::col2im<Real>(dcols, n, h, w, cin, dx);
    }
    return grad;
}

/// Loss and gradients for one batch, training-mode statistics.
template <typename Real>
double loss_and_gradient(const NetParams<Real>& p, const Batch<Real>& batch, NetParams<Real>* grad,
                         ForwardCache<Real>* cache_out = nullptr) {
    ForwardCache<Real> local;
    ForwardCache<Real>& cache = cache_out ? *cache_out : local;
    const auto res = forward(p, std::span<const Real>(batch.data), batch.n, {Mode::train}, &cache);
    std::vector<Real> dlogits;
    const double loss = softmax_cross_entropy<Real>(res.logits, batch.labels, p.config.classes,
                                                    grad ? &dlogits : nullptr);
    if (grad) *grad = backward(p, cache, std::span<const Real>(dlogits));
    return loss;
}

struct Hyper {
    std::size_t epochs = 12;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    std::size_t batch_size = 64;
    double bn_momentum = 0.1;
    bool cosine_schedule = true;
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0.0;
    double train_accuracy = 0.0;
    std::optional<double> test_accuracy;
};

template <typename Real>
struct TrainResult {
    NetParams<Real> params;
    std::vector<EpochRecord> history;
};

/// Top-1 accuracy in eval mode. Ties go to the lowest class index.
template <typename Real>
double evaluate(const NetParams<Real>& p, const Dataset& data, std::size_t batch_size = 256) {
    if (data.size() == 0) throw ArgumentError("evaluate: empty dataset");
    std::size_t correct = 0;
    for (std::size_t first = 0; first < data.size(); first += batch_size) {
        const std::size_t count = std::min(batch_size, data.size() - first);
        const auto batch = make_batch<Real>(data, first, count);
        const auto res = forward(p, std::span<const Real>(batch.data), batch.n);
        for (std::size_t i = 0; i < count; ++i)
            if (res.predict(i, p.config.classes) == batch.labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// SGD with momentum on softmax cross-entropy. Deterministic for a given
/// seed: the seed drives the per-epoch shuffle only.
template <typename Real>
TrainResult<Real> train(NetParams<Real> p, const Dataset& data, const Hyper& hyper, std::uint64_t seed,
                        const Dataset* test = nullptr,
                        const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    if (data.size() == 0) throw ArgumentError("train: empty dataset");
    if (hyper.batch_size == 0) throw ArgumentError("train: batch size must be >= 1");
    for (auto l : data.labels)
        if (l >= p.config.classes)
            throw DataError("train: label " + std::to_string(l) + " outside [0, " +
                            std::to_string(p.config.classes) + ")");
    const auto& in = p.config.input;
    if (data.h != in.h || data.w != in.w || data.c != in.c)
        throw DimensionError("train: dataset images are " + std::to_string(data.h) + "x" + std::to_string(data.w) +
                             "x" + std::to_string(data.c) + ", config expects " + std::to_string(in.h) + "x" +
                             std::to_string(in.w) + "x" + std::to_string(in.c));

    NetParams<Real> velocity = p;
    for_each_learnable(velocity, [](const std::string&, auto span, bool) {
        std::fill(span.begin(), span.end(), Real(0));
    });

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t steps_per_epoch = (data.size() + hyper.batch_size - 1) / hyper.batch_size;
    const std::size_t total_steps = std::max<std::size_t>(1, steps_per_epoch * hyper.epochs);
    const bool bn = p.config.batch_norm;
    std::size_t step = 0;

    TrainResult<Real> result;
    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t seen = 0, correct = 0;
        for (std::size_t first = 0; first < order.size(); first += hyper.batch_size, ++step) {
            const std::size_t count = std::min(hyper.batch_size, order.size() - first);
            if (bn && count < 2) continue;  // batch statistics undefined
            const auto batch = make_batch<Real>(data, std::span(order).subspan(first, count));
            ForwardCache<Real> cache;
            NetParams<Real> grad;
            const auto res = forward(p, std::span<const Real>(batch.data), batch.n, {Mode::train}, &cache);
            std::vector<Real> dlogits;
            const double loss = softmax_cross_entropy<Real>(res.logits, batch.labels, p.config.classes, &dlogits);
            if (!std::isfinite(loss))
                throw TrainingError(epoch, "training diverged: non-finite loss in epoch " + std::to_string(epoch));
            grad = backward(p, cache, std::span<const Real>(dlogits));
            for (std::size_t i = 0; i < count; ++i)
                if (res.predict(i, p.config.classes) == batch.labels[i]) ++correct;
            loss_sum += loss * static_cast<double>(count);
            seen += count;

            double lr = hyper.learning_rate;
            if (hyper.cosine_schedule)
                lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                            static_cast<double>(total_steps)));
            const auto mu = static_cast<Real>(hyper.momentum);
            const auto wd = static_cast<Real>(hyper.weight_decay);
            const auto rlr = static_cast<Real>(lr);
            // Walk the three containers in lock step.
            std::vector<std::span<Real>> ps, gs, vs;
            std::vector<bool> decay;
            for_each_learnable(p, [&](const std::string&, std::span<Real> s, bool d) { ps.push_back(s); decay.push_back(d); });
            for_each_learnable(grad, [&](const std::string&, std::span<Real> s, bool) { gs.push_back(s); });
            for_each_learnable(velocity, [&](const std::string&, std::span<Real> s, bool) { vs.push_back(s); });
            for (std::size_t t = 0; t < ps.size(); ++t)
                for (std::size_t i = 0; i < ps[t].size(); ++i) {
                    const Real gi = gs[t][i] + (decay[t] ? wd * ps[t][i] : Real(0));
                    vs[t][i] = mu * vs[t][i] + gi;
                    ps[t][i] -= rlr * vs[t][i];
                }
            if (bn) {
                const auto m = static_cast<Real>(hyper.bn_momentum);
                for (std::size_t l = 0; l < p.convs.size(); ++l) {
                    auto& cp = p.convs[l];
                    const auto& lc = cache.layers[l];
                    const auto rows = static_cast<Real>(lc.xhat.size() / cp.out_channels);
                    for (std::size_t c = 0; c < cp.out_channels; ++c) {
                        cp.running_mean[c] = (Real(1) - m) * cp.running_mean[c] + m * lc.batch_mean[c];
                        cp.running_var[c] = (Real(1) - m) * cp.running_var[c] +
                                            m * lc.batch_var[c] * rows / (rows - Real(1));
                    }
                }
            }
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
        rec.train_accuracy = seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0;
        if (test && test->size() > 0) rec.test_accuracy = evaluate(p, *test);
        if (on_epoch) on_epoch(rec);
        result.history.push_back(rec);
    }
    result.params = std::move(p);
    return result;
}

/// Structured removal of one output channel: drops the filter (and its BN
/// entries) plus the matching input slice of the next conv, or the matching
/// classifier columns when the layer is the last conv.
template <typename Real>
NetParams<Real> remove_filter(const NetParams<Real>& p, std::size_t layer, std::size_t filter) {
    if (layer >= p.convs.size()) throw ArgumentError("no conv layer " + std::to_string(layer));
    const auto& cp = p.convs[layer];
    if (filter >= cp.out_channels)
        throw ArgumentError("layer " + std::to_string(layer) + " has no filter " + std::to_string(filter));
    if (cp.out_channels < 2) throw ArgumentError("cannot remove the last filter of a layer");

    NetParams<Real> out = p;
    std::size_t conv_seen = 0;
    for (auto& t : out.config.tokens)
        if (auto* c = std::get_if<Conv>(&t); c && conv_seen++ == layer) --c->width;

    auto erase_at = [](std::vector<Real>& v, std::size_t i) {
        if (!v.empty()) v.erase(v.begin() + static_cast<std::ptrdiff_t>(i));
    };
    auto& oc = out.convs[layer];
    const std::size_t ks = oc.kernel_size();
    oc.weight.erase(oc.weight.begin() + static_cast<std::ptrdiff_t>(filter * ks),
                    oc.weight.begin() + static_cast<std::ptrdiff_t>((filter + 1) * ks));
    erase_at(oc.bias, filter);
    erase_at(oc.bn_scale, filter);
    erase_at(oc.bn_shift, filter);
    erase_at(oc.running_mean, filter);
    erase_at(oc.running_var, filter);
    --oc.out_channels;

    if (layer + 1 < out.convs.size()) {
        auto& next = out.convs[layer + 1];
        std::vector<Real> w;
        w.reserve(next.out_channels * (next.in_channels - 1) * 9);
        for (std::size_t o = 0; o < next.out_channels; ++o)
            for (std::size_t i = 0; i < next.in_channels; ++i) {
                if (i == filter) continue;
                const Real* src = p.convs[layer + 1].weight.data() + (o * next.in_channels + i) * 9;
                w.insert(w.end(), src, src + 9);
            }
        next.weight = std::move(w);
        --next.in_channels;
    } else {
        const Geometry g = geometry(p.config);
        const std::size_t c_old = g.out_c, positions = g.out_h * g.out_w, classes = p.config.classes;
        const std::size_t flat_old = positions * c_old;
        std::vector<Real> w;
        w.reserve(classes * positions * (c_old - 1));
        for (std::size_t k = 0; k < classes; ++k)
            for (std::size_t pos = 0; pos < positions; ++pos)
                for (std::size_t c = 0; c < c_old; ++c)
                    if (c != filter) w.push_back(p.dense_weight[k * flat_old + pos * c_old + c]);
        out.dense_weight = std::move(w);
    }
    validate(out.config);
    return out;
}

}  // namespace pcarch
