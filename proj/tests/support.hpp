#pragma once

// Shared fixtures and independent oracles for the test programs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pcarch/arch.hpp"
#include "pcarch/dataset.hpp"
#include "pcarch/matrix.hpp"
#include "pcarch/net.hpp"
#include "pcarch/tensor.hpp"

namespace pcarch::testing {

class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("pcarch_" + tag + "_" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

inline Matrix random_symmetric(std::size_t m, std::mt19937_64& rng) {
    std::normal_distribution<double> g(0.0, 1.0);
    Matrix a(m, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j <= i; ++j) a(i, j) = a(j, i) = g(rng);
    return a;
}

inline Eigen::MatrixXd to_eigen(const Matrix& a) {
    Eigen::MatrixXd e(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) e(i, j) = a(i, j);
    return e;
}

// Descending eigenvalues from Eigen's tridiagonal QR solver.
inline std::vector<double> oracle_eigenvalues(const Matrix& a) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(to_eigen(a), Eigen::EigenvaluesOnly);
    std::vector<double> v(es.eigenvalues().data(), es.eigenvalues().data() + es.eigenvalues().size());
    std::sort(v.begin(), v.end(), std::greater<>());
    return v;
}

// Two-pass centered Gram: subtract the column mean, then sum outer products.
inline Matrix two_pass_centered_gram(const std::vector<std::vector<double>>& rows) {
    const std::size_t m = rows.front().size();
    std::vector<double> mean(m, 0.0);
    for (const auto& r : rows)
        for (std::size_t j = 0; j < m; ++j) mean[j] += r[j];
    for (auto& v : mean) v /= static_cast<double>(rows.size());
    Matrix c(m, m);
    for (const auto& r : rows)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < m; ++j) c(i, j) += (r[i] - mean[i]) * (r[j] - mean[j]);
    return c;
}

inline SampleMatrix to_samples(const std::vector<std::vector<double>>& rows) {
    SampleMatrix s{rows.size(), rows.front().size(), {}};
    for (const auto& r : rows)
        for (double v : r) s.data.push_back(static_cast<float>(v));
    return s;
}

// Rows exactly representable in float so the oracle sees the same data.
inline std::vector<std::vector<double>> random_rows(std::size_t d, std::size_t m, std::mt19937_64& rng,
                                                    double scale = 1.0, double offset = 0.0) {
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<std::vector<double>> rows(d, std::vector<double>(m));
    for (auto& r : rows)
        for (auto& v : r) v = static_cast<double>(static_cast<float>(offset + scale * g(rng)));
    return rows;
}

// `channels` channels built as fixed random mixtures of `rank` independent
// Gaussian sources plus white noise, split into tensors of shape n x h x w.
inline std::vector<ActivationTensor> planted_rank_captures(std::size_t channels, std::size_t rank, double noise,
                                                           std::uint64_t seed, std::uint32_t layer_id = 0,
                                                           std::size_t batches = 4, std::uint32_t n = 8,
                                                           std::uint32_t hw = 8, bool copies = false) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> mix(channels * rank);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t k = 0; k < rank; ++k)
            mix[c * rank + k] = copies ? (c % rank == k ? 1.0 : 0.0) : g(rng);
    std::vector<ActivationTensor> out;
    std::vector<double> src(rank);
    for (std::size_t b = 0; b < batches; ++b) {
        ActivationTensor t{layer_id, {n, hw, hw, static_cast<std::uint32_t>(channels)}, {}};
        t.data.reserve(t.dims.count());
        for (std::size_t p = 0; p < t.dims.positions(); ++p) {
            for (auto& s : src) s = g(rng);
            for (std::size_t c = 0; c < channels; ++c) {
                double v = 0.0;
                for (std::size_t k = 0; k < rank; ++k) v += mix[c * rank + k] * src[k];
                t.data.push_back(static_cast<float>(v + noise * g(rng)));
            }
        }
        out.push_back(std::move(t));
    }
    return out;
}

struct GroupCheck {
    std::string name;
    double analytic_norm = 0.0;
    double numeric_norm = 0.0;
    double diff_norm = 0.0;
    bool pass = false;
};

// Central differences on every learnable value. A group passes when
// |ga - gn| <= tol * max(|ga|, |gn|); groups whose gradient is zero in both
// (conv bias ahead of batch norm) pass under an absolute floor.
inline std::vector<GroupCheck> gradient_check(NetParams<double> p, const Batch<double>& batch, double eps = 1e-5,
                                              double tol = 1e-3, double floor = 1e-7) {
    NetParams<double> grad;
    loss_and_gradient<double>(p, batch, &grad);
    std::vector<std::pair<std::string, std::span<double>>> params, grads;
    for_each_learnable(p, [&](const std::string& n, std::span<double> s, bool) { params.emplace_back(n, s); });
    for_each_learnable(grad, [&](const std::string& n, std::span<double> s, bool) { grads.emplace_back(n, s); });
    std::vector<GroupCheck> out;
    for (std::size_t g = 0; g < params.size(); ++g) {
        GroupCheck c{params[g].first};
        auto values = params[g].second;
        auto analytic = grads[g].second;
        double aa = 0.0, nn = 0.0, dd = 0.0;
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double keep = values[i];
            values[i] = keep + eps;
            const double up = loss_and_gradient<double>(p, batch, nullptr);
            values[i] = keep - eps;
            const double down = loss_and_gradient<double>(p, batch, nullptr);
            values[i] = keep;
            const double numeric = (up - down) / (2.0 * eps);
            aa += analytic[i] * analytic[i];
            nn += numeric * numeric;
            dd += (analytic[i] - numeric) * (analytic[i] - numeric);
        }
        c.analytic_norm = std::sqrt(aa);
        c.numeric_norm = std::sqrt(nn);
        c.diff_norm = std::sqrt(dd);
        const double scale = std::max(c.analytic_norm, c.numeric_norm);
        c.pass = c.diff_norm <= tol * scale || scale <= floor;
        out.push_back(c);
    }
    return out;
}

inline Batch<double> random_batch(const ArchConfig& cfg, std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g;
    Batch<double> b;
    b.n = n;
    b.data.resize(n * cfg.input.h * cfg.input.w * cfg.input.c);
    for (auto& v : b.data) v = g(rng);
    for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<std::uint32_t>(i % cfg.classes));
    return b;
}

// Turns filter 0 of `layer` into an exact copy of filter `k` (weights, bias,
// batch-norm entries) and silences its outgoing weights, so the copy is
// redundant and removing it leaves the network function unchanged.
template <typename Real>
NetParams<Real> plant_duplicate(NetParams<Real> p, std::size_t layer, std::size_t k) {
    auto& c = p.convs[layer];
    const std::size_t ks = c.kernel_size();
    std::copy_n(c.weight.begin() + static_cast<std::ptrdiff_t>(k * ks), ks, c.weight.begin());
    auto copy_entry = [&](std::vector<Real>& v) {
        if (!v.empty()) v[0] = v[k];
    };
    copy_entry(c.bias);
    copy_entry(c.bn_scale);
    copy_entry(c.bn_shift);
    copy_entry(c.running_mean);
    copy_entry(c.running_var);
    if (layer + 1 < p.convs.size()) {
        auto& next = p.convs[layer + 1];
        for (std::size_t o = 0; o < next.out_channels; ++o)
            std::fill_n(next.weight.begin() + static_cast<std::ptrdiff_t>(o * next.in_channels * 9), 9, Real(0));
    } else {
        const std::size_t flat = p.flat_dim(), ch = c.out_channels;
        for (std::size_t cls = 0; cls < p.config.classes; ++cls)
            for (std::size_t pos = 0; pos < flat / ch; ++pos) p.dense_weight[cls * flat + pos * ch] = Real(0);
    }
    return p;
}

inline ArchConfig vgg16_cifar10() {
    ArchConfig cfg;
    cfg.tokens = parse_vector_notation(
        "[64, 64, 'M', 128, 128, 'M', 256, 256, 256, 'M', 512, 512, 512, 'M', 512, 512, 512, 'M']");
    cfg.classes = 10;
    cfg.input = {32, 32, 3};
    return cfg;
}

// The published significant-dimension row for VGG-16 on CIFAR-10, conv order.
inline std::vector<std::size_t> vgg16_cifar10_s() {
    return {11, 42, 103, 118, 238, 249, 249, 424, 271, 160, 36, 38, 42};
}

}  // namespace pcarch::testing
