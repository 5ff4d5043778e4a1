#pragma once

// Streaming covariance, symmetric eigendecomposition and explained-variance
// analysis of per-layer activation samples.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pcarch/errors.hpp"
#include "pcarch/filters.hpp"
#include "pcarch/matrix.hpp"
#include "pcarch/tensor.hpp"

namespace pcarch {

/// Running first and second moments of an M-feature sample stream.
///
/// Rows are accumulated relative to a shift (the first row ever seen), which
/// leaves the centered Gram unchanged but avoids cancellation when feature
/// means are large relative to their spread. `sum()` and `gram()` report the
/// unshifted totals.
class CovAccumulator {
public:
    explicit CovAccumulator(std::size_t m) : m_(m), shift_(m, 0.0), sum_(m, 0.0), gram_(m, m) {
        if (m == 0) throw DimensionError("covariance accumulator needs at least one feature");
    }

    std::size_t features() const noexcept { return m_; }
    std::size_t samples() const noexcept { return d_; }

    void add(std::span<const float> rows, std::size_t row_count, std::string_view batch = {}) {
        if (rows.size() != row_count * m_)
            throw DimensionError(describe(batch) + ": expected rows of " + std::to_string(m_) +
                                 " columns, got " + std::to_string(rows.size()) + " values for " +
                                 std::to_string(row_count) + " rows");
        for (std::size_t i = 0; i < rows.size(); ++i)
            if (!std::isfinite(rows[i]))
                throw DataError(describe(batch) + ": non-finite value at row " +
                                std::to_string(i / m_) + ", column " + std::to_string(i % m_));
        if (row_count == 0) return;
        if (d_ == 0)
            for (std::size_t j = 0; j < m_; ++j) shift_[j] = rows[j];

        std::vector<double> x(m_);
        for (std::size_t r = 0; r < row_count; ++r) {
            const float* src = rows.data() + r * m_;
            for (std::size_t j = 0; j < m_; ++j) {
                x[j] = static_cast<double>(src[j]) - shift_[j];
                sum_[j] += x[j];
            }
            for (std::size_t i = 0; i < m_; ++i) {
                const double xi = x[i];
                if (xi == 0.0) continue;
                double* g = &gram_(i, 0);
                for (std::size_t j = i; j < m_; ++j) g[j] += xi * x[j];
            }
        }
        d_ += row_count;
    }

    void add(const SampleMatrix& rows, std::string_view batch = {}) {
        if (rows.m != m_)
            throw DimensionError(describe(batch) + ": sample matrix has " + std::to_string(rows.m) +
                                 " columns, accumulator expects " + std::to_string(m_));
        add(rows.data, rows.d, batch);
    }

    /// Unshifted per-feature sums.
    std::vector<double> sum() const {
        std::vector<double> s(m_);
        for (std::size_t j = 0; j < m_; ++j) s[j] = sum_[j] + static_cast<double>(d_) * shift_[j];
        return s;
    }

    /// Unshifted sum of outer products, full symmetric matrix.
    Matrix gram() const {
        Matrix g(m_, m_);
        const double d = static_cast<double>(d_);
        for (std::size_t i = 0; i < m_; ++i)
            for (std::size_t j = i; j < m_; ++j) {
                const double v = gram_(i, j) + shift_[i] * sum_[j] + sum_[i] * shift_[j] +
                                 d * shift_[i] * shift_[j];
                g(i, j) = v;
                g(j, i) = v;
            }
        return g;
    }

    /// Column-centered Gram, gram - d * mean * mean^T. No 1/(d-1) factor.
    Matrix finalize() const {
        if (d_ < 2)
            throw InsufficientDataError("centered Gram needs at least 2 samples, have " +
                                        std::to_string(d_));
        Matrix c(m_, m_);
        const double d = static_cast<double>(d_);
        for (std::size_t i = 0; i < m_; ++i)
            for (std::size_t j = i; j < m_; ++j) {
                const double v = gram_(i, j) - sum_[i] * sum_[j] / d;
                c(i, j) = v;
                c(j, i) = v;
            }
        return c;
    }

private:
    static std::string describe(std::string_view batch) {
        return batch.empty() ? std::string("batch") : std::string(batch);
    }

    std::size_t m_;
    std::size_t d_ = 0;
    std::vector<double> shift_;
    std::vector<double> sum_;
    Matrix gram_;  // upper triangle only
};

inline CovAccumulator& accumulate(CovAccumulator& acc, const SampleMatrix& rows,
                                  std::string_view batch = {}) {
    acc.add(rows, batch);
    return acc;
}

inline Matrix finalize(const CovAccumulator& acc) { return acc.finalize(); }

struct PcaSpectrum {
    std::vector<double> eigenvalues;  // non-increasing
    Matrix eigenvectors;              // column i pairs with eigenvalue i
    double total_variance = 0.0;      // sum of eigenvalues
    std::vector<double> cumulative;   // explained-variance ratios, clamped spectrum
    bool dead = false;                // zero total variance
    std::size_t sweeps = 0;

    std::size_t size() const noexcept { return eigenvalues.size(); }
};

struct JacobiOptions {
    double relative_tolerance = 1e-10;
    std::size_t max_sweeps = 100;
    double symmetry_tolerance = 1e-9;
};

namespace detail {

inline double off_diagonal_norm(const Matrix& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) s += a(i, j) * a(i, j);
    return std::sqrt(2.0 * s);
}

// One two-sided rotation zeroing a(p, q); V accumulates the rotations.
inline void rotate(Matrix& a, Matrix& v, std::size_t p, std::size_t q) {
    const double apq = a(p, q);
    if (apq == 0.0) return;
    const std::size_t n = a.rows();
    const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
    const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
    const double c = 1.0 / std::sqrt(t * t + 1.0);
    const double s = t * c;

    for (std::size_t k = 0; k < n; ++k) {
        const double akp = a(k, p);
        const double akq = a(k, q);
        a(k, p) = c * akp - s * akq;
        a(k, q) = s * akp + c * akq;
    }
    for (std::size_t k = 0; k < n; ++k) {
        const double apk = a(p, k);
        const double aqk = a(q, k);
        a(p, k) = c * apk - s * aqk;
        a(q, k) = s * apk + c * aqk;
    }
    a(p, q) = 0.0;
    a(q, p) = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
        const double vkp = v(k, p);
        const double vkq = v(k, q);
        v(k, p) = c * vkp - s * vkq;
        v(k, q) = s * vkp + c * vkq;
    }
}

}  // namespace detail

/// Builds the explained-variance curve of an already sorted spectrum.
/// Eigenvalues below zero (floating-point PSD violations) count as zero.
inline void compute_explained_variance(PcaSpectrum& spec) {
    const std::size_t m = spec.eigenvalues.size();
    spec.total_variance = std::accumulate(spec.eigenvalues.begin(), spec.eigenvalues.end(), 0.0);
    spec.cumulative.assign(m, 0.0);
    double clamped_total = 0.0;
    for (double l : spec.eigenvalues) clamped_total += std::max(l, 0.0);
    spec.dead = !(clamped_total > 0.0);
    if (spec.dead) return;
    double running = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        running += std::max(spec.eigenvalues[i], 0.0);
        spec.cumulative[i] = std::min(running / clamped_total, 1.0);
    }
    spec.cumulative[m - 1] = 1.0;
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Eigenpairs come
/// out sorted by descending eigenvalue, ties by original column index, each
/// eigenvector signed so its largest-magnitude entry is positive.
inline PcaSpectrum eigendecompose(const Matrix& c, const JacobiOptions& opt = {}) {
    const std::size_t n = c.rows();
    if (n == 0 || c.cols() != n)
        throw ContractError("eigendecompose needs a non-empty square matrix, got " +
                            std::to_string(c.rows()) + "x" + std::to_string(c.cols()));
    const double norm = c.frobenius_norm();
    if (!std::isfinite(norm)) throw DataError("eigendecompose: matrix has non-finite entries");
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(c(i, j) - c(j, i)) > opt.symmetry_tolerance * norm)
                throw ContractError("eigendecompose: matrix is not symmetric at (" +
                                    std::to_string(i) + ", " + std::to_string(j) + ")");

    Matrix a = c;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (c(i, j) + c(j, i));
    Matrix v = Matrix::identity(n);

    const double target = opt.relative_tolerance * norm;
    std::size_t sweep = 0;
    double off = detail::off_diagonal_norm(a);
    while (off > target) {
        if (sweep == opt.max_sweeps)
            throw NumericalError("Jacobi eigensolver did not converge after " +
                                 std::to_string(sweep) + " sweeps, off-diagonal residual " +
                                 std::to_string(off) + " (target " + std::to_string(target) + ")");
        for (std::size_t p = 0; p + 1 < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) detail::rotate(a, v, p, q);
        ++sweep;
        off = detail::off_diagonal_norm(a);
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return a(x, x) > a(y, y); });

    PcaSpectrum spec;
    spec.sweeps = sweep;
    spec.eigenvalues.resize(n);
    spec.eigenvectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t src = order[k];
        spec.eigenvalues[k] = a(src, src);
        std::size_t lead = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (std::abs(v(i, src)) > std::abs(v(lead, src))) lead = i;
        const double sign = v(lead, src) < 0.0 ? -1.0 : 1.0;
        for (std::size_t i = 0; i < n; ++i) spec.eigenvectors(i, k) = sign * v(i, src);
    }
    compute_explained_variance(spec);
    return spec;
}

/// Smallest number of leading components whose cumulative explained
/// variance reaches `threshold`. Dead spectra report 0.
inline std::size_t significant_dimensions(const PcaSpectrum& spec, double threshold) {
    if (!(threshold > 0.0 && threshold <= 1.0))
        throw ArgumentError("variance threshold must lie in (0, 1], got " + std::to_string(threshold));
    if (spec.dead || spec.cumulative.empty()) return 0;
    // Ratios are sums of doubles; accept a few ulps below the target.
    constexpr double slack = 1e-12;
    for (std::size_t i = 0; i < spec.cumulative.size(); ++i)
        if (spec.cumulative[i] >= threshold - slack) return i + 1;
    return spec.cumulative.size();
}

/// Eigenfilters: output filter k is the combination of the input filters
/// weighted by eigenvector column k, so the bank comes out ranked by
/// explained variance.
inline FilterBank project_filters(const FilterBank& filters, const PcaSpectrum& spec) {
    if (filters.count != spec.size())
        throw DimensionError("project_filters: bank has " + std::to_string(filters.count) +
                             " filters, spectrum has " + std::to_string(spec.size()) + " components");
    FilterBank out(filters.count, filters.in_channels, filters.kernel);
    const std::size_t len = filters.filter_size();
    for (std::size_t k = 0; k < filters.count; ++k) {
        auto dst = out.filter(k);
        for (std::size_t i = 0; i < filters.count; ++i) {
            const double w = spec.eigenvectors(i, k);
            if (w == 0.0) continue;
            auto src = filters.filter(i);
            for (std::size_t e = 0; e < len; ++e) dst[e] += w * src[e];
        }
    }
    return out;
}

}  // namespace pcarch
