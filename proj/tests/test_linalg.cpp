#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "pcarch/linalg.hpp"
#include "support.hpp"

using namespace pcarch;
using namespace pcarch::testing;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) m = std::max(m, std::abs(a(i, j) - b(i, j)));
    return m;
}

PcaSpectrum spectrum_of(std::vector<double> eigenvalues) {
    PcaSpectrum s;
    s.eigenvalues = std::move(eigenvalues);
    s.eigenvectors = Matrix::identity(s.eigenvalues.size());
    compute_explained_variance(s);
    return s;
}

}  // namespace

TEST(CovAccumulator, IdentityRows) {
    CovAccumulator acc(2);
    acc.add(SampleMatrix{2, 2, {1, 0, 0, 1}});
    EXPECT_EQ(acc.samples(), 2u);
    EXPECT_EQ(acc.sum(), (std::vector<double>{1, 1}));
    const Matrix g = acc.gram();
    EXPECT_EQ(g(0, 0), 1.0);
    EXPECT_EQ(g(0, 1), 0.0);
    EXPECT_EQ(g(1, 0), 0.0);
    EXPECT_EQ(g(1, 1), 1.0);
}

TEST(CovAccumulator, SplitBatchesMatchSingleCall) {
    std::mt19937_64 rng(3);
    const auto rows = random_rows(300, 6, rng, 2.0, 5.0);
    const auto all = to_samples(rows);
    CovAccumulator one(6), two(6);
    one.add(all);
    const std::vector<std::vector<double>> a(rows.begin(), rows.begin() + 117), b(rows.begin() + 117, rows.end());
    two.add(to_samples(a), "first");
    two.add(to_samples(b), "second");
    EXPECT_LE(max_abs_diff(one.finalize(), two.finalize()), 1e-9);
    EXPECT_EQ(two.samples(), 300u);
}

TEST(CovAccumulator, StandardNormalCovarianceNearIdentity) {
    std::mt19937_64 rng(11);
    const auto rows = random_rows(4000, 16, rng);
    CovAccumulator acc(16);
    accumulate(acc, to_samples(rows));
    const Matrix c = finalize(acc);
    const Matrix oracle = two_pass_centered_gram(rows);
    for (std::size_t i = 0; i < 16; ++i)
        for (std::size_t j = 0; j < 16; ++j) {
            EXPECT_NEAR(c(i, j) / 3999.0, oracle(i, j) / 3999.0, 1e-12);
            EXPECT_NEAR(c(i, j) / 3999.0, i == j ? 1.0 : 0.0, 0.15);
        }
}

TEST(CovAccumulator, ConstantRowsGiveZeroMatrix) {
    CovAccumulator acc(2);
    acc.add(SampleMatrix{2, 2, {1, 1, 1, 1}});
    EXPECT_EQ(acc.finalize().frobenius_norm(), 0.0);
}

TEST(CovAccumulator, HandComputedTwoRows) {
    CovAccumulator acc(2);
    acc.add(SampleMatrix{2, 2, {0, 0, 2, 2}});
    const Matrix c = acc.finalize();
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(c(i, j), 2.0);
}

TEST(CovAccumulator, MatchesTwoPassOracleWithLargeOffset) {
    std::mt19937_64 rng(5);
    const auto rows = random_rows(500, 16, rng, 1.0, 1000.0);
    CovAccumulator acc(16);
    acc.add(to_samples(rows));
    const Matrix c = acc.finalize();
    const Matrix oracle = two_pass_centered_gram(rows);
    EXPECT_LE((c - oracle).frobenius_norm(), 1e-9 * oracle.frobenius_norm());
}

TEST(CovAccumulator, Errors) {
    CovAccumulator acc(3);
    EXPECT_THROW(acc.add(SampleMatrix{1, 2, {1, 2}}), DimensionError);
    EXPECT_THROW(acc.add(SampleMatrix{1, 3, {1, NAN, 2}}, "layer0_batch1.act"), DataError);
    EXPECT_THROW(acc.finalize(), InsufficientDataError);
    acc.add(SampleMatrix{1, 3, {1, 2, 3}});
    EXPECT_THROW(acc.finalize(), InsufficientDataError);
    EXPECT_THROW(CovAccumulator(0), DimensionError);
    try {
        acc.add(SampleMatrix{1, 3, {INFINITY, 0, 0}}, "layer2_batch7.act");
        FAIL();
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("layer2_batch7.act"), std::string::npos);
    }
}

TEST(Eigendecompose, Diagonal) {
    Matrix c(2, 2);
    c(0, 0) = 1.0;
    c(1, 1) = 4.0;
    const auto s = eigendecompose(c);
    EXPECT_EQ(s.eigenvalues, (std::vector<double>{4.0, 1.0}));
    EXPECT_EQ(s.eigenvectors(0, 0), 0.0);
    EXPECT_EQ(s.eigenvectors(1, 0), 1.0);
    EXPECT_EQ(s.eigenvectors(0, 1), 1.0);
    EXPECT_EQ(s.eigenvectors(1, 1), 0.0);
}

TEST(Eigendecompose, ClosedFormTwoByTwo) {
    Matrix c(2, 2);
    c(0, 0) = c(1, 1) = 2.0;
    c(0, 1) = c(1, 0) = 1.0;
    const auto s = eigendecompose(c);
    EXPECT_NEAR(s.eigenvalues[0], 3.0, 1e-12);
    EXPECT_NEAR(s.eigenvalues[1], 1.0, 1e-12);
    const double r = 1.0 / std::sqrt(2.0);
    EXPECT_NEAR(std::abs(s.eigenvectors(0, 0)), r, 1e-12);
    EXPECT_NEAR(s.eigenvectors(0, 0), s.eigenvectors(1, 0), 1e-12);
    EXPECT_NEAR(s.eigenvectors(0, 1), -s.eigenvectors(1, 1), 1e-12);
    EXPECT_NEAR(std::abs(s.eigenvectors(0, 1)), r, 1e-12);
}

TEST(Eigendecompose, RandomMatchesOracle) {
    std::mt19937_64 rng(32);
    const Matrix c = random_symmetric(32, rng);
    const auto s = eigendecompose(c);
    Matrix lambda(32, 32);
    for (std::size_t i = 0; i < 32; ++i) lambda(i, i) = s.eigenvalues[i];
    const Matrix recon = s.eigenvectors * lambda * s.eigenvectors.transposed();
    EXPECT_LE((recon - c).frobenius_norm(), 1e-8 * c.frobenius_norm());
    const auto oracle = oracle_eigenvalues(c);
    for (std::size_t i = 0; i < 32; ++i)
        EXPECT_NEAR(s.eigenvalues[i], oracle[i], 1e-6 * std::max(1.0, std::abs(oracle[i])));
    for (std::size_t i = 1; i < 32; ++i) EXPECT_GE(s.eigenvalues[i - 1], s.eigenvalues[i]);
}

TEST(Eigendecompose, SignConventionAndTies) {
    Matrix c = Matrix::identity(3);
    const auto s = eigendecompose(c);
    EXPECT_EQ(s.sweeps, 0u);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(s.eigenvectors(k, k), 1.0);
    Matrix neg(2, 2);
    neg(0, 0) = 1.0;
    neg(0, 1) = neg(1, 0) = -3.0;
    neg(1, 1) = 1.0;
    const auto t = eigendecompose(neg);
    for (std::size_t k = 0; k < 2; ++k) {
        const double a = t.eigenvectors(0, k), b = t.eigenvectors(1, k);
        EXPECT_GT(std::abs(a) >= std::abs(b) ? a : b, 0.0);
    }
}

TEST(Eigendecompose, Errors) {
    EXPECT_THROW(eigendecompose(Matrix(2, 3)), ContractError);
    EXPECT_THROW(eigendecompose(Matrix()), ContractError);
    Matrix asym(2, 2);
    asym(0, 1) = 1.0;
    EXPECT_THROW(eigendecompose(asym), ContractError);
    std::mt19937_64 rng(1);
    EXPECT_THROW(eigendecompose(random_symmetric(8, rng), {1e-300, 1, 1e-9}), NumericalError);
}

TEST(Eigendecompose, ZeroMatrixIsDead) {
    const auto s = eigendecompose(Matrix(4, 4));
    EXPECT_TRUE(s.dead);
    EXPECT_EQ(significant_dimensions(s, 0.999), 0u);
}

TEST(SignificantDimensions, ExactBoundary) {
    EXPECT_EQ(significant_dimensions(spectrum_of({999.0, 1.0}), 0.999), 1u);
}

TEST(SignificantDimensions, ElevenOfSixtyFour) {
    // 11 strong components carrying 99.95% of the variance, 53 weak ones the rest.
    std::vector<double> ev;
    for (int i = 0; i < 11; ++i) ev.push_back(100.0 / (1 + i));
    const double strong = std::accumulate(ev.begin(), ev.end(), 0.0);
    const double weak_total = strong * 0.0005 / 0.9995;
    for (int i = 0; i < 53; ++i) ev.push_back(weak_total / 53.0);
    std::sort(ev.begin(), ev.end(), std::greater<>());
    const auto s = spectrum_of(ev);
    EXPECT_EQ(significant_dimensions(s, 0.999), 11u);
    EXPECT_LT(s.cumulative[9], 0.999);
}

TEST(SignificantDimensions, UniformNeedsAll) {
    EXPECT_EQ(significant_dimensions(spectrum_of(std::vector<double>(10, 2.5)), 0.999), 10u);
}

TEST(SignificantDimensions, ThresholdOneIsRank) {
    EXPECT_EQ(significant_dimensions(spectrum_of({5, 3, 1, 0, 0}), 1.0), 3u);
}

TEST(SignificantDimensions, NegativeEigenvaluesClamped) {
    const auto s = spectrum_of({4.0, 0.0, -1e-14});
    EXPECT_EQ(s.cumulative.back(), 1.0);
    EXPECT_EQ(significant_dimensions(s, 0.999), 1u);
}

TEST(SignificantDimensions, RejectsBadThreshold) {
    const auto s = spectrum_of({1.0});
    EXPECT_THROW(significant_dimensions(s, 0.0), ArgumentError);
    EXPECT_THROW(significant_dimensions(s, 1.5), ArgumentError);
    EXPECT_THROW(significant_dimensions(s, NAN), ArgumentError);
}

TEST(ProjectFilters, IdentitySpectrum) {
    FilterBank bank(3, 2);
    std::mt19937_64 rng(4);
    std::normal_distribution<double> g;
    for (auto& v : bank.data) v = g(rng);
    const auto out = project_filters(bank, spectrum_of({3, 2, 1}));
    EXPECT_EQ(out.data, bank.data);
}

TEST(ProjectFilters, DuplicatePair) {
    FilterBank bank(2, 1);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> g;
    for (std::size_t e = 0; e < bank.filter_size(); ++e) bank.filter(0)[e] = bank.filter(1)[e] = g(rng);
    // activations of duplicate filters are identical: Gram is rank one
    Matrix c(2, 2, 5.0);
    const auto s = eigendecompose(c);
    const auto out = project_filters(bank, s);
    for (std::size_t e = 0; e < bank.filter_size(); ++e) {
        EXPECT_NEAR(out.filter(0)[e], std::sqrt(2.0) * bank.filter(0)[e], 1e-12);
        EXPECT_NEAR(out.filter(1)[e], 0.0, 1e-12);
    }
}

TEST(ProjectFilters, PreservesFrobeniusNorm) {
    std::mt19937_64 rng(8);
    FilterBank bank(8, 4);
    std::normal_distribution<double> g;
    for (auto& v : bank.data) v = g(rng);
    const auto out = project_filters(bank, eigendecompose(random_symmetric(8, rng)));
    auto norm = [](const FilterBank& b) {
        double s = 0.0;
        for (double v : b.data) s += v * v;
        return std::sqrt(s);
    };
    EXPECT_NEAR(norm(out), norm(bank), 1e-9);
    EXPECT_THROW(project_filters(FilterBank(3, 1), spectrum_of({1, 1})), DimensionError);
}
