#pragma once

// Data-parallel inner loops. Each kernel has an OpenMP version (the default
// namespace) and a plain serial version under `serial::` that the tests and
// the benchmark compare against. Parallel kernels write per-item partials and
// reduce them in index order, so results are bit-identical across thread
// counts.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kbc::kernels {

/// Result of averaging row cosines: the summed cosine and how many rows
/// qualified (non-zero in at least one matrix).
struct RowCosine {
    double sum = 0.0;
    std::size_t rows = 0;

    double mean() const noexcept { return rows == 0 ? 0.0 : sum / static_cast<double>(rows); }
};

/// `a` and `b` are row-major n x n binary matrices.
RowCosine row_cosine(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, std::size_t n);

struct LabelCounts {
    std::int64_t tp = 0;
    std::int64_t fp = 0;
    std::int64_t fn = 0;

    bool operator==(const LabelCounts&) const = default;
};

/// Per-column confusion counts for a rows x cols score matrix binarized at
/// `threshold` (score >= threshold is a positive prediction).
std::vector<LabelCounts> label_confusion(std::span<const double> scores,
                                         std::span<const std::uint8_t> gold,
                                         std::size_t rows, std::size_t cols, double threshold);

/// Per-column average precision; NaN for columns without positives.
/// Rows are ranked by descending score, ties by ascending row index.
std::vector<double> label_average_precision(std::span<const double> scores,
                                            std::span<const std::uint8_t> gold,
                                            std::size_t rows, std::size_t cols);

/// Cosine of two dense vectors; 0 when either has zero norm.
double cosine(std::span<const double> a, std::span<const double> b);

/// Cosines of many equal-length vector pairs laid out row-major.
std::vector<double> pairwise_cosine(std::span<const double> lhs, std::span<const double> rhs,
                                    std::size_t count, std::size_t dim);

namespace serial {

RowCosine row_cosine(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, std::size_t n);
std::vector<LabelCounts> label_confusion(std::span<const double> scores,
                                         std::span<const std::uint8_t> gold,
                                         std::size_t rows, std::size_t cols, double threshold);
std::vector<double> label_average_precision(std::span<const double> scores,
                                            std::span<const std::uint8_t> gold,
                                            std::size_t rows, std::size_t cols);
std::vector<double> pairwise_cosine(std::span<const double> lhs, std::span<const double> rhs,
                                    std::size_t count, std::size_t dim);

}  // namespace serial

/// Thread count used by the parallel kernels; 0 restores the OpenMP default.
void set_threads(int n);
int threads();

}  // namespace kbc::kernels
