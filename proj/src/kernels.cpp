#include "kbc/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <omp.h>

namespace kbc::kernels {

namespace {

// Below these sizes the fork/join overhead dominates.
constexpr std::ptrdiff_t kMinParallelRows = 64;
constexpr std::ptrdiff_t kMinParallelLabels = 4;
constexpr std::ptrdiff_t kMinParallelPairs = 32;

int g_threads = 0;

int team_size() { return g_threads > 0 ? g_threads : omp_get_max_threads(); }

// Cosine of two binary rows: |a & b| / sqrt(|a| |b|).
inline void binary_row(const std::uint8_t* a, const std::uint8_t* b, std::size_t n,
                       double& cos, bool& qualifies) {
    std::int64_t na = 0, nb = 0, both = 0;
    for (std::size_t j = 0; j < n; ++j) {
        na += a[j];
        nb += b[j];
        both += a[j] & b[j];
    }
    qualifies = (na | nb) != 0;
    cos = (na == 0 || nb == 0) ? 0.0
                               : static_cast<double>(both) /
                                     std::sqrt(static_cast<double>(na) * static_cast<double>(nb));
}

double ap_for_column(std::span<const double> scores, std::span<const std::uint8_t> gold,
                     std::size_t rows, std::size_t cols, std::size_t c, std::vector<std::size_t>& order) {
    order.resize(rows);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return scores[x * cols + c] > scores[y * cols + c];
    });
    std::int64_t hits = 0;
    double acc = 0.0;
    for (std::size_t rank = 0; rank < rows; ++rank) {
        if (gold[order[rank] * cols + c]) {
            ++hits;
            acc += static_cast<double>(hits) / static_cast<double>(rank + 1);
        }
    }
    return hits == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(hits);
}

}  // namespace

void set_threads(int n) { g_threads = n < 0 ? 0 : n; }
int threads() { return team_size(); }

RowCosine row_cosine(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, std::size_t n) {
    const auto rows = static_cast<std::ptrdiff_t>(n);
    std::vector<double> cos(n, 0.0);
    std::vector<std::uint8_t> counted(n, 0);
#pragma omp parallel for schedule(static) num_threads(team_size()) if (rows >= kMinParallelRows)
    for (std::ptrdiff_t i = 0; i < rows; ++i) {
        bool q = false;
        binary_row(a.data() + i * rows, b.data() + i * rows, n, cos[i], q);
        counted[i] = q ? 1 : 0;
    }
    RowCosine out;
    for (std::size_t i = 0; i < n; ++i) {
        if (counted[i]) {
            out.sum += cos[i];
            ++out.rows;
        }
    }
    return out;
}

std::vector<LabelCounts> label_confusion(std::span<const double> scores,
                                         std::span<const std::uint8_t> gold,
                                         std::size_t rows, std::size_t cols, double threshold) {
    std::vector<LabelCounts> out(cols);
    const auto ncols = static_cast<std::ptrdiff_t>(cols);
#pragma omp parallel for schedule(static) num_threads(team_size()) if (ncols >= kMinParallelLabels)
    for (std::ptrdiff_t c = 0; c < ncols; ++c) {
        LabelCounts lc;
        for (std::size_t r = 0; r < rows; ++r) {
            const bool pred = scores[r * cols + c] >= threshold;
            const bool truth = gold[r * cols + c] != 0;
            lc.tp += pred && truth;
            lc.fp += pred && !truth;
            lc.fn += !pred && truth;
        }
        out[c] = lc;
    }
    return out;
}

std::vector<double> label_average_precision(std::span<const double> scores,
                                            std::span<const std::uint8_t> gold,
                                            std::size_t rows, std::size_t cols) {
    std::vector<double> out(cols);
    const auto ncols = static_cast<std::ptrdiff_t>(cols);
#pragma omp parallel num_threads(team_size()) if (ncols >= kMinParallelLabels)
    {
        std::vector<std::size_t> order;
#pragma omp for schedule(dynamic, 1)
        for (std::ptrdiff_t c = 0; c < ncols; ++c) {
            out[c] = ap_for_column(scores, gold, rows, cols, static_cast<std::size_t>(c), order);
        }
    }
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    const std::size_t n = std::min(a.size(), b.size());
    for (std::size_t i = 0; i < n; ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::vector<double> pairwise_cosine(std::span<const double> lhs, std::span<const double> rhs,
                                    std::size_t count, std::size_t dim) {
    std::vector<double> out(count);
    const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(static) num_threads(team_size()) if (n >= kMinParallelPairs)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        out[i] = cosine(lhs.subspan(i * dim, dim), rhs.subspan(i * dim, dim));
    }
    return out;
}

namespace serial {

RowCosine row_cosine(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, std::size_t n) {
    RowCosine out;
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double x = a[i * n + j];
            const double y = b[i * n + j];
            dot += x * y;
            sa += x * x;
            sb += y * y;
        }
        if (sa == 0.0 && sb == 0.0) continue;
        ++out.rows;
        if (sa > 0.0 && sb > 0.0) out.sum += dot / (std::sqrt(sa) * std::sqrt(sb));
    }
    return out;
}

std::vector<LabelCounts> label_confusion(std::span<const double> scores,
                                         std::span<const std::uint8_t> gold,
                                         std::size_t rows, std::size_t cols, double threshold) {
    std::vector<LabelCounts> out(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            const bool pred = scores[r * cols + c] >= threshold;
            const bool truth = gold[r * cols + c] != 0;
            if (pred && truth) ++out[c].tp;
            else if (pred) ++out[c].fp;
            else if (truth) ++out[c].fn;
        }
    }
    return out;
}

std::vector<double> label_average_precision(std::span<const double> scores,
                                            std::span<const std::uint8_t> gold,
                                            std::size_t rows, std::size_t cols) {
    std::vector<double> out(cols);
    std::vector<std::size_t> order;
    for (std::size_t c = 0; c < cols; ++c) out[c] = ap_for_column(scores, gold, rows, cols, c, order);
    return out;
}

std::vector<double> pairwise_cosine(std::span<const double> lhs, std::span<const double> rhs,
                                    std::size_t count, std::size_t dim) {
    std::vector<double> out(count);
    for (std::size_t i = 0; i < count; ++i) {
        out[i] = cosine(lhs.subspan(i * dim, dim), rhs.subspan(i * dim, dim));
    }
    return out;
}

}  // namespace serial

}  // namespace kbc::kernels
