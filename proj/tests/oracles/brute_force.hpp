#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

namespace maskdistill::oracle {

struct BruteAssignment {
    std::vector<int> perm;  // padded square permutation, row -> column
    double profit = -std::numeric_limits<double>::infinity();
};

/// Exhaustive search over all permutations of the zero-padded square matrix.
/// Lexicographic enumeration with strict improvement keeps the smallest optimum.
inline BruteAssignment brute_force_assignment(const std::vector<std::vector<double>>& profit) {
    const std::size_t rows = profit.size(), cols = profit.front().size();
    const std::size_t n = std::max(rows, cols);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    BruteAssignment best;
    do {
        double total = 0.0;
        for (std::size_t i = 0; i < rows; ++i) {
            if (static_cast<std::size_t>(perm[i]) < cols) total += profit[i][perm[i]];
        }
        if (total > best.profit) {
            best.profit = total;
            best.perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

/// Best 2-partition of 1-D points by exhaustive enumeration; returns sorted centroids.
inline std::vector<double> best_two_means(const std::vector<double>& xs) {
    const std::size_t n = xs.size();
    double best = std::numeric_limits<double>::infinity();
    std::vector<double> centroids;
    for (std::uint32_t mask = 1; mask + 1 < (1u << n); ++mask) {
        double s[2] = {0, 0};
        int c[2] = {0, 0};
        for (std::size_t i = 0; i < n; ++i) {
            const int g = (mask >> i) & 1u;
            s[g] += xs[i];
            ++c[g];
        }
        const double m[2] = {s[0] / c[0], s[1] / c[1]};
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = xs[i] - m[(mask >> i) & 1u];
            inertia += d * d;
        }
        if (inertia < best) {
            best = inertia;
            centroids = {std::min(m[0], m[1]), std::max(m[0], m[1])};
        }
    }
    return centroids;
}

/// Central differences of an arbitrary scalar function of a vector.
template <typename F>
std::vector<double> central_differences(F&& f, std::vector<double> x, double eps) {
    std::vector<double> g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + eps;
        const double plus = f(x);
        x[i] = orig - eps;
        const double minus = f(x);
        x[i] = orig;
        g[i] = (plus - minus) / (2.0 * eps);
    }
    return g;
}

}  // namespace maskdistill::oracle
