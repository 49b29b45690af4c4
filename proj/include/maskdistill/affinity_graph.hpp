#pragma once

#include <cstddef>
#include <vector>

#include "maskdistill/feature_store.hpp"

namespace maskdistill {

/// Dense square matrix, row-major.
struct SquareMatrix {
    std::size_t n = 0;
    std::vector<double> values;

    SquareMatrix() = default;
    explicit SquareMatrix(std::size_t size) : n(size), values(size * size, 0.0) {}

    double operator()(std::size_t i, std::size_t j) const { return values[i * n + j]; }
    double& operator()(std::size_t i, std::size_t j) { return values[i * n + j]; }
};

/// Head-averaged affinities of the final attention block.
struct AffinityGraph {
    std::vector<double> a_cls;  // CLS -> patch, length N
    SquareMatrix a_patch;       // patch <-> patch, N x N
};

/// a_cls[j] = mean over heads of <q_cls(h), k(h, j)>.
std::vector<double> cls_affinity(const FeaturePack& pack);

/// a_patch[i][j] = mean over heads of <k(h, i), k(h, j)>. Exactly symmetric:
/// only the upper triangle is computed.
SquareMatrix patch_affinity(const FeaturePack& pack);

AffinityGraph build_affinity_graph(const FeaturePack& pack);

}  // namespace maskdistill
