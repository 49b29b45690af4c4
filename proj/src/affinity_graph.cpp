#include "maskdistill/affinity_graph.hpp"

namespace maskdistill {

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
    double acc = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) acc += static_cast<double>(a[d]) * static_cast<double>(b[d]);
    return acc;
}

}  // namespace

std::vector<double> cls_affinity(const FeaturePack& pack) {
    pack.validate();
    const std::size_t n = pack.num_patches();
    std::vector<double> a(n, 0.0);
    for (std::size_t h = 0; h < pack.heads; ++h) {
        const auto q = pack.query(h);
        for (std::size_t j = 0; j < n; ++j) a[j] += dot(q, pack.key(h, j));
    }
    for (double& v : a) v /= static_cast<double>(pack.heads);
    return a;
}

SquareMatrix patch_affinity(const FeaturePack& pack) {
    pack.validate();
    const std::size_t n = pack.num_patches();
    SquareMatrix a(n);
    // Head-outer accumulation keeps a fixed reduction order per entry.
    for (std::size_t h = 0; h < pack.heads; ++h) {
        for (std::size_t i = 0; i < n; ++i) {
            const auto ki = pack.key(h, i);
            for (std::size_t j = i; j < n; ++j) a(i, j) += dot(ki, pack.key(h, j));
        }
    }
    const double heads = static_cast<double>(pack.heads);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            a(i, j) /= heads;
            a(j, i) = a(i, j);
        }
    }
    return a;
}

AffinityGraph build_affinity_graph(const FeaturePack& pack) {
    return {cls_affinity(pack), patch_affinity(pack)};
}

}  // namespace maskdistill
