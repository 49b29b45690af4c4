#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "maskdistill/feature_store.hpp"

namespace maskdistill::testing {

/// Half-open rectangle in patch-grid coordinates.
struct PatchRect {
    std::uint32_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;
    bool contains(std::uint32_t r, std::uint32_t c) const { return r >= r0 && r < r1 && c >= c0 && c < c1; }
};

/// Pack whose CLS query singles out the patches of `object`. Per head, object
/// keys point along the query and background keys lean away from it, so the
/// distilled mask is exactly the object rectangle.
inline FeaturePack object_pack(const std::string& id, std::uint32_t grid_h, std::uint32_t grid_w,
                               std::uint32_t patch_size, std::uint32_t heads, std::uint32_t head_dim,
                               const PatchRect& object, std::mt19937_64& rng, float noise = 0.2f) {
    FeaturePack p;
    p.image_id = id;
    p.grid_h = grid_h;
    p.grid_w = grid_w;
    p.patch_size = patch_size;
    p.img_h = grid_h * patch_size;
    p.img_w = grid_w * patch_size;
    p.heads = heads;
    p.head_dim = head_dim;
    const std::size_t n = p.num_patches();
    p.q_cls.assign(std::size_t{heads} * head_dim, 0.0f);
    p.k_patch.assign(std::size_t{heads} * n * head_dim, 0.0f);
    std::normal_distribution<float> gauss(0.0f, 1.0f);
    for (std::uint32_t h = 0; h < heads; ++h) {
        // u: query direction on even dims, v: background direction on odd dims.
        std::vector<float> u(head_dim, 0.0f), v(head_dim, 0.0f);
        for (std::uint32_t d = 0; d < head_dim; ++d) (d % 2 == 0 ? u : v)[d] = 1.0f + 0.1f * gauss(rng);
        for (std::uint32_t d = 0; d < head_dim; ++d) p.q_cls[h * head_dim + d] = u[d];
        for (std::uint32_t r = 0; r < grid_h; ++r) {
            for (std::uint32_t c = 0; c < grid_w; ++c) {
                const std::size_t j = std::size_t{r} * grid_w + c;
                const bool inside = object.contains(r, c);
                for (std::uint32_t d = 0; d < head_dim; ++d) {
                    const float base = inside ? 1.5f * u[d] : v[d] - 0.5f * u[d];
                    p.k_patch[(h * n + j) * head_dim + d] = base + noise * gauss(rng);
                }
            }
        }
    }
    return p;
}

/// Embedding near the centre of `mode`: a spike of height `separation` on
/// dimension `mode`, plus isotropic noise.
inline std::vector<float> mode_embedding(std::uint32_t mode, std::uint32_t dim, float separation, float noise,
                                         std::mt19937_64& rng) {
    std::normal_distribution<float> gauss(0.0f, noise);
    std::vector<float> e(dim);
    for (std::uint32_t d = 0; d < dim; ++d) e[d] = (d == mode ? separation : 0.0f) + gauss(rng);
    return e;
}

}  // namespace maskdistill::testing
