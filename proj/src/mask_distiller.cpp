#include "maskdistill/mask_distiller.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "maskdistill/errors.hpp"

namespace maskdistill {

std::size_t proposal_count(double k_fraction, std::size_t n) {
    if (!(k_fraction > 0.0 && k_fraction <= 1.0)) {
        throw ParameterError("k_fraction must lie in (0, 1], got " + std::to_string(k_fraction));
    }
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    const auto count = static_cast<std::size_t>(std::floor(k_fraction * static_cast<double>(n) + 1e-9));
    return std::clamp<std::size_t>(count, 1, std::max<std::size_t>(n, 1));
}

std::vector<std::size_t> select_top_k(std::span<const double> a_cls, double k_fraction) {
    const std::size_t k = proposal_count(k_fraction, a_cls.size());
    if (a_cls.empty()) throw ParameterError("select_top_k: empty affinity vector");
    std::vector<std::size_t> order(a_cls.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t l, std::size_t r) { return a_cls[l] > a_cls[r] || (a_cls[l] == a_cls[r] && l < r); });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

std::size_t find_source(std::span<const double> a_cls) {
    if (a_cls.empty()) throw ParameterError("find_source: empty affinity vector");
    std::size_t best = 0;
    for (std::size_t j = 1; j < a_cls.size(); ++j) {
        if (a_cls[j] > a_cls[best]) best = j;
    }
    return best;
}

std::vector<std::size_t> refine_proposals(std::span<const std::size_t> proposals, std::size_t source,
                                          const SquareMatrix& a_patch) {
    if (source >= a_patch.n) throw ParameterError("refine_proposals: source out of range");
    std::vector<std::size_t> refined;
    refined.reserve(proposals.size() + 1);
    for (const std::size_t j : proposals) {
        if (j >= a_patch.n) throw ParameterError("refine_proposals: proposal index out of range");
        if (a_patch(source, j) > 0.0) refined.push_back(j);
    }
    refined.push_back(source);
    std::sort(refined.begin(), refined.end());
    refined.erase(std::unique(refined.begin(), refined.end()), refined.end());
    return refined;
}

std::vector<std::uint8_t> build_patch_mask(std::span<const std::size_t> refined, const SquareMatrix& a_patch,
                                           std::size_t source) {
    if (refined.empty()) throw ParameterError("build_patch_mask: refined proposal set is empty");
    if (source >= a_patch.n) throw ParameterError("build_patch_mask: source out of range");
    std::vector<double> column_sums(a_patch.n, 0.0);
    for (const std::size_t i : refined) {
        for (std::size_t j = 0; j < a_patch.n; ++j) column_sums[j] += a_patch(i, j);
    }
    std::vector<std::uint8_t> bits(a_patch.n, 0);
    for (std::size_t j = 0; j < a_patch.n; ++j) bits[j] = column_sums[j] > 0.0 ? 1 : 0;
    bits[source] = 1;
    return bits;
}

PatchMask extract_component(const PatchMask& mask, ComponentMode mode) {
    if (mask.source >= mask.bits.size() || mask.bits[mask.source] == 0) {
        throw ValidationError("extract_component: source patch is not set");
    }
    if (mode == ComponentMode::all) return mask;

    PatchMask out = mask;
    std::fill(out.bits.begin(), out.bits.end(), std::uint8_t{0});
    const std::size_t w = mask.grid_w, h = mask.grid_h;
    std::deque<std::size_t> frontier{mask.source};
    out.bits[mask.source] = 1;
    while (!frontier.empty()) {
        const std::size_t p = frontier.front();
        frontier.pop_front();
        const std::size_t row = p / w, col = p % w;
        const auto visit = [&](std::size_t q) {
            if (mask.bits[q] != 0 && out.bits[q] == 0) {
                out.bits[q] = 1;
                frontier.push_back(q);
            }
        };
        if (row > 0) visit(p - w);
        if (row + 1 < h) visit(p + w);
        if (col > 0) visit(p - 1);
        if (col + 1 < w) visit(p + 1);
    }
    return out;
}

BinaryMask upsample_mask(const PatchMask& mask, std::uint32_t patch_size) {
    if (patch_size == 0) throw ParameterError("upsample_mask: patch_size must be >= 1");
    if (mask.bits.size() != static_cast<std::size_t>(mask.grid_h) * mask.grid_w) {
        throw ValidationError("upsample_mask: bits length does not match the grid");
    }
    BinaryMask pixels(mask.grid_h * patch_size, mask.grid_w * patch_size);
    for (std::uint32_t y = 0; y < pixels.height; ++y) {
        const std::size_t grid_row = y / patch_size;
        for (std::uint32_t x = 0; x < pixels.width; ++x) {
            pixels.set(y, x, mask.bits[grid_row * mask.grid_w + x / patch_size]);
        }
    }
    return pixels;
}

DistillResult distill_detailed(const FeaturePack& pack, const DistillConfig& config) {
    const AffinityGraph graph = build_affinity_graph(pack);

    PatchMask patch_mask;
    patch_mask.grid_h = pack.grid_h;
    patch_mask.grid_w = pack.grid_w;
    patch_mask.proposals = select_top_k(graph.a_cls, config.k_fraction);
    patch_mask.source = find_source(graph.a_cls);
    patch_mask.refined = refine_proposals(patch_mask.proposals, patch_mask.source, graph.a_patch);
    patch_mask.bits = build_patch_mask(patch_mask.refined, graph.a_patch, patch_mask.source);
    patch_mask = extract_component(patch_mask, config.component_mode);

    DistillResult result;
    result.pixel_mask = upsample_mask(patch_mask, pack.patch_size);
    result.candidate.image_id = pack.image_id;
    result.candidate.score = 1.0;
    result.candidate.bbox = mask_to_bbox(result.pixel_mask);
    result.candidate.rle = encode_rle(result.pixel_mask);
    result.patch_mask = std::move(patch_mask);
    return result;
}

ObjectCandidate distill(const FeaturePack& pack, const DistillConfig& config) {
    return distill_detailed(pack, config).candidate;
}

}  // namespace maskdistill
