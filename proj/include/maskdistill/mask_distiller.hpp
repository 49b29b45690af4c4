#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "maskdistill/affinity_graph.hpp"
#include "maskdistill/feature_store.hpp"
#include "maskdistill/mask.hpp"

namespace maskdistill {

/// Binary mask over the patch grid plus the sets it was grown from.
/// Invariant: source is in refined, refined is a subset of proposals
/// (source excepted), and bits[source] == 1.
struct PatchMask {
    std::uint32_t grid_h = 0;
    std::uint32_t grid_w = 0;
    std::vector<std::uint8_t> bits;
    std::size_t source = 0;
    std::vector<std::size_t> proposals;  // ascending
    std::vector<std::size_t> refined;    // ascending

    bool operator==(const PatchMask&) const = default;
};

enum class ComponentMode { all, source_component };

struct DistillConfig {
    double k_fraction = 0.4;
    ComponentMode component_mode = ComponentMode::source_component;
};

/// max(1, floor(k_fraction * n)). Throws ParameterError unless 0 < k_fraction <= 1.
std::size_t proposal_count(double k_fraction, std::size_t n);

/// Indices of the proposal_count() largest affinities, ties to the lower
/// index. Returned in ascending index order.
std::vector<std::size_t> select_top_k(std::span<const double> a_cls, double k_fraction);

/// argmax with ties to the lowest index.
std::size_t find_source(std::span<const double> a_cls);

/// {j in proposals : a_patch[source][j] > 0} plus the source itself.
std::vector<std::size_t> refine_proposals(std::span<const std::size_t> proposals, std::size_t source,
                                          const SquareMatrix& a_patch);

/// bits[j] = 1 iff sum_{i in refined} a_patch[i][j] > 0; bits[source] forced to 1.
std::vector<std::uint8_t> build_patch_mask(std::span<const std::size_t> refined, const SquareMatrix& a_patch,
                                           std::size_t source);

/// source_component keeps the 4-connected component containing the source.
PatchMask extract_component(const PatchMask& mask, ComponentMode mode);

/// Nearest-neighbour upsampling of the patch grid by `patch_size`.
BinaryMask upsample_mask(const PatchMask& mask, std::uint32_t patch_size);

struct DistillResult {
    PatchMask patch_mask;
    BinaryMask pixel_mask;
    ObjectCandidate candidate;
};

/// Full single-object distillation for one image.
DistillResult distill_detailed(const FeaturePack& pack, const DistillConfig& config = {});

/// Candidate with score 1.0 and no label.
ObjectCandidate distill(const FeaturePack& pack, const DistillConfig& config = {});

}  // namespace maskdistill
