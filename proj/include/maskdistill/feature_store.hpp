#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskdistill/mask.hpp"

namespace maskdistill {

/// Per-image transformer features from the final attention block.
///
/// Layout: q_cls is [heads x head_dim]; k_patch is [heads x N x head_dim]
/// with patch index j = row * grid_w + col; cls_embed is empty or
/// [embed_dim]. The image id is not stored in the file; readers take it from
/// the file stem.
struct FeaturePack {
    std::string image_id;
    std::uint32_t img_h = 0;
    std::uint32_t img_w = 0;
    std::uint32_t patch_size = 0;
    std::uint32_t grid_h = 0;
    std::uint32_t grid_w = 0;
    std::uint32_t heads = 0;
    std::uint32_t head_dim = 0;
    std::vector<float> q_cls;
    std::vector<float> k_patch;
    std::vector<float> cls_embed;

    std::size_t num_patches() const { return static_cast<std::size_t>(grid_h) * grid_w; }

    std::span<const float> query(std::size_t head) const {
        return std::span<const float>(q_cls).subspan(head * head_dim, head_dim);
    }
    std::span<const float> key(std::size_t head, std::size_t patch) const {
        return std::span<const float>(k_patch).subspan((head * num_patches() + patch) * head_dim, head_dim);
    }

    /// Throws ValidationError on any invariant violation.
    void validate() const;

    bool operator==(const FeaturePack&) const = default;
};

inline constexpr char kFeaturePackMagic[4] = {'M', 'D', 'F', 'P'};
inline constexpr std::uint32_t kFeaturePackVersion = 1;
inline constexpr std::size_t kFeaturePackHeaderBytes = 4 + 4 * 9;

/// Serializes a pack to its exact on-disk byte representation.
std::vector<std::uint8_t> serialize_feature_pack(const FeaturePack& pack);

/// Parses bytes produced by serialize_feature_pack. `image_id` is attached
/// to the result as-is.
FeaturePack parse_feature_pack(std::span<const std::uint8_t> bytes, std::string image_id);

FeaturePack read_feature_pack(const std::filesystem::path& path);

/// Atomic: the bytes go to a sibling temporary which is renamed into place.
void write_feature_pack(const FeaturePack& pack, const std::filesystem::path& path);

/// All "*.mdfp" files in a directory, sorted by path.
std::vector<std::filesystem::path> list_feature_packs(const std::filesystem::path& dir);

/// One object mask candidate: a manifest record.
struct ObjectCandidate {
    std::string image_id;
    double score = 0.0;
    std::optional<std::int32_t> label;
    BoundingBox bbox;
    Rle rle;

    bool operator==(const ObjectCandidate&) const = default;
};

/// Checks score range, label range, RLE count sum and the bbox tightness.
void validate_candidate(const ObjectCandidate& record);

std::string candidate_to_json_line(const ObjectCandidate& record);

/// Throws FormatError on malformed text and ValidationError on bad values.
ObjectCandidate candidate_from_json_line(const std::string& line);

std::vector<ObjectCandidate> read_manifest(const std::filesystem::path& path);

void write_manifest(const std::vector<ObjectCandidate>& records, const std::filesystem::path& path);

/// Writes `bytes` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace maskdistill
