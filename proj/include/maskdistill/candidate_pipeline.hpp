#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "maskdistill/feature_store.hpp"
#include "maskdistill/mask_distiller.hpp"

namespace maskdistill {

/// Per-pixel cluster labels of one image. 0 is background.
struct SegmentationMap {
    std::string image_id;
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> labels;  // row-major
    std::uint32_t num_classes = 0;     // C; nonzero labels lie in [1, C]

    std::uint8_t at(std::uint32_t row, std::uint32_t col) const {
        return labels[static_cast<std::size_t>(row) * width + col];
    }
    bool operator==(const SegmentationMap&) const = default;
};

enum class OverlapMode {
    per_pixel,  // most confident mask owns every contested pixel
    mask_nms,   // drop whole masks overlapping a more confident one, then per_pixel
};

struct PipelineConfig {
    double tau = 0.9;
    double k_fraction = 0.4;
    std::size_t kmeans_k = 20;
    ComponentMode component_mode = ComponentMode::source_component;
    std::uint64_t seed = 0;
    OverlapMode overlap_mode = OverlapMode::per_pixel;
    double nms_iou = 0.5;
    /// C for the output maps; 0 infers the largest label present.
    std::uint32_t num_classes = 0;

    /// Throws ParameterError on out-of-range values.
    void validate() const;
};

/// Keeps records with score > tau; when none pass, keeps the single best
/// record (first in manifest order among equal scores).
std::vector<ObjectCandidate> filter_by_confidence(const std::vector<ObjectCandidate>& records, double tau);

/// Removes every record whose mask IoU with an already kept, more confident
/// record exceeds `iou_threshold`. Order of survivors is preserved.
std::vector<ObjectCandidate> suppress_overlapping_masks(const std::vector<ObjectCandidate>& records,
                                                        double iou_threshold);

/// Paints masks in ascending score order; equal scores resolve in favour of
/// the earlier record. Records must be labeled and share one shape.
SegmentationMap resolve_overlaps(const std::vector<ObjectCandidate>& records, std::uint32_t num_classes = 0);

/// Records grouped by image id (sorted); manifest order is kept within a group.
std::vector<std::vector<ObjectCandidate>> group_by_image(const std::vector<ObjectCandidate>& manifest);

struct PseudoGroundTruth {
    std::vector<SegmentationMap> maps;  // sorted by image_id
    std::vector<std::size_t> kept;      // records surviving the filter, per map
};

PseudoGroundTruth build_pseudo_ground_truth(const std::vector<ObjectCandidate>& manifest,
                                            const PipelineConfig& config, std::size_t threads = 1);

/// One instance per nonzero label of `map`. The score of a label region is the
/// highest score among `records` carrying that label (1.0 when none does).
std::vector<ObjectCandidate> map_to_instances(const SegmentationMap& map, const std::vector<ObjectCandidate>& records);

// 8-bit binary PGM (P5) label images.
std::string encode_pgm(const SegmentationMap& map);
SegmentationMap decode_pgm(const std::string& bytes, std::string image_id);
void write_pgm(const SegmentationMap& map, const std::filesystem::path& path);
SegmentationMap read_pgm(const std::filesystem::path& path, std::string image_id);

/// Writes <dir>/<image_id>.pgm for every map plus <dir>/index.tsv with one
/// "image_id<TAB>relative path" line per map. Returns the index path.
std::filesystem::path write_pgm_index(const std::vector<SegmentationMap>& maps, const std::filesystem::path& dir);

/// Maps listed by an index file, sorted by image_id. num_classes is set to the
/// largest label found.
std::vector<SegmentationMap> read_pgm_index(const std::filesystem::path& index_path);

}  // namespace maskdistill
