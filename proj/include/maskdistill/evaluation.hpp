#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "maskdistill/candidate_pipeline.hpp"
#include "maskdistill/feature_store.hpp"

namespace maskdistill {

/// Dense row-major real matrix.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

    double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
    double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
};

struct Assignment {
    std::vector<int> row_to_col;  // -1: matched to a padding column
    std::vector<int> col_to_row;  // -1: matched to a padding row
    double profit = 0.0;          // sum of the matched real entries, in row order
};

/// Maximum-profit one-to-one assignment. Non-square matrices are padded with
/// zero-profit dummies; among optimal assignments of the padded matrix the
/// lexicographically smallest row->column sequence is returned.
Assignment hungarian_match(const Matrix& profit);

struct ConfusionMatrix {
    std::size_t n_pred = 0;
    std::size_t n_gt = 0;
    std::vector<std::uint64_t> counts;  // [n_pred x n_gt]
    std::uint64_t total = 0;

    std::uint64_t operator()(std::size_t p, std::size_t g) const { return counts[p * n_gt + g]; }
};

struct SemsegOptions {
    /// Ground-truth pixels with this value are skipped.
    int ignore_label = 255;
    /// Class counts; 0 infers max label + 1 from the data.
    std::size_t n_pred = 0;
    std::size_t n_gt = 0;
};

/// Pixel co-occurrence of predicted cluster p and ground-truth class g.
/// Maps are paired by image id; throws ValidationError on id/shape mismatch.
ConfusionMatrix build_confusion(const std::vector<SegmentationMap>& pred, const std::vector<SegmentationMap>& gt,
                                const SemsegOptions& options = {});

struct SemsegReport {
    std::vector<std::optional<double>> per_class_iou;  // nullopt: class absent from both sides
    double miou = 0.0;
    std::vector<int> assignment;  // predicted cluster -> gt class, -1 when unmatched (scored as background)
    std::vector<std::size_t> undefined_classes;
    std::vector<std::size_t> unmatched_gt_classes;
    std::vector<std::size_t> unmatched_pred_clusters;
    std::uint64_t pixel_count = 0;
};

/// IoU per ground-truth class after relabelling predictions through
/// `assignment`. Unmatched clusters count as background (class 0).
SemsegReport miou(const ConfusionMatrix& confusion, const std::vector<int>& assignment);

SemsegReport miou(const std::vector<SegmentationMap>& pred, const std::vector<SegmentationMap>& gt,
                  const std::vector<int>& assignment, const SemsegOptions& options = {});

/// Hungarian matching on the confusion counts followed by miou().
SemsegReport evaluate_semseg(const std::vector<SegmentationMap>& pred, const std::vector<SegmentationMap>& gt,
                             const SemsegOptions& options = {});

enum class ApProtocol { single, multi };
enum class ClassMode { agnostic, semantic };

struct ApResult {
    bool valid = false;  // false when no category has ground truth
    double ap = 0.0;     // mean over IoU 0.50:0.05:0.95
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::vector<double> per_threshold;        // 10 entries
    std::map<int, double> per_class_ap;       // semantic mode only
    std::map<int, double> per_class_ap50;
};

struct ApOptions {
    std::size_t max_dets = 100;
};

/// COCO-style mask AP. In semantic mode `cluster_to_class` maps prediction
/// labels to ground-truth labels; predictions of unmapped clusters are dropped.
ApResult mask_ap(const std::vector<ObjectCandidate>& pred, const std::vector<ObjectCandidate>& gt,
                 ApProtocol protocol, ClassMode class_mode, const std::map<int, int>& cluster_to_class = {},
                 const ApOptions& options = {});

/// Hungarian matching of prediction clusters to ground-truth classes using
/// summed mask intersections (pixels) between same-image instances as profit.
std::map<int, int> match_instance_clusters(const std::vector<ObjectCandidate>& pred,
                                           const std::vector<ObjectCandidate>& gt);

/// Reduces each image to its most confident prediction and the ground truth
/// with the largest box IoU against it. Images without predictions keep their
/// first ground-truth record.
void reduce_to_single_object(std::vector<ObjectCandidate>& pred, std::vector<ObjectCandidate>& gt);

}  // namespace maskdistill
