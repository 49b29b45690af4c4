#pragma once

#include <cstdint>
#include <vector>

namespace maskdistill {

/// Row-major binary pixel mask. Values are 0 or 1.
struct BinaryMask {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint8_t> data;

    BinaryMask() = default;
    BinaryMask(std::uint32_t h, std::uint32_t w, std::uint8_t fill = 0)
        : height(h), width(w), data(static_cast<std::size_t>(h) * w, fill) {}

    std::uint8_t at(std::uint32_t row, std::uint32_t col) const {
        return data[static_cast<std::size_t>(row) * width + col];
    }
    void set(std::uint32_t row, std::uint32_t col, std::uint8_t v = 1) {
        data[static_cast<std::size_t>(row) * width + col] = v;
    }
    std::size_t area() const;
    bool operator==(const BinaryMask&) const = default;
};

/// COCO uncompressed run-length encoding: column-major runs, starting with a
/// (possibly empty) run of zeros.
struct Rle {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    std::vector<std::uint32_t> counts;

    bool operator==(const Rle&) const = default;
};

/// Axis-aligned box in pixels: (x, y) is the top-left corner.
struct BoundingBox {
    std::uint32_t x = 0;
    std::uint32_t y = 0;
    std::uint32_t w = 0;
    std::uint32_t h = 0;

    bool operator==(const BoundingBox&) const = default;
};

Rle encode_rle(const BinaryMask& mask);

/// Throws FormatError when the counts do not sum to height * width.
BinaryMask decode_rle(const Rle& rle);

/// Number of foreground pixels, computed from the runs without decoding.
std::uint64_t rle_area(const Rle& rle);

/// Tight box around the set pixels. Throws EmptyMaskError for an empty mask.
BoundingBox mask_to_bbox(const BinaryMask& mask);

/// Intersection and union pixel counts of two same-shaped masks.
struct Overlap {
    std::uint64_t intersection = 0;
    std::uint64_t union_ = 0;
};

Overlap mask_overlap(const BinaryMask& a, const BinaryMask& b);

/// Box IoU on pixel-grid boxes (area = w * h).
double bbox_iou(const BoundingBox& a, const BoundingBox& b);

}  // namespace maskdistill
