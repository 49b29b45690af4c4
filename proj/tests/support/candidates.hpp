#pragma once

#include <optional>
#include <string>

#include "maskdistill/feature_store.hpp"

namespace maskdistill::testing {

inline ObjectCandidate make_candidate(const std::string& id, const BinaryMask& mask, double score,
                                      std::optional<int> label) {
    ObjectCandidate c;
    c.image_id = id;
    c.score = score;
    c.label = label;
    c.bbox = mask.area() > 0 ? mask_to_bbox(mask) : BoundingBox{};
    c.rle = encode_rle(mask);
    return c;
}

/// Mask with the half-open rectangle [y0, y1) x [x0, x1) set.
inline BinaryMask rect_mask(std::uint32_t h, std::uint32_t w, std::uint32_t y0, std::uint32_t x0, std::uint32_t y1,
                            std::uint32_t x1) {
    BinaryMask m(h, w);
    for (std::uint32_t y = y0; y < y1; ++y) {
        for (std::uint32_t x = x0; x < x1; ++x) m.set(y, x);
    }
    return m;
}

}  // namespace maskdistill::testing
