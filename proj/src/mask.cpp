#include "maskdistill/mask.hpp"

#include <algorithm>
#include <numeric>

#include "maskdistill/errors.hpp"

namespace maskdistill {

std::size_t BinaryMask::area() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](std::uint8_t v) { return v != 0; }));
}

Rle encode_rle(const BinaryMask& mask) {
    if (mask.data.size() != static_cast<std::size_t>(mask.height) * mask.width) {
        throw ValidationError("mask data length does not match its shape");
    }
    Rle rle{mask.height, mask.width, {}};
    std::uint8_t current = 0;
    std::uint32_t run = 0;
    for (std::uint32_t col = 0; col < mask.width; ++col) {
        for (std::uint32_t row = 0; row < mask.height; ++row) {
            const std::uint8_t v = mask.at(row, col) != 0 ? 1 : 0;
            if (v != current) {
                rle.counts.push_back(run);
                run = 0;
                current = v;
            }
            ++run;
        }
    }
    rle.counts.push_back(run);
    return rle;
}

BinaryMask decode_rle(const Rle& rle) {
    const std::uint64_t total = static_cast<std::uint64_t>(rle.height) * rle.width;
    const std::uint64_t sum = std::accumulate(rle.counts.begin(), rle.counts.end(), std::uint64_t{0});
    if (sum != total) {
        throw FormatError("RLE counts sum to " + std::to_string(sum) + ", expected " + std::to_string(total));
    }
    BinaryMask mask(rle.height, rle.width);
    std::uint64_t pos = 0;
    std::uint8_t value = 0;
    for (const std::uint32_t run : rle.counts) {
        if (value != 0) {
            for (std::uint64_t p = pos; p < pos + run; ++p) {
                const auto col = static_cast<std::uint32_t>(p / rle.height);
                const auto row = static_cast<std::uint32_t>(p % rle.height);
                mask.set(row, col);
            }
        }
        pos += run;
        value ^= 1;
    }
    return mask;
}

std::uint64_t rle_area(const Rle& rle) {
    std::uint64_t area = 0;
    for (std::size_t i = 1; i < rle.counts.size(); i += 2) {
        area += rle.counts[i];
    }
    return area;
}

BoundingBox mask_to_bbox(const BinaryMask& mask) {
    std::uint32_t min_row = mask.height, min_col = mask.width, max_row = 0, max_col = 0;
    bool any = false;
    for (std::uint32_t row = 0; row < mask.height; ++row) {
        for (std::uint32_t col = 0; col < mask.width; ++col) {
            if (mask.at(row, col) == 0) continue;
            any = true;
            min_row = std::min(min_row, row);
            max_row = std::max(max_row, row);
            min_col = std::min(min_col, col);
            max_col = std::max(max_col, col);
        }
    }
    if (!any) throw EmptyMaskError("cannot compute the bounding box of an empty mask");
    return {min_col, min_row, max_col - min_col + 1, max_row - min_row + 1};
}

Overlap mask_overlap(const BinaryMask& a, const BinaryMask& b) {
    if (a.height != b.height || a.width != b.width) {
        throw ValidationError("mask shapes differ");
    }
    Overlap o;
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
        o.intersection += (pa && pb) ? 1 : 0;
        o.union_ += (pa || pb) ? 1 : 0;
    }
    return o;
}

double bbox_iou(const BoundingBox& a, const BoundingBox& b) {
    const auto x0 = std::max<std::int64_t>(a.x, b.x);
    const auto y0 = std::max<std::int64_t>(a.y, b.y);
    const auto x1 = std::min<std::int64_t>(std::int64_t{a.x} + a.w, std::int64_t{b.x} + b.w);
    const auto y1 = std::min<std::int64_t>(std::int64_t{a.y} + a.h, std::int64_t{b.y} + b.h);
    const std::int64_t inter = std::max<std::int64_t>(0, x1 - x0) * std::max<std::int64_t>(0, y1 - y0);
    const std::int64_t uni = std::int64_t{a.w} * a.h + std::int64_t{b.w} * b.h - inter;
    return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

}  // namespace maskdistill
