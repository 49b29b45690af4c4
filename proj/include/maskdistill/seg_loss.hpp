#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace maskdistill {

enum class LossNormalization {
    pixels_times_classes,  // 1 / (|T| * |C|)
    pixels,                // 1 / |T|
};

/// Logits [n_pixels x n_classes] (row-major) with one target per pixel.
/// n_classes counts background, i.e. it is C + 1.
struct LossInput {
    std::size_t n_pixels = 0;
    std::size_t n_classes = 0;
    std::vector<double> logits;
    std::vector<std::uint32_t> targets;
    double top_fraction = 0.2;
    LossNormalization normalization = LossNormalization::pixels_times_classes;
    /// |C| in the normalizer; 0 means n_classes.
    std::size_t class_count = 0;

    void validate() const;
};

struct LossResult {
    double loss = 0.0;
    std::vector<double> grad;           // same layout as logits
    std::vector<std::size_t> selected;  // hard pixels, ascending
    std::vector<double> pixel_ce;       // per-pixel cross-entropy
};

/// max(1, floor(top_fraction * n_pixels)).
std::size_t hard_pixel_count(double top_fraction, std::size_t n_pixels);

/// Cross-entropy averaged over the hardest pixels with its exact gradient.
LossResult hard_mining_ce(const LossInput& input);

/// Central differences of the loss w.r.t. every logit; the hard pixel set is
/// re-selected at each perturbed point.
std::vector<double> finite_difference_grad(const LossInput& input, double eps);

/// max |analytic - numeric| / max |analytic| (0 when both are zero).
double relative_grad_error(const std::vector<double>& analytic, const std::vector<double>& numeric);

/// Container layout: "MDLG", u32 version=1, u32 n_pixels, u32 n_classes,
/// f32 logits[n_pixels * n_classes], u32 targets[n_pixels]; little-endian.
void write_loss_input(const LossInput& input, const std::filesystem::path& path);
LossInput read_loss_input(const std::filesystem::path& path);

}  // namespace maskdistill
