#include "maskdistill/seg_loss.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>

#include "maskdistill/errors.hpp"
#include "maskdistill/feature_store.hpp"

namespace maskdistill {

void LossInput::validate() const {
    if (n_pixels == 0 || n_classes == 0) throw ValidationError("loss: empty input");
    if (logits.size() != n_pixels * n_classes) throw ValidationError("loss: logits shape mismatch");
    if (targets.size() != n_pixels) throw ValidationError("loss: targets length mismatch");
    if (!(top_fraction > 0.0 && top_fraction <= 1.0)) throw ParameterError("loss: top_fraction must lie in (0, 1]");
    for (const auto t : targets) {
        if (t >= n_classes) throw ValidationError("loss: target " + std::to_string(t) + " out of range");
    }
    if (!std::all_of(logits.begin(), logits.end(), [](double v) { return std::isfinite(v); })) {
        throw ValidationError("loss: non-finite logit");
    }
}

std::size_t hard_pixel_count(double top_fraction, std::size_t n_pixels) {
    const auto count = static_cast<std::size_t>(std::floor(top_fraction * static_cast<double>(n_pixels) + 1e-9));
    return std::clamp<std::size_t>(count, 1, std::max<std::size_t>(n_pixels, 1));
}

LossResult hard_mining_ce(const LossInput& input) {
    input.validate();
    const std::size_t n = input.n_pixels, c = input.n_classes;
    LossResult result;
    result.pixel_ce.resize(n);
    std::vector<double> log_z(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = input.logits.data() + i * c;
        const double m = *std::max_element(row, row + c);
        double sum = 0.0;
        for (std::size_t k = 0; k < c; ++k) sum += std::exp(row[k] - m);
        log_z[i] = m + std::log(sum);
        result.pixel_ce[i] = log_z[i] - row[input.targets[i]];
    }

    const std::size_t t = hard_pixel_count(input.top_fraction, n);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const auto& ce = result.pixel_ce;
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(t), order.end(),
                      [&](std::size_t a, std::size_t b) { return ce[a] > ce[b] || (ce[a] == ce[b] && a < b); });
    order.resize(t);
    std::sort(order.begin(), order.end());
    result.selected = order;

    const double class_count = static_cast<double>(input.class_count != 0 ? input.class_count : c);
    const double norm = input.normalization == LossNormalization::pixels_times_classes
                            ? static_cast<double>(t) * class_count
                            : static_cast<double>(t);
    double total = 0.0;
    result.grad.assign(n * c, 0.0);
    for (const std::size_t i : result.selected) {
        total += ce[i];
        const double* row = input.logits.data() + i * c;
        double* g = result.grad.data() + i * c;
        for (std::size_t k = 0; k < c; ++k) g[k] = std::exp(row[k] - log_z[i]) / norm;
        g[input.targets[i]] -= 1.0 / norm;
    }
    result.loss = total / norm;
    return result;
}

std::vector<double> finite_difference_grad(const LossInput& input, double eps) {
    LossInput probe = input;
    std::vector<double> grad(input.logits.size());
    for (std::size_t e = 0; e < input.logits.size(); ++e) {
        probe.logits[e] = input.logits[e] + eps;
        const double plus = hard_mining_ce(probe).loss;
        probe.logits[e] = input.logits[e] - eps;
        const double minus = hard_mining_ce(probe).loss;
        probe.logits[e] = input.logits[e];
        grad[e] = (plus - minus) / (2.0 * eps);
    }
    return grad;
}

double relative_grad_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double max_diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        max_diff = std::max(max_diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max(scale, std::abs(analytic[i]));
    }
    if (scale == 0.0) return max_diff;
    return max_diff / scale;
}

namespace {

constexpr char kLossMagic[4] = {'M', 'D', 'L', 'G'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<std::uint8_t>((v >> shift) & 0xffu));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[offset + b]) << (8 * b);
    return v;
}

}  // namespace

void write_loss_input(const LossInput& input, const std::filesystem::path& path) {
    input.validate();
    std::vector<std::uint8_t> out(std::begin(kLossMagic), std::end(kLossMagic));
    put_u32(out, 1);
    put_u32(out, static_cast<std::uint32_t>(input.n_pixels));
    put_u32(out, static_cast<std::uint32_t>(input.n_classes));
    for (const double v : input.logits) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    for (const auto t : input.targets) put_u32(out, t);
    write_file_atomic(path, out);
}

LossInput read_loss_input(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kLossMagic, 4) != 0) throw FormatError("loss input: bad magic");
    if (get_u32(bytes, 4) != 1) throw FormatError("loss input: unsupported version");
    if (bytes.size() < 16) throw CorruptionError("loss input: truncated header");
    LossInput input;
    input.n_pixels = get_u32(bytes, 8);
    input.n_classes = get_u32(bytes, 12);
    const std::uint64_t expected = 16 + 4 * (std::uint64_t{input.n_pixels} * input.n_classes + input.n_pixels);
    if (bytes.size() != expected) throw CorruptionError("loss input: payload length mismatch");
    input.logits.resize(input.n_pixels * input.n_classes);
    for (std::size_t i = 0; i < input.logits.size(); ++i) {
        input.logits[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, 16 + 4 * i)));
    }
    const std::size_t targets_at = 16 + 4 * input.logits.size();
    input.targets.resize(input.n_pixels);
    for (std::size_t i = 0; i < input.n_pixels; ++i) input.targets[i] = get_u32(bytes, targets_at + 4 * i);
    input.validate();
    return input;
}

}  // namespace maskdistill
