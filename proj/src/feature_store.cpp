#include "maskdistill/feature_store.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "json.hpp"
#include "maskdistill/errors.hpp"

namespace maskdistill {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xffu));
    out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xffu));
    out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xffu));
    out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xffu));
}

void put_f32s(std::vector<std::uint8_t>& out, const std::vector<float>& values) {
    for (const float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t offset) {
    return static_cast<std::uint32_t>(bytes[offset]) | (static_cast<std::uint32_t>(bytes[offset + 1]) << 8) |
           (static_cast<std::uint32_t>(bytes[offset + 2]) << 16) |
           (static_cast<std::uint32_t>(bytes[offset + 3]) << 24);
}

std::vector<float> get_f32s(std::span<const std::uint8_t> bytes, std::size_t offset, std::size_t count) {
    std::vector<float> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        values[i] = std::bit_cast<float>(get_u32(bytes, offset + 4 * i));
    }
    return values;
}

bool all_finite(const std::vector<float>& values) {
    return std::all_of(values.begin(), values.end(), [](float v) { return std::isfinite(v); });
}

// Dimension consistency shared by validate() and the parser; the caller picks
// the error type.
std::optional<std::string> dimension_problem(const FeaturePack& p) {
    if (p.grid_h == 0 || p.grid_w == 0) return "grid must have at least one patch";
    if (p.heads == 0) return "heads must be >= 1";
    if (p.head_dim == 0) return "head_dim must be >= 1";
    if (p.patch_size == 0) return "patch_size must be >= 1";
    if (static_cast<std::uint64_t>(p.grid_h) * p.patch_size != p.img_h ||
        static_cast<std::uint64_t>(p.grid_w) * p.patch_size != p.img_w) {
        return "image size is not grid size times patch size";
    }
    return std::nullopt;
}

}  // namespace

void FeaturePack::validate() const {
    if (auto problem = dimension_problem(*this)) throw ValidationError("feature pack: " + *problem);
    if (q_cls.size() != static_cast<std::size_t>(heads) * head_dim) {
        throw ValidationError("feature pack: q_cls length mismatch");
    }
    if (k_patch.size() != static_cast<std::size_t>(heads) * num_patches() * head_dim) {
        throw ValidationError("feature pack: k_patch length mismatch");
    }
    if (!all_finite(q_cls) || !all_finite(k_patch) || !all_finite(cls_embed)) {
        throw ValidationError("feature pack: non-finite value");
    }
}

std::vector<std::uint8_t> serialize_feature_pack(const FeaturePack& pack) {
    pack.validate();
    std::vector<std::uint8_t> out;
    out.reserve(kFeaturePackHeaderBytes + 4 * (pack.q_cls.size() + pack.k_patch.size() + pack.cls_embed.size()));
    out.insert(out.end(), std::begin(kFeaturePackMagic), std::end(kFeaturePackMagic));
    put_u32(out, kFeaturePackVersion);
    for (const std::uint32_t field : {pack.img_h, pack.img_w, pack.patch_size, pack.grid_h, pack.grid_w, pack.heads,
                                      pack.head_dim, static_cast<std::uint32_t>(pack.cls_embed.size())}) {
        put_u32(out, field);
    }
    put_f32s(out, pack.q_cls);
    put_f32s(out, pack.k_patch);
    put_f32s(out, pack.cls_embed);
    return out;
}

FeaturePack parse_feature_pack(std::span<const std::uint8_t> bytes, std::string image_id) {
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kFeaturePackMagic, 4) != 0) {
        throw FormatError("feature pack: bad magic");
    }
    if (const auto version = get_u32(bytes, 4); version != kFeaturePackVersion) {
        throw FormatError("feature pack: unsupported version " + std::to_string(version));
    }
    if (bytes.size() < kFeaturePackHeaderBytes) throw CorruptionError("feature pack: truncated header");

    FeaturePack pack;
    pack.image_id = std::move(image_id);
    pack.img_h = get_u32(bytes, 8);
    pack.img_w = get_u32(bytes, 12);
    pack.patch_size = get_u32(bytes, 16);
    pack.grid_h = get_u32(bytes, 20);
    pack.grid_w = get_u32(bytes, 24);
    pack.heads = get_u32(bytes, 28);
    pack.head_dim = get_u32(bytes, 32);
    const std::uint32_t embed_dim = get_u32(bytes, 36);
    if (auto problem = dimension_problem(pack)) throw CorruptionError("feature pack: " + *problem);

    // 64-bit arithmetic: u32 products cannot overflow here.
    const std::uint64_t n_q = std::uint64_t{pack.heads} * pack.head_dim;
    const std::uint64_t n_k = n_q * pack.grid_h * pack.grid_w;
    const std::uint64_t expected = kFeaturePackHeaderBytes + 4 * (n_q + n_k + embed_dim);
    if (expected != bytes.size()) {
        throw CorruptionError("feature pack: payload is " + std::to_string(bytes.size()) + " bytes, header implies " +
                              std::to_string(expected));
    }
    std::size_t offset = kFeaturePackHeaderBytes;
    pack.q_cls = get_f32s(bytes, offset, n_q);
    offset += 4 * n_q;
    pack.k_patch = get_f32s(bytes, offset, n_k);
    offset += 4 * n_k;
    pack.cls_embed = get_f32s(bytes, offset, embed_dim);
    pack.validate();
    return pack;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path.string());
    return bytes;
}

FeaturePack read_feature_pack(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse_feature_pack(bytes, path.stem().string());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    const auto tag = std::to_string(::getpid()) + "-" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()));
    std::filesystem::path tmp = path;
    tmp += ".tmp-" + tag;
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot create " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            std::error_code ignored;
            std::filesystem::remove(tmp, ignored);
            throw IoError("write failed: " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::error_code ignored;
        std::filesystem::remove(tmp, ignored);
        throw IoError("cannot rename into " + path.string() + ": " + ec.message());
    }
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_feature_pack(const FeaturePack& pack, const std::filesystem::path& path) {
    const auto bytes = serialize_feature_pack(pack);
    write_file_atomic(path, bytes);
}

std::vector<std::filesystem::path> list_feature_packs(const std::filesystem::path& dir) {
    std::error_code ec;
    if (!std::filesystem::is_directory(dir, ec)) throw IoError("not a directory: " + dir.string());
    std::vector<std::filesystem::path> paths;
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".mdfp") paths.push_back(entry.path());
    }
    std::sort(paths.begin(), paths.end());
    return paths;
}

// ---------------------------------------------------------------------------
// Candidate manifest

void validate_candidate(const ObjectCandidate& r) {
    if (!(r.score >= 0.0 && r.score <= 1.0)) {
        throw ValidationError("record " + r.image_id + ": score outside [0,1]");
    }
    if (r.label && *r.label < 1) throw ValidationError("record " + r.image_id + ": label must be >= 1");
    const BinaryMask mask = decode_rle(r.rle);
    if (mask.area() == 0) {
        if (r.bbox != BoundingBox{}) throw ValidationError("record " + r.image_id + ": empty mask with non-empty bbox");
        return;
    }
    if (mask_to_bbox(mask) != r.bbox) throw ValidationError("record " + r.image_id + ": bbox is not tight");
}

std::string candidate_to_json_line(const ObjectCandidate& r) {
    nlohmann::ordered_json j;
    j["image_id"] = r.image_id;
    j["score"] = r.score;
    j["label"] = r.label ? nlohmann::ordered_json(*r.label) : nlohmann::ordered_json(nullptr);
    j["bbox"] = {r.bbox.x, r.bbox.y, r.bbox.w, r.bbox.h};
    j["rle"]["size"] = {r.rle.height, r.rle.width};
    j["rle"]["counts"] = r.rle.counts;
    return j.dump();
}

ObjectCandidate candidate_from_json_line(const std::string& line) {
    ObjectCandidate r;
    try {
        const auto j = nlohmann::json::parse(line);
        r.image_id = j.at("image_id").get<std::string>();
        r.score = j.at("score").get<double>();
        if (const auto& label = j.at("label"); !label.is_null()) r.label = label.get<std::int32_t>();
        const auto& bbox = j.at("bbox");
        if (!bbox.is_array() || bbox.size() != 4) throw FormatError("bbox must have 4 entries");
        r.bbox = {bbox[0].get<std::uint32_t>(), bbox[1].get<std::uint32_t>(), bbox[2].get<std::uint32_t>(),
                  bbox[3].get<std::uint32_t>()};
        const auto& size = j.at("rle").at("size");
        if (!size.is_array() || size.size() != 2) throw FormatError("rle.size must have 2 entries");
        r.rle.height = size[0].get<std::uint32_t>();
        r.rle.width = size[1].get<std::uint32_t>();
        r.rle.counts = j.at("rle").at("counts").get<std::vector<std::uint32_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest record: ") + e.what());
    }
    validate_candidate(r);
    return r;
}

std::vector<ObjectCandidate> read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<ObjectCandidate> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            records.push_back(candidate_from_json_line(line));
        } catch (const FormatError& e) {
            throw FormatError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const ValidationError& e) {
            throw ValidationError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return records;
}

void write_manifest(const std::vector<ObjectCandidate>& records, const std::filesystem::path& path) {
    std::string text;
    for (const auto& r : records) {
        validate_candidate(r);
        text += candidate_to_json_line(r);
        text += '\n';
    }
    write_file_atomic(path, text);
}

}  // namespace maskdistill
