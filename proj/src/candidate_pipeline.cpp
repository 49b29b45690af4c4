#include "maskdistill/candidate_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "maskdistill/errors.hpp"
#include "maskdistill/parallel.hpp"

namespace maskdistill {

void PipelineConfig::validate() const {
    if (!(tau >= 0.0 && tau <= 1.0)) throw ParameterError("tau must lie in [0, 1], got " + std::to_string(tau));
    if (!(k_fraction > 0.0 && k_fraction <= 1.0)) {
        throw ParameterError("k_fraction must lie in (0, 1], got " + std::to_string(k_fraction));
    }
    if (kmeans_k == 0) throw ParameterError("kmeans_k must be >= 1");
    if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) throw ParameterError("nms_iou must lie in [0, 1]");
    if (num_classes > 255) throw ParameterError("num_classes must be <= 255 for 8-bit label maps");
}

std::vector<ObjectCandidate> filter_by_confidence(const std::vector<ObjectCandidate>& records, double tau) {
    std::vector<ObjectCandidate> kept;
    for (const auto& r : records) {
        if (r.score > tau) kept.push_back(r);
    }
    if (kept.empty() && !records.empty()) {
        const auto best = std::max_element(records.begin(), records.end(),
                                           [](const auto& a, const auto& b) { return a.score < b.score; });
        kept.push_back(*best);
    }
    return kept;
}

namespace {

// Indices ordered by descending score, manifest order among ties.
std::vector<std::size_t> confidence_order(const std::vector<ObjectCandidate>& records) {
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return records[a].score > records[b].score; });
    return order;
}

}  // namespace

std::vector<ObjectCandidate> suppress_overlapping_masks(const std::vector<ObjectCandidate>& records,
                                                        double iou_threshold) {
    std::vector<BinaryMask> masks;
    masks.reserve(records.size());
    for (const auto& r : records) masks.push_back(decode_rle(r.rle));
    std::vector<std::size_t> kept;
    for (const std::size_t i : confidence_order(records)) {
        bool suppressed = false;
        for (const std::size_t j : kept) {
            const Overlap o = mask_overlap(masks[i], masks[j]);
            if (o.union_ > 0 && static_cast<double>(o.intersection) / static_cast<double>(o.union_) > iou_threshold) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) kept.push_back(i);
    }
    std::sort(kept.begin(), kept.end());
    std::vector<ObjectCandidate> out;
    for (const std::size_t i : kept) out.push_back(records[i]);
    return out;
}

SegmentationMap resolve_overlaps(const std::vector<ObjectCandidate>& records, std::uint32_t num_classes) {
    if (records.empty()) throw ValidationError("resolve_overlaps: no records");
    SegmentationMap map;
    map.image_id = records.front().image_id;
    map.height = records.front().rle.height;
    map.width = records.front().rle.width;
    map.labels.assign(static_cast<std::size_t>(map.height) * map.width, 0);

    std::uint32_t max_label = 0;
    for (const auto& r : records) {
        if (r.rle.height != map.height || r.rle.width != map.width) {
            throw ValidationError("resolve_overlaps: records of '" + map.image_id + "' differ in shape");
        }
        if (!r.label) throw ValidationError("resolve_overlaps: record of '" + r.image_id + "' has no label");
        if (*r.label < 1 || *r.label > 255) throw ValidationError("resolve_overlaps: label outside [1, 255]");
        max_label = std::max(max_label, static_cast<std::uint32_t>(*r.label));
    }
    if (num_classes != 0 && max_label > num_classes) {
        throw ValidationError("resolve_overlaps: label " + std::to_string(max_label) + " exceeds C = " +
                              std::to_string(num_classes));
    }
    map.num_classes = num_classes != 0 ? num_classes : max_label;

    // Least confident first so that the most confident mask paints last.
    auto order = confidence_order(records);
    std::reverse(order.begin(), order.end());
    for (const std::size_t i : order) {
        const BinaryMask mask = decode_rle(records[i].rle);
        const auto label = static_cast<std::uint8_t>(*records[i].label);
        for (std::size_t p = 0; p < mask.data.size(); ++p) {
            if (mask.data[p] != 0) map.labels[p] = label;
        }
    }
    return map;
}

std::vector<std::vector<ObjectCandidate>> group_by_image(const std::vector<ObjectCandidate>& manifest) {
    std::map<std::string, std::vector<ObjectCandidate>> groups;
    for (const auto& r : manifest) groups[r.image_id].push_back(r);
    std::vector<std::vector<ObjectCandidate>> out;
    out.reserve(groups.size());
    for (auto& [id, records] : groups) out.push_back(std::move(records));
    return out;
}

PseudoGroundTruth build_pseudo_ground_truth(const std::vector<ObjectCandidate>& manifest,
                                            const PipelineConfig& config, std::size_t threads) {
    config.validate();
    const auto groups = group_by_image(manifest);
    PseudoGroundTruth out;
    out.maps.resize(groups.size());
    out.kept.resize(groups.size());
    parallel_for(groups.size(), threads, [&](std::size_t g) {
        auto kept = filter_by_confidence(groups[g], config.tau);
        if (config.overlap_mode == OverlapMode::mask_nms) kept = suppress_overlapping_masks(kept, config.nms_iou);
        out.kept[g] = kept.size();
        out.maps[g] = resolve_overlaps(kept, config.num_classes);
    });
    return out;
}

std::vector<ObjectCandidate> map_to_instances(const SegmentationMap& map, const std::vector<ObjectCandidate>& records) {
    std::map<std::uint8_t, double> best_score;
    for (const auto& r : records) {
        if (!r.label || *r.label < 1 || *r.label > 255) continue;
        auto [it, inserted] = best_score.try_emplace(static_cast<std::uint8_t>(*r.label), r.score);
        if (!inserted) it->second = std::max(it->second, r.score);
    }
    std::vector<bool> present(256, false);
    for (const std::uint8_t v : map.labels) present[v] = true;

    std::vector<ObjectCandidate> instances;
    for (std::uint32_t label = 1; label < 256; ++label) {
        if (!present[label]) continue;
        BinaryMask mask(map.height, map.width);
        for (std::size_t p = 0; p < map.labels.size(); ++p) mask.data[p] = map.labels[p] == label ? 1 : 0;
        ObjectCandidate c;
        c.image_id = map.image_id;
        const auto it = best_score.find(static_cast<std::uint8_t>(label));
        c.score = it != best_score.end() ? it->second : 1.0;
        c.label = static_cast<std::int32_t>(label);
        c.bbox = mask_to_bbox(mask);
        c.rle = encode_rle(mask);
        instances.push_back(std::move(c));
    }
    return instances;
}

// ---------------------------------------------------------------------------
// PGM

std::string encode_pgm(const SegmentationMap& map) {
    if (map.labels.size() != static_cast<std::size_t>(map.height) * map.width) {
        throw ValidationError("label map size does not match its shape");
    }
    std::string out = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
    out.append(map.labels.begin(), map.labels.end());
    return out;
}

namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(const std::string& bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        const auto ch = static_cast<unsigned char>(bytes[pos]);
        if (ch == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (std::isspace(ch)) {
            ++pos;
        } else {
            break;
        }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
}

std::uint32_t parse_header_number(const std::string& token, const char* what) {
    if (token.empty() || token.size() > 9 ||
        !std::all_of(token.begin(), token.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); })) {
        throw FormatError(std::string("PGM: invalid ") + what + " '" + token + "'");
    }
    return static_cast<std::uint32_t>(std::stoul(token));
}

}  // namespace

SegmentationMap decode_pgm(const std::string& bytes, std::string image_id) {
    std::size_t pos = 0;
    if (next_token(bytes, pos) != "P5") throw FormatError("PGM: missing P5 magic");
    SegmentationMap map;
    map.image_id = std::move(image_id);
    map.width = parse_header_number(next_token(bytes, pos), "width");
    map.height = parse_header_number(next_token(bytes, pos), "height");
    const std::uint32_t maxval = parse_header_number(next_token(bytes, pos), "maxval");
    if (maxval == 0 || maxval > 255) throw FormatError("PGM: only 8-bit maps are supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        throw FormatError("PGM: header not terminated");
    }
    ++pos;
    const std::size_t n = static_cast<std::size_t>(map.width) * map.height;
    if (bytes.size() - pos != n) throw CorruptionError("PGM: pixel payload length mismatch");
    map.labels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end());
    std::uint8_t max_label = 0;
    for (const std::uint8_t v : map.labels) {
        if (v > maxval) throw FormatError("PGM: pixel value exceeds maxval");
        max_label = std::max(max_label, v);
    }
    map.num_classes = max_label;
    return map;
}

void write_pgm(const SegmentationMap& map, const std::filesystem::path& path) {
    write_file_atomic(path, encode_pgm(map));
}

SegmentationMap read_pgm(const std::filesystem::path& path, std::string image_id) {
    const auto bytes = read_file_bytes(path);
    try {
        return decode_pgm(std::string(bytes.begin(), bytes.end()), std::move(image_id));
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + e.what());
    } catch (const CorruptionError& e) {
        throw CorruptionError(path.string() + ": " + e.what());
    }
}

namespace {

std::string file_stem_for(const std::string& image_id) {
    std::string stem = image_id;
    for (char& c : stem) {
        if (c == '/' || c == '\\' || c == '\t' || c == '\n') c = '_';
    }
    return stem;
}

}  // namespace

std::filesystem::path write_pgm_index(const std::vector<SegmentationMap>& maps, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::vector<const SegmentationMap*> sorted;
    for (const auto& m : maps) sorted.push_back(&m);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->image_id < b->image_id; });
    std::string index;
    for (const auto* m : sorted) {
        if (m->image_id.find_first_of("\t\n") != std::string::npos) {
            throw ValidationError("image id contains a tab or newline: " + m->image_id);
        }
        const std::string name = file_stem_for(m->image_id) + ".pgm";
        write_pgm(*m, dir / name);
        index += m->image_id + "\t" + name + "\n";
    }
    const auto index_path = dir / "index.tsv";
    write_file_atomic(index_path, index);
    return index_path;
}

std::vector<SegmentationMap> read_pgm_index(const std::filesystem::path& index_path) {
    std::ifstream in(index_path);
    if (!in) throw IoError("cannot open " + index_path.string());
    std::vector<SegmentationMap> maps;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 == line.size()) {
            throw FormatError(index_path.string() + ":" + std::to_string(line_no) + ": expected 'image_id<TAB>path'");
        }
        std::filesystem::path rel = line.substr(tab + 1);
        const auto path = rel.is_absolute() ? rel : index_path.parent_path() / rel;
        maps.push_back(read_pgm(path, line.substr(0, tab)));
    }
    std::sort(maps.begin(), maps.end(), [](const auto& a, const auto& b) { return a.image_id < b.image_id; });
    for (std::size_t i = 1; i < maps.size(); ++i) {
        if (maps[i].image_id == maps[i - 1].image_id) {
            throw ValidationError("duplicate image id in index: " + maps[i].image_id);
        }
    }
    return maps;
}

}  // namespace maskdistill
