#include "maskdistill/embedding_cluster.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>
#include <random>

#include "maskdistill/errors.hpp"

namespace maskdistill {

namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t d = 0; d < a.size(); ++d) {
        const double diff = a[d] - b[d];
        acc += diff * diff;
    }
    return acc;
}

// Bit-reproducible across standard libraries, unlike std::uniform_real_distribution.
double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
    return std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n)));
}

PointMatrix kmeans_plus_plus(const PointMatrix& points, std::size_t k, std::mt19937_64& rng) {
    PointMatrix centers(k, points.dim);
    std::vector<double> nearest(points.rows, std::numeric_limits<double>::infinity());
    std::size_t chosen = uniform_index(rng, points.rows);
    for (std::size_t c = 0; c < k; ++c) {
        std::copy_n(points.row(chosen).begin(), points.dim, centers.row(c).begin());
        if (c + 1 == k) break;
        double total = 0.0;
        for (std::size_t i = 0; i < points.rows; ++i) {
            nearest[i] = std::min(nearest[i], squared_distance(points.row(i), centers.row(c)));
            total += nearest[i];
        }
        if (total <= 0.0) {
            chosen = uniform_index(rng, points.rows);
            continue;
        }
        const double target = uniform01(rng) * total;
        double running = 0.0;
        chosen = points.rows - 1;
        for (std::size_t i = 0; i < points.rows; ++i) {
            running += nearest[i];
            if (running > target && nearest[i] > 0.0) {
                chosen = i;
                break;
            }
        }
    }
    return centers;
}

// Returns the inertia of the assignment.
double assign_points(const PointMatrix& points, const PointMatrix& centers, std::vector<std::size_t>& labels,
                     std::vector<double>& distances) {
    double inertia = 0.0;
    for (std::size_t i = 0; i < points.rows; ++i) {
        std::size_t best = 0;
        double best_d = squared_distance(points.row(i), centers.row(0));
        for (std::size_t c = 1; c < centers.rows; ++c) {
            const double d = squared_distance(points.row(i), centers.row(c));
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        distances[i] = best_d;
        inertia += best_d;
    }
    return inertia;
}

void relocate_empty_clusters(std::vector<std::size_t>& labels, std::vector<double>& distances, std::size_t k) {
    std::vector<std::size_t> sizes(k, 0);
    for (const std::size_t l : labels) ++sizes[l];
    for (std::size_t c = 0; c < k; ++c) {
        if (sizes[c] != 0) continue;
        std::size_t far = labels.size();
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (sizes[labels[i]] < 2) continue;
            if (far == labels.size() || distances[i] > distances[far]) far = i;
        }
        if (far == labels.size()) break;  // n >= k guarantees this never triggers
        --sizes[labels[far]];
        labels[far] = c;
        distances[far] = 0.0;
        sizes[c] = 1;
    }
}

void update_centroids(const PointMatrix& points, const std::vector<std::size_t>& labels, PointMatrix& centers) {
    std::vector<std::size_t> sizes(centers.rows, 0);
    std::fill(centers.values.begin(), centers.values.end(), 0.0);
    for (std::size_t i = 0; i < points.rows; ++i) {
        auto dst = centers.row(labels[i]);
        const auto src = points.row(i);
        for (std::size_t d = 0; d < points.dim; ++d) dst[d] += src[d];
        ++sizes[labels[i]];
    }
    for (std::size_t c = 0; c < centers.rows; ++c) {
        if (sizes[c] == 0) continue;
        for (double& v : centers.row(c)) v /= static_cast<double>(sizes[c]);
    }
}

KMeansModel lloyd(const PointMatrix& points, PointMatrix centers, std::size_t max_iter) {
    KMeansModel model;
    model.k = centers.rows;
    std::vector<std::size_t> labels(points.rows, 0), previous;
    std::vector<double> distances(points.rows, 0.0);
    for (std::size_t iter = 0; iter < std::max<std::size_t>(max_iter, 1); ++iter) {
        const double inertia = assign_points(points, centers, labels, distances);
        model.inertia_history.push_back(inertia);
        model.iterations_run = iter + 1;
        if (labels == previous) break;
        relocate_empty_clusters(labels, distances, centers.rows);
        update_centroids(points, labels, centers);
        previous = labels;
    }
    model.centroids = std::move(centers);
    std::vector<std::size_t> final_labels(points.rows, 0);
    model.inertia = assign_points(points, model.centroids, final_labels, distances);
    return model;
}

}  // namespace

KMeansModel kmeans_fit(const PointMatrix& points, const KMeansOptions& options) {
    if (options.k == 0) throw ParameterError("kmeans: k must be >= 1");
    if (points.rows < options.k) {
        throw ParameterError("kmeans: " + std::to_string(points.rows) + " points cannot form " +
                             std::to_string(options.k) + " clusters");
    }
    if (points.dim == 0) throw ParameterError("kmeans: points must have at least one dimension");
    if (points.values.size() != points.rows * points.dim) throw ValidationError("kmeans: point matrix shape mismatch");
    if (!std::all_of(points.values.begin(), points.values.end(), [](double v) { return std::isfinite(v); })) {
        throw ValidationError("kmeans: non-finite input");
    }

    std::mt19937_64 rng(options.seed);
    KMeansModel best;
    bool have_best = false;
    for (std::size_t run = 0; run < std::max<std::size_t>(options.restarts, 1); ++run) {
        KMeansModel candidate = lloyd(points, kmeans_plus_plus(points, options.k, rng), options.max_iter);
        if (!have_best || candidate.inertia < best.inertia) {
            best = std::move(candidate);
            have_best = true;
        }
    }
    best.seed = options.seed;
    return best;
}

std::vector<std::size_t> kmeans_assign(const KMeansModel& model, const PointMatrix& points) {
    if (model.centroids.rows == 0) throw ValidationError("kmeans_assign: model has no centroids");
    if (points.dim != model.centroids.dim) {
        throw ValidationError("kmeans_assign: point dim " + std::to_string(points.dim) + " != model dim " +
                              std::to_string(model.centroids.dim));
    }
    std::vector<std::size_t> labels(points.rows, 0);
    std::vector<double> distances(points.rows, 0.0);
    assign_points(points, model.centroids, labels, distances);
    return labels;
}

void l2_normalize_rows(PointMatrix& points) {
    for (std::size_t i = 0; i < points.rows; ++i) {
        auto row = points.row(i);
        double norm = 0.0;
        for (const double v : row) norm += v * v;
        norm = std::sqrt(norm);
        if (norm == 0.0) continue;
        for (double& v : row) v /= norm;
    }
}

void EmbeddingTable::insert(std::string key, std::vector<float> embedding) {
    table_.insert_or_assign(std::move(key), std::move(embedding));
}

EmbeddingTable EmbeddingTable::from_pack_dir(const std::filesystem::path& dir) {
    EmbeddingTable table;
    for (const auto& path : list_feature_packs(dir)) {
        FeaturePack pack = read_feature_pack(path);
        if (pack.cls_embed.empty()) continue;
        table.insert(pack.image_id, std::move(pack.cls_embed));
    }
    return table;
}

const std::vector<float>& EmbeddingTable::find(const ObjectCandidate& record, std::size_t ordinal) const {
    if (auto it = table_.find(record.image_id + "#" + std::to_string(ordinal)); it != table_.end()) return it->second;
    if (auto it = table_.find(record.image_id); it != table_.end()) return it->second;
    throw LookupError("no masked-image embedding for image_id '" + record.image_id + "' (record " +
                      std::to_string(ordinal) + ")",
                      record.image_id);
}

PointMatrix gather_embeddings(const std::vector<ObjectCandidate>& manifest, const EmbeddingTable& embeddings) {
    std::map<std::string, std::size_t> ordinals;
    PointMatrix points;
    for (std::size_t r = 0; r < manifest.size(); ++r) {
        const auto& embedding = embeddings.find(manifest[r], ordinals[manifest[r].image_id]++);
        if (r == 0) {
            points = PointMatrix(manifest.size(), embedding.size());
        } else if (embedding.size() != points.dim) {
            throw ValidationError("embedding for '" + manifest[r].image_id + "' has dim " +
                                  std::to_string(embedding.size()) + ", expected " + std::to_string(points.dim));
        }
        std::copy(embedding.begin(), embedding.end(), points.row(r).begin());
    }
    return points;
}

std::vector<ObjectCandidate> label_candidates(const std::vector<ObjectCandidate>& manifest,
                                              const EmbeddingTable& embeddings, const KMeansModel& model,
                                              bool l2_normalize) {
    if (manifest.empty()) return {};
    PointMatrix points = gather_embeddings(manifest, embeddings);
    if (l2_normalize) l2_normalize_rows(points);
    const auto assignment = kmeans_assign(model, points);
    std::vector<ObjectCandidate> labeled = manifest;
    for (std::size_t r = 0; r < labeled.size(); ++r) labeled[r].label = static_cast<std::int32_t>(assignment[r] + 1);
    return labeled;
}

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<std::uint8_t>((v >> shift) & 0xffu));
}

std::uint32_t get_u32(const std::vector<std::uint8_t>& bytes, std::size_t offset) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(bytes[offset + b]) << (8 * b);
    return v;
}

}  // namespace

void write_kmeans_model(const KMeansModel& model, const std::filesystem::path& path) {
    std::vector<std::uint8_t> out(std::begin(kKMeansMagic), std::end(kKMeansMagic));
    put_u32(out, static_cast<std::uint32_t>(model.centroids.rows));
    put_u32(out, static_cast<std::uint32_t>(model.centroids.dim));
    for (const double v : model.centroids.values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    write_file_atomic(path, out);
}

KMeansModel read_kmeans_model(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    if (bytes.size() < 12 || !std::equal(std::begin(kKMeansMagic), std::end(kKMeansMagic), bytes.begin())) {
        throw FormatError("k-means sidecar: bad magic in " + path.string());
    }
    const std::uint32_t k = get_u32(bytes, 4), d = get_u32(bytes, 8);
    if (k == 0 || d == 0) throw CorruptionError("k-means sidecar: zero dimension");
    if (bytes.size() != 12 + 4 * std::uint64_t{k} * d) throw CorruptionError("k-means sidecar: length mismatch");
    KMeansModel model;
    model.k = k;
    model.centroids = PointMatrix(k, d);
    for (std::size_t i = 0; i < model.centroids.values.size(); ++i) {
        model.centroids.values[i] = static_cast<double>(std::bit_cast<float>(get_u32(bytes, 12 + 4 * i)));
    }
    return model;
}

}  // namespace maskdistill
