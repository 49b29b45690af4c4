#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "maskdistill/feature_store.hpp"

namespace maskdistill {

/// Row-major point set [rows x dim].
struct PointMatrix {
    std::size_t rows = 0;
    std::size_t dim = 0;
    std::vector<double> values;

    PointMatrix() = default;
    PointMatrix(std::size_t r, std::size_t d) : rows(r), dim(d), values(r * d, 0.0) {}

    std::span<const double> row(std::size_t i) const { return std::span<const double>(values).subspan(i * dim, dim); }
    std::span<double> row(std::size_t i) { return std::span<double>(values).subspan(i * dim, dim); }
};

struct KMeansModel {
    std::size_t k = 0;
    PointMatrix centroids;
    double inertia = 0.0;
    std::uint64_t seed = 0;
    std::size_t iterations_run = 0;
    /// Inertia after every assignment step of the winning restart.
    std::vector<double> inertia_history;
};

struct KMeansOptions {
    std::size_t k = 1;
    std::uint64_t seed = 0;
    std::size_t max_iter = 300;
    std::size_t restarts = 10;
};

/// Lloyd iterations from k-means++ seeds; keeps the restart with the lowest
/// inertia. Empty clusters are re-seeded with the point farthest from its
/// current centroid.
KMeansModel kmeans_fit(const PointMatrix& points, const KMeansOptions& options);

/// Nearest centroid by squared Euclidean distance, ties to the lower index.
std::vector<std::size_t> kmeans_assign(const KMeansModel& model, const PointMatrix& points);

/// Scales every row to unit L2 norm; zero rows are left as they are.
void l2_normalize_rows(PointMatrix& points);

/// Maps a manifest record to its masked-image embedding.
using EmbeddingLookup = std::function<std::vector<float>(const ObjectCandidate& record, std::size_t ordinal)>;

/// Embeddings keyed by pack image id. A record resolves to "<image_id>#<n>"
/// (n = 0-based position among that image's records in manifest order) and,
/// failing that, to "<image_id>".
class EmbeddingTable {
public:
    void insert(std::string key, std::vector<float> embedding);
    /// Reads the cls_embed of every pack in `dir`; packs without one are skipped.
    static EmbeddingTable from_pack_dir(const std::filesystem::path& dir);

    /// Throws LookupError naming the image id when nothing matches.
    const std::vector<float>& find(const ObjectCandidate& record, std::size_t ordinal) const;
    std::size_t size() const { return table_.size(); }

private:
    std::map<std::string, std::vector<float>> table_;
};

/// Gathers the embedding of every record, in manifest order.
PointMatrix gather_embeddings(const std::vector<ObjectCandidate>& manifest, const EmbeddingTable& embeddings);

/// label = nearest centroid + 1 for every record; 0 stays reserved for background.
std::vector<ObjectCandidate> label_candidates(const std::vector<ObjectCandidate>& manifest,
                                              const EmbeddingTable& embeddings, const KMeansModel& model,
                                              bool l2_normalize = false);

inline constexpr char kKMeansMagic[4] = {'M', 'D', 'K', 'M'};

/// Sidecar layout: "MDKM", u32 k, u32 d, f32 centroids (little-endian).
void write_kmeans_model(const KMeansModel& model, const std::filesystem::path& path);
KMeansModel read_kmeans_model(const std::filesystem::path& path);

}  // namespace maskdistill
