#include "maskdistill/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "maskdistill/errors.hpp"

namespace maskdistill {

// ---------------------------------------------------------------------------
// Hungarian matching

namespace {

// Lexicographically smallest perfect matching inside the equality subgraph of
// an optimal dual. Any perfect matching using only tight edges is optimal, so
// this picks the smallest optimum without re-solving.
void lexicographic_refine(const std::vector<std::vector<bool>>& tight, std::vector<int>& col_of,
                          std::vector<int>& row_of) {
    const std::size_t n = col_of.size();
    std::vector<bool> fixed_col(n, false);
    std::vector<int> parent_row(n), reached_by(n);
    std::vector<bool> seen_col(n);
    for (std::size_t i = 0; i < n; ++i) {
        const int target = col_of[i];
        for (int j = 0; j < target; ++j) {
            if (!tight[i][j] || fixed_col[j]) continue;
            const int r0 = row_of[j];
            // Alternating path from r0 (displaced from j) to the column i releases.
            std::fill(seen_col.begin(), seen_col.end(), false);
            std::vector<int> queue{r0};
            reached_by[r0] = j;
            parent_row[r0] = -1;
            int last_row = -1;
            for (std::size_t head = 0; head < queue.size() && last_row < 0; ++head) {
                const int r = queue[head];
                for (std::size_t c = 0; c < n; ++c) {
                    if (static_cast<int>(c) == j || fixed_col[c] || seen_col[c] || !tight[r][c]) continue;
                    seen_col[c] = true;
                    if (static_cast<int>(c) == target) {
                        last_row = r;
                        break;
                    }
                    const int next = row_of[c];
                    reached_by[next] = static_cast<int>(c);
                    parent_row[next] = r;
                    queue.push_back(next);
                }
            }
            if (last_row < 0) continue;
            int row = last_row, col = target;
            while (true) {
                const int released = reached_by[row];
                col_of[row] = col;
                row_of[col] = row;
                if (row == r0) break;
                col = released;
                row = parent_row[row];
            }
            col_of[i] = j;
            row_of[j] = static_cast<int>(i);
            break;
        }
        fixed_col[col_of[i]] = true;
    }
}

}  // namespace

Assignment hungarian_match(const Matrix& profit) {
    if (profit.rows == 0 || profit.cols == 0) throw ParameterError("hungarian_match: empty matrix");
    if (profit.values.size() != profit.rows * profit.cols) throw ValidationError("hungarian_match: shape mismatch");
    double scale = 1.0;
    for (const double v : profit.values) {
        if (!std::isfinite(v)) throw ValidationError("hungarian_match: non-finite profit");
        scale = std::max(scale, std::abs(v));
    }
    const std::size_t n = std::max(profit.rows, profit.cols);
    const auto cost = [&](std::size_t i, std::size_t j) {
        return (i < profit.rows && j < profit.cols) ? -profit(i, j) : 0.0;
    };

    // Shortest augmenting path with potentials, 1-based with a virtual column 0.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<bool> used(n + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    std::vector<int> col_of(n), row_of(n);
    for (std::size_t j = 1; j <= n; ++j) {
        row_of[j - 1] = static_cast<int>(p[j] - 1);
        col_of[p[j] - 1] = static_cast<int>(j - 1);
    }
    const double tolerance = 1e-9 * scale;
    std::vector<std::vector<bool>> tight(n, std::vector<bool>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) tight[i][j] = cost(i, j) - u[i + 1] - v[j + 1] <= tolerance;
    }
    lexicographic_refine(tight, col_of, row_of);

    Assignment out;
    out.row_to_col.assign(profit.rows, -1);
    out.col_to_row.assign(profit.cols, -1);
    for (std::size_t i = 0; i < profit.rows; ++i) {
        const auto j = static_cast<std::size_t>(col_of[i]);
        if (j < profit.cols) {
            out.row_to_col[i] = static_cast<int>(j);
            out.col_to_row[j] = static_cast<int>(i);
            out.profit += profit(i, j);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Semantic segmentation

namespace {

void check_aligned(const std::vector<SegmentationMap>& pred, const std::vector<SegmentationMap>& gt) {
    if (pred.size() != gt.size()) {
        throw ValidationError("prediction and ground truth cover different images (" + std::to_string(pred.size()) +
                              " vs " + std::to_string(gt.size()) + ")");
    }
}

}  // namespace

ConfusionMatrix build_confusion(const std::vector<SegmentationMap>& pred, const std::vector<SegmentationMap>& gt,
                                const SemsegOptions& options) {
    check_aligned(pred, gt);
    std::map<std::string, const SegmentationMap*> gt_by_id;
    for (const auto& m : gt) gt_by_id[m.image_id] = &m;

    std::size_t n_pred = options.n_pred, n_gt = options.n_gt;
    std::size_t seen_pred = 0, seen_gt = 0;
    for (const auto& m : pred) {
        for (const auto v : m.labels) seen_pred = std::max<std::size_t>(seen_pred, v + 1u);
    }
    for (const auto& m : gt) {
        for (const auto v : m.labels) {
            if (static_cast<int>(v) != options.ignore_label) seen_gt = std::max<std::size_t>(seen_gt, v + 1u);
        }
    }
    if (n_pred == 0) n_pred = std::max<std::size_t>(seen_pred, 1);
    if (n_gt == 0) n_gt = std::max<std::size_t>(seen_gt, 1);
    if (seen_pred > n_pred) throw ValidationError("prediction label exceeds the declared cluster count");
    if (seen_gt > n_gt) throw ValidationError("ground-truth label exceeds the declared class count");

    ConfusionMatrix cm;
    cm.n_pred = n_pred;
    cm.n_gt = n_gt;
    cm.counts.assign(n_pred * n_gt, 0);
    for (const auto& p : pred) {
        const auto it = gt_by_id.find(p.image_id);
        if (it == gt_by_id.end()) throw ValidationError("no ground truth for image '" + p.image_id + "'");
        const SegmentationMap& g = *it->second;
        if (g.height != p.height || g.width != p.width) {
            throw ValidationError("shape mismatch for image '" + p.image_id + "'");
        }
        for (std::size_t px = 0; px < p.labels.size(); ++px) {
            if (static_cast<int>(g.labels[px]) == options.ignore_label) continue;
            ++cm.counts[p.labels[px] * n_gt + g.labels[px]];
            ++cm.total;
        }
    }
    return cm;
}

SemsegReport miou(const ConfusionMatrix& confusion, const std::vector<int>& assignment) {
    if (assignment.size() != confusion.n_pred) {
        throw ValidationError("assignment covers " + std::to_string(assignment.size()) + " clusters, expected " +
                              std::to_string(confusion.n_pred));
    }
    const std::size_t n = confusion.n_gt;
    // mapped[a][g]: pixels predicted as class a (after relabelling) with truth g.
    std::vector<std::uint64_t> mapped(n * n, 0);
    std::vector<bool> gt_matched(n, false);
    SemsegReport report;
    report.assignment = assignment;
    report.pixel_count = confusion.total;
    for (std::size_t p = 0; p < confusion.n_pred; ++p) {
        const int a = assignment[p];
        if (a >= static_cast<int>(n)) throw ValidationError("assignment targets a class out of range");
        if (a < 0) report.unmatched_pred_clusters.push_back(p);
        else gt_matched[static_cast<std::size_t>(a)] = true;
        const std::size_t row = a < 0 ? 0 : static_cast<std::size_t>(a);
        for (std::size_t g = 0; g < n; ++g) mapped[row * n + g] += confusion(p, g);
    }
    for (std::size_t g = 0; g < n; ++g) {
        if (!gt_matched[g]) report.unmatched_gt_classes.push_back(g);
    }

    report.per_class_iou.resize(n);
    double sum = 0.0;
    std::size_t defined = 0;
    for (std::size_t c = 0; c < n; ++c) {
        const std::uint64_t tp = mapped[c * n + c];
        std::uint64_t fp = 0, fn = 0;
        for (std::size_t o = 0; o < n; ++o) {
            if (o == c) continue;
            fp += mapped[c * n + o];
            fn += mapped[o * n + c];
        }
        const std::uint64_t denom = tp + fp + fn;
        if (denom == 0) {
            report.undefined_classes.push_back(c);
            continue;
        }
        const double iou = static_cast<double>(tp) / static_cast<double>(denom);
        report.per_class_iou[c] = iou;
        sum += iou;
        ++defined;
    }
    report.miou = defined > 0 ? sum / static_cast<double>(defined) : 0.0;
    return report;
}

SemsegReport miou(const std::vector<SegmentationMap>& pred, const std::vector<SegmentationMap>& gt,
                  const std::vector<int>& assignment, const SemsegOptions& options) {
    SemsegOptions opts = options;
    if (opts.n_pred == 0) opts.n_pred = assignment.size();
    return miou(build_confusion(pred, gt, opts), assignment);
}

SemsegReport evaluate_semseg(const std::vector<SegmentationMap>& pred, const std::vector<SegmentationMap>& gt,
                             const SemsegOptions& options) {
    const ConfusionMatrix cm = build_confusion(pred, gt, options);
    Matrix profit(cm.n_pred, cm.n_gt);
    for (std::size_t i = 0; i < cm.counts.size(); ++i) profit.values[i] = static_cast<double>(cm.counts[i]);
    return miou(cm, hungarian_match(profit).row_to_col);
}

// ---------------------------------------------------------------------------
// Mask AP

namespace {

struct Ratio {
    std::uint64_t num = 0;
    std::uint64_t den = 1;
};

bool less_than(const Ratio& a, const Ratio& b) { return a.num * b.den < b.num * a.den; }

struct Instance {
    BinaryMask mask;
    double score = 0.0;
    int category = 0;
};

constexpr int kThresholdCount = 10;

int threshold_percent(int t) { return 50 + 5 * t; }

struct ScoredMatch {
    double score;
    bool true_positive;
};

// Per (category, threshold): detections in evaluation order and GT count.
struct CategoryAccumulator {
    std::vector<std::vector<ScoredMatch>> detections = std::vector<std::vector<ScoredMatch>>(kThresholdCount);
    std::uint64_t gt_count = 0;
};

std::map<std::string, std::vector<ObjectCandidate>> by_image(const std::vector<ObjectCandidate>& records) {
    std::map<std::string, std::vector<ObjectCandidate>> out;
    for (const auto& r : records) out[r.image_id].push_back(r);
    return out;
}

double average_precision(std::vector<ScoredMatch> dets, std::uint64_t gt_count) {
    std::stable_sort(dets.begin(), dets.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
    const std::size_t nd = dets.size();
    std::vector<std::uint64_t> tp(nd);
    std::vector<double> precision(nd);
    std::uint64_t tps = 0, fps = 0;
    for (std::size_t i = 0; i < nd; ++i) {
        (dets[i].true_positive ? tps : fps) += 1;
        tp[i] = tps;
        precision[i] = static_cast<double>(tps) / static_cast<double>(tps + fps);
    }
    for (std::size_t i = nd; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    std::size_t idx = 0;
    for (std::uint64_t r = 0; r <= 100; ++r) {
        // First rank whose recall tp / gt_count reaches r / 100, compared exactly.
        while (idx < nd && tp[idx] * 100 < r * gt_count) ++idx;
        if (idx < nd) sum += precision[idx];
    }
    return sum / 101.0;
}

}  // namespace

void reduce_to_single_object(std::vector<ObjectCandidate>& pred, std::vector<ObjectCandidate>& gt) {
    const auto pred_by_image = by_image(pred);
    const auto gt_by_image = by_image(gt);
    std::vector<ObjectCandidate> top_pred, chosen_gt;
    std::set<std::string> ids;
    for (const auto& [id, _] : pred_by_image) ids.insert(id);
    for (const auto& [id, _] : gt_by_image) ids.insert(id);
    for (const auto& id : ids) {
        const ObjectCandidate* best = nullptr;
        if (auto it = pred_by_image.find(id); it != pred_by_image.end()) {
            for (const auto& r : it->second) {
                if (best == nullptr || r.score > best->score) best = &r;
            }
            top_pred.push_back(*best);
        }
        if (auto it = gt_by_image.find(id); it != gt_by_image.end()) {
            const ObjectCandidate* pick = &it->second.front();
            if (best != nullptr) {
                double best_iou = -1.0;
                for (const auto& g : it->second) {
                    const double iou = bbox_iou(best->bbox, g.bbox);
                    if (iou > best_iou) {
                        best_iou = iou;
                        pick = &g;
                    }
                }
            }
            chosen_gt.push_back(*pick);
        }
    }
    pred = std::move(top_pred);
    gt = std::move(chosen_gt);
}

ApResult mask_ap(const std::vector<ObjectCandidate>& pred_in, const std::vector<ObjectCandidate>& gt_in,
                 ApProtocol protocol, ClassMode class_mode, const std::map<int, int>& cluster_to_class,
                 const ApOptions& options) {
    std::vector<ObjectCandidate> pred = pred_in, gt = gt_in;
    if (class_mode == ClassMode::semantic) {
        for (const auto& r : pred) {
            if (!r.label) throw ValidationError("semantic mask AP needs labeled predictions ('" + r.image_id + "')");
        }
        for (const auto& r : gt) {
            if (!r.label) throw ValidationError("semantic mask AP needs labeled ground truth ('" + r.image_id + "')");
        }
    }
    if (protocol == ApProtocol::single) reduce_to_single_object(pred, gt);

    const auto category_of_pred = [&](const ObjectCandidate& r) -> std::optional<int> {
        if (class_mode == ClassMode::agnostic) return 0;
        const auto it = cluster_to_class.find(*r.label);
        if (it == cluster_to_class.end()) return std::nullopt;
        return it->second;
    };
    const auto category_of_gt = [&](const ObjectCandidate& r) { return class_mode == ClassMode::agnostic ? 0 : *r.label; };

    const auto pred_by_image = by_image(pred);
    const auto gt_by_image = by_image(gt);
    std::set<std::string> ids;
    for (const auto& [id, _] : pred_by_image) ids.insert(id);
    for (const auto& [id, _] : gt_by_image) ids.insert(id);

    std::map<int, CategoryAccumulator> acc;
    for (const auto& id : ids) {
        std::map<int, std::vector<Instance>> dets, gts;
        if (auto it = pred_by_image.find(id); it != pred_by_image.end()) {
            for (const auto& r : it->second) {
                if (const auto cat = category_of_pred(r)) dets[*cat].push_back({decode_rle(r.rle), r.score, *cat});
            }
        }
        if (auto it = gt_by_image.find(id); it != gt_by_image.end()) {
            for (const auto& r : it->second) {
                const int cat = category_of_gt(r);
                gts[cat].push_back({decode_rle(r.rle), r.score, cat});
            }
        }
        std::set<int> categories;
        for (const auto& [c, _] : dets) categories.insert(c);
        for (const auto& [c, _] : gts) categories.insert(c);
        for (const int cat : categories) {
            auto& d = dets[cat];
            const auto& g = gts[cat];
            std::stable_sort(d.begin(), d.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
            if (d.size() > options.max_dets) d.resize(options.max_dets);

            std::vector<std::vector<Ratio>> ious(d.size(), std::vector<Ratio>(g.size()));
            for (std::size_t di = 0; di < d.size(); ++di) {
                for (std::size_t gi = 0; gi < g.size(); ++gi) {
                    const Overlap o = mask_overlap(d[di].mask, g[gi].mask);
                    ious[di][gi] = o.union_ > 0 ? Ratio{o.intersection, o.union_} : Ratio{0, 1};
                }
            }
            auto& bucket = acc[cat];
            bucket.gt_count += g.size();
            for (int t = 0; t < kThresholdCount; ++t) {
                std::vector<bool> gt_taken(g.size(), false);
                for (std::size_t di = 0; di < d.size(); ++di) {
                    Ratio best{static_cast<std::uint64_t>(threshold_percent(t)), 100};
                    int match = -1;
                    for (std::size_t gi = 0; gi < g.size(); ++gi) {
                        if (gt_taken[gi] || less_than(ious[di][gi], best)) continue;
                        best = ious[di][gi];
                        match = static_cast<int>(gi);
                    }
                    if (match >= 0) gt_taken[static_cast<std::size_t>(match)] = true;
                    bucket.detections[t].push_back({d[di].score, match >= 0});
                }
            }
        }
    }

    ApResult result;
    result.per_threshold.assign(kThresholdCount, 0.0);
    std::size_t valid_categories = 0;
    for (const auto& [cat, bucket] : acc) {
        if (bucket.gt_count == 0) continue;
        ++valid_categories;
        double cat_sum = 0.0;
        for (int t = 0; t < kThresholdCount; ++t) {
            const double ap = average_precision(bucket.detections[t], bucket.gt_count);
            result.per_threshold[t] += ap;
            cat_sum += ap;
            if (class_mode == ClassMode::semantic && t == 0) result.per_class_ap50[cat] = ap;
        }
        if (class_mode == ClassMode::semantic) result.per_class_ap[cat] = cat_sum / kThresholdCount;
    }
    if (valid_categories == 0) return result;
    result.valid = true;
    for (double& v : result.per_threshold) v /= static_cast<double>(valid_categories);
    result.ap = std::accumulate(result.per_threshold.begin(), result.per_threshold.end(), 0.0) / kThresholdCount;
    result.ap50 = result.per_threshold[0];
    result.ap75 = result.per_threshold[5];
    return result;
}

std::map<int, int> match_instance_clusters(const std::vector<ObjectCandidate>& pred,
                                           const std::vector<ObjectCandidate>& gt) {
    std::set<int> clusters, classes;
    for (const auto& r : pred) {
        if (!r.label) throw ValidationError("cluster matching needs labeled predictions ('" + r.image_id + "')");
        clusters.insert(*r.label);
    }
    for (const auto& r : gt) {
        if (!r.label) throw ValidationError("cluster matching needs labeled ground truth ('" + r.image_id + "')");
        classes.insert(*r.label);
    }
    if (clusters.empty() || classes.empty()) return {};
    const std::vector<int> cluster_list(clusters.begin(), clusters.end()), class_list(classes.begin(), classes.end());
    const auto index_of = [](const std::vector<int>& list, int v) {
        return static_cast<std::size_t>(std::lower_bound(list.begin(), list.end(), v) - list.begin());
    };

    Matrix profit(cluster_list.size(), class_list.size());
    const auto gt_by_image = by_image(gt);
    for (const auto& [id, preds] : by_image(pred)) {
        const auto it = gt_by_image.find(id);
        if (it == gt_by_image.end()) continue;
        std::vector<BinaryMask> gt_masks;
        for (const auto& g : it->second) gt_masks.push_back(decode_rle(g.rle));
        for (const auto& p : preds) {
            const BinaryMask pm = decode_rle(p.rle);
            for (std::size_t gi = 0; gi < gt_masks.size(); ++gi) {
                if (gt_masks[gi].height != pm.height || gt_masks[gi].width != pm.width) {
                    throw ValidationError("mask shapes differ for image '" + id + "'");
                }
                profit(index_of(cluster_list, *p.label), index_of(class_list, *it->second[gi].label)) +=
                    static_cast<double>(mask_overlap(pm, gt_masks[gi]).intersection);
            }
        }
    }
    const Assignment a = hungarian_match(profit);
    std::map<int, int> out;
    for (std::size_t i = 0; i < cluster_list.size(); ++i) {
        if (a.row_to_col[i] >= 0) out[cluster_list[i]] = class_list[static_cast<std::size_t>(a.row_to_col[i])];
    }
    return out;
}

}  // namespace maskdistill
