#include <algorithm>
#include <random>

#include "doctest.h"
#include "maskdistill/errors.hpp"
#include "maskdistill/evaluation.hpp"
#include "oracles/brute_ap.hpp"
#include "oracles/brute_force.hpp"
#include "support/candidates.hpp"
#include "support/scenes.hpp"

using namespace maskdistill;
using maskdistill::testing::make_candidate;
using maskdistill::testing::rect_mask;

namespace {

Matrix to_matrix(const std::vector<std::vector<double>>& rows) {
    Matrix m(rows.size(), rows.front().size());
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) m(i, j) = rows[i][j];
    }
    return m;
}

std::vector<std::vector<double>> random_rows(std::mt19937_64& rng, std::size_t r, std::size_t c, int max_value) {
    std::vector<std::vector<double>> rows(r, std::vector<double>(c));
    for (auto& row : rows) {
        for (auto& v : row) v = static_cast<double>(rng() % static_cast<unsigned>(max_value + 1));
    }
    return rows;
}

SegmentationMap seg(const std::string& id, std::uint32_t h, std::uint32_t w, std::vector<std::uint8_t> labels) {
    SegmentationMap m;
    m.image_id = id;
    m.height = h;
    m.width = w;
    m.labels = std::move(labels);
    return m;
}

// Direct TP/FP/FN count for one class after relabelling through `assign`.
double direct_iou(const SegmentationMap& pred, const SegmentationMap& gt, const std::vector<int>& assign, int cls) {
    int tp = 0, fp = 0, fn = 0;
    for (std::size_t p = 0; p < pred.labels.size(); ++p) {
        const int a = assign[pred.labels[p]];
        const int mapped = a < 0 ? 0 : a;
        const bool in_pred = mapped == cls, in_gt = gt.labels[p] == cls;
        tp += in_pred && in_gt;
        fp += in_pred && !in_gt;
        fn += !in_pred && in_gt;
    }
    return static_cast<double>(tp) / (tp + fp + fn);
}

}  // namespace

TEST_CASE("hungarian examples") {
    const auto id = hungarian_match(to_matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
    CHECK(id.row_to_col == std::vector<int>{0, 1, 2});
    CHECK(id.profit == 3.0);

    const auto swap = hungarian_match(to_matrix({{1, 2}, {2, 1}}));
    CHECK(swap.row_to_col == std::vector<int>{1, 0});
    CHECK(swap.col_to_row == std::vector<int>{1, 0});
    CHECK(swap.profit == 4.0);

    CHECK_THROWS_AS(hungarian_match(Matrix{}), ParameterError);
}

TEST_CASE("hungarian equals exhaustive search on 200 random square matrices up to 7x7") {
    std::mt19937_64 rng(71);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t n = 1 + trial % 7;
        const auto rows = random_rows(rng, n, n, trial % 2 == 0 ? 3 : 1000);
        const auto got = hungarian_match(to_matrix(rows));
        const auto best = oracle::brute_force_assignment(rows);
        REQUIRE(got.profit == best.profit);
        // Smallest optimum in lexicographic order, ties included.
        for (std::size_t i = 0; i < n; ++i) REQUIRE(got.row_to_col[i] == best.perm[i]);
    }
}

TEST_CASE("hungarian on rectangular matrices pads with zero-profit dummies") {
    std::mt19937_64 rng(72);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t r = 1 + rng() % 6, c = 1 + rng() % 6;
        const auto rows = random_rows(rng, r, c, 9);
        const auto got = hungarian_match(to_matrix(rows));
        const auto best = oracle::brute_force_assignment(rows);
        REQUIRE(got.profit == best.profit);
        for (std::size_t i = 0; i < r; ++i) {
            const int expected = best.perm[i] < static_cast<int>(c) ? best.perm[i] : -1;
            REQUIRE(got.row_to_col[i] == expected);
        }
    }
}

TEST_CASE("hungarian with real-valued profits") {
    std::mt19937_64 rng(73);
    std::uniform_real_distribution<double> u(-5, 5);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + trial % 6;
        std::vector<std::vector<double>> rows(n, std::vector<double>(n));
        for (auto& row : rows) {
            for (auto& v : row) v = u(rng);
        }
        CHECK(hungarian_match(to_matrix(rows)).profit == doctest::Approx(oracle::brute_force_assignment(rows).profit).epsilon(1e-12));
    }
}

TEST_CASE("assignment is unchanged by positive scaling and per-row constants") {
    std::mt19937_64 rng(74);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t r = 1 + rng() % 6, c = r + rng() % 3;  // r <= c
        auto rows = random_rows(rng, r, c, 6);
        const auto base = hungarian_match(to_matrix(rows)).row_to_col;
        auto scaled = rows;
        for (auto& row : scaled) {
            for (auto& v : row) v *= 3.0;
        }
        CHECK(hungarian_match(to_matrix(scaled)).row_to_col == base);
        auto shifted = rows;
        for (auto& row : shifted) {
            const double k = static_cast<double>(rng() % 11) - 5.0;
            for (auto& v : row) v += k;
        }
        CHECK(hungarian_match(to_matrix(shifted)).row_to_col == base);
    }
}

TEST_CASE("mIoU fixtures") {
    SUBCASE("2x2: gt class 1 left column, pred class 1 top row") {
        const auto gt = seg("a", 2, 2, {1, 0, 1, 0});
        const auto pred = seg("a", 2, 2, {1, 1, 0, 0});
        const auto r = miou({pred}, {gt}, {0, 1});
        REQUIRE(r.per_class_iou[1].has_value());
        CHECK(*r.per_class_iou[1] == 1.0 / 3.0);
        CHECK(*r.per_class_iou[0] == 1.0 / 3.0);
        CHECK(direct_iou(pred, gt, {0, 1}, 1) == 1.0 / 3.0);
    }
    SUBCASE("4x4 three classes") {
        const auto gt = seg("b", 4, 4, {1, 1, 2, 2, 1, 1, 2, 2, 1, 1, 0, 0, 1, 1, 0, 0});
        const auto pred = seg("b", 4, 4, {1, 1, 1, 2, 1, 1, 2, 2, 1, 0, 0, 0, 0, 0, 0, 0});
        const std::vector<int> identity{0, 1, 2};
        const auto r = miou({pred}, {gt}, identity);
        CHECK(*r.per_class_iou[0] == 4.0 / 7.0);
        CHECK(*r.per_class_iou[1] == 5.0 / 9.0);
        CHECK(*r.per_class_iou[2] == 3.0 / 4.0);
        for (int c = 0; c < 3; ++c) CHECK(*r.per_class_iou[c] == direct_iou(pred, gt, identity, c));
        CHECK(r.miou == (4.0 / 7.0 + 5.0 / 9.0 + 3.0 / 4.0) / 3.0);
        const auto matched = evaluate_semseg({pred}, {gt});
        CHECK(matched.assignment == identity);
        CHECK(matched.miou == r.miou);
    }
    SUBCASE("pred equals gt") {
        const auto gt = seg("c", 3, 3, {0, 1, 1, 2, 2, 0, 3, 3, 3});
        const auto r = evaluate_semseg({gt}, {gt});
        CHECK(r.miou == 1.0);
        for (const auto& v : r.per_class_iou) CHECK(*v == 1.0);
    }
    SUBCASE("disjoint class scores zero") {
        const auto gt = seg("d", 1, 4, {1, 1, 0, 0});
        const auto pred = seg("d", 1, 4, {0, 0, 1, 1});
        CHECK(*miou({pred}, {gt}, {0, 1}).per_class_iou[1] == 0.0);
    }
}

TEST_CASE("mIoU bookkeeping: ignore label, absent classes, unmatched clusters") {
    const auto gt = seg("a", 1, 6, {0, 1, 1, 255, 3, 3});
    const auto pred = seg("a", 1, 6, {0, 1, 1, 1, 2, 2});
    SemsegOptions opts;
    opts.n_gt = 4;
    const auto r = evaluate_semseg({pred}, {gt}, opts);
    CHECK(r.pixel_count == 5);
    CHECK(r.assignment == std::vector<int>{0, 1, 3});
    CHECK_FALSE(r.per_class_iou[2].has_value());
    CHECK(r.undefined_classes == std::vector<std::size_t>{2});
    CHECK(r.unmatched_gt_classes == std::vector<std::size_t>{2});
    CHECK(r.miou == 1.0);

    // Overclustering: the extra cluster is unmatched and scored as background.
    const auto gt2 = seg("b", 1, 4, {0, 0, 1, 1});
    const auto pred2 = seg("b", 1, 4, {0, 2, 1, 1});
    const auto r2 = evaluate_semseg({pred2}, {gt2});
    CHECK(r2.unmatched_pred_clusters == std::vector<std::size_t>{2});
    CHECK(r2.miou == 1.0);

    CHECK_THROWS_AS(evaluate_semseg({seg("x", 1, 2, {0, 1})}, {seg("y", 1, 2, {0, 1})}), ValidationError);
    CHECK_THROWS_AS(evaluate_semseg({seg("x", 1, 2, {0, 1})}, {seg("x", 2, 1, {0, 1})}), ValidationError);
}

TEST_CASE("mIoU is invariant to permuting prediction labels") {
    std::mt19937_64 rng(75);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<SegmentationMap> gt, pred, permuted;
        std::vector<std::uint8_t> perm{0, 1, 2, 3, 4};
        std::shuffle(perm.begin(), perm.end(), rng);
        for (int i = 0; i < 3; ++i) {
            std::vector<std::uint8_t> g(20), p(20), q(20);
            for (std::size_t k = 0; k < 20; ++k) {
                g[k] = static_cast<std::uint8_t>(rng() % 4);
                p[k] = rng() % 3 == 0 ? static_cast<std::uint8_t>(rng() % 5) : g[k];
                q[k] = perm[p[k]];
            }
            gt.push_back(seg("m" + std::to_string(i), 4, 5, g));
            pred.push_back(seg("m" + std::to_string(i), 4, 5, p));
            permuted.push_back(seg("m" + std::to_string(i), 4, 5, q));
        }
        SemsegOptions opts;
        opts.n_pred = 5;
        CHECK(evaluate_semseg(pred, gt, opts).miou == doctest::Approx(evaluate_semseg(permuted, gt, opts).miou).epsilon(1e-15));
    }
}

TEST_CASE("mask AP fixtures") {
    const auto gt_mask = rect_mask(4, 4, 0, 0, 2, 2);
    const auto gt = make_candidate("img", gt_mask, 1.0, 1);

    SUBCASE("perfect match") {
        const auto r = mask_ap({make_candidate("img", gt_mask, 0.7, 1)}, {gt}, ApProtocol::multi, ClassMode::agnostic);
        CHECK(r.valid);
        CHECK(r.ap == 1.0);
        CHECK(r.ap50 == 1.0);
        CHECK(r.ap75 == 1.0);
    }
    SUBCASE("IoU exactly 0.6") {
        // gt: 5 pixels, pred: 3 of them.
        BinaryMask g(4, 4), p(4, 4);
        for (const auto& [y, x] : std::vector<std::pair<int, int>>{{0, 0}, {0, 1}, {0, 2}, {1, 0}, {1, 1}}) g.set(y, x);
        for (const auto& [y, x] : std::vector<std::pair<int, int>>{{0, 0}, {0, 1}, {0, 2}}) p.set(y, x);
        const auto o = mask_overlap(p, g);
        REQUIRE(o.intersection * 5 == o.union_ * 3);
        const auto r = mask_ap({make_candidate("img", p, 0.9, 1)}, {make_candidate("img", g, 1.0, 1)}, ApProtocol::multi,
                               ClassMode::agnostic);
        CHECK(r.ap50 == 1.0);
        CHECK(r.ap75 == 0.0);
        // Thresholds 0.50, 0.55, 0.60 match; seven do not.
        CHECK(r.ap == 0.3);
    }
    SUBCASE("duplicate detection") {
        const auto r = mask_ap({make_candidate("img", gt_mask, 0.9, 1), make_candidate("img", gt_mask, 0.8, 1)}, {gt},
                               ApProtocol::multi, ClassMode::agnostic);
        CHECK(r.ap50 == 1.0);
        CHECK(r.ap == 1.0);
        // Reverse order: a false positive first drags precision at full recall to 1/2.
        const auto miss = make_candidate("img", rect_mask(4, 4, 3, 3, 4, 4), 0.95, 1);
        const auto r2 = mask_ap({miss, make_candidate("img", gt_mask, 0.8, 1)}, {gt}, ApProtocol::multi, ClassMode::agnostic);
        CHECK(r2.ap50 == 0.5);
    }
    SUBCASE("no ground truth") {
        CHECK_FALSE(mask_ap({make_candidate("img", gt_mask, 0.9, 1)}, {}, ApProtocol::multi, ClassMode::agnostic).valid);
    }
    SUBCASE("semantic mode needs labels") {
        CHECK_THROWS_AS(mask_ap({make_candidate("img", gt_mask, 0.9, std::nullopt)}, {gt}, ApProtocol::multi,
                                ClassMode::semantic, {{1, 1}}),
                        ValidationError);
    }
}

TEST_CASE("AP50 matches the brute-force PR evaluator on 50 random tiny scenes") {
    std::mt19937_64 rng(76);
    for (int trial = 0; trial < 50; ++trial) {
        const auto scene = maskdistill::testing::random_scene(rng, 1);
        const auto r = mask_ap(scene.preds, scene.gts, ApProtocol::multi, ClassMode::agnostic);
        REQUIRE(r.valid);
        CHECK(std::abs(r.ap50 - oracle::brute_force_ap(scene.raw, 0.5)) <= 1e-9);
        CHECK(std::abs(r.ap75 - oracle::brute_force_ap(scene.raw, 0.75)) <= 1e-9);
    }
    for (int trial = 0; trial < 30; ++trial) {
        const auto scene = maskdistill::testing::random_scene(rng, 4);
        const auto r = mask_ap(scene.preds, scene.gts, ApProtocol::multi, ClassMode::agnostic);
        CHECK(std::abs(r.ap50 - oracle::brute_force_ap(scene.raw, 0.5)) <= 1e-9);
    }
}

TEST_CASE("mask AP ignores the order of manifest lines with distinct scores") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        auto scene = maskdistill::testing::random_scene(rng, 3);
        for (std::size_t i = 0; i < scene.preds.size(); ++i) scene.preds[i].score = 0.01 * static_cast<double>(i + 1);
        const auto base = mask_ap(scene.preds, scene.gts, ApProtocol::multi, ClassMode::agnostic);
        std::shuffle(scene.preds.begin(), scene.preds.end(), rng);
        std::shuffle(scene.gts.begin(), scene.gts.end(), rng);
        const auto shuffled = mask_ap(scene.preds, scene.gts, ApProtocol::multi, ClassMode::agnostic);
        CHECK(shuffled.per_threshold == base.per_threshold);
    }
}

TEST_CASE("single-object protocol keeps the top prediction and its best-box ground truth") {
    const auto g1 = make_candidate("img", rect_mask(8, 8, 0, 0, 3, 3), 1.0, 1);
    const auto g2 = make_candidate("img", rect_mask(8, 8, 4, 4, 8, 8), 1.0, 2);
    const auto p_top = make_candidate("img", rect_mask(8, 8, 4, 4, 8, 8), 0.9, 5);
    const auto p_low = make_candidate("img", rect_mask(8, 8, 0, 0, 3, 3), 0.4, 6);
    std::vector<ObjectCandidate> preds{p_low, p_top}, gts{g1, g2};
    reduce_to_single_object(preds, gts);
    REQUIRE(preds.size() == 1);
    REQUIRE(gts.size() == 1);
    CHECK(preds[0].label == 5);
    CHECK(gts[0].label == 2);

    const auto single = mask_ap({p_low, p_top}, {g1, g2}, ApProtocol::single, ClassMode::agnostic);
    CHECK(single.ap == 1.0);
    const auto multi = mask_ap({p_low, p_top}, {g1, g2}, ApProtocol::multi, ClassMode::agnostic);
    CHECK(multi.ap == 1.0);

    // An image with ground truth but no prediction keeps one ground truth as a miss.
    const auto g3 = make_candidate("other", rect_mask(8, 8, 0, 0, 2, 2), 1.0, 1);
    const auto with_miss = mask_ap({p_top}, {g1, g2, g3}, ApProtocol::single, ClassMode::agnostic);
    CHECK(with_miss.ap50 == doctest::Approx(51.0 / 101.0));
}

TEST_CASE("semantic AP uses the cluster-to-class matching") {
    const auto a = rect_mask(8, 8, 0, 0, 4, 4), b = rect_mask(8, 8, 4, 4, 8, 8);
    const std::vector<ObjectCandidate> gts{make_candidate("i", a, 1.0, 7), make_candidate("i", b, 1.0, 9)};
    const std::vector<ObjectCandidate> preds{make_candidate("i", a, 0.9, 2), make_candidate("i", b, 0.8, 1)};
    const auto mapping = match_instance_clusters(preds, gts);
    CHECK(mapping == std::map<int, int>{{1, 9}, {2, 7}});
    const auto r = mask_ap(preds, gts, ApProtocol::multi, ClassMode::semantic, mapping);
    CHECK(r.ap == 1.0);
    CHECK(r.per_class_ap.size() == 2);
    // Swapped mapping: every prediction lands in the wrong class.
    const auto wrong = mask_ap(preds, gts, ApProtocol::multi, ClassMode::semantic, {{1, 7}, {2, 9}});
    CHECK(wrong.ap == 0.0);
    // Unmapped clusters are dropped.
    const auto partial = mask_ap(preds, gts, ApProtocol::multi, ClassMode::semantic, {{2, 7}});
    CHECK(partial.per_class_ap50.at(7) == 1.0);
    CHECK(partial.per_class_ap50.at(9) == 0.0);
}
