#include <cmath>
#include <random>

#include "doctest.h"
#include "maskdistill/affinity_graph.hpp"
#include "oracles/naive_affinity.hpp"
#include "support/random_pack.hpp"

using namespace maskdistill;

namespace {

FeaturePack pack_from(std::uint32_t heads, std::uint32_t head_dim, std::uint32_t grid_h, std::uint32_t grid_w,
                      std::vector<float> q, std::vector<float> k) {
    FeaturePack p;
    p.image_id = "t";
    p.patch_size = 1;
    p.grid_h = grid_h;
    p.grid_w = grid_w;
    p.img_h = grid_h;
    p.img_w = grid_w;
    p.heads = heads;
    p.head_dim = head_dim;
    p.q_cls = std::move(q);
    p.k_patch = std::move(k);
    return p;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-12, std::max(std::abs(a), std::abs(b))); }

}  // namespace

TEST_CASE("cls affinity examples") {
    SUBCASE("zero query") {
        const auto p = pack_from(1, 2, 1, 2, {0, 0}, {1, 2, 3, 4});
        CHECK(cls_affinity(p) == std::vector<double>{0.0, 0.0});
    }
    SUBCASE("identity rows") {
        const auto p = pack_from(1, 2, 1, 2, {1, 0}, {1, 0, 0, 1});
        CHECK(cls_affinity(p) == std::vector<double>{1.0, 0.0});
    }
    SUBCASE("two heads average") {
        // head 0 dots (2, 4), head 1 dots (0, 2) -> mean (1, 3)
        const auto p = pack_from(2, 1, 1, 2, {2, 1}, {1, 2, 0, 2});
        const auto naive = oracle::naive_cls_affinity(p);
        CHECK(naive == std::vector<double>{1.0, 3.0});
        CHECK(cls_affinity(p) == naive);
    }
}

TEST_CASE("patch affinity examples") {
    SUBCASE("identity keys") {
        const auto p = pack_from(1, 2, 1, 2, {1, 1}, {1, 0, 0, 1});
        const auto a = patch_affinity(p);
        CHECK(a(0, 0) == 1.0);
        CHECK(a(0, 1) == 0.0);
        CHECK(a(1, 0) == 0.0);
        CHECK(a(1, 1) == 1.0);
    }
    SUBCASE("three rows") {
        const auto p = pack_from(1, 2, 1, 3, {1, 1}, {1, 0, 1, 1, 0, 2});
        const std::vector<std::vector<double>> expected{{1, 1, 0}, {1, 2, 2}, {0, 2, 4}};
        CHECK(oracle::naive_patch_affinity(p) == expected);
        const auto a = patch_affinity(p);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) CHECK(a(i, j) == expected[i][j]);
        }
    }
}

TEST_CASE("affinities match the naive reference on random packs") {
    std::mt19937_64 rng(101);
    for (int trial = 0; trial < 100; ++trial) {
        const auto p = maskdistill::testing::random_pack(rng, 64, 8, trial % 2 == 0);
        const auto g = build_affinity_graph(p);
        const auto ref_cls = oracle::naive_cls_affinity(p);
        const auto ref_patch = oracle::naive_patch_affinity(p);
        for (std::size_t j = 0; j < ref_cls.size(); ++j) REQUIRE(rel_err(g.a_cls[j], ref_cls[j]) < 1e-5);
        for (std::size_t i = 0; i < ref_cls.size(); ++i) {
            CHECK(g.a_patch(i, i) >= 0.0);
            for (std::size_t j = 0; j < ref_cls.size(); ++j) {
                REQUIRE(rel_err(g.a_patch(i, j), ref_patch[i][j]) < 1e-5);
                REQUIRE(g.a_patch(i, j) == g.a_patch(j, i));
            }
        }
    }
}

TEST_CASE("duplicating every head leaves the affinities unchanged") {
    std::mt19937_64 rng(55);
    for (int trial = 0; trial < 30; ++trial) {
        const auto p = maskdistill::testing::random_pack(rng, 36, 4);
        FeaturePack twice = p;
        twice.heads *= 2;
        twice.q_cls.insert(twice.q_cls.end(), p.q_cls.begin(), p.q_cls.end());
        // k_patch is head-major, so appending repeats each head block.
        twice.k_patch.insert(twice.k_patch.end(), p.k_patch.begin(), p.k_patch.end());
        const auto a = build_affinity_graph(p), b = build_affinity_graph(twice);
        for (std::size_t j = 0; j < a.a_cls.size(); ++j) CHECK(rel_err(a.a_cls[j], b.a_cls[j]) < 1e-12);
        for (std::size_t i = 0; i < a.a_patch.values.size(); ++i) {
            CHECK(rel_err(a.a_patch.values[i], b.a_patch.values[i]) < 1e-12);
        }
    }
}

TEST_CASE("positive scaling scales affinities by c squared and keeps signs") {
    std::mt19937_64 rng(77);
    const auto p = maskdistill::testing::random_pack(rng, 36, 4);
    const auto scaled = maskdistill::testing::scaled_pack(p, 4.0f);  // power of two: exact
    const auto a = patch_affinity(p), b = patch_affinity(scaled);
    for (std::size_t i = 0; i < a.values.size(); ++i) {
        CHECK(b.values[i] == 16.0 * a.values[i]);
        CHECK((a.values[i] > 0) == (b.values[i] > 0));
    }
}
