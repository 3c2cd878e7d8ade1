#include <gtest/gtest.h>

#include "oracles.hpp"
#include "tilegrad/grouping.hpp"

using namespace tilegrad;

namespace {

LayerSpec conv(int k, int s, int out) {
    LayerSpec l;
    l.kind = LayerKind::convolution;
    l.kernel = k;
    l.stride = s;
    l.pad = k / 2;
    l.out_channels = out;
    l.activation = Activation::leaky;
    return l;
}

LayerSpec pool(int k) {
    LayerSpec l;
    l.kind = LayerKind::maxpool;
    l.kernel = k;
    l.stride = k;
    return l;
}

ModelSpec stack(MapDims input, std::vector<LayerSpec> layers) {
    ModelSpec m;
    m.input = input;
    m.layers = std::move(layers);
    return m;
}

} // namespace

TEST(MacCount, DirectSubstitution) {
    EXPECT_EQ(mac_count(conv(3, 1, 16), 12, 12, 3, 16), 62208);
    EXPECT_EQ(mac_count(conv(3, 2, 16), 12, 12, 3, 16), 15552);
    EXPECT_EQ(mac_count(conv(1, 1, 1), 1, 1, 1, 1), 1);
}

TEST(MacCount, PoolCountsOneComparisonPerTap) {
    EXPECT_EQ(mac_count(pool(2), 12, 12, 3, 3), 12 * 12 * 3);
    EXPECT_EQ(mac_count(pool(3), 9, 9, 4, 4), 9 * 9 * 4);
}

TEST(MacCount, EmptyRegionCostsNothing) {
    EXPECT_EQ(mac_count(conv(3, 1, 8), 0, 5, 3, 8), 0);
    EXPECT_EQ(mac_count(conv(3, 1, 8), -2, -2, 3, 8), 0);
}

TEST(CostParams, RejectsNegatives) {
    EXPECT_THROW((CostParams{-1, 0, 0}).validate(), config_error);
    EXPECT_THROW((CostParams{0, -0.5, 0}).validate(), config_error);
    EXPECT_NO_THROW((CostParams{0, 0, 0}).validate());
}

// Hand-computed two-layer example on a 2x2 grid of 8x8 tiles. Fusing both
// convolutions makes each tile recompute a two-wide halo at the input, so
// with these constants splitting wins.
TEST(Cost, WorkedTwoLayerExample) {
    ModelSpec m = stack({16, 16, 3}, {conv(3, 1, 8), conv(3, 1, 4)});
    GridSpec grid{2, 2};
    CostParams params{1, 1, 10};

    auto split = profile_cost(m, grid, per_layer_profile(2, Direction::forward), params);
    ASSERT_EQ(split.groups.size(), 2u);
    EXPECT_EQ(split.groups[0].macs, 17496);
    EXPECT_EQ(split.groups[0].boundary_elems, 51);
    EXPECT_DOUBLE_EQ(split.groups[0].total, 17496 + 51 + 10);
    EXPECT_EQ(split.groups[1].macs, 23328);
    EXPECT_EQ(split.groups[1].boundary_elems, 136);
    EXPECT_DOUBLE_EQ(split.total, 17557 + 23474);

    auto fused = profile_cost(m, grid, single_group_profile(2, Direction::forward), params);
    ASSERT_EQ(fused.groups.size(), 1u);
    EXPECT_EQ(fused.groups[0].macs, 21600 + 23328);
    EXPECT_EQ(fused.groups[0].boundary_elems, 108);
    EXPECT_DOUBLE_EQ(fused.total, 45046);

    auto optimal = optimal_grouping(m, grid, Direction::forward, params);
    EXPECT_EQ(optimal.boundaries(), std::vector<int>{1});
    EXPECT_EQ(optimal, brute_force_grouping(m, grid, Direction::forward, params));
}

TEST(Cost, BreakdownPartsSumToTotal) {
    ModelSpec m = stack({24, 24, 3}, {conv(3, 1, 8), pool(2), conv(3, 1, 4), conv(1, 1, 2)});
    CostParams params{0.5, 2, 7};
    for (Direction dir : {Direction::forward, Direction::backward}) {
        for (const auto& profile :
             {per_layer_profile(4, dir), single_group_profile(4, dir),
              profile_from_boundaries(4, {2}, dir)}) {
            auto cost = profile_cost(m, {2, 2}, profile, params);
            double sum = 0;
            for (const auto& g : cost.groups) {
                EXPECT_DOUBLE_EQ(g.total, g.compute + g.comm + g.sync);
                EXPECT_DOUBLE_EQ(g.compute, params.c_p * double(g.macs));
                EXPECT_DOUBLE_EQ(g.comm, params.c_c * double(g.boundary_elems));
                EXPECT_DOUBLE_EQ(g.sync, params.c_f);
                sum += g.total;
            }
            EXPECT_DOUBLE_EQ(cost.total, sum);
        }
    }
}

TEST(Cost, LoneTileHasNoBoundaryTraffic) {
    ModelSpec m = stack({16, 16, 3}, {conv(3, 1, 8), conv(3, 1, 4)});
    auto cost = profile_cost(m, {1, 1}, per_layer_profile(2, Direction::forward),
                             CostParams{1, 1, 1});
    for (const auto& g : cost.groups)
        EXPECT_EQ(g.boundary_elems, 0);
}

TEST(Cost, PacingTileIsTheWorstTile) {
    // 7x7 map, 2x2 grid: the leading tile owns 4x4 and its clipped halo
    // region is 5x5; trailing tiles are smaller. The group must be charged
    // at the 5x5 tile's rate.
    ModelSpec m = stack({7, 7, 1}, {conv(3, 1, 1)});
    auto cost = profile_cost(m, {2, 2}, single_group_profile(1, Direction::forward),
                             CostParams{1, 0, 0});
    ASSERT_EQ(cost.groups.size(), 1u);
    EXPECT_EQ(cost.groups[0].macs, 5 * 5 * 9);
}

TEST(Graph, CompleteDagOverFeatureMaps) {
    ModelSpec m = stack({16, 16, 1}, {conv(3, 1, 2), conv(3, 1, 2), conv(3, 1, 2)});
    auto graph = build_group_graph(m, {2, 2}, Direction::forward, CostParams{1, 1, 1});
    EXPECT_EQ(graph.vertices, 4);
    EXPECT_EQ(graph.edge_count(), 6);
    for (int i = 0; i < graph.vertices; ++i) {
        ASSERT_EQ(graph.edge[i].size(), size_t(graph.vertices - 1 - i));
        for (int j = i + 1; j < graph.vertices; ++j)
            EXPECT_EQ(graph.at(i, j).group, (Group{i, j}));
    }
}

TEST(Graph, SingleLayerEdgeEqualsSingleLayerGroupCost) {
    ModelSpec m = stack({16, 16, 3}, {conv(3, 1, 8), pool(2), conv(3, 1, 4)});
    CostParams params{0.25, 1.5, 3};
    auto graph = build_group_graph(m, {2, 2}, Direction::forward, params);
    auto cost = profile_cost(m, {2, 2}, per_layer_profile(3, Direction::forward), params);
    for (int l = 0; l < 3; ++l)
        EXPECT_DOUBLE_EQ(graph.at(l, l + 1).total, cost.groups[l].total);
}

TEST(Optimizer, SyncDominatedCollapsesToOneGroup) {
    ModelSpec m = stack({24, 24, 3}, {conv(3, 1, 8), conv(3, 1, 8), pool(2), conv(3, 1, 4)});
    auto profile = optimal_grouping(m, {3, 3}, Direction::forward, CostParams{1, 1, 1e9});
    EXPECT_EQ(profile.groups.size(), 1u);
    EXPECT_EQ(profile.groups[0], (Group{0, 4}));
}

TEST(Optimizer, ComputeDominatedSplitsEveryLayer) {
    // With free synchronization, fusing only adds redundant halo MACs on a
    // real grid, so the optimum synchronizes at every layer.
    ModelSpec m = stack({24, 24, 3}, {conv(3, 1, 8), conv(3, 1, 8), conv(3, 1, 4)});
    auto profile = optimal_grouping(m, {3, 3}, Direction::forward, CostParams{1, 0, 0});
    EXPECT_EQ(profile, per_layer_profile(3, Direction::forward));
}

TEST(Optimizer, LoneTileTiesResolveToFewerGroups) {
    // On a 1x1 grid there is no halo, every profile costs the same MACs, and
    // the tie-break prefers fewer groups.
    ModelSpec m = stack({24, 24, 3}, {conv(3, 1, 8), conv(3, 1, 8), conv(3, 1, 4)});
    auto profile = optimal_grouping(m, {1, 1}, Direction::forward, CostParams{1, 0, 0});
    EXPECT_EQ(profile.groups.size(), 1u);
}

TEST(Optimizer, BoundaryDominatedAvoidsExtraExchanges) {
    // Make elements expensive to move and MACs free: grouping everything
    // avoids interior exchanges entirely (the first boundary is the scatter,
    // which this cost model charges like any other group input).
    ModelSpec m = stack({24, 24, 3}, {conv(3, 1, 8), conv(3, 1, 8), conv(3, 1, 4)});
    auto profile = optimal_grouping(m, {3, 3}, Direction::forward, CostParams{0, 1, 0});
    EXPECT_EQ(profile.groups.size(), 1u);
}

namespace {

// Deterministic random model/grid/params generator for the oracle sweep.
struct RandomInstance {
    ModelSpec model;
    GridSpec grid;
    CostParams params;
};

RandomInstance make_instance(std::uint64_t seed) {
    std::uint64_t s = seed;
    auto pick = [&](int n) { return int(tgtest::lcg_next(s) >> 33) % n; };

    RandomInstance inst;
    const int sizes[] = {8, 12, 16, 24};
    inst.model.input = {sizes[pick(4)], sizes[pick(4)], 1 + pick(3)};
    const int layer_count = 1 + pick(6);
    MapDims dims = inst.model.input;
    for (int l = 0; l < layer_count; ++l) {
        bool want_pool = pick(3) == 0;
        if (want_pool && dims.width % 2 == 0 && dims.height % 2 == 0 && dims.width >= 4 &&
            dims.height >= 4) {
            inst.model.layers.push_back(pool(2));
        } else {
            const int kernels[] = {1, 3, 5};
            int k = kernels[pick(3)];
            int stride = (k >= 3 && pick(4) == 0) ? 2 : 1;
            inst.model.layers.push_back(conv(k, stride, 1 + pick(8)));
        }
        dims = layer_output_dims(inst.model.layers.back(), dims);
    }
    int min_extent = inst.model.input.width;
    for (const MapDims& d : inst.model.all_map_dims())
        min_extent = std::min({min_extent, d.width, d.height});
    inst.grid.rows = 1 + pick(std::min(3, min_extent));
    inst.grid.cols = 1 + pick(std::min(3, min_extent));

    const double scale[] = {0, 0.25, 0.5, 1, 2, 4};
    inst.params = {scale[pick(6)], scale[pick(6)], scale[pick(6)] * 256};
    return inst;
}

} // namespace

TEST(Optimizer, MatchesExhaustiveSearchOnRandomInstances) {
    int checked = 0;
    for (std::uint64_t seed = 1; seed <= 200; ++seed) {
        RandomInstance inst = make_instance(seed);
        for (Direction dir : {Direction::forward, Direction::backward}) {
            auto graph = build_group_graph(inst.model, inst.grid, dir, inst.params);
            auto fast = optimal_grouping(graph);
            auto exhaustive = brute_force_grouping(graph);
            ASSERT_EQ(fast, exhaustive)
                << "seed " << seed << " dir " << to_string(dir) << " grid "
                << to_string(inst.grid);
            ++checked;
        }
    }
    EXPECT_EQ(checked, 400);
}

TEST(Optimizer, CommonScalingLeavesChoiceUnchanged) {
    for (std::uint64_t seed = 300; seed < 340; ++seed) {
        RandomInstance inst = make_instance(seed);
        CostParams scaled{inst.params.c_p * 4096, inst.params.c_c * 4096, inst.params.c_f * 4096};
        for (Direction dir : {Direction::forward, Direction::backward}) {
            auto base = optimal_grouping(inst.model, inst.grid, dir, inst.params);
            auto big = optimal_grouping(inst.model, inst.grid, dir, scaled);
            ASSERT_EQ(base, big) << "seed " << seed;
        }
    }
}

TEST(Optimizer, SplittingNeverReducesComputeSum) {
    // Redundant halo work only grows as groups deepen, so the per-layer
    // profile's total MAC count is a lower bound over all profiles.
    for (std::uint64_t seed = 400; seed < 420; ++seed) {
        RandomInstance inst = make_instance(seed);
        const int L = inst.model.layer_count();
        CostParams unit{1, 0, 0};
        auto floor_cost =
            profile_cost(inst.model, inst.grid, per_layer_profile(L, Direction::forward), unit);
        for (std::uint32_t mask = 0; mask < (1u << std::min(L - 1, 6)); ++mask) {
            std::vector<int> boundaries;
            for (int b = 0; b < L - 1; ++b)
                if (mask & (1u << b))
                    boundaries.push_back(b + 1);
            auto cost = profile_cost(inst.model, inst.grid,
                                     profile_from_boundaries(L, boundaries, Direction::forward),
                                     unit);
            ASSERT_GE(cost.total, floor_cost.total) << "seed " << seed << " mask " << mask;
        }
    }
}

TEST(BruteForce, RefusesOversizedNetworks) {
    std::vector<LayerSpec> layers(12, conv(3, 1, 2));
    ModelSpec m = stack({16, 16, 1}, layers);
    EXPECT_THROW(brute_force_grouping(m, {2, 2}, Direction::forward, CostParams{1, 1, 1}),
                 config_error);
}

TEST(BruteForce, SmallestNetworksEnumerateCorrectly) {
    ModelSpec one = stack({8, 8, 1}, {conv(3, 1, 2)});
    auto p1 = brute_force_grouping(one, {2, 2}, Direction::forward, CostParams{1, 1, 1});
    EXPECT_EQ(p1.groups, (std::vector<Group>{{0, 1}}));

    ModelSpec two = stack({8, 8, 1}, {conv(3, 1, 2), conv(3, 1, 2)});
    CostParams params{1, 1, 0.5};
    auto graph = build_group_graph(two, {2, 2}, Direction::forward, params);
    double split = graph.at(0, 1).total + graph.at(1, 2).total;
    double fused = graph.at(0, 2).total;
    auto p2 = brute_force_grouping(graph);
    EXPECT_EQ(p2.groups.size(), split < fused ? 2u : 1u);
}

TEST(Profiles, BoundaryListRoundTrips) {
    for (std::uint64_t seed = 500; seed < 520; ++seed) {
        std::uint64_t s = seed;
        int L = 2 + int(tgtest::lcg_next(s) >> 33) % 8;
        std::vector<int> boundaries;
        for (int b = 1; b < L; ++b)
            if (tgtest::lcg_next(s) & 1)
                boundaries.push_back(b);
        auto profile = profile_from_boundaries(L, boundaries, Direction::backward);
        profile.validate(L);
        EXPECT_EQ(profile.boundaries(), boundaries);
        EXPECT_EQ(profile.direction, Direction::backward);
    }
}
