#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <queue>
#include <vector>

#include "tilegrad/errors.hpp"
#include "tilegrad/geometry.hpp"
#include "tilegrad/model.hpp"

namespace tilegrad {

// ===========================================================================
// Grouping cost model and optimizer.
//
// Fusing consecutive layers into a group trades communication (one boundary
// exchange per group instead of one per layer) against computation (each
// tile recomputes a growing halo of redundant elements inside the group).
// Every contiguous grouping is a root-to-sink path in a complete DAG over
// feature-map indices; the cheapest profile is the shortest such path.
//
// Costs are per-tile makespan bounds: tiles synchronize at every group
// boundary, so each group is charged at the rate of its most expensive tile.
// ===========================================================================

/// Calibration constants of the cost model.
struct CostParams {
    double c_p = 0;  // cost per MAC
    double c_c = 0;  // cost per boundary element moved
    double c_f = 0;  // fixed cost per synchronization transaction

    void validate() const {
        if (!(c_p >= 0) || !(c_c >= 0) || !(c_f >= 0))
            throw config_error("cost constants must be non-negative");
    }
};

/// MAC count of one layer over a (possibly haloed) w x h input region.
/// Pool windows cost one comparison per tap, counted as MAC-equivalents.
inline std::int64_t mac_count(const LayerSpec& layer, int w, int h, int d_in, int d_out) {
    if (w < 1 || h < 1)
        return 0;
    std::int64_t taps = std::int64_t(w) * h * d_in * layer.kernel * layer.kernel;
    if (layer.is_conv())
        taps *= d_out;
    return taps / (std::int64_t(layer.stride) * layer.stride);
}

/// Cost of one group at the tile that sets its pace.
struct GroupCostBreakdown {
    Group group;
    std::int64_t macs = 0;              // redundant-work-inclusive MACs, pacing tile
    double compute = 0;                 // c_p * macs
    std::int64_t boundary_elems = 0;    // elements the pacing tile pulls past its slice
    double comm = 0;                    // c_c * boundary_elems
    double sync = 0;                    // c_f
    double total = 0;                   // compute + comm + sync
};

struct ProfileCost {
    double total = 0;
    std::vector<GroupCostBreakdown> groups;
};

namespace detail {

/// Regions one tile materializes across a group's maps (begin..end), anchored
/// on the owned partition at the trace origin. Unlike the plan builder this
/// never throws: regions are intersected with the map and may come out empty,
/// which simply costs nothing.
inline std::vector<Rect> cost_region_chain(const ModelSpec& model,
                                           const std::vector<MapDims>& dims,
                                           const std::vector<std::vector<Rect>>& owned,
                                           const Group& g, Direction dir, int tile) {
    std::vector<Rect> chain(g.layer_count() + 1);
    if (dir == Direction::forward) {
        chain.back() = owned[g.end_map][tile];
        for (int l = g.end_map - 1; l >= g.begin_map; --l)
            chain[l - g.begin_map] =
                backtrace_forward_region(chain[l - g.begin_map + 1], model.layers[l])
                    .intersect(full_rect(dims[l]));
    } else {
        chain.front() = owned[g.begin_map][tile];
        for (int l = g.begin_map; l < g.end_map; ++l)
            chain[l - g.begin_map + 1] =
                forwardtrace_delta_region(chain[l - g.begin_map], model.layers[l])
                    .intersect(full_rect(dims[l + 1]));
    }
    return chain;
}

} // namespace detail

/// Cost one candidate group across all tiles and charge the most expensive
/// one. Ties go to the lowest tile id.
inline GroupCostBreakdown group_cost(const ModelSpec& model,
                                     const std::vector<MapDims>& dims,
                                     const std::vector<std::vector<Rect>>& owned,
                                     const Group& g, Direction dir,
                                     const GridSpec& grid, const CostParams& params) {
    GroupCostBreakdown best;
    best.group = g;
    const int input_map = dir == Direction::forward ? g.begin_map : g.end_map;
    double best_score = -1;
    for (int t = 0; t < grid.tiles(); ++t) {
        auto chain = detail::cost_region_chain(model, dims, owned, g, dir, t);
        std::int64_t macs = 0;
        for (int l = g.begin_map; l < g.end_map; ++l) {
            const Rect& r = chain[l - g.begin_map];
            macs += mac_count(model.layers[l], r.width(), r.height(),
                              dims[l].depth, dims[l + 1].depth);
        }
        const Rect& in = chain[input_map - g.begin_map];
        std::int64_t belems =
            dims[input_map].depth * (in.area() - in.intersect(owned[input_map][t]).area());
        double score = params.c_p * double(macs) + params.c_c * double(belems);
        if (score > best_score) {
            best_score = score;
            best.macs = macs;
            best.boundary_elems = belems;
        }
    }
    best.compute = params.c_p * double(best.macs);
    best.comm = params.c_c * double(best.boundary_elems);
    best.sync = params.c_f;
    best.total = best.compute + best.comm + best.sync;
    return best;
}

/// Total cost of a full profile, with the per-group breakdowns.
inline ProfileCost profile_cost(const ModelSpec& model, const GridSpec& grid,
                                const GroupingProfile& profile, const CostParams& params) {
    profile.validate(model.layer_count());
    params.validate();
    const auto dims = model.all_map_dims();
    std::vector<std::vector<Rect>> owned(dims.size());
    for (size_t m = 0; m < dims.size(); ++m)
        owned[m] = partition_map(dims[m], grid);
    ProfileCost cost;
    for (const Group& g : profile.groups) {
        cost.groups.push_back(group_cost(model, dims, owned, g, profile.direction, grid, params));
        cost.total += cost.groups.back().total;
    }
    return cost;
}

/// Complete DAG over feature-map indices: edge (i, j), i < j, is the group
/// fusing layers i..j-1, weighted by its pacing-tile cost.
struct GroupGraph {
    int vertices = 0;
    Direction direction = Direction::forward;
    std::vector<std::vector<GroupCostBreakdown>> edge;  // edge[i][j - i - 1]

    const GroupCostBreakdown& at(int i, int j) const { return edge[i][j - i - 1]; }
    int edge_count() const { return vertices * (vertices - 1) / 2; }
};

inline GroupGraph build_group_graph(const ModelSpec& model, const GridSpec& grid,
                                    Direction dir, const CostParams& params) {
    params.validate();
    model.validate();
    const auto dims = model.all_map_dims();
    std::vector<std::vector<Rect>> owned(dims.size());
    for (size_t m = 0; m < dims.size(); ++m)
        owned[m] = partition_map(dims[m], grid);

    GroupGraph graph;
    graph.vertices = model.map_count();
    graph.direction = dir;
    graph.edge.resize(graph.vertices);
    for (int i = 0; i < graph.vertices; ++i)
        for (int j = i + 1; j < graph.vertices; ++j)
            graph.edge[i].push_back(group_cost(model, dims, owned, {i, j}, dir, grid, params));
    return graph;
}

namespace detail {

/// Path label: cost first, then fewer groups, then the lexicographically
/// smallest boundary list. All three extend monotonically along an edge, so
/// Dijkstra's settle-on-first-pop argument carries over to the full tuple.
struct PathLabel {
    double cost = 0;
    int groups = 0;
    std::vector<int> boundaries;  // interior vertices of the path, ascending

    bool operator<(const PathLabel& o) const {
        if (cost != o.cost) return cost < o.cost;
        if (groups != o.groups) return groups < o.groups;
        return boundaries < o.boundaries;
    }
};

} // namespace detail

/// Shortest root-to-sink path of the group graph, as a grouping profile.
inline GroupingProfile optimal_grouping(const GroupGraph& graph) {
    const int N = graph.vertices;
    struct QueueItem {
        detail::PathLabel label;
        int vertex = 0;
        bool operator>(const QueueItem& o) const {
            if (!(label < o.label) && !(o.label < label)) return vertex > o.vertex;
            return o.label < label;
        }
    };
    std::priority_queue<QueueItem, std::vector<QueueItem>, std::greater<QueueItem>> queue;
    std::vector<bool> settled(N, false);
    std::vector<detail::PathLabel> best(N);
    queue.push({detail::PathLabel{}, 0});
    while (!queue.empty()) {
        auto [label, u] = queue.top();
        queue.pop();
        if (settled[u])
            continue;
        settled[u] = true;
        best[u] = label;
        if (u == N - 1)
            break;
        for (int v = u + 1; v < N; ++v) {
            if (settled[v])
                continue;
            detail::PathLabel next = label;
            next.cost += graph.at(u, v).total;
            next.groups += 1;
            if (v < N - 1)
                next.boundaries.push_back(v);
            queue.push({std::move(next), v});
        }
    }
    GroupingProfile profile =
        profile_from_boundaries(N - 1, best[N - 1].boundaries, graph.direction);
    return profile;
}

inline GroupingProfile optimal_grouping(const ModelSpec& model, const GridSpec& grid,
                                        Direction dir, const CostParams& params) {
    return optimal_grouping(build_group_graph(model, grid, dir, params));
}

/// Exhaustive minimum over all 2^(N-2) contiguous profiles, with the same
/// tie-break rule. Oracle for the shortest-path search; refuses networks
/// where enumeration would blow up.
inline GroupingProfile brute_force_grouping(const GroupGraph& graph) {
    const int N = graph.vertices;
    if (N > 12)
        throw config_error("exhaustive grouping search limited to 12 feature maps, got "
                           + std::to_string(N));
    const int internal = N - 2;
    bool have_best = false;
    detail::PathLabel best_label;
    std::vector<int> best_boundaries;
    for (std::uint32_t mask = 0; mask < (1u << internal); ++mask) {
        detail::PathLabel label;
        std::vector<int> boundaries;
        for (int b = 0; b < internal; ++b)
            if (mask & (1u << b))
                boundaries.push_back(b + 1);
        int at = 0;
        for (int b : boundaries) {
            label.cost += graph.at(at, b).total;
            label.groups += 1;
            at = b;
        }
        label.cost += graph.at(at, N - 1).total;
        label.groups += 1;
        label.boundaries = boundaries;
        if (!have_best || label < best_label) {
            have_best = true;
            best_label = std::move(label);
            best_boundaries = boundaries;
        }
    }
    return profile_from_boundaries(N - 1, best_boundaries, graph.direction);
}

inline GroupingProfile brute_force_grouping(const ModelSpec& model, const GridSpec& grid,
                                            Direction dir, const CostParams& params) {
    return brute_force_grouping(build_group_graph(model, grid, dir, params));
}

} // namespace tilegrad
