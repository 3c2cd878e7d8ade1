#pragma once

#include <optional>
#include <string>
#include <vector>

#include "tilegrad/errors.hpp"
#include "tilegrad/model.hpp"

namespace tilegrad {

// ===========================================================================
// Tile geometry: rectangles, map partitions, and the dependent-region
// recurrences that decide how much boundary data each tile must hold.
//
// Key invariants:
//  * owned rects of a grid partition a map exactly (disjoint cover);
//  * traced regions are unclipped and may extend past the map; clipping to
//    the map happens as a separate, explicit step;
//  * a required region always contains every element the corresponding
//    computation reads, treating out-of-map coordinates as zero padding.
// ===========================================================================

/// Closed, inclusive rectangle of map coordinates. Empty iff x1 > x2 or y1 > y2.
struct Rect {
    int x1 = 0;
    int y1 = 0;
    int x2 = -1;
    int y2 = -1;

    int width() const { return x2 - x1 + 1; }
    int height() const { return y2 - y1 + 1; }
    bool empty() const { return x2 < x1 || y2 < y1; }
    std::int64_t area() const {
        return empty() ? 0 : std::int64_t(width()) * height();
    }
    bool contains(int x, int y) const {
        return x >= x1 && x <= x2 && y >= y1 && y <= y2;
    }
    bool contains(const Rect& r) const {
        return !r.empty() && r.x1 >= x1 && r.x2 <= x2 && r.y1 >= y1 && r.y2 <= y2;
    }
    Rect intersect(const Rect& o) const {
        return {std::max(x1, o.x1), std::max(y1, o.y1), std::min(x2, o.x2), std::min(y2, o.y2)};
    }
    bool overlaps(const Rect& o) const { return !intersect(o).empty(); }
    bool operator==(const Rect&) const = default;
};

inline std::string to_string(const Rect& r) {
    return "(" + std::to_string(r.x1) + "," + std::to_string(r.y1) + ","
               + std::to_string(r.x2) + "," + std::to_string(r.y2) + ")";
}

inline Rect full_rect(const MapDims& d) { return {0, 0, d.width - 1, d.height - 1}; }

/// Clip a traced region to the map. An empty intersection means the tile has
/// no work at this layer, which only happens on broken configurations.
inline Rect clip_to_map(const Rect& r, const MapDims& dims) {
    Rect c = r.intersect(full_rect(dims));
    if (c.empty())
        throw config_error("tile region " + to_string(r) + " falls entirely outside a "
                           + std::to_string(dims.width) + "x" + std::to_string(dims.height)
                           + " map");
    return c;
}

// Integer division rounding toward -inf / +inf; the traces below produce
// negative coordinates near the map edge, where truncating division would
// round the wrong way.
inline int div_floor(int a, int b) {
    int q = a / b, r = a % b;
    return (r != 0 && ((r < 0) != (b < 0))) ? q - 1 : q;
}
inline int div_ceil(int a, int b) { return -div_floor(-a, b); }

// ---------------------------------------------------------------------------
// Dependent-region traces
// ---------------------------------------------------------------------------

/// Region of the layer's INPUT map needed to compute `out` on its output map.
/// Unclipped; coordinates past the map edge are zero padding.
///
/// For convolutions (same-style padding) each output column x pulls input
/// columns x*S - K/2 .. x*S + K/2, plus a stride slack of S-1 on the high
/// edge so the bound stays valid between stride phases. Pool windows are
/// anchored at x*S and never reach outside their strided block, so their
/// half-kernel terms vanish.
inline Rect backtrace_forward_region(const Rect& out, const LayerSpec& layer) {
    const int S = layer.stride;
    const int half = layer.is_pool() ? 0 : layer.kernel / 2;
    return {out.x1 * S - half,
            out.y1 * S - half,
            out.x2 * S + half + (S - 1),
            out.y2 * S + half + (S - 1)};
}

/// Region of the layer's OUTPUT delta map needed to compute the delta over
/// `in` on its input map. Unclipped.
///
/// A convolution output at column o consumed input column x whenever
/// o*S - K/2 <= x <= o*S + K/2, so inverting gives
/// ceil((x - K/2)/S) .. floor((x + K/2)/S). For K = S pools the consumers of
/// column x are exactly the windows floor(x/S) on either edge.
inline Rect forwardtrace_delta_region(const Rect& in, const LayerSpec& layer) {
    const int S = layer.stride;
    if (layer.is_pool()) {
        return {div_floor(in.x1, S), div_floor(in.y1, S),
                div_floor(in.x2, S), div_floor(in.y2, S)};
    }
    const int half = layer.kernel / 2;
    return {div_ceil(in.x1 - half, S), div_ceil(in.y1 - half, S),
            div_floor(in.x2 + half, S), div_floor(in.y2 + half, S)};
}

/// Width of the input-map boundary ring needed to form a layer's weight
/// gradient from its owned output slice alone. Conservative bound; the
/// planner checks the exact backtraced requirement.
inline int weight_grad_halo(const LayerSpec& layer) {
    return (layer.kernel + 1) / 2;
}

// ---------------------------------------------------------------------------
// Map partitioning
// ---------------------------------------------------------------------------

/// N rows x M columns of tiles; tile ids are row-major.
struct GridSpec {
    int rows = 1;
    int cols = 1;

    int tiles() const { return rows * cols; }
    int tile_id(int row, int col) const { return row * cols + col; }
    int row_of(int tile) const { return tile / cols; }
    int col_of(int tile) const { return tile % cols; }
    bool operator==(const GridSpec&) const = default;
};

inline std::string to_string(const GridSpec& g) {
    return std::to_string(g.rows) + "x" + std::to_string(g.cols);
}

/// Split [0, extent) into `parts` contiguous intervals; the remainder goes to
/// the leading intervals, one extra element each.
inline std::vector<std::pair<int, int>> split_extent(int extent, int parts) {
    std::vector<std::pair<int, int>> out;
    int base = extent / parts, rem = extent % parts, at = 0;
    for (int p = 0; p < parts; ++p) {
        int len = base + (p < rem ? 1 : 0);
        out.push_back({at, at + len - 1});
        at += len;
    }
    return out;
}

/// Owned rects of every tile on a map, row-major tile order. Disjoint and
/// covering by construction.
inline std::vector<Rect> partition_map(const MapDims& dims, const GridSpec& grid) {
    if (grid.rows < 1 || grid.cols < 1)
        throw config_error("grid must have at least one row and column");
    if (grid.rows > dims.height || grid.cols > dims.width)
        throw config_error("grid " + to_string(grid) + " exceeds map "
                           + std::to_string(dims.width) + "x" + std::to_string(dims.height));
    auto rows = split_extent(dims.height, grid.rows);
    auto cols = split_extent(dims.width, grid.cols);
    std::vector<Rect> rects;
    rects.reserve(grid.tiles());
    for (auto [y1, y2] : rows)
        for (auto [x1, x2] : cols)
            rects.push_back({x1, y1, x2, y2});
    return rects;
}

// ---------------------------------------------------------------------------
// Halo exchange schedule
// ---------------------------------------------------------------------------

/// One block a tile receives from (or sends to) a grid neighbor.
struct HaloBlock {
    int peer = -1;   // tile id on the other end
    Rect rect;       // map coordinates, always inside the peer's owned rect
};

struct HaloSchedule {
    std::vector<HaloBlock> recvs;
    std::vector<HaloBlock> sends;
};

/// Decompose one tile's boundary needs into per-neighbor blocks.
///
/// `owned` partitions the whole map; tile `self` wants `required`. Everything
/// in required \ owned(self) must land inside one of the eight surrounding
/// tiles, otherwise the group is too deep for the tile size. Sends mirror the
/// neighbors' own calls, so pairing this across all tiles yields a consistent
/// exchange.
inline HaloSchedule halo_decomposition(int self, const Rect& required,
                                       const std::vector<Rect>& owned,
                                       const GridSpec& grid) {
    HaloSchedule sched;
    const Rect own = owned[self];
    const int r = grid.row_of(self), c = grid.col_of(self);

    std::int64_t covered = required.intersect(own).area();
    for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            int nr = r + dr, nc = c + dc;
            if (nr < 0 || nr >= grid.rows || nc < 0 || nc >= grid.cols) continue;
            int peer = grid.tile_id(nr, nc);
            Rect recv = required.intersect(owned[peer]);
            if (!recv.empty()) {
                sched.recvs.push_back({peer, recv});
                covered += recv.area();
            }
        }
    }
    if (covered != required.area())
        throw config_error("tile " + std::to_string(self) + " requires " + to_string(required)
                           + " which reaches past its adjacent tiles; group too deep for grid "
                           + to_string(grid));
    return sched;
}

/// All tiles' schedules for one boundary, with sends filled in by mirroring.
inline std::vector<HaloSchedule> boundary_schedules(const std::vector<Rect>& required,
                                                    const std::vector<Rect>& owned,
                                                    const GridSpec& grid) {
    std::vector<HaloSchedule> all(grid.tiles());
    for (int t = 0; t < grid.tiles(); ++t)
        all[t] = halo_decomposition(t, required[t], owned, grid);
    for (int t = 0; t < grid.tiles(); ++t)
        for (const HaloBlock& b : all[t].recvs)
            all[b.peer].sends.push_back({t, b.rect});
    return all;
}

// ---------------------------------------------------------------------------
// Tile plans
// ---------------------------------------------------------------------------

/// What one tile holds of one feature (or delta) map.
///   owned:    its slice of the map's exact partition;
///   required: the possibly haloed region it materializes when executing the
///             plan. At a group's output map required == owned; at the input
///             map of a group it includes the boundary ring.
struct TilePlanEntry {
    Rect owned;
    Rect required;
};

/// One group-input boundary of the plan.
struct PlanBoundary {
    int map = 0;               // feature-map index where the exchange happens
    bool via_scatter = false;  // filled by the coordinator scatter, no peer traffic
    std::vector<HaloSchedule> tiles;
};

/// Per-direction tiling plan: every tile's regions at every map, plus the
/// exchange schedule at every group input.
struct TilePlan {
    Direction direction = Direction::forward;
    GridSpec grid;
    GroupingProfile profile;
    // entries[tile][map]
    std::vector<std::vector<TilePlanEntry>> entries;
    std::vector<PlanBoundary> boundaries;

    const TilePlanEntry& at(int tile, int map) const { return entries[tile][map]; }
};

/// Build the per-tile region table for one direction.
///
/// Forward: each group's output map gets the exact partition; walking the
/// group's layers backward grows the required region a tile must receive at
/// the group input. Backward mirrors this on delta maps: the group's begin
/// map gets the partition and the trace grows toward the group's end map.
inline TilePlan build_tile_plan(const ModelSpec& model, const GridSpec& grid,
                                const GroupingProfile& profile) {
    profile.validate(model.layer_count());
    // The region traces assume same-style convolution padding and pool
    // windows that tile their stride blocks; anything else cannot be split
    // across tiles with these recurrences.
    for (int l = 0; l < model.layer_count(); ++l) {
        const LayerSpec& layer = model.layers[l];
        if (layer.is_conv() && layer.pad != layer.kernel / 2)
            throw config_error("layer " + std::to_string(l)
                               + ": tiled execution requires pad == kernel/2");
        if (layer.is_pool() && layer.kernel != layer.stride)
            throw config_error("layer " + std::to_string(l)
                               + ": tiled execution requires pool kernel == stride");
    }
    const auto dims = model.all_map_dims();
    const int maps = model.map_count();

    TilePlan plan;
    plan.direction = profile.direction;
    plan.grid = grid;
    plan.profile = profile;
    plan.entries.assign(grid.tiles(), std::vector<TilePlanEntry>(maps));

    std::vector<std::vector<Rect>> owned(maps);
    for (int m = 0; m < maps; ++m) {
        owned[m] = partition_map(dims[m], grid);
        for (int t = 0; t < grid.tiles(); ++t)
            plan.entries[t][m].owned = owned[m][t];
    }

    // At a map shared by two groups the stored required region must be the
    // one of the group that RECEIVES there, because that is the buffer a tile
    // materializes after the exchange. Each trace below writes the shared map
    // twice (once as its anchor, once as the neighbor group's input), so the
    // groups are walked in the opposite order of execution: the receiving
    // group's trace lands last and wins.
    if (profile.direction == Direction::forward) {
        for (const Group& g : profile.groups) {
            for (int t = 0; t < grid.tiles(); ++t) {
                Rect r = owned[g.end_map][t];
                plan.entries[t][g.end_map].required = r;
                for (int l = g.end_map - 1; l >= g.begin_map; --l) {
                    r = clip_to_map(backtrace_forward_region(r, model.layers[l]), dims[l]);
                    plan.entries[t][l].required = r;
                }
            }
        }
        for (const Group& g : profile.groups) {
            PlanBoundary b;
            b.map = g.begin_map;
            b.via_scatter = (g.begin_map == 0);
            std::vector<Rect> req(grid.tiles());
            for (int t = 0; t < grid.tiles(); ++t)
                req[t] = plan.entries[t][g.begin_map].required;
            b.tiles = b.via_scatter ? std::vector<HaloSchedule>(grid.tiles())
                                    : boundary_schedules(req, owned[g.begin_map], grid);
            plan.boundaries.push_back(b);
        }
    } else {
        for (auto it = profile.groups.rbegin(); it != profile.groups.rend(); ++it) {
            const Group& g = *it;
            for (int t = 0; t < grid.tiles(); ++t) {
                Rect r = owned[g.begin_map][t];
                plan.entries[t][g.begin_map].required = r;
                for (int l = g.begin_map; l < g.end_map; ++l) {
                    r = clip_to_map(forwardtrace_delta_region(r, model.layers[l]), dims[l + 1]);
                    plan.entries[t][l + 1].required = r;
                }
            }
        }
        for (const Group& g : profile.groups) {
            PlanBoundary b;
            b.map = g.end_map;
            b.via_scatter = (g.end_map == model.layer_count());
            std::vector<Rect> req(grid.tiles());
            for (int t = 0; t < grid.tiles(); ++t)
                req[t] = plan.entries[t][g.end_map].required;
            b.tiles = b.via_scatter ? std::vector<HaloSchedule>(grid.tiles())
                                    : boundary_schedules(req, owned[g.end_map], grid);
            plan.boundaries.push_back(b);
        }
    }
    return plan;
}

/// Boundary elements one tile pulls in beyond its owned slice at a group
/// input: depth x (required area - owned area). This is exactly the element
/// count the exchange (or the halo part of a scatter) delivers for that tile.
inline std::int64_t boundary_elements(const TilePlanEntry& entry, int depth) {
    return std::int64_t(depth) * (entry.required.area() - entry.required.intersect(entry.owned).area());
}

} // namespace tilegrad
