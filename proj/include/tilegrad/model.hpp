#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "tilegrad/errors.hpp"

namespace tilegrad {

// A network is a straight pipeline of layers. Feature map m is the input of
// layer m, so a net with L layers has maps 0..L and map L is the final output.

enum class LayerKind : uint8_t { convolution, maxpool };

enum class Activation : uint8_t { none, leaky };

enum class Direction : uint8_t { forward = 0, backward = 1 };

inline const char* to_string(Direction d) {
    return d == Direction::forward ? "forward" : "backward";
}

struct MapDims {
    int width = 0;
    int height = 0;
    int depth = 0;

    std::int64_t elements() const {
        return std::int64_t(width) * height * depth;
    }
    bool operator==(const MapDims&) const = default;
};

struct LayerSpec {
    LayerKind kind = LayerKind::convolution;
    int kernel = 1;
    int stride = 1;
    int pad = 0;              // convolution only; pools never pad
    int out_channels = 0;     // convolution only; pools preserve depth
    Activation activation = Activation::none;
    float leaky_slope = 0.1f;

    bool is_conv() const { return kind == LayerKind::convolution; }
    bool is_pool() const { return kind == LayerKind::maxpool; }
};

/// Output dims of one layer applied to `in`. Throws shape_error when the
/// layer does not fit (kernel larger than the padded map, non-positive
/// output extent, bad stride).
inline MapDims layer_output_dims(const LayerSpec& layer, const MapDims& in) {
    if (layer.kernel < 1 || layer.stride < 1)
        throw shape_error("kernel and stride must be positive");
    if (layer.is_conv()) {
        if (layer.pad < 0)
            throw shape_error("negative padding");
        if (layer.out_channels < 1)
            throw shape_error("convolution needs at least one output channel");
        int w = (in.width + 2 * layer.pad - layer.kernel) / layer.stride + 1;
        int h = (in.height + 2 * layer.pad - layer.kernel) / layer.stride + 1;
        if (in.width + 2 * layer.pad < layer.kernel || in.height + 2 * layer.pad < layer.kernel)
            throw shape_error("kernel exceeds padded input map");
        return {w, h, layer.out_channels};
    }
    // maxpool: no padding; a window must fit entirely inside the map
    if (layer.kernel > in.width || layer.kernel > in.height)
        throw shape_error("pool window exceeds input map");
    int w = (in.width - layer.kernel) / layer.stride + 1;
    int h = (in.height - layer.kernel) / layer.stride + 1;
    return {w, h, in.depth};
}

/// Whole-network description: input dims plus the layer pipeline.
struct ModelSpec {
    MapDims input;
    std::vector<LayerSpec> layers;

    int layer_count() const { return int(layers.size()); }
    int map_count() const { return int(layers.size()) + 1; }

    /// Dims of feature map m (0 = network input, layer_count() = output).
    /// Walks the dimension chain, so it also validates that every layer fits.
    MapDims map_dims(int m) const {
        if (m < 0 || m > layer_count())
            throw shape_error("map index " + std::to_string(m) + " out of range");
        MapDims d = input;
        for (int l = 0; l < m; ++l)
            d = layer_output_dims(layers[l], d);
        return d;
    }

    /// Dims of every map, 0..layer_count().
    std::vector<MapDims> all_map_dims() const {
        std::vector<MapDims> dims;
        dims.reserve(map_count());
        MapDims d = input;
        dims.push_back(d);
        for (const LayerSpec& layer : layers) {
            d = layer_output_dims(layer, d);
            dims.push_back(d);
        }
        return dims;
    }

    void validate() const {
        if (input.width < 1 || input.height < 1 || input.depth < 1)
            throw config_error("input dims must be positive");
        if (layers.empty())
            throw config_error("model has no layers");
        (void)map_dims(layer_count());
    }
};

// ---------------------------------------------------------------------------
// Grouping profiles
// ---------------------------------------------------------------------------

/// Half-open interval of feature maps: the group fuses layers
/// begin_map..end_map-1 and touches maps begin_map..end_map. Boundary data is
/// exchanged only at the group's input map (begin_map going forward, end_map
/// going backward).
struct Group {
    int begin_map = 0;
    int end_map = 0;

    int layer_count() const { return end_map - begin_map; }
    bool operator==(const Group&) const = default;
};

/// Contiguous cover of all layers by groups, for one pass direction.
struct GroupingProfile {
    Direction direction = Direction::forward;
    std::vector<Group> groups;   // ascending, g[k].end_map == g[k+1].begin_map

    bool operator==(const GroupingProfile&) const = default;

    /// Internal map indices where two groups meet (excludes maps 0 and L).
    std::vector<int> boundaries() const {
        std::vector<int> b;
        for (size_t k = 1; k < groups.size(); ++k)
            b.push_back(groups[k].begin_map);
        return b;
    }

    void validate(int layer_count) const {
        if (groups.empty())
            throw config_error("profile has no groups");
        if (groups.front().begin_map != 0 || groups.back().end_map != layer_count)
            throw config_error("profile does not span all layers");
        for (const Group& g : groups)
            if (g.begin_map >= g.end_map)
                throw config_error("empty group in profile");
        for (size_t k = 1; k < groups.size(); ++k)
            if (groups[k].begin_map != groups[k - 1].end_map)
                throw config_error("profile groups are not contiguous");
    }
};

inline GroupingProfile per_layer_profile(int layer_count, Direction dir) {
    GroupingProfile p;
    p.direction = dir;
    for (int l = 0; l < layer_count; ++l)
        p.groups.push_back({l, l + 1});
    return p;
}

inline GroupingProfile single_group_profile(int layer_count, Direction dir) {
    GroupingProfile p;
    p.direction = dir;
    p.groups.push_back({0, layer_count});
    return p;
}

/// Profile from an explicit sorted list of internal boundary maps.
inline GroupingProfile profile_from_boundaries(int layer_count,
                                               const std::vector<int>& boundaries,
                                               Direction dir) {
    GroupingProfile p;
    p.direction = dir;
    int begin = 0;
    for (int b : boundaries) {
        if (b <= begin || b >= layer_count)
            throw config_error("profile boundary " + std::to_string(b) + " out of order or range");
        p.groups.push_back({begin, b});
        begin = b;
    }
    p.groups.push_back({begin, layer_count});
    return p;
}

} // namespace tilegrad
