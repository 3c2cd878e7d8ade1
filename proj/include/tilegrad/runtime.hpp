#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <exception>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "tilegrad/errors.hpp"
#include "tilegrad/geometry.hpp"
#include "tilegrad/grouping.hpp"
#include "tilegrad/model.hpp"
#include "tilegrad/model_io.hpp"
#include "tilegrad/tensor.hpp"
#include "tilegrad/transport.hpp"

namespace tilegrad {

// ===========================================================================
// Distributed training runtime.
//
// Every tile runs the same per-sample cycle: receive its slice of the input,
// execute the forward groups with a halo exchange at each interior group
// input, ship its owned slice of the network output to the coordinator,
// receive its slice of the seeded loss delta back, execute the backward
// groups the same way, and accumulate weight-gradient partials. Once per
// batch the partials are summed on the coordinator in ascending tile order,
// the filters updated and broadcast back out, and every tile acknowledges
// with a checksum of what it installed.
//
// All receives are keyed by (kind, peer, boundary, direction), so results
// are independent of message arrival interleavings and identical across
// transport backends.
// ===========================================================================

/// Fully resolved execution plan for one model on one grid: tile geometry
/// for both passes plus everything the workers need to agree on up front.
struct ExecutionPlan {
    ModelSpec model;
    GridSpec grid;
    TilePlan fwd;
    TilePlan bwd;
    std::vector<MapDims> dims;
    int coordinator = 0;

    int tiles() const { return grid.tiles(); }
    int layers() const { return model.layer_count(); }
};

namespace detail {

/// Delta region a tile actually computes at a map: group anchors carry the
/// bare partition slice, everything else the stored traced requirement.
inline Rect backward_computed_region(const TilePlan& bwd, int tile, int map) {
    for (const Group& g : bwd.profile.groups) {
        if (g.begin_map == map) {
            return bwd.at(tile, map).owned;
        }
    }
    return bwd.at(tile, map).required;
}

/// Region a tile's forward pass computed (and so holds pool indices for) at
/// a map: owned at group outputs, the traced requirement inside groups.
inline Rect forward_computed_region(const TilePlan& fwd, int tile, int map) {
    for (const Group& g : fwd.profile.groups) {
        if (g.end_map == map) {
            return fwd.at(tile, map).owned;
        }
    }
    return fwd.at(tile, map).required;
}

/// Input columns the weight-gradient pass reads for the given output
/// positions: the exact union of the filter taps, before map clipping.
inline Rect weight_patch_span(const Rect& positions, const LayerSpec& layer) {
    return {positions.x1 * layer.stride - layer.pad,
            positions.y1 * layer.stride - layer.pad,
            positions.x2 * layer.stride - layer.pad + layer.kernel - 1,
            positions.y2 * layer.stride - layer.pad + layer.kernel - 1};
}

inline Selector keyed(MessageKind kind, int src, int boundary, Direction direction) {
    Selector s;
    s.kind = kind;
    s.src = src;
    s.boundary = boundary;
    s.direction = direction;
    return s;
}

} // namespace detail

/// The backward pass runs against buffers the forward pass left behind, so
/// not every pair of per-direction groupings can execute. Rejects pairs
/// where some tile would need data it never computed or already discarded.
inline void validate_plan_couplings(const ModelSpec& model, const GridSpec& grid,
                                    const TilePlan& fwd, const TilePlan& bwd,
                                    const std::vector<MapDims>& dims) {
    const int layers = model.layer_count();
    for (int t = 0; t < grid.tiles(); ++t) {
        for (int m = 1; m < layers; ++m) {
            const LayerSpec& producer = model.layers[m - 1];
            if (!producer.is_conv() || producer.activation == Activation::none) {
                continue;
            }
            const Rect need = detail::backward_computed_region(bwd, t, m);
            const Rect have = fwd.at(t, m).required;
            if (!have.contains(need)) {
                throw config_error("tile " + std::to_string(t) + ", map " + std::to_string(m)
                                   + ": the backward pass folds the activation gradient over "
                                   + to_string(need) + " but the forward pass only retains "
                                   + to_string(have)
                                   + "; pick a forward grouping that keeps at least the backward trace");
            }
        }
        for (int l = 0; l < layers; ++l) {
            const LayerSpec& layer = model.layers[l];
            if (layer.is_conv()) {
                const Rect positions = fwd.at(t, l + 1).owned;
                const Rect dhave = bwd.at(t, l + 1).required;
                if (!dhave.contains(positions)) {
                    throw config_error("tile " + std::to_string(t) + ", layer " + std::to_string(l)
                                       + ": the weight gradient needs deltas over " + to_string(positions)
                                       + " but the backward plan only materializes " + to_string(dhave));
                }
                const Rect pneed =
                    detail::weight_patch_span(positions, layer).intersect(full_rect(dims[l]));
                const Rect phave = fwd.at(t, l).required;
                if (!phave.contains(pneed)) {
                    throw config_error("tile " + std::to_string(t) + ", layer " + std::to_string(l)
                                       + ": the weight gradient reads input columns " + to_string(pneed)
                                       + " but the forward pass only retains " + to_string(phave));
                }
            } else {
                const Rect region = detail::backward_computed_region(bwd, t, l);
                const Rect need =
                    forwardtrace_delta_region(region, layer).intersect(full_rect(dims[l + 1]));
                const Rect have = detail::forward_computed_region(fwd, t, l + 1);
                if (!have.contains(need)) {
                    throw config_error("tile " + std::to_string(t) + ", layer " + std::to_string(l)
                                       + ": pool routing needs indices over " + to_string(need)
                                       + " but the forward pass only computed " + to_string(have)
                                       + "; indices are never exchanged");
                }
            }
        }
    }
}

inline ExecutionPlan build_plan(const ModelSpec& model, const GridSpec& grid,
                                const GroupingProfile& fwd_profile,
                                const GroupingProfile& bwd_profile) {
    model.validate();
    if (fwd_profile.direction != Direction::forward) {
        throw config_error("forward profile is tagged with the wrong direction");
    }
    if (bwd_profile.direction != Direction::backward) {
        throw config_error("backward profile is tagged with the wrong direction");
    }
    ExecutionPlan plan;
    plan.model = model;
    plan.grid = grid;
    plan.dims = model.all_map_dims();
    plan.fwd = build_tile_plan(model, grid, fwd_profile);
    plan.bwd = build_tile_plan(model, grid, bwd_profile);
    validate_plan_couplings(model, grid, plan.fwd, plan.bwd, plan.dims);
    return plan;
}

/// Per-tile multiply-accumulate count one pass of one sample performs under
/// a plan, priced with the same formula the grouping cost model uses over
/// the same regions the workers actually compute.
inline std::int64_t planned_macs(const ExecutionPlan& plan, Direction direction, int tile) {
    const TilePlan& tp = direction == Direction::forward ? plan.fwd : plan.bwd;
    std::int64_t total = 0;
    for (const Group& g : tp.profile.groups) {
        for (int l = g.begin_map; l < g.end_map; ++l) {
            const Rect r = (direction == Direction::backward && l == g.begin_map)
                               ? tp.at(tile, l).owned
                               : tp.at(tile, l).required;
            total += mac_count(plan.model.layers[l], r.width(), r.height(),
                               plan.dims[l].depth, plan.dims[l + 1].depth);
        }
    }
    return total;
}

/// Exact payload bytes one sample moves across an interior boundary of a
/// tile plan, summed over tiles (each tile receives required minus owned).
inline std::int64_t planned_halo_bytes(const TilePlan& plan, const std::vector<MapDims>& dims,
                                       int map) {
    std::int64_t total = 0;
    for (int t = 0; t < plan.grid.tiles(); ++t) {
        total += std::int64_t(sizeof(float)) * boundary_elements(plan.at(t, map), dims[map].depth);
    }
    return total;
}

// ---------------------------------------------------------------------------
// Telemetry.
// ---------------------------------------------------------------------------

enum class Phase {
    fwd_compute = 0,
    bwd_compute = 1,
    comm_halo = 2,
    comm_io = 3,
    comm_weights = 4,
    total = 5,
};

constexpr int phase_count = 6;

inline const char* to_string(Phase p) {
    switch (p) {
        case Phase::fwd_compute: return "fwd_compute";
        case Phase::bwd_compute: return "bwd_compute";
        case Phase::comm_halo: return "comm_halo";
        case Phase::comm_io: return "comm_io";
        case Phase::comm_weights: return "comm_weights";
        case Phase::total: return "total";
    }
    return "?";
}

struct PhaseStats {
    std::int64_t wall_ns = 0;
    std::int64_t bytes_halo = 0;
    std::int64_t bytes_weights = 0;
    std::int64_t bytes_scatter = 0;
    std::int64_t msg_count = 0;
    std::int64_t peak_tile_bytes = 0;
};

/// One batch of merged cluster telemetry. Wall times take the slowest tile,
/// byte and message counts sum the send side, peak bytes take the largest
/// tile; the peak is a per-batch property and repeats on every phase row.
struct BatchMetrics {
    int batch = 0;
    double loss = 0;
    std::array<PhaseStats, phase_count> phases{};

    const PhaseStats& at(Phase p) const { return phases[size_t(p)]; }

    std::string record(Phase p) const {
        const PhaseStats& s = phases[size_t(p)];
        std::string out = "metrics batch=" + std::to_string(batch);
        out += " phase=";
        out += to_string(p);
        out += " wall_ns=" + std::to_string(s.wall_ns);
        out += " bytes_halo=" + std::to_string(s.bytes_halo);
        out += " bytes_weights=" + std::to_string(s.bytes_weights);
        out += " bytes_scatter=" + std::to_string(s.bytes_scatter);
        out += " msg_count=" + std::to_string(s.msg_count);
        out += " peak_tile_bytes=" + std::to_string(s.peak_tile_bytes);
        return out;
    }

    std::vector<std::string> records() const {
        std::vector<std::string> out;
        out.reserve(phase_count);
        for (int p = 0; p < phase_count; ++p) {
            out.push_back(record(Phase(p)));
        }
        return out;
    }
};

/// Raw counters one tile gathers over one batch, before merging.
struct TileBatchStats {
    std::array<std::int64_t, phase_count> wall_ns{};
    std::int64_t bytes_halo = 0;
    std::int64_t bytes_weights = 0;
    std::int64_t bytes_scatter = 0;
    std::int64_t msgs_halo = 0;
    std::int64_t msgs_io = 0;
    std::int64_t msgs_weights = 0;
    std::int64_t peak_bytes = 0;
    double loss = 0;
};

namespace detail {

class ScopedPhase {
public:
    ScopedPhase(TileBatchStats& stats, Phase phase)
        : stats_(stats), phase_(phase), start_(std::chrono::steady_clock::now()) {}
    ScopedPhase(const ScopedPhase&) = delete;
    ScopedPhase& operator=(const ScopedPhase&) = delete;
    ~ScopedPhase() {
        stats_.wall_ns[size_t(phase_)] += std::chrono::duration_cast<std::chrono::nanoseconds>(
                                              std::chrono::steady_clock::now() - start_)
                                              .count();
    }

private:
    TileBatchStats& stats_;
    Phase phase_;
    std::chrono::steady_clock::time_point start_;
};

} // namespace detail

// ---------------------------------------------------------------------------
// Tile worker.
// ---------------------------------------------------------------------------

/// Copies a rectangle out of a full map into a standalone tile buffer.
inline TileBuffer<float> region_of(const Tensor<float>& t, const Rect& r) {
    TileBuffer<float> buf(r, t.depth);
    for (int c = 0; c < t.depth; ++c) {
        for (int y = r.y1; y <= r.y2; ++y) {
            for (int x = r.x1; x <= r.x2; ++x) {
                buf.at(x, y, c) = t.at(x, y, c);
            }
        }
    }
    return buf;
}

/// Writes a tile buffer back into the map region it covers.
inline void paste_region(Tensor<float>& t, const TileBuffer<float>& buf) {
    for (int c = 0; c < t.depth; ++c) {
        for (int y = buf.rect.y1; y <= buf.rect.y2; ++y) {
            for (int x = buf.rect.x1; x <= buf.rect.x2; ++x) {
                t.at(x, y, c) = buf.at(x, y, c);
            }
        }
    }
}

/// Turns a received message into a tile buffer after checking that the peer
/// sent exactly the region the local plan expects. A mismatch means the two
/// sides disagree about the plan itself.
inline TileBuffer<float> accept_region(Message m, const Rect& rect, int depth, const char* what) {
    if (m.rect != rect || m.depth != depth) {
        throw plan_error(std::string(what) + " from tile " + std::to_string(m.src) + " covers "
                         + to_string(m.rect) + " x" + std::to_string(m.depth) + ", plan expects "
                         + to_string(rect) + " x" + std::to_string(depth));
    }
    TileBuffer<float> buf(rect, depth);
    buf.data = std::move(m.payload);
    return buf;
}

/// One tile's training endpoint: holds the full filter set plus the per-map
/// activation, pool-index, and delta slices for its partition, and drives
/// the per-sample protocol against a transport endpoint.
class TileWorker {
public:
    struct BatchData {
        std::vector<Tensor<float>> samples;
        std::vector<Tensor<float>> targets;
    };

    TileWorker(const ExecutionPlan& plan, Transport& link, std::vector<FilterBank<float>> banks)
        : plan_(&plan), link_(&link), tile_(link.tile_id()), banks_(std::move(banks)) {
        check_weights_match(plan.model, banks_);
        const int maps = plan.model.map_count();
        acts_.resize(maps);
        idx_.resize(maps);
        deltas_.resize(maps);
    }

    /// Runs one batch. Only the coordinator passes sample data; every other
    /// tile is driven by the incoming scatters and must agree on the batch
    /// size out of band.
    TileBatchStats train_batch(int batch, float learning_rate, const BatchData* data) {
        if (batch < 1) {
            throw config_error("batch size must be at least 1");
        }
        const bool coord = tile_ == plan_->coordinator;
        if (coord) {
            if (data == nullptr || int(data->samples.size()) != batch
                || data->targets.size() != data->samples.size()) {
                throw shape_error("coordinator batch data does not match the batch size");
            }
        }
        stats_ = TileBatchStats{};
        const auto start = std::chrono::steady_clock::now();
        for (auto& bank : banks_) {
            bank.zero_grads();
        }
        for (int s = 0; s < batch; ++s) {
            run_sample(coord, data, s);
        }
        aggregate_and_update(coord, learning_rate, batch);
        stats_.wall_ns[size_t(Phase::total)] =
            std::chrono::duration_cast<std::chrono::nanoseconds>(std::chrono::steady_clock::now()
                                                                 - start)
                .count();
        stats_.peak_bytes = peak_bytes_;
        return stats_;
    }

    int tile() const { return tile_; }
    const std::vector<FilterBank<float>>& banks() const { return banks_; }
    std::int64_t macs_forward() const { return macs_fwd_; }
    std::int64_t macs_backward() const { return macs_bwd_; }
    std::int64_t macs_weight_grad() const { return macs_wgrad_; }
    std::int64_t peak_retained_bytes() const { return peak_bytes_; }

private:
    void run_sample(bool coord, const BatchData* data, int sample) {
        scatter_input(coord, data, sample);

        const auto& fwd_groups = plan_->fwd.profile.groups;
        for (size_t gi = 0; gi < fwd_groups.size(); ++gi) {
            const Group& g = fwd_groups[gi];
            const PlanBoundary& boundary = plan_->fwd.boundaries[gi];
            if (!boundary.via_scatter) {
                exchange_halo(acts_, boundary, Direction::forward);
            }
            detail::ScopedPhase timer(stats_, Phase::fwd_compute);
            for (int l = g.begin_map; l < g.end_map; ++l) {
                forward_layer(l, l + 1 == g.end_map);
            }
        }

        seed_output_delta(coord, data, sample);

        const auto& bwd_groups = plan_->bwd.profile.groups;
        for (size_t gi = bwd_groups.size(); gi-- > 0;) {
            const Group& g = bwd_groups[gi];
            const PlanBoundary& boundary = plan_->bwd.boundaries[gi];
            if (!boundary.via_scatter) {
                exchange_halo(deltas_, boundary, Direction::backward);
            }
            detail::ScopedPhase timer(stats_, Phase::bwd_compute);
            for (int l = g.end_map - 1; l >= g.begin_map; --l) {
                backward_layer(l, l == g.begin_map);
            }
        }
    }

    void scatter_input(bool coord, const BatchData* data, int sample) {
        detail::ScopedPhase timer(stats_, Phase::comm_io);
        const int depth = plan_->dims[0].depth;
        if (coord) {
            const Tensor<float>& in = data->samples[sample];
            if (in.width != plan_->model.input.width || in.height != plan_->model.input.height
                || in.depth != plan_->model.input.depth) {
                throw shape_error("sample " + std::to_string(sample)
                                  + " does not match the model input dimensions");
            }
            for (int t = 0; t < plan_->tiles(); ++t) {
                const Rect r = plan_->fwd.at(t, 0).required;
                if (t == tile_) {
                    set_buffer(acts_[0], region_of(in, r));
                    continue;
                }
                Message m;
                m.kind = MessageKind::input_scatter;
                m.direction = Direction::forward;
                m.dst = t;
                m.boundary = 0;
                m.rect = r;
                m.depth = depth;
                m.payload = std::move(region_of(in, r).data);
                send_counted(std::move(m));
            }
        } else {
            Message m = link_->recv_matching(detail::keyed(MessageKind::input_scatter,
                                                           plan_->coordinator, 0,
                                                           Direction::forward));
            set_buffer(acts_[0], accept_region(std::move(m), plan_->fwd.at(tile_, 0).required,
                                               depth, "input scatter"));
        }
    }

    /// Gathers the network output on the coordinator, computes the loss and
    /// its gradient there, and hands every tile its slice of the seed delta.
    void seed_output_delta(bool coord, const BatchData* data, int sample) {
        const int last = plan_->layers();
        const int depth = plan_->dims[last].depth;
        if (coord) {
            Tensor<float> out(plan_->dims[last]);
            {
                detail::ScopedPhase timer(stats_, Phase::comm_io);
                paste_region(out, acts_[last]);
                for (int src = 0; src < plan_->tiles(); ++src) {
                    if (src == tile_) {
                        continue;
                    }
                    Message m = link_->recv_matching(detail::keyed(
                        MessageKind::delta_scatter, src, last, Direction::forward));
                    paste_region(out, accept_region(std::move(m), plan_->fwd.at(src, last).owned,
                                                    depth, "output gather"));
                }
            }
            Tensor<float> seed(plan_->dims[last]);
            {
                detail::ScopedPhase timer(stats_, Phase::bwd_compute);
                const Tensor<float>& target = data->targets[sample];
                if (target.width != out.width || target.height != out.height
                    || target.depth != out.depth) {
                    throw shape_error("target " + std::to_string(sample)
                                      + " does not match the network output dimensions");
                }
                stats_.loss += sum_square_loss(out, target);
                for (size_t i = 0; i < out.data.size(); ++i) {
                    seed.data[i] = out.data[i] - target.data[i];
                }
                if (plan_->model.layers[last - 1].is_conv()) {
                    apply_activation_gradient(seed, out, plan_->model.layers[last - 1]);
                }
            }
            {
                detail::ScopedPhase timer(stats_, Phase::comm_io);
                for (int t = 0; t < plan_->tiles(); ++t) {
                    const Rect r = plan_->bwd.at(t, last).required;
                    if (t == tile_) {
                        set_buffer(deltas_[last], region_of(seed, r));
                        continue;
                    }
                    Message m;
                    m.kind = MessageKind::delta_scatter;
                    m.direction = Direction::backward;
                    m.dst = t;
                    m.boundary = last;
                    m.rect = r;
                    m.depth = depth;
                    m.payload = std::move(region_of(seed, r).data);
                    send_counted(std::move(m));
                }
            }
        } else {
            detail::ScopedPhase timer(stats_, Phase::comm_io);
            Message up;
            up.kind = MessageKind::delta_scatter;
            up.direction = Direction::forward;
            up.dst = plan_->coordinator;
            up.boundary = last;
            up.rect = plan_->fwd.at(tile_, last).owned;
            up.depth = depth;
            up.payload = std::move(acts_[last].slice(up.rect).data);
            send_counted(std::move(up));
            Message down = link_->recv_matching(detail::keyed(
                MessageKind::delta_scatter, plan_->coordinator, last, Direction::backward));
            set_buffer(deltas_[last], accept_region(std::move(down),
                                                    plan_->bwd.at(tile_, last).required, depth,
                                                    "delta scatter"));
        }
    }

    void forward_layer(int l, bool at_group_output) {
        const LayerSpec& layer = plan_->model.layers[l];
        const TilePlanEntry& out_entry = plan_->fwd.at(tile_, l + 1);
        const Rect out_r = at_group_output ? out_entry.owned : out_entry.required;
        const TileBuffer<float>& in = acts_[l];
        if (in.rect != plan_->fwd.at(tile_, l).required) {
            throw plan_error("tile " + std::to_string(tile_) + ", map " + std::to_string(l)
                             + ": forward buffer drifted from the plan");
        }
        macs_fwd_ += mac_count(layer, in.rect.width(), in.rect.height(), plan_->dims[l].depth,
                               plan_->dims[l + 1].depth);
        if (layer.is_conv()) {
            set_buffer(acts_[l + 1],
                       conv_forward_region(in, plan_->dims[l], banks_[l], layer, out_r));
        } else {
            auto result = maxpool_forward_region(in, layer, out_r);
            set_buffer(acts_[l + 1], std::move(result.first));
            set_buffer(idx_[l + 1], std::move(result.second));
        }
    }

    void backward_layer(int l, bool at_group_anchor) {
        const LayerSpec& layer = plan_->model.layers[l];
        const TileBuffer<float>& dout = deltas_[l + 1];
        if (dout.rect != plan_->bwd.at(tile_, l + 1).required) {
            throw plan_error("tile " + std::to_string(tile_) + ", map " + std::to_string(l + 1)
                             + ": backward buffer drifted from the plan");
        }
        const TilePlanEntry& entry = plan_->bwd.at(tile_, l);
        const Rect out_r = at_group_anchor ? entry.owned : entry.required;
        macs_bwd_ += mac_count(layer, out_r.width(), out_r.height(), plan_->dims[l].depth,
                               plan_->dims[l + 1].depth);
        TileBuffer<float> next;
        if (layer.is_conv()) {
            const Rect positions = plan_->fwd.at(tile_, l + 1).owned;
            macs_wgrad_ += std::int64_t(positions.area()) * layer.kernel * layer.kernel
                           * plan_->dims[l].depth * plan_->dims[l + 1].depth;
            conv_backward_weights_region(acts_[l], plan_->dims[l], dout, banks_[l], layer,
                                         positions);
            next = conv_backward_delta_region(dout, plan_->dims[l + 1], banks_[l], layer, out_r);
        } else {
            next = maxpool_backward_region(dout, plan_->dims[l + 1], idx_[l + 1], layer, out_r);
        }
        if (l > 0 && plan_->model.layers[l - 1].is_conv()) {
            apply_activation_gradient_region(next, acts_[l], plan_->model.layers[l - 1]);
        }
        set_buffer(deltas_[l], std::move(next));
    }

    /// Sends this tile's owned fringe to every neighbor listed in the plan's
    /// schedule and grows the boundary buffer to the traced requirement.
    void exchange_halo(std::vector<TileBuffer<float>>& bufs, const PlanBoundary& boundary,
                       Direction direction) {
        detail::ScopedPhase timer(stats_, Phase::comm_halo);
        const int map = boundary.map;
        const int depth = plan_->dims[map].depth;
        const TilePlan& plan = direction == Direction::forward ? plan_->fwd : plan_->bwd;
        const HaloSchedule& sched = boundary.tiles[tile_];
        TileBuffer<float>& cur = bufs[map];
        if (cur.rect != plan.at(tile_, map).owned) {
            throw plan_error("tile " + std::to_string(tile_) + ", map " + std::to_string(map)
                             + ": boundary buffer is not the owned slice");
        }
        for (const HaloBlock& block : sched.sends) {
            Message m;
            m.kind = MessageKind::halo_block;
            m.direction = direction;
            m.dst = block.peer;
            m.boundary = map;
            m.rect = block.rect;
            m.depth = depth;
            m.payload = std::move(cur.slice(block.rect).data);
            send_counted(std::move(m));
        }
        TileBuffer<float> merged(plan.at(tile_, map).required, depth);
        merged.blit(cur);
        for (const HaloBlock& block : sched.recvs) {
            Message m = link_->recv_matching(
                detail::keyed(MessageKind::halo_block, block.peer, map, direction));
            merged.blit(accept_region(std::move(m), block.rect, depth, "halo exchange"));
        }
        set_buffer(bufs[map], std::move(merged));
    }

    /// Batch finish: partial sums flow to the coordinator, the update runs
    /// there, and the refreshed filters come back. Ascending-tile summation
    /// keeps the result independent of arrival order; the checksum handshake
    /// catches any replica that installed different bytes.
    void aggregate_and_update(bool coord, float learning_rate, int batch) {
        detail::ScopedPhase timer(stats_, Phase::comm_weights);
        const int tiles = plan_->tiles();
        if (coord) {
            for (int src = 0; src < tiles; ++src) {
                if (src == tile_) {
                    continue;
                }
                Message m = link_->recv_matching(
                    detail::keyed(MessageKind::partial_grad, src, 0, Direction::backward));
                add_gradients(m.payload, src);
            }
            sgd_update(banks_, learning_rate, batch);
            const std::vector<float> weights = serialize(false);
            const std::uint32_t sum = weights_checksum(weights);
            for (int dst = 0; dst < tiles; ++dst) {
                if (dst == tile_) {
                    continue;
                }
                Message m;
                m.kind = MessageKind::weight_broadcast;
                m.direction = Direction::forward;
                m.dst = dst;
                m.boundary = 0;
                m.payload = weights;
                send_counted(std::move(m));
            }
            for (int src = 0; src < tiles; ++src) {
                if (src == tile_) {
                    continue;
                }
                Message ack = link_->recv_matching(
                    detail::keyed(MessageKind::control, src, 0, Direction::forward));
                if (std::uint32_t(ack.rect.x1) != sum) {
                    throw consistency_error("tile " + std::to_string(src)
                                            + " installed weights with checksum "
                                            + std::to_string(std::uint32_t(ack.rect.x1))
                                            + ", coordinator has " + std::to_string(sum));
                }
            }
        } else {
            Message up;
            up.kind = MessageKind::partial_grad;
            up.direction = Direction::backward;
            up.dst = plan_->coordinator;
            up.boundary = 0;
            up.payload = serialize(true);
            send_counted(std::move(up));
            for (auto& bank : banks_) {
                bank.zero_grads();
            }
            Message down = link_->recv_matching(detail::keyed(
                MessageKind::weight_broadcast, plan_->coordinator, 0, Direction::forward));
            install_weights(down.payload);
            Message ack;
            ack.kind = MessageKind::control;
            ack.direction = Direction::forward;
            ack.dst = plan_->coordinator;
            ack.boundary = 0;
            ack.rect = {int(weights_checksum(down.payload)), 0, 0, 0};
            send_counted(std::move(ack));
        }
    }

    std::int64_t weight_elements() const {
        std::int64_t n = 0;
        for (const auto& bank : banks_) {
            n += std::int64_t(bank.weights.size());
        }
        return n;
    }

    std::vector<float> serialize(bool gradients) const {
        std::vector<float> out;
        out.reserve(size_t(weight_elements()));
        for (const auto& bank : banks_) {
            const auto& src = gradients ? bank.grads : bank.weights;
            out.insert(out.end(), src.begin(), src.end());
        }
        return out;
    }

    void add_gradients(const std::vector<float>& payload, int src) {
        if (std::int64_t(payload.size()) != weight_elements()) {
            throw consistency_error("partial gradients from tile " + std::to_string(src)
                                    + " hold " + std::to_string(payload.size())
                                    + " elements, expected " + std::to_string(weight_elements()));
        }
        size_t at = 0;
        for (auto& bank : banks_) {
            for (auto& g : bank.grads) {
                g += payload[at++];
            }
        }
    }

    void install_weights(const std::vector<float>& payload) {
        if (std::int64_t(payload.size()) != weight_elements()) {
            throw consistency_error("weight broadcast holds " + std::to_string(payload.size())
                                    + " elements, expected " + std::to_string(weight_elements()));
        }
        size_t at = 0;
        for (auto& bank : banks_) {
            for (auto& w : bank.weights) {
                w = payload[at++];
            }
        }
    }

    static std::uint32_t weights_checksum(const std::vector<float>& weights) {
        std::vector<std::uint8_t> bytes(weights.size() * 4);
        for (size_t i = 0; i < weights.size(); ++i) {
            std::uint32_t bits = 0;
            std::memcpy(&bits, &weights[i], 4);
            bytes[4 * i + 0] = std::uint8_t(bits & 0xFF);
            bytes[4 * i + 1] = std::uint8_t((bits >> 8) & 0xFF);
            bytes[4 * i + 2] = std::uint8_t((bits >> 16) & 0xFF);
            bytes[4 * i + 3] = std::uint8_t((bits >> 24) & 0xFF);
        }
        return crc32(bytes.data(), bytes.size());
    }

    void send_counted(Message m) {
        const std::int64_t bytes = std::int64_t(m.payload_bytes());
        switch (m.kind) {
            case MessageKind::halo_block:
                stats_.bytes_halo += bytes;
                ++stats_.msgs_halo;
                break;
            case MessageKind::input_scatter:
            case MessageKind::delta_scatter:
                stats_.bytes_scatter += bytes;
                ++stats_.msgs_io;
                break;
            case MessageKind::partial_grad:
            case MessageKind::weight_broadcast:
                stats_.bytes_weights += bytes;
                ++stats_.msgs_weights;
                break;
            case MessageKind::control:
                ++stats_.msgs_weights;
                break;
        }
        link_->send(std::move(m));
    }

    /// Buffer writes funnel through here so the retained-byte high-water
    /// mark tracks every replacement. Scratch copies inside an exchange are
    /// deliberately not counted; the mark measures what a tile keeps.
    template <typename T>
    void set_buffer(TileBuffer<T>& slot, TileBuffer<T> value) {
        cur_bytes_ += std::int64_t(value.bytes()) - std::int64_t(slot.bytes());
        slot = std::move(value);
        peak_bytes_ = std::max(peak_bytes_, cur_bytes_);
    }

    const ExecutionPlan* plan_;
    Transport* link_;
    int tile_;
    std::vector<FilterBank<float>> banks_;
    std::vector<TileBuffer<float>> acts_;
    std::vector<TileBuffer<PoolIdx>> idx_;
    std::vector<TileBuffer<float>> deltas_;
    TileBatchStats stats_;
    std::int64_t macs_fwd_ = 0;
    std::int64_t macs_bwd_ = 0;
    std::int64_t macs_wgrad_ = 0;
    std::int64_t cur_bytes_ = 0;
    std::int64_t peak_bytes_ = 0;
};

// ---------------------------------------------------------------------------
// Cluster driver.
// ---------------------------------------------------------------------------

/// Mixes a stream seed with a counter into an independent-looking seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t n) {
    std::uint64_t x = seed + 0x9E3779B97F4A7C15ull * (n + 1);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ull;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBull;
    x ^= x >> 31;
    return x;
}

/// Deterministic synthetic batch: sample i of step k draws its input and
/// target from seeds mixed with the global sample index, so the stream does
/// not depend on how it is chopped into batches.
inline TileWorker::BatchData synthetic_batch(const ModelSpec& model, std::uint64_t seed, int step,
                                             int batch) {
    TileWorker::BatchData data;
    const MapDims in = model.input;
    const MapDims out = model.all_map_dims().back();
    for (int i = 0; i < batch; ++i) {
        const std::uint64_t n = std::uint64_t(step) * std::uint64_t(batch) + std::uint64_t(i);
        data.samples.push_back(synth_sample(in, mix_seed(seed, 2 * n)));
        data.targets.push_back(synth_sample(out, mix_seed(seed, 2 * n + 1)));
    }
    return data;
}

struct TrainConfig {
    int batch = 1;
    int steps = 1;
    float learning_rate = 0.05f;
    std::uint64_t seed = 1;

    void validate() const {
        if (batch < 1) {
            throw config_error("batch size must be at least 1");
        }
        if (steps < 1) {
            throw config_error("step count must be at least 1");
        }
    }
};

/// Folds per-tile batch counters into one metrics record: slowest tile per
/// phase, send-side byte/message sums, largest per-tile peak. `loss_from`
/// names the entry whose loss to carry (the coordinator's), or -1 when the
/// merging process does not host the coordinator.
inline BatchMetrics merge_batch_stats(int index, const std::vector<TileBatchStats>& per,
                                      int loss_from) {
    BatchMetrics m;
    m.batch = index;
    m.loss = loss_from >= 0 ? per[size_t(loss_from)].loss : 0;
    std::int64_t bytes_halo = 0, bytes_weights = 0, bytes_scatter = 0;
    std::int64_t msgs_halo = 0, msgs_io = 0, msgs_weights = 0;
    std::int64_t peak = 0;
    for (const TileBatchStats& t : per) {
        for (int p = 0; p < phase_count; ++p) {
            m.phases[size_t(p)].wall_ns = std::max(m.phases[size_t(p)].wall_ns, t.wall_ns[size_t(p)]);
        }
        bytes_halo += t.bytes_halo;
        bytes_weights += t.bytes_weights;
        bytes_scatter += t.bytes_scatter;
        msgs_halo += t.msgs_halo;
        msgs_io += t.msgs_io;
        msgs_weights += t.msgs_weights;
        peak = std::max(peak, t.peak_bytes);
    }
    m.phases[size_t(Phase::comm_halo)].bytes_halo = bytes_halo;
    m.phases[size_t(Phase::comm_halo)].msg_count = msgs_halo;
    m.phases[size_t(Phase::comm_io)].bytes_scatter = bytes_scatter;
    m.phases[size_t(Phase::comm_io)].msg_count = msgs_io;
    m.phases[size_t(Phase::comm_weights)].bytes_weights = bytes_weights;
    m.phases[size_t(Phase::comm_weights)].msg_count = msgs_weights;
    PhaseStats& total = m.phases[size_t(Phase::total)];
    total.bytes_halo = bytes_halo;
    total.bytes_weights = bytes_weights;
    total.bytes_scatter = bytes_scatter;
    total.msg_count = msgs_halo + msgs_io + msgs_weights;
    for (int p = 0; p < phase_count; ++p) {
        m.phases[size_t(p)].peak_tile_bytes = peak;
    }
    return m;
}

/// Runs every worker of one process for one batch: the first on the calling
/// thread, the rest on their own threads. `data` reaches the worker whose
/// tile is `coordinator`; exceptions rethrow in ascending worker order.
inline std::vector<TileBatchStats> train_batch_hosted(std::vector<TileWorker>& workers,
                                                      int batch, float learning_rate,
                                                      const TileWorker::BatchData* data,
                                                      int coordinator) {
    const size_t n = workers.size();
    std::vector<TileBatchStats> per(n);
    std::vector<std::exception_ptr> errors(n);
    std::vector<std::thread> threads;
    threads.reserve(n - 1);
    auto run_one = [&](size_t i) {
        try {
            const TileWorker::BatchData* d =
                workers[i].tile() == coordinator ? data : nullptr;
            per[i] = workers[i].train_batch(batch, learning_rate, d);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };
    for (size_t i = 1; i < n; ++i) {
        threads.emplace_back(run_one, i);
    }
    run_one(0);
    for (auto& th : threads) {
        th.join();
    }
    for (size_t i = 0; i < n; ++i) {
        if (errors[i]) {
            std::rethrow_exception(errors[i]);
        }
    }
    return per;
}

/// Runs a whole grid in one process: one worker per tile over an in-process
/// transport, the coordinator on the calling thread and every other tile on
/// its own thread for the duration of a batch.
class Cluster {
public:
    Cluster(ExecutionPlan plan, const std::vector<FilterBank<float>>& banks,
            std::chrono::milliseconds timeout = std::chrono::seconds(30))
        : plan_(std::move(plan)), net_(plan_.tiles(), timeout) {
        workers_.reserve(size_t(plan_.tiles()));
        for (int t = 0; t < plan_.tiles(); ++t) {
            workers_.emplace_back(plan_, net_.endpoint(t), banks);
        }
    }

    BatchMetrics train_batch(int index, const TileWorker::BatchData& data, float learning_rate) {
        const int batch = int(data.samples.size());
        const auto per =
            train_batch_hosted(workers_, batch, learning_rate, &data, plan_.coordinator);
        net_.quiesce();
        return merge_batch_stats(index, per, plan_.coordinator);
    }

    /// Trains on the deterministic synthetic stream.
    std::vector<BatchMetrics> run(const TrainConfig& cfg) {
        cfg.validate();
        std::vector<BatchMetrics> out;
        out.reserve(size_t(cfg.steps));
        for (int step = 0; step < cfg.steps; ++step) {
            const TileWorker::BatchData data =
                synthetic_batch(plan_.model, cfg.seed, step, cfg.batch);
            out.push_back(train_batch(step, data, cfg.learning_rate));
        }
        return out;
    }

    const ExecutionPlan& plan() const { return plan_; }
    InProcNetwork& net() { return net_; }
    TileWorker& worker(int tile) { return workers_[size_t(tile)]; }
    const std::vector<FilterBank<float>>& weights(int tile) const {
        return workers_[size_t(tile)].banks();
    }

private:
    ExecutionPlan plan_;
    InProcNetwork net_;
    std::vector<TileWorker> workers_;
};

// ---------------------------------------------------------------------------
// Verification against the single-machine trainer.
// ---------------------------------------------------------------------------

/// Reference semantics for one batch: per-sample full-map training steps
/// with the same averaged update the cluster applies. Returns the batch loss.
inline double oracle_train_batch(const ModelSpec& model, std::vector<FilterBank<float>>& banks,
                                 const TileWorker::BatchData& data, float learning_rate) {
    double loss = 0;
    for (size_t i = 0; i < data.samples.size(); ++i) {
        loss += reference_train_step(model, banks, data.samples[i], data.targets[i]).loss;
    }
    sgd_update(banks, learning_rate, int(data.samples.size()));
    return loss;
}

/// Largest error-to-tolerance ratio across all filter weights; a value at
/// or below 1 means everything is inside rel*|reference| + abs.
inline double weight_margin(const std::vector<FilterBank<float>>& got,
                            const std::vector<FilterBank<float>>& want, double rel, double abs) {
    if (got.size() != want.size()) {
        throw shape_error("filter bank counts differ");
    }
    double worst = 0;
    for (size_t l = 0; l < got.size(); ++l) {
        if (got[l].weights.size() != want[l].weights.size()) {
            throw shape_error("filter bank " + std::to_string(l) + " shapes differ");
        }
        for (size_t i = 0; i < got[l].weights.size(); ++i) {
            const double a = double(got[l].weights[i]);
            const double b = double(want[l].weights[i]);
            const double err = a > b ? a - b : b - a;
            const double mag = b > 0 ? b : -b;
            worst = std::max(worst, err / (rel * mag + abs));
        }
    }
    return worst;
}

/// A matched pair of per-direction groupings with a display name.
struct ProfilePair {
    std::string name;
    GroupingProfile fwd;
    GroupingProfile bwd;
};

/// Draws random mirrored group boundaries until a pair is feasible for the
/// grid. Deterministic in (seed, attempt); gives up after 64 rerolls.
inline ProfilePair seeded_profile_pair(const ModelSpec& model, const GridSpec& grid,
                                       std::uint64_t seed) {
    const int layers = model.layer_count();
    for (std::uint64_t attempt = 0; attempt < 64; ++attempt) {
        std::uint64_t state = mix_seed(seed, attempt);
        std::vector<int> cuts;
        for (int m = 1; m < layers; ++m) {
            if (synth_next(state) >> 63) {
                cuts.push_back(m);
            }
        }
        try {
            ProfilePair pair;
            pair.name = "seeded";
            pair.fwd = profile_from_boundaries(layers, cuts, Direction::forward);
            pair.bwd = profile_from_boundaries(layers, cuts, Direction::backward);
            build_plan(model, grid, pair.fwd, pair.bwd);
            return pair;
        } catch (const error&) {
        }
    }
    throw config_error("no feasible random grouping found for grid " + to_string(grid));
}

/// The grouping pairs every verification sweep exercises: the two extremes
/// plus one random feasible cut set.
inline std::vector<ProfilePair> standard_profiles(const ModelSpec& model, const GridSpec& grid,
                                                  std::uint64_t seed) {
    const int layers = model.layer_count();
    std::vector<ProfilePair> out;
    out.push_back({"per-layer", per_layer_profile(layers, Direction::forward),
                   per_layer_profile(layers, Direction::backward)});
    out.push_back({"single-group", single_group_profile(layers, Direction::forward),
                   single_group_profile(layers, Direction::backward)});
    out.push_back(seeded_profile_pair(model, grid, seed));
    return out;
}

struct VerifyOptions {
    std::vector<GridSpec> grids = {{1, 1}, {1, 2}, {2, 2}, {2, 3}, {3, 3}};
    std::vector<int> batches = {1, 4};
    float learning_rate = 0.05f;
    std::uint64_t seed = 1;
    double rel = 1e-5;
    double abs = 1e-7;
    std::chrono::milliseconds timeout = std::chrono::seconds(30);
};

struct VerifyCase {
    GridSpec grid{1, 1};
    std::string profile;
    int batch = 1;
    bool pass = false;
    double worst_margin = 0;
    std::string note;

    std::string record() const {
        std::string out = "verify grid=" + std::to_string(grid.rows) + "x"
                          + std::to_string(grid.cols) + " profile=" + profile
                          + " batch=" + std::to_string(batch)
                          + " margin=" + std::to_string(worst_margin)
                          + " status=" + (pass ? "pass" : "FAIL");
        if (!note.empty()) {
            out += " note=\"" + note + "\"";
        }
        return out;
    }
};

/// Trains one batch per (grid, grouping, batch size) combination and checks
/// every tile's post-batch weights against the single-machine trainer.
inline std::vector<VerifyCase> run_verify(const ModelSpec& model, const VerifyOptions& opt) {
    std::vector<VerifyCase> out;
    for (const GridSpec& grid : opt.grids) {
        for (const ProfilePair& pp : standard_profiles(model, grid, opt.seed)) {
            for (int batch : opt.batches) {
                VerifyCase vc;
                vc.grid = grid;
                vc.profile = pp.name;
                vc.batch = batch;
                try {
                    ExecutionPlan plan = build_plan(model, grid, pp.fwd, pp.bwd);
                    const auto banks = synth_banks(model, opt.seed);
                    Cluster cluster(std::move(plan), banks, opt.timeout);
                    const auto data = synthetic_batch(model, opt.seed, 0, batch);
                    cluster.train_batch(0, data, opt.learning_rate);
                    auto want = banks;
                    oracle_train_batch(model, want, data, opt.learning_rate);
                    double worst = 0;
                    for (int t = 0; t < grid.tiles(); ++t) {
                        worst = std::max(worst,
                                         weight_margin(cluster.weights(t), want, opt.rel, opt.abs));
                    }
                    vc.worst_margin = worst;
                    vc.pass = worst <= 1.0;
                } catch (const error& e) {
                    vc.pass = false;
                    vc.note = e.what();
                }
                out.push_back(vc);
            }
        }
    }
    return out;
}

} // namespace tilegrad
