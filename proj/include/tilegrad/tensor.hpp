#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "tilegrad/errors.hpp"
#include "tilegrad/geometry.hpp"
#include "tilegrad/model.hpp"

namespace tilegrad {

// ===========================================================================
// Dense tensors, filter banks, and the convolution / pooling kernels.
//
// All kernels run over explicit output rectangles in global map coordinates,
// so the same inner loops serve both the whole-map reference path and the
// haloed tile path. Accumulation order is fixed (outer spatial row-major,
// inner channel -> kernel-row -> kernel-column), which makes results
// reproducible and keeps the tiled forward bit-identical to the reference.
//
// Scalar type is a template parameter; the product runs float, the gradient
// oracles instantiate double.
// ===========================================================================

/// Whole feature map, channel-major storage: element (x, y, c) lives at
/// data[(c*height + y)*width + x].
template <typename T>
struct Tensor {
    int width = 0;
    int height = 0;
    int depth = 0;
    std::vector<T> data;

    Tensor() = default;
    Tensor(int w, int h, int d) : width(w), height(h), depth(d), data(size_t(w) * h * d, T(0)) {}
    explicit Tensor(const MapDims& m) : Tensor(m.width, m.height, m.depth) {}

    MapDims dims() const { return {width, height, depth}; }
    size_t index(int x, int y, int c) const {
        assert(x >= 0 && x < width && y >= 0 && y < height && c >= 0 && c < depth);
        return (size_t(c) * height + y) * width + x;
    }
    T at(int x, int y, int c) const { return data[index(x, y, c)]; }
    T& at(int x, int y, int c) { return data[index(x, y, c)]; }
};

/// Rectangular slice of a map, in global coordinates. Same channel-major
/// layout as Tensor but offset by the rect origin.
template <typename T>
struct TileBuffer {
    Rect rect;
    int depth = 0;
    std::vector<T> data;

    TileBuffer() = default;
    TileBuffer(const Rect& r, int d)
        : rect(r), depth(d), data(size_t(r.area()) * d, T(0)) {
        assert(!r.empty());
    }

    std::int64_t elements() const { return rect.area() * depth; }
    std::int64_t bytes() const { return elements() * std::int64_t(sizeof(T)); }

    size_t index(int x, int y, int c) const {
        assert(rect.contains(x, y) && c >= 0 && c < depth);
        return (size_t(c) * rect.height() + (y - rect.y1)) * rect.width() + (x - rect.x1);
    }
    T at(int x, int y, int c) const { return data[index(x, y, c)]; }
    T& at(int x, int y, int c) { return data[index(x, y, c)]; }

    /// Copy every element of `src` that falls inside this buffer's rect.
    void blit(const TileBuffer<T>& src) {
        Rect overlap = rect.intersect(src.rect);
        if (overlap.empty()) return;
        assert(depth == src.depth);
        for (int c = 0; c < depth; ++c)
            for (int y = overlap.y1; y <= overlap.y2; ++y)
                for (int x = overlap.x1; x <= overlap.x2; ++x)
                    at(x, y, c) = src.at(x, y, c);
    }

    /// New buffer holding this buffer's values over `sub` (must be covered).
    TileBuffer<T> slice(const Rect& sub) const {
        assert(rect.contains(sub));
        TileBuffer<T> out(sub, depth);
        out.blit(*this);
        return out;
    }
};

template <typename T>
TileBuffer<T> as_buffer(Tensor<T>&& t) {
    TileBuffer<T> b;
    b.rect = full_rect(t.dims());
    b.depth = t.depth;
    b.data = std::move(t.data);
    return b;
}

template <typename T>
TileBuffer<T> as_buffer(const Tensor<T>& t) {
    TileBuffer<T> b;
    b.rect = full_rect(t.dims());
    b.depth = t.depth;
    b.data = t.data;
    return b;
}

template <typename T>
Tensor<T> to_tensor(TileBuffer<T>&& b) {
    assert(b.rect.x1 == 0 && b.rect.y1 == 0);
    Tensor<T> t;
    t.width = b.rect.width();
    t.height = b.rect.height();
    t.depth = b.depth;
    t.data = std::move(b.data);
    return t;
}

/// Convolution filters and their gradient accumulator. Weight (f, c, ky, kx)
/// lives at ((f*in_channels + c)*kernel + ky)*kernel + kx.
template <typename T>
struct FilterBank {
    int kernel = 0;
    int in_channels = 0;
    int out_channels = 0;
    std::vector<T> weights;
    std::vector<T> grads;

    FilterBank() = default;
    FilterBank(int k, int cin, int cout)
        : kernel(k), in_channels(cin), out_channels(cout),
          weights(size_t(k) * k * cin * cout, T(0)),
          grads(size_t(k) * k * cin * cout, T(0)) {}

    size_t index(int f, int c, int ky, int kx) const {
        return ((size_t(f) * in_channels + c) * kernel + ky) * kernel + kx;
    }
    T weight(int f, int c, int ky, int kx) const { return weights[index(f, c, ky, kx)]; }
    T& weight(int f, int c, int ky, int kx) { return weights[index(f, c, ky, kx)]; }
    T& grad(int f, int c, int ky, int kx) { return grads[index(f, c, ky, kx)]; }

    void zero_grads() { grads.assign(grads.size(), T(0)); }
};

/// Argmax position of one pool window, relative to the window origin.
struct PoolIdx {
    std::int16_t row = 0;
    std::int16_t col = 0;
    bool operator==(const PoolIdx&) const = default;
};

template <typename T>
T apply_activation(T v, const LayerSpec& layer) {
    if (layer.activation == Activation::leaky)
        return v > T(0) ? v : T(layer.leaky_slope) * v;
    return v;
}

/// Derivative of the layer's activation, evaluated from its OUTPUT value.
/// Valid for leaky slopes > 0, where output and pre-activation share sign.
template <typename T>
T activation_gradient(T out, const LayerSpec& layer) {
    if (layer.activation == Activation::leaky)
        return out > T(0) ? T(1) : T(layer.leaky_slope);
    return T(1);
}

// ---------------------------------------------------------------------------
// Region kernels
// ---------------------------------------------------------------------------

/// Convolve `in` (a slice of the layer's input map) over output rect `out_r`.
/// Reads outside the input MAP are zero padding; reads inside the map must be
/// covered by `in`, which the tile plan guarantees.
template <typename T>
TileBuffer<T> conv_forward_region(const TileBuffer<T>& in, const MapDims& in_map,
                                  const FilterBank<T>& bank, const LayerSpec& layer,
                                  const Rect& out_r) {
    assert(layer.is_conv());
    if (bank.in_channels != in_map.depth || bank.kernel != layer.kernel)
        throw shape_error("filter bank does not match layer input");
    const int S = layer.stride, K = layer.kernel, P = layer.pad;
    TileBuffer<T> out(out_r, bank.out_channels);
    for (int f = 0; f < bank.out_channels; ++f) {
        for (int oy = out_r.y1; oy <= out_r.y2; ++oy) {
            for (int ox = out_r.x1; ox <= out_r.x2; ++ox) {
                T acc = T(0);
                for (int c = 0; c < bank.in_channels; ++c) {
                    for (int ky = 0; ky < K; ++ky) {
                        const int gy = oy * S - P + ky;
                        if (gy < 0 || gy >= in_map.height) continue;
                        for (int kx = 0; kx < K; ++kx) {
                            const int gx = ox * S - P + kx;
                            if (gx < 0 || gx >= in_map.width) continue;
                            acc += in.at(gx, gy, c) * bank.weight(f, c, ky, kx);
                        }
                    }
                }
                out.at(ox, oy, f) = apply_activation(acc, layer);
            }
        }
    }
    return out;
}

/// Adjoint of the convolution's spatial part: given the loss gradient with
/// respect to the layer's pre-activation output, produce the gradient with
/// respect to its input over `out_r`. Equivalent to correlating with the
/// 180-degree-rotated filters, inserting S-1 zeros between output columns.
/// Purely linear; activation folding is the caller's job.
template <typename T>
TileBuffer<T> conv_backward_delta_region(const TileBuffer<T>& delta_out, const MapDims& out_map,
                                         const FilterBank<T>& bank, const LayerSpec& layer,
                                         const Rect& out_r) {
    assert(layer.is_conv());
    if (bank.out_channels != out_map.depth || bank.kernel != layer.kernel)
        throw shape_error("filter bank does not match layer output");
    const int S = layer.stride, K = layer.kernel, P = layer.pad;
    TileBuffer<T> out(out_r, bank.in_channels);
    for (int c = 0; c < bank.in_channels; ++c) {
        for (int y = out_r.y1; y <= out_r.y2; ++y) {
            for (int x = out_r.x1; x <= out_r.x2; ++x) {
                T acc = T(0);
                for (int f = 0; f < bank.out_channels; ++f) {
                    for (int ky = 0; ky < K; ++ky) {
                        const int ny = y + P - ky;
                        if (ny % S != 0) continue;
                        const int oy = ny / S;
                        if (oy < 0 || oy >= out_map.height) continue;
                        for (int kx = 0; kx < K; ++kx) {
                            const int nx = x + P - kx;
                            if (nx % S != 0) continue;
                            const int ox = nx / S;
                            if (ox < 0 || ox >= out_map.width) continue;
                            acc += delta_out.at(ox, oy, f) * bank.weight(f, c, ky, kx);
                        }
                    }
                }
                out.at(x, y, c) = acc;
            }
        }
    }
    return out;
}

/// Accumulate the weight gradient contributed by output positions in
/// `positions` into bank.grads. `in` must cover the backtrace of `positions`
/// (clipped to the map); `delta_out` must cover `positions` itself. Summing
/// disjoint position sets across tiles reproduces the whole-map gradient.
template <typename T>
void conv_backward_weights_region(const TileBuffer<T>& in, const MapDims& in_map,
                                  const TileBuffer<T>& delta_out,
                                  FilterBank<T>& bank, const LayerSpec& layer,
                                  const Rect& positions) {
    assert(layer.is_conv());
    const int S = layer.stride, K = layer.kernel, P = layer.pad;
    for (int f = 0; f < bank.out_channels; ++f) {
        for (int c = 0; c < bank.in_channels; ++c) {
            for (int ky = 0; ky < K; ++ky) {
                for (int kx = 0; kx < K; ++kx) {
                    T acc = T(0);
                    for (int oy = positions.y1; oy <= positions.y2; ++oy) {
                        const int gy = oy * S - P + ky;
                        if (gy < 0 || gy >= in_map.height) continue;
                        for (int ox = positions.x1; ox <= positions.x2; ++ox) {
                            const int gx = ox * S - P + kx;
                            if (gx < 0 || gx >= in_map.width) continue;
                            acc += delta_out.at(ox, oy, f) * in.at(gx, gy, c);
                        }
                    }
                    bank.grad(f, c, ky, kx) += acc;
                }
            }
        }
    }
}

/// Max-pool `in` over output rect `out_r`. Ties go to the first window
/// element in row-major scan order. Returns values and the per-output argmax
/// positions needed to route deltas back.
template <typename T>
std::pair<TileBuffer<T>, TileBuffer<PoolIdx>>
maxpool_forward_region(const TileBuffer<T>& in, const LayerSpec& layer, const Rect& out_r) {
    assert(layer.is_pool());
    const int S = layer.stride, K = layer.kernel;
    TileBuffer<T> out(out_r, in.depth);
    TileBuffer<PoolIdx> idx(out_r, in.depth);
    for (int c = 0; c < in.depth; ++c) {
        for (int oy = out_r.y1; oy <= out_r.y2; ++oy) {
            for (int ox = out_r.x1; ox <= out_r.x2; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                PoolIdx where;
                for (int ky = 0; ky < K; ++ky) {
                    for (int kx = 0; kx < K; ++kx) {
                        T v = in.at(ox * S + kx, oy * S + ky, c);
                        if (v > best) {
                            best = v;
                            where = {std::int16_t(ky), std::int16_t(kx)};
                        }
                    }
                }
                out.at(ox, oy, c) = best;
                idx.at(ox, oy, c) = where;
            }
        }
    }
    return {std::move(out), std::move(idx)};
}

/// Route pool deltas back to the argmax inputs over `out_r` on the input map.
/// `idx` must come from the forward pass of the same data; the index map
/// must cover every window that touches `out_r`.
template <typename T>
TileBuffer<T> maxpool_backward_region(const TileBuffer<T>& delta_out, const MapDims& out_map,
                                      const TileBuffer<PoolIdx>& idx, const LayerSpec& layer,
                                      const Rect& out_r) {
    assert(layer.is_pool());
    if (delta_out.depth != idx.depth)
        throw shape_error("pool delta and index map depth mismatch");
    const int S = layer.stride, K = layer.kernel;
    TileBuffer<T> out(out_r, delta_out.depth);
    for (int c = 0; c < out.depth; ++c) {
        for (int y = out_r.y1; y <= out_r.y2; ++y) {
            for (int x = out_r.x1; x <= out_r.x2; ++x) {
                T acc = T(0);
                // Windows that contain input column x: ceil((x-K+1)/S) .. floor(x/S).
                const int oy_lo = std::max(0, div_ceil(y - K + 1, S));
                const int oy_hi = std::min(out_map.height - 1, div_floor(y, S));
                const int ox_lo = std::max(0, div_ceil(x - K + 1, S));
                const int ox_hi = std::min(out_map.width - 1, div_floor(x, S));
                for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                    for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                        PoolIdx w = idx.at(ox, oy, c);
                        if (oy * S + w.row == y && ox * S + w.col == x)
                            acc += delta_out.at(ox, oy, c);
                    }
                }
                out.at(x, y, c) = acc;
            }
        }
    }
    return out;
}

/// Multiply a delta region elementwise by the activation derivative of the
/// layer that produced `activations`. Regions must coincide in rect coverage
/// for the delta's whole extent.
template <typename T>
void apply_activation_gradient_region(TileBuffer<T>& delta, const TileBuffer<T>& activations,
                                      const LayerSpec& producing_layer) {
    if (producing_layer.activation == Activation::none)
        return;
    if (!activations.rect.contains(delta.rect) || activations.depth != delta.depth)
        throw shape_error("activation region does not cover delta region");
    for (int c = 0; c < delta.depth; ++c)
        for (int y = delta.rect.y1; y <= delta.rect.y2; ++y)
            for (int x = delta.rect.x1; x <= delta.rect.x2; ++x)
                delta.at(x, y, c) *= activation_gradient(activations.at(x, y, c), producing_layer);
}

// ---------------------------------------------------------------------------
// Whole-map wrappers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& in, const FilterBank<T>& bank, const LayerSpec& layer) {
    MapDims out_dims = layer_output_dims(layer, in.dims());
    auto out = conv_forward_region(as_buffer(in), in.dims(), bank, layer, full_rect(out_dims));
    return to_tensor(std::move(out));
}

template <typename T>
Tensor<T> conv_backward_delta(const Tensor<T>& delta_out, const FilterBank<T>& bank,
                              const LayerSpec& layer, const MapDims& in_dims) {
    auto out = conv_backward_delta_region(as_buffer(delta_out), delta_out.dims(), bank, layer,
                                          full_rect(in_dims));
    return to_tensor(std::move(out));
}

template <typename T>
void conv_backward_weights(const Tensor<T>& in, const Tensor<T>& delta_out,
                           FilterBank<T>& bank, const LayerSpec& layer) {
    conv_backward_weights_region(as_buffer(in), in.dims(), as_buffer(delta_out), bank, layer,
                                 full_rect(delta_out.dims()));
}

template <typename T>
std::pair<Tensor<T>, Tensor<PoolIdx>> maxpool_forward(const Tensor<T>& in, const LayerSpec& layer) {
    MapDims out_dims = layer_output_dims(layer, in.dims());
    auto [out, idx] = maxpool_forward_region(as_buffer(in), layer, full_rect(out_dims));
    Tensor<PoolIdx> it;
    it.width = out_dims.width;
    it.height = out_dims.height;
    it.depth = out_dims.depth;
    it.data = std::move(idx.data);
    return {to_tensor(std::move(out)), std::move(it)};
}

template <typename T>
Tensor<T> maxpool_backward(const Tensor<T>& delta_out, const Tensor<PoolIdx>& idx,
                           const LayerSpec& layer, const MapDims& in_dims) {
    if (delta_out.width != idx.width || delta_out.height != idx.height ||
        delta_out.depth != idx.depth)
        throw shape_error("pool index map does not match delta dims");
    TileBuffer<PoolIdx> ib;
    ib.rect = full_rect(idx.dims());
    ib.depth = idx.depth;
    ib.data = idx.data;
    auto out = maxpool_backward_region(as_buffer(delta_out), delta_out.dims(), ib, layer,
                                       full_rect(in_dims));
    return to_tensor(std::move(out));
}

template <typename T>
void apply_activation_gradient(Tensor<T>& delta, const Tensor<T>& activations,
                               const LayerSpec& producing_layer) {
    if (producing_layer.activation == Activation::none)
        return;
    if (delta.dims() != activations.dims())
        throw shape_error("activation dims do not match delta dims");
    for (size_t i = 0; i < delta.data.size(); ++i)
        delta.data[i] *= activation_gradient(activations.data[i], producing_layer);
}

// ---------------------------------------------------------------------------
// Reference trainer
// ---------------------------------------------------------------------------

/// Half sum of squared differences; the training loss.
template <typename T>
T sum_square_loss(const Tensor<T>& out, const Tensor<T>& target) {
    if (out.dims() != target.dims())
        throw shape_error("loss target dims do not match output");
    T acc = T(0);
    for (size_t i = 0; i < out.data.size(); ++i) {
        T d = out.data[i] - target.data[i];
        acc += d * d;
    }
    return acc / T(2);
}

template <typename T>
struct TrainStepResult {
    std::vector<Tensor<T>> activations;  // maps 0..L (0 is the input sample)
    std::vector<Tensor<T>> deltas;       // loss gradient per map, activation-folded
    T loss = T(0);
};

/// Run one sample through the whole network on a single map: forward with
/// retained activations, loss delta, backward with weight-gradient
/// accumulation into the banks. The distributed runtime must reproduce this
/// to within float reassociation error.
template <typename T>
TrainStepResult<T> reference_train_step(const ModelSpec& model, std::vector<FilterBank<T>>& banks,
                                        const Tensor<T>& sample, const Tensor<T>& target) {
    const int L = model.layer_count();
    if (int(banks.size()) != L)
        throw shape_error("bank count does not match layer count");
    TrainStepResult<T> r;
    r.activations.reserve(L + 1);
    r.activations.push_back(sample);
    std::vector<Tensor<PoolIdx>> indices(L);
    for (int l = 0; l < L; ++l) {
        const LayerSpec& layer = model.layers[l];
        if (layer.is_conv()) {
            r.activations.push_back(conv_forward(r.activations[l], banks[l], layer));
        } else {
            auto [out, idx] = maxpool_forward(r.activations[l], layer);
            indices[l] = std::move(idx);
            r.activations.push_back(std::move(out));
        }
    }

    r.loss = sum_square_loss(r.activations[L], target);

    r.deltas.assign(L + 1, Tensor<T>());
    Tensor<T> delta(r.activations[L].dims());
    for (size_t i = 0; i < delta.data.size(); ++i)
        delta.data[i] = r.activations[L].data[i] - target.data[i];
    if (model.layers[L - 1].is_conv())
        apply_activation_gradient(delta, r.activations[L], model.layers[L - 1]);
    r.deltas[L] = delta;

    for (int l = L - 1; l >= 0; --l) {
        const LayerSpec& layer = model.layers[l];
        const MapDims in_dims = r.activations[l].dims();
        Tensor<T> prev;
        if (layer.is_conv()) {
            conv_backward_weights(r.activations[l], r.deltas[l + 1], banks[l], layer);
            prev = conv_backward_delta(r.deltas[l + 1], banks[l], layer, in_dims);
        } else {
            prev = maxpool_backward(r.deltas[l + 1], indices[l], layer, in_dims);
        }
        if (l > 0 && model.layers[l - 1].is_conv())
            apply_activation_gradient(prev, r.activations[l], model.layers[l - 1]);
        r.deltas[l] = std::move(prev);
    }
    return r;
}

/// Plain SGD over a batch of accumulated gradients; zeroes the accumulator.
template <typename T>
void sgd_update(FilterBank<T>& bank, T learning_rate, int batch) {
    if (batch < 1)
        throw shape_error("batch must be positive");
    const T scale = learning_rate / T(batch);
    for (size_t i = 0; i < bank.weights.size(); ++i)
        bank.weights[i] -= scale * bank.grads[i];
    bank.zero_grads();
}

template <typename T>
void sgd_update(std::vector<FilterBank<T>>& banks, T learning_rate, int batch) {
    for (auto& b : banks)
        sgd_update(b, learning_rate, batch);
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (T x : v)
        if (!std::isfinite(double(x))) return false;
    return true;
}

} // namespace tilegrad
