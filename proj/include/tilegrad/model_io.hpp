#pragma once

#include <cmath>
#include <cstring>
#include <cstdint>
#include <fstream>
#include <istream>
#include <sstream>
#include <string>
#include <vector>

#include "tilegrad/errors.hpp"
#include "tilegrad/model.hpp"
#include "tilegrad/tensor.hpp"

namespace tilegrad {

// ===========================================================================
// Model configuration text, weight/tensor binary files, and deterministic
// synthetic fixtures.
//
// Config grammar (one key=value per line, # starts a comment):
//
//   [net]                 first section; width, height, channels
//   [convolutional]       filters, size, stride, pad, activation
//   [maxpool]             size, stride
//
// activation is one of leaky | linear | none (the last two are synonyms).
// Every key is mandatory, unknown keys and sections are rejected, and all
// diagnostics carry file:line positions.
// ===========================================================================

namespace detail {

struct ConfigCursor {
    std::string file;
    int line = 0;
};

inline int parse_positive_int(const std::string& value, const ConfigCursor& at,
                              const std::string& key, int min_value) {
    size_t used = 0;
    int v = 0;
    try {
        v = std::stoi(value, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != value.size() || value.empty())
        throw parse_error(at.file, at.line, key + " wants an integer, got '" + value + "'");
    if (v < min_value)
        throw parse_error(at.file, at.line,
                          key + " must be at least " + std::to_string(min_value));
    return v;
}

inline std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos)
        return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace detail

/// Parse a model config; `filename` only labels diagnostics.
inline ModelSpec parse_model_config(std::istream& in, const std::string& filename) {
    enum class Section { none, net, convolutional, maxpool };
    struct PendingLayer {
        Section section = Section::none;
        detail::ConfigCursor at;
        int filters = -1, size = -1, stride = -1, pad = -1;
        Activation activation = Activation::none;
        bool have_activation = false;
    };

    ModelSpec model;
    bool have_net = false;
    int net_width = -1, net_height = -1, net_channels = -1;
    PendingLayer pending;

    detail::ConfigCursor at{filename, 0};

    auto finish_section = [&] {
        switch (pending.section) {
            case Section::none:
                return;
            case Section::net:
                if (net_width < 0 || net_height < 0 || net_channels < 0)
                    throw parse_error(pending.at.file, pending.at.line,
                                      "[net] needs width, height and channels");
                model.input = {net_width, net_height, net_channels};
                return;
            case Section::convolutional: {
                if (pending.filters < 0 || pending.size < 0 || pending.stride < 0 ||
                    pending.pad < 0 || !pending.have_activation)
                    throw parse_error(pending.at.file, pending.at.line,
                                      "[convolutional] needs filters, size, stride, pad "
                                      "and activation");
                LayerSpec l;
                l.kind = LayerKind::convolution;
                l.out_channels = pending.filters;
                l.kernel = pending.size;
                l.stride = pending.stride;
                l.pad = pending.pad;
                l.activation = pending.activation;
                model.layers.push_back(l);
                return;
            }
            case Section::maxpool: {
                if (pending.size < 0 || pending.stride < 0)
                    throw parse_error(pending.at.file, pending.at.line,
                                      "[maxpool] needs size and stride");
                LayerSpec l;
                l.kind = LayerKind::maxpool;
                l.kernel = pending.size;
                l.stride = pending.stride;
                model.layers.push_back(l);
                return;
            }
        }
    };

    std::string raw;
    while (std::getline(in, raw)) {
        at.line += 1;
        std::string line = detail::trim(raw);
        size_t hash = line.find('#');
        if (hash != std::string::npos)
            line = detail::trim(line.substr(0, hash));
        if (line.empty())
            continue;

        if (line.front() == '[') {
            if (line.back() != ']')
                throw parse_error(at.file, at.line, "unterminated section header");
            std::string name = line.substr(1, line.size() - 2);
            finish_section();
            pending = PendingLayer{};
            pending.at = at;
            if (name == "net") {
                if (have_net)
                    throw parse_error(at.file, at.line, "duplicate [net] section");
                have_net = true;
                pending.section = Section::net;
            } else if (name == "convolutional") {
                pending.section = Section::convolutional;
            } else if (name == "maxpool") {
                pending.section = Section::maxpool;
            } else {
                throw parse_error(at.file, at.line, "unknown section [" + name + "]");
            }
            if (pending.section != Section::net && !have_net)
                throw parse_error(at.file, at.line, "[" + name + "] before [net]");
            continue;
        }

        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw parse_error(at.file, at.line, "expected key=value, got '" + line + "'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (pending.section == Section::none)
            throw parse_error(at.file, at.line, "key '" + key + "' outside any section");

        auto set_int = [&](int& slot, int min_value) {
            if (slot >= 0)
                throw parse_error(at.file, at.line, "duplicate key '" + key + "'");
            slot = detail::parse_positive_int(value, at, key, min_value);
        };

        if (pending.section == Section::net) {
            if (key == "width") set_int(net_width, 1);
            else if (key == "height") set_int(net_height, 1);
            else if (key == "channels") set_int(net_channels, 1);
            else throw parse_error(at.file, at.line, "unknown [net] key '" + key + "'");
        } else if (pending.section == Section::convolutional) {
            if (key == "filters") set_int(pending.filters, 1);
            else if (key == "size") set_int(pending.size, 1);
            else if (key == "stride") set_int(pending.stride, 1);
            else if (key == "pad") set_int(pending.pad, 0);
            else if (key == "activation") {
                if (pending.have_activation)
                    throw parse_error(at.file, at.line, "duplicate key 'activation'");
                if (value == "leaky") pending.activation = Activation::leaky;
                else if (value == "linear" || value == "none") pending.activation = Activation::none;
                else throw parse_error(at.file, at.line, "unknown activation '" + value + "'");
                pending.have_activation = true;
            } else {
                throw parse_error(at.file, at.line, "unknown [convolutional] key '" + key + "'");
            }
        } else {
            if (key == "size") set_int(pending.size, 1);
            else if (key == "stride") set_int(pending.stride, 1);
            else throw parse_error(at.file, at.line, "unknown [maxpool] key '" + key + "'");
        }
    }
    finish_section();

    if (!have_net)
        throw parse_error(filename, at.line, "config has no [net] section");
    if (model.layers.empty())
        throw parse_error(filename, at.line, "config defines no layers");
    try {
        model.validate();
    } catch (const error& e) {
        throw parse_error(filename, at.line, std::string("model does not fit together: ")
                          + e.what());
    }
    return model;
}

inline ModelSpec load_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw parse_error(path, 0, "cannot open file");
    return parse_model_config(in, path);
}

// ---------------------------------------------------------------------------
// Binary tensor and weight files
// ---------------------------------------------------------------------------
//
// tensor file: "TGTN" | version u32 = 1 | width u32 | height u32 | depth u32
//              | data f32[w*h*d]
// weight file: "TGWT" | version u32 = 1 | bank_count u32 | per bank:
//              kernel u32 | in u32 | out u32 | data f32[k*k*in*out]
// All little-endian; pool layers occupy a bank slot with all-zero dims so
// bank indices equal layer indices. Files must end exactly after the data.

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4] = {char(v), char(v >> 8), char(v >> 16), char(v >> 24)};
    out.write(b, 4);
}

inline std::uint32_t read_u32(std::istream& in, const std::string& what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw format_error("file truncated reading " + what);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
           (std::uint32_t(b[3]) << 24);
}

inline void write_f32s(std::ostream& out, const std::vector<float>& v) {
    for (float f : v) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        write_u32(out, bits);
    }
}

inline void read_f32s(std::istream& in, std::vector<float>& v, const std::string& what) {
    for (size_t i = 0; i < v.size(); ++i) {
        std::uint32_t bits = read_u32(in, what);
        std::memcpy(&v[i], &bits, 4);
    }
}

inline void expect_magic(std::istream& in, const char* magic, const std::string& path) {
    char got[4];
    if (!in.read(got, 4) || std::memcmp(got, magic, 4) != 0)
        throw format_error(path + ": not a " + magic + " file");
    std::uint32_t version = read_u32(in, "version");
    if (version != 1)
        throw format_error(path + ": unsupported version " + std::to_string(version));
}

inline void expect_eof(std::istream& in, const std::string& path) {
    if (in.peek() != std::char_traits<char>::eof())
        throw format_error(path + ": trailing bytes after payload");
}

inline std::uint32_t checked_dim(std::uint32_t v, const std::string& path) {
    if (v == 0 || v > (1u << 20))
        throw format_error(path + ": implausible dimension " + std::to_string(v));
    return v;
}

} // namespace detail

inline void save_tensor(const std::string& path, const Tensor<float>& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw format_error(path + ": cannot open for writing");
    out.write("TGTN", 4);
    detail::write_u32(out, 1);
    detail::write_u32(out, std::uint32_t(t.width));
    detail::write_u32(out, std::uint32_t(t.height));
    detail::write_u32(out, std::uint32_t(t.depth));
    detail::write_f32s(out, t.data);
    if (!out)
        throw format_error(path + ": write failed");
}

inline Tensor<float> load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw format_error(path + ": cannot open");
    detail::expect_magic(in, "TGTN", path);
    int w = int(detail::checked_dim(detail::read_u32(in, "width"), path));
    int h = int(detail::checked_dim(detail::read_u32(in, "height"), path));
    int d = int(detail::checked_dim(detail::read_u32(in, "depth"), path));
    Tensor<float> t(w, h, d);
    detail::read_f32s(in, t.data, "tensor data");
    detail::expect_eof(in, path);
    return t;
}

inline void save_weights(const std::string& path, const std::vector<FilterBank<float>>& banks) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw format_error(path + ": cannot open for writing");
    out.write("TGWT", 4);
    detail::write_u32(out, 1);
    detail::write_u32(out, std::uint32_t(banks.size()));
    for (const auto& b : banks) {
        detail::write_u32(out, std::uint32_t(b.kernel));
        detail::write_u32(out, std::uint32_t(b.in_channels));
        detail::write_u32(out, std::uint32_t(b.out_channels));
        detail::write_f32s(out, b.weights);
    }
    if (!out)
        throw format_error(path + ": write failed");
}

inline std::vector<FilterBank<float>> load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw format_error(path + ": cannot open");
    detail::expect_magic(in, "TGWT", path);
    std::uint32_t count = detail::read_u32(in, "bank count");
    if (count > 4096)
        throw format_error(path + ": implausible bank count " + std::to_string(count));
    std::vector<FilterBank<float>> banks;
    banks.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        std::uint32_t k = detail::read_u32(in, "kernel");
        std::uint32_t cin = detail::read_u32(in, "in channels");
        std::uint32_t cout = detail::read_u32(in, "out channels");
        if (k == 0 && cin == 0 && cout == 0) {
            banks.emplace_back();
            continue;
        }
        detail::checked_dim(k, path);
        detail::checked_dim(cin, path);
        detail::checked_dim(cout, path);
        if (k > 64)
            throw format_error(path + ": implausible kernel " + std::to_string(k));
        banks.emplace_back(int(k), int(cin), int(cout));
        detail::read_f32s(in, banks.back().weights, "weights");
    }
    detail::expect_eof(in, path);
    return banks;
}

/// Zero-initialized banks shaped for each layer; pool layers get empty slots.
inline std::vector<FilterBank<float>> make_banks(const ModelSpec& model) {
    std::vector<FilterBank<float>> banks;
    banks.reserve(model.layer_count());
    int channels = model.input.depth;
    for (const LayerSpec& layer : model.layers) {
        if (layer.is_conv()) {
            banks.emplace_back(layer.kernel, channels, layer.out_channels);
            channels = layer.out_channels;
        } else {
            banks.emplace_back();
        }
    }
    return banks;
}

/// Check a loaded weight file against a model's layer shapes.
inline void check_weights_match(const ModelSpec& model,
                                const std::vector<FilterBank<float>>& banks) {
    if (int(banks.size()) != model.layer_count())
        throw format_error("weight file holds " + std::to_string(banks.size())
                           + " banks, model has " + std::to_string(model.layer_count())
                           + " layers");
    auto want = make_banks(model);
    for (size_t l = 0; l < banks.size(); ++l) {
        if (banks[l].kernel != want[l].kernel || banks[l].in_channels != want[l].in_channels ||
            banks[l].out_channels != want[l].out_channels)
            throw format_error("weight bank " + std::to_string(l)
                               + " does not match the model's layer shape");
    }
}

// ---------------------------------------------------------------------------
// Synthetic fixtures
// ---------------------------------------------------------------------------
//
// Fixtures come from a 64-bit linear congruential generator,
//   s' = s * 6364136223846793005 + 1442695040888963407,
// mapped to [-1, 1) by taking the top 53 bits: (s' >> 11) * 2^-52 - 1.
// The recurrence is pinned so fixtures are bit-identical everywhere.

inline std::uint64_t synth_next(std::uint64_t& state) {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    return state;
}

inline double synth_uniform(std::uint64_t& state) {
    return double(synth_next(state) >> 11) * (2.0 / 9007199254740992.0) - 1.0;
}

inline Tensor<float> synth_sample(const MapDims& dims, std::uint64_t seed) {
    Tensor<float> t(dims);
    std::uint64_t s = seed;
    for (auto& v : t.data)
        v = float(synth_uniform(s));
    return t;
}

/// Deterministic weights for every conv layer. Values are scaled by the
/// inverse square root of the filter's fan-in, which keeps multi-layer
/// activations and several training steps inside float range.
inline std::vector<FilterBank<float>> synth_banks(const ModelSpec& model, std::uint64_t seed) {
    auto banks = make_banks(model);
    std::uint64_t s = seed;
    for (auto& b : banks) {
        if (b.kernel == 0)
            continue;
        const double scale =
            1.0 / std::sqrt(double(b.kernel) * b.kernel * b.in_channels);
        for (auto& w : b.weights)
            w = float(scale * synth_uniform(s));
    }
    return banks;
}

} // namespace tilegrad
