#pragma once

#include <array>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "tilegrad/errors.hpp"
#include "tilegrad/geometry.hpp"
#include "tilegrad/model.hpp"

namespace tilegrad {

// ===========================================================================
// Point-to-point messaging between tile workers.
//
// Two backends share one contract: per-(src,dst) FIFO delivery, selector
// receives that never misdeliver on head-of-line mismatches, and exact
// payload accounting. The in-process backend here is fully deterministic;
// the socket backend lives in transport_tcp.hpp and must produce identical
// per-stream message sequences and stats for the same scenario.
// ===========================================================================

enum class MessageKind : std::uint8_t {
    halo_block = 0,        // boundary ring elements at an interior group input
    input_scatter = 1,     // coordinator -> tile, sample regions at map 0
    delta_scatter = 2,     // output gather / initial-delta scatter at the last map
    partial_grad = 3,      // tile -> coordinator, per-batch weight-gradient sums
    weight_broadcast = 4,  // coordinator -> tile, updated weights
    control = 5            // acks and barriers; integer fields ride in the rect
};

inline const char* to_string(MessageKind k) {
    switch (k) {
        case MessageKind::halo_block: return "halo_block";
        case MessageKind::input_scatter: return "input_scatter";
        case MessageKind::delta_scatter: return "delta_scatter";
        case MessageKind::partial_grad: return "partial_grad";
        case MessageKind::weight_broadcast: return "weight_broadcast";
        case MessageKind::control: return "control";
    }
    return "unknown";
}

constexpr int message_kind_count = 6;

struct Message {
    MessageKind kind = MessageKind::control;
    Direction direction = Direction::forward;
    int src = 0;
    int dst = 0;
    int boundary = 0;           // group-input map index; layer index for weight kinds
    Rect rect;                  // payload geometry; scratch integers for control
    int depth = 0;
    std::vector<float> payload;

    std::int64_t payload_bytes() const { return std::int64_t(payload.size()) * 4; }

    bool carries_region() const {
        return kind == MessageKind::halo_block || kind == MessageKind::input_scatter ||
               kind == MessageKind::delta_scatter;
    }

    void validate() const {
        if (carries_region()) {
            if (rect.empty() || depth < 1)
                throw transport_error(std::string(to_string(kind)) + " message with empty geometry");
            if (std::int64_t(payload.size()) != rect.area() * depth)
                throw transport_error(std::string(to_string(kind)) + " payload holds "
                                      + std::to_string(payload.size()) + " elements, geometry says "
                                      + std::to_string(rect.area() * depth));
        } else if (kind == MessageKind::control && !payload.empty()) {
            throw transport_error("control message with payload");
        }
    }
};

/// Receive filter. Unset fields match anything.
struct Selector {
    std::optional<MessageKind> kind;
    std::optional<int> src;
    std::optional<int> boundary;
    std::optional<Direction> direction;

    bool matches(const Message& m) const {
        return (!kind || *kind == m.kind) && (!src || *src == m.src) &&
               (!boundary || *boundary == m.boundary) &&
               (!direction || *direction == m.direction);
    }

    std::string describe() const {
        std::string s = "(kind=";
        s += kind ? to_string(*kind) : "*";
        s += ", src=";
        s += src ? std::to_string(*src) : "*";
        s += ", boundary=";
        s += boundary ? std::to_string(*boundary) : "*";
        s += ", direction=";
        s += direction ? to_string(*direction) : "*";
        s += ")";
        return s;
    }
};

// ---------------------------------------------------------------------------
// Accounting
// ---------------------------------------------------------------------------

struct TrafficCounter {
    std::int64_t messages = 0;
    std::int64_t bytes = 0;  // payload bytes only; framing overhead excluded

    void add(const Message& m) {
        messages += 1;
        bytes += m.payload_bytes();
    }
    bool operator==(const TrafficCounter&) const = default;
};

/// (direction, map, kind) key for per-boundary traffic.
struct BoundaryKey {
    Direction direction = Direction::forward;
    int boundary = 0;
    MessageKind kind = MessageKind::halo_block;

    auto operator<=>(const BoundaryKey&) const = default;
};

struct TransportStats {
    std::array<TrafficCounter, message_kind_count> sent{};
    std::array<TrafficCounter, message_kind_count> received{};
    std::map<BoundaryKey, TrafficCounter> boundary_sent;

    void count_sent(const Message& m) {
        sent[size_t(m.kind)].add(m);
        boundary_sent[{m.direction, m.boundary, m.kind}].add(m);
    }
    void count_received(const Message& m) { received[size_t(m.kind)].add(m); }

    void merge(const TransportStats& o) {
        for (int k = 0; k < message_kind_count; ++k) {
            sent[k].messages += o.sent[k].messages;
            sent[k].bytes += o.sent[k].bytes;
            received[k].messages += o.received[k].messages;
            received[k].bytes += o.received[k].bytes;
        }
        for (const auto& [key, counter] : o.boundary_sent) {
            auto& mine = boundary_sent[key];
            mine.messages += counter.messages;
            mine.bytes += counter.bytes;
        }
    }

    bool operator==(const TransportStats&) const = default;
};

// ---------------------------------------------------------------------------
// Wire format
// ---------------------------------------------------------------------------
//
// frame := "TGRD" | version u8 | kind u8 | direction u8 | src u16 | dst u16
//        | boundary u16 | x1 y1 x2 y2 i32 | depth u32 | payload_len u32
//        | payload (f32 * n) | crc u32
// All integers little-endian; crc is CRC-32 (reflected, poly 0xEDB88320) over
// header and payload. Identical bytes on every backend and platform.

constexpr std::uint8_t wire_version = 1;
constexpr size_t wire_header_bytes = 37;

inline std::uint32_t crc32(const std::uint8_t* data, size_t n) {
    std::uint32_t crc = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) {
        crc ^= data[i];
        for (int b = 0; b < 8; ++b)
            crc = (crc >> 1) ^ (0xEDB88320u & (0u - (crc & 1u)));
    }
    return ~crc;
}

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(std::uint8_t(v));
    out.push_back(std::uint8_t(v >> 8));
}
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(std::uint8_t(v >> (8 * i)));
}
inline std::uint16_t get_u16(const std::uint8_t* p) {
    return std::uint16_t(p[0] | (std::uint16_t(p[1]) << 8));
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}

} // namespace detail

inline std::vector<std::uint8_t> encode_frame(const Message& m) {
    m.validate();
    std::vector<std::uint8_t> out;
    out.reserve(wire_header_bytes + m.payload.size() * 4 + 4);
    for (char c : {'T', 'G', 'R', 'D'})
        out.push_back(std::uint8_t(c));
    out.push_back(wire_version);
    out.push_back(std::uint8_t(m.kind));
    out.push_back(std::uint8_t(m.direction));
    detail::put_u16(out, std::uint16_t(m.src));
    detail::put_u16(out, std::uint16_t(m.dst));
    detail::put_u16(out, std::uint16_t(m.boundary));
    for (int v : {m.rect.x1, m.rect.y1, m.rect.x2, m.rect.y2})
        detail::put_u32(out, std::uint32_t(v));
    detail::put_u32(out, std::uint32_t(m.depth));
    detail::put_u32(out, std::uint32_t(m.payload.size() * 4));
    for (float f : m.payload) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::put_u32(out, bits);
    }
    detail::put_u32(out, crc32(out.data(), out.size()));
    return out;
}

/// Payload length promised by an already-validated header.
inline size_t frame_payload_bytes(const std::uint8_t* header) {
    return detail::get_u32(header + 33);
}

/// Validate magic/version and the declared payload length of a 37-byte
/// header. Called before committing to read the frame body from a stream.
inline void check_frame_header(const std::uint8_t* h) {
    if (std::memcmp(h, "TGRD", 4) != 0)
        throw transport_error("bad frame magic");
    if (h[4] != wire_version)
        throw transport_error("unsupported frame version " + std::to_string(h[4]));
    if (h[5] >= message_kind_count)
        throw transport_error("unknown message kind " + std::to_string(h[5]));
    if (h[6] > 1)
        throw transport_error("bad direction byte");
    std::uint32_t len = detail::get_u32(h + 33);
    if (len % 4 != 0 || len > (1u << 30))
        throw transport_error("implausible payload length " + std::to_string(len));
}

inline Message decode_frame(const std::uint8_t* data, size_t size) {
    if (size < wire_header_bytes + 4)
        throw transport_error("frame truncated at " + std::to_string(size) + " bytes");
    check_frame_header(data);
    const size_t payload_len = frame_payload_bytes(data);
    if (size != wire_header_bytes + payload_len + 4)
        throw transport_error("frame size " + std::to_string(size) + " does not match header");
    const std::uint32_t want = detail::get_u32(data + size - 4);
    const std::uint32_t got = crc32(data, size - 4);
    if (want != got)
        throw transport_error("frame checksum mismatch");

    Message m;
    m.kind = MessageKind(data[5]);
    m.direction = Direction(data[6]);
    m.src = detail::get_u16(data + 7);
    m.dst = detail::get_u16(data + 9);
    m.boundary = detail::get_u16(data + 11);
    m.rect.x1 = int(detail::get_u32(data + 13));
    m.rect.y1 = int(detail::get_u32(data + 17));
    m.rect.x2 = int(detail::get_u32(data + 21));
    m.rect.y2 = int(detail::get_u32(data + 25));
    m.depth = int(detail::get_u32(data + 29));
    m.payload.resize(payload_len / 4);
    for (size_t i = 0; i < m.payload.size(); ++i) {
        std::uint32_t bits = detail::get_u32(data + wire_header_bytes + i * 4);
        std::memcpy(&m.payload[i], &bits, 4);
    }
    return m;
}

// ---------------------------------------------------------------------------
// Endpoint contract
// ---------------------------------------------------------------------------

/// One tile's connection to the cluster. Send never blocks on peers; recv
/// blocks until a matching message arrives or the deadline passes.
class Transport {
public:
    virtual ~Transport() = default;

    virtual int tile_id() const = 0;
    virtual void send(Message m) = 0;
    virtual Message recv_matching(const Selector& sel) = 0;

    const TransportStats& stats() const { return stats_; }

protected:
    TransportStats stats_;
};

// ---------------------------------------------------------------------------
// Deterministic in-process backend
// ---------------------------------------------------------------------------

/// Mailbox network for same-process tile workers. Delivery is FIFO per
/// (src, dst); when several queued messages match a selector, the receiver
/// takes the one with the smallest (boundary, src, arrival) key, so runs are
/// reproducible regardless of send interleaving across sources.
class InProcNetwork {
public:
    explicit InProcNetwork(int tiles,
                           std::chrono::milliseconds timeout = std::chrono::seconds(30))
        : timeout_(timeout), mailboxes_(tiles) {
        endpoints_.reserve(tiles);
        for (int t = 0; t < tiles; ++t)
            endpoints_.push_back(std::unique_ptr<Endpoint>(new Endpoint(*this, t)));
    }

    InProcNetwork(const InProcNetwork&) = delete;
    InProcNetwork& operator=(const InProcNetwork&) = delete;

    class Endpoint : public Transport {
    public:
        int tile_id() const override { return tile_; }

        void send(Message m) override {
            m.validate();
            if (m.dst < 0 || m.dst >= int(net_.mailboxes_.size()))
                throw transport_error("send to unknown tile " + std::to_string(m.dst));
            m.src = tile_;
            stats_.count_sent(m);
            {
                std::lock_guard<std::mutex> lock(net_.mu_);
                net_.mailboxes_[m.dst].push_back({std::move(m), net_.next_seq_++});
            }
            net_.cv_.notify_all();
        }

        Message recv_matching(const Selector& sel) override {
            std::unique_lock<std::mutex> lock(net_.mu_);
            const auto deadline = std::chrono::steady_clock::now() + net_.timeout_;
            auto& box = net_.mailboxes_[tile_];
            for (;;) {
                auto pick = box.end();
                for (auto it = box.begin(); it != box.end(); ++it) {
                    if (!sel.matches(it->msg))
                        continue;
                    if (pick == box.end() ||
                        std::tuple(it->msg.boundary, it->msg.src, it->seq) <
                            std::tuple(pick->msg.boundary, pick->msg.src, pick->seq))
                        pick = it;
                }
                if (pick != box.end()) {
                    Message m = std::move(pick->msg);
                    box.erase(pick);
                    stats_.count_received(m);
                    return m;
                }
                if (net_.cv_.wait_until(lock, deadline) == std::cv_status::timeout)
                    throw timeout_error("tile " + std::to_string(tile_)
                                        + " gave up waiting for " + sel.describe());
            }
        }

    private:
        friend class InProcNetwork;
        Endpoint(InProcNetwork& net, int tile) : net_(net), tile_(tile) {}
        InProcNetwork& net_;
        int tile_;
    };

    Endpoint& endpoint(int tile) { return *endpoints_[tile]; }
    int tiles() const { return int(endpoints_.size()); }

    /// Sum of all endpoints' counters.
    TransportStats global_stats() const {
        TransportStats total;
        for (const auto& e : endpoints_)
            total.merge(e->stats());
        return total;
    }

    /// Verify nothing is in flight and every sent message was consumed.
    void quiesce() const {
        {
            std::lock_guard<std::mutex> lock(mu_);
            for (size_t t = 0; t < mailboxes_.size(); ++t)
                if (!mailboxes_[t].empty())
                    throw transport_error("tile " + std::to_string(t) + " mailbox still holds "
                                          + std::to_string(mailboxes_[t].size()) + " messages");
        }
        TransportStats total = global_stats();
        for (int k = 0; k < message_kind_count; ++k)
            if (total.sent[k] != total.received[k])
                throw transport_error(std::string("sent/received mismatch for ")
                                      + to_string(MessageKind(k)));
    }

private:
    struct Queued {
        Message msg;
        std::uint64_t seq;
    };

    std::chrono::milliseconds timeout_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::deque<Queued>> mailboxes_;
    std::vector<std::unique_ptr<Endpoint>> endpoints_;
    std::uint64_t next_seq_ = 0;
};

} // namespace tilegrad
