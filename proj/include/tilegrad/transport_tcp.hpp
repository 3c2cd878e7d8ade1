#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "tilegrad/errors.hpp"
#include "tilegrad/runtime.hpp"
#include "tilegrad/transport.hpp"

namespace tilegrad {

// ===========================================================================
// TCP backend.
//
// A roster maps every tile to a host:port pair; tiles sharing a pair live in
// one process and talk through shared mailboxes, exactly like the in-process
// backend. Each cross-process tile pair gets one dedicated socket carrying
// that pair's traffic in both directions, so TCP's per-connection ordering
// gives the same per-(src,dst) FIFO the in-process backend guarantees, and
// keyed receives make the two backends bit-for-bit interchangeable.
//
// Connection setup: every process binds its roster port, then the lower tile
// id of each pair dials the higher and opens with a payloadless hello frame
// naming the pair and carrying a configuration hash, so mismatched launches
// die at connect time instead of desynchronizing mid-run.
// ===========================================================================

struct RosterEntry {
    int tile = 0;
    std::string host;
    int port = 0;
};

struct Roster {
    std::vector<RosterEntry> entries;

    int tiles() const { return int(entries.size()); }
    const RosterEntry& at(int tile) const { return entries[size_t(tile)]; }

    bool co_located(int a, int b) const {
        return at(a).host == at(b).host && at(a).port == at(b).port;
    }

    /// All tiles this process hosts, given any one of them. Sorted ascending.
    std::vector<int> co_located_with(int tile) const {
        std::vector<int> out;
        for (const RosterEntry& e : entries) {
            if (co_located(e.tile, tile)) {
                out.push_back(e.tile);
            }
        }
        return out;
    }
};

/// Parses "tile host:port" lines; # starts a comment, blank lines are
/// skipped. Tile ids must cover 0..N-1 exactly once.
inline Roster parse_roster(const std::string& text, const std::string& name = "<roster>") {
    Roster roster;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        std::istringstream fields(line);
        std::string id_text, addr;
        if (!(fields >> id_text)) {
            continue;
        }
        if (!(fields >> addr)) {
            throw parse_error(name, line_no, "expected \"tile host:port\"");
        }
        std::string extra;
        if (fields >> extra) {
            throw parse_error(name, line_no, "trailing text \"" + extra + "\"");
        }
        RosterEntry e;
        try {
            size_t used = 0;
            e.tile = std::stoi(id_text, &used);
            if (used != id_text.size()) {
                throw std::invalid_argument(id_text);
            }
        } catch (const std::exception&) {
            throw parse_error(name, line_no, "bad tile id \"" + id_text + "\"");
        }
        const size_t colon = addr.rfind(':');
        if (colon == std::string::npos || colon == 0 || colon + 1 == addr.size()) {
            throw parse_error(name, line_no, "address \"" + addr + "\" is not host:port");
        }
        e.host = addr.substr(0, colon);
        const std::string port_text = addr.substr(colon + 1);
        try {
            size_t used = 0;
            e.port = std::stoi(port_text, &used);
            if (used != port_text.size()) {
                throw std::invalid_argument(port_text);
            }
        } catch (const std::exception&) {
            throw parse_error(name, line_no, "bad port \"" + port_text + "\"");
        }
        if (e.tile < 0) {
            throw parse_error(name, line_no, "negative tile id");
        }
        if (e.port < 1 || e.port > 65535) {
            throw parse_error(name, line_no, "port " + std::to_string(e.port) + " out of range");
        }
        for (const RosterEntry& seen : roster.entries) {
            if (seen.tile == e.tile) {
                throw parse_error(name, line_no,
                                  "tile " + std::to_string(e.tile) + " listed twice");
            }
        }
        roster.entries.push_back(std::move(e));
    }
    std::sort(roster.entries.begin(), roster.entries.end(),
              [](const RosterEntry& a, const RosterEntry& b) { return a.tile < b.tile; });
    for (int t = 0; t < roster.tiles(); ++t) {
        if (roster.entries[size_t(t)].tile != t) {
            throw parse_error(name, 0,
                              "tile ids must cover 0.." + std::to_string(roster.tiles() - 1)
                                  + " exactly; missing " + std::to_string(t));
        }
    }
    if (roster.entries.empty()) {
        throw parse_error(name, 0, "roster names no tiles");
    }
    return roster;
}

inline Roster load_roster(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw format_error(path + ": cannot open roster");
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_roster(buf.str(), path);
}

namespace detail {

inline void close_fd(int& fd) {
    if (fd >= 0) {
        ::close(fd);
        fd = -1;
    }
}

inline bool read_exact(int fd, std::uint8_t* out, size_t n) {
    size_t done = 0;
    while (done < n) {
        const ssize_t got = ::recv(fd, out + done, n - done, 0);
        if (got > 0) {
            done += size_t(got);
            continue;
        }
        if (got < 0 && errno == EINTR) {
            continue;
        }
        return false;
    }
    return true;
}

inline bool write_exact(int fd, const std::uint8_t* data, size_t n) {
    size_t done = 0;
    while (done < n) {
        const ssize_t put = ::send(fd, data + done, n - done, MSG_NOSIGNAL);
        if (put > 0) {
            done += size_t(put);
            continue;
        }
        if (put < 0 && errno == EINTR) {
            continue;
        }
        return false;
    }
    return true;
}

inline void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

inline int listen_on(int port) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) {
        throw transport_error("socket: " + std::string(std::strerror(errno)));
    }
    int one = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_ANY);
    addr.sin_port = htons(std::uint16_t(port));
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        const std::string why = std::strerror(errno);
        ::close(fd);
        throw transport_error("bind port " + std::to_string(port) + ": " + why);
    }
    if (::listen(fd, 16) != 0) {
        const std::string why = std::strerror(errno);
        ::close(fd);
        throw transport_error("listen port " + std::to_string(port) + ": " + why);
    }
    return fd;
}

/// Connects to host:port, retrying until the deadline so process launch
/// order does not matter.
inline int dial(const std::string& host, int port,
                std::chrono::steady_clock::time_point deadline) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* found = nullptr;
    const std::string port_text = std::to_string(port);
    const int rc = ::getaddrinfo(host.c_str(), port_text.c_str(), &hints, &found);
    if (rc != 0 || found == nullptr) {
        throw transport_error("cannot resolve " + host + ": " + ::gai_strerror(rc));
    }
    std::string last_error = "unreachable";
    for (;;) {
        for (addrinfo* ai = found; ai != nullptr; ai = ai->ai_next) {
            const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
            if (fd < 0) {
                continue;
            }
            if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) {
                ::freeaddrinfo(found);
                set_nodelay(fd);
                return fd;
            }
            last_error = std::strerror(errno);
            ::close(fd);
        }
        if (std::chrono::steady_clock::now() >= deadline) {
            ::freeaddrinfo(found);
            throw transport_error("cannot connect to " + host + ":" + port_text + ": "
                                  + last_error);
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
}

/// Reads one whole frame from a socket. Returns false on orderly shutdown
/// or connection loss; malformed frames throw.
inline bool read_frame(int fd, Message& out) {
    std::uint8_t header[wire_header_bytes];
    if (!read_exact(fd, header, sizeof(header))) {
        return false;
    }
    check_frame_header(header);
    const size_t payload = frame_payload_bytes(header);
    std::vector<std::uint8_t> frame(wire_header_bytes + payload + 4);
    std::memcpy(frame.data(), header, sizeof(header));
    if (!read_exact(fd, frame.data() + sizeof(header), payload + 4)) {
        return false;
    }
    out = decode_frame(frame.data(), frame.size());
    return true;
}

} // namespace detail

/// Transport fabric for the tiles one process hosts. Local pairs share
/// mailboxes; each cross-process pair owns a socket. Send never blocks on
/// matching receives; receive order is the same keyed smallest-(boundary,
/// src, arrival) rule the in-process backend uses.
class TcpNetwork {
public:
    TcpNetwork(const Roster& roster, int home_tile,
               std::chrono::milliseconds timeout = std::chrono::seconds(30),
               std::uint32_t config_hash = 0)
        : roster_(roster), timeout_(timeout), config_hash_(config_hash) {
        if (home_tile < 0 || home_tile >= roster_.tiles()) {
            throw config_error("tile " + std::to_string(home_tile) + " is not in the roster");
        }
        locals_ = roster_.co_located_with(home_tile);
        for (size_t i = 0; i < locals_.size(); ++i) {
            local_index_[locals_[i]] = int(i);
        }
        mailboxes_.resize(locals_.size());
        endpoints_.reserve(locals_.size());
        for (int t : locals_) {
            endpoints_.push_back(std::unique_ptr<Endpoint>(new Endpoint(*this, t)));
        }
        try {
            connect_fabric(home_tile);
        } catch (...) {
            teardown();
            throw;
        }
        for (auto& link : links_) {
            Link* raw = link.get();
            raw->reader = std::thread([this, raw] { read_loop(*raw); });
        }
    }

    TcpNetwork(const TcpNetwork&) = delete;
    TcpNetwork& operator=(const TcpNetwork&) = delete;

    ~TcpNetwork() { teardown(); }

    class Endpoint : public Transport {
    public:
        int tile_id() const override { return tile_; }

        void send(Message m) override {
            m.validate();
            if (m.dst < 0 || m.dst >= net_.roster_.tiles()) {
                throw transport_error("send to unknown tile " + std::to_string(m.dst));
            }
            m.src = tile_;
            stats_.count_sent(m);
            if (net_.local_index_.count(m.dst)) {
                net_.deliver(std::move(m));
                return;
            }
            Link& link = net_.link_for(tile_, m.dst);
            const std::vector<std::uint8_t> frame = encode_frame(m);
            std::lock_guard<std::mutex> lock(link.send_mu);
            if (!detail::write_exact(link.fd, frame.data(), frame.size())) {
                throw transport_error("connection to tile " + std::to_string(m.dst)
                                      + " lost while sending");
            }
        }

        Message recv_matching(const Selector& sel) override {
            std::unique_lock<std::mutex> lock(net_.mu_);
            const auto deadline = std::chrono::steady_clock::now() + net_.timeout_;
            auto& box = net_.mailboxes_[size_t(net_.local_index_.at(tile_))];
            for (;;) {
                if (!net_.failure_.empty()) {
                    throw transport_error(net_.failure_);
                }
                auto pick = box.end();
                for (auto it = box.begin(); it != box.end(); ++it) {
                    if (!sel.matches(it->msg)) {
                        continue;
                    }
                    if (pick == box.end()
                        || std::tuple(it->msg.boundary, it->msg.src, it->seq)
                               < std::tuple(pick->msg.boundary, pick->msg.src, pick->seq)) {
                        pick = it;
                    }
                }
                if (pick != box.end()) {
                    Message m = std::move(pick->msg);
                    box.erase(pick);
                    stats_.count_received(m);
                    return m;
                }
                if (net_.cv_.wait_until(lock, deadline) == std::cv_status::timeout) {
                    throw timeout_error("tile " + std::to_string(tile_)
                                        + " gave up waiting for " + sel.describe());
                }
            }
        }

    private:
        friend class TcpNetwork;
        Endpoint(TcpNetwork& net, int tile) : net_(net), tile_(tile) {}
        TcpNetwork& net_;
        int tile_;
    };

    const std::vector<int>& local_tiles() const { return locals_; }

    Endpoint& endpoint(int tile) {
        const auto it = local_index_.find(tile);
        if (it == local_index_.end()) {
            throw config_error("tile " + std::to_string(tile) + " is not hosted here");
        }
        return *endpoints_[size_t(it->second)];
    }

    /// Sum of the locally hosted endpoints' counters.
    TransportStats global_stats() const {
        TransportStats total;
        for (const auto& e : endpoints_) {
            total.merge(e->stats());
        }
        return total;
    }

    /// Verify no undelivered message sits in a local mailbox.
    void quiesce() const {
        std::lock_guard<std::mutex> lock(mu_);
        if (!failure_.empty()) {
            throw transport_error(failure_);
        }
        for (size_t i = 0; i < mailboxes_.size(); ++i) {
            if (!mailboxes_[i].empty()) {
                throw transport_error("tile " + std::to_string(locals_[i])
                                      + " mailbox still holds "
                                      + std::to_string(mailboxes_[i].size()) + " messages");
            }
        }
    }

private:
    struct Queued {
        Message msg;
        std::uint64_t seq;
    };

    struct Link {
        int local = -1;
        int remote = -1;
        int fd = -1;
        std::mutex send_mu;
        std::thread reader;
    };

    /// Brings up one socket per (local, remote) tile pair: the lower id
    /// dials, the higher accepts. Binding precedes dialing everywhere, so
    /// connects land in the peer's listen backlog no matter who starts
    /// first; hellos carry the pair identity plus the config hash.
    void connect_fabric(int home_tile) {
        int expected_accepts = 0;
        for (int local : locals_) {
            for (int remote = 0; remote < roster_.tiles(); ++remote) {
                if (local_index_.count(remote)) {
                    continue;
                }
                if (remote < local) {
                    ++expected_accepts;
                }
            }
        }
        const bool any_remote = size_t(roster_.tiles()) != locals_.size();
        if (any_remote) {
            listen_fd_ = detail::listen_on(roster_.at(home_tile).port);
        }
        const auto deadline = std::chrono::steady_clock::now() + timeout_;
        for (int local : locals_) {
            for (int remote = local + 1; remote < roster_.tiles(); ++remote) {
                if (local_index_.count(remote)) {
                    continue;
                }
                auto link = std::make_unique<Link>();
                link->local = local;
                link->remote = remote;
                link->fd = detail::dial(roster_.at(remote).host, roster_.at(remote).port,
                                        deadline);
                Message hello;
                hello.kind = MessageKind::control;
                hello.direction = Direction::forward;
                hello.src = local;
                hello.dst = remote;
                hello.boundary = 0;
                hello.rect = {int(config_hash_), 0, 0, 0};
                const std::vector<std::uint8_t> frame = encode_frame(hello);
                if (!detail::write_exact(link->fd, frame.data(), frame.size())) {
                    throw transport_error("handshake with tile " + std::to_string(remote)
                                          + " failed");
                }
                links_.push_back(std::move(link));
            }
        }
        for (int i = 0; i < expected_accepts; ++i) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                throw transport_error("accept: " + std::string(std::strerror(errno)));
            }
            detail::set_nodelay(fd);
            timeval tv{};
            tv.tv_sec = std::max<long>(1, timeout_.count() / 1000);
            ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof(tv));
            Message hello;
            if (!detail::read_frame(fd, hello)) {
                ::close(fd);
                throw transport_error("peer hung up during handshake");
            }
            timeval off{};
            ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &off, sizeof(off));
            if (hello.kind != MessageKind::control || !local_index_.count(hello.dst)
                || local_index_.count(hello.src) || hello.src >= hello.dst) {
                ::close(fd);
                throw transport_error("unexpected handshake for pair ("
                                      + std::to_string(hello.src) + ", "
                                      + std::to_string(hello.dst) + ")");
            }
            if (std::uint32_t(hello.rect.x1) != config_hash_) {
                ::close(fd);
                throw transport_error("tile " + std::to_string(hello.src)
                                      + " was launched with a different configuration");
            }
            for (const auto& existing : links_) {
                if (existing->local == hello.dst && existing->remote == hello.src) {
                    ::close(fd);
                    throw transport_error("duplicate connection for pair ("
                                          + std::to_string(hello.src) + ", "
                                          + std::to_string(hello.dst) + ")");
                }
            }
            auto link = std::make_unique<Link>();
            link->local = hello.dst;
            link->remote = hello.src;
            link->fd = fd;
            links_.push_back(std::move(link));
        }
    }

    void read_loop(Link& link) {
        try {
            for (;;) {
                Message m;
                if (!detail::read_frame(link.fd, m)) {
                    break;
                }
                if (m.src != link.remote || m.dst != link.local) {
                    throw transport_error("frame for (" + std::to_string(m.src) + ", "
                                          + std::to_string(m.dst) + ") arrived on the ("
                                          + std::to_string(link.remote) + ", "
                                          + std::to_string(link.local) + ") connection");
                }
                deliver(std::move(m));
            }
            if (!shutting_down_) {
                fail("connection to tile " + std::to_string(link.remote) + " lost");
            }
        } catch (const std::exception& e) {
            fail(e.what());
        }
    }

    void deliver(Message m) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            mailboxes_[size_t(local_index_.at(m.dst))].push_back({std::move(m), next_seq_++});
        }
        cv_.notify_all();
    }

    void fail(const std::string& why) {
        {
            std::lock_guard<std::mutex> lock(mu_);
            if (failure_.empty()) {
                failure_ = why;
            }
        }
        cv_.notify_all();
    }

    Link& link_for(int local, int remote) {
        for (auto& link : links_) {
            if (link->local == local && link->remote == remote) {
                return *link;
            }
        }
        throw transport_error("no connection for pair (" + std::to_string(local) + ", "
                              + std::to_string(remote) + ")");
    }

    void teardown() {
        shutting_down_ = true;
        for (auto& link : links_) {
            if (link->fd >= 0) {
                ::shutdown(link->fd, SHUT_RDWR);
            }
        }
        for (auto& link : links_) {
            if (link->reader.joinable()) {
                link->reader.join();
            }
            detail::close_fd(link->fd);
        }
        detail::close_fd(listen_fd_);
    }

    Roster roster_;
    std::chrono::milliseconds timeout_;
    std::uint32_t config_hash_;
    std::vector<int> locals_;
    std::map<int, int> local_index_;
    std::vector<std::unique_ptr<Link>> links_;
    int listen_fd_ = -1;
    bool shutting_down_ = false;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::deque<Queued>> mailboxes_;
    std::vector<std::unique_ptr<Endpoint>> endpoints_;
    std::uint64_t next_seq_ = 0;
    std::string failure_;
};

/// The workers one process contributes to a TCP cluster, run batch by batch.
/// Metrics merge over the hosted tiles only; loss is meaningful only on the
/// host that owns the coordinator.
class TileHost {
public:
    TileHost(const ExecutionPlan& plan, TcpNetwork& net,
             const std::vector<FilterBank<float>>& banks)
        : plan_(&plan), net_(&net) {
        workers_.reserve(net.local_tiles().size());
        for (int t : net.local_tiles()) {
            workers_.emplace_back(plan, net.endpoint(t), banks);
        }
    }

    bool hosts_coordinator() const {
        for (const TileWorker& w : workers_) {
            if (w.tile() == plan_->coordinator) {
                return true;
            }
        }
        return false;
    }

    BatchMetrics train_batch(int index, int batch, float learning_rate,
                             const TileWorker::BatchData* data) {
        const auto per =
            train_batch_hosted(workers_, batch, learning_rate, data, plan_->coordinator);
        int loss_from = -1;
        for (size_t i = 0; i < workers_.size(); ++i) {
            if (workers_[i].tile() == plan_->coordinator) {
                loss_from = int(i);
            }
        }
        return merge_batch_stats(index, per, loss_from);
    }

    /// Trains on the shared deterministic stream; only the coordinator's
    /// host materializes the data, everyone else is driven by scatters.
    std::vector<BatchMetrics> run(const TrainConfig& cfg) {
        cfg.validate();
        const bool coord = hosts_coordinator();
        std::vector<BatchMetrics> out;
        out.reserve(size_t(cfg.steps));
        for (int step = 0; step < cfg.steps; ++step) {
            TileWorker::BatchData data;
            if (coord) {
                data = synthetic_batch(plan_->model, cfg.seed, step, cfg.batch);
            }
            out.push_back(train_batch(step, cfg.batch, cfg.learning_rate,
                                      coord ? &data : nullptr));
        }
        net_->quiesce();
        return out;
    }

    const std::vector<TileWorker>& workers() const { return workers_; }
    TileWorker& worker(size_t i) { return workers_[i]; }

private:
    const ExecutionPlan* plan_;
    TcpNetwork* net_;
    std::vector<TileWorker> workers_;
};

} // namespace tilegrad
