#pragma once

#include <cstdint>
#include <functional>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pseg/model.hpp"
#include "pseg/propagate.hpp"
#include "pseg/volume.hpp"

namespace pseg {

// ---------------------------------------------------------------------------
// mask wire format: {"dims": [...], "rle": [n0, n1, ...]}, x-fastest runs that
// alternate background / foreground, starting with background.

std::string rle_encode(std::span<const std::uint8_t> labels, const std::vector<int>& dims);
std::string rle_encode(const LabelMask& mask);
std::string rle_encode(const Mask2D& mask);
/// Returns the dims and the 0/1 values. Throws format on malformed input.
std::pair<std::vector<int>, std::vector<std::uint8_t>> rle_decode(const std::string& json_text);
Mask2D rle_decode_2d(const std::string& json_text);

// ---------------------------------------------------------------------------

/// Most-recently-used ordering: get() promotes, put() inserts at the front and
/// drops the back entry beyond capacity.
template <typename K, typename V>
class MruCache {
public:
    explicit MruCache(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) fail(ErrorKind::usage, "cache capacity must be >= 1");
    }

    std::optional<V> get(const K& key) {
        auto it = index_.find(key);
        if (it == index_.end()) return std::nullopt;
        order_.splice(order_.begin(), order_, it->second);
        return it->second->second;
    }

    /// Returns the evicted key, if any.
    std::optional<K> put(const K& key, V value) {
        if (auto it = index_.find(key); it != index_.end()) {
            it->second->second = std::move(value);
            order_.splice(order_.begin(), order_, it->second);
            return std::nullopt;
        }
        order_.emplace_front(key, std::move(value));
        index_[key] = order_.begin();
        if (order_.size() <= capacity_) return std::nullopt;
        K evicted = order_.back().first;
        index_.erase(evicted);
        order_.pop_back();
        return evicted;
    }

    bool erase(const K& key) {
        auto it = index_.find(key);
        if (it == index_.end()) return false;
        order_.erase(it->second);
        index_.erase(it);
        return true;
    }

    bool contains(const K& key) const { return index_.count(key) != 0; }
    std::size_t size() const { return order_.size(); }
    std::size_t capacity() const { return capacity_; }
    /// Keys, most recent first.
    std::vector<K> keys() const {
        std::vector<K> out;
        for (const auto& kv : order_) out.push_back(kv.first);
        return out;
    }

private:
    std::size_t capacity_;
    std::list<std::pair<K, V>> order_;
    std::map<K, typename std::list<std::pair<K, V>>::iterator> index_;
};

// ---------------------------------------------------------------------------

/// What the service needs from a model. Swappable for test doubles.
class Segmenter {
public:
    virtual ~Segmenter() = default;
    virtual Mask2D segment_slice(const VoxelGrid& volume, const BoundingBox2D& box) = 0;
    virtual LabelMask propagate(const VoxelGrid& volume, const PropagationPlan& plan) = 0;
    virtual std::string checkpoint_id() const = 0;
};

class ModelSegmenter : public Segmenter {
public:
    explicit ModelSegmenter(std::shared_ptr<const Model<float>> model) : model_(std::move(model)) {}
    Mask2D segment_slice(const VoxelGrid& volume, const BoundingBox2D& box) override;
    LabelMask propagate(const VoxelGrid& volume, const PropagationPlan& plan) override;
    std::string checkpoint_id() const override { return model_->checkpoint_id(); }

private:
    std::shared_ptr<const Model<float>> model_;
};

enum class CacheMissPolicy { recompute, gone };

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t cache_capacity = 4;
    std::size_t max_upload_bytes = 256u << 20;
    CacheMissPolicy miss_policy = CacheMissPolicy::recompute;
    int threads = 4;
};

struct ServiceResponse {
    int status = 200;
    std::string body;  // JSON
};

/// The annotation workflow without the transport: every method maps one
/// endpoint. Sessions are independent; one inference per session at a time.
class AnnotationService {
public:
    /// `models` must hold "default"; sessions may pick another by name.
    AnnotationService(std::map<std::string, std::shared_ptr<Segmenter>> models, ServerConfig config = {});

    ServiceResponse create_session(const std::string& body, const std::string& model_name = "");
    ServiceResponse get_session(const std::string& id);
    ServiceResponse delete_session(const std::string& id);
    ServiceResponse preprocess(const std::string& id, const std::string& body);
    ServiceResponse set_roi(const std::string& id, const std::string& body);
    ServiceResponse segment_middle(const std::string& id);
    ServiceResponse refine(const std::string& id, const std::string& body);
    ServiceResponse propagate(const std::string& id);
    ServiceResponse result(const std::string& id);
    ServiceResponse accept(const std::string& id);

    std::vector<std::string> cached_sessions() const;
    const ServerConfig& config() const { return config_; }

private:
    struct Session;
    struct Result {
        std::string mask_json;
        std::string provenance_json;
    };
    class InFlight;

    std::shared_ptr<Session> find(const std::string& id);
    Result run_propagation(Session& s);
    std::string new_id();

    std::map<std::string, std::shared_ptr<Segmenter>> models_;
    ServerConfig config_;
    mutable std::mutex mutex_;
    std::map<std::string, std::shared_ptr<Session>> sessions_;
    MruCache<std::string, Result> cache_;
    std::uint64_t counter_ = 0;
    std::uint64_t salt_;
};

/// HTTP binding of AnnotationService (cpp-httplib). One JSON line per request
/// goes to `request_log` when given.
class HttpServer {
public:
    HttpServer(AnnotationService& service, std::ostream* request_log = nullptr);
    ~HttpServer();

    /// Binds (port 0 picks a free port) and returns the port.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    void listen();
    void start_background();
    void stop();

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace pseg
