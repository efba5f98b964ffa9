// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "kvedit/errors.hpp"
#include "kvedit/tensor.hpp"
#include "kvedit/tensor_io.hpp"

namespace kvedit {

/// Background keys and values of one attention layer at one timestep.
/// Row r of `k` and `v` belongs to token `bg_positions[r]`. K and V are
/// stored packed across heads, so both are [B x d].
template <class T>
struct KVEntry {
    std::size_t timestep = 0;
    std::size_t layer = 0;
    std::vector<std::size_t> bg_positions;
    Tensor<T> k;
    Tensor<T> v;

    std::size_t float_count() const { return k.size() + v.size(); }

    void validate() const {
        if (k.rank() != 2 || v.rank() != 2 || k.shape() != v.shape() || k.rows() != bg_positions.size())
            throw ShapeError("kv entry (" + std::to_string(timestep) + "," + std::to_string(layer) +
                             "): K " + shape_str(k.shape()) + ", V " + shape_str(v.shape()) + ", " +
                             std::to_string(bg_positions.size()) + " positions");
        for (std::size_t r = 1; r < bg_positions.size(); ++r)
            if (bg_positions[r] <= bg_positions[r - 1])
                throw ShapeError("kv entry: background positions must be strictly increasing");
    }

    friend bool operator==(const KVEntry&, const KVEntry&) = default;
};

/// Counts cached floats; not process memory.
class MemoryMeter {
public:
    void add(std::size_t floats) {
        current_ += floats;
        peak_ = std::max(peak_, current_);
    }
    void remove(std::size_t floats) {
        if (floats > current_) throw CacheError("memory meter underflow");
        current_ -= floats;
    }
    std::size_t current_floats() const { return current_; }
    std::size_t peak_floats() const { return peak_; }

private:
    std::size_t current_ = 0;
    std::size_t peak_ = 0;
};

enum class CacheMode {
    Retain, ///< inversion-based editing: every timestep kept until the session ends
    Stream  ///< inversion-free editing: at most one timestep resident
};

/// Store of background K/V keyed by (timestep index, layer index), both
/// 1-based as produced by the inversion loop.
template <class T>
class KVCache {
public:
    using Key = std::pair<std::size_t, std::size_t>;

    explicit KVCache(CacheMode mode = CacheMode::Retain) : mode_(mode) {}

    CacheMode mode() const { return mode_; }
    const MemoryMeter& meter() const { return meter_; }
    std::size_t size() const { return store_.size(); }
    bool empty() const { return store_.empty(); }
    bool contains(std::size_t i, std::size_t j) const { return store_.count({i, j}) != 0; }

    void append(KVEntry<T> entry) {
        entry.validate();
        const Key key{entry.timestep, entry.layer};
        if (store_.count(key)) {
            if (mode_ == CacheMode::Retain)
                throw CacheError("kv cache: duplicate entry " + key_str(key) + " in retain mode");
            meter_.remove(store_.at(key).float_count());
            store_.erase(key);
        }
        if (mode_ == CacheMode::Stream)
            for (const auto& [k, e] : store_)
                if (k.first != entry.timestep)
                    throw CacheError("kv cache: stream mode holds timestep " + std::to_string(k.first) +
                                     " while appending timestep " + std::to_string(entry.timestep));
        meter_.add(entry.float_count());
        store_.emplace(key, std::move(entry));
    }

    const KVEntry<T>& get(std::size_t i, std::size_t j) const {
        auto it = store_.find({i, j});
        if (it == store_.end()) throw CacheError("kv cache: missing entry " + key_str({i, j}));
        if (trace_) accesses_.push_back({i, j});
        return it->second;
    }

    /// Drops every layer of timestep i. Absent timesteps are a no-op.
    void release_timestep(std::size_t i) {
        for (auto it = store_.begin(); it != store_.end();) {
            if (it->first.first == i) {
                meter_.remove(it->second.float_count());
                it = store_.erase(it);
            } else {
                ++it;
            }
        }
    }

    void clear() {
        for (const auto& [k, e] : store_) meter_.remove(e.float_count());
        store_.clear();
    }

    std::vector<Key> keys() const {
        std::vector<Key> out;
        out.reserve(store_.size());
        for (const auto& [k, e] : store_) out.push_back(k);
        return out;
    }

    /// Records the key of every get() call, for inspecting fetch order.
    void set_trace(bool on) const {
        trace_ = on;
        accesses_.clear();
    }
    const std::vector<Key>& accesses() const { return accesses_; }

    // File layout: a text manifest ("KVCACHE 1", "entries <n>", "width <d>",
    // then one "i j B" line per entry, each followed by a "bg" line listing
    // the entry's positions, then "end"), followed by a K and a V TNSR blob
    // per entry in manifest order. Entries with B = 0 have no blobs.
    void persist(const std::filesystem::path& path) const {
        if (mode_ != CacheMode::Retain) throw CacheError("kv cache: only retain-mode caches can be persisted");
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open for writing: " + path.string());
        std::size_t width = 0;
        for (const auto& [k, e] : store_)
            if (e.k.rank() == 2) width = e.k.cols();
        os << "KVCACHE 1\nentries " << store_.size() << "\nwidth " << width << "\n";
        for (const auto& [k, e] : store_) {
            os << k.first << ' ' << k.second << ' ' << e.bg_positions.size() << "\nbg";
            for (std::size_t p : e.bg_positions) os << ' ' << p;
            os << '\n';
        }
        os << "end\n";
        for (const auto& [k, e] : store_) {
            if (e.bg_positions.empty()) continue;
            write_tnsr(os, e.k);
            write_tnsr(os, e.v);
        }
        if (!os) throw IoError("write failed: " + path.string());
    }

    static KVCache load(const std::filesystem::path& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open: " + path.string());
        const std::string src = path.string();
        auto fail = [&](const std::string& what) -> IoError {
            return IoError(src + ": " + what + " at byte offset " + std::to_string(static_cast<long long>(is.tellg())));
        };
        auto next_line = [&](const char* what) {
            std::string line;
            if (!std::getline(is, line)) throw fail(std::string("truncated manifest, expected ") + what);
            return line;
        };
        if (next_line("header") != "KVCACHE 1") throw IoError(src + ": bad cache header at byte offset 0");
        std::size_t count = 0, width = 0;
        {
            std::istringstream ls(next_line("entry count"));
            std::string tag;
            if (!(ls >> tag >> count) || tag != "entries") throw fail("malformed entry count");
        }
        {
            std::istringstream ls(next_line("width"));
            std::string tag;
            if (!(ls >> tag >> width) || tag != "width") throw fail("malformed width");
        }
        KVCache cache(CacheMode::Retain);
        std::vector<KVEntry<T>> entries(count);
        for (auto& e : entries) {
            std::size_t b = 0;
            std::istringstream ls(next_line("entry line"));
            if (!(ls >> e.timestep >> e.layer >> b)) throw fail("malformed entry line");
            std::istringstream ps(next_line("bg line"));
            std::string tag;
            if (!(ps >> tag) || tag != "bg") throw fail("missing bg line");
            std::size_t p = 0;
            while (ps >> p) e.bg_positions.push_back(p);
            if (e.bg_positions.size() != b) throw fail("bg position count disagrees with manifest");
        }
        if (next_line("end marker") != "end") throw fail("missing end marker");
        for (auto& e : entries) {
            if (e.bg_positions.empty()) {
                e.k = Tensor<T>::matrix(0, width);
                e.v = Tensor<T>::matrix(0, width);
            } else {
                e.k = read_tnsr<T>(is, src);
                e.v = read_tnsr<T>(is, src);
                if (e.k.rank() != 2 || e.k.rows() != e.bg_positions.size() || e.k.cols() != width)
                    throw fail("cache blob shape " + shape_str(e.k.shape()) + " disagrees with manifest");
            }
            cache.append(std::move(e));
        }
        if (is.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes");
        return cache;
    }

private:
    static std::string key_str(const Key& k) {
        return "(i=" + std::to_string(k.first) + ", j=" + std::to_string(k.second) + ")";
    }

    CacheMode mode_;
    std::map<Key, KVEntry<T>> store_;
    MemoryMeter meter_;
    mutable bool trace_ = false;
    mutable std::vector<Key> accesses_;
};

} // namespace kvedit
