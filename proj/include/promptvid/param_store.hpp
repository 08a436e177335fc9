#pragma once

// Named parameter registry. Every trainable or frozen array lives here under
// a unique slash-delimited name with a stage tag; training plans select
// subsets by tag, and checkpoints serialize the whole map in name order.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "promptvid/errors.hpp"
#include "promptvid/rng.hpp"
#include "promptvid/tensor.hpp"

namespace promptvid {

enum class StageTag : std::uint8_t { frozen = 0, stage1 = 1, stage2 = 2, refiner = 3 };

inline const char* to_string(StageTag t) {
    switch (t) {
        case StageTag::frozen: return "frozen";
        case StageTag::stage1: return "stage1";
        case StageTag::stage2: return "stage2";
        case StageTag::refiner: return "refiner";
    }
    return "?";
}

inline StageTag stage_tag_from_string(const std::string& s) {
    if (s == "frozen") return StageTag::frozen;
    if (s == "stage1") return StageTag::stage1;
    if (s == "stage2") return StageTag::stage2;
    if (s == "refiner") return StageTag::refiner;
    fail(ErrorKind::parse, "unknown stage tag '" + s + "'");
}

template <class T>
class ParameterStore {
public:
    struct Entry {
        Tensor<T> tensor;
        StageTag tag = StageTag::frozen;
    };

    Tensor<T> create(const std::string& name, Tensor<T> t, StageTag tag) {
        if (entries_.count(name)) fail(ErrorKind::state, "parameter '" + name + "' already exists");
        entries_[name] = Entry{t, tag};
        return t;
    }

    // Per-name substream keyed on the name hash, so init values do not depend
    // on creation order.
    Tensor<T> create_normal(const std::string& name, Shape shape, const RngStream& root,
                            double stddev, StageTag tag) {
        RngStream sub = root.split(fnv1a(name));
        return create(name, Tensor<T>::randn(std::move(shape), sub, stddev), tag);
    }

    Tensor<T> create_zeros(const std::string& name, Shape shape, StageTag tag) {
        return create(name, Tensor<T>::zeros(std::move(shape)), tag);
    }

    Tensor<T> create_full(const std::string& name, Shape shape, T value, StageTag tag) {
        return create(name, Tensor<T>::full(std::move(shape), value), tag);
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor<T> get(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) fail(ErrorKind::state, "parameter '" + name + "' not found");
        return it->second.tensor;
    }

    StageTag tag(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) fail(ErrorKind::state, "parameter '" + name + "' not found");
        return it->second.tag;
    }

    void set_value(const std::string& name, Tensor<T> t) {
        auto it = entries_.find(name);
        if (it == entries_.end()) fail(ErrorKind::state, "parameter '" + name + "' not found");
        if (t.shape() != it->second.tensor.shape()) {
            fail(ErrorKind::dimension, "parameter '" + name + "' shape changed from " +
                                           to_string(it->second.tensor.shape()) + " to " + to_string(t.shape()));
        }
        it->second.tensor = std::move(t);
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    std::vector<std::string> names_with_tag(StageTag tag) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_)
            if (v.tag == tag) out.push_back(k);
        return out;
    }

    std::size_t size() const { return entries_.size(); }

    std::int64_t total_values() const {
        std::int64_t n = 0;
        for (const auto& [k, v] : entries_) n += v.tensor.numel();
        return n;
    }

    // Hash of names, tags, shapes, and payloads in name order.
    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& [k, v] : entries_) {
            h = fnv1a(k.data(), k.size(), h);
            const std::uint8_t tag = static_cast<std::uint8_t>(v.tag);
            h = fnv1a(&tag, 1, h);
            const std::uint64_t th = tensor_hash(v.tensor);
            h = fnv1a(&th, 8, h);
        }
        return h;
    }

    std::uint64_t subset_hash(const std::vector<std::string>& names) const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (const auto& k : names) {
            h = fnv1a(k.data(), k.size(), h);
            const std::uint64_t th = tensor_hash(get(k));
            h = fnv1a(&th, 8, h);
        }
        return h;
    }

    void save(std::ostream& os) const {
        detail::write_raw(os, "PVPS", 4);
        const std::uint16_t version = 1;
        detail::write_raw(os, &version, 2);
        const std::uint64_t count = entries_.size();
        detail::write_raw(os, &count, 8);
        for (const auto& [k, v] : entries_) {
            const std::uint32_t len = static_cast<std::uint32_t>(k.size());
            detail::write_raw(os, &len, 4);
            detail::write_raw(os, k.data(), k.size());
            const std::uint8_t tag = static_cast<std::uint8_t>(v.tag);
            detail::write_raw(os, &tag, 1);
            write_tensor(os, v.tensor);
        }
    }

    static ParameterStore load(std::istream& is) {
        char magic[4];
        detail::read_raw(is, magic, 4);
        if (std::memcmp(magic, "PVPS", 4) != 0) fail(ErrorKind::version, "bad parameter store magic");
        std::uint16_t version;
        detail::read_raw(is, &version, 2);
        if (version != 1) fail(ErrorKind::version, "unsupported parameter store version");
        std::uint64_t count;
        detail::read_raw(is, &count, 8);
        ParameterStore out;
        for (std::uint64_t i = 0; i < count; ++i) {
            std::uint32_t len;
            detail::read_raw(is, &len, 4);
            if (len > 4096) fail(ErrorKind::data, "implausible parameter name length");
            std::string name(len, '\0');
            detail::read_raw(is, name.data(), len);
            std::uint8_t tag;
            detail::read_raw(is, &tag, 1);
            if (tag > 3) fail(ErrorKind::data, "bad stage tag byte");
            Tensor<T> t = read_tensor<T>(is);
            out.create(name, std::move(t), static_cast<StageTag>(tag));
        }
        return out;
    }

private:
    std::map<std::string, Entry> entries_;
};

} // namespace promptvid
