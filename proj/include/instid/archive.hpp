#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "instid/errors.hpp"
#include "instid/nn.hpp"
#include "instid/rng.hpp"
#include "instid/tensor.hpp"

namespace instid {

// Single-file container for named tensors plus string metadata.
//
// Layout (all integers little-endian):
//   8 bytes  magic "INSTAR01"
//   u32      format version (1)
//   u32      metadata count, then per entry: u32 klen, key, u32 vlen, value
//   u32      tensor count, then per entry:
//              u32 nlen, name, u8 dtype (0=f32, 1=f64), u8 ndim,
//              i32 dims[ndim], u64 payload offset, u64 payload bytes
//   payload  each tensor's raw data, offsets 64-byte aligned
class TensorArchive {
  public:
    static constexpr char kMagic[8] = {'I', 'N', 'S', 'T', 'A', 'R', '0', '1'};
    static constexpr uint32_t kVersion = 1;

    void put(const std::string& name, const Tensor<float>& t) { put_raw(name, 0, t); }
    void put(const std::string& name, const Tensor<double>& t) { put_raw(name, 1, t); }

    template <typename T>
    Tensor<T> get(const std::string& name) const {
        const Entry& e = find(name);
        const uint8_t want = dtype_tag<T>();
        if (e.dtype != want)
            throw DependencyError("archive tensor " + name + ": dtype tag " +
                                  std::to_string(e.dtype) + ", wanted " + std::to_string(want));
        Tensor<T> t(e.shape);
        std::memcpy(t.data.data(), e.bytes.data(), e.bytes.size());
        return t;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    std::vector<std::string> names_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : entries_)
            if (k.rfind(prefix, 0) == 0) out.push_back(k);
        return out;
    }

    std::size_t size() const { return entries_.size(); }

    void set_meta(const std::string& key, const std::string& value) { meta_[key] = value; }
    bool has_meta(const std::string& key) const { return meta_.count(key) != 0; }
    std::string meta(const std::string& key) const {
        auto it = meta_.find(key);
        if (it == meta_.end()) throw DependencyError("archive metadata missing: " + key);
        return it->second;
    }
    const std::map<std::string, std::string>& all_meta() const { return meta_; }

    // Hash over name, dtype, shape, and payload of each tensor, in name order.
    // Metadata is deliberately excluded so provenance notes don't change it.
    uint64_t content_hash() const { return hash_entries(""); }
    uint64_t prefix_hash(const std::string& prefix) const { return hash_entries(prefix); }

    void save(const std::filesystem::path& path) const {
        std::vector<char> buf;
        append(buf, kMagic, 8);
        put_u32(buf, kVersion);
        put_u32(buf, static_cast<uint32_t>(meta_.size()));
        for (const auto& [k, v] : meta_) {
            put_str(buf, k);
            put_str(buf, v);
        }
        put_u32(buf, static_cast<uint32_t>(entries_.size()));
        // two passes: sizes of the table depend only on names/shapes
        std::size_t table_end = buf.size();
        for (const auto& [name, e] : entries_)
            table_end += 4 + name.size() + 1 + 1 + 4 * e.shape.size() + 8 + 8;
        uint64_t cursor = align64(table_end);
        std::vector<uint64_t> offsets;
        for (const auto& [name, e] : entries_) {
            offsets.push_back(cursor);
            cursor = align64(cursor + e.bytes.size());
        }
        std::size_t idx = 0;
        for (const auto& [name, e] : entries_) {
            put_str(buf, name);
            buf.push_back(static_cast<char>(e.dtype));
            buf.push_back(static_cast<char>(e.shape.size()));
            for (int d : e.shape) put_u32(buf, static_cast<uint32_t>(d));
            put_u64(buf, offsets[idx]);
            put_u64(buf, e.bytes.size());
            ++idx;
        }
        idx = 0;
        for (const auto& [name, e] : entries_) {
            buf.resize(offsets[idx], 0);
            append(buf, e.bytes.data(), e.bytes.size());
            ++idx;
        }
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DependencyError("cannot write " + path.string());
        f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (!f) throw DependencyError("short write: " + path.string());
    }

    static TensorArchive load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DependencyError("cannot open " + path.string());
        std::vector<char> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        Reader r{buf, 0, path.string()};
        char magic[8];
        r.bytes(magic, 8);
        if (std::memcmp(magic, kMagic, 8) != 0)
            throw DependencyError(path.string() + ": not a tensor archive");
        const uint32_t ver = r.u32();
        if (ver != kVersion)
            throw DependencyError(path.string() + ": unsupported archive version " +
                                  std::to_string(ver));
        TensorArchive a;
        const uint32_t nmeta = r.u32();
        for (uint32_t i = 0; i < nmeta; ++i) {
            std::string k = r.str();
            a.meta_[k] = r.str();
        }
        const uint32_t nt = r.u32();
        for (uint32_t i = 0; i < nt; ++i) {
            std::string name = r.str();
            Entry e;
            e.dtype = r.u8();
            if (e.dtype > 1) throw DependencyError(path.string() + ": bad dtype for " + name);
            const uint8_t ndim = r.u8();
            std::int64_t numel = 1;
            for (uint8_t d = 0; d < ndim; ++d) {
                const int dim = static_cast<int>(r.u32());
                if (dim <= 0) throw DependencyError(path.string() + ": bad dim for " + name);
                e.shape.push_back(dim);
                numel *= dim;
            }
            const uint64_t off = r.u64();
            const uint64_t nbytes = r.u64();
            const uint64_t want = static_cast<uint64_t>(numel) * (e.dtype == 0 ? 4 : 8);
            if (nbytes != want || off % 64 != 0 || off + nbytes > buf.size())
                throw DependencyError(path.string() + ": corrupt table entry for " + name);
            e.bytes.resize(nbytes);
            std::memcpy(e.bytes.data(), buf.data() + off, nbytes);
            a.entries_.emplace(std::move(name), std::move(e));
        }
        return a;
    }

    // ---- parameter store bridging ----

    template <typename T>
    void put_params(const ParamStore<T>& ps, const std::string& prefix = "") {
        for (const auto& name : ps.order())
            if (name.rfind(prefix, 0) == 0) put(name, ps.at(name));
    }

    template <typename T>
    int load_params(ParamStore<T>& ps, const std::string& prefix = "") const {
        int n = 0;
        for (const auto& [name, e] : entries_) {
            if (name.rfind(prefix, 0) != 0) continue;
            if (!ps.has(name)) throw DependencyError("archive has unknown parameter " + name);
            Tensor<T> t = get<T>(name);
            if (t.shape != ps.at(name).shape)
                throw DependencyError("archive parameter " + name + " has shape " +
                                      shape_str(t.shape) + ", model wants " +
                                      shape_str(ps.at(name).shape));
            ps.at(name) = std::move(t);
            ++n;
        }
        return n;
    }

  private:
    struct Entry {
        uint8_t dtype = 0;
        Shape shape;
        std::vector<char> bytes;
    };

    struct Reader {
        const std::vector<char>& buf;
        std::size_t pos;
        std::string where;
        void bytes(void* dst, std::size_t n) {
            if (pos + n > buf.size()) throw DependencyError(where + ": truncated archive");
            std::memcpy(dst, buf.data() + pos, n);
            pos += n;
        }
        uint8_t u8() {
            uint8_t v;
            bytes(&v, 1);
            return v;
        }
        uint32_t u32() {
            uint32_t v;
            bytes(&v, 4);
            return v;
        }
        uint64_t u64() {
            uint64_t v;
            bytes(&v, 8);
            return v;
        }
        std::string str() {
            const uint32_t n = u32();
            if (n > (1u << 20)) throw DependencyError(where + ": oversized string");
            std::string s(n, '\0');
            bytes(s.data(), n);
            return s;
        }
    };

    template <typename T>
    static constexpr uint8_t dtype_tag() {
        static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
        return std::is_same_v<T, float> ? 0 : 1;
    }

    template <typename T>
    void put_raw(const std::string& name, uint8_t dtype, const Tensor<T>& t) {
        Entry e;
        e.dtype = dtype;
        e.shape = t.shape;
        e.bytes.resize(t.data.size() * sizeof(T));
        std::memcpy(e.bytes.data(), t.data.data(), e.bytes.size());
        entries_[name] = std::move(e);
    }

    const Entry& find(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw DependencyError("archive tensor missing: " + name);
        return it->second;
    }

    uint64_t hash_entries(const std::string& prefix) const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, e] : entries_) {
            if (name.rfind(prefix, 0) != 0) continue;
            h = fnv1a64(name.data(), name.size(), h);
            h = fnv1a64(&e.dtype, 1, h);
            for (int d : e.shape) {
                const uint32_t v = static_cast<uint32_t>(d);
                h = fnv1a64(&v, 4, h);
            }
            h = fnv1a64(e.bytes.data(), e.bytes.size(), h);
        }
        return h;
    }

    static uint64_t align64(uint64_t x) { return (x + 63) & ~uint64_t(63); }
    static void append(std::vector<char>& buf, const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf.insert(buf.end(), c, c + n);
    }
    static void put_u32(std::vector<char>& buf, uint32_t v) { append(buf, &v, 4); }
    static void put_u64(std::vector<char>& buf, uint64_t v) { append(buf, &v, 8); }
    static void put_str(std::vector<char>& buf, const std::string& s) {
        put_u32(buf, static_cast<uint32_t>(s.size()));
        append(buf, s.data(), s.size());
    }

    std::map<std::string, Entry> entries_;
    std::map<std::string, std::string> meta_;
};

inline std::string hash_hex(uint64_t h) {
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return std::string(out);
}

}  // namespace instid
