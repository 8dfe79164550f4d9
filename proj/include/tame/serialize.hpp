#pragma once

// Versioned little-endian weight files:
//   magic "TAMEWTS1" | u32 version | u64 config digest | u32 meta length |
//   meta bytes (JSON) | u32 param count | per param: u32 name length, name,
//   u8 dtype (0=f32, 1=f64), u8 rank, u32 dims..., raw values.
// Loading refuses files whose embedded digest does not match the expected one.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tame/error.hpp"
#include "tame/tensor.hpp"

namespace tame {

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

inline uint64_t digest_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    TAME_CHECK_IO(in.good(), "cannot open ", path.string());
    uint64_t h = 0xcbf29ce484222325ull;
    char buf[4096];
    while (in) {
        in.read(buf, sizeof(buf));
        h = fnv1a64(buf, static_cast<size_t>(in.gcount()), h);
    }
    return h;
}

enum class DType : uint8_t { F32 = 0, F64 = 1 };

template <typename T>
constexpr DType dtype_of() {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    return std::is_same_v<T, float> ? DType::F32 : DType::F64;
}

struct NamedParam {
    std::string name;
    DType dtype = DType::F64;
    Shape shape;
    std::vector<double> values;  // converted on load; exact for both dtypes
};

struct WeightFile {
    uint32_t version = 1;
    uint64_t config_digest = 0;
    std::string meta_json;
    std::vector<NamedParam> params;

    const NamedParam* find(const std::string& name) const {
        for (const auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }
};

namespace detail {

constexpr char kWeightMagic[8] = {'T', 'A', 'M', 'E', 'W', 'T', 'S', '1'};
constexpr uint32_t kWeightVersion = 1;

template <typename V>
void write_pod(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    TAME_CHECK_IO(is.good(), "truncated weight file");
    return v;
}

}  // namespace detail

template <typename T>
void save_weights(const std::filesystem::path& path, uint64_t config_digest,
                  const std::string& meta_json,
                  const std::vector<std::pair<std::string, const Tensor<T>*>>& params) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    TAME_CHECK_IO(os.good(), "cannot write ", path.string());
    os.write(detail::kWeightMagic, sizeof(detail::kWeightMagic));
    detail::write_pod<uint32_t>(os, detail::kWeightVersion);
    detail::write_pod<uint64_t>(os, config_digest);
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(meta_json.size()));
    os.write(meta_json.data(), static_cast<std::streamsize>(meta_json.size()));
    detail::write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        detail::write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::write_pod<uint8_t>(os, static_cast<uint8_t>(dtype_of<T>()));
        detail::write_pod<uint8_t>(os, static_cast<uint8_t>(tensor->dim()));
        for (int64_t d : tensor->shape()) detail::write_pod<uint32_t>(os, static_cast<uint32_t>(d));
        os.write(reinterpret_cast<const char*>(tensor->ptr()),
                 static_cast<std::streamsize>(sizeof(T) * tensor->data().size()));
    }
    TAME_CHECK_IO(os.good(), "write failed for ", path.string());
}

// expected_digest == 0 skips the compatibility check (self-describing load).
inline WeightFile load_weights(const std::filesystem::path& path, uint64_t expected_digest = 0) {
    std::ifstream is(path, std::ios::binary);
    TAME_CHECK_IO(is.good(), "cannot open ", path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    TAME_CHECK_IO(is.good() && std::memcmp(magic, detail::kWeightMagic, 8) == 0,
                  "not a tame weight file: ", path.string());
    WeightFile wf;
    wf.version = detail::read_pod<uint32_t>(is);
    TAME_CHECK_IO(wf.version == detail::kWeightVersion, "unsupported weight file version ",
                  wf.version);
    wf.config_digest = detail::read_pod<uint64_t>(is);
    TAME_CHECK_CONFIG(expected_digest == 0 || wf.config_digest == expected_digest,
                      "config digest mismatch for ", path.string(), ": file has ",
                      wf.config_digest, ", expected ", expected_digest);
    uint32_t meta_len = detail::read_pod<uint32_t>(is);
    wf.meta_json.resize(meta_len);
    is.read(wf.meta_json.data(), meta_len);
    uint32_t count = detail::read_pod<uint32_t>(is);
    wf.params.resize(count);
    for (auto& p : wf.params) {
        uint32_t name_len = detail::read_pod<uint32_t>(is);
        p.name.resize(name_len);
        is.read(p.name.data(), name_len);
        p.dtype = static_cast<DType>(detail::read_pod<uint8_t>(is));
        uint8_t rank = detail::read_pod<uint8_t>(is);
        p.shape.resize(rank);
        int64_t numel = 1;
        for (auto& d : p.shape) {
            d = detail::read_pod<uint32_t>(is);
            numel *= d;
        }
        p.values.resize(static_cast<size_t>(numel));
        if (p.dtype == DType::F32) {
            std::vector<float> tmp(static_cast<size_t>(numel));
            is.read(reinterpret_cast<char*>(tmp.data()),
                    static_cast<std::streamsize>(sizeof(float) * tmp.size()));
            for (size_t i = 0; i < tmp.size(); ++i) p.values[i] = tmp[i];
        } else {
            is.read(reinterpret_cast<char*>(p.values.data()),
                    static_cast<std::streamsize>(sizeof(double) * p.values.size()));
        }
        TAME_CHECK_IO(is.good(), "truncated weight file: ", path.string());
    }
    return wf;
}

template <typename T>
void assign_param(Tensor<T>& dst, const WeightFile& wf, const std::string& name) {
    const NamedParam* p = wf.find(name);
    TAME_CHECK_IO(p != nullptr, "weight file missing parameter ", name);
    TAME_CHECK_SHAPE(p->shape == dst.shape(), "parameter ", name, " has shape ",
                     shape_str(p->shape), ", expected ", shape_str(dst.shape()));
    for (size_t i = 0; i < p->values.size(); ++i) dst.data()[i] = static_cast<T>(p->values[i]);
}

}  // namespace tame
