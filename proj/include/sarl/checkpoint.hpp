#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "sarl/tensor.hpp"

namespace sarl {

// Versioned binary checkpoint container. Sections are named tensor maps so
// round-trip loads resume training bit-exactly.
namespace ckpt {

constexpr uint32_t kMagic = 0x4C524153u;  // "SARL"
constexpr uint32_t kVersion = 1;

template <class T>
void write_tensor_map(std::ofstream& f, const std::map<std::string, Tensor<T>>& m) {
    uint64_t n = m.size();
    f.write(reinterpret_cast<const char*>(&n), sizeof(n));
    for (const auto& [name, t] : m) {
        uint64_t len = name.size();
        f.write(reinterpret_cast<const char*>(&len), sizeof(len));
        f.write(name.data(), static_cast<std::streamsize>(len));
        uint32_t rank = static_cast<uint32_t>(t.shape.size());
        f.write(reinterpret_cast<const char*>(&rank), sizeof(rank));
        for (int d : t.shape) {
            int32_t dd = d;
            f.write(reinterpret_cast<const char*>(&dd), sizeof(dd));
        }
        f.write(reinterpret_cast<const char*>(t.v.data()),
                static_cast<std::streamsize>(t.v.size() * sizeof(T)));
    }
}

template <class T>
std::map<std::string, Tensor<T>> read_tensor_map(std::ifstream& f) {
    std::map<std::string, Tensor<T>> m;
    uint64_t n = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof(n));
    for (uint64_t i = 0; i < n; ++i) {
        uint64_t len = 0;
        f.read(reinterpret_cast<char*>(&len), sizeof(len));
        std::string name(len, '\0');
        f.read(name.data(), static_cast<std::streamsize>(len));
        uint32_t rank = 0;
        f.read(reinterpret_cast<char*>(&rank), sizeof(rank));
        std::vector<int> shape(rank);
        for (auto& d : shape) {
            int32_t dd = 0;
            f.read(reinterpret_cast<char*>(&dd), sizeof(dd));
            d = dd;
        }
        Tensor<T> t(shape);
        f.read(reinterpret_cast<char*>(t.v.data()),
               static_cast<std::streamsize>(t.v.size() * sizeof(T)));
        m.emplace(std::move(name), std::move(t));
    }
    if (!f) throw std::runtime_error("checkpoint: truncated tensor section");
    return m;
}

inline void write_string(std::ofstream& f, const std::string& s) {
    uint64_t len = s.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(s.data(), static_cast<std::streamsize>(len));
}

inline std::string read_string(std::ifstream& f) {
    uint64_t len = 0;
    f.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string s(len, '\0');
    f.read(s.data(), static_cast<std::streamsize>(len));
    return s;
}

}  // namespace ckpt

}  // namespace sarl
