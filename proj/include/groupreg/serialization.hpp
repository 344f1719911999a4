#pragma once

// JSON mappings for configuration and report types, plus little-endian
// binary helpers shared by the checkpoint and field file formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <vector>

#include "json.hpp"

#include "groupreg/oneshot.hpp"

namespace groupreg {

void to_json(nlohmann::json& j, const NetConfig& c);
void from_json(const nlohmann::json& j, NetConfig& c);
void to_json(nlohmann::json& j, const LossWeights& w);
void from_json(const nlohmann::json& j, LossWeights& w);
void to_json(nlohmann::json& j, const RegConfig& c);
void from_json(const nlohmann::json& j, RegConfig& c);
void to_json(nlohmann::json& j, const LossBreakdown& l);
void from_json(const nlohmann::json& j, LossBreakdown& l);

nlohmann::json report_to_json(const RegReport& report);

namespace binary {

template <class T>
T byteswap_if_big(T value) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char bytes[sizeof(T)];
        std::memcpy(bytes, &value, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
        std::memcpy(&value, bytes, sizeof(T));
    }
    return value;
}

template <class T>
void write_le(std::ostream& os, std::span<const T> values) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (T v : values) {
            const T s = byteswap_if_big(v);
            os.write(reinterpret_cast<const char*>(&s), sizeof(T));
        }
    }
}

template <class T>
void read_le(std::istream& is, std::span<T> values) {
    is.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
    if constexpr (std::endian::native == std::endian::big) {
        for (T& v : values) v = byteswap_if_big(v);
    }
}

} // namespace binary

} // namespace groupreg
