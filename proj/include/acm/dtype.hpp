// Copyright 2026 The ACM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "acm/error.hpp"

namespace acm {

enum class DType { F32, F64, BF16 };

inline std::size_t dtype_size(DType dt) {
    switch (dt) {
    case DType::F32: return 4;
    case DType::F64: return 8;
    case DType::BF16: return 2;
    }
    return 0;
}

inline std::string_view dtype_name(DType dt) {
    switch (dt) {
    case DType::F32: return "F32";
    case DType::F64: return "F64";
    case DType::BF16: return "BF16";
    }
    return "?";
}

inline std::optional<DType> parse_dtype(std::string_view name) {
    if (name == "F32") return DType::F32;
    if (name == "F64") return DType::F64;
    if (name == "BF16") return DType::BF16;
    return std::nullopt;
}

// ---------------------------------------------------------------------------
// BF16 <-> F32. BF16 is the upper half of an IEEE binary32, so widening is a
// shift and narrowing is round-to-nearest-even on the dropped 16 bits.

inline float bf16_to_f32(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

inline std::uint16_t f32_to_bf16(float value) {
    auto bits = std::bit_cast<std::uint32_t>(value);
    if (std::isnan(value)) {
        // keep sign, force a quiet NaN so truncation cannot produce infinity
        return static_cast<std::uint16_t>((bits >> 16) | 0x0040u);
    }
    const std::uint32_t lsb = (bits >> 16) & 1u;
    bits += 0x7FFFu + lsb;
    return static_cast<std::uint16_t>(bits >> 16);
}

/// F64 -> F32 rounded to odd. Used as the intermediate step of F64 -> BF16 so
/// the final round-to-nearest-even is not spoiled by double rounding.
inline float f64_to_f32_round_odd(double value) {
    float f = static_cast<float>(value);
    if (std::isnan(value) || std::isinf(f) || static_cast<double>(f) == value) return f;
    if (std::fabs(static_cast<double>(f)) > std::fabs(value)) f = std::nextafter(f, 0.0f);
    return std::bit_cast<float>(std::bit_cast<std::uint32_t>(f) | 1u);
}

inline std::uint16_t f64_to_bf16(double value) { return f32_to_bf16(f64_to_f32_round_odd(value)); }

// ---------------------------------------------------------------------------
// Raw little-endian payload <-> host values. Only little-endian hosts are
// supported; the container format is little-endian.

static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");

inline double load_element(std::span<const std::byte> bytes, DType dt, std::size_t index) {
    switch (dt) {
    case DType::F32: {
        float v;
        std::memcpy(&v, bytes.data() + index * 4, 4);
        return v;
    }
    case DType::F64: {
        double v;
        std::memcpy(&v, bytes.data() + index * 8, 8);
        return v;
    }
    case DType::BF16: {
        std::uint16_t v;
        std::memcpy(&v, bytes.data() + index * 2, 2);
        return bf16_to_f32(v);
    }
    }
    return 0.0;
}

inline void store_element(std::span<std::byte> bytes, DType dt, std::size_t index, double value) {
    switch (dt) {
    case DType::F32: {
        const auto v = static_cast<float>(value);
        std::memcpy(bytes.data() + index * 4, &v, 4);
        break;
    }
    case DType::F64:
        std::memcpy(bytes.data() + index * 8, &value, 8);
        break;
    case DType::BF16: {
        const auto v = f64_to_bf16(value);
        std::memcpy(bytes.data() + index * 2, &v, 2);
        break;
    }
    }
}

/// Re-encodes a payload from one dtype into another. Widening is exact;
/// narrowing rounds to nearest even.
inline std::vector<std::byte> convert_payload(std::span<const std::byte> bytes, DType from, DType to) {
    if (from == to) return {bytes.begin(), bytes.end()};
    const std::size_t n = bytes.size() / dtype_size(from);
    std::vector<std::byte> out(n * dtype_size(to));
    if (from == DType::F32 && to == DType::BF16) {
        for (std::size_t i = 0; i < n; ++i) {
            float v;
            std::memcpy(&v, bytes.data() + i * 4, 4);
            const auto b = f32_to_bf16(v);
            std::memcpy(out.data() + i * 2, &b, 2);
        }
        return out;
    }
    for (std::size_t i = 0; i < n; ++i) store_element(out, to, i, load_element(bytes, from, i));
    return out;
}

}  // namespace acm
