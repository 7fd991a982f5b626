#pragma once

#include <cstdint>
#include <cstring>

namespace autocomp {

// IEEE 754 binary16 conversions (round to nearest even). Used by the summary
// store's float16 on-disk mode.

inline std::uint16_t float_to_half(float value) {
    std::uint32_t bits;
    std::memcpy(&bits, &value, 4);
    std::uint32_t sign = (bits >> 16) & 0x8000u;
    std::int32_t exponent = static_cast<std::int32_t>((bits >> 23) & 0xffu) - 127 + 15;
    std::uint32_t mantissa = bits & 0x7fffffu;

    if (exponent >= 0x1f) {
        // overflow or inf/nan
        if (((bits >> 23) & 0xffu) == 0xffu && mantissa != 0) {
            return static_cast<std::uint16_t>(sign | 0x7e00u);  // nan
        }
        return static_cast<std::uint16_t>(sign | 0x7c00u);  // inf
    }
    if (exponent <= 0) {
        if (exponent < -10) return static_cast<std::uint16_t>(sign);  // underflow to zero
        // subnormal: shift in the implicit bit
        mantissa |= 0x800000u;
        int shift = 14 - exponent;
        std::uint32_t half_mant = mantissa >> shift;
        std::uint32_t rem = mantissa & ((1u << shift) - 1);
        std::uint32_t halfway = 1u << (shift - 1);
        if (rem > halfway || (rem == halfway && (half_mant & 1))) half_mant++;
        return static_cast<std::uint16_t>(sign | half_mant);
    }
    std::uint32_t half_mant = mantissa >> 13;
    std::uint32_t rem = mantissa & 0x1fffu;
    if (rem > 0x1000u || (rem == 0x1000u && (half_mant & 1))) {
        half_mant++;
        if (half_mant == 0x400u) {
            half_mant = 0;
            exponent++;
            if (exponent >= 0x1f) return static_cast<std::uint16_t>(sign | 0x7c00u);
        }
    }
    return static_cast<std::uint16_t>(sign | (static_cast<std::uint32_t>(exponent) << 10) | half_mant);
}

inline float half_to_float(std::uint16_t h) {
    std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    std::uint32_t exponent = (h >> 10) & 0x1fu;
    std::uint32_t mantissa = h & 0x3ffu;
    std::uint32_t bits;

    if (exponent == 0) {
        if (mantissa == 0) {
            bits = sign;
        } else {
            // normalize the subnormal
            int e = -1;
            do {
                e++;
                mantissa <<= 1;
            } while ((mantissa & 0x400u) == 0);
            mantissa &= 0x3ffu;
            bits = sign | static_cast<std::uint32_t>(127 - 15 - e) << 23 | (mantissa << 13);
        }
    } else if (exponent == 0x1f) {
        bits = sign | 0x7f800000u | (mantissa << 13);
    } else {
        bits = sign | ((exponent - 15 + 127) << 23) | (mantissa << 13);
    }
    float out;
    std::memcpy(&out, &bits, 4);
    return out;
}

}  // namespace autocomp
