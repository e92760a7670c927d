#pragma once

// Geohash: interleaved-bisection base32 encoding of (lat, lon). Longitude
// claims the even-numbered bits (starting from bit 0), each 5-bit group maps
// to one character of the standard alphabet. Longer shared prefixes mean
// geographically closer cells.

#include <array>
#include <string>

#include "poigraph/common.hpp"

namespace poigraph {

inline constexpr const char* kGeohashAlphabet = "0123456789bcdefghjkmnpqrstuvwxyz";
inline constexpr int kGeohashMaxLen = 12;
// Symbol table for the location encoder: [PAD] plus the 32 alphabet chars.
inline constexpr int kGeohashSymbols = 33;
inline constexpr int kGeohashPadIndex = 0;

struct GeoBounds {
  double lat_min, lat_max, lon_min, lon_max;
  bool contains(double lat, double lon) const {
    return lat >= lat_min && lat <= lat_max && lon >= lon_min && lon <= lon_max;
  }
  bool contains(const GeoBounds& inner) const {
    return inner.lat_min >= lat_min && inner.lat_max <= lat_max &&
           inner.lon_min >= lon_min && inner.lon_max <= lon_max;
  }
};

inline int geohash_char_index(char c) {
  static const std::array<int8_t, 256> table = [] {
    std::array<int8_t, 256> t{};
    t.fill(-1);
    for (int i = 0; i < 32; ++i) {
      t[static_cast<unsigned char>(kGeohashAlphabet[i])] = static_cast<int8_t>(i);
    }
    return t;
  }();
  return table[static_cast<unsigned char>(c)];
}

inline void validate_coords(double lat, double lon) {
  if (!(lat >= -90.0 && lat <= 90.0)) {
    throw DataError("latitude out of range [-90, 90]: " + std::to_string(lat));
  }
  if (!(lon >= -180.0 && lon <= 180.0)) {
    throw DataError("longitude out of range [-180, 180]: " + std::to_string(lon));
  }
}

inline std::string geohash_encode(double lat, double lon, int precision) {
  validate_coords(lat, lon);
  if (precision < 1 || precision > kGeohashMaxLen) {
    throw DataError("geohash precision must be in [1, 12]: " + std::to_string(precision));
  }
  double lat_lo = -90.0, lat_hi = 90.0;
  double lon_lo = -180.0, lon_hi = 180.0;
  std::string out;
  out.reserve(static_cast<size_t>(precision));
  bool lon_bit = true;
  int digit = 0, bits = 0;
  while (static_cast<int>(out.size()) < precision) {
    digit <<= 1;
    if (lon_bit) {
      const double mid = (lon_lo + lon_hi) / 2;
      if (lon >= mid) {
        digit |= 1;
        lon_lo = mid;
      } else {
        lon_hi = mid;
      }
    } else {
      const double mid = (lat_lo + lat_hi) / 2;
      if (lat >= mid) {
        digit |= 1;
        lat_lo = mid;
      } else {
        lat_hi = mid;
      }
    }
    lon_bit = !lon_bit;
    if (++bits == 5) {
      out.push_back(kGeohashAlphabet[digit]);
      digit = 0;
      bits = 0;
    }
  }
  return out;
}

inline GeoBounds geohash_bounds(const std::string& g) {
  if (g.empty() || g.size() > kGeohashMaxLen) {
    throw DataError("geohash length must be in [1, 12]: got " + std::to_string(g.size()));
  }
  GeoBounds b{-90.0, 90.0, -180.0, 180.0};
  bool lon_bit = true;
  for (char c : g) {
    const int v = geohash_char_index(c);
    if (v < 0) throw DataError(std::string("invalid geohash character '") + c + "'");
    for (int bit = 4; bit >= 0; --bit) {
      const int on = (v >> bit) & 1;
      if (lon_bit) {
        const double mid = (b.lon_min + b.lon_max) / 2;
        (on ? b.lon_min : b.lon_max) = mid;
      } else {
        const double mid = (b.lat_min + b.lat_max) / 2;
        (on ? b.lat_min : b.lat_max) = mid;
      }
      lon_bit = !lon_bit;
    }
  }
  return b;
}

// Left-pads to exactly 12 symbol indices; [PAD]=0, alphabet chars are 1..32.
inline std::vector<int64_t> pad_and_index(const std::string& g) {
  if (g.empty() || g.size() > kGeohashMaxLen) {
    throw DataError("geohash length must be in [1, 12]: got " + std::to_string(g.size()));
  }
  std::vector<int64_t> out(kGeohashMaxLen, kGeohashPadIndex);
  const size_t start = kGeohashMaxLen - g.size();
  for (size_t i = 0; i < g.size(); ++i) {
    const int v = geohash_char_index(g[i]);
    if (v < 0) throw DataError(std::string("invalid geohash character '") + g[i] + "'");
    out[start + i] = v + 1;
  }
  return out;
}

}  // namespace poigraph
