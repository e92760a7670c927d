#pragma once

// Shared utilities: error taxonomy, UTF-8 handling, text normalization,
// hashing, and little-endian binary IO used by the file containers.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace poigraph {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user-supplied configuration or arguments.
struct ConfigError : Error {
  using Error::Error;
};
// Malformed or contract-violating input data.
struct DataError : Error {
  using Error::Error;
};
// Tensor dimension mismatches.
struct ShapeError : Error {
  using Error::Error;
};
// NaN/Inf states, failed gradient checks.
struct NumericError : Error {
  using Error::Error;
};
// Optimizer called in an inconsistent state (e.g. missing gradients).
struct TrainingStateError : Error {
  using Error::Error;
};
// File and container format problems.
struct IoError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// UTF-8

// Decodes a UTF-8 string into codepoints. Invalid byte sequences decode to
// U+FFFD, one replacement per offending byte, so decoding never fails.
inline std::vector<uint32_t> utf8_decode(std::string_view s) {
  std::vector<uint32_t> out;
  out.reserve(s.size());
  size_t i = 0;
  while (i < s.size()) {
    const auto b0 = static_cast<unsigned char>(s[i]);
    uint32_t cp = 0xFFFD;
    size_t len = 1;
    if (b0 < 0x80) {
      cp = b0;
    } else if ((b0 >> 5) == 0x6) {
      len = 2;
      cp = b0 & 0x1F;
    } else if ((b0 >> 4) == 0xE) {
      len = 3;
      cp = b0 & 0x0F;
    } else if ((b0 >> 3) == 0x1E) {
      len = 4;
      cp = b0 & 0x07;
    } else {
      out.push_back(0xFFFD);
      ++i;
      continue;
    }
    if (len > 1) {
      if (i + len > s.size()) {
        out.push_back(0xFFFD);
        ++i;
        continue;
      }
      bool ok = true;
      uint32_t acc = cp;
      for (size_t k = 1; k < len; ++k) {
        const auto bk = static_cast<unsigned char>(s[i + k]);
        if ((bk >> 6) != 0x2) {
          ok = false;
          break;
        }
        acc = (acc << 6) | (bk & 0x3F);
      }
      if (!ok) {
        out.push_back(0xFFFD);
        ++i;
        continue;
      }
      cp = acc;
      // Reject overlong encodings and surrogates.
      if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) ||
          (len == 4 && cp < 0x10000) || (cp >= 0xD800 && cp <= 0xDFFF) ||
          cp > 0x10FFFF) {
        cp = 0xFFFD;
      }
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

inline void utf8_append(std::string& out, uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

inline std::string utf8_encode(const std::vector<uint32_t>& cps) {
  std::string out;
  out.reserve(cps.size());
  for (uint32_t cp : cps) utf8_append(out, cp);
  return out;
}

// Simple case folding for the scripts this project traffics in
// (ASCII, Latin-1 supplement, Greek, Cyrillic). Not full Unicode folding.
inline uint32_t fold_codepoint(uint32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 0x20;
  if (cp >= 0xC0 && cp <= 0xDE && cp != 0xD7) return cp + 0x20;   // À..Þ
  if (cp >= 0x391 && cp <= 0x3A9 && cp != 0x3A2) return cp + 0x20; // Α..Ω
  if (cp >= 0x410 && cp <= 0x42F) return cp + 0x20;                // А..Я
  if (cp >= 0x400 && cp <= 0x40F) return cp + 0x50;                // Ѐ..Џ
  return cp;
}

inline bool is_space_cp(uint32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == 0xA0 ||
         cp == 0x3000;
}

// Canonical query identity: case fold + collapse whitespace runs + trim.
inline std::string normalize_query(std::string_view raw) {
  std::vector<uint32_t> cps = utf8_decode(raw);
  std::vector<uint32_t> out;
  out.reserve(cps.size());
  bool pending_gap = false;
  for (uint32_t cp : cps) {
    if (is_space_cp(cp)) {
      if (!out.empty()) pending_gap = true;
      continue;
    }
    if (pending_gap) {
      out.push_back(' ');
      pending_gap = false;
    }
    out.push_back(fold_codepoint(cp));
  }
  return utf8_encode(out);
}

// ---------------------------------------------------------------------------
// Hashing

// FNV-1a, 64-bit. Used for config fingerprints and artifact digests.
inline uint64_t fnv1a64(const void* data, size_t n,
                        uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size());
}

inline std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xF];
    v >>= 4;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Little-endian binary IO

inline void put_u32le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline uint32_t get_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

inline uint64_t get_u64le(const unsigned char* p) {
  uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

// ---------------------------------------------------------------------------
// Files

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return data;
}

// Write-then-rename so partially written artifacts are never observable.
inline void write_file_atomic(const std::string& path, std::string_view data) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open file for writing: " + tmp);
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw IoError("write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    throw IoError("rename failed: " + tmp + " -> " + path);
  }
}

inline uint64_t file_digest(const std::string& path) {
  return fnv1a64(read_file(path));
}

}  // namespace poigraph
