/*
 * Copyright 2026 The elan-sr Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Binary PPM images and the fixed-layout checkpoint format.

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "elan/metrics.hpp"
#include "elan/network.hpp"

namespace elan {

class FormatError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// PPM

inline constexpr std::size_t kMaxImageExtent = 1u << 15;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw Error("write failed: " + path);
}

// Header token reader; '#' comments run to end of line.
struct PnmCursor {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  }

  std::uint64_t number(const char* what) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) throw FormatError(std::string("ppm: malformed header, missing ") + what);
    std::uint64_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > (1ull << 32)) throw FormatError(std::string("ppm: ") + what + " overflows");
    }
    return v;
  }
};

}  // namespace detail

/// Decodes a binary (P6) PPM. maxval below 255 is rescaled to the 8-bit range.
inline Image decode_ppm(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P') throw FormatError("ppm: not a PNM file");
  if (bytes[1] != '6') {
    throw FormatError(std::string("ppm: unsupported format P") + char(bytes[1]) + ", only binary RGB (P6) is read");
  }
  detail::PnmCursor cur{bytes, 2};
  const auto width = cur.number("width");
  const auto height = cur.number("height");
  const auto maxval = cur.number("maxval");
  if (width == 0 || height == 0) throw FormatError("ppm: zero image dimension");
  if (width > kMaxImageExtent || height > kMaxImageExtent) {
    throw FormatError("ppm: dimensions " + std::to_string(width) + "x" + std::to_string(height) + " exceed the limit");
  }
  if (maxval == 0 || maxval > 255) throw FormatError("ppm: only 8-bit samples are supported (maxval " + std::to_string(maxval) + ")");
  if (cur.pos >= bytes.size() || !std::isspace(bytes[cur.pos])) throw FormatError("ppm: malformed header");
  ++cur.pos;
  const std::size_t n = std::size_t(width) * height;
  if (bytes.size() - cur.pos < 3 * n) throw FormatError("ppm: truncated pixel data");
  Image img(height, width);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const double v = bytes[cur.pos + 3 * i + c];
      img.plane(c)[i] = maxval == 255 ? v : std::nearbyint(v * 255.0 / double(maxval));
    }
  return img;
}

/// Encodes as P6 with maxval 255; samples are rounded and clamped.
inline std::vector<unsigned char> encode_ppm(const Image& img) {
  if (img.space != ColorSpace::rgb) throw Error("ppm: only RGB images can be written");
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  const Image q = quantize(img);
  out.reserve(out.size() + 3 * img.plane_size());
  for (std::size_t i = 0; i < img.plane_size(); ++i)
    for (std::size_t c = 0; c < 3; ++c) out.push_back(static_cast<unsigned char>(q.plane(c)[i]));
  return out;
}

inline Image read_image(const std::string& path) { return decode_ppm(detail::read_file(path)); }
inline void write_image(const Image& img, const std::string& path) { detail::write_file(path, encode_ppm(img)); }

// ---------------------------------------------------------------------------
// checkpoints

class CheckpointError : public Error {
 public:
  enum class Kind { io, bad_magic, truncated, checksum, config };
  CheckpointError(Kind kind, const std::string& what) : Error("checkpoint: " + what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr std::array<char, 5> kCheckpointMagic{'E', 'L', 'A', 'N', '1'};

inline std::uint64_t fnv1a64(const unsigned char* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace detail {

template <class U>
void put_le(std::vector<unsigned char>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>((std::uint64_t(v) >> (8 * i)) & 0xff));
}

struct ByteReader {
  const std::vector<unsigned char>& bytes;
  std::size_t pos = 0;

  template <class U>
  U get(const char* what) {
    if (bytes.size() - pos < sizeof(U)) {
      throw CheckpointError(CheckpointError::Kind::truncated, std::string("file ends inside ") + what);
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= std::uint64_t(bytes[pos + i]) << (8 * i);
    pos += sizeof(U);
    return static_cast<U>(v);
  }
};

}  // namespace detail

/// "ELAN1", u32 config fields, u64 scalar count, f32 blob, u64 FNV-1a of the blob; all little-endian.
inline std::vector<unsigned char> encode_checkpoint(const ElanWeights<float>& w, const ElanConfig& cfg) {
  cfg.validate();
  std::vector<unsigned char> out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  const auto u32 = [&](std::size_t v) { detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(v)); };
  u32(cfg.num_blocks);
  u32(cfg.channels);
  u32(cfg.share_depth);
  u32(cfg.scale);
  u32(cfg.expansion);
  u32(cfg.gmsa.heads_per_group);
  u32(cfg.gmsa.groups());
  for (auto m : cfg.gmsa.window_sizes) u32(m);
  for (auto c : cfg.gmsa.group_channels) u32(c);

  const std::size_t scalars = allocated_scalars(w);
  if (scalars != count_params(cfg)) throw CheckpointError(CheckpointError::Kind::config, "weights do not match the configuration");
  detail::put_le<std::uint64_t>(out, scalars);
  const std::size_t blob_start = out.size();
  for_each_tensor(w, [&](const std::string&, const Tensor<float>& t, bool) {
    for (float v : t.data()) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  });
  detail::put_le<std::uint64_t>(out, fnv1a64(out.data() + blob_start, out.size() - blob_start));
  return out;
}

struct Checkpoint {
  ElanWeights<float> weights;
  ElanConfig config;
};

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < kCheckpointMagic.size() || !std::equal(kCheckpointMagic.begin(), kCheckpointMagic.end(), bytes.begin())) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "bad magic, not an ELAN1 checkpoint");
  }
  detail::ByteReader rd{bytes, kCheckpointMagic.size()};
  ElanConfig cfg;
  cfg.num_blocks = rd.get<std::uint32_t>("config");
  cfg.channels = rd.get<std::uint32_t>("config");
  cfg.share_depth = rd.get<std::uint32_t>("config");
  cfg.scale = rd.get<std::uint32_t>("config");
  cfg.expansion = rd.get<std::uint32_t>("config");
  cfg.gmsa.heads_per_group = rd.get<std::uint32_t>("config");
  const std::size_t groups = rd.get<std::uint32_t>("config");
  if (groups == 0 || groups > 64) throw CheckpointError(CheckpointError::Kind::config, "implausible group count " + std::to_string(groups));
  cfg.gmsa.window_sizes.resize(groups);
  cfg.gmsa.group_channels.resize(groups);
  for (auto& m : cfg.gmsa.window_sizes) m = rd.get<std::uint32_t>("config");
  for (auto& c : cfg.gmsa.group_channels) c = rd.get<std::uint32_t>("config");
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw CheckpointError(CheckpointError::Kind::config, std::string("invalid configuration: ") + e.what());
  }
  const auto scalars = rd.get<std::uint64_t>("scalar count");
  if (scalars != count_params(cfg)) {
    throw CheckpointError(CheckpointError::Kind::config, "scalar count " + std::to_string(scalars) +
                                                             " disagrees with the configuration (" +
                                                             std::to_string(count_params(cfg)) + ")");
  }
  const std::size_t blob_start = rd.pos;
  if ((bytes.size() - blob_start) / 4 < scalars || bytes.size() - blob_start - 4 * scalars < 8) {
    throw CheckpointError(CheckpointError::Kind::truncated, "file ends inside the parameter blob or checksum");
  }
  if (bytes.size() - blob_start - 4 * scalars > 8) {
    throw CheckpointError(CheckpointError::Kind::truncated, "trailing bytes after the checksum");
  }
  detail::ByteReader trailer{bytes, blob_start + 4 * scalars};
  if (trailer.get<std::uint64_t>("checksum") != fnv1a64(bytes.data() + blob_start, 4 * scalars)) {
    throw CheckpointError(CheckpointError::Kind::checksum, "checksum mismatch, file is corrupted");
  }
  Checkpoint ck{build<float>(cfg, 0), cfg};
  for_each_tensor(ck.weights, [&](const std::string&, Tensor<float>& t, bool) {
    for (float& v : t.data()) v = std::bit_cast<float>(rd.get<std::uint32_t>("blob"));
  });
  return ck;
}

inline void save_checkpoint(const ElanWeights<float>& w, const ElanConfig& cfg, const std::string& path) {
  detail::write_file(path, encode_checkpoint(w, cfg));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::vector<unsigned char> bytes;
  try {
    bytes = detail::read_file(path);
  } catch (const Error& e) {
    throw CheckpointError(CheckpointError::Kind::io, e.what());
  }
  return decode_checkpoint(bytes);
}

}  // namespace elan
