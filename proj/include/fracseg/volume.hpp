#pragma once

// Physical-space scalar volumes and the VOL1 container format.
// Header: `VOL1 <dtype:f32|u8> <D> <H> <W> <sx> <sy> <sz>\n` then raw
// little-endian payload, row-major, width fastest. Spacing in mm; sx maps to
// the width axis, sy to height, sz to depth.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "fracseg/common.hpp"

namespace fracseg {

struct Volume {
  int extents[3] = {0, 0, 0};       // D, H, W
  double spacing[3] = {1, 1, 1};    // mm per voxel along D, H, W
  std::vector<float> data;          // row-major, width fastest

  int64_t voxels() const { return static_cast<int64_t>(extents[0]) * extents[1] * extents[2]; }
  int64_t index(int d, int h, int w) const {
    return (static_cast<int64_t>(d) * extents[1] + h) * extents[2] + w;
  }
  float& at(int d, int h, int w) { return data[static_cast<size_t>(index(d, h, w))]; }
  float at(int d, int h, int w) const { return data[static_cast<size_t>(index(d, h, w))]; }

  static Volume make(int d, int h, int w, double sd = 1, double sh = 1, double sw = 1) {
    Volume v;
    v.extents[0] = d; v.extents[1] = h; v.extents[2] = w;
    v.spacing[0] = sd; v.spacing[1] = sh; v.spacing[2] = sw;
    v.data.assign(static_cast<size_t>(v.voxels()), 0.0f);
    return v;
  }
};

struct LabelVolume {
  int extents[3] = {0, 0, 0};
  double spacing[3] = {1, 1, 1};
  std::vector<uint8_t> labels;      // 0 background, 1 bone

  int64_t voxels() const { return static_cast<int64_t>(extents[0]) * extents[1] * extents[2]; }
  int64_t index(int d, int h, int w) const {
    return (static_cast<int64_t>(d) * extents[1] + h) * extents[2] + w;
  }
  uint8_t& at(int d, int h, int w) { return labels[static_cast<size_t>(index(d, h, w))]; }
  uint8_t at(int d, int h, int w) const { return labels[static_cast<size_t>(index(d, h, w))]; }

  static LabelVolume make(int d, int h, int w, double sd = 1, double sh = 1, double sw = 1) {
    LabelVolume v;
    v.extents[0] = d; v.extents[1] = h; v.extents[2] = w;
    v.spacing[0] = sd; v.spacing[1] = sh; v.spacing[2] = sw;
    v.labels.assign(static_cast<size_t>(v.voxels()), 0);
    return v;
  }

  int64_t foreground_count() const {
    return std::accumulate(labels.begin(), labels.end(), int64_t{0});
  }
};

template <typename A, typename B>
inline bool same_geometry(const A& a, const B& b) {
  for (int i = 0; i < 3; ++i)
    if (a.extents[i] != b.extents[i] || a.spacing[i] != b.spacing[i]) return false;
  return true;
}

template <typename A, typename B>
inline void require_same_geometry(const A& a, const B& b, const char* what) {
  if (!same_geometry(a, b))
    throw DataError(std::string(what) + ": volume/label geometry mismatch");
}

namespace detail {

struct Vol1Header {
  std::string dtype;
  int extents[3];
  double spacing[3];
};

inline Vol1Header read_vol1_header(std::istream& is, const std::string& path) {
  std::string line;
  if (!std::getline(is, line))
    throw DataError("VOL1 read " + path + ": missing header");
  std::istringstream hs(line);
  std::string magic;
  Vol1Header h;
  hs >> magic >> h.dtype >> h.extents[0] >> h.extents[1] >> h.extents[2]
     >> h.spacing[2] >> h.spacing[1] >> h.spacing[0];
  if (magic != "VOL1")
    throw DataError("VOL1 read " + path + ": magic mismatch (got '" + magic + "')");
  if (hs.fail() || (h.dtype != "f32" && h.dtype != "u8"))
    throw DataError("VOL1 read " + path + ": malformed header");
  for (int i = 0; i < 3; ++i) {
    if (h.extents[i] <= 0) throw DataError("VOL1 read " + path + ": non-positive extent");
    if (!(h.spacing[i] > 0)) throw DataError("VOL1 read " + path + ": non-positive spacing");
  }
  return h;
}

inline std::string vol1_header_line(const char* dtype, const int* extents,
                                    const double* spacing) {
  std::ostringstream os;
  os.precision(17);
  os << "VOL1 " << dtype << " " << extents[0] << " " << extents[1] << " " << extents[2]
     << " " << spacing[2] << " " << spacing[1] << " " << spacing[0] << "\n";
  return os.str();
}

}  // namespace detail

inline void write_volume(const Volume& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("VOL1 write: cannot open " + path);
  os << detail::vol1_header_line("f32", v.extents, v.spacing);
  os.write(reinterpret_cast<const char*>(v.data.data()),
           static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (!os) throw DataError("VOL1 write: short write to " + path);
}

inline void write_volume(const LabelVolume& v, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("VOL1 write: cannot open " + path);
  os << detail::vol1_header_line("u8", v.extents, v.spacing);
  os.write(reinterpret_cast<const char*>(v.labels.data()),
           static_cast<std::streamsize>(v.labels.size()));
  if (!os) throw DataError("VOL1 write: short write to " + path);
}

inline Volume read_volume_f32(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("VOL1 read: cannot open " + path);
  auto h = detail::read_vol1_header(is, path);
  if (h.dtype != "f32") throw DataError("VOL1 read " + path + ": expected f32, got " + h.dtype);
  Volume v = Volume::make(h.extents[0], h.extents[1], h.extents[2],
                          h.spacing[0], h.spacing[1], h.spacing[2]);
  is.read(reinterpret_cast<char*>(v.data.data()),
          static_cast<std::streamsize>(v.data.size() * sizeof(float)));
  if (is.gcount() != static_cast<std::streamsize>(v.data.size() * sizeof(float)))
    throw DataError("VOL1 read " + path + ": truncated payload");
  return v;
}

inline LabelVolume read_volume_u8(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("VOL1 read: cannot open " + path);
  auto h = detail::read_vol1_header(is, path);
  if (h.dtype != "u8") throw DataError("VOL1 read " + path + ": expected u8, got " + h.dtype);
  LabelVolume v = LabelVolume::make(h.extents[0], h.extents[1], h.extents[2],
                                    h.spacing[0], h.spacing[1], h.spacing[2]);
  is.read(reinterpret_cast<char*>(v.labels.data()),
          static_cast<std::streamsize>(v.labels.size()));
  if (is.gcount() != static_cast<std::streamsize>(v.labels.size()))
    throw DataError("VOL1 read " + path + ": truncated payload");
  for (uint8_t l : v.labels)
    if (l > 1) throw DataError("VOL1 read " + path + ": label value > 1");
  return v;
}

// Deterministic shuffle-split; train gets round(n * ratio) ids.
inline std::pair<std::vector<std::string>, std::vector<std::string>> split_dataset(
    std::vector<std::string> ids, double ratio, uint64_t seed) {
  if (ids.empty()) throw DataError("split_dataset: empty id list");
  if (!(ratio > 0.0 && ratio < 1.0)) throw DataError("split_dataset: ratio must be in (0,1)");
  Rng rng(seed);
  for (size_t i = ids.size(); i > 1; --i)
    std::swap(ids[i - 1], ids[static_cast<size_t>(uniform_index(rng, static_cast<int64_t>(i)))]);
  // ceil, so 103 ids at 0.8 give the 83/20 split
  const size_t n_train = static_cast<size_t>(
      std::ceil(ratio * static_cast<double>(ids.size()) - 1e-9));
  std::vector<std::string> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  std::vector<std::string> test(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  return {train, test};
}

}  // namespace fracseg
