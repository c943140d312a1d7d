#ifndef DAREC_SHAPE_IO_HPP_
#define DAREC_SHAPE_IO_HPP_

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "darec/common.hpp"
#include "darec/geometry.hpp"

namespace darec {

// ---------------------------------------------------------------------------
// Voxel file format (.dvox): 16-byte header then row-major payload.
//   bytes 0..3   magic "DVOX"
//   bytes 4..7   version (u32 little-endian, currently 1)
//   bytes 8..11  resolution (u32 little-endian)
//   bytes 12..15 value kind (u32): 0 = binary bitpacked, 1 = float32
// Payload order matches VoxelGrid's linear index (x fastest). Bitpacked
// cells map linear index n to byte n/8, bit n%8 (least significant first).
// ---------------------------------------------------------------------------

enum class VoxelValueKind : std::uint32_t {
  kBinaryBitpacked = 0,
  kFloat32 = 1,
};

inline constexpr std::uint32_t kVoxelFormatVersion = 1;

inline std::vector<unsigned char> encode_voxels(const VoxelGrid& grid,
                                                VoxelValueKind kind) {
  if (kind == VoxelValueKind::kBinaryBitpacked && !grid.is_binary())
    throw InvalidInputError("encode_voxels: bitpacked kind requires a binary grid");
  std::vector<unsigned char> buf;
  buf.reserve(16 + grid.cell_count());
  for (char c : {'D', 'V', 'O', 'X'}) buf.push_back(static_cast<unsigned char>(c));
  append_le<std::uint32_t>(buf, kVoxelFormatVersion);
  append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(grid.resolution()));
  append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(kind));
  const auto& vals = grid.values();
  if (kind == VoxelValueKind::kBinaryBitpacked) {
    const std::size_t nbytes = (vals.size() + 7) / 8;
    std::vector<unsigned char> packed(nbytes, 0);
    for (std::size_t n = 0; n < vals.size(); ++n)
      if (vals[n] == 1.0f) packed[n / 8] |= static_cast<unsigned char>(1u << (n % 8));
    buf.insert(buf.end(), packed.begin(), packed.end());
  } else {
    for (float v : vals) append_le<float>(buf, v);
  }
  return buf;
}

inline VoxelGrid decode_voxels(const std::vector<unsigned char>& buf,
                               const std::string& origin = "<memory>") {
  if (buf.size() < 16 || buf[0] != 'D' || buf[1] != 'V' || buf[2] != 'O' || buf[3] != 'X')
    throw IoError("decode_voxels: bad magic in " + origin);
  const auto version = read_le<std::uint32_t>(buf.data() + 4);
  if (version != kVoxelFormatVersion)
    throw IoError("decode_voxels: unsupported version in " + origin);
  const auto resolution = read_le<std::uint32_t>(buf.data() + 8);
  const auto kind = read_le<std::uint32_t>(buf.data() + 12);
  if (resolution < 2) throw IoError("decode_voxels: resolution < 2 in " + origin);
  VoxelGrid grid(resolution);
  const std::size_t cells = grid.cell_count();
  if (kind == static_cast<std::uint32_t>(VoxelValueKind::kBinaryBitpacked)) {
    const std::size_t nbytes = (cells + 7) / 8;
    if (buf.size() != 16 + nbytes)
      throw IoError("decode_voxels: truncated bitpacked payload in " + origin);
    for (std::size_t n = 0; n < cells; ++n)
      grid.values()[n] = (buf[16 + n / 8] >> (n % 8)) & 1u ? 1.0f : 0.0f;
  } else if (kind == static_cast<std::uint32_t>(VoxelValueKind::kFloat32)) {
    if (buf.size() != 16 + 4 * cells)
      throw IoError("decode_voxels: truncated float payload in " + origin);
    for (std::size_t n = 0; n < cells; ++n) {
      const float v = read_le<float>(buf.data() + 16 + 4 * n);
      if (!(v >= 0.0f && v <= 1.0f))
        throw IoError("decode_voxels: occupancy outside [0,1] in " + origin);
      grid.values()[n] = v;
    }
  } else {
    throw IoError("decode_voxels: unknown value kind in " + origin);
  }
  return grid;
}

inline void write_file_bytes(const std::string& path,
                             const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return bytes;
}

/// Binary grids default to the compact bitpacked kind, everything else to
/// float32.
inline void save_voxels(const VoxelGrid& grid, const std::string& path) {
  const VoxelValueKind kind =
      grid.is_binary() ? VoxelValueKind::kBinaryBitpacked : VoxelValueKind::kFloat32;
  write_file_bytes(path, encode_voxels(grid, kind));
}

inline void save_voxels(const VoxelGrid& grid, const std::string& path,
                        VoxelValueKind kind) {
  write_file_bytes(path, encode_voxels(grid, kind));
}

inline VoxelGrid load_voxels(const std::string& path) {
  return decode_voxels(read_file_bytes(path), path);
}

// ---------------------------------------------------------------------------
// Point cloud format: ASCII, one "x y z" triple per line, '#' comments.
// ---------------------------------------------------------------------------

inline void save_pointcloud(const PointCloud& cloud, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  char line[128];
  for (const auto& p : cloud.points) {
    std::snprintf(line, sizeof(line), "%.17g %.17g %.17g\n", p[0], p[1], p[2]);
    out << line;
  }
  if (!out) throw IoError("write failed: " + path);
}

inline PointCloud load_pointcloud(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ss(line);
    double x, y, z;
    if (ss >> x >> y >> z) {
      cloud.points.push_back({x, y, z});
    } else if (!line.empty() && line.find_first_not_of(" \t\r") != std::string::npos) {
      throw IoError("malformed point at " + path + ":" + std::to_string(lineno));
    }
  }
  return cloud;
}

}  // namespace darec

#endif  // DAREC_SHAPE_IO_HPP_
