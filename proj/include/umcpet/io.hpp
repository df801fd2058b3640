#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "umcpet/common.hpp"
#include "umcpet/field.hpp"
#include "umcpet/volume.hpp"

namespace umcpet {

// Volumes and fields are raw little-endian f32 arrays (x fastest) next to a
// text sidecar `<path>.hdr` describing the grid.

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_raw_f32(const std::string& path, const float* data, std::size_t n) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(Error::Kind::Invalid, "cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(float)));
  if (!f) throw Error(Error::Kind::Invalid, "write failed: " + path);
}

inline std::vector<float> read_raw_f32(const std::string& path, std::size_t expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(Error::Kind::Invalid, "cannot open: " + path);
  std::vector<float> data(expected);
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(expected * sizeof(float)));
  if (static_cast<std::size_t>(f.gcount()) != expected * sizeof(float))
    throw Error(Error::Kind::Truncated, "raw volume shorter than its header promises: " + path);
  return data;
}

struct SidecarHeader {
  VoxelGrid grid;
  std::map<std::string, std::string> extra;
};

inline void write_sidecar(const std::string& path, const char* magic, const VoxelGrid& g,
                          const std::map<std::string, std::string>& extra) {
  std::ostringstream os;
  os << magic << " 1\n";
  os << "dims " << g.dims[0] << ' ' << g.dims[1] << ' ' << g.dims[2] << '\n';
  os << "voxel_size_mm " << fmt_double(g.voxel_size.x) << ' ' << fmt_double(g.voxel_size.y) << ' '
     << fmt_double(g.voxel_size.z) << '\n';
  os << "origin_mm " << fmt_double(g.origin.x) << ' ' << fmt_double(g.origin.y) << ' '
     << fmt_double(g.origin.z) << '\n';
  for (const auto& [k, v] : extra) os << k << ' ' << v << '\n';
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(Error::Kind::Invalid, "cannot open for writing: " + path);
  f << os.str();
}

inline SidecarHeader read_sidecar(const std::string& path, const char* magic) {
  std::ifstream f(path);
  if (!f) throw Error(Error::Kind::Invalid, "cannot open sidecar: " + path);
  std::string line;
  if (!std::getline(f, line)) throw Error(Error::Kind::Truncated, "empty sidecar: " + path);
  {
    std::istringstream is(line);
    std::string tag;
    int version = 0;
    is >> tag >> version;
    if (tag != magic) throw Error(Error::Kind::Format, "sidecar magic mismatch in " + path);
    if (version != 1) throw Error(Error::Kind::Version, "unsupported sidecar version in " + path);
  }
  SidecarHeader h;
  bool have_dims = false;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "dims") {
      is >> h.grid.dims[0] >> h.grid.dims[1] >> h.grid.dims[2];
      have_dims = true;
    } else if (key == "voxel_size_mm") {
      is >> h.grid.voxel_size.x >> h.grid.voxel_size.y >> h.grid.voxel_size.z;
    } else if (key == "origin_mm") {
      is >> h.grid.origin.x >> h.grid.origin.y >> h.grid.origin.z;
    } else {
      std::string rest;
      std::getline(is, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(rest.begin());
      h.extra[key] = rest;
    }
  }
  if (!have_dims) throw Error(Error::Kind::Format, "sidecar missing dims: " + path);
  h.grid.validate();
  return h;
}

}  // namespace detail

inline void write_volume(const Volume& v, const std::string& path, const std::string& units = "",
                         const std::map<std::string, std::string>& extra_in = {}) {
  auto extra = extra_in;
  if (!units.empty()) extra["units"] = units;
  detail::write_raw_f32(path, v.data.data(), v.data.size());
  detail::write_sidecar(path + ".hdr", "UMCPET-VOL", v.grid, extra);
}

inline Volume read_volume(const std::string& path) {
  const auto h = detail::read_sidecar(path + ".hdr", "UMCPET-VOL");
  Volume v(h.grid);
  v.data = detail::read_raw_f32(path, h.grid.n_voxels());
  return v;
}

inline void write_field(const DeformationField& m, const std::string& path,
                        const std::map<std::string, std::string>& extra = {}) {
  detail::write_raw_f32(path, m.disp.data(), m.disp.size());
  detail::write_sidecar(path + ".hdr", "UMCPET-DFM", m.grid, extra);
}

inline DeformationField read_field(const std::string& path) {
  const auto h = detail::read_sidecar(path + ".hdr", "UMCPET-DFM");
  DeformationField m(h.grid);
  m.disp = detail::read_raw_f32(path, 3 * h.grid.n_voxels());
  return m;
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(Error::Kind::Invalid, "cannot open for writing: " + path);
  f << content;
  if (!f) throw Error(Error::Kind::Invalid, "write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(Error::Kind::Invalid, "cannot open: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace umcpet
