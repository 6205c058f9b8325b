#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "rimae/pointcloud.hpp"

namespace rimae {

namespace {

[[noreturn]] void io_fail(const std::string& what, const std::string& path) {
  throw std::runtime_error(what + ": " + path);
}

void put_u32_le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32_le(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32_le(os, bits);
}

float get_f32_le(std::istream& is) {
  std::uint32_t bits = get_u32_le(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

PointCloud read_xyz(const std::string& path) {
  std::ifstream in(path);
  if (!in) io_fail("cannot open", path);
  std::vector<std::array<double, 3>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::array<double, 3> p{};
    if (!(ls >> p[0] >> p[1] >> p[2])) io_fail("malformed xyz line", path);
    rows.push_back(p);
  }
  if (rows.empty()) io_fail("empty point cloud", path);
  PointCloud cloud;
  cloud.points.resize(static_cast<Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (int c = 0; c < 3; ++c) cloud.points(static_cast<Index>(i), c) = static_cast<Real>(rows[i][c]);
  return cloud;
}

void write_xyz(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path);
  if (!out) io_fail("cannot write", path);
  out.precision(17);
  for (Index i = 0; i < cloud.size(); ++i)
    out << cloud.points(i, 0) << ' ' << cloud.points(i, 1) << ' ' << cloud.points(i, 2) << '\n';
  if (!out) io_fail("write failed", path);
}

PointCloud read_ripc(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) io_fail("cannot open", path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "RIPC", 4) != 0) io_fail("bad RIPC magic", path);
  const std::uint32_t n = get_u32_le(in);
  if (!in || n == 0) io_fail("bad RIPC count", path);
  PointCloud cloud;
  cloud.points.resize(static_cast<Index>(n), 3);
  for (std::uint32_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) cloud.points(static_cast<Index>(i), c) = static_cast<Real>(get_f32_le(in));
  if (!in) io_fail("truncated RIPC payload", path);
  return cloud;
}

void write_ripc(const std::string& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) io_fail("cannot write", path);
  out.write("RIPC", 4);
  put_u32_le(out, static_cast<std::uint32_t>(cloud.size()));
  for (Index i = 0; i < cloud.size(); ++i)
    for (int c = 0; c < 3; ++c) put_f32_le(out, static_cast<float>(cloud.points(i, c)));
  if (!out) io_fail("write failed", path);
}

PointCloud read_cloud(const std::string& path) {
  if (path.size() >= 5 && path.compare(path.size() - 5, 5, ".ripc") == 0) return read_ripc(path);
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".xyz") == 0) return read_xyz(path);
  io_fail("unknown point cloud extension", path);
}

std::vector<LabeledFile> read_labels_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) io_fail("cannot open", path);
  std::vector<LabeledFile> rows;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line == "filename,label") continue;
    }
    const auto comma = line.find_last_of(',');
    if (comma == std::string::npos) io_fail("malformed labels row", path);
    rows.push_back({line.substr(0, comma), std::stoi(line.substr(comma + 1))});
  }
  return rows;
}

void write_labels_csv(const std::string& path, const std::vector<LabeledFile>& rows) {
  std::ofstream out(path);
  if (!out) io_fail("cannot write", path);
  out << "filename,label\n";
  for (const auto& r : rows) out << r.filename << ',' << r.label << '\n';
  if (!out) io_fail("write failed", path);
}

}  // namespace rimae
