#pragma once

/*
 * File plumbing shared by the CLI and the serialization code: FNV content
 * hashes, atomic writes (temp file + rename, so readers never observe a
 * half-written artifact), CSV assembly with full round-trip double
 * formatting, a P6 raster for eyeballing 2-D sample clouds, and the run
 * manifest that every command drops next to its outputs.
 */

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "flowturbo/errors.hpp"
#include "flowturbo/mat.hpp"
#include "flowturbo/version.hpp"

namespace flowturbo {

inline std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) throw IoError("read failed for " + path.string());
  return std::move(ss).str();
}

inline void atomic_write_file(const std::filesystem::path& path, std::string_view content) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out.good()) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename " + tmp.string() + " -> " + path.string() + ": " + ec.message());
}

// Shortest exact decimal form; parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string file_hash(const std::filesystem::path& path) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "fnv1a64:%016llx",
                static_cast<unsigned long long>(fnv1a64(read_file(path))));
  return buf;
}

// Header plus rows, trailing newline, no quoting (cells never contain commas).
class CsvBuilder {
 public:
  explicit CsvBuilder(std::initializer_list<std::string_view> header) {
    bool first = true;
    for (auto h : header) {
      if (!first) out_ += ',';
      out_ += h;
      first = false;
    }
    out_ += '\n';
  }

  CsvBuilder& cell(double v) { return raw(format_double(v)); }
  CsvBuilder& cell(std::int64_t v) { return raw(std::to_string(v)); }
  CsvBuilder& cell(int v) { return raw(std::to_string(v)); }
  CsvBuilder& cell(std::string_view v) { return raw(v); }

  void end_row() {
    out_ += '\n';
    row_open_ = false;
  }

  const std::string& str() const { return out_; }

 private:
  CsvBuilder& raw(std::string_view s) {
    if (row_open_) out_ += ',';
    out_ += s;
    row_open_ = true;
    return *this;
  }

  std::string out_;
  bool row_open_ = false;
};

// Binary P6 raster of a 2-D point cloud, white background, darker with
// density. Bounds grow by a small margin so edge points stay visible.
inline std::string render_ppm(const Mat& points, int width, int height) {
  if (points.cols != 2) throw ValidationError("render_ppm: points must be 2-D");
  if (width <= 0 || height <= 0) throw ValidationError("render_ppm: empty raster");
  double lo_x = -1.0, hi_x = 1.0, lo_y = -1.0, hi_y = 1.0;
  if (points.rows > 0) {
    lo_x = hi_x = points(0, 0);
    lo_y = hi_y = points(0, 1);
    for (int r = 0; r < points.rows; ++r) {
      lo_x = std::min(lo_x, points(r, 0));
      hi_x = std::max(hi_x, points(r, 0));
      lo_y = std::min(lo_y, points(r, 1));
      hi_y = std::max(hi_y, points(r, 1));
    }
  }
  const double mx = std::max(1e-9, 0.05 * (hi_x - lo_x));
  const double my = std::max(1e-9, 0.05 * (hi_y - lo_y));
  lo_x -= mx, hi_x += mx, lo_y -= my, hi_y += my;

  std::vector<int> counts(static_cast<std::size_t>(width) * height, 0);
  for (int r = 0; r < points.rows; ++r) {
    const int px = static_cast<int>((points(r, 0) - lo_x) / (hi_x - lo_x) * width);
    const int py = static_cast<int>((hi_y - points(r, 1)) / (hi_y - lo_y) * height);
    if (px < 0 || px >= width || py < 0 || py >= height) continue;
    ++counts[static_cast<std::size_t>(py) * width + px];
  }
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.reserve(out.size() + counts.size() * 3);
  for (int c : counts) {
    const int shade = std::max(0, 255 - 64 * c);
    out.push_back(static_cast<char>(shade));
    out.push_back(static_cast<char>(shade));
    out.push_back(static_cast<char>(c > 0 ? std::min(255, shade + 96) : shade));
  }
  return out;
}

// Provenance record written next to every command's outputs.
struct RunManifest {
  std::string command;
  nlohmann::json config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> checkpoint_hashes;
  double wall_time_seconds = 0.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["command"] = command;
    j["config"] = config;
    j["seed"] = seed;
    j["toolkit_version"] = std::string(kVersion);
    j["checkpoint_hashes"] = checkpoint_hashes;
    j["wall_time_seconds"] = wall_time_seconds;
    return j;
  }
};

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
  atomic_write_file(dir / "manifest.json", m.to_json().dump(2) + "\n");
}

}  // namespace flowturbo
