#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "derex/error.hpp"
#include "derex/matrix.hpp"

namespace derex {

namespace fs = std::filesystem;

// ---- csv ----------------------------------------------------------------------------

// Quotes a field when it holds a comma, quote or line break; quotes are doubled.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

using CsvRow = std::vector<std::string>;

inline void write_csv(std::ostream& os, const CsvRow& header, const std::vector<CsvRow>& rows) {
  auto line = [&](const CsvRow& r) {
    for (std::size_t i = 0; i < r.size(); ++i) os << (i ? "," : "") << csv_field(r[i]);
    os << '\n';
  };
  line(header);
  for (const auto& r : rows) {
    if (r.size() != header.size())
      throw ShapeError("write_csv: row has " + std::to_string(r.size()) + " fields, header has " +
                       std::to_string(header.size()));
    line(r);
  }
}

inline void write_csv(const fs::path& path, const CsvRow& header, const std::vector<CsvRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  write_csv(os, header, rows);
}

inline std::string cell(double v) { return format_number(v); }
inline std::string cell(std::size_t v) { return std::to_string(v); }
inline std::string cell(int v) { return std::to_string(v); }

// ---- heatmaps ---------------------------------------------------------------------------

struct HeatmapInfo {
  double lo = 0.0, hi = 0.0;
  bool uniform = false;
  std::string warning;
};

// Min-max normalizes the unmasked entries to [0, 1]. An all-equal field maps
// to 0.5. `mask` (optional, row-major) marks entries left out of the range.
inline std::vector<double> minmax_normalize(const Matrix& values, const std::vector<bool>& mask, HeatmapInfo& info) {
  if (!mask.empty() && mask.size() != values.size()) throw ShapeError("heatmap mask size mismatch");
  bool any = false;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.empty() && mask[i]) continue;
    const double v = values.data()[i];
    if (!std::isfinite(v)) throw Error("heatmap: non-finite value at index " + std::to_string(i));
    info.lo = any ? std::min(info.lo, v) : v;
    info.hi = any ? std::max(info.hi, v) : v;
    any = true;
  }
  std::vector<double> out(values.size(), 0.0);
  info.uniform = !any || info.hi == info.lo;
  if (info.uniform) info.warning = "all values equal; drawn as uniform mid-gray";
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!mask.empty() && mask[i]) continue;
    out[i] = info.uniform ? 0.5 : (values.data()[i] - info.lo) / (info.hi - info.lo);
  }
  return out;
}

inline std::uint8_t gray_level(double t) { return static_cast<std::uint8_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0)); }

// Binary graymap (P5), darker = lower, each entry drawn as a cell_px square.
// Masked entries are black.
inline HeatmapInfo write_graymap(const fs::path& path, const Matrix& values, std::size_t cell_px = 1,
                                 const std::vector<bool>& mask = {}) {
  if (cell_px == 0) throw Error("write_graymap: cell_px must be >= 1");
  HeatmapInfo info;
  const auto norm = minmax_normalize(values, mask, info);
  const std::size_t w = values.cols() * cell_px, h = values.rows() * cell_px;
  std::vector<std::uint8_t> px(w * h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = (y / cell_px) * values.cols() + x / cell_px;
      px[y * w + x] = !mask.empty() && mask[i] ? 0 : gray_level(norm[i]);
    }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P5\n" << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  return info;
}

// Same map as a pixmap (P6) with masked entries in a flat blue.
inline HeatmapInfo write_pixmap(const fs::path& path, const Matrix& values, std::size_t cell_px = 1,
                                const std::vector<bool>& mask = {}) {
  if (cell_px == 0) throw Error("write_pixmap: cell_px must be >= 1");
  HeatmapInfo info;
  const auto norm = minmax_normalize(values, mask, info);
  const std::size_t w = values.cols() * cell_px, h = values.rows() * cell_px;
  std::vector<std::uint8_t> px(w * h * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = (y / cell_px) * values.cols() + x / cell_px;
      std::uint8_t* p = &px[(y * w + x) * 3];
      if (!mask.empty() && mask[i]) {
        p[0] = 40, p[1] = 60, p[2] = 140;
      } else {
        p[0] = p[1] = p[2] = gray_level(norm[i]);
      }
    }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P6\n" << w << ' ' << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  return info;
}

// Scatter of (x, y) points on a white square, one 3x3 dot per point, colored
// by group from a small fixed palette. Axes are min-max scaled with a margin.
inline void write_scatter_pixmap(const fs::path& path, const std::vector<double>& xs, const std::vector<double>& ys,
                                 const std::vector<int>& group, std::size_t size = 256) {
  if (xs.size() != ys.size() || xs.size() != group.size()) throw Error("write_scatter_pixmap: length mismatch");
  if (size < 16) throw Error("write_scatter_pixmap: size must be >= 16");
  static const std::uint8_t palette[][3] = {{200, 40, 40}, {40, 140, 40}, {40, 60, 200}, {200, 140, 20}, {0, 0, 0}};
  auto range = [](const std::vector<double>& v) {
    double lo = v.empty() ? 0.0 : v[0], hi = lo;
    for (double x : v) {
      if (!std::isfinite(x)) throw Error("write_scatter_pixmap: non-finite coordinate");
      lo = std::min(lo, x), hi = std::max(hi, x);
    }
    return std::pair{lo, hi > lo ? hi - lo : 1.0};
  };
  const auto [x0, xw] = range(xs);
  const auto [y0, yw] = range(ys);
  const double margin = 4.0, span = double(size - 1) - 2.0 * margin;
  std::vector<std::uint8_t> px(size * size * 3, 255);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto cx = static_cast<long>(std::lround(margin + (xs[i] - x0) / xw * span));
    const auto cy = static_cast<long>(std::lround(margin + (1.0 - (ys[i] - y0) / yw) * span));
    const auto* c = palette[std::min<std::size_t>(static_cast<std::size_t>(std::max(group[i], 0)), 4)];
    for (long dy = -1; dy <= 1; ++dy)
      for (long dx = -1; dx <= 1; ++dx) {
        const auto off = (static_cast<std::size_t>(cy + dy) * size + static_cast<std::size_t>(cx + dx)) * 3;
        std::copy(c, c + 3, &px[off]);
      }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  os << "P6\n" << size << ' ' << size << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

struct Graymap {
  std::size_t width = 0, height = 0;
  int maxval = 255;
  std::vector<std::uint8_t> pixels;
  double at(std::size_t x, std::size_t y) const { return pixels.at(y * width + x) / static_cast<double>(maxval); }
};

inline Graymap read_graymap(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  auto token = [&] {
    std::string t;
    while (t.empty()) {
      is >> std::ws;
      if (is.peek() == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (!(is >> t)) throw Error("read_graymap: truncated header in " + path.string());
    }
    return t;
  };
  if (token() != "P5") throw Error("read_graymap: not a P5 file: " + path.string());
  Graymap g;
  g.width = std::stoul(token());
  g.height = std::stoul(token());
  g.maxval = std::stoi(token());
  if (g.maxval <= 0 || g.maxval > 255) throw Error("read_graymap: unsupported maxval");
  is.get();  // single whitespace before the raster
  g.pixels.resize(g.width * g.height);
  is.read(reinterpret_cast<char*>(g.pixels.data()), static_cast<std::streamsize>(g.pixels.size()));
  if (is.gcount() != static_cast<std::streamsize>(g.pixels.size())) throw Error("read_graymap: truncated raster");
  return g;
}

// ---- hashing and manifests ------------------------------------------------------------------

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr)) throw Error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

inline std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline constexpr const char* kManifestName = "manifest.tsv";

struct ManifestEntry {
  std::string path;  // relative to the output root, '/' separated
  std::string sha256;
  bool operator==(const ManifestEntry&) const = default;
};

// Every regular file under root except the manifest itself, sorted by path.
inline std::vector<ManifestEntry> build_manifest(const fs::path& root) {
  std::vector<ManifestEntry> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root).generic_string();
    if (rel == kManifestName) continue;
    out.push_back({rel, sha256_hex(read_file(e.path()))});
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.path < b.path; });
  return out;
}

inline std::vector<ManifestEntry> write_manifest(const fs::path& root) {
  const auto entries = build_manifest(root);
  std::ofstream os(root / kManifestName, std::ios::binary);
  if (!os) throw Error("cannot write manifest in " + root.string());
  for (const auto& e : entries) os << e.path << '\t' << e.sha256 << '\n';
  return entries;
}

// ---- configuration ------------------------------------------------------------------------

enum class FieldKind { integer, real, integer_list, real_list, text, text_list, flag };

struct FieldSpec {
  std::string name;
  FieldKind kind;
  double lo = 0.0, hi = 0.0;          // numeric range, inclusive
  std::vector<std::string> choices;  // text values allowed (empty: any)
  bool hi_open = false;              // range is [lo, hi)
};

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(v);
  while (std::getline(is, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Flat key = value settings validated against a fixed schema. Later sets
// override earlier ones, so defaults, then file, then command line.
class Settings {
 public:
  explicit Settings(std::vector<FieldSpec> schema) : schema_(std::move(schema)) {}

  const std::vector<FieldSpec>& schema() const { return schema_; }

  void set(const std::string& key, const std::string& raw) {
    const FieldSpec& f = field(key);
    std::string value = trim(raw);
    check_value(f, value);
    if (f.kind == FieldKind::integer_list || f.kind == FieldKind::real_list || f.kind == FieldKind::text_list) {
      std::string joined;
      for (const auto& item : split_list(value)) joined += (joined.empty() ? "" : ",") + item;
      value = joined;
    }
    values_[key] = value;
  }

  // "key=value"
  void set_assignment(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key=value, got '" + kv + "'");
    set(trim(kv.substr(0, eq)), kv.substr(eq + 1));
  }

  void load(std::istream& is, const std::string& source = "config") {
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      if (trim(line).empty()) continue;
      try {
        set_assignment(line);
      } catch (const ConfigError& e) {
        throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  void load_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    load(is, path.string());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::string& text(const std::string& key) const {
    field(key);
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("field '" + key + "' is not set");
    return it->second;
  }
  double real(const std::string& key) const { return std::stod(text(key)); }
  std::size_t size(const std::string& key) const { return std::stoull(text(key)); }
  std::uint64_t u64(const std::string& key) const { return std::stoull(text(key)); }
  bool flag(const std::string& key) const { return text(key) == "true" || text(key) == "1"; }
  std::vector<std::string> texts(const std::string& key) const { return split_list(text(key)); }
  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : texts(key)) out.push_back(std::stod(s));
    return out;
  }
  std::vector<std::uint64_t> u64s(const std::string& key) const {
    std::vector<std::uint64_t> out;
    for (const auto& s : texts(key)) out.push_back(std::stoull(s));
    return out;
  }

  // Sorted key = value lines.
  std::string resolved() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  const FieldSpec& field(const std::string& key) const {
    for (const auto& f : schema_)
      if (f.name == key) return f;
    std::string best;
    std::size_t best_d = 3;
    for (const auto& f : schema_) {
      const std::size_t d = edit_distance(key, f.name);
      if (d < best_d) best_d = d, best = f.name;
    }
    std::string msg = "unknown field '" + key + "'";
    if (!best.empty()) msg += "; did you mean '" + best + "'?";
    throw ConfigError(msg);
  }

  static void check_number(const FieldSpec& f, const std::string& s, bool integer) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      if (integer) {
        if (s.empty() || s[0] == '-') throw std::invalid_argument("negative");
        v = static_cast<double>(std::stoull(s, &used));
      } else {
        v = std::stod(s, &used);
      }
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty())
      throw ConfigError("field '" + f.name + "': '" + s + "' is not " + (integer ? "a non-negative integer" : "a number"));
    const bool above = f.hi_open ? v >= f.hi : v > f.hi;
    if (!std::isfinite(v) || v < f.lo || above) {
      std::ostringstream os;
      os << "field '" << f.name << "': " << s << " outside [" << format_number(f.lo) << ", " << format_number(f.hi)
         << (f.hi_open ? ")" : "]");
      throw ConfigError(os.str());
    }
  }

  static void check_choice(const FieldSpec& f, const std::string& s) {
    if (f.choices.empty() || std::find(f.choices.begin(), f.choices.end(), s) != f.choices.end()) return;
    std::string all;
    for (const auto& c : f.choices) all += (all.empty() ? "" : ", ") + c;
    throw ConfigError("field '" + f.name + "': '" + s + "' is not one of {" + all + "}");
  }

  static void check_value(const FieldSpec& f, const std::string& s) {
    switch (f.kind) {
      case FieldKind::integer: check_number(f, s, true); break;
      case FieldKind::real: check_number(f, s, false); break;
      case FieldKind::integer_list:
      case FieldKind::real_list: {
        const auto items = split_list(s);
        if (items.empty()) throw ConfigError("field '" + f.name + "': empty list");
        for (const auto& item : items) check_number(f, item, f.kind == FieldKind::integer_list);
        break;
      }
      case FieldKind::text: check_choice(f, s); break;
      case FieldKind::text_list: {
        const auto items = split_list(s);
        if (items.empty()) throw ConfigError("field '" + f.name + "': empty list");
        for (const auto& item : items) check_choice(f, item);
        break;
      }
      case FieldKind::flag:
        if (s != "true" && s != "false" && s != "1" && s != "0")
          throw ConfigError("field '" + f.name + "': expected true or false, got '" + s + "'");
        break;
    }
  }

  std::vector<FieldSpec> schema_;
  std::map<std::string, std::string> values_;
};

}  // namespace derex
