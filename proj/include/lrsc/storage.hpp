#pragma once

// MCWB container, version 1. All integers little-endian.
//
//   "MCWB"            4 bytes magic
//   version           u32 (= 1)
//   entry count       u32
//   entries, each:
//     name length     u32, followed by the UTF-8 name
//     kind            u8   0 = dense tensor, 1 = sparse triplets
//     rank            u8   number of dims
//     dims            u64 x rank
//     payload         dense:  f64 x prod(dims), row-major (last dim fastest)
//                     sparse: nnz u64, then (u64 row, u64 col, f64 value)
//                             x nnz, sorted row-major; rank must be 2
//
// Entry naming: `<layer>.W` weights, `<layer>.X` / `<layer>.Y` calibration
// pairs, and for decompositions `<layer>.U`, `<layer>.Vc`, `<layer>.Vi`,
// `<layer>.S` plus `<layer>.budget`.

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "lrsc/error.hpp"
#include "lrsc/layermodel.hpp"
#include "lrsc/matrixcore.hpp"
#include "lrsc/metrics.hpp"

namespace lrsc {

struct DenseTensor {
  std::vector<std::uint64_t> dims;
  std::vector<double> data;
  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;
};

struct ContainerEntry {
  std::string name;
  std::variant<DenseTensor, SparseMatrix> payload;

  bool is_dense() const { return std::holds_alternative<DenseTensor>(payload); }
  const DenseTensor& dense() const { return std::get<DenseTensor>(payload); }
  const SparseMatrix& sparse() const { return std::get<SparseMatrix>(payload); }
  friend bool operator==(const ContainerEntry&, const ContainerEntry&) = default;
};

using Container = std::vector<ContainerEntry>;
using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

class ByteWriter {
public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  Bytes take() { return std::move(out_); }

private:
  Bytes out_;
};

class ByteReader {
public:
  explicit ByteReader(std::span<const std::uint8_t> in) : in_(in) {}

  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n)
      throw ParseError(ParseError::Kind::truncated, std::string("truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return in_[pos_++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return in_.size() - pos_; }

private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline std::uint64_t checked_product(const std::vector<std::uint64_t>& dims, const std::string& name) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d != 0 && n > UINT64_MAX / d) throw ParseError(ParseError::Kind::malformed, "dims of '" + name + "' overflow");
    n *= d;
  }
  return n;
}

}  // namespace detail

inline Bytes write_container(const Container& entries) {
  std::set<std::string> seen;
  detail::ByteWriter w;
  w.bytes("MCWB", 4);
  w.u32(kContainerVersion);
  if (entries.size() > UINT32_MAX) throw PreconditionError("too many container entries");
  w.u32(static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (!seen.insert(e.name).second) throw PreconditionError("duplicate entry name '" + e.name + "'");
    w.u32(static_cast<std::uint32_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    if (e.is_dense()) {
      const auto& t = e.dense();
      if (t.dims.size() > 255) throw PreconditionError("entry '" + e.name + "' has too many dims");
      if (detail::checked_product(t.dims, e.name) != t.data.size())
        throw PreconditionError("entry '" + e.name + "': dims do not match data length");
      w.u8(0);
      w.u8(static_cast<std::uint8_t>(t.dims.size()));
      for (auto d : t.dims) w.u64(d);
      for (double v : t.data) w.f64(v);
    } else {
      const auto& s = e.sparse();
      w.u8(1);
      w.u8(2);
      w.u64(s.rows());
      w.u64(s.cols());
      w.u64(s.nnz());
      for (const auto& t : s.triplets()) {
        w.u64(t.row);
        w.u64(t.col);
        w.f64(t.value);
      }
    }
  }
  return w.take();
}

inline Container read_container(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "MCWB", 4) != 0)
    throw ParseError(ParseError::Kind::bad_magic, "not an MCWB container (bad magic)");
  r.str(4, "magic");
  const std::uint32_t version = r.u32("version");
  if (version != kContainerVersion)
    throw ParseError(ParseError::Kind::unsupported_version, "unsupported container version " + std::to_string(version));
  const std::uint32_t count = r.u32("entry count");

  Container out;
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.str(name_len, "name");
    if (!seen.insert(name).second) throw ParseError(ParseError::Kind::duplicate_name, "duplicate entry name '" + name + "'");
    const std::uint8_t kind = r.u8("kind");
    const std::uint8_t rank = r.u8("rank");
    std::vector<std::uint64_t> dims(rank);
    for (auto& d : dims) d = r.u64("dims");

    if (kind == 0) {
      const std::uint64_t n = detail::checked_product(dims, name);
      if (n > r.remaining() / 8)
        throw ParseError(ParseError::Kind::truncated, "payload of '" + name + "' is shorter than its dims declare");
      DenseTensor t{std::move(dims), std::vector<double>(static_cast<std::size_t>(n))};
      for (auto& v : t.data) v = r.f64("dense payload");
      out.push_back({std::move(name), std::move(t)});
    } else if (kind == 1) {
      if (rank != 2) throw ParseError(ParseError::Kind::malformed, "sparse entry '" + name + "' must have rank 2");
      const std::uint64_t nnz = r.u64("nnz");
      if (nnz > r.remaining() / 24)
        throw ParseError(ParseError::Kind::truncated, "sparse payload of '" + name + "' is truncated");
      std::vector<Triplet> trips(static_cast<std::size_t>(nnz));
      for (std::size_t k = 0; k < trips.size(); ++k) {
        auto& t = trips[k];
        t.row = r.u64("triplet row");
        t.col = r.u64("triplet col");
        t.value = r.f64("triplet value");
        if (k > 0) {
          const auto& prev = trips[k - 1];
          if (prev.row > t.row || (prev.row == t.row && prev.col >= t.col))
            throw ParseError(ParseError::Kind::malformed, "sparse triplets of '" + name + "' are not sorted row-major");
        }
      }
      try {
        out.push_back({std::move(name), SparseMatrix(dims[0], dims[1], std::move(trips))});
      } catch (const PreconditionError& e) {
        throw ParseError(ParseError::Kind::malformed, e.what());
      }
    } else {
      throw ParseError(ParseError::Kind::malformed, "entry '" + name + "' has unknown kind " + std::to_string(kind));
    }
  }
  if (r.remaining() != 0) throw ParseError(ParseError::Kind::malformed, "trailing bytes after last entry");
  return out;
}

inline Bytes read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'", 3);
  return Bytes(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'", 3);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing '" + path + "'", 3);
}

inline Container load_container(const std::string& path) { return read_container(read_file(path)); }
inline void save_container(const std::string& path, const Container& c) { write_file(path, write_container(c)); }

inline const ContainerEntry* find_entry(const Container& c, std::string_view name) {
  for (const auto& e : c)
    if (e.name == name) return &e;
  return nullptr;
}

// Rank-2 dense entry in row-major order.
inline ContainerEntry matrix_entry(std::string name, const DenseMatrix& m) {
  DenseTensor t{{static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, {}};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(m(r, c));
  return {std::move(name), std::move(t)};
}

inline DenseMatrix to_matrix(const ContainerEntry& e) {
  if (!e.is_dense()) return e.sparse().to_dense();
  const auto& t = e.dense();
  if (t.dims.size() != 2) throw Error("entry '" + e.name + "' is not a matrix", 3);
  DenseMatrix m(static_cast<Eigen::Index>(t.dims[0]), static_cast<Eigen::Index>(t.dims[1]));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[static_cast<std::size_t>(r * m.cols() + c)];
  return m;
}

inline ContainerEntry layer_entry(const LayerTensor& t) {
  DenseTensor d;
  for (auto v : t.shape.dims()) d.dims.push_back(v);
  d.data = t.data;
  return {t.name + ".W", std::move(d)};
}

// `<layer>.W` entries become layers in container order (depth_index 1, 2, ...).
inline std::vector<LayerTensor> layers_from_container(const Container& c) {
  std::vector<LayerTensor> out;
  for (const auto& e : c) {
    if (e.name.size() < 3 || e.name.compare(e.name.size() - 2, 2, ".W") != 0) continue;
    if (!e.is_dense()) throw Error("weights '" + e.name + "' must be a dense tensor", 3);
    const auto& t = e.dense();
    LayerTensor layer;
    layer.name = e.name.substr(0, e.name.size() - 2);
    layer.depth_index = out.size() + 1;
    if (t.dims.size() == 4)
      layer.shape = LayerShape::conv(t.dims[0], t.dims[1], t.dims[2], t.dims[3]);
    else if (t.dims.size() == 2)
      layer.shape = LayerShape::fully_connected(t.dims[0], t.dims[1]);
    else
      throw Error("weights '" + e.name + "' must have rank 2 or 4", 3);
    layer.data = t.data;
    for (double v : layer.data)
      if (!std::isfinite(v)) throw Error("weights '" + e.name + "' contain NaN or Inf", 3);
    out.push_back(std::move(layer));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Report document (JSON).

namespace detail {

using ojson = nlohmann::ordered_json;

inline const ojson& field(const ojson& j, const char* key, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + " is not an object");
  auto it = j.find(key);
  if (it == j.end()) throw SchemaError("missing field '" + std::string(key) + "' in " + where);
  return *it;
}

inline double number(const ojson& j, const char* key, const std::string& where) {
  const auto& v = field(j, key, where);
  if (!v.is_number()) throw SchemaError("field '" + std::string(key) + "' in " + where + " must be a number");
  return v.get<double>();
}

inline std::uint64_t count(const ojson& j, const char* key, const std::string& where) {
  const auto& v = field(j, key, where);
  if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
    throw SchemaError("field '" + std::string(key) + "' in " + where + " must be a non-negative integer");
  return v.get<std::uint64_t>();
}

inline std::optional<double> optional_number(const ojson& j, const char* key, const std::string& where) {
  const auto& v = field(j, key, where);
  if (v.is_null()) return std::nullopt;
  if (!v.is_number()) throw SchemaError("field '" + std::string(key) + "' in " + where + " must be a number or null");
  return v.get<double>();
}

inline ojson optional_to_json(const std::optional<double>& v) { return v ? ojson(*v) : ojson(nullptr); }

}  // namespace detail

inline std::string write_report(const CompressionReport& r) {
  detail::ojson doc;
  doc["tool_version"] = r.tool_version;
  doc["config"] = r.config;
  doc["per_layer"] = detail::ojson::array();
  for (const auto& row : r.per_layer) {
    detail::ojson j;
    j["name"] = row.name;
    j["original_params"] = row.original_params;
    j["compressed_params"] = row.compressed_params;
    j["rate"] = row.rate;
    j["rate_display"] = format_rate(row.rate);
    j["recon_error"] = detail::optional_to_json(row.recon_error);
    j["output_error"] = detail::optional_to_json(row.output_error);
    doc["per_layer"].push_back(std::move(j));
  }
  doc["totals"] = {{"original_params", r.totals.original_params},
                   {"compressed_params", r.totals.compressed_params},
                   {"rate", r.totals.rate},
                   {"rate_display", format_rate(r.totals.rate)}};
  doc["objective_trace"] = detail::ojson::array();
  for (const auto& e : r.objective_trace)
    doc["objective_trace"].push_back({{"group", e.group}, {"epoch", e.epoch}, {"value", e.value}});
  return doc.dump(2) + "\n";
}

inline CompressionReport read_report(const std::string& text) {
  detail::ojson doc;
  try {
    doc = detail::ojson::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(std::string("report is not valid JSON: ") + e.what());
  }
  CompressionReport r;
  const auto& version = detail::field(doc, "tool_version", "report");
  if (!version.is_string()) throw SchemaError("field 'tool_version' must be a string");
  r.tool_version = version.get<std::string>();
  r.config = detail::field(doc, "config", "report");
  if (!r.config.is_object()) throw SchemaError("field 'config' must be an object");

  const auto& rows = detail::field(doc, "per_layer", "report");
  if (!rows.is_array()) throw SchemaError("field 'per_layer' must be an array");
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::string where = "per_layer[" + std::to_string(i) + "]";
    const auto& j = rows[i];
    ReportRow row;
    const auto& name = detail::field(j, "name", where);
    if (!name.is_string()) throw SchemaError("field 'name' in " + where + " must be a string");
    row.name = name.get<std::string>();
    row.original_params = detail::count(j, "original_params", where);
    row.compressed_params = detail::number(j, "compressed_params", where);
    row.rate = detail::number(j, "rate", where);
    row.recon_error = detail::optional_number(j, "recon_error", where);
    row.output_error = detail::optional_number(j, "output_error", where);
    r.per_layer.push_back(std::move(row));
  }

  const auto& totals = detail::field(doc, "totals", "report");
  r.totals.original_params = detail::count(totals, "original_params", "totals");
  r.totals.compressed_params = detail::count(totals, "compressed_params", "totals");
  r.totals.rate = detail::number(totals, "rate", "totals");

  const auto& trace = detail::field(doc, "objective_trace", "report");
  if (!trace.is_array()) throw SchemaError("field 'objective_trace' must be an array");
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const std::string where = "objective_trace[" + std::to_string(i) + "]";
    r.objective_trace.push_back({static_cast<std::size_t>(detail::count(trace[i], "group", where)),
                                 static_cast<std::size_t>(detail::count(trace[i], "epoch", where)),
                                 detail::number(trace[i], "value", where)});
  }
  return r;
}

}  // namespace lrsc
