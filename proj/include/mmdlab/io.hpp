// Copyright 2026 The mmdlab Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// On-disk formats.
//
// Checkpoint:
//   MMDLAB-CHECKPOINT\n
//   <JSON header: format, version, spec, dtype, tensor manifest, payload_bytes>\n
//   END-HEADER\n
//   <payload: little-endian IEEE-754 float32, tensors back to back>
//
// CSV: header row, floats with 9 significant digits, newline-terminated rows.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mmdlab/denoiser.hpp"
#include "mmdlab/errors.hpp"
#include "mmdlab/tensor.hpp"

namespace mmdlab {

using Json = nlohmann::ordered_json;

inline constexpr const char* kCheckpointMagic = "MMDLAB-CHECKPOINT";
inline constexpr const char* kHeaderEnd = "END-HEADER";
inline constexpr int kCheckpointVersion = 1;

inline std::string format_float(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

/// Write via a sibling temp file and rename, so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline Json spec_to_json(const DenoiserSpec& s) {
  return Json{{"dim", s.dim}, {"width", s.width}, {"depth", s.depth},
              {"time_embedding", s.time_embedding}};
}

inline DenoiserSpec spec_from_json(const Json& j) {
  DenoiserSpec s;
  s.dim = j.at("dim").get<std::size_t>();
  s.width = j.at("width").get<std::size_t>();
  s.depth = j.at("depth").get<std::size_t>();
  s.time_embedding = j.at("time_embedding").get<std::size_t>();
  return s;
}

inline std::string encode_checkpoint(const DenoiserParams<float>& params) {
  Json manifest = Json::array();
  std::size_t offset = 0;
  const auto names = params.names();
  for (std::size_t k = 0; k < params.tensors.size(); ++k) {
    const auto& t = params.tensors[k];
    manifest.push_back(Json{{"name", names[k]}, {"shape", t.shape()}, {"offset", offset},
                            {"count", t.numel()}});
    offset += t.numel() * 4;
  }
  Json header{{"format", "mmdlab-denoiser"}, {"version", kCheckpointVersion},
              {"spec", spec_to_json(params.spec)}, {"dtype", "float32-le"},
              {"tensors", manifest}, {"payload_bytes", offset}};
  std::string out = std::string(kCheckpointMagic) + "\n" + header.dump(2) + "\n" + kHeaderEnd + "\n";
  out.reserve(out.size() + offset);
  for (const auto& t : params.tensors) {
    for (float v : t.data()) {
      const auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
    }
  }
  return out;
}

inline DenoiserParams<float> decode_checkpoint(const std::string& bytes) {
  std::size_t pos = bytes.find('\n');
  if (pos == std::string::npos || bytes.compare(0, pos, kCheckpointMagic) != 0) {
    throw BadMagicError("not an mmdlab checkpoint (bad magic)");
  }
  const std::string end_marker = std::string("\n") + kHeaderEnd + "\n";
  const std::size_t hend = bytes.find(end_marker, pos);
  if (hend == std::string::npos) throw LengthMismatchError("checkpoint header is truncated");
  Json header;
  try {
    header = Json::parse(bytes.substr(pos + 1, hend - pos - 1));
  } catch (const Json::exception& e) {
    throw LoadError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const int version = header.value("version", -1);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) +
                       " is not supported (this build reads version " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  DenoiserParams<float> params{spec_from_json(header.at("spec")), {}};
  const std::size_t payload_start = hend + end_marker.size();
  const std::size_t declared = header.at("payload_bytes").get<std::size_t>();
  const std::size_t actual = bytes.size() - payload_start;
  if (actual != declared) {
    throw LengthMismatchError("checkpoint payload is " + std::to_string(actual) +
                              " bytes, header declares " + std::to_string(declared));
  }
  std::size_t expected_offset = 0;
  for (const auto& entry : header.at("tensors")) {
    Shape shape = entry.at("shape").get<Shape>();
    const std::size_t count = entry.at("count").get<std::size_t>();
    const std::size_t offset = entry.at("offset").get<std::size_t>();
    if (count != shape_numel(shape) || offset != expected_offset ||
        offset + count * 4 > declared) {
      throw LengthMismatchError("checkpoint manifest entry '" +
                                entry.at("name").get<std::string>() +
                                "' disagrees with the payload layout");
    }
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) {
        bits |= static_cast<std::uint32_t>(
                    static_cast<unsigned char>(bytes[payload_start + offset + 4 * i + b]))
                << (8 * b);
      }
      data[i] = std::bit_cast<float>(bits);
    }
    params.tensors.emplace_back(std::move(shape), std::move(data));
    expected_offset += count * 4;
  }
  if (expected_offset != declared) {
    throw LengthMismatchError("checkpoint manifest covers " + std::to_string(expected_offset) +
                              " bytes, payload has " + std::to_string(declared));
  }
  const auto dims = layer_dims(params.spec);
  bool ok = params.tensors.size() == 2 * dims.size();
  for (std::size_t k = 0; ok && k < dims.size(); ++k) {
    ok = params.tensors[2 * k].shape() == Shape{dims[k].first, dims[k].second} &&
         params.tensors[2 * k + 1].shape() == Shape{1, dims[k].second};
  }
  if (!ok) throw LoadError("checkpoint tensors do not match the declared denoiser spec");
  return params;
}

inline void serialize_model(const DenoiserParams<float>& params, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(params));
}

inline DenoiserParams<float> deserialize_model(const std::filesystem::path& path) {
  return decode_checkpoint(read_file(path));
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header) : columns_(header.size()) { row(header); }

  void row(const std::vector<std::string>& cells) {
    detail::require(cells.size() == columns_, "csv: row has wrong number of cells");
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out_ << ',';
      out_ << cells[i];
    }
    out_ << '\n';
  }

  std::string str() const { return out_.str(); }
  void save(const std::filesystem::path& path) const { write_file_atomic(path, out_.str()); }

 private:
  std::size_t columns_;
  std::ostringstream out_;
};

template <class T>
std::string matrix_csv(const Tensor<T>& m, const std::vector<std::string>& header) {
  CsvWriter w(header);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    std::vector<std::string> cells;
    for (T v : m.row(i)) cells.push_back(format_float(static_cast<double>(v)));
    w.row(cells);
  }
  return w.str();
}

inline std::vector<std::string> coord_header(std::size_t d, const std::string& prefix = "x") {
  std::vector<std::string> h;
  for (std::size_t j = 0; j < d; ++j) h.push_back(prefix + std::to_string(j));
  return h;
}

/// Numeric CSV with a header row.
template <class T>
Tensor<T> read_matrix_csv(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw LoadError("empty CSV: " + path.string());
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  std::vector<T> data;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::size_t c = 0;
    while (std::getline(ls, cell, ',')) {
      data.push_back(static_cast<T>(std::stod(cell)));
      ++c;
    }
    if (c != cols) throw LoadError("CSV row " + std::to_string(rows + 1) + " has wrong width");
    ++rows;
  }
  return Tensor<T>({rows, cols}, std::move(data));
}

}  // namespace mmdlab
