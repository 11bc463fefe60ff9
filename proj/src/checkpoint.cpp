#include "rfau/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <string>

#include "rfau/error.hpp"

namespace rfau {

using nlohmann::json;

json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    rows.push_back(json(std::vector<double>(r.begin(), r.end())));
  }
  return rows;
}

Matrix matrix_from_json(const json& j, const char* what) {
  if (!j.is_array() || j.empty()) throw FormatError(std::string("checkpoint: ") + what + " must be a non-empty array");
  const std::size_t rows = j.size();
  if (!j[0].is_array()) throw FormatError(std::string("checkpoint: ") + what + " rows must be arrays");
  const std::size_t cols = j[0].size();
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& row : j) {
    if (!row.is_array() || row.size() != cols) {
      throw FormatError(std::string("checkpoint: ") + what + " has ragged rows");
    }
    for (const auto& v : row) {
      if (!v.is_number()) throw FormatError(std::string("checkpoint: ") + what + " holds a non-number");
      data.push_back(v.get<double>());
    }
  }
  return Matrix(rows, cols, std::move(data));
}

json checkpoint_to_json(const Checkpoint& ckpt) {
  json doc;
  doc["magic"] = kCheckpointMagic;
  doc["version"] = kCheckpointVersion;
  doc["widths"] = ckpt.model.widths();
  json layers = json::array();
  for (const auto& l : ckpt.model.layers()) {
    layers.push_back({{"weight", matrix_to_json(l.weight)}, {"bias", l.bias}});
  }
  doc["layers"] = std::move(layers);
  doc["meta"] = ckpt.meta;
  if (!ckpt.adapters.empty()) {
    json adapters = json::array();
    for (const auto& ad : ckpt.adapters) {
      adapters.push_back(
          {{"layer", ad.layer}, {"rank", ad.rank()}, {"a", matrix_to_json(ad.a)}, {"b", matrix_to_json(ad.b)}});
    }
    doc["adapters"] = std::move(adapters);
  }
  return doc;
}

Checkpoint checkpoint_from_json(const json& doc) {
  if (!doc.is_object()) throw FormatError("checkpoint: document is not an object");
  if (!doc.contains("magic") || doc["magic"] != kCheckpointMagic) {
    throw FormatError("checkpoint: missing or wrong magic (expected \"RFAU\")");
  }
  if (!doc.contains("version") || !doc["version"].is_number_integer()) {
    throw FormatError("checkpoint: missing version");
  }
  const int version = doc["version"].get<int>();
  if (version != kCheckpointVersion) {
    throw FormatError("checkpoint: version mismatch (expected " + std::to_string(kCheckpointVersion) + ", found " +
                      std::to_string(version) + ")");
  }
  if (!doc.contains("widths") || !doc.contains("layers") || !doc["layers"].is_array()) {
    throw FormatError("checkpoint: missing widths or layers");
  }
  std::vector<std::size_t> widths;
  try {
    widths = doc["widths"].get<std::vector<std::size_t>>();
  } catch (const json::exception&) {
    throw FormatError("checkpoint: widths must be an array of counts");
  }
  const auto& jl = doc["layers"];
  if (widths.size() != jl.size() + 1) throw FormatError("checkpoint: widths do not match layer count");

  std::vector<LinearLayer> layers;
  for (std::size_t k = 0; k < jl.size(); ++k) {
    const auto& entry = jl[k];
    if (!entry.is_object() || !entry.contains("weight") || !entry.contains("bias")) {
      throw FormatError("checkpoint: layer " + std::to_string(k) + " lacks weight or bias");
    }
    LinearLayer l;
    l.weight = matrix_from_json(entry["weight"], "weight");
    try {
      l.bias = entry["bias"].get<Vector>();
    } catch (const json::exception&) {
      throw FormatError("checkpoint: layer " + std::to_string(k) + " bias is not a number array");
    }
    if (l.weight.rows() != widths[k + 1] || l.weight.cols() != widths[k] || l.bias.size() != widths[k + 1]) {
      throw FormatError("checkpoint: layer " + std::to_string(k) + " dimensions disagree with widths");
    }
    layers.push_back(std::move(l));
  }

  Checkpoint ckpt;
  try {
    ckpt.model = Mlp(std::move(layers));
  } catch (const Error& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  ckpt.meta = doc.value("meta", json::object());
  if (doc.contains("adapters")) {
    for (const auto& ja : doc["adapters"]) {
      LoraAdapter ad;
      ad.layer = ja.at("layer").get<std::size_t>();
      ad.a = matrix_from_json(ja.at("a"), "adapter a");
      ad.b = matrix_from_json(ja.at("b"), "adapter b");
      if (ja.value("rank", std::size_t{0}) != ad.rank()) throw FormatError("checkpoint: adapter rank disagrees with a");
      ckpt.adapters.push_back(std::move(ad));
    }
    try {
      InstrumentedModel check(ckpt.model, ckpt.adapters);
    } catch (const Error& e) {
      throw FormatError(std::string("checkpoint: ") + e.what());
    }
  }
  return ckpt;
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  write_text_file(path, checkpoint_to_json(ckpt).dump() + "\n");
}

void save_checkpoint(const Mlp& model, const std::filesystem::path& path, const json& meta) {
  save_checkpoint(Checkpoint{model, {}, meta}, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::parse_error& e) {
    throw FormatError("checkpoint " + path.string() + ": corrupt JSON at byte " + std::to_string(e.byte) + ": " +
                      e.what());
  }
  try {
    return checkpoint_from_json(doc);
  } catch (const json::exception& e) {
    throw FormatError("checkpoint " + path.string() + ": " + e.what());
  }
}

}  // namespace rfau
