#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "rfau/lora.hpp"
#include "rfau/model.hpp"

namespace rfau {

inline constexpr const char* kCheckpointMagic = "RFAU";
inline constexpr int kCheckpointVersion = 1;

// {"magic":"RFAU","version":1,"widths":[...],"layers":[{"weight":[[...]],"bias":[...]}],
//  "meta":{...}, optional "adapters":[{"layer":k,"rank":u,"a":[[...]],"b":[[...]]}]}
// Doubles are written in shortest round-trip form, so save -> load is bit-exact.
struct Checkpoint {
  Mlp model;
  std::vector<LoraAdapter> adapters;
  nlohmann::json meta = nlohmann::json::object();
};

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::json& doc);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

void save_checkpoint(const Mlp& model, const std::filesystem::path& path,
                     const nlohmann::json& meta = nlohmann::json::object());

nlohmann::json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const nlohmann::json& j, const char* what);

// Writes `text` to `path`, creating parent directories.
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace rfau
