#pragma once

#include "blkprune/envelope.hpp"
#include "blkprune/model.hpp"

#include <filesystem>

namespace blkprune {

nlohmann::json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);
ModelConfig load_config(const std::filesystem::path& path);

std::vector<std::byte> checkpoint_to_bytes(const Checkpoint& ckpt);
Checkpoint checkpoint_from_bytes(std::span<const std::byte> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace blkprune
