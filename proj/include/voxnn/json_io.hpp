#pragma once

#include <json.hpp>

#include "voxnn/optim.hpp"
#include "voxnn/train.hpp"

namespace voxnn {

nlohmann::json arch_to_json(const ArchitectureSpec& spec);
ArchitectureSpec arch_from_json(const nlohmann::json& j);

nlohmann::json train_config_to_json(const TrainConfig& cfg);
// Overwrites only the keys present in j; unknown keys are an error.
void train_config_merge_json(TrainConfig& cfg, const nlohmann::json& j);

nlohmann::json epoch_to_json(const EpochRecord& r);
EpochRecord epoch_from_json(const nlohmann::json& j);

}  // namespace voxnn
