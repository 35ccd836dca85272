#include "voxnn/json_io.hpp"

namespace voxnn {

nlohmann::json arch_to_json(const ArchitectureSpec& s) {
    nlohmann::json j;
    j["variant"] = s.fusion ? "fused" : "baseline";
    if (s.fusion) {
        j["fusion_point"] = to_string(s.fusion->point);
        j["fusion_fn"] = to_string(s.fusion->fn);
    }
    j["modalities"] = s.modalities;
    j["block_channels"] = s.block_channels;
    j["dense_channels"] = s.dense_channels;
    j["classes"] = s.classes;
    j["input_patch"] = s.input_patch;
    j["output_patch"] = s.output_patch;
    return j;
}

ArchitectureSpec arch_from_json(const nlohmann::json& j) {
    ArchitectureSpec s;
    try {
        const std::string variant = j.at("variant").get<std::string>();
        if (variant == "fused")
            s.fusion = FusionSpec{parse_fusion_point(j.at("fusion_point").get<std::string>()),
                                  parse_fusion_fn(j.at("fusion_fn").get<std::string>())};
        else if (variant != "baseline")
            throw DataError("unknown architecture variant '" + variant + "'");
        s.modalities = j.at("modalities").get<int64_t>();
        s.block_channels = j.at("block_channels").get<std::vector<int64_t>>();
        s.dense_channels = j.at("dense_channels").get<std::vector<int64_t>>();
        s.classes = j.at("classes").get<int64_t>();
        s.input_patch = j.at("input_patch").get<int64_t>();
        s.output_patch = j.at("output_patch").get<int64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad architecture record: ") + e.what());
    }
    s.validate();
    return s;
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"epsilon", c.epsilon},
            {"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lambda1", c.lambda1},
            {"lambda2", c.lambda2},
            {"seed", c.seed},
            {"patches_per_epoch", c.patches_per_epoch},
            {"tumor_fraction", c.tumor_fraction}};
}

void train_config_merge_json(TrainConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("train config must be a JSON object");
    try {
        for (const auto& [key, val] : j.items()) {
            if (key == "learning_rate") c.learning_rate = val.get<double>();
            else if (key == "beta1") c.beta1 = val.get<double>();
            else if (key == "beta2") c.beta2 = val.get<double>();
            else if (key == "epsilon") c.epsilon = val.get<double>();
            else if (key == "epochs") c.epochs = val.get<int64_t>();
            else if (key == "batch_size") c.batch_size = val.get<int64_t>();
            else if (key == "lambda1") c.lambda1 = val.get<double>();
            else if (key == "lambda2") c.lambda2 = val.get<double>();
            else if (key == "seed") c.seed = val.get<uint64_t>();
            else if (key == "patches_per_epoch") c.patches_per_epoch = val.get<int64_t>();
            else if (key == "tumor_fraction") c.tumor_fraction = val.get<double>();
            else throw ConfigError("unknown train config key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad train config value: ") + e.what());
    }
}

nlohmann::json epoch_to_json(const EpochRecord& r) {
    return {{"epoch", r.epoch}, {"loss", r.loss},     {"l1", r.l1},
            {"l2", r.l2},       {"dice", r.dice},     {"accuracy", r.accuracy}};
}

EpochRecord epoch_from_json(const nlohmann::json& j) {
    EpochRecord r;
    try {
        r.epoch = j.at("epoch").get<int64_t>();
        r.loss = j.at("loss").get<double>();
        r.l1 = j.at("l1").get<double>();
        r.l2 = j.at("l2").get<double>();
        r.dice = j.at("dice").get<double>();
        r.accuracy = j.at("accuracy").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("bad epoch record: ") + e.what());
    }
    return r;
}

}  // namespace voxnn
