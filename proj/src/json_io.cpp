#include "relulab/json_io.hpp"

#include <algorithm>
#include <cstring>

namespace relulab {

void require_known_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw ContractViolation(where + ": expected a mapping");
    for (const auto& item : j.items()) {
        const bool known = std::any_of(allowed.begin(), allowed.end(),
                                       [&](const char* k) { return item.key() == k; });
        if (!known) throw ContractViolation(where + ": unknown key '" + item.key() + "'");
    }
}

void to_json(Json& j, const AttentionConfig& cfg) {
    j = Json{{"activation", to_string(cfg.activation)},
             {"heads", cfg.heads},
             {"gamma", cfg.gamma},
             {"causal", cfg.causal},
             {"temperature", cfg.temperature},
             {"scale_factor", cfg.scale_factor},
             {"output_layer_norm", cfg.output_layer_norm}};
}

void from_json(const Json& j, AttentionConfig& cfg) {
    require_known_keys(j, {"activation", "heads", "gamma", "causal", "temperature", "scale_factor", "output_layer_norm"},
                       "attention");
    if (j.contains("activation")) cfg.activation = activation_from_string(j.at("activation").get<std::string>());
    read_key(j, "heads", cfg.heads);
    read_key(j, "gamma", cfg.gamma);
    read_key(j, "causal", cfg.causal);
    read_key(j, "temperature", cfg.temperature);
    read_key(j, "scale_factor", cfg.scale_factor);
    read_key(j, "output_layer_norm", cfg.output_layer_norm);
}

void to_json(Json& j, const RegConfig& cfg) {
    j = Json{{"cap_coefficient", cfg.cap_coefficient}, {"loss_weight", cfg.loss_weight}, {"enabled", cfg.enabled}};
}

void from_json(const Json& j, RegConfig& cfg) {
    require_known_keys(j, {"cap_coefficient", "loss_weight", "enabled"}, "reg");
    read_key(j, "cap_coefficient", cfg.cap_coefficient);
    read_key(j, "loss_weight", cfg.loss_weight);
    read_key(j, "enabled", cfg.enabled);
}

void to_json(Json& j, const ModelConfig& cfg) {
    j = Json{{"d", cfg.d},
             {"d_h", cfg.d_h},
             {"heads", cfg.heads},
             {"enc_layers", cfg.enc_layers},
             {"dec_layers", cfg.dec_layers},
             {"vocab", cfg.vocab},
             {"max_len", cfg.max_len},
             {"attention", cfg.attention},
             {"memory", Json{{"kind", to_string(cfg.memory_kind)}, {"temperature", cfg.memory_temperature}}},
             {"reg", cfg.reg},
             {"pre_norm", cfg.pre_norm},
             {"dropout", cfg.dropout},
             {"seed", cfg.seed}};
}

void from_json(const Json& j, ModelConfig& cfg) {
    require_known_keys(j, {"d", "d_h", "heads", "enc_layers", "dec_layers", "vocab", "max_len", "attention", "memory",
                           "reg", "pre_norm", "dropout", "seed"},
                       "model");
    read_key(j, "d", cfg.d);
    read_key(j, "d_h", cfg.d_h);
    read_key(j, "heads", cfg.heads);
    read_key(j, "enc_layers", cfg.enc_layers);
    read_key(j, "dec_layers", cfg.dec_layers);
    read_key(j, "vocab", cfg.vocab);
    read_key(j, "max_len", cfg.max_len);
    if (j.contains("attention")) from_json(j.at("attention"), cfg.attention);
    if (j.contains("memory")) {
        const Json& m = j.at("memory");
        require_known_keys(m, {"kind", "temperature"}, "memory");
        if (m.contains("kind")) cfg.memory_kind = memory_kind_from_string(m.at("kind").get<std::string>());
        read_key(m, "temperature", cfg.memory_temperature);
    }
    if (j.contains("reg")) from_json(j.at("reg"), cfg.reg);
    read_key(j, "pre_norm", cfg.pre_norm);
    read_key(j, "dropout", cfg.dropout);
    read_key(j, "seed", cfg.seed);
    // `heads` at the model level is authoritative.
    cfg.attention.heads = cfg.heads;
}

}  // namespace relulab
