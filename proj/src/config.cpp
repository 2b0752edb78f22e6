#include "relulab/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

namespace relulab {

void to_json(Json& j, const TaskSpec& spec) {
    j = Json{{"kind", to_string(spec.kind)},
             {"length_limit", spec.length_limit},
             {"vocab", spec.vocab},
             {"examples", spec.examples},
             {"seed", spec.seed},
             {"lookup_pairs", spec.lookup_pairs}};
}

void from_json(const Json& j, TaskSpec& spec) {
    require_known_keys(j, {"kind", "length_limit", "vocab", "examples", "seed", "lookup_pairs"}, "task");
    if (j.contains("kind")) spec.kind = task_kind_from_string(j.at("kind").get<std::string>());
    read_key(j, "length_limit", spec.length_limit);
    read_key(j, "vocab", spec.vocab);
    read_key(j, "examples", spec.examples);
    read_key(j, "seed", spec.seed);
    read_key(j, "lookup_pairs", spec.lookup_pairs);
}

void to_json(Json& j, const TrainOptions& o) {
    j = Json{{"steps", o.steps},
             {"batch_tokens", o.batch_tokens},
             {"base_lr", o.schedule.base_lr},
             {"warmup", o.schedule.warmup},
             {"beta1", o.adam.beta1},
             {"beta2", o.adam.beta2},
             {"eps", o.adam.eps},
             {"log_every", o.log_every},
             {"eval_examples", o.eval_examples},
             {"divergence_factor", o.divergence_factor},
             {"seed", o.seed}};
}

void from_json(const Json& j, TrainOptions& o) {
    require_known_keys(j, {"steps", "batch_tokens", "base_lr", "warmup", "beta1", "beta2", "eps", "log_every",
                           "eval_examples", "divergence_factor", "seed"},
                       "train");
    read_key(j, "steps", o.steps);
    read_key(j, "batch_tokens", o.batch_tokens);
    read_key(j, "base_lr", o.schedule.base_lr);
    read_key(j, "warmup", o.schedule.warmup);
    read_key(j, "beta1", o.adam.beta1);
    read_key(j, "beta2", o.adam.beta2);
    read_key(j, "eps", o.adam.eps);
    read_key(j, "log_every", o.log_every);
    read_key(j, "eval_examples", o.eval_examples);
    read_key(j, "divergence_factor", o.divergence_factor);
    read_key(j, "seed", o.seed);
}

void RunConfig::override_seed(std::uint64_t seed) {
    model.seed = seed;
    task.seed = seed;
    train.seed = seed;
}

void to_json(Json& j, const RunConfig& cfg) { j = Json{{"model", cfg.model}, {"task", cfg.task}, {"train", cfg.train}}; }

void from_json(const Json& j, RunConfig& cfg) {
    require_known_keys(j, {"model", "task", "train"}, "run config");
    if (j.contains("model")) from_json(j.at("model"), cfg.model);
    if (j.contains("task")) from_json(j.at("task"), cfg.task);
    if (j.contains("train")) from_json(j.at("train"), cfg.train);
}

namespace {

template <class T>
bool parse_exact(const std::string& s, T& out) {
    const char* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && ptr == end;
}

Json scalar_to_json(const YAML::Node& node) {
    const std::string& s = node.Scalar();
    if (node.Tag() == "!") return s;  // quoted
    if (s == "true" || s == "True" || s == "TRUE") return true;
    if (s == "false" || s == "False" || s == "FALSE") return false;
    if (s.empty() || s == "~" || s == "null" || s == "Null" || s == "NULL") return nullptr;
    if (std::int64_t i; parse_exact(s, i)) return i;
    if (std::uint64_t u; parse_exact(s, u)) return u;
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (end == s.c_str() + s.size()) return d;
    return s;
}

Json yaml_to_json(const YAML::Node& node) {
    switch (node.Type()) {
        case YAML::NodeType::Null:
        case YAML::NodeType::Undefined:
            return nullptr;
        case YAML::NodeType::Scalar:
            return scalar_to_json(node);
        case YAML::NodeType::Sequence: {
            Json arr = Json::array();
            for (const auto& item : node) arr.push_back(yaml_to_json(item));
            return arr;
        }
        case YAML::NodeType::Map: {
            Json obj = Json::object();
            for (const auto& kv : node) obj[kv.first.as<std::string>()] = yaml_to_json(kv.second);
            return obj;
        }
    }
    return nullptr;
}

}  // namespace

Json parse_yaml(const std::string& text) {
    try {
        return yaml_to_json(YAML::Load(text));
    } catch (const YAML::Exception& e) {
        throw ContractViolation(std::string("config parse error: ") + e.what());
    }
}

Json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    Json j = parse_yaml(buf.str());
    if (j.is_null()) j = Json::object();
    return j;
}

std::string config_hash(const Json& config) {
    const std::string text = config.dump();
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(text.data(), text.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
        throw std::runtime_error("SHA-256 failed");
    }
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 0xf];
    }
    return out;
}

std::string artifact_version() { return RELULAB_VERSION; }

void write_manifest(const std::filesystem::path& dir, const Json& config, std::uint64_t seed,
                    const std::string& command) {
    std::filesystem::create_directories(dir);
    Json m{{"artifact_version", artifact_version()},
           {"command", command},
           {"config_hash", config_hash(config)},
           {"seed", seed},
           {"rng", Rng::algorithm()},
           {"config", config}};
    std::ofstream out(dir / "manifest.json");
    out << m.dump(2) << '\n';
    if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
}

}  // namespace relulab
