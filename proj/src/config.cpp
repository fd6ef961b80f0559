#include "tiger/config.hpp"

#include <fstream>
#include <set>

#include "tiger/errors.hpp"

namespace tiger {

void RunConfig::validate() const {
  model.validate();
  trainer.validate();
  data.validate();
  curation.validate();
  retrieval.validate();
  evaluation.validate();
}

void RunConfig::apply_seed(std::uint64_t s) {
  seed = s;
  data.seed = s;
  trainer.seed = s;
  evaluation.seed = s;
}

void to_json(nlohmann::json& j, const SplitThresholds& c) {
  j = nlohmann::json{{"t_high", c.t_high},         {"t_low", c.t_low},
                     {"bin_size_deg", c.bin_size_deg}, {"min_frames", c.min_frames},
                     {"min_months", c.min_months}, {"test_camera_budget", c.test_camera_budget}};
}

void from_json(const nlohmann::json& j, SplitThresholds& c) {
  static const std::set<std::string> kKeys = {"t_high",     "t_low",      "bin_size_deg",
                                              "min_frames", "min_months", "test_camera_budget"};
  if (!j.is_object()) throw ConfigError("curation: expected an object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.count(key)) throw ConfigError("curation." + key + ": unknown key");
  c.t_high = j.value("t_high", c.t_high);
  c.t_low = j.value("t_low", c.t_low);
  c.bin_size_deg = j.value("bin_size_deg", c.bin_size_deg);
  c.min_frames = j.value("min_frames", c.min_frames);
  c.min_months = j.value("min_months", c.min_months);
  c.test_camera_budget = j.value("test_camera_budget", c.test_camera_budget);
}

nlohmann::json run_config_to_json(const RunConfig& c) {
  nlohmann::json j;
  j["model"] = c.model;
  j["trainer"] = c.trainer;
  j["data"] = c.data;
  j["curation"] = c.curation;
  j["retrieval"] = c.retrieval;
  j["evaluation"] = c.evaluation;
  if (c.seed) j["seed"] = *c.seed;
  j["paths"] = c.paths;
  return j;
}

namespace {

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

// Path of the first value whose JSON type differs from the default's.
std::string type_mismatch(const nlohmann::json& given, const nlohmann::json& reference, const std::string& prefix) {
  if (!given.is_object() || !reference.is_object()) return "";
  for (const auto& [key, value] : given.items()) {
    if (!reference.contains(key) || reference[key].is_null()) continue;
    const std::string path = prefix + "." + key;
    if (!same_kind(value, reference[key])) return path;
    const std::string inner = type_mismatch(value, reference[key], path);
    if (!inner.empty()) return inner;
  }
  return "";
}

template <typename T>
void read_section(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    from_json(j.at(key), out);
  } catch (const ConfigError&) {
    throw;
  } catch (const nlohmann::json::exception& e) {
    nlohmann::json reference;
    to_json(reference, T{});
    const std::string path = type_mismatch(j.at(key), reference, key);
    throw ConfigError((path.empty() ? std::string(key) : path) + ": " + e.what());
  }
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> kKeys = {"model",     "trainer",    "data", "curation",
                                              "retrieval", "evaluation", "seed", "paths"};
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  for (const auto& [key, _] : j.items())
    if (!kKeys.count(key)) throw ConfigError(key + ": unknown key");
  RunConfig c;
  read_section(j, "model", c.model);
  read_section(j, "trainer", c.trainer);
  read_section(j, "data", c.data);
  read_section(j, "curation", c.curation);
  read_section(j, "retrieval", c.retrieval);
  read_section(j, "evaluation", c.evaluation);
  if (j.contains("paths")) {
    try {
      c.paths = j["paths"].get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError("paths: expected an object of strings");
    }
  }
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ConfigError("seed: expected a non-negative integer");
    c.apply_seed(j["seed"].get<std::uint64_t>());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace tiger
