#include "rstereo/config.hpp"

#include <json.hpp>

#include "rstereo/errors.hpp"

namespace rstereo {

using nlohmann::json;

NormKind parse_norm(const std::string& name) {
  if (name == "none") return NormKind::kNone;
  if (name == "instance") return NormKind::kInstance;
  if (name == "batch") return NormKind::kBatch;
  throw ContractError("unknown normalisation '" + name + "'");
}

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::kNone:
      return "none";
    case NormKind::kInstance:
      return "instance";
    case NormKind::kBatch:
      return "batch";
  }
  return "none";
}

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw ContractError("config: " + message);
}

template <typename V>
void read(const json& obj, const char* key, V& out) {
  if (obj.contains(key)) out = obj.at(key).get<V>();
}

void reject_unknown(const json& obj, std::initializer_list<const char*> keys, const std::string& where) {
  for (const auto& [k, v] : obj.items()) {
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    require(known, "unknown key '" + k + "' in " + where);
  }
}

}  // namespace

void ModelConfig::validate() const {
  require(encoder.downsample == 4 || encoder.downsample == 8, "downsample must be 4 or 8");
  for (int w : encoder.widths) require(w > 0, "encoder widths must be positive");
  require(encoder.blocks_per_stage >= 1, "blocks_per_stage must be >= 1");
  require(encoder.feature_dim > 0, "feature_dim must be positive");
  require(correlation.levels >= 1, "correlation levels must be >= 1");
  require(correlation.radius >= 0, "radius must be >= 0");
  require(update.levels >= 1 && update.levels <= 3, "update levels must be 1, 2 or 3");
  require(update.hidden_dim > 0 && update.corr_dim > 0 && update.disp_dim > 0, "update widths must be positive");
  require(update.motion_dim >= 2, "motion_dim must be >= 2");
  require(update.head_dim > 0 && update.mask_dim > 0, "head widths must be positive");
}

std::string ModelConfig::to_json() const {
  json j;
  j["encoder"] = {{"downsample", encoder.downsample},
                  {"shared_backbone", encoder.shared_backbone},
                  {"widths", encoder.widths},
                  {"blocks_per_stage", encoder.blocks_per_stage},
                  {"feature_dim", encoder.feature_dim},
                  {"context_norm", to_string(encoder.context_norm)}};
  j["correlation"] = {{"levels", correlation.levels},
                      {"radius", correlation.radius},
                      {"normalize", correlation.normalize},
                      {"on_the_fly", correlation.on_the_fly}};
  j["update"] = {{"levels", update.levels},         {"hidden_dim", update.hidden_dim},
                 {"corr_dim", update.corr_dim},     {"disp_dim", update.disp_dim},
                 {"motion_dim", update.motion_dim}, {"head_dim", update.head_dim},
                 {"mask_dim", update.mask_dim}};
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what(), e.byte > 0 ? e.byte - 1 : 0);
  }
  ModelConfig c;
  try {
    reject_unknown(j, {"encoder", "correlation", "update"}, "model config");
    if (j.contains("encoder")) {
      const auto& e = j.at("encoder");
      reject_unknown(e, {"downsample", "shared_backbone", "widths", "blocks_per_stage", "feature_dim", "context_norm"},
                     "encoder");
      read(e, "downsample", c.encoder.downsample);
      read(e, "shared_backbone", c.encoder.shared_backbone);
      read(e, "widths", c.encoder.widths);
      read(e, "blocks_per_stage", c.encoder.blocks_per_stage);
      read(e, "feature_dim", c.encoder.feature_dim);
      if (e.contains("context_norm")) c.encoder.context_norm = parse_norm(e.at("context_norm").get<std::string>());
    }
    if (j.contains("correlation")) {
      const auto& k = j.at("correlation");
      reject_unknown(k, {"levels", "radius", "normalize", "on_the_fly"}, "correlation");
      read(k, "levels", c.correlation.levels);
      read(k, "radius", c.correlation.radius);
      read(k, "normalize", c.correlation.normalize);
      read(k, "on_the_fly", c.correlation.on_the_fly);
    }
    if (j.contains("update")) {
      const auto& u = j.at("update");
      reject_unknown(u, {"levels", "hidden_dim", "corr_dim", "disp_dim", "motion_dim", "head_dim", "mask_dim"},
                     "update");
      read(u, "levels", c.update.levels);
      read(u, "hidden_dim", c.update.hidden_dim);
      read(u, "corr_dim", c.update.corr_dim);
      read(u, "disp_dim", c.update.disp_dim);
      read(u, "motion_dim", c.update.motion_dim);
      read(u, "head_dim", c.update.head_dim);
      read(u, "mask_dim", c.update.mask_dim);
    }
  } catch (const json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace rstereo
