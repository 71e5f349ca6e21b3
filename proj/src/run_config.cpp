#include "panet/run_config.hpp"

#include <fstream>

namespace panet {

std::string to_string(ConfigSource source) {
  switch (source) {
    case ConfigSource::defaults:
      return "default";
    case ConfigSource::file:
      return "file";
    case ConfigSource::flag:
      return "flag";
  }
  return "default";
}

namespace {

const char* const kModelKeys[] = {"input_size",   "in_channels", "base_channels", "stage_depths",
                                  "channel_multipliers", "embedding_dim", "fmm_ratio", "topology",
                                  "pooling",      "l2_normalize_embedding"};

bool same_kind(const nlohmann::json& a, const nlohmann::json& b) {
  if (a.is_number() && b.is_number()) {
    // integers stay integers; reals accept either
    return !(a.is_number_integer() && b.is_number_float());
  }
  return a.type() == b.type();
}

}  // namespace

RunConfig::RunConfig(Preset preset) {
  const BackboneConfig model = preset == Preset::desk ? BackboneConfig::desk() : BackboneConfig::paper_scale();
  const TrainConfig train = preset == Preset::desk ? TrainConfig::desk() : TrainConfig{};
  const nlohmann::json m = model.to_json();
  for (const auto& [key, value] : m.items()) values_[key] = {value, ConfigSource::defaults};
  const nlohmann::json t{{"lr0", train.lr0},
                         {"lr_min", train.lr_min},
                         {"weight_decay", train.weight_decay},
                         {"batch_p", train.batch_p},
                         {"batch_k", train.batch_k},
                         {"epochs", train.epochs},
                         {"max_steps", train.max_steps},
                         {"margin", train.margin},
                         {"seed", train.seed},
                         {"eval_every", train.eval_every},
                         {"online_augment", train.online_augment},
                         {"split_ratio", 0.8}};
  for (const auto& [key, value] : t.items()) values_[key] = {value, ConfigSource::defaults};
}

void RunConfig::set(const std::string& key, nlohmann::json value, ConfigSource source) {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  if (!same_kind(it->second.value, value)) {
    throw UsageError("config key '" + key + "' expects a value like " + it->second.value.dump() +
                     ", got " + value.dump());
  }
  if (value.is_number_float() && it->second.value.is_number_integer()) {
    throw UsageError("config key '" + key + "' expects an integer");
  }
  it->second = {std::move(value), source};
}

void RunConfig::merge_json(const nlohmann::json& overrides, ConfigSource source) {
  if (!overrides.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, value] : overrides.items()) set(key, value, source);
}

void RunConfig::merge_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config file: " + path.string());
  auto j = nlohmann::json::parse(is, nullptr, false);
  if (j.is_discarded()) throw UsageError("config file is not valid JSON: " + path.string());
  merge_json(j, ConfigSource::file);
}

const nlohmann::json& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second.value;
}

ConfigSource RunConfig::source(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw UsageError("unknown config key '" + key + "'");
  return it->second.source;
}

BackboneConfig RunConfig::backbone() const {
  nlohmann::json j;
  for (const char* key : kModelKeys) j[key] = get(key);
  try {
    auto cfg = BackboneConfig::from_json(j);
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("invalid model config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

TrainConfig RunConfig::train() const {
  TrainConfig t;
  try {
    t.lr0 = get("lr0").get<double>();
    t.lr_min = get("lr_min").get<double>();
    t.weight_decay = get("weight_decay").get<double>();
    t.batch_p = get("batch_p").get<std::size_t>();
    t.batch_k = get("batch_k").get<std::size_t>();
    t.epochs = get("epochs").get<std::size_t>();
    t.max_steps = get("max_steps").get<std::size_t>();
    t.margin = get("margin").get<double>();
    t.seed = get("seed").get<std::uint64_t>();
    t.eval_every = get("eval_every").get<std::size_t>();
    t.online_augment = get("online_augment").get<bool>();
    t.validate();
  } catch (const nlohmann::json::exception& e) {
    throw UsageError(std::string("invalid training config: ") + e.what());
  } catch (const UsageError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return t;
}

nlohmann::json RunConfig::to_json(bool with_sources) const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [key, entry] : values_) {
    if (with_sources) {
      j[key] = {{"value", entry.value}, {"source", to_string(entry.source)}};
    } else {
      j[key] = entry.value;
    }
  }
  return j;
}

}  // namespace panet
