#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "panet/backbone.hpp"
#include "panet/trainer.hpp"

namespace panet {

/// Bad flags, unknown config keys, values of the wrong type.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ConfigSource { defaults, file, flag };
std::string to_string(ConfigSource source);

enum class Preset { desk, paper };

/// Flat key/value settings merged as defaults <- config file <- flags. Every
/// effective value remembers which layer it came from.
class RunConfig {
 public:
  explicit RunConfig(Preset preset = Preset::desk);

  /// Reads a JSON object of overrides. Unknown keys and type mismatches throw
  /// UsageError; an unreadable file throws DataError.
  void merge_file(const std::filesystem::path& path);
  void merge_json(const nlohmann::json& overrides, ConfigSource source);
  void set(const std::string& key, nlohmann::json value, ConfigSource source = ConfigSource::flag);

  const nlohmann::json& get(const std::string& key) const;
  ConfigSource source(const std::string& key) const;
  bool has(const std::string& key) const { return values_.contains(key); }

  BackboneConfig backbone() const;
  TrainConfig train() const;

  /// {"key": value, ...}, or {"key": {"value": v, "source": s}} with sources.
  nlohmann::json to_json(bool with_sources = false) const;

 private:
  struct Entry {
    nlohmann::json value;
    ConfigSource source = ConfigSource::defaults;
  };
  std::map<std::string, Entry> values_;
};

}  // namespace panet
