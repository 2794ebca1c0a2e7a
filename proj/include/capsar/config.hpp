#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "capsar/model.hpp"

namespace capsar {

struct RunConfig {
  ModelConfig model;
  std::string train_path;
  std::string dev_path;
  std::string test_path;
  std::string format = "auto";   // auto | xml | tsv
  std::string embeddings_path;   // empty: random initialisation
  std::uint64_t seed = 1;
  std::size_t epochs = 80;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::size_t threads = 1;
  std::string output_dir = "run";
  double threshold = 0.5;
  std::size_t top_k = 5;

  // Sets one field from its textual value. Unknown keys and unparsable values
  // raise ConfigError naming the key.
  void set(std::string_view key, std::string_view value);

  // Every recognised key, in file order.
  static const std::vector<std::string>& keys();
};

// Flat `key = value` lines; '#' starts a comment; blank lines ignored.
// Relative data paths are resolved against base_dir when it is non-empty.
RunConfig parse_run_config(std::istream& in, const std::string& base_dir = "");
RunConfig load_run_config(const std::string& path);

// Serialises all keys; parse_run_config(write) reproduces the config.
void write_run_config(const RunConfig& config, std::ostream& out);

}  // namespace capsar
