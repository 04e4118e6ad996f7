#pragma once

#include "switch_sae/data.hpp"
#include "switch_sae/train.hpp"

#include <json.hpp>

#include <filesystem>

namespace ssae {

/// Everything a run needs, resolved from a JSON document with sections
/// data{}, model{}, train{}, eval{}. Absent keys take defaults; unknown
/// keys and ill-typed values are rejected with ConfigError naming the
/// offending "section.key".
struct RunConfig {
  SyntheticSpec data;
  Index data_count = 65536;
  std::uint64_t sample_stream = 0;

  TrainConfig train;  // train.d mirrors data.d
  Index shuffle_buffer = 4096;

  double eval_threshold = 0.9;
  Index eval_chunk_rows = 4096;
  Index eval_baseline_blocks = 16;
};

/// Default document; also the schema (every accepted key appears here).
nlohmann::ordered_json default_config_json();

RunConfig parse_run_config(const nlohmann::json& doc);
RunConfig load_run_config(const std::filesystem::path& path);

/// Resolved document with every field spelled out.
nlohmann::ordered_json to_json(const RunConfig& config);

}  // namespace ssae
