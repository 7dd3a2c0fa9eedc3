#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "sparseq/pipeline.hpp"

namespace sparseq {

// Pipeline settings plus data and artifact locations.
struct CliConfig {
  PipelineConfig pipeline;
  ViTConfig model = ViTConfig::desk();
  std::string data = "synthetic";  // "synthetic" or "idx"
  std::size_t train_size = 1024;
  std::size_t test_size = 1000;
  std::uint64_t data_seed = 2024;
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::filesystem::path out = "artifacts";

  void validate() const;
};

// Keys follow the flag names; unknown keys are a Config error.
CliConfig parse_cli_config(std::string_view json_text, CliConfig base = {});
std::string dump_cli_config(const CliConfig& c);

struct Splits {
  Dataset train, test;
};
Splits load_splits(const CliConfig& c);

// Artifact file names inside the output directory.
namespace artifact {
std::filesystem::path dense(const CliConfig& c);
std::filesystem::path sparse(const CliConfig& c);
std::filesystem::path stage_losses(const CliConfig& c);
std::filesystem::path quantized(const CliConfig& c);
std::filesystem::path packed_dir(const CliConfig& c);
std::filesystem::path metrics(const CliConfig& c, std::string_view phase);
}  // namespace artifact

// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitFormat = 2;
inline constexpr int kExitDivergence = 3;

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace sparseq
