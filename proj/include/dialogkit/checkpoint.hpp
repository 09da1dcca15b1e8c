#pragma once

#include <filesystem>
#include <string>

#include "dialogkit/optim.hpp"

namespace dialogkit::nn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ParamStore params;
  std::string metadata;  // free-form JSON document
};

// Binary container: magic, version, metadata blob, then for each parameter
// its name, shape and flat payload. Written to a temp file and renamed.
void save_checkpoint(const std::filesystem::path& path, const ParamStore& params,
                     const std::string& metadata = "{}");
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           bool requires_grad = true);

// Writes `content` to `path` via a temp file in the same directory + rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

}  // namespace dialogkit::nn
