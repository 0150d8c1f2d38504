#pragma once

#include <filesystem>
#include <optional>

#include <json.hpp>

namespace axn::cli {

struct PipelineOptions {
    std::filesystem::path config;
    std::filesystem::path out;
    bool force = false;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> workers;
};

/// Validates the whole config first, then runs corpus -> build_g -> train_mf ->
/// search -> eval, skipping stages whose inputs and settings are unchanged.
void run_pipeline(const PipelineOptions& opt);

/// Normalized config with every default filled in; throws Errc::config on
/// unknown keys or invalid values. Relative paths resolve against `base_dir`.
nlohmann::json normalize_pipeline_config(const nlohmann::json& raw, const std::filesystem::path& base_dir);

}  // namespace axn::cli
