#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "axn/retrieve.hpp"

namespace axn::cli {

inline constexpr const char* kVersion = "0.1.0";

/// Process exit status for an error code: 2 for configuration problems, 1 otherwise.
int exit_status(Errc code) noexcept;

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

/// Parse failures are configuration errors; a missing file is an io error.
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const nlohmann::json& j, const std::filesystem::path& path);

/// One structured line on stderr: `axn stage=<stage> status=<status> [seconds=..] [detail]`.
void log_stage(const std::string& stage, const std::string& status, double seconds = -1.0,
               const std::string& detail = "");

/// tool/version/config hash/seeds/file hashes block attached to every report.
nlohmann::json provenance(const nlohmann::json& config, const nlohmann::json& seeds,
                          const std::vector<std::pair<std::string, std::filesystem::path>>& files);

enum class SearchMethod { axn, rnr, tour };
SearchMethod parse_search_method(const std::string& s);

struct BatchSearchSpec {
    SearchMethod method = SearchMethod::axn;
    AxnConfig axn;
    TourVariant tour_variant = TourVariant::mse;
    double tour_learning_rate = 1e-3;
    double tour_temperature = 1.0;
    std::size_t k = 10;
    std::size_t workers = 1;
};

/// Runs one search per query; `query_embs` rows align with `query_ids` and may be
/// null when only random init is used. `rankings` (if any) map each query id to
/// its first-stage order.
nlohmann::json batch_search(const BatchSearchSpec& spec, const EmbeddingMatrix& items, const Scorer& scorer,
                            const std::vector<QueryId>& query_ids, const EmbeddingMatrix* query_embs,
                            const std::map<QueryId, std::vector<ItemId>>& rankings);

}  // namespace axn::cli
