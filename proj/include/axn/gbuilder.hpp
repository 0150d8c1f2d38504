#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "axn/core.hpp"
#include "axn/scorer.hpp"

namespace axn {

enum class GStrategy {
    q_topk,          ///< top-k_d items per train query by base dot product
    q_random,        ///< k_d uniformly random items per train query
    i_topk_queries,  ///< top-k_d train queries per item by base dot product
};

GStrategy parse_strategy(const std::string& name);
std::string to_string(GStrategy s);

struct GBuildSpec {
    GStrategy strategy = GStrategy::q_topk;
    std::size_t k_d = 100;
    std::uint64_t seed = 0;
    /// Required for the top-k strategies; borrowed, must outlive the build.
    const EmbeddingMatrix* base_queries = nullptr;
    const EmbeddingMatrix* base_items = nullptr;
    /// Train query count; 0 takes it from base_queries.
    std::size_t n_train_queries = 0;
    /// G row j is scored as scorer query `query_ids[j]`; empty means identity.
    std::vector<QueryId> query_ids;
    std::optional<ScoreNormalizer> normalizer;
    std::size_t batch_size = 64;
    std::size_t workers = 1;
};

/// Observes k_d entries per train query (Q strategies) or per item (I strategy).
/// Entries are sorted by (query, item); the result is deterministic given the seed.
SparseScoreMatrix build_sparse_matrix(const GBuildSpec& spec, const Scorer& scorer);

struct CoverageStats {
    std::size_t min_per_item = 0;
    double mean_per_item = 0.0;
    std::size_t max_per_item = 0;
    double zero_fraction = 1.0;
};

CoverageStats coverage_stats(const SparseScoreMatrix& g);

}  // namespace axn
