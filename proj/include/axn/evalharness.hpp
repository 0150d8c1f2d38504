#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "axn/factorize.hpp"
#include "axn/gbuilder.hpp"
#include "axn/retrieve.hpp"
#include "axn/scorer.hpp"

namespace axn {

/// |gold ∩ retrieved[:k]| / k with k = |gold|.
double topk_recall_at_m(const TopKList& gold, const TopKList& retrieved);

using GoldSet = std::map<QueryId, TopKList>;

/// Exact top-k per query by exhaustive scoring. When `cache` names an existing
/// file written for the same scorer, k and queries, it is loaded instead and
/// no scorer calls are made; otherwise the result is written there.
GoldSet make_gold(const Scorer& scorer, const std::vector<QueryId>& queries, std::size_t k,
                  const std::optional<std::filesystem::path>& cache = std::nullopt, std::size_t n_items = 0,
                  std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Synthetic desk benchmark
// ---------------------------------------------------------------------------

struct DeskBenchmarkSpec {
    std::size_t n_train = 200;
    std::size_t n_test = 200;
    std::size_t n_items = 2000;
    std::size_t dim = 16;
    std::size_t rank = 8;
    double sigma = 0.1;
    /// Std-dev of the perturbation that turns the true factors into "base" embeddings.
    double base_noise = 0.5;
    std::uint64_t seed = 0;
};

/// Queries 0..n_train-1 are train queries, n_train..n_train+n_test-1 test queries.
/// Base embeddings are the true factors zero-padded to `dim` plus Gaussian
/// noise: a cheap, imperfect stand-in for a dual encoder.
struct SyntheticBenchmark {
    DeskBenchmarkSpec spec;
    SyntheticOracle oracle;
    std::shared_ptr<const EmbeddingMatrix> base_queries;
    std::shared_ptr<const EmbeddingMatrix> base_items;

    std::vector<QueryId> train_ids() const;
    std::vector<QueryId> test_ids() const;
    /// True item factors zero-padded to `dim` columns.
    EmbeddingMatrix padded_true_items() const;
    EmbeddingMatrix padded_true_queries() const;
};

SyntheticBenchmark make_desk_benchmark(const DeskBenchmarkSpec& spec);

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Where the item embeddings used at search time come from.
enum class ItemSource { base, true_factors, transductive, inductive };

ItemSource parse_item_source(const std::string& s);
std::string to_string(ItemSource s);

struct IndexingSpec {
    ItemSource items = ItemSource::transductive;
    GStrategy strategy = GStrategy::q_topk;
    std::size_t k_d = 100;
    MfHyperparams mf;
};

enum class MethodType { axn, rnr, tour, exact };

struct MethodSpec {
    std::string name;
    MethodType type = MethodType::axn;
    AxnConfig axn;  // budget is overwritten per sweep point
    TourVariant tour_variant = TourVariant::mse;
    double tour_learning_rate = 1e-3;
    double tour_temperature = 1.0;
};

/// File-based corpus: already-indexed item embeddings, per-query parametric
/// embeddings and an external scorer.
struct FileCorpusSpec {
    std::filesystem::path items;
    std::filesystem::path queries;
    std::string scorer;
    std::vector<QueryId> query_ids;  // scorer id of each query row; empty = row index
    std::optional<std::filesystem::path> gold_cache;
    /// First-stage embeddings (rows aligned with `items` / `queries`) for ranking init.
    std::optional<std::filesystem::path> base_items;
    std::optional<std::filesystem::path> base_queries;
};

struct ExperimentSpec {
    std::optional<DeskBenchmarkSpec> synthetic;
    std::optional<FileCorpusSpec> files;
    IndexingSpec indexing;
    std::vector<MethodSpec> methods;
    std::vector<std::size_t> budgets;
    std::vector<std::size_t> k_values;
    std::size_t n_test_queries = 200;
    std::vector<std::uint64_t> seeds{0};
    bool timers = true;
    std::size_t workers = 1;

    void validate() const;
};

ExperimentSpec parse_experiment_spec(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentSpec& spec);

struct RecallRow {
    std::string method;
    std::size_t k = 0;
    std::size_t m = 0;
    double recall_mean = 0.0;
    double recall_stderr = 0.0;
    double calls_used = 0.0;
    double index_seconds_total = 0.0;
};

struct RecallReport {
    std::vector<RecallRow> rows;  // sorted by (method, k, m)
    /// Mean wall-clock seconds per indexing phase across seeds.
    std::map<std::string, double> index_seconds;
    std::size_t n_queries = 0;
    nlohmann::json provenance;
};

RecallReport run_experiment(const ExperimentSpec& spec);

/// JSON form of the report; wall-clock fields live under "timing" only.
nlohmann::json to_json(const RecallReport& report);

/// Writes `path` (CSV) and its JSON mirror at `path` with extension ".json".
void emit_plotdata(const RecallReport& report, const std::filesystem::path& path);
std::vector<RecallRow> read_plotdata_csv(const std::filesystem::path& path);

/// Running mean/variance with compensated summation; combining is order-independent
/// as long as values are added in a fixed order.
class RecallAccumulator {
public:
    void add(double x);
    std::size_t count() const noexcept { return n_; }
    double mean() const;
    double stderr_of_mean() const;

private:
    void kahan(double& sum, double& comp, double x);
    std::size_t n_ = 0;
    double sum_ = 0.0, sum_c_ = 0.0, sq_ = 0.0, sq_c_ = 0.0;
};

}  // namespace axn
