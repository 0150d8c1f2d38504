#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "axn/core.hpp"

namespace axn {

/// Black-box similarity f(q, i). Implementations are deterministic within a
/// session and safe to call concurrently from several sessions.
class Scorer {
public:
    virtual ~Scorer() = default;
    virtual std::vector<double> score_batch(QueryId q, std::span<const ItemId> items) const = 0;
    virtual std::string descriptor() const = 0;
    virtual std::size_t n_items() const = 0;
    /// Zero when the backend does not know its query range.
    virtual std::size_t n_queries() const = 0;
};

struct BudgetLedger {
    static constexpr std::size_t unlimited = std::numeric_limits<std::size_t>::max();

    std::size_t budget = unlimited;
    std::size_t used = 0;
    bool keep_log = false;
    std::vector<std::pair<QueryId, ItemId>> log;

    std::size_t remaining() const noexcept { return budget - used; }
};

/// Per-query scoring session: caches every answered (q, i) pair and charges
/// the ledger once per distinct item. Not thread-safe; one session per worker.
class ScoringSession {
public:
    ScoringSession(const Scorer& scorer, QueryId query, std::size_t budget = BudgetLedger::unlimited,
                   std::size_t batch_size = 64, bool keep_log = false);

    /// One score per requested item. Throws Errc::budget_exhausted, leaving the
    /// ledger untouched, when the uncached items do not fit in the remaining budget.
    std::vector<double> score(std::span<const ItemId> items);

    std::optional<double> cached(ItemId item) const;
    const BudgetLedger& ledger() const noexcept { return ledger_; }
    QueryId query() const noexcept { return query_; }
    const Scorer& scorer() const noexcept { return *scorer_; }

private:
    const Scorer* scorer_;
    QueryId query_;
    std::size_t batch_size_;
    BudgetLedger ledger_;
    std::unordered_map<ItemId, double> cache_;
};

/// Free-function form of ScoringSession::score.
inline std::vector<double> score_batch(ScoringSession& session, std::span<const ItemId> items) {
    return session.score(items);
}

/// Affine rank-preserving map s -> beta * (s - alpha), beta > 0.
struct ScoreNormalizer {
    double alpha = 0.0;
    double beta = 1.0;

    double apply(double s) const noexcept { return beta * (s - alpha); }
};

/// Matches mean and standard deviation of `ce_scores` to those of `ref_scores`.
ScoreNormalizer fit_normalizer(std::span<const double> ce_scores, std::span<const double> ref_scores);

inline double apply_normalizer(const ScoreNormalizer& n, double s) noexcept { return n.apply(s); }

/// Dense score matrix lookup: rows are queries, columns are items.
class DenseOracleScorer final : public Scorer {
public:
    explicit DenseOracleScorer(RowMatrix scores, std::string name = "oracle:dense");

    std::vector<double> score_batch(QueryId q, std::span<const ItemId> items) const override;
    std::string descriptor() const override { return name_; }
    std::size_t n_items() const override { return static_cast<std::size_t>(scores_.cols()); }
    std::size_t n_queries() const override { return static_cast<std::size_t>(scores_.rows()); }

private:
    RowMatrix scores_;
    std::string name_;
};

/// Lookup into observed sparse entries; unobserved pairs are a backend failure.
class SparseOracleScorer final : public Scorer {
public:
    explicit SparseOracleScorer(SparseScoreMatrix g, std::string name = "oracle:sparse");

    std::vector<double> score_batch(QueryId q, std::span<const ItemId> items) const override;
    std::string descriptor() const override { return name_; }
    std::size_t n_items() const override { return g_.n_items(); }
    std::size_t n_queries() const override { return g_.n_queries(); }

private:
    SparseScoreMatrix g_;
    std::string name_;
};

struct SyntheticOracleSpec {
    std::size_t n_queries = 0;
    std::size_t n_items = 0;
    std::size_t rank = 1;
    double sigma = 0.0;
    std::uint64_t seed = 0;

    friend bool operator==(const SyntheticOracleSpec&, const SyntheticOracleSpec&) = default;
};

/// score(q, i) = U*[q] . V*[i] + sigma * eta(q, i), eta keyed by (seed, q, i).
class SyntheticScorer final : public Scorer {
public:
    SyntheticScorer(SyntheticOracleSpec spec, RowMatrix true_queries, RowMatrix true_items);

    std::vector<double> score_batch(QueryId q, std::span<const ItemId> items) const override;
    std::string descriptor() const override;
    std::size_t n_items() const override { return spec_.n_items; }
    std::size_t n_queries() const override { return spec_.n_queries; }
    const SyntheticOracleSpec& spec() const noexcept { return spec_; }

private:
    SyntheticOracleSpec spec_;
    RowMatrix true_queries_;
    RowMatrix true_items_;
    std::uint64_t noise_seed_;
};

struct SyntheticOracle {
    std::shared_ptr<const SyntheticScorer> scorer;
    EmbeddingMatrix true_queries;
    EmbeddingMatrix true_items;
};

SyntheticOracle make_synthetic_oracle(const SyntheticOracleSpec& spec);

/// Applies a ScoreNormalizer on top of another scorer.
class NormalizedScorer final : public Scorer {
public:
    NormalizedScorer(std::shared_ptr<const Scorer> inner, ScoreNormalizer normalizer)
        : inner_(std::move(inner)), normalizer_(normalizer) {}

    std::vector<double> score_batch(QueryId q, std::span<const ItemId> items) const override;
    std::string descriptor() const override;
    std::size_t n_items() const override { return inner_->n_items(); }
    std::size_t n_queries() const override { return inner_->n_queries(); }

private:
    std::shared_ptr<const Scorer> inner_;
    ScoreNormalizer normalizer_;
};

/// Scorer backed by a child process speaking newline-delimited JSON on stdio.
/// Requests are serialized over the single connection.
class ExternalScorer final : public Scorer {
public:
    static constexpr int kProtocolVersion = 1;

    ExternalScorer(const std::string& command, int protocol_version = kProtocolVersion);
    ~ExternalScorer() override;
    ExternalScorer(const ExternalScorer&) = delete;
    ExternalScorer& operator=(const ExternalScorer&) = delete;

    std::vector<double> score_batch(QueryId q, std::span<const ItemId> items) const override;
    std::string descriptor() const override { return "exec:" + name_; }
    /// The wire protocol carries no corpus size; set it from the item embeddings.
    void set_n_items(std::size_t n) noexcept { n_items_ = n; }
    std::size_t n_items() const override { return n_items_; }
    std::size_t n_queries() const override { return 0; }

private:
    std::string request(const std::string& line) const;
    void shutdown() noexcept;

    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::string name_;
    std::size_t n_items_ = 0;
    mutable std::string read_buffer_;
    mutable bool dead_ = false;
    mutable std::mutex mutex_;
};

inline std::shared_ptr<Scorer> external_scorer_connect(const std::string& command,
                                                       int protocol_version = ExternalScorer::kProtocolVersion) {
    return std::make_shared<ExternalScorer>(command, protocol_version);
}

/// Parses a backend spec: `oracle:<file>` (AXNE dense score matrix or AXNG
/// sparse matrix), `synth:<json spec file>`, `exec:<command line>`.
std::shared_ptr<const Scorer> make_scorer(const std::string& backend_spec);

SyntheticOracleSpec read_synthetic_spec(const std::filesystem::path& path);
void write_synthetic_spec(const SyntheticOracleSpec& spec, const std::filesystem::path& path);

}  // namespace axn
