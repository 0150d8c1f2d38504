#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "axn/error.hpp"

namespace axn {

/// Dense 0..n-1 index into a registered item corpus.
using ItemId = std::uint64_t;
/// Dense 0..n-1 index into a registered query set.
using QueryId = std::uint64_t;

template <typename Scalar>
using RowMatrixT = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using RowMatrix = RowMatrixT<double>;
using Vector = VectorT<double>;

enum class Role : std::uint8_t { query = 0, item = 1 };

/// Immutable row-major block of d-dimensional embeddings, one row per id.
class EmbeddingMatrix {
public:
    /// Throws Errc::invalid_matrix unless rows > 0, dim > 0 and every value is finite.
    EmbeddingMatrix(RowMatrix data, Role role);

    std::size_t rows() const noexcept { return static_cast<std::size_t>(data_.rows()); }
    std::size_t dim() const noexcept { return static_cast<std::size_t>(data_.cols()); }
    Role role() const noexcept { return role_; }
    const RowMatrix& data() const noexcept { return data_; }
    auto row(std::size_t i) const { return data_.row(static_cast<Eigen::Index>(i)); }

    friend bool operator==(const EmbeddingMatrix& a, const EmbeddingMatrix& b) {
        return a.role_ == b.role_ && a.data_.rows() == b.data_.rows() &&
               a.data_.cols() == b.data_.cols() && a.data_ == b.data_;
    }

private:
    RowMatrix data_;
    Role role_;
};

struct ScoreEntry {
    QueryId query;
    ItemId item;
    double score;

    friend bool operator==(const ScoreEntry&, const ScoreEntry&) = default;
};

/// Observed (query, item, score) triples. Entries are kept sorted by
/// (query, item); construction rejects duplicates, out-of-range ids and
/// non-finite scores.
class SparseScoreMatrix {
public:
    SparseScoreMatrix(std::size_t n_queries, std::size_t n_items, std::vector<ScoreEntry> entries);

    std::size_t n_queries() const noexcept { return n_queries_; }
    std::size_t n_items() const noexcept { return n_items_; }
    std::size_t nnz() const noexcept { return entries_.size(); }
    std::span<const ScoreEntry> entries() const noexcept { return entries_; }
    /// Entries of one query, contiguous thanks to the sort order.
    std::span<const ScoreEntry> row(QueryId q) const;
    /// Exact lookup; returns false when (q, i) was never observed.
    bool find(QueryId q, ItemId i, double& score) const;

    friend bool operator==(const SparseScoreMatrix&, const SparseScoreMatrix&) = default;

private:
    std::size_t n_queries_;
    std::size_t n_items_;
    std::vector<ScoreEntry> entries_;
    std::vector<std::size_t> row_offsets_;
};

struct ScoredItem {
    ItemId id;
    double score;

    friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

/// Global ranking order: higher score first, ties broken by lower id.
inline bool ranks_before(const ScoredItem& a, const ScoredItem& b) noexcept {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
}

/// At most k items, sorted by `ranks_before`, ids unique.
class TopKList {
public:
    TopKList() = default;
    /// Builds the top-k of arbitrary candidates. Duplicate ids collapse to the higher score.
    static TopKList from_candidates(std::vector<ScoredItem> candidates, std::size_t k);

    std::size_t k() const noexcept { return k_; }
    std::size_t size() const noexcept { return items_.size(); }
    bool empty() const noexcept { return items_.empty(); }
    const std::vector<ScoredItem>& items() const noexcept { return items_; }
    std::vector<ItemId> ids() const;

    friend bool operator==(const TopKList&, const TopKList&) = default;

private:
    std::size_t k_ = 0;
    std::vector<ScoredItem> items_;
};

TopKList topk_merge(const TopKList& a, const TopKList& b, std::size_t k);

/// Top-k over a dense score vector where position j corresponds to ids[j]
/// (or to item j when ids is empty).
TopKList select_topk(std::span<const double> scores, std::span<const ItemId> ids, std::size_t k);

// Binary persistence (little-endian). See README for the byte layout.
void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix load_embeddings(const std::filesystem::path& path);
void save_sparse(const SparseScoreMatrix& g, const std::filesystem::path& path);
SparseScoreMatrix load_sparse(const std::filesystem::path& path);

// CSV interchange: embeddings as one comma-separated row per id; sparse
// matrices as `query_id,item_id,score` with a header line.
void export_embeddings_csv(const EmbeddingMatrix& m, const std::filesystem::path& path);
EmbeddingMatrix import_embeddings_csv(const std::filesystem::path& path, Role role);
void export_sparse_csv(const SparseScoreMatrix& g, const std::filesystem::path& path);
/// Zero counts infer the shape from the largest id present.
SparseScoreMatrix import_sparse_csv(const std::filesystem::path& path, std::size_t n_queries = 0,
                                    std::size_t n_items = 0);

/// Reads the 4-byte magic of a file ("AXNE", "AXNG", ...); empty string if unreadable.
std::string peek_magic(const std::filesystem::path& path);

}  // namespace axn
