#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "axn/core.hpp"
#include "axn/linalg.hpp"
#include "axn/scorer.hpp"

namespace axn {

enum class InitPolicy { random, emb_topk, precomputed_ranking };

InitPolicy parse_init_policy(const std::string& name);
std::string to_string(InitPolicy p);

struct AxnConfig {
    std::size_t budget = 100;
    std::size_t rounds = 5;
    /// Items per round; 0 splits the budget evenly with the remainder
    /// front-loaded into the earliest rounds.
    std::size_t k_s = 0;
    double lambda = 0.0;
    InitPolicy init = InitPolicy::random;
    /// 0 disables the shortlist; otherwise retrieval is confined to the top
    /// `shortlist_size` items of the init ranking.
    std::size_t shortlist_size = 0;
    double pinv_tolerance = 1e-10;
    std::uint64_t seed = 0;
    std::size_t batch_size = 64;
    bool keep_approx_scores = false;

    void validate() const;
};

/// Number of items scored in each round.
std::vector<std::size_t> round_sizes(const AxnConfig& cfg);

struct RoundTrace {
    std::size_t round = 0;
    std::size_t new_items = 0;
    double residual_norm = 0.0;  // ||V_A u_linreg - a|| after the round's solve

    friend bool operator==(const RoundTrace&, const RoundTrace&) = default;
};

struct SearchResult {
    TopKList topk;
    std::optional<Vector> approx_scores;
    std::size_t calls_used = 0;
    std::vector<RoundTrace> trace;
    bool stopped_early = false;
    /// Every item scored during the search, in retrieval order, with its exact score.
    std::vector<ItemId> retrieved;
    std::vector<double> exact_scores;
};

/// Exhaustive exact top-k; scores every item once.
TopKList brute_force_knn(const Scorer& scorer, QueryId q, std::size_t k, std::size_t n_items = 0,
                         std::size_t batch_size = 256);

/// u . V_i for every item, or for the shortlisted items in shortlist order.
Vector approx_scores(const Vector& u, const EmbeddingMatrix& V, const std::vector<ItemId>* shortlist = nullptr);

/// Top-k of u . V_i over the shortlist (or all items) minus `exclude`.
TopKList dot_topk(const Vector& u, const EmbeddingMatrix& V, std::size_t k, std::span<const ItemId> exclude = {},
                  const std::vector<ItemId>* shortlist = nullptr);

/// Multi-round adaptive search: score a first batch chosen by the init
/// policy, then alternately refit the query embedding by least squares on all
/// exact scores so far and retrieve the next batch by approximate score.
SearchResult axn_search(const AxnConfig& cfg, const EmbeddingMatrix& V, const Scorer& scorer, QueryId q, std::size_t k,
                        const std::optional<Vector>& u_param = std::nullopt,
                        std::span<const ItemId> init_ranking = {});

/// Retrieve the top-m items by u . V_i, score them all, return the exact top-k.
SearchResult rnr_search(const EmbeddingMatrix& V, const Scorer& scorer, QueryId q, const Vector& u, std::size_t m,
                        std::size_t k, std::size_t batch_size = 64);

enum class TourVariant { mse, ce };

struct TourConfig {
    AxnConfig search;  // budget, rounds, shortlist; init is always the query embedding
    TourVariant variant = TourVariant::mse;
    double learning_rate = 1e-3;
    double temperature = 1.0;
};

/// Default learning rates: 1e-3 for the MSE variant, 0.1 for the CE variant.
double default_tour_learning_rate(TourVariant v) noexcept;

/// Mean squared error between round_items * u and exact, and its gradient in u.
double tour_mse_loss(const Vector& u, const RowMatrix& round_items, const Vector& exact);
Vector tour_mse_gradient(const Vector& u, const RowMatrix& round_items, const Vector& exact);
/// KL(softmax(exact / T) || softmax(round_items * u / T)) and its gradient in u.
double tour_ce_loss(const Vector& u, const RowMatrix& round_items, const Vector& exact, double temperature);
Vector tour_ce_gradient(const Vector& u, const RowMatrix& round_items, const Vector& exact, double temperature);

/// Pseudo-relevance-feedback baseline: one gradient step on the query
/// embedding per round against the round's exact scores.
SearchResult tour_search(const TourConfig& cfg, const EmbeddingMatrix& V, const Scorer& scorer, QueryId q,
                         std::size_t k, const Vector& u_param);

}  // namespace axn
