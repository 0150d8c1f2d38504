#include "axn/gbuilder.hpp"

#include <algorithm>

#include "axn/parallel.hpp"
#include "axn/random.hpp"

namespace axn {

GStrategy parse_strategy(const std::string& name) {
    if (name == "q-topk") return GStrategy::q_topk;
    if (name == "q-random") return GStrategy::q_random;
    if (name == "i-topk") return GStrategy::i_topk_queries;
    throw Error(Errc::invalid_spec, "unknown G strategy '" + name + "' (expected q-topk, q-random, i-topk)");
}

std::string to_string(GStrategy s) {
    switch (s) {
        case GStrategy::q_topk: return "q-topk";
        case GStrategy::q_random: return "q-random";
        case GStrategy::i_topk_queries: return "i-topk";
    }
    return "?";
}

namespace {

std::vector<ItemId> top_ids(const Vector& scores, std::size_t k) {
    return select_topk(std::span<const double>(scores.data(), static_cast<std::size_t>(scores.size())), {}, k).ids();
}

}  // namespace

SparseScoreMatrix build_sparse_matrix(const GBuildSpec& spec, const Scorer& scorer) {
    const bool topk = spec.strategy != GStrategy::q_random;
    if (spec.k_d == 0) throw Error(Errc::invalid_spec, "k_d must be >= 1");
    if (topk && (spec.base_queries == nullptr || spec.base_items == nullptr))
        throw Error(Errc::invalid_spec, "top-k strategies need base query and item embeddings");
    if (topk && spec.base_queries->dim() != spec.base_items->dim())
        throw Error(Errc::dimension_mismatch, "base query and item embeddings differ in dimension");

    std::size_t n_train = spec.n_train_queries;
    if (n_train == 0 && spec.base_queries) n_train = spec.base_queries->rows();
    if (n_train == 0 && !spec.query_ids.empty()) n_train = spec.query_ids.size();
    if (n_train == 0) throw Error(Errc::invalid_spec, "no train queries");
    if (spec.base_queries && spec.base_queries->rows() < n_train)
        throw Error(Errc::invalid_spec, "fewer base query embeddings than train queries");
    if (!spec.query_ids.empty() && spec.query_ids.size() != n_train)
        throw Error(Errc::invalid_spec, "query_ids length differs from the train query count");

    const std::size_t n_items = spec.base_items ? spec.base_items->rows() : scorer.n_items();
    if (n_items == 0) throw Error(Errc::invalid_spec, "item count unknown");
    if (spec.strategy == GStrategy::i_topk_queries ? spec.k_d > n_train : spec.k_d > n_items)
        throw Error(Errc::invalid_spec, "k_d exceeds the pool it selects from");

    // Coordinates per train query, chosen before any scorer call.
    std::vector<std::vector<ItemId>> per_query(n_train);
    switch (spec.strategy) {
        case GStrategy::q_topk: {
            const auto& V = spec.base_items->data();
            parallel_for(n_train, spec.workers, [&](std::size_t q) {
                Vector s = V * spec.base_queries->row(q).transpose();
                per_query[q] = top_ids(s, spec.k_d);
            });
            break;
        }
        case GStrategy::q_random: {
            parallel_for(n_train, spec.workers, [&](std::size_t q) {
                Rng rng(derive_seed(spec.seed, q));
                per_query[q] = sample_without_replacement(rng, n_items, spec.k_d);
            });
            break;
        }
        case GStrategy::i_topk_queries: {
            const RowMatrix Q = spec.base_queries->data().topRows(static_cast<Eigen::Index>(n_train));
            std::vector<std::vector<ItemId>> per_item(n_items);
            parallel_for(n_items, spec.workers, [&](std::size_t i) {
                Vector s = Q * spec.base_items->row(i).transpose();
                per_item[i] = top_ids(s, spec.k_d);
            });
            for (std::size_t i = 0; i < n_items; ++i)
                for (ItemId q : per_item[i]) per_query[q].push_back(i);
            break;
        }
    }

    std::vector<std::vector<ScoreEntry>> scored(n_train);
    parallel_for(n_train, spec.workers, [&](std::size_t q) {
        auto& items = per_query[q];
        std::sort(items.begin(), items.end());
        if (items.empty()) return;
        const QueryId scorer_q = spec.query_ids.empty() ? q : spec.query_ids[q];
        ScoringSession session(scorer, scorer_q, BudgetLedger::unlimited, spec.batch_size);
        const auto scores = session.score(items);
        auto& out = scored[q];
        out.reserve(items.size());
        for (std::size_t j = 0; j < items.size(); ++j) {
            const double s = spec.normalizer ? spec.normalizer->apply(scores[j]) : scores[j];
            out.push_back({q, items[j], s});
        }
    });

    std::vector<ScoreEntry> entries;
    for (auto& rows : scored) entries.insert(entries.end(), rows.begin(), rows.end());
    return SparseScoreMatrix(n_train, n_items, std::move(entries));
}

CoverageStats coverage_stats(const SparseScoreMatrix& g) {
    CoverageStats st;
    if (g.n_items() == 0) return st;
    std::vector<std::size_t> counts(g.n_items(), 0);
    for (const auto& e : g.entries()) ++counts[e.item];
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    st.min_per_item = *lo;
    st.max_per_item = *hi;
    st.mean_per_item = static_cast<double>(g.nnz()) / static_cast<double>(g.n_items());
    st.zero_fraction = static_cast<double>(std::count(counts.begin(), counts.end(), std::size_t{0})) /
                       static_cast<double>(g.n_items());
    return st;
}

}  // namespace axn
