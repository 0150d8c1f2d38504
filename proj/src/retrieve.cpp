#include "axn/retrieve.hpp"

#include <algorithm>
#include <cmath>

#include "axn/random.hpp"

namespace axn {

InitPolicy parse_init_policy(const std::string& name) {
    if (name == "random") return InitPolicy::random;
    if (name == "emb") return InitPolicy::emb_topk;
    if (name == "ranking") return InitPolicy::precomputed_ranking;
    throw Error(Errc::config, "unknown init policy '" + name + "' (expected random, emb, ranking)");
}

std::string to_string(InitPolicy p) {
    switch (p) {
        case InitPolicy::random: return "random";
        case InitPolicy::emb_topk: return "emb";
        case InitPolicy::precomputed_ranking: return "ranking";
    }
    return "?";
}

void AxnConfig::validate() const {
    if (budget == 0) throw Error(Errc::invalid_spec, "budget must be >= 1");
    if (rounds == 0) throw Error(Errc::invalid_spec, "rounds must be >= 1");
    if (k_s != 0 && rounds * k_s > budget)
        throw Error(Errc::invalid_spec, "rounds * k_s = " + std::to_string(rounds * k_s) + " exceeds budget " +
                                            std::to_string(budget));
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw Error(Errc::lambda_out_of_range, "lambda must lie in [0, 1], got " + std::to_string(lambda));
    if (!(pinv_tolerance >= 0.0)) throw Error(Errc::invalid_spec, "pinv tolerance must be >= 0");
}

std::vector<std::size_t> round_sizes(const AxnConfig& cfg) {
    cfg.validate();
    if (cfg.k_s != 0) return std::vector<std::size_t>(cfg.rounds, cfg.k_s);
    std::vector<std::size_t> sizes(cfg.rounds, cfg.budget / cfg.rounds);
    for (std::size_t r = 0; r < cfg.budget % cfg.rounds; ++r) ++sizes[r];
    return sizes;
}

TopKList brute_force_knn(const Scorer& scorer, QueryId q, std::size_t k, std::size_t n_items, std::size_t batch_size) {
    if (n_items == 0) n_items = scorer.n_items();
    if (n_items == 0) throw Error(Errc::invalid_spec, "item count unknown for exhaustive search");
    ScoringSession session(scorer, q, BudgetLedger::unlimited, batch_size);
    std::vector<ItemId> all(n_items);
    for (std::size_t i = 0; i < n_items; ++i) all[i] = i;
    const auto scores = session.score(all);
    return select_topk(scores, {}, k);
}

Vector approx_scores(const Vector& u, const EmbeddingMatrix& V, const std::vector<ItemId>* shortlist) {
    if (static_cast<std::size_t>(u.size()) != V.dim())
        throw Error(Errc::dimension_mismatch, "query embedding has dim " + std::to_string(u.size()) +
                                                  ", items have dim " + std::to_string(V.dim()));
    if (!shortlist) return V.data() * u;
    Vector s(static_cast<Eigen::Index>(shortlist->size()));
    for (std::size_t j = 0; j < shortlist->size(); ++j) {
        if ((*shortlist)[j] >= V.rows()) throw Error(Errc::invalid_spec, "shortlist id out of range");
        s(static_cast<Eigen::Index>(j)) = V.row((*shortlist)[j]).dot(u);
    }
    return s;
}

TopKList dot_topk(const Vector& u, const EmbeddingMatrix& V, std::size_t k, std::span<const ItemId> exclude,
                  const std::vector<ItemId>* shortlist) {
    const Vector s = approx_scores(u, V, shortlist);
    std::vector<char> excluded(V.rows(), 0);
    for (ItemId i : exclude)
        if (i < V.rows()) excluded[i] = 1;
    std::vector<double> scores;
    std::vector<ItemId> ids;
    scores.reserve(static_cast<std::size_t>(s.size()));
    ids.reserve(static_cast<std::size_t>(s.size()));
    for (Eigen::Index j = 0; j < s.size(); ++j) {
        const ItemId id = shortlist ? (*shortlist)[static_cast<std::size_t>(j)] : ItemId(j);
        if (excluded[id]) continue;
        excluded[id] = 1;  // a shortlist may repeat ids
        ids.push_back(id);
        scores.push_back(s(j));
    }
    return select_topk(scores, ids, k);
}

namespace {

/// Bookkeeping shared by the multi-round searches: the retrieved set A with
/// exact scores a, the budgeted scoring session and the optional shortlist.
class RoundState {
public:
    RoundState(const AxnConfig& cfg, const EmbeddingMatrix& V, const Scorer& scorer, QueryId q)
        : cfg_(cfg), V_(V), session_(scorer, q, cfg.budget, cfg.batch_size), in_A_(V.rows(), 0) {}

    void set_shortlist(std::vector<ItemId> ids) {
        std::vector<char> seen(V_.rows(), 0);
        for (ItemId i : ids) {
            if (i >= V_.rows()) throw Error(Errc::invalid_spec, "shortlist id out of range");
            if (!seen[i]) {
                seen[i] = 1;
                shortlist_.push_back(i);
            }
        }
        has_shortlist_ = true;
    }

    const std::vector<ItemId>* shortlist() const { return has_shortlist_ ? &shortlist_ : nullptr; }

    std::size_t candidates_left() const {
        return (has_shortlist_ ? shortlist_.size() : V_.rows()) - in_shortlist_A_;
    }

    /// Scores new items and appends them to A. Returns the new exact scores.
    std::vector<double> add(const std::vector<ItemId>& ids) {
        auto scores = session_.score(ids);
        for (std::size_t j = 0; j < ids.size(); ++j) {
            in_A_[ids[j]] = 1;
            A_.push_back(ids[j]);
            a_.push_back(scores[j]);
        }
        recount_shortlist();
        return scores;
    }

    std::vector<ItemId> retrieve(const Vector& u, std::size_t n) const {
        return dot_topk(u, V_, n, A_, shortlist()).ids();
    }

    /// Least-squares fit on all of A; records the residual of the unmixed fit.
    Vector solve(double& residual_norm) const {
        RowMatrix VA(static_cast<Eigen::Index>(A_.size()), static_cast<Eigen::Index>(V_.dim()));
        for (std::size_t j = 0; j < A_.size(); ++j) VA.row(static_cast<Eigen::Index>(j)) = V_.row(A_[j]);
        const Eigen::Map<const Vector> a(a_.data(), static_cast<Eigen::Index>(a_.size()));
        Vector u = solve_query_embedding(VA, a, cfg_.pinv_tolerance);
        residual_norm = (VA * u - a).norm();
        return u;
    }

    SearchResult finish(std::size_t k, const std::optional<Vector>& final_u, std::vector<RoundTrace> trace,
                        bool stopped_early) const {
        SearchResult r;
        r.topk = select_topk(a_, A_, k);
        r.calls_used = session_.ledger().used;
        r.trace = std::move(trace);
        r.stopped_early = stopped_early;
        r.retrieved = A_;
        r.exact_scores = a_;
        if (cfg_.keep_approx_scores && final_u) r.approx_scores = approx_scores(*final_u, V_, shortlist());
        return r;
    }

    const std::vector<ItemId>& A() const { return A_; }

private:
    void recount_shortlist() {
        if (!has_shortlist_) {
            in_shortlist_A_ = A_.size();
            return;
        }
        in_shortlist_A_ = 0;
        for (ItemId i : shortlist_) in_shortlist_A_ += in_A_[i];
    }

    const AxnConfig& cfg_;
    const EmbeddingMatrix& V_;
    ScoringSession session_;
    std::vector<ItemId> A_;
    std::vector<double> a_;
    std::vector<char> in_A_;
    std::vector<ItemId> shortlist_;
    bool has_shortlist_ = false;
    std::size_t in_shortlist_A_ = 0;
};

void check_query_embedding(const std::optional<Vector>& u, const EmbeddingMatrix& V, const char* why) {
    if (!u) throw Error(Errc::invalid_spec, std::string("a query embedding is required ") + why);
    if (static_cast<std::size_t>(u->size()) != V.dim())
        throw Error(Errc::dimension_mismatch, "query embedding dim differs from item dim");
}

std::vector<ItemId> valid_ranking(std::span<const ItemId> ranking, std::size_t n_items) {
    std::vector<ItemId> out;
    std::vector<char> seen(n_items, 0);
    for (ItemId i : ranking) {
        if (i >= n_items) throw Error(Errc::invalid_spec, "ranking id " + std::to_string(i) + " out of range");
        if (!seen[i]) {
            seen[i] = 1;
            out.push_back(i);
        }
    }
    return out;
}

/// Shortlist and round-1 items per the init policy.
std::vector<ItemId> initialize(const AxnConfig& cfg, RoundState& st, const EmbeddingMatrix& V, QueryId q,
                               std::size_t first_round, const std::optional<Vector>& u_param,
                               std::span<const ItemId> init_ranking) {
    std::vector<ItemId> ranking;
    if (cfg.init == InitPolicy::precomputed_ranking) {
        if (init_ranking.empty()) throw Error(Errc::invalid_spec, "ranking init needs a precomputed ranking");
        ranking = valid_ranking(init_ranking, V.rows());
    }
    if (cfg.shortlist_size > 0) {
        if (cfg.init == InitPolicy::precomputed_ranking) {
            st.set_shortlist({ranking.begin(), ranking.begin() + std::ptrdiff_t(std::min(ranking.size(), cfg.shortlist_size))});
        } else {
            check_query_embedding(u_param, V, "to build a shortlist");
            st.set_shortlist(dot_topk(*u_param, V, cfg.shortlist_size).ids());
        }
    }
    switch (cfg.init) {
        case InitPolicy::random: {
            Rng rng(derive_seed(cfg.seed, q));
            const auto* sl = st.shortlist();
            const std::size_t pool = sl ? sl->size() : V.rows();
            std::vector<ItemId> out;
            for (auto j : sample_without_replacement(rng, pool, first_round)) out.push_back(sl ? (*sl)[j] : j);
            return out;
        }
        case InitPolicy::emb_topk:
            check_query_embedding(u_param, V, "for embedding-based init");
            return dot_topk(*u_param, V, first_round, {}, st.shortlist()).ids();
        case InitPolicy::precomputed_ranking:
            ranking.resize(std::min(ranking.size(), first_round));
            return ranking;
    }
    return {};
}

}  // namespace

SearchResult axn_search(const AxnConfig& cfg, const EmbeddingMatrix& V, const Scorer& scorer, QueryId q, std::size_t k,
                        const std::optional<Vector>& u_param, std::span<const ItemId> init_ranking) {
    const auto sizes = round_sizes(cfg);
    if (cfg.lambda > 0.0) check_query_embedding(u_param, V, "when lambda > 0");
    RoundState st(cfg, V, scorer, q);
    std::vector<RoundTrace> trace;
    bool stopped_early = false;

    const auto first = initialize(cfg, st, V, q, sizes[0], u_param, init_ranking);
    if (first.empty()) throw Error(Errc::degenerate_input, "init policy produced no items");
    st.add(first);
    double residual = 0.0;
    Vector u_lin = st.solve(residual);
    Vector u = cfg.lambda > 0.0 ? mix_embedding(u_lin, *u_param, cfg.lambda) : u_lin;
    trace.push_back({1, first.size(), residual});
    if (first.size() < sizes[0]) stopped_early = true;

    for (std::size_t r = 2; r <= sizes.size() && !stopped_early; ++r) {
        const std::size_t want = sizes[r - 1];
        if (st.candidates_left() == 0) {
            stopped_early = true;
            break;
        }
        const auto fresh = st.retrieve(u, want);
        if (fresh.size() < want) stopped_early = true;
        st.add(fresh);
        u_lin = st.solve(residual);
        u = cfg.lambda > 0.0 ? mix_embedding(u_lin, *u_param, cfg.lambda) : u_lin;
        trace.push_back({r, fresh.size(), residual});
    }
    return st.finish(k, u, std::move(trace), stopped_early);
}

SearchResult rnr_search(const EmbeddingMatrix& V, const Scorer& scorer, QueryId q, const Vector& u, std::size_t m,
                        std::size_t k, std::size_t batch_size) {
    if (m == 0) throw Error(Errc::invalid_spec, "budget must be >= 1");
    const auto ids = dot_topk(u, V, m).ids();
    ScoringSession session(scorer, q, m, batch_size);
    const auto scores = session.score(ids);
    SearchResult r;
    r.topk = select_topk(scores, ids, k);
    r.calls_used = session.ledger().used;
    r.retrieved = ids;
    r.exact_scores = scores;
    r.stopped_early = ids.size() < m;
    // Mirrors the single-round trace of axn_search so the two compare equal.
    const Eigen::Map<const Vector> a(scores.data(), static_cast<Eigen::Index>(scores.size()));
    RowMatrix VA(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(V.dim()));
    for (std::size_t j = 0; j < ids.size(); ++j) VA.row(static_cast<Eigen::Index>(j)) = V.row(ids[j]);
    const Vector u_lin = solve_query_embedding(VA, a, AxnConfig{}.pinv_tolerance);
    r.trace.push_back({1, ids.size(), (VA * u_lin - a).norm()});
    return r;
}

double default_tour_learning_rate(TourVariant v) noexcept { return v == TourVariant::mse ? 1e-3 : 0.1; }

double tour_mse_loss(const Vector& u, const RowMatrix& round_items, const Vector& exact) {
    return (round_items * u - exact).squaredNorm() / static_cast<double>(exact.size());
}

Vector tour_mse_gradient(const Vector& u, const RowMatrix& round_items, const Vector& exact) {
    return (2.0 / static_cast<double>(exact.size())) * (round_items.transpose() * (round_items * u - exact));
}

namespace {

Vector softmax(const Vector& x) {
    const Vector e = (x.array() - x.maxCoeff()).exp();
    return e / e.sum();
}

double log_sum_exp(const Vector& x) {
    const double m = x.maxCoeff();
    return m + std::log((x.array() - m).exp().sum());
}

}  // namespace

double tour_ce_loss(const Vector& u, const RowMatrix& round_items, const Vector& exact, double temperature) {
    const Vector target = exact / temperature;
    const Vector approx = round_items * u / temperature;
    const Vector p = softmax(target);
    const Vector log_p = target.array() - log_sum_exp(target);
    const Vector log_q = approx.array() - log_sum_exp(approx);
    return p.dot(log_p - log_q);
}

Vector tour_ce_gradient(const Vector& u, const RowMatrix& round_items, const Vector& exact, double temperature) {
    const Vector p = softmax(exact / temperature);
    const Vector q = softmax(round_items * u / temperature);
    return round_items.transpose() * (q - p) / temperature;
}

SearchResult tour_search(const TourConfig& cfg, const EmbeddingMatrix& V, const Scorer& scorer, QueryId q,
                         std::size_t k, const Vector& u_param) {
    const auto sizes = round_sizes(cfg.search);
    if (!(cfg.learning_rate >= 0.0)) throw Error(Errc::invalid_spec, "learning rate must be >= 0");
    if (!(cfg.temperature > 0.0)) throw Error(Errc::invalid_spec, "temperature must be > 0");
    if (static_cast<std::size_t>(u_param.size()) != V.dim())
        throw Error(Errc::dimension_mismatch, "query embedding dim differs from item dim");
    AxnConfig base = cfg.search;
    base.init = InitPolicy::emb_topk;
    RoundState st(base, V, scorer, q);
    std::vector<RoundTrace> trace;
    bool stopped_early = false;
    Vector u = u_param;

    const auto first = initialize(base, st, V, q, sizes[0], u_param, {});
    std::vector<ItemId> fresh = first;
    for (std::size_t r = 1; r <= sizes.size(); ++r) {
        if (r > 1) {
            if (st.candidates_left() == 0) {
                stopped_early = true;
                break;
            }
            fresh = st.retrieve(u, sizes[r - 1]);
        }
        if (fresh.empty()) {
            stopped_early = true;
            break;
        }
        if (fresh.size() < sizes[r - 1]) stopped_early = true;
        const auto scores = st.add(fresh);
        RowMatrix VR(static_cast<Eigen::Index>(fresh.size()), static_cast<Eigen::Index>(V.dim()));
        for (std::size_t j = 0; j < fresh.size(); ++j) VR.row(static_cast<Eigen::Index>(j)) = V.row(fresh[j]);
        const Eigen::Map<const Vector> a(scores.data(), static_cast<Eigen::Index>(scores.size()));
        const Vector grad = cfg.variant == TourVariant::mse ? tour_mse_gradient(u, VR, a)
                                                            : tour_ce_gradient(u, VR, a, cfg.temperature);
        u -= cfg.learning_rate * grad;
        trace.push_back({r, fresh.size(), (VR * u - a).norm()});
        if (stopped_early) break;
    }
    return st.finish(k, u, std::move(trace), stopped_early);
}

}  // namespace axn
