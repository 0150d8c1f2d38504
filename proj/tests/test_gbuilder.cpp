#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "axn/gbuilder.hpp"
#include "test_support.hpp"

using namespace axn;

namespace {

std::set<std::pair<QueryId, ItemId>> coords(const SparseScoreMatrix& g) {
    std::set<std::pair<QueryId, ItemId>> s;
    for (const auto& e : g.entries()) s.insert({e.query, e.item});
    return s;
}

}  // namespace

TEST_CASE("Q_TOPK on a small instance matches brute-force argsort of base scores") {
    RowMatrix bq(3, 2), bi(4, 2);
    bq << 1, 0, 0, 1, 1, 1;
    bi << 4, 0.5, 1, 3, 2, 2.2, 3, -1;
    const EmbeddingMatrix Q(bq, Role::query), I(bi, Role::item);
    auto oracle = std::make_shared<DenseOracleScorer>(RowMatrix::Random(3, 4));
    test::CountingScorer counting(oracle);

    GBuildSpec spec;
    spec.k_d = 2;
    spec.base_queries = &Q;
    spec.base_items = &I;
    const auto g = build_sparse_matrix(spec, counting);
    CHECK(g.nnz() == 6);
    CHECK(counting.calls() == 6);
    for (QueryId q = 0; q < 3; ++q) {
        std::vector<std::pair<double, ItemId>> s;
        for (ItemId i = 0; i < 4; ++i) s.push_back({-bq.row(q).dot(bi.row(i)), i});
        std::sort(s.begin(), s.end());
        std::set<ItemId> expect{s[0].second, s[1].second}, got;
        for (const auto& e : g.row(q)) got.insert(e.item);
        CHECK(got == expect);
    }
}

TEST_CASE("nnz formulas and stored scores across random specs") {
    Rng rng(21);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t nq = 2 + index_draw(rng, 20), ni = 2 + index_draw(rng, 30), d = 1 + index_draw(rng, 5);
        const EmbeddingMatrix Q(test::random_matrix(rng, nq, d), Role::query);
        const EmbeddingMatrix I(test::random_matrix(rng, ni, d), Role::item);
        const DenseOracleScorer oracle(test::random_matrix(rng, nq, ni));
        GBuildSpec spec;
        spec.base_queries = &Q;
        spec.base_items = &I;
        spec.seed = trial;
        spec.batch_size = 1 + index_draw(rng, 10);
        spec.workers = 1 + index_draw(rng, 3);
        for (auto strategy : {GStrategy::q_topk, GStrategy::q_random, GStrategy::i_topk_queries}) {
            spec.strategy = strategy;
            const bool per_item = strategy == GStrategy::i_topk_queries;
            spec.k_d = 1 + index_draw(rng, per_item ? nq : ni);
            const auto g = build_sparse_matrix(spec, oracle);
            CHECK(g.nnz() == spec.k_d * (per_item ? ni : nq));
            const std::vector<ScoreEntry> entries(g.entries().begin(), g.entries().end());
            CHECK(std::is_sorted(entries.begin(), entries.end(), [](auto& a, auto& b) {
                return std::pair{a.query, a.item} < std::pair{b.query, b.item};
            }));
            for (const auto& e : g.entries()) {
                const std::vector<ItemId> one{e.item};
                CHECK(oracle.score_batch(e.query, one)[0] == e.score);
            }
            if (per_item) {
                const auto c = coverage_stats(g);
                CHECK(c.min_per_item == spec.k_d);
                CHECK(c.max_per_item == spec.k_d);
                CHECK(c.zero_fraction == 0.0);
            }
        }
    }
}

TEST_CASE("I_TOPK picks the top train queries per item") {
    Rng rng(4);
    const EmbeddingMatrix Q(test::random_matrix(rng, 12, 3), Role::query);
    const EmbeddingMatrix I(test::random_matrix(rng, 7, 3), Role::item);
    const DenseOracleScorer oracle(test::random_matrix(rng, 12, 7));
    GBuildSpec spec;
    spec.strategy = GStrategy::i_topk_queries;
    spec.k_d = 5;
    spec.base_queries = &Q;
    spec.base_items = &I;
    const auto g = build_sparse_matrix(spec, oracle);
    for (ItemId i = 0; i < 7; ++i) {
        std::vector<std::pair<double, QueryId>> s;
        for (QueryId q = 0; q < 12; ++q) s.push_back({-Q.row(q).dot(I.row(i)), q});
        std::sort(s.begin(), s.end());
        std::set<QueryId> expect, got;
        for (int j = 0; j < 5; ++j) expect.insert(s[j].second);
        for (const auto& e : g.entries())
            if (e.item == i) got.insert(e.query);
        CHECK(got == expect);
    }
}

TEST_CASE("Q_RANDOM is deterministic in the seed") {
    const DenseOracleScorer oracle(RowMatrix::Ones(10, 50));
    GBuildSpec spec;
    spec.strategy = GStrategy::q_random;
    spec.k_d = 7;
    spec.n_train_queries = 10;
    spec.seed = 3;
    const auto a = build_sparse_matrix(spec, oracle);
    spec.workers = 3;
    const auto b = build_sparse_matrix(spec, oracle);
    CHECK(coords(a) == coords(b));
    spec.seed = 4;
    CHECK(coords(a) != coords(build_sparse_matrix(spec, oracle)));
}

TEST_CASE("scorer budget for a Q_TOPK build is k_d per train query") {
    // 500 train queries with k_d = 100 costs exactly 50,000 calls.
    const auto o = make_synthetic_oracle({500, 1000, 4, 0.1, 2});
    test::CountingScorer counting(o.scorer);
    GBuildSpec spec;
    spec.k_d = 100;
    spec.base_queries = &o.true_queries;
    spec.base_items = &o.true_items;
    const auto g = build_sparse_matrix(spec, counting);
    CHECK(g.nnz() == 50000);
    CHECK(counting.calls() == 50000);
}

TEST_CASE("normalizer is applied at storage time") {
    const DenseOracleScorer oracle(RowMatrix::Constant(2, 3, 14.0));
    GBuildSpec spec;
    spec.strategy = GStrategy::q_random;
    spec.k_d = 3;
    spec.n_train_queries = 2;
    spec.normalizer = ScoreNormalizer{10, 0.5};
    for (const auto& e : build_sparse_matrix(spec, oracle).entries()) CHECK(e.score == 2.0);
}

TEST_CASE("invalid specs") {
    const DenseOracleScorer oracle(RowMatrix::Ones(2, 3));
    GBuildSpec spec;
    spec.k_d = 1;
    auto code = [&] {
        try {
            build_sparse_matrix(spec, oracle);
        } catch (const Error& e) {
            return e.code();
        }
        return Errc::io;
    };
    CHECK(code() == Errc::invalid_spec);  // top-k strategy without embeddings
    spec.strategy = GStrategy::q_random;
    spec.n_train_queries = 2;
    spec.k_d = 4;
    CHECK(code() == Errc::invalid_spec);
    spec.k_d = 0;
    CHECK(code() == Errc::invalid_spec);
    CHECK_THROWS_AS(parse_strategy("q-best"), Error);
    CHECK(parse_strategy("i-topk") == GStrategy::i_topk_queries);
}

TEST_CASE("coverage statistics") {
    CHECK(coverage_stats(SparseScoreMatrix(3, 4, {})).zero_fraction == 1.0);

    SUBCASE("skewed base embeddings leave items unobserved; verified by direct count") {
        Rng rng(9);
        RowMatrix bq = test::random_matrix(rng, 30, 2).cwiseAbs();
        RowMatrix bi = test::random_matrix(rng, 40, 2);
        bi.col(0).array() += 3.0 * Eigen::ArrayXd::LinSpaced(40, 0, 1);
        const EmbeddingMatrix Q(bq, Role::query), I(bi, Role::item);
        const DenseOracleScorer oracle(RowMatrix::Zero(30, 40));
        GBuildSpec spec;
        spec.k_d = 5;
        spec.base_queries = &Q;
        spec.base_items = &I;
        const auto g = build_sparse_matrix(spec, oracle);
        std::vector<std::size_t> count(40, 0);
        for (const auto& e : g.entries()) ++count[e.item];
        const auto c = coverage_stats(g);
        CHECK(c.min_per_item == *std::min_element(count.begin(), count.end()));
        CHECK(c.max_per_item == *std::max_element(count.begin(), count.end()));
        CHECK(c.mean_per_item == doctest::Approx(150.0 / 40));
        CHECK(c.zero_fraction == doctest::Approx(std::count(count.begin(), count.end(), 0) / 40.0));
        CHECK(c.zero_fraction > 0.0);
    }
}
