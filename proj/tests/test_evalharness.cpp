#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "axn/evalharness.hpp"
#include "test_support.hpp"

using namespace axn;

namespace {

TopKList ids_list(std::vector<ItemId> ids) {
    std::vector<ScoredItem> c;
    double s = 100;
    for (auto id : ids) c.push_back({id, s--});
    return TopKList::from_candidates(c, ids.size());
}

nlohmann::json small_spec() {
    return nlohmann::json::parse(R"({
        "benchmark": {"synthetic": {"n_train": 40, "n_test": 20, "n_items": 300, "dim": 8, "rank": 4,
                                    "sigma": 0.1, "seed": 3}},
        "indexing": {"items": "trns", "kd": 30, "mf": {"epochs": 5}},
        "methods": [{"name": "axn", "type": "axn", "rounds": 3, "init": "emb"},
                    {"name": "rnr", "type": "rnr"},
                    {"name": "exact", "type": "exact"},
                    {"name": "tour", "type": "tour", "rounds": 3, "variant": "ce"}],
        "budgets": [20, 60],
        "k_values": [1, 5],
        "seeds": [0, 1],
        "timers": true
    })");
}

}  // namespace

TEST_CASE("topk_recall_at_m") {
    CHECK(topk_recall_at_m(ids_list({1, 2, 3}), ids_list({2, 3, 4})) == doctest::Approx(2.0 / 3));
    CHECK(topk_recall_at_m(ids_list({1, 2, 3}), ids_list({1, 2, 3})) == 1.0);
    CHECK(topk_recall_at_m(ids_list({1, 2, 3}), ids_list({7, 8, 9})) == 0.0);
    // Retrieved lists longer than k are truncated to k first.
    CHECK(topk_recall_at_m(ids_list({1, 2}), ids_list({5, 1, 2})) == 0.5);
    CHECK_THROWS_AS(topk_recall_at_m(TopKList(), ids_list({1})), Error);
    CHECK_THROWS_AS(topk_recall_at_m(TopKList::from_candidates({{1, 1.0}}, 2), ids_list({1})), Error);
}

TEST_CASE("make_gold") {
    const auto o = make_synthetic_oracle({10, 80, 3, 0.0, 5});
    const RowMatrix M = o.true_queries.data() * o.true_items.data().transpose();
    std::vector<QueryId> queries(10);
    std::iota(queries.begin(), queries.end(), 0);

    SUBCASE("noiseless gold is the argsort of the factor product") {
        const auto gold = make_gold(*o.scorer, queries, 6);
        for (auto q : queries) {
            std::vector<ItemId> order(80);
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return M(q, a) > M(q, b); });
            CHECK(gold.at(q).ids() == std::vector<ItemId>(order.begin(), order.begin() + 6));
        }
    }
    SUBCASE("a dominant item is the top-1") {
        RowMatrix s = RowMatrix::Zero(3, 5);
        s(0, 4) = s(1, 0) = s(2, 2) = 9;
        const auto gold = make_gold(DenseOracleScorer(s), {0, 1, 2}, 1);
        CHECK(gold.at(0).ids() == std::vector<ItemId>{4});
        CHECK(gold.at(1).ids() == std::vector<ItemId>{0});
        CHECK(gold.at(2).ids() == std::vector<ItemId>{2});
    }
    SUBCASE("cache rerun makes no scorer calls") {
        test::TempDir dir("gold");
        test::CountingScorer counting(o.scorer);
        const auto first = make_gold(counting, queries, 5, dir / "gold.json", 0, 2);
        CHECK(counting.calls() == 800);
        const auto second = make_gold(counting, queries, 5, dir / "gold.json");
        CHECK(counting.calls() == 800);
        CHECK(first == second);
        // A different k invalidates the cache.
        make_gold(counting, queries, 4, dir / "gold.json");
        CHECK(counting.calls() == 1600);
    }
}

TEST_CASE("desk benchmark layout") {
    DeskBenchmarkSpec spec;
    spec.n_train = 10;
    spec.n_test = 5;
    spec.n_items = 50;
    spec.dim = 6;
    spec.rank = 3;
    const auto b = make_desk_benchmark(spec);
    CHECK(b.train_ids().size() == 10);
    CHECK(b.test_ids().front() == 10);
    CHECK(b.base_queries->rows() == 15);
    CHECK(b.base_items->dim() == 6);
    const auto padded = b.padded_true_items();
    CHECK(padded.dim() == 6);
    CHECK(padded.data().rightCols(3).norm() == 0.0);
    CHECK(padded.data().leftCols(3) == b.oracle.true_items.data());
    const auto again = make_desk_benchmark(spec);
    CHECK(*again.base_items == *b.base_items);
}

TEST_CASE("experiment spec parsing") {
    const auto spec = parse_experiment_spec(small_spec());
    CHECK(spec.methods.size() == 4);
    CHECK(spec.methods[3].tour_variant == TourVariant::ce);
    CHECK(spec.methods[3].tour_learning_rate == 0.1);
    CHECK(spec.indexing.mf.epochs == 5);
    const auto round_trip = parse_experiment_spec(to_json(spec));
    CHECK(to_json(round_trip) == to_json(spec));

    auto bad = small_spec();
    bad["methods"][0]["lambda"] = 1.5;
    CHECK_THROWS_AS(parse_experiment_spec(bad), Error);
    bad = small_spec();
    bad["surprise"] = 1;
    CHECK_THROWS_AS(parse_experiment_spec(bad), Error);
    bad = small_spec();
    bad["k_values"] = {1, 50};
    CHECK_THROWS_AS(parse_experiment_spec(bad), Error);
    bad = small_spec();
    bad["indexing"]["mf"]["momentum"] = 0.9;
    CHECK_THROWS_AS(parse_experiment_spec(bad), Error);
}

TEST_CASE("run_experiment and plot data") {
    const auto spec = parse_experiment_spec(small_spec());
    const auto report = run_experiment(spec);
    // axn, rnr, tour over 2 budgets and the exact method once, each for 2 values of k.
    CHECK(report.rows.size() == 3 * 2 * 2 + 2);
    CHECK(report.n_queries == 2 * 20 * 1);
    for (const auto& row : report.rows) {
        CHECK(row.recall_mean >= 0.0);
        CHECK(row.recall_mean <= 1.0);
        if (row.method == "exact") {
            CHECK(row.recall_mean == 1.0);
            CHECK(row.m == 300);
        } else {
            CHECK(row.calls_used <= row.m);
        }
    }
    CHECK(std::is_sorted(report.rows.begin(), report.rows.end(), [](const RecallRow& a, const RecallRow& b) {
        return std::tie(a.method, a.k, a.m) < std::tie(b.method, b.k, b.m);
    }));
    CHECK(report.index_seconds.count("train"));
    CHECK(report.index_seconds.count("build_g"));

    SUBCASE("RNR recall is non-decreasing in the budget") {
        for (std::size_t j = 0; j + 1 < report.rows.size(); ++j) {
            const auto &a = report.rows[j], &b = report.rows[j + 1];
            if (a.method == "rnr" && b.method == "rnr" && a.k == b.k) CHECK(b.recall_mean >= a.recall_mean);
        }
    }
    SUBCASE("reproducible apart from timing") {
        auto a = to_json(report), b = to_json(run_experiment(spec));
        CHECK(a.contains("timing"));
        a.erase("timing");
        b.erase("timing");
        CHECK(a.dump() == b.dump());
    }
    SUBCASE("parallel workers give the same recall") {
        auto par = spec;
        par.workers = 3;
        auto a = to_json(report), b = to_json(run_experiment(par));
        a.erase("timing");
        b.erase("timing");
        CHECK(a.dump() == b.dump());
    }
    SUBCASE("CSV round trip") {
        test::TempDir dir("plot");
        emit_plotdata(report, dir / "report.csv");
        CHECK(std::filesystem::exists(dir / "report.json"));
        const auto rows = read_plotdata_csv(dir / "report.csv");
        REQUIRE(rows.size() == report.rows.size());
        for (std::size_t j = 0; j < rows.size(); ++j) {
            CHECK(rows[j].method == report.rows[j].method);
            CHECK(rows[j].k == report.rows[j].k);
            CHECK(rows[j].m == report.rows[j].m);
            CHECK(rows[j].recall_mean == report.rows[j].recall_mean);
            CHECK(rows[j].recall_stderr == report.rows[j].recall_stderr);
            CHECK(rows[j].calls_used == report.rows[j].calls_used);
        }
    }
}

TEST_CASE("one method with two budgets gives 2 |k_values| rows") {
    auto j = small_spec();
    j["methods"] = nlohmann::json::array({{{"type", "rnr"}}});
    j["indexing"]["items"] = "base";
    j["seeds"] = {0};
    const auto report = run_experiment(parse_experiment_spec(j));
    CHECK(report.rows.size() == 4);
}

TEST_CASE("file-based corpus with an external scorer") {
    test::TempDir dir("files");
    Rng rng(1);
    save_embeddings(EmbeddingMatrix(test::random_matrix(rng, 40, 4), Role::item), dir / "items.axne");
    save_embeddings(EmbeddingMatrix(test::random_matrix(rng, 3, 4), Role::query), dir / "queries.axne");
    nlohmann::json j = {
        {"benchmark",
         {{"files",
           {{"items", (dir / "items.axne").string()},
            {"queries", (dir / "queries.axne").string()},
            {"scorer", "exec:" + test::echo_scorer_command()},
            {"gold_cache", (dir / "gold.json").string()}}}}},
        {"methods", {{{"type", "rnr"}}, {{"type", "axn"}, {"rounds", 2}}}},
        {"budgets", {10}},
        {"k_values", {3}},
        {"n_test_queries", 3},
    };
    const auto report = run_experiment(parse_experiment_spec(j));
    REQUIRE(report.rows.size() == 2);
    CHECK(report.rows[0].calls_used == 10);
    CHECK(std::filesystem::exists(dir / "gold.json"));
}

TEST_CASE("recall accumulator") {
    RecallAccumulator a;
    for (double x : {1.0, 0.0, 1.0, 1.0}) a.add(x);
    CHECK(a.mean() == 0.75);
    CHECK(a.stderr_of_mean() == doctest::Approx(std::sqrt(0.25 / 4)));
    RecallAccumulator big;
    for (int j = 0; j < 1000000; ++j) big.add(0.1);
    CHECK(big.mean() == doctest::Approx(0.1).epsilon(1e-15));
}
