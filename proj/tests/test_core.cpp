#include <doctest.h>

#include <fstream>

#include "axn/core.hpp"
#include "test_support.hpp"

using namespace axn;

TEST_CASE("embedding file round trip is bit-exact") {
    test::TempDir dir("core");
    RowMatrix m(2, 3);
    m << 1, 2, 3, 4, 5, 6;
    const EmbeddingMatrix e(m, Role::item);
    save_embeddings(e, dir / "m.axne");
    CHECK(std::filesystem::file_size(dir / "m.axne") == 4 + 4 + 1 + 8 + 8 + 48);
    CHECK(load_embeddings(dir / "m.axne") == e);

    SUBCASE("random matrices, including denormals and signed zeros") {
        Rng rng(7);
        for (int trial = 0; trial < 25; ++trial) {
            const auto rows = 1 + static_cast<Eigen::Index>(index_draw(rng, 40));
            const auto cols = 1 + static_cast<Eigen::Index>(index_draw(rng, 20));
            RowMatrix r = test::random_matrix(rng, rows, cols, std::pow(10.0, uniform_draw(rng, -300, 300)));
            r(0, 0) = -0.0;
            if (r.size() > 1) r.data()[1] = 4.9e-324;
            const EmbeddingMatrix x(r, trial % 2 ? Role::query : Role::item);
            save_embeddings(x, dir / "r.axne");
            const auto y = load_embeddings(dir / "r.axne");
            REQUIRE(y.rows() == x.rows());
            CHECK(std::memcmp(y.data().data(), x.data().data(), sizeof(double) * x.rows() * x.dim()) == 0);
            CHECK(y.role() == x.role());
        }
    }
}

TEST_CASE("embedding matrix rejects degenerate and non-finite data") {
    CHECK_THROWS_AS(EmbeddingMatrix(RowMatrix(0, 3), Role::item), Error);
    RowMatrix nan = RowMatrix::Ones(2, 2);
    nan(1, 1) = std::nan("");
    try {
        EmbeddingMatrix bad(nan, Role::item);
        FAIL("expected invalid-matrix");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_matrix);
    }
}

TEST_CASE("load_embeddings detects corruption") {
    test::TempDir dir("core");
    RowMatrix m = RowMatrix::Ones(3, 4);
    save_embeddings(EmbeddingMatrix(m, Role::query), dir / "ok.axne");
    const auto full = std::filesystem::file_size(dir / "ok.axne");

    SUBCASE("truncated payload") {
        std::filesystem::copy_file(dir / "ok.axne", dir / "cut.axne");
        std::filesystem::resize_file(dir / "cut.axne", full - 5);
        try {
            load_embeddings(dir / "cut.axne");
            FAIL("expected format-error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::format);
        }
    }
    SUBCASE("zero dimension") {
        std::ofstream out(dir / "dim0.axne", std::ios::binary);
        const char magic[4] = {'A', 'X', 'N', 'E'};
        const std::uint32_t version = 1;
        const std::uint8_t role = 1;
        const std::uint64_t rows = 3, dim = 0;
        out.write(magic, 4);
        out.write(reinterpret_cast<const char*>(&version), 4);
        out.write(reinterpret_cast<const char*>(&role), 1);
        out.write(reinterpret_cast<const char*>(&rows), 8);
        out.write(reinterpret_cast<const char*>(&dim), 8);
        out.close();
        try {
            load_embeddings(dir / "dim0.axne");
            FAIL("expected format-error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::format);
        }
    }
    SUBCASE("bad magic") {
        std::ofstream(dir / "junk.axne") << "JUNKJUNKJUNKJUNKJUNKJUNKJUNK";
        CHECK_THROWS_AS(load_embeddings(dir / "junk.axne"), Error);
    }
    SUBCASE("missing file is an io error") {
        try {
            load_embeddings(dir / "absent.axne");
            FAIL("expected io-error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::io);
        }
    }
}

TEST_CASE("sparse score matrix invariants and persistence") {
    test::TempDir dir("core");
    SparseScoreMatrix g(3, 5, {{2, 1, 0.5}, {0, 4, -1.0}, {0, 1, 2.0}});
    CHECK(g.nnz() == 3);
    CHECK(g.entries()[0] == ScoreEntry{0, 1, 2.0});
    CHECK(g.row(0).size() == 2);
    CHECK(g.row(1).empty());
    double s = 0;
    CHECK(g.find(2, 1, s));
    CHECK(s == 0.5);
    CHECK_FALSE(g.find(1, 1, s));

    save_sparse(g, dir / "g.axng");
    CHECK(load_sparse(dir / "g.axng") == g);
    export_sparse_csv(g, dir / "g.csv");
    CHECK(import_sparse_csv(dir / "g.csv", 3, 5) == g);

    CHECK_THROWS_AS(SparseScoreMatrix(2, 2, {{0, 0, 1.0}, {0, 0, 2.0}}), Error);
    CHECK_THROWS_AS(SparseScoreMatrix(2, 2, {{0, 2, 1.0}}), Error);
    CHECK_THROWS_AS(SparseScoreMatrix(2, 2, {{0, 1, std::numeric_limits<double>::infinity()}}), Error);
}

TEST_CASE("embedding CSV interchange") {
    test::TempDir dir("core");
    Rng rng(3);
    const EmbeddingMatrix e(test::random_matrix(rng, 7, 5), Role::item);
    export_embeddings_csv(e, dir / "e.csv");
    CHECK(import_embeddings_csv(dir / "e.csv", Role::item) == e);
}

TEST_CASE("topk_merge") {
    const auto a = TopKList::from_candidates({{1, 9}, {2, 5}}, 2);
    const auto b = TopKList::from_candidates({{3, 7}}, 2);
    CHECK(topk_merge(a, b, 2).items() == std::vector<ScoredItem>{{1, 9}, {3, 7}});
    CHECK(topk_merge(a, a, a.size()) == a);

    const auto ties = TopKList::from_candidates({{7, 5}, {2, 5}}, 1);
    CHECK(ties.items() == std::vector<ScoredItem>{{2, 5}});

    SUBCASE("duplicates collapse to the higher score") {
        const auto x = TopKList::from_candidates({{4, 1.0}}, 3);
        const auto y = TopKList::from_candidates({{4, 3.0}, {5, 2.0}}, 3);
        CHECK(topk_merge(x, y, 3).items() == std::vector<ScoredItem>{{4, 3.0}, {5, 2.0}});
    }
}

TEST_CASE("select_topk agrees with a full sort on random input") {
    Rng rng(11);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + index_draw(rng, 300), k = 1 + index_draw(rng, 40);
        std::vector<double> s(n);
        // Coarse grid so ties occur.
        for (auto& x : s) x = std::round(normal_draw(rng) * 4) / 4;
        const auto got = select_topk(s, {}, k);
        std::vector<ScoredItem> all;
        for (std::size_t i = 0; i < n; ++i) all.push_back({i, s[i]});
        std::sort(all.begin(), all.end(), [](auto& a, auto& b) {
            return a.score > b.score || (a.score == b.score && a.id < b.id);
        });
        all.resize(std::min(n, k));
        CHECK(got.items() == all);
    }
}
