#include <doctest.h>

#include <functional>
#include <set>

#include "axn/factorize.hpp"
#include "axn/scorer.hpp"
#include "test_support.hpp"

using namespace axn;

namespace {

double sq_loss(const VectorT<double>& x, double target, const VectorT<double>& partner, const MlpTowerParams& t) {
    const double r = target - mlp_forward(x, t).dot(partner);
    return r * r;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

/// Central differences of `f` w.r.t. every coefficient of `p`, compared against `analytic`.
template <typename M>
double worst_fd(M& p, const M& analytic, const std::function<double()>& f, double h = 1e-5) {
    double worst = 0;
    for (Eigen::Index j = 0; j < p.size(); ++j) {
        const double keep = p.data()[j];
        p.data()[j] = keep + h;
        const double up = f();
        p.data()[j] = keep - h;
        const double down = f();
        p.data()[j] = keep;
        worst = std::max(worst, rel_err((up - down) / (2 * h), analytic.data()[j]));
    }
    return worst;
}

SparseScoreMatrix full_matrix(const RowMatrix& M) {
    std::vector<ScoreEntry> e;
    for (Eigen::Index q = 0; q < M.rows(); ++q)
        for (Eigen::Index i = 0; i < M.cols(); ++i)
            e.push_back({static_cast<QueryId>(q), static_cast<ItemId>(i), M(q, i)});
    return SparseScoreMatrix(M.rows(), M.cols(), std::move(e));
}

}  // namespace

TEST_CASE("mlp_forward") {
    const Vector x = Vector::LinSpaced(4, -1, 2);
    SUBCASE("zero tower scales the input by 1 - sigmoid(-5)") {
        const auto t = MlpTowerParams::zeros(4, -5);
        const double expect = 1.0 - 1.0 / (1.0 + std::exp(5.0));
        CHECK(expect == doctest::Approx(0.993307).epsilon(1e-6));
        CHECK((mlp_forward(x, t) - expect * x).norm() <= 1e-15);
    }
    SUBCASE("saturated skip passes the MLP branch through") {
        Rng rng(1);
        auto t = MlpTowerParams::random(4, rng, 50);
        Vector z = t.b1;
        z.noalias() += t.W1.transpose() * x;
        const Vector branch = t.b2 + t.W2.transpose() * z.unaryExpr([](double v) { return gelu(v); });
        CHECK((mlp_forward(x, t) - branch).norm() <= 1e-9);
    }
    SUBCASE("fresh towers are near-identity on dot products") {
        Rng rng(2);
        double worst = 0;
        for (int trial = 0; trial < 200; ++trial) {
            const auto tq = MlpTowerParams::random(16, rng), ti = MlpTowerParams::random(16, rng);
            const Vector a = test::random_vector(rng, 16), b = test::random_vector(rng, 16);
            const double base = a.dot(b), mapped = mlp_forward(a, tq).dot(mlp_forward(b, ti));
            worst = std::max(worst, std::abs(mapped - base) / (a.norm() * b.norm()));
        }
        CHECK(worst < 0.02);
    }
    SUBCASE("gelu is the erf form") {
        CHECK(gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-15));
        CHECK(gelu(-2.0) == doctest::Approx(-0.04550026389635842).epsilon(1e-14));
    }
    SUBCASE("wrong input length") {
        CHECK_THROWS_AS(mlp_forward(Vector(Vector::Ones(3)), MlpTowerParams::zeros(4, 0)), Error);
    }
}

TEST_CASE("mlp_gradient against central finite differences") {
    Rng rng(13);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t d = 1 + index_draw(rng, 6);
        auto t = MlpTowerParams::random(d, rng, normal_draw(rng) * 2);
        Vector x = test::random_vector(rng, d);
        const Vector partner = test::random_vector(rng, d);
        const double target = normal_draw(rng) * 3;
        const auto g = mlp_gradient(x, target, partner, t);
        auto f = [&] { return sq_loss(x, target, partner, t); };
        CHECK(worst_fd(t.W1, g.W1, f) <= 1e-4);
        CHECK(worst_fd(t.W2, g.W2, f) <= 1e-4);
        CHECK(worst_fd(t.b1, g.b1, f) <= 1e-4);
        CHECK(worst_fd(t.b2, g.b2, f) <= 1e-4);
        RowMatrix gx = g.X;
        Eigen::Map<RowMatrix> xm(x.data(), 1, x.size());
        RowMatrix xr = xm;
        auto fx = [&] { return sq_loss(xr.row(0).transpose(), target, partner, t); };
        CHECK(worst_fd(xr, gx, fx) <= 1e-4);
        Eigen::Matrix<double, 1, 1> ws{t.w_skip}, gws{g.w_skip};
        auto fw = [&] {
            auto u = t;
            u.w_skip = ws(0);
            return sq_loss(x, target, partner, u);
        };
        CHECK(worst_fd(ws, gws, fw) <= 1e-4);
    }
}

TEST_CASE("mlp_gradient edge cases") {
    Rng rng(4);
    auto t = MlpTowerParams::random(3, rng);
    const Vector x = test::random_vector(rng, 3), p = test::random_vector(rng, 3);
    const double exact = mlp_forward(x, t).dot(p);
    const auto zero = mlp_gradient(x, exact, p, t);
    CHECK(zero.W1.norm() == 0.0);
    CHECK(zero.W2.norm() == 0.0);
    CHECK(zero.b1.norm() == 0.0);
    CHECK(zero.w_skip == 0.0);

    t.w_skip = -50;
    const auto sat = mlp_gradient(x, 10.0, p, t);
    const double scale = std::abs(10.0 - exact) * p.norm() * x.norm();
    CHECK(std::abs(sat.w_skip) <= 1e-15 * scale);
}

TEST_CASE("mf_loss") {
    RowMatrix U(1, 2), V(1, 2);
    U << 1, 0;
    V << 1, 5;
    CHECK(mf_loss(SparseScoreMatrix(1, 1, {{0, 0, 3.0}}), EmbeddingMatrix(U, Role::query),
                  EmbeddingMatrix(V, Role::item)) == 4.0);

    Rng rng(6);
    const RowMatrix A = test::random_matrix(rng, 5, 3), B = test::random_matrix(rng, 6, 3);
    CHECK(mf_loss(full_matrix(A * B.transpose()), EmbeddingMatrix(A, Role::query), EmbeddingMatrix(B, Role::item)) <=
          1e-24);

    SUBCASE("random 5x6 with 10 entries against a scalar loop") {
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<ScoreEntry> e;
            std::set<std::pair<QueryId, ItemId>> used;
            while (e.size() < 10) {
                const QueryId q = index_draw(rng, 5);
                const ItemId i = index_draw(rng, 6);
                if (used.insert({q, i}).second) e.push_back({q, i, normal_draw(rng)});
            }
            const RowMatrix Ur = test::random_matrix(rng, 5, 4), Vr = test::random_matrix(rng, 6, 4);
            double ref = 0;
            for (const auto& x : e) {
                double dot = 0;
                for (int r = 0; r < 4; ++r) dot += Ur(x.query, r) * Vr(x.item, r);
                ref += (x.score - dot) * (x.score - dot);
            }
            const SparseScoreMatrix g(5, 6, e);
            CHECK(std::abs(mf_loss(g, EmbeddingMatrix(Ur, Role::query), EmbeddingMatrix(Vr, Role::item)) - ref) <=
                  1e-12 * ref);
        }
    }
    CHECK_THROWS_AS(mf_loss(SparseScoreMatrix(1, 1, {{0, 0, 3.0}}), EmbeddingMatrix(RowMatrix::Ones(1, 2), Role::query),
                            EmbeddingMatrix(RowMatrix::Ones(1, 3), Role::item)),
                    Error);
}

TEST_CASE("mf_loss_gradient against finite differences") {
    Rng rng(8);
    std::vector<ScoreEntry> e;
    for (QueryId q = 0; q < 4; ++q)
        for (ItemId i = 0; i < 5; ++i)
            if (uniform_draw(rng, 0, 1) < 0.6) e.push_back({q, i, normal_draw(rng)});
    RowMatrix U = test::random_matrix(rng, 4, 3), V = test::random_matrix(rng, 5, 3);
    const auto g = mf_loss_gradient(e, U, V);
    auto f = [&] { return mf_loss(e, U, V); };
    CHECK(worst_fd(U, g.U, f) <= 1e-6);
    CHECK(worst_fd(V, g.V, f) <= 1e-6);
}

TEST_CASE("transductive training") {
    const auto o = make_synthetic_oracle({40, 60, 4, 0.0, 1});
    const RowMatrix M = o.true_queries.data() * o.true_items.data().transpose();
    const auto g = full_matrix(M);
    const auto U0 = random_embeddings(40, 8, 0.5, 1, Role::query);
    const auto V0 = random_embeddings(60, 8, 0.5, 2, Role::item);

    SUBCASE("zero learning rate is a fixed point") {
        MfHyperparams h;
        h.dim = 8;
        h.learning_rate = 0;
        h.epochs = 3;
        const auto m = train_transductive(g, U0, V0, h);
        CHECK(m.U == U0);
        CHECK(m.V == V0);
        CHECK(m.trace.initial_loss == mf_loss(g, U0, V0));
    }
    SUBCASE("short run lowers the loss and is deterministic") {
        MfHyperparams h;
        h.dim = 8;
        h.epochs = 20;
        h.seed = 7;
        for (auto opt : {OptimizerKind::adam, OptimizerKind::sgd}) {
            h.optimizer = opt;
            h.learning_rate = opt == OptimizerKind::adam ? 1e-3 : 1e-4;
            const auto a = train_transductive(g, U0, V0, h), b = train_transductive(g, U0, V0, h);
            CHECK(mf_loss(g, a.U, a.V) < mf_loss(g, U0, V0));
            CHECK(a.U == b.U);
            CHECK(a.V == b.V);
            CHECK(a.trace.epoch_loss.size() == 20);
        }
    }
    SUBCASE("divergence is reported") {
        MfHyperparams h;
        h.dim = 8;
        h.optimizer = OptimizerKind::sgd;
        h.learning_rate = 1e6;
        h.epochs = 50;
        try {
            train_transductive(g, U0, V0, h);
            FAIL("expected non-finite-loss");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::non_finite_loss);
        }
    }
    SUBCASE("wall-clock cap stops early") {
        MfHyperparams h;
        h.dim = 8;
        h.epochs = 100000;
        h.max_wall_seconds = 0.05;
        const auto m = train_transductive(g, U0, V0, h);
        CHECK(m.trace.stopped_on_wall_clock);
        CHECK(m.trace.epoch_loss.size() < 100000);
    }
    SUBCASE("shape mismatch") {
        MfHyperparams h;
        h.dim = 8;
        CHECK_THROWS_AS(train_transductive(g, random_embeddings(40, 7, 0.1, 1, Role::query), V0, h), Error);
    }
    SUBCASE("queries without observations keep their initialization") {
        const SparseScoreMatrix sparse(3, 4, {{0, 0, 1.0}, {2, 3, -1.0}});
        const auto u = random_embeddings(3, 2, 0.5, 3, Role::query);
        const auto v = random_embeddings(4, 2, 0.5, 4, Role::item);
        MfHyperparams h;
        h.dim = 2;
        h.epochs = 5;
        const auto m = train_transductive(sparse, u, v, h);
        CHECK(m.U.data().row(1) == u.data().row(1));
    }
}

TEST_CASE("inductive training and embedding") {
    Rng rng(31);
    const std::size_t d = 6;
    auto bq = std::make_shared<const EmbeddingMatrix>(test::random_matrix(rng, 30, d), Role::query);
    auto bi = std::make_shared<const EmbeddingMatrix>(test::random_matrix(rng, 40, d), Role::item);
    const auto tq = MlpTowerParams::random(d, rng, 1.0), ti = MlpTowerParams::random(d, rng, 1.0);
    const RowMatrix M = apply_tower(tq, *bq).data() * apply_tower(ti, *bi).data().transpose();
    const auto g = full_matrix(M);

    SUBCASE("realizable target: loss falls to 1% of its initial value") {
        MfHyperparams h;
        h.dim = d;
        h.learning_rate = 5e-3;
        h.epochs = 300;
        h.batch_size = 128;
        const auto m = train_inductive(g, bq, bi, h);
        CHECK(mf_loss(g, m.U, m.V) <= 1e-2 * m.trace.initial_loss);
    }
    SUBCASE("zero epochs keeps towers at initialization") {
        MfHyperparams h;
        h.dim = d;
        h.epochs = 0;
        const auto m = train_inductive(g, bq, bi, h);
        REQUIRE(m.item_tower);
        CHECK(m.item_tower->w_skip == -5.0);
        const RowMatrix pred = m.U.data() * m.V.data().transpose();
        const RowMatrix base = bq->data() * bi->data().transpose();
        CHECK((pred - base).norm() / base.norm() < 0.05);
    }
    SUBCASE("embed_items applies the item tower row by row") {
        MfHyperparams h;
        h.dim = d;
        h.epochs = 2;
        const auto m = train_inductive(g, bq, bi, h);
        const auto v = embed_items(m);
        for (std::size_t i = 0; i < bi->rows(); ++i)
            CHECK((v.data().row(i).transpose() - mlp_forward(Vector(bi->row(i).transpose()), *m.item_tower)).norm() <=
                  1e-12);
    }
    SUBCASE("closed skip returns the base embeddings") {
        MfModel m{MfKind::inductive, *bq, *bi, MlpTowerParams::zeros(d, -50), MlpTowerParams::zeros(d, -50), bq, bi, {}};
        CHECK((embed_items(m).data() - bi->data()).cwiseAbs().maxCoeff() <= 1e-12 * bi->data().cwiseAbs().maxCoeff());
    }
    SUBCASE("transductive embed_items is a passthrough") {
        MfHyperparams h;
        h.dim = d;
        h.epochs = 1;
        const auto m = train_transductive(g, *bq, *bi, h);
        CHECK(embed_items(m) == m.V);
    }
    SUBCASE("model directory round trip") {
        test::TempDir dir("mf");
        MfHyperparams h;
        h.dim = d;
        h.epochs = 1;
        const auto m = train_inductive(g, bq, bi, h);
        save_model(m, dir.path(), h);
        const auto back = load_model(dir.path());
        CHECK(back.kind == MfKind::inductive);
        CHECK(back.V == m.V);
        CHECK(back.item_tower->W1 == m.item_tower->W1);
        CHECK(back.query_tower->w_skip == m.query_tower->w_skip);
    }
}
