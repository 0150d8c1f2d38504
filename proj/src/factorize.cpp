#include "axn/factorize.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include <json.hpp>

#include "axn/parallel.hpp"

namespace axn {

using nlohmann::json;

namespace {

void check_shapes(std::span<const ScoreEntry> entries, const RowMatrix& U, const RowMatrix& V) {
    if (U.cols() != V.cols())
        throw Error(Errc::dimension_mismatch, "U has dim " + std::to_string(U.cols()) + ", V has dim " +
                                                  std::to_string(V.cols()));
    for (const auto& e : entries) {
        if (e.query >= static_cast<std::size_t>(U.rows()) || e.item >= static_cast<std::size_t>(V.rows()))
            throw Error(Errc::dimension_mismatch, "observed entry outside the factor shapes");
    }
}

void optimizer_step(double* p, const double* grad, double* m, double* v, std::size_t n, std::size_t step,
                    const MfHyperparams& h) {
    const double lr = h.learning_rate;
    if (h.optimizer == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < n; ++j) p[j] -= lr * (grad[j] + h.weight_decay * p[j]);
        return;
    }
    const double bc1 = 1.0 - std::pow(h.beta1, double(step));
    const double bc2 = 1.0 - std::pow(h.beta2, double(step));
    for (std::size_t j = 0; j < n; ++j) {
        p[j] -= lr * h.weight_decay * p[j];
        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * grad[j];
        v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * grad[j] * grad[j];
        p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + h.eps);
    }
}

// First and second moments for one parameter block.
struct Moments {
    std::vector<double> m, v;
    explicit Moments(std::size_t n = 0) : m(n, 0.0), v(n, 0.0) {}
};

template <typename Block>
void step_block(Block& param, const Block& grad, Moments& mo, std::size_t step, const MfHyperparams& h) {
    optimizer_step(param.data(), grad.data(), mo.m.data(), mo.v.data(), static_cast<std::size_t>(param.size()), step,
                   h);
}

struct TowerMoments {
    Moments W1, b1, W2, b2, skip;
    explicit TowerMoments(const MlpTowerParams& t)
        : W1(t.W1.size()), b1(t.b1.size()), W2(t.W2.size()), b2(t.b2.size()), skip(1) {}
};

void step_tower(MlpTowerParams& t, const MlpGradient<double>& g, TowerMoments& mo, std::size_t step,
                const MfHyperparams& h) {
    step_block(t.W1, g.W1, mo.W1, step, h);
    step_block(t.b1, g.b1, mo.b1, step, h);
    step_block(t.W2, g.W2, mo.W2, step, h);
    step_block(t.b2, g.b2, mo.b2, step, h);
    optimizer_step(&t.w_skip, &g.w_skip, mo.skip.m.data(), mo.skip.v.data(), 1, step, h);
}

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
    for (std::size_t j = order.size(); j > 1; --j) std::swap(order[j - 1], order[index_draw(rng, j)]);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void guard_finite(double loss, std::size_t epoch) {
    if (!std::isfinite(loss))
        throw Error(Errc::non_finite_loss, "training diverged at epoch " + std::to_string(epoch) +
                                               "; lower the learning rate or normalize the scores");
}

RowMatrix forward_all(const MlpTowerParams& t, const RowMatrix& base) { return mlp_forward_rows(base, t).Y; }

}  // namespace

void MfHyperparams::validate() const {
    if (dim == 0) throw Error(Errc::invalid_spec, "dim must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw Error(Errc::invalid_spec, "learning rate must be finite and >= 0");
    if (batch_size == 0) throw Error(Errc::invalid_spec, "batch size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(eps > 0.0))
        throw Error(Errc::invalid_spec, "invalid optimizer moment parameters");
    if (!(weight_decay >= 0.0)) throw Error(Errc::invalid_spec, "weight decay must be >= 0");
    if (!(max_wall_seconds > 0.0)) throw Error(Errc::invalid_spec, "max_wall_seconds must be > 0");
}

double mf_loss(std::span<const ScoreEntry> entries, const RowMatrix& U, const RowMatrix& V) {
    check_shapes(entries, U, V);
    double sum = 0.0;
    for (const auto& e : entries) {
        const double r = e.score - U.row(static_cast<Eigen::Index>(e.query)).dot(V.row(static_cast<Eigen::Index>(e.item)));
        sum += r * r;
    }
    return sum;
}

double mf_loss(const SparseScoreMatrix& g, const EmbeddingMatrix& U, const EmbeddingMatrix& V) {
    if (U.rows() < g.n_queries() || V.rows() < g.n_items())
        throw Error(Errc::dimension_mismatch, "factor row counts do not cover G");
    return mf_loss(g.entries(), U.data(), V.data());
}

MfGradient mf_loss_gradient(std::span<const ScoreEntry> entries, const RowMatrix& U, const RowMatrix& V) {
    check_shapes(entries, U, V);
    MfGradient g{RowMatrix::Zero(U.rows(), U.cols()), RowMatrix::Zero(V.rows(), V.cols())};
    for (const auto& e : entries) {
        const auto q = static_cast<Eigen::Index>(e.query);
        const auto i = static_cast<Eigen::Index>(e.item);
        const double r = U.row(q).dot(V.row(i)) - e.score;
        g.U.row(q) += 2.0 * r * V.row(i);
        g.V.row(i) += 2.0 * r * U.row(q);
    }
    return g;
}

MfModel train_transductive(const SparseScoreMatrix& g, const EmbeddingMatrix& init_U, const EmbeddingMatrix& init_V,
                           const MfHyperparams& h) {
    h.validate();
    if (init_U.dim() != h.dim || init_V.dim() != h.dim)
        throw Error(Errc::dimension_mismatch, "initial embeddings must have dim " + std::to_string(h.dim));
    if (init_U.rows() != g.n_queries() || init_V.rows() != g.n_items())
        throw Error(Errc::dimension_mismatch, "initial embeddings must be |Q_train| x d and |I| x d");

    const auto t0 = std::chrono::steady_clock::now();
    RowMatrix U = init_U.data(), V = init_V.data();
    const auto entries = g.entries();
    TrainingTrace trace;
    trace.initial_loss = mf_loss(entries, U, V);
    guard_finite(trace.initial_loss, 0);
    RowMatrix best_U = U, best_V = V;
    double best_loss = trace.initial_loss;

    Moments mo_U(static_cast<std::size_t>(U.size())), mo_V(static_cast<std::size_t>(V.size()));
    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(h.seed, 0x7472));
    std::vector<ScoreEntry> batch;
    std::size_t step = 0;
    const std::size_t shards = std::max<std::size_t>(1, h.workers);

    for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
        if (seconds_since(t0) > h.max_wall_seconds) {
            trace.stopped_on_wall_clock = true;
            break;
        }
        shuffle(order, rng);
        for (std::size_t start = 0; start < order.size(); start += h.batch_size) {
            const std::size_t end = std::min(order.size(), start + h.batch_size);
            batch.clear();
            for (std::size_t j = start; j < end; ++j) batch.push_back(entries[order[j]]);
            MfGradient grad;
            if (shards == 1) {
                grad = mf_loss_gradient(batch, U, V);
            } else {
                std::vector<MfGradient> parts(shards);
                const std::size_t per = (batch.size() + shards - 1) / shards;
                parallel_for(shards, shards, [&](std::size_t s) {
                    const std::size_t lo = std::min(batch.size(), s * per), hi = std::min(batch.size(), lo + per);
                    parts[s] = mf_loss_gradient(std::span<const ScoreEntry>(batch).subspan(lo, hi - lo), U, V);
                });
                grad = std::move(parts[0]);
                for (std::size_t s = 1; s < shards; ++s) {
                    grad.U += parts[s].U;
                    grad.V += parts[s].V;
                }
            }
            const double inv = 1.0 / static_cast<double>(batch.size());
            grad.U *= inv;
            grad.V *= inv;
            ++step;
            step_block(U, grad.U, mo_U, step, h);
            step_block(V, grad.V, mo_V, step, h);
        }
        const double loss = mf_loss(entries, U, V);
        guard_finite(loss, epoch);
        trace.epoch_loss.push_back(loss);
        if (loss < best_loss) {
            best_loss = loss;
            best_U = U;
            best_V = V;
            trace.best_epoch = epoch;
        }
    }
    trace.seconds = seconds_since(t0);
    return MfModel{MfKind::transductive,
                   EmbeddingMatrix(std::move(best_U), Role::query),
                   EmbeddingMatrix(std::move(best_V), Role::item),
                   std::nullopt,
                   std::nullopt,
                   nullptr,
                   nullptr,
                   std::move(trace)};
}

MfModel train_inductive(const SparseScoreMatrix& g, std::shared_ptr<const EmbeddingMatrix> base_queries,
                        std::shared_ptr<const EmbeddingMatrix> base_items, const MfHyperparams& h) {
    h.validate();
    if (!base_queries || !base_items) throw Error(Errc::invalid_spec, "inductive training needs base embeddings");
    if (base_queries->dim() != h.dim || base_items->dim() != h.dim)
        throw Error(Errc::dimension_mismatch, "base embeddings must have dim " + std::to_string(h.dim));
    if (base_queries->rows() < g.n_queries() || base_items->rows() != g.n_items())
        throw Error(Errc::dimension_mismatch, "base embeddings do not cover G");

    const auto t0 = std::chrono::steady_clock::now();
    Rng init_rng(derive_seed(h.seed, 0x696e64));
    MlpTowerParams tq = MlpTowerParams::random(h.dim, init_rng);
    MlpTowerParams ti = MlpTowerParams::random(h.dim, init_rng);
    const RowMatrix BQ = base_queries->data().topRows(static_cast<Eigen::Index>(g.n_queries()));
    const RowMatrix& BI = base_items->data();
    const auto entries = g.entries();

    TrainingTrace trace;
    trace.initial_loss = mf_loss(entries, forward_all(tq, BQ), forward_all(ti, BI));
    guard_finite(trace.initial_loss, 0);
    MlpTowerParams best_q = tq, best_i = ti;
    double best_loss = trace.initial_loss;

    TowerMoments mo_q(tq), mo_i(ti);
    std::vector<std::size_t> order(entries.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(h.seed, 0x7472));
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= h.epochs; ++epoch) {
        if (seconds_since(t0) > h.max_wall_seconds) {
            trace.stopped_on_wall_clock = true;
            break;
        }
        shuffle(order, rng);
        for (std::size_t start = 0; start < order.size(); start += h.batch_size) {
            const std::size_t end = std::min(order.size(), start + h.batch_size);
            // Compact the batch onto its distinct queries and items, in first-seen order.
            std::unordered_map<std::size_t, Eigen::Index> q_slot, i_slot;
            std::vector<std::size_t> q_rows, i_rows;
            for (std::size_t j = start; j < end; ++j) {
                const auto& e = entries[order[j]];
                if (q_slot.emplace(e.query, Eigen::Index(q_rows.size())).second) q_rows.push_back(e.query);
                if (i_slot.emplace(e.item, Eigen::Index(i_rows.size())).second) i_rows.push_back(e.item);
            }
            RowMatrix Xq(Eigen::Index(q_rows.size()), BQ.cols()), Xi(Eigen::Index(i_rows.size()), BI.cols());
            for (std::size_t r = 0; r < q_rows.size(); ++r) Xq.row(Eigen::Index(r)) = BQ.row(Eigen::Index(q_rows[r]));
            for (std::size_t r = 0; r < i_rows.size(); ++r) Xi.row(Eigen::Index(r)) = BI.row(Eigen::Index(i_rows[r]));
            const auto aq = mlp_forward_rows(Xq, tq);
            const auto ai = mlp_forward_rows(Xi, ti);
            RowMatrix dYq = RowMatrix::Zero(aq.Y.rows(), aq.Y.cols());
            RowMatrix dYi = RowMatrix::Zero(ai.Y.rows(), ai.Y.cols());
            const double scale = 2.0 / static_cast<double>(end - start);
            for (std::size_t j = start; j < end; ++j) {
                const auto& e = entries[order[j]];
                const auto qs = q_slot[e.query], is = i_slot[e.item];
                const double r = aq.Y.row(qs).dot(ai.Y.row(is)) - e.score;
                dYq.row(qs) += scale * r * ai.Y.row(is);
                dYi.row(is) += scale * r * aq.Y.row(qs);
            }
            const auto gq = mlp_backward(aq, dYq, tq);
            const auto gi = mlp_backward(ai, dYi, ti);
            ++step;
            step_tower(tq, gq, mo_q, step, h);
            step_tower(ti, gi, mo_i, step, h);
        }
        const double loss = mf_loss(entries, forward_all(tq, BQ), forward_all(ti, BI));
        guard_finite(loss, epoch);
        trace.epoch_loss.push_back(loss);
        if (loss < best_loss) {
            best_loss = loss;
            best_q = tq;
            best_i = ti;
            trace.best_epoch = epoch;
        }
    }
    trace.seconds = seconds_since(t0);
    return MfModel{MfKind::inductive,
                   EmbeddingMatrix(forward_all(best_q, BQ), Role::query),
                   EmbeddingMatrix(forward_all(best_i, BI), Role::item),
                   best_q,
                   best_i,
                   std::move(base_queries),
                   std::move(base_items),
                   std::move(trace)};
}

EmbeddingMatrix apply_tower(const MlpTowerParams& t, const EmbeddingMatrix& base) {
    return EmbeddingMatrix(forward_all(t, base.data()), base.role());
}

EmbeddingMatrix embed_items(const MfModel& m) {
    if (m.kind == MfKind::transductive || !m.base_items || !m.item_tower) return m.V;
    return apply_tower(*m.item_tower, *m.base_items);
}

EmbeddingMatrix embed_queries(const MfModel& m, const EmbeddingMatrix& base) {
    if (m.kind == MfKind::transductive) return base;
    if (!m.query_tower) throw Error(Errc::invalid_spec, "inductive model has no query tower");
    return apply_tower(*m.query_tower, base);
}

EmbeddingMatrix random_embeddings(std::size_t rows, std::size_t dim, double scale, std::uint64_t seed, Role role) {
    Rng rng(derive_seed(seed, 0x656d62));
    RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = scale * normal_draw(rng);
    return EmbeddingMatrix(std::move(m), role);
}

namespace {

template <typename M>
json matrix_json(const M& m) {
    return json{{"shape", {m.rows(), m.cols()}}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

RowMatrix matrix_from_json(const json& j) {
    const auto rows = j.at("shape").at(0).get<Eigen::Index>();
    const auto cols = j.at("shape").at(1).get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
        throw Error(Errc::format, "tower array length does not match its shape");
    return Eigen::Map<const RowMatrix>(data.data(), rows, cols);
}

json tower_json(const MlpTowerParams& t) {
    return json{{"dim", t.dim()},
                {"W1", matrix_json(t.W1)},
                {"b1", matrix_json(RowMatrix(t.b1.transpose()))},
                {"W2", matrix_json(t.W2)},
                {"b2", matrix_json(RowMatrix(t.b2.transpose()))},
                {"w_skip", t.w_skip}};
}

MlpTowerParams tower_from_json(const json& j) {
    MlpTowerParams t;
    t.W1 = matrix_from_json(j.at("W1"));
    t.b1 = matrix_from_json(j.at("b1")).transpose();
    t.W2 = matrix_from_json(j.at("W2"));
    t.b2 = matrix_from_json(j.at("b2")).transpose();
    t.w_skip = j.at("w_skip").get<double>();
    t.validate();
    return t;
}

}  // namespace

void save_model(const MfModel& m, const std::filesystem::path& dir, const MfHyperparams& h) {
    std::filesystem::create_directories(dir);
    save_embeddings(m.U, dir / "queries.axne");
    save_embeddings(embed_items(m), dir / "items.axne");
    json j{{"kind", m.kind == MfKind::transductive ? "trns" : "ind"},
           {"dim", h.dim},
           {"learning_rate", h.learning_rate},
           {"epochs", h.epochs},
           {"batch_size", h.batch_size},
           {"seed", h.seed},
           {"optimizer", h.optimizer == OptimizerKind::adam ? "adam" : "sgd"},
           {"initial_loss", m.trace.initial_loss},
           {"epoch_loss", m.trace.epoch_loss},
           {"best_epoch", m.trace.best_epoch}};
    if (m.query_tower) j["query_tower"] = tower_json(*m.query_tower);
    if (m.item_tower) j["item_tower"] = tower_json(*m.item_tower);
    std::ofstream out(dir / "model.json");
    if (!out) throw Error(Errc::io, "cannot write " + (dir / "model.json").string());
    out << j.dump(1) << '\n';
}

MfModel load_model(const std::filesystem::path& dir) {
    std::ifstream in(dir / "model.json");
    if (!in) throw Error(Errc::io, "cannot open " + (dir / "model.json").string());
    try {
        const json j = json::parse(in);
        const std::string kind = j.at("kind").get<std::string>();
        MfModel m{kind == "ind" ? MfKind::inductive : MfKind::transductive,
                  load_embeddings(dir / "queries.axne"),
                  load_embeddings(dir / "items.axne"),
                  std::nullopt,
                  std::nullopt,
                  nullptr,
                  nullptr,
                  {}};
        if (j.contains("query_tower")) m.query_tower = tower_from_json(j["query_tower"]);
        if (j.contains("item_tower")) m.item_tower = tower_from_json(j["item_tower"]);
        m.trace.initial_loss = j.value("initial_loss", 0.0);
        m.trace.epoch_loss = j.value("epoch_loss", std::vector<double>{});
        return m;
    } catch (const json::exception& e) {
        throw Error(Errc::format, (dir / "model.json").string() + ": " + e.what());
    }
}

}  // namespace axn
