#include "axn/evalharness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_set>

#include "axn/parallel.hpp"
#include "axn/random.hpp"

namespace axn {

using nlohmann::json;

double topk_recall_at_m(const TopKList& gold, const TopKList& retrieved) {
    const std::size_t k = gold.size();
    if (k == 0) throw Error(Errc::size_mismatch, "gold list is empty");
    if (gold.size() != gold.k())
        throw Error(Errc::size_mismatch, "gold list holds " + std::to_string(gold.size()) + " of k=" +
                                             std::to_string(gold.k()) + " items");
    // Only the first k retrieved items count.
    std::unordered_set<ItemId> gold_ids;
    for (const auto& s : gold.items()) gold_ids.insert(s.id);
    std::size_t hit = 0;
    for (std::size_t j = 0; j < std::min(k, retrieved.size()); ++j) hit += gold_ids.count(retrieved.items()[j].id);
    return static_cast<double>(hit) / static_cast<double>(k);
}

namespace {

json gold_cache_key(const Scorer& scorer, const std::vector<QueryId>& queries, std::size_t k) {
    return json{{"scorer", scorer.descriptor()}, {"k", k}, {"queries", queries}};
}

json topk_json(const TopKList& t) {
    json items = json::array();
    for (const auto& s : t.items()) items.push_back({s.id, s.score});
    return json{{"k", t.k()}, {"items", items}};
}

TopKList topk_from_json(const json& j) {
    std::vector<ScoredItem> items;
    for (const auto& p : j.at("items")) items.push_back({p.at(0).get<ItemId>(), p.at(1).get<double>()});
    return TopKList::from_candidates(std::move(items), j.at("k").get<std::size_t>());
}

}  // namespace

GoldSet make_gold(const Scorer& scorer, const std::vector<QueryId>& queries, std::size_t k,
                  const std::optional<std::filesystem::path>& cache, std::size_t n_items, std::size_t workers) {
    if (k == 0) throw Error(Errc::invalid_spec, "gold k must be >= 1");
    const json key = gold_cache_key(scorer, queries, k);
    if (cache && std::filesystem::exists(*cache)) {
        std::ifstream in(*cache);
        try {
            const json j = json::parse(in);
            if (j.at("key") == key) {
                GoldSet gold;
                for (const auto& [q, t] : j.at("gold").items()) gold.emplace(std::stoull(q), topk_from_json(t));
                return gold;
            }
        } catch (const json::exception&) {
            // Unreadable cache: recompute and overwrite.
        }
    }
    std::vector<TopKList> lists(queries.size());
    parallel_for(queries.size(), workers,
                 [&](std::size_t j) { lists[j] = brute_force_knn(scorer, queries[j], k, n_items); });
    GoldSet gold;
    for (std::size_t j = 0; j < queries.size(); ++j) gold.emplace(queries[j], std::move(lists[j]));
    if (cache) {
        json g = json::object();
        for (const auto& [q, t] : gold) g[std::to_string(q)] = topk_json(t);
        if (cache->has_parent_path()) std::filesystem::create_directories(cache->parent_path());
        std::ofstream out(*cache);
        if (!out) throw Error(Errc::io, "cannot write gold cache " + cache->string());
        out << json{{"key", key}, {"gold", g}}.dump() << '\n';
    }
    return gold;
}

std::vector<QueryId> SyntheticBenchmark::train_ids() const {
    std::vector<QueryId> ids(spec.n_train);
    for (std::size_t j = 0; j < ids.size(); ++j) ids[j] = j;
    return ids;
}

std::vector<QueryId> SyntheticBenchmark::test_ids() const {
    std::vector<QueryId> ids(spec.n_test);
    for (std::size_t j = 0; j < ids.size(); ++j) ids[j] = spec.n_train + j;
    return ids;
}

namespace {

EmbeddingMatrix pad_columns(const EmbeddingMatrix& m, std::size_t dim) {
    RowMatrix out = RowMatrix::Zero(static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(dim));
    out.leftCols(static_cast<Eigen::Index>(m.dim())) = m.data();
    return EmbeddingMatrix(std::move(out), m.role());
}

}  // namespace

EmbeddingMatrix SyntheticBenchmark::padded_true_items() const { return pad_columns(oracle.true_items, spec.dim); }
EmbeddingMatrix SyntheticBenchmark::padded_true_queries() const { return pad_columns(oracle.true_queries, spec.dim); }

SyntheticBenchmark make_desk_benchmark(const DeskBenchmarkSpec& spec) {
    if (spec.n_train == 0 || spec.n_test == 0) throw Error(Errc::invalid_spec, "benchmark needs train and test queries");
    if (spec.dim < spec.rank) throw Error(Errc::invalid_spec, "embedding dim must be >= oracle rank");
    if (!(spec.base_noise >= 0.0)) throw Error(Errc::invalid_spec, "base_noise must be >= 0");
    SyntheticOracleSpec os{spec.n_train + spec.n_test, spec.n_items, spec.rank, spec.sigma, spec.seed};
    auto oracle = make_synthetic_oracle(os);
    auto perturb = [&](const EmbeddingMatrix& truth, std::uint64_t stream) {
        RowMatrix m = pad_columns(truth, spec.dim).data();
        Rng rng(derive_seed(spec.seed, stream));
        for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] += spec.base_noise * normal_draw(rng);
        return std::make_shared<const EmbeddingMatrix>(std::move(m), truth.role());
    };
    auto bq = perturb(oracle.true_queries, 11);
    auto bi = perturb(oracle.true_items, 12);
    return SyntheticBenchmark{spec, std::move(oracle), std::move(bq), std::move(bi)};
}

ItemSource parse_item_source(const std::string& s) {
    if (s == "base") return ItemSource::base;
    if (s == "true") return ItemSource::true_factors;
    if (s == "trns") return ItemSource::transductive;
    if (s == "ind") return ItemSource::inductive;
    throw Error(Errc::config, "unknown item source '" + s + "' (expected base, true, trns, ind)");
}

std::string to_string(ItemSource s) {
    switch (s) {
        case ItemSource::base: return "base";
        case ItemSource::true_factors: return "true";
        case ItemSource::transductive: return "trns";
        case ItemSource::inductive: return "ind";
    }
    return "?";
}

void ExperimentSpec::validate() const {
    if (synthetic.has_value() == files.has_value())
        throw Error(Errc::config, "experiment needs exactly one of a synthetic or file benchmark");
    if (methods.empty()) throw Error(Errc::config, "no methods");
    if (budgets.empty() || k_values.empty()) throw Error(Errc::config, "budgets and k_values must be non-empty");
    if (n_test_queries == 0) throw Error(Errc::config, "n_test_queries must be >= 1");
    if (seeds.empty()) throw Error(Errc::config, "no seeds");
    const auto min_budget = *std::min_element(budgets.begin(), budgets.end());
    for (auto k : k_values)
        if (k == 0 || k > min_budget) throw Error(Errc::config, "every k must lie in [1, min(budgets)]");
    std::set<std::string> names;
    for (const auto& m : methods) {
        if (!names.insert(m.name).second) throw Error(Errc::config, "duplicate method name '" + m.name + "'");
        AxnConfig probe = m.axn;
        probe.budget = min_budget;
        if (m.type == MethodType::axn || m.type == MethodType::tour) probe.validate();
        if (m.type == MethodType::axn && m.axn.init == InitPolicy::precomputed_ranking && files &&
            !(files->base_items && files->base_queries))
            throw Error(Errc::config, "ranking init on a file corpus needs base_items and base_queries");
    }
    if (synthetic && n_test_queries > synthetic->n_test)
        throw Error(Errc::config, "n_test_queries exceeds the benchmark's test split");
    indexing.mf.validate();
}

namespace {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw Error(Errc::config, where + " must be an object");
    for (const auto& [key, _] : j.items()) {
        if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
            throw Error(Errc::config, "unknown key '" + key + "' in " + where);
    }
}

MethodType parse_method_type(const std::string& s) {
    if (s == "axn") return MethodType::axn;
    if (s == "rnr") return MethodType::rnr;
    if (s == "tour") return MethodType::tour;
    if (s == "exact") return MethodType::exact;
    throw Error(Errc::config, "unknown method type '" + s + "'");
}

std::string to_string(MethodType t) {
    switch (t) {
        case MethodType::axn: return "axn";
        case MethodType::rnr: return "rnr";
        case MethodType::tour: return "tour";
        case MethodType::exact: return "exact";
    }
    return "?";
}

}  // namespace

ExperimentSpec parse_experiment_spec(const json& j) {
    try {
        reject_unknown(j, {"benchmark", "indexing", "methods", "budgets", "k_values", "n_test_queries", "seeds", "timers",
                           "workers"},
                       "experiment spec");
        ExperimentSpec s;
        const auto& b = j.at("benchmark");
        reject_unknown(b, {"synthetic", "files"}, "benchmark");
        if (b.contains("synthetic")) {
            const auto& sj = b["synthetic"];
            reject_unknown(sj, {"n_train", "n_test", "n_items", "dim", "rank", "sigma", "base_noise", "seed"},
                           "benchmark.synthetic");
            DeskBenchmarkSpec d;
            read_opt(sj, "n_train", d.n_train);
            read_opt(sj, "n_test", d.n_test);
            read_opt(sj, "n_items", d.n_items);
            read_opt(sj, "dim", d.dim);
            read_opt(sj, "rank", d.rank);
            read_opt(sj, "sigma", d.sigma);
            read_opt(sj, "base_noise", d.base_noise);
            read_opt(sj, "seed", d.seed);
            s.synthetic = d;
            s.n_test_queries = d.n_test;
        }
        if (b.contains("files")) {
            const auto& fj = b["files"];
            reject_unknown(fj, {"items", "queries", "scorer", "query_ids", "gold_cache", "base_items", "base_queries"},
                           "benchmark.files");
            FileCorpusSpec f;
            f.items = fj.at("items").get<std::string>();
            f.queries = fj.at("queries").get<std::string>();
            f.scorer = fj.at("scorer").get<std::string>();
            read_opt(fj, "query_ids", f.query_ids);
            if (fj.contains("gold_cache")) f.gold_cache = fj["gold_cache"].get<std::string>();
            if (fj.contains("base_items")) f.base_items = fj["base_items"].get<std::string>();
            if (fj.contains("base_queries")) f.base_queries = fj["base_queries"].get<std::string>();
            s.files = f;
        }
        if (j.contains("indexing")) {
            const auto& ij = j["indexing"];
            reject_unknown(ij, {"items", "strategy", "kd", "mf"}, "indexing");
            if (ij.contains("items")) s.indexing.items = parse_item_source(ij["items"].get<std::string>());
            if (ij.contains("strategy")) s.indexing.strategy = parse_strategy(ij["strategy"].get<std::string>());
            read_opt(ij, "kd", s.indexing.k_d);
            if (ij.contains("mf")) {
                const auto& mj = ij["mf"];
                reject_unknown(mj, {"dim", "lr", "epochs", "batch_size", "optimizer", "weight_decay", "max_wall_seconds"},
                               "indexing.mf");
                read_opt(mj, "lr", s.indexing.mf.learning_rate);
                read_opt(mj, "epochs", s.indexing.mf.epochs);
                read_opt(mj, "batch_size", s.indexing.mf.batch_size);
                read_opt(mj, "weight_decay", s.indexing.mf.weight_decay);
                read_opt(mj, "max_wall_seconds", s.indexing.mf.max_wall_seconds);
                if (mj.contains("optimizer"))
                    s.indexing.mf.optimizer = mj["optimizer"] == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
            }
        }
        if (s.synthetic) s.indexing.mf.dim = s.synthetic->dim;
        for (const auto& mj : j.at("methods")) {
            reject_unknown(mj, {"name", "type", "rounds", "k_s", "lambda", "init", "shortlist", "pinv_tolerance", "seed",
                                "variant", "lr", "temperature"},
                           "method");
            MethodSpec m;
            m.type = parse_method_type(mj.at("type").get<std::string>());
            m.name = mj.value("name", to_string(m.type));
            read_opt(mj, "rounds", m.axn.rounds);
            read_opt(mj, "k_s", m.axn.k_s);
            read_opt(mj, "lambda", m.axn.lambda);
            if (mj.contains("init")) m.axn.init = parse_init_policy(mj["init"].get<std::string>());
            read_opt(mj, "shortlist", m.axn.shortlist_size);
            read_opt(mj, "pinv_tolerance", m.axn.pinv_tolerance);
            read_opt(mj, "seed", m.axn.seed);
            if (mj.contains("variant")) {
                const auto v = mj["variant"].get<std::string>();
                if (v != "mse" && v != "ce") throw Error(Errc::config, "TOUR variant must be mse or ce");
                m.tour_variant = v == "mse" ? TourVariant::mse : TourVariant::ce;
            }
            m.tour_learning_rate = mj.value("lr", default_tour_learning_rate(m.tour_variant));
            read_opt(mj, "temperature", m.tour_temperature);
            if (!(m.tour_temperature > 0)) throw Error(Errc::config, "temperature must be > 0");
            s.methods.push_back(m);
        }
        s.budgets = j.at("budgets").get<std::vector<std::size_t>>();
        s.k_values = j.at("k_values").get<std::vector<std::size_t>>();
        read_opt(j, "n_test_queries", s.n_test_queries);
        read_opt(j, "seeds", s.seeds);
        read_opt(j, "timers", s.timers);
        read_opt(j, "workers", s.workers);
        s.validate();
        return s;
    } catch (const json::exception& e) {
        throw Error(Errc::config, std::string("experiment spec: ") + e.what());
    }
}

json to_json(const ExperimentSpec& s) {
    json j;
    if (s.synthetic) {
        const auto& d = *s.synthetic;
        j["benchmark"]["synthetic"] = {{"n_train", d.n_train}, {"n_test", d.n_test}, {"n_items", d.n_items},
                                       {"dim", d.dim},         {"rank", d.rank},     {"sigma", d.sigma},
                                       {"base_noise", d.base_noise}, {"seed", d.seed}};
    }
    if (s.files) {
        j["benchmark"]["files"] = {{"items", s.files->items.string()},
                                   {"queries", s.files->queries.string()},
                                   {"scorer", s.files->scorer},
                                   {"query_ids", s.files->query_ids}};
        if (s.files->gold_cache) j["benchmark"]["files"]["gold_cache"] = s.files->gold_cache->string();
        if (s.files->base_items) j["benchmark"]["files"]["base_items"] = s.files->base_items->string();
        if (s.files->base_queries) j["benchmark"]["files"]["base_queries"] = s.files->base_queries->string();
    }
    j["indexing"] = {{"items", to_string(s.indexing.items)},
                     {"strategy", to_string(s.indexing.strategy)},
                     {"kd", s.indexing.k_d},
                     {"mf",
                      {{"lr", s.indexing.mf.learning_rate},
                       {"epochs", s.indexing.mf.epochs},
                       {"batch_size", s.indexing.mf.batch_size},
                       {"weight_decay", s.indexing.mf.weight_decay},
                       {"optimizer", s.indexing.mf.optimizer == OptimizerKind::adam ? "adam" : "sgd"}}}};
    if (std::isfinite(s.indexing.mf.max_wall_seconds))
        j["indexing"]["mf"]["max_wall_seconds"] = s.indexing.mf.max_wall_seconds;
    j["methods"] = json::array();
    for (const auto& m : s.methods) {
        json mj{{"name", m.name},
                {"type", to_string(m.type)},
                {"rounds", m.axn.rounds},
                {"k_s", m.axn.k_s},
                {"lambda", m.axn.lambda},
                {"init", to_string(m.axn.init)},
                {"shortlist", m.axn.shortlist_size},
                {"pinv_tolerance", m.axn.pinv_tolerance},
                {"seed", m.axn.seed}};
        if (m.type == MethodType::tour) {
            mj["variant"] = m.tour_variant == TourVariant::mse ? "mse" : "ce";
            mj["lr"] = m.tour_learning_rate;
            mj["temperature"] = m.tour_temperature;
        }
        j["methods"].push_back(mj);
    }
    j["budgets"] = s.budgets;
    j["k_values"] = s.k_values;
    j["n_test_queries"] = s.n_test_queries;
    j["seeds"] = s.seeds;
    j["timers"] = s.timers;
    j["workers"] = s.workers;
    return j;
}

void RecallAccumulator::kahan(double& sum, double& comp, double x) {
    // Neumaier's variant of compensated summation.
    const double t = sum + x;
    if (std::abs(sum) >= std::abs(x))
        comp += (sum - t) + x;
    else
        comp += (x - t) + sum;
    sum = t;
}

void RecallAccumulator::add(double x) {
    ++n_;
    kahan(sum_, sum_c_, x);
    kahan(sq_, sq_c_, x * x);
}

double RecallAccumulator::mean() const { return n_ ? (sum_ + sum_c_) / static_cast<double>(n_) : 0.0; }

double RecallAccumulator::stderr_of_mean() const {
    if (n_ < 2) return 0.0;
    const double n = static_cast<double>(n_);
    const double mu = mean();
    const double var = std::max(0.0, ((sq_ + sq_c_) - n * mu * mu) / (n - 1.0));
    return std::sqrt(var / n);
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

/// Item embeddings and per-query parametric embeddings prepared for one seed.
struct IndexedCorpus {
    std::shared_ptr<const Scorer> scorer;
    std::shared_ptr<const EmbeddingMatrix> items;
    std::shared_ptr<const EmbeddingMatrix> query_embs;  // one row per test query
    std::vector<QueryId> query_ids;                     // scorer id per row
    std::shared_ptr<const EmbeddingMatrix> base_items;  // for ranking init, may be null
    std::shared_ptr<const EmbeddingMatrix> base_query_embs;
    std::optional<std::filesystem::path> gold_cache;
    std::map<std::string, double> seconds;
};

IndexedCorpus index_synthetic(const ExperimentSpec& spec, std::uint64_t seed) {
    IndexedCorpus c;
    DeskBenchmarkSpec d = *spec.synthetic;
    d.seed = d.seed + seed;
    auto t0 = std::chrono::steady_clock::now();
    const auto bench = make_desk_benchmark(d);
    c.seconds["embed"] = seconds_since(t0);
    c.scorer = bench.oracle.scorer;
    const auto test = bench.test_ids();
    c.query_ids.assign(test.begin(), test.begin() + static_cast<std::ptrdiff_t>(spec.n_test_queries));
    const auto test_rows = [&](const RowMatrix& all) {
        return std::make_shared<const EmbeddingMatrix>(
            RowMatrix(all.middleRows(static_cast<Eigen::Index>(d.n_train), static_cast<Eigen::Index>(spec.n_test_queries))),
            Role::query);
    };
    c.base_items = bench.base_items;
    c.base_query_embs = test_rows(bench.base_queries->data());

    switch (spec.indexing.items) {
        case ItemSource::base:
            c.items = bench.base_items;
            c.query_embs = c.base_query_embs;
            break;
        case ItemSource::true_factors:
            c.items = std::make_shared<const EmbeddingMatrix>(bench.padded_true_items());
            c.query_embs = test_rows(bench.padded_true_queries().data());
            break;
        case ItemSource::transductive:
        case ItemSource::inductive: {
            GBuildSpec gs;
            gs.strategy = spec.indexing.strategy;
            gs.k_d = spec.indexing.k_d;
            gs.seed = derive_seed(d.seed, 21);
            gs.base_queries = bench.base_queries.get();
            gs.base_items = bench.base_items.get();
            gs.n_train_queries = d.n_train;
            gs.workers = spec.workers;
            t0 = std::chrono::steady_clock::now();
            const auto g = build_sparse_matrix(gs, *bench.oracle.scorer);
            c.seconds["build_g"] = seconds_since(t0);
            MfHyperparams h = spec.indexing.mf;
            h.dim = d.dim;
            h.seed = derive_seed(d.seed, 22);
            t0 = std::chrono::steady_clock::now();
            if (spec.indexing.items == ItemSource::transductive) {
                const EmbeddingMatrix init_U(bench.base_queries->data().topRows(static_cast<Eigen::Index>(d.n_train)),
                                             Role::query);
                auto model = train_transductive(g, init_U, *bench.base_items, h);
                c.seconds["train"] = seconds_since(t0);
                t0 = std::chrono::steady_clock::now();
                c.items = std::make_shared<const EmbeddingMatrix>(embed_items(model));
                c.seconds["embed_items"] = seconds_since(t0);
                c.query_embs = c.base_query_embs;
            } else {
                auto model = train_inductive(g, bench.base_queries, bench.base_items, h);
                c.seconds["train"] = seconds_since(t0);
                t0 = std::chrono::steady_clock::now();
                c.items = std::make_shared<const EmbeddingMatrix>(embed_items(model));
                c.seconds["embed_items"] = seconds_since(t0);
                c.query_embs = std::make_shared<const EmbeddingMatrix>(embed_queries(model, *c.base_query_embs));
            }
            break;
        }
    }
    return c;
}

IndexedCorpus index_files(const ExperimentSpec& spec) {
    IndexedCorpus c;
    const auto& f = *spec.files;
    auto t0 = std::chrono::steady_clock::now();
    c.items = std::make_shared<const EmbeddingMatrix>(load_embeddings(f.items));
    auto queries = load_embeddings(f.queries);
    c.seconds["embed"] = seconds_since(t0);
    auto scorer = make_scorer(f.scorer);
    if (auto* ext = dynamic_cast<const ExternalScorer*>(scorer.get()))
        const_cast<ExternalScorer*>(ext)->set_n_items(c.items->rows());
    c.scorer = scorer;
    const std::size_t n = std::min(spec.n_test_queries, queries.rows());
    c.query_embs = std::make_shared<const EmbeddingMatrix>(RowMatrix(queries.data().topRows(static_cast<Eigen::Index>(n))),
                                                           Role::query);
    for (std::size_t j = 0; j < n; ++j) c.query_ids.push_back(f.query_ids.empty() ? j : f.query_ids.at(j));
    c.gold_cache = f.gold_cache;
    if (f.base_items && f.base_queries) {
        c.base_items = std::make_shared<const EmbeddingMatrix>(load_embeddings(*f.base_items));
        const auto bq = load_embeddings(*f.base_queries);
        if (bq.rows() < n || c.base_items->rows() != c.items->rows())
            throw Error(Errc::size_mismatch, "base embeddings do not align with the corpus");
        c.base_query_embs = std::make_shared<const EmbeddingMatrix>(
            RowMatrix(bq.data().topRows(static_cast<Eigen::Index>(n))), Role::query);
    }
    return c;
}

struct QueryOutcome {
    std::vector<double> recall;  // per k
    double calls = 0.0;
};

}  // namespace

RecallReport run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    const std::size_t k_max = *std::max_element(spec.k_values.begin(), spec.k_values.end());
    std::map<std::tuple<std::string, std::size_t, std::size_t>, std::pair<RecallAccumulator, RecallAccumulator>> acc;
    std::map<std::string, double> seconds;
    std::size_t n_queries = 0;

    const auto seeds = spec.files ? std::vector<std::uint64_t>{spec.seeds.front()} : spec.seeds;
    for (const auto seed : seeds) {
        const IndexedCorpus c = spec.files ? index_files(spec) : index_synthetic(spec, seed);
        for (const auto& [phase, s] : c.seconds) seconds[phase] += s / static_cast<double>(seeds.size());
        const std::size_t n_items = c.items->rows();
        const auto gold = make_gold(*c.scorer, c.query_ids, k_max, c.gold_cache, n_items, spec.workers);
        const std::size_t nq = c.query_ids.size();
        n_queries += nq;

        for (const auto& method : spec.methods) {
            std::vector<std::size_t> budgets = spec.budgets;
            if (method.type == MethodType::exact) budgets = {n_items};
            for (const std::size_t m : budgets) {
                std::vector<QueryOutcome> out(nq);
                parallel_for(nq, spec.workers, [&](std::size_t j) {
                    const QueryId q = c.query_ids[j];
                    const Vector u = c.query_embs->row(j).transpose();
                    SearchResult r;
                    switch (method.type) {
                        case MethodType::exact:
                            r.topk = brute_force_knn(*c.scorer, q, k_max, n_items);
                            r.calls_used = n_items;
                            break;
                        case MethodType::rnr:
                            r = rnr_search(*c.items, *c.scorer, q, u, m, k_max);
                            break;
                        case MethodType::axn: {
                            AxnConfig cfg = method.axn;
                            cfg.budget = m;
                            cfg.seed = derive_seed(method.axn.seed, seed);
                            std::vector<ItemId> ranking;
                            if (cfg.init == InitPolicy::precomputed_ranking) {
                                const Vector ub = c.base_query_embs->row(j).transpose();
                                ranking = dot_topk(ub, *c.base_items, std::max(m, cfg.shortlist_size)).ids();
                            }
                            r = axn_search(cfg, *c.items, *c.scorer, q, k_max, u, ranking);
                            break;
                        }
                        case MethodType::tour: {
                            TourConfig tc;
                            tc.search = method.axn;
                            tc.search.budget = m;
                            tc.variant = method.tour_variant;
                            tc.learning_rate = method.tour_learning_rate;
                            tc.temperature = method.tour_temperature;
                            r = tour_search(tc, *c.items, *c.scorer, q, k_max, u);
                            break;
                        }
                    }
                    out[j].calls = static_cast<double>(r.calls_used);
                    const auto& g = gold.at(q);
                    for (auto k : spec.k_values) {
                        const auto gk = TopKList::from_candidates(
                            {g.items().begin(), g.items().begin() + static_cast<std::ptrdiff_t>(std::min(k, g.size()))}, k);
                        const auto rk = TopKList::from_candidates(r.topk.items(), k);
                        out[j].recall.push_back(topk_recall_at_m(gk, rk));
                    }
                });
                for (std::size_t kk = 0; kk < spec.k_values.size(); ++kk) {
                    auto& [rec, calls] = acc[{method.name, spec.k_values[kk], m}];
                    for (const auto& o : out) {
                        rec.add(o.recall[kk]);
                        calls.add(o.calls);
                    }
                }
            }
        }
    }

    RecallReport report;
    report.n_queries = n_queries;
    double total = 0.0;
    for (const auto& [_, s] : seconds) total += s;
    if (spec.timers) report.index_seconds = seconds;
    for (const auto& [key, a] : acc) {
        const auto& [name, k, m] = key;
        report.rows.push_back({name, k, m, a.first.mean(), a.first.stderr_of_mean(), a.second.mean(),
                               spec.timers ? total : 0.0});
    }
    return report;
}

json to_json(const RecallReport& r) {
    json rows = json::array();
    double total = 0.0;
    for (const auto& row : r.rows) {
        rows.push_back({{"method", row.method},
                        {"k", row.k},
                        {"m", row.m},
                        {"recall_mean", row.recall_mean},
                        {"recall_stderr", row.recall_stderr},
                        {"calls_used", row.calls_used}});
        total = row.index_seconds_total;
    }
    json timing{{"index_seconds", r.index_seconds}, {"index_seconds_total", total}};
    json j{{"n_queries", r.n_queries}, {"rows", rows}, {"timing", timing}};
    if (!r.provenance.is_null()) j["provenance"] = r.provenance;
    return j;
}

void emit_plotdata(const RecallReport& report, const std::filesystem::path& path) {
    auto rows = report.rows;
    std::sort(rows.begin(), rows.end(), [](const RecallRow& a, const RecallRow& b) {
        return std::tie(a.method, a.k, a.m) < std::tie(b.method, b.k, b.m);
    });
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    {
        std::ofstream out(path);
        if (!out) throw Error(Errc::io, "cannot write " + path.string());
        out.precision(17);
        out << "method,k,m,recall_mean,recall_stderr,calls_used,index_seconds_total\n";
        for (const auto& r : rows)
            out << r.method << ',' << r.k << ',' << r.m << ',' << r.recall_mean << ',' << r.recall_stderr << ','
                << r.calls_used << ',' << r.index_seconds_total << '\n';
        if (!out) throw Error(Errc::io, "write failed for " + path.string());
    }
    RecallReport sorted = report;
    sorted.rows = rows;
    auto json_path = path;
    json_path.replace_extension(".json");
    std::ofstream out(json_path);
    if (!out) throw Error(Errc::io, "cannot write " + json_path.string());
    out << to_json(sorted).dump(2) << '\n';
    if (!out) throw Error(Errc::io, "write failed for " + json_path.string());
}

std::vector<RecallRow> read_plotdata_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    std::vector<RecallRow> rows;
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::vector<std::string> cells;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (cells.size() != 7) throw Error(Errc::format, path.string() + ": expected 7 columns");
        rows.push_back({cells[0], std::stoull(cells[1]), std::stoull(cells[2]), std::stod(cells[3]), std::stod(cells[4]),
                        std::stod(cells[5]), std::stod(cells[6])});
    }
    return rows;
}

}  // namespace axn
