#include "pipeline.hpp"

#include <chrono>
#include <functional>
#include <set>

#include "axn/evalharness.hpp"
#include "axn/random.hpp"
#include "cli_util.hpp"

namespace axn::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
    if (!j.is_object()) throw Error(Errc::config, where + " must be a JSON object");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [key, _] : j.items())
        if (!ok.count(key)) throw Error(Errc::config, "unknown key '" + key + "' in " + where);
}

json section(const json& raw, const char* name) { return raw.contains(name) ? raw[name] : json::object(); }

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    return j.contains(key) ? j[key].get<T>() : fallback;
}

// Stage seeds: one top-level seed expanded per stage.
enum StageSeed : std::uint64_t { corpus_seed = 1, gbuild_seed = 2, mf_seed = 3, search_seed = 4, eval_seed = 5 };

json method_from_search(const json& s) {
    json m{{"name", s["method"]},
           {"type", s["method"]},
           {"rounds", s["rounds"]},
           {"k_s", s["k_s"]},
           {"lambda", s["lambda"]},
           {"init", s["init"]},
           {"shortlist", s["shortlist"]},
           {"pinv_tolerance", s["pinv_tolerance"]}};
    if (s["method"] == "tour") {
        m["variant"] = s["variant"];
        m["lr"] = s["lr"];
        m["temperature"] = s["temperature"];
    }
    return m;
}

/// Experiment spec for the eval stage; paths are placeholders until the stage runs.
json eval_experiment(const json& cfg, const fs::path& out, const std::string& scorer,
                     const std::vector<QueryId>& test_ids) {
    const auto& e = cfg["eval"];
    json methods = e["methods"];
    for (auto& m : methods) m["seed"] = derive_seed(cfg["seed"].get<std::uint64_t>(), eval_seed);
    return json{{"benchmark",
                 {{"files",
                   {{"items", (out / "model" / "items.axne").string()},
                    {"queries", (out / "search_queries.axne").string()},
                    {"base_items", (out / "corpus" / "base_items.axne").string()},
                    {"base_queries", (out / "corpus" / "test_base_queries.axne").string()},
                    {"scorer", scorer},
                    {"query_ids", test_ids},
                    {"gold_cache", (out / "gold.json").string()}}}}},
                {"methods", methods},
                {"budgets", e["budgets"]},
                {"k_values", e["k_values"]},
                {"n_test_queries", test_ids.size()},
                {"seeds", {derive_seed(cfg["seed"].get<std::uint64_t>(), eval_seed)}},
                {"workers", cfg["workers"]}};
}

struct Layout {
    fs::path out;
    fs::path base_queries, base_items, test_base_queries, oracle;
    fs::path g, coverage, model, items, search_queries, results, gold, report_csv, report_json;
    explicit Layout(const fs::path& o) : out(o) {
        base_queries = out / "corpus" / "base_queries.axne";
        base_items = out / "corpus" / "base_items.axne";
        test_base_queries = out / "corpus" / "test_base_queries.axne";
        oracle = out / "corpus" / "oracle.json";
        g = out / "g.axng";
        coverage = out / "coverage.json";
        model = out / "model";
        items = model / "items.axne";
        search_queries = out / "search_queries.axne";
        results = out / "results.json";
        gold = out / "gold.json";
        report_csv = out / "report.csv";
        report_json = out / "report.json";
    }
};

class StageRunner {
public:
    StageRunner(const fs::path& out, bool force) : stamps_(out / ".stamps"), force_(force) {}

    /// Runs `body` unless the stamp for `name` matches `key` and every output exists.
    void run(const std::string& name, const json& key_material, const std::vector<fs::path>& outputs,
             const std::function<void()>& body) {
        const std::string key = sha256_hex(json{{"version", kVersion}, {"stage", name}, {"key", key_material}}.dump());
        const fs::path stamp = stamps_ / (name + ".json");
        bool fresh = !force_ && fs::exists(stamp);
        if (fresh) {
            try {
                fresh = read_json(stamp).value("key", "") == key;
            } catch (const Error&) {
                fresh = false;
            }
        }
        for (const auto& p : outputs) fresh = fresh && fs::exists(p);
        if (fresh) {
            log_stage(name, "skipped");
            return;
        }
        fs::remove(stamp);
        log_stage(name, "started");
        const auto t0 = std::chrono::steady_clock::now();
        body();
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_json(json{{"key", key}}, stamp);
        log_stage(name, "done", s);
    }

private:
    fs::path stamps_;
    bool force_;
};

json hashes(const std::vector<fs::path>& files) {
    json j = json::array();
    for (const auto& f : files) j.push_back(sha256_file(f));
    return j;
}

}  // namespace

json normalize_pipeline_config(const json& raw, const fs::path& base_dir) {
    try {
        reject_unknown(raw, {"seed", "workers", "corpus", "scorer", "gbuild", "mf", "search", "eval"}, "pipeline config");
        json cfg;
        cfg["seed"] = get_or<std::uint64_t>(raw, "seed", 0);
        cfg["workers"] = get_or<std::size_t>(raw, "workers", 1);
        if (cfg["workers"].get<std::size_t>() == 0) throw Error(Errc::config, "workers must be >= 1");

        const json corpus = raw.contains("corpus") ? raw["corpus"] : json{{"synthetic", json::object()}};
        reject_unknown(corpus, {"synthetic", "files"}, "corpus");
        if (corpus.contains("synthetic") == corpus.contains("files"))
            throw Error(Errc::config, "corpus needs exactly one of 'synthetic' or 'files'");
        if (corpus.contains("synthetic")) {
            const auto& s = corpus["synthetic"];
            reject_unknown(s, {"n_train", "n_test", "n_items", "dim", "rank", "sigma", "base_noise"}, "corpus.synthetic");
            const DeskBenchmarkSpec d;
            cfg["corpus"]["synthetic"] = {{"n_train", get_or(s, "n_train", d.n_train)},
                                          {"n_test", get_or(s, "n_test", d.n_test)},
                                          {"n_items", get_or(s, "n_items", d.n_items)},
                                          {"dim", get_or(s, "dim", d.dim)},
                                          {"rank", get_or(s, "rank", d.rank)},
                                          {"sigma", get_or(s, "sigma", d.sigma)},
                                          {"base_noise", get_or(s, "base_noise", d.base_noise)}};
            const auto& c = cfg["corpus"]["synthetic"];
            if (c["n_train"] == 0 || c["n_test"] == 0 || c["n_items"] == 0 || c["dim"] == 0)
                throw Error(Errc::config, "corpus.synthetic sizes must be >= 1");
            if (c["rank"].get<std::size_t>() > c["dim"].get<std::size_t>())
                throw Error(Errc::config, "corpus.synthetic rank must not exceed dim");
        } else {
            const auto& f = corpus["files"];
            reject_unknown(f, {"queries", "items", "n_train"}, "corpus.files");
            const auto resolve = [&](const char* key) {
                const fs::path p = base_dir / f.at(key).get<std::string>();
                if (!fs::exists(p)) throw Error(Errc::config, std::string("corpus.files.") + key + " not found: " + p.string());
                return fs::absolute(p).lexically_normal().string();
            };
            cfg["corpus"]["files"] = {{"queries", resolve("queries")},
                                      {"items", resolve("items")},
                                      {"n_train", f.at("n_train").get<std::size_t>()}};
        }

        std::string scorer = get_or<std::string>(raw, "scorer", "");
        if (scorer.empty() && corpus.contains("files"))
            throw Error(Errc::config, "a file corpus needs an explicit scorer backend");
        if (!scorer.empty() && scorer.rfind("oracle:", 0) != 0 && scorer.rfind("synth:", 0) != 0 &&
            scorer.rfind("exec:", 0) != 0)
            throw Error(Errc::config, "scorer must be oracle:<file>, synth:<file> or exec:<command>");
        cfg["scorer"] = scorer;

        const json gb = section(raw, "gbuild");
        reject_unknown(gb, {"strategy", "kd", "normalize_queries"}, "gbuild");
        cfg["gbuild"] = {{"strategy", to_string(parse_strategy(get_or<std::string>(gb, "strategy", "q-topk")))},
                         {"kd", get_or<std::size_t>(gb, "kd", 100)},
                         {"normalize_queries", get_or<std::size_t>(gb, "normalize_queries", 0)}};
        if (cfg["gbuild"]["kd"] == 0) throw Error(Errc::config, "gbuild.kd must be >= 1");

        const json mf = section(raw, "mf");
        reject_unknown(mf, {"kind", "lr", "epochs", "batch_size", "optimizer", "weight_decay", "max_wall_seconds"}, "mf");
        const MfHyperparams h;
        cfg["mf"] = {{"kind", get_or<std::string>(mf, "kind", "trns")},
                     {"lr", get_or(mf, "lr", h.learning_rate)},
                     {"epochs", get_or(mf, "epochs", h.epochs)},
                     {"batch_size", get_or(mf, "batch_size", h.batch_size)},
                     {"optimizer", get_or<std::string>(mf, "optimizer", "adam")},
                     {"weight_decay", get_or(mf, "weight_decay", h.weight_decay)},
                     {"max_wall_seconds", get_or(mf, "max_wall_seconds", 0.0)}};
        const std::string kind = cfg["mf"]["kind"];
        if (kind != "trns" && kind != "ind" && kind != "none")
            throw Error(Errc::config, "mf.kind must be trns, ind or none");
        if (cfg["mf"]["optimizer"] != "adam" && cfg["mf"]["optimizer"] != "sgd")
            throw Error(Errc::config, "mf.optimizer must be adam or sgd");
        MfHyperparams probe;
        probe.learning_rate = cfg["mf"]["lr"];
        probe.epochs = cfg["mf"]["epochs"];
        probe.batch_size = cfg["mf"]["batch_size"];
        probe.weight_decay = cfg["mf"]["weight_decay"];
        probe.validate();

        const json se = section(raw, "search");
        reject_unknown(se, {"method", "budget", "rounds", "k_s", "lambda", "init", "shortlist", "pinv_tolerance", "k",
                            "variant", "lr", "temperature"},
                       "search");
        const std::string method = get_or<std::string>(se, "method", "axn");
        parse_search_method(method);
        const std::string variant = get_or<std::string>(se, "variant", "mse");
        if (variant != "mse" && variant != "ce") throw Error(Errc::config, "search.variant must be mse or ce");
        const TourVariant tv = variant == "mse" ? TourVariant::mse : TourVariant::ce;
        cfg["search"] = {{"method", method},
                         {"budget", get_or<std::size_t>(se, "budget", 100)},
                         {"rounds", get_or<std::size_t>(se, "rounds", 5)},
                         {"k_s", get_or<std::size_t>(se, "k_s", 0)},
                         {"lambda", get_or(se, "lambda", 0.0)},
                         {"init", get_or<std::string>(se, "init", "emb")},
                         {"shortlist", get_or<std::size_t>(se, "shortlist", 0)},
                         {"pinv_tolerance", get_or(se, "pinv_tolerance", 1e-10)},
                         {"k", get_or<std::size_t>(se, "k", 10)},
                         {"variant", variant},
                         {"lr", get_or(se, "lr", default_tour_learning_rate(tv))},
                         {"temperature", get_or(se, "temperature", 1.0)}};
        AxnConfig a;
        a.budget = cfg["search"]["budget"];
        a.rounds = cfg["search"]["rounds"];
        a.k_s = cfg["search"]["k_s"];
        a.lambda = cfg["search"]["lambda"];
        a.init = parse_init_policy(cfg["search"]["init"]);
        a.shortlist_size = cfg["search"]["shortlist"];
        a.pinv_tolerance = cfg["search"]["pinv_tolerance"];
        a.validate();
        const std::size_t k = cfg["search"]["k"];
        if (k == 0 || k > a.budget) throw Error(Errc::config, "search.k must lie in [1, budget]");

        const json ev = section(raw, "eval");
        reject_unknown(ev, {"budgets", "k_values", "methods", "n_test_queries"}, "eval");
        json k_values = k == 1 ? json{1} : json{1, k};
        cfg["eval"] = {{"budgets", get_or(ev, "budgets", json{a.budget})},
                       {"k_values", get_or(ev, "k_values", k_values)},
                       {"methods", get_or(ev, "methods", json{method_from_search(cfg["search"]),
                                                              {{"name", "rnr"}, {"type", "rnr"}}})},
                       {"n_test_queries", get_or<std::size_t>(ev, "n_test_queries", 0)}};
        // Dry-run the experiment parser so every eval problem surfaces before any work.
        parse_experiment_spec(eval_experiment(cfg, "/", "synth:/", {0}));
        return cfg;
    } catch (const json::exception& e) {
        throw Error(Errc::config, std::string("pipeline config: ") + e.what());
    }
}

void run_pipeline(const PipelineOptions& opt) {
    json raw = read_json(opt.config);
    if (opt.seed) raw["seed"] = *opt.seed;
    if (opt.workers) raw["workers"] = *opt.workers;
    const json cfg = normalize_pipeline_config(raw, opt.config.parent_path());
    const std::uint64_t seed = cfg["seed"];
    const std::size_t workers = cfg["workers"];
    const Layout L(opt.out);
    fs::create_directories(L.out / "corpus");
    StageRunner stages(L.out, opt.force);

    // corpus
    std::size_t n_train = 0, n_total = 0;
    const bool synthetic = cfg["corpus"].contains("synthetic");
    if (synthetic) {
        const auto& s = cfg["corpus"]["synthetic"];
        n_train = s["n_train"];
        n_total = n_train + s["n_test"].get<std::size_t>();
    }
    stages.run("corpus", json{{"corpus", cfg["corpus"]}, {"seed", seed}},
               {L.base_queries, L.base_items, L.test_base_queries},
               [&] {
                   if (synthetic) {
                       const auto& s = cfg["corpus"]["synthetic"];
                       DeskBenchmarkSpec d;
                       d.n_train = s["n_train"];
                       d.n_test = s["n_test"];
                       d.n_items = s["n_items"];
                       d.dim = s["dim"];
                       d.rank = s["rank"];
                       d.sigma = s["sigma"];
                       d.base_noise = s["base_noise"];
                       d.seed = derive_seed(seed, corpus_seed);
                       const auto bench = make_desk_benchmark(d);
                       save_embeddings(*bench.base_queries, L.base_queries);
                       save_embeddings(*bench.base_items, L.base_items);
                       write_synthetic_spec(bench.oracle.scorer->spec(), L.oracle);
                   } else {
                       const auto& f = cfg["corpus"]["files"];
                       save_embeddings(load_embeddings(f["queries"].get<std::string>()), L.base_queries);
                       save_embeddings(load_embeddings(f["items"].get<std::string>()), L.base_items);
                   }
                   const auto q = load_embeddings(L.base_queries);
                   const std::size_t train = synthetic ? n_train : cfg["corpus"]["files"]["n_train"].get<std::size_t>();
                   if (train >= q.rows())
                       throw Error(Errc::invalid_spec, "corpus has no test queries after the first n_train rows");
                   save_embeddings(EmbeddingMatrix(q.data().bottomRows(static_cast<Eigen::Index>(q.rows() - train)),
                                                   Role::query),
                                   L.test_base_queries);
               });
    if (!synthetic) {
        n_train = cfg["corpus"]["files"]["n_train"];
        n_total = load_embeddings(L.base_queries).rows();
    }
    const std::string scorer_spec = cfg["scorer"].get<std::string>().empty()
                                        ? "synth:" + fs::absolute(L.oracle).lexically_normal().string()
                                        : cfg["scorer"].get<std::string>();
    // The scorer's identity enters every downstream stage key.
    json scorer_key = scorer_spec;
    if (scorer_spec.rfind("synth:", 0) == 0 || scorer_spec.rfind("oracle:", 0) == 0)
        scorer_key = sha256_file(scorer_spec.substr(scorer_spec.find(':') + 1));
    std::shared_ptr<const Scorer> scorer_holder;
    const auto scorer = [&]() -> const Scorer& {
        if (!scorer_holder) {
            scorer_holder = make_scorer(scorer_spec);
            if (auto* ext = dynamic_cast<const ExternalScorer*>(scorer_holder.get()))
                const_cast<ExternalScorer*>(ext)->set_n_items(load_embeddings(L.base_items).rows());
        }
        return *scorer_holder;
    };

    std::size_t n_test = n_total - n_train;
    const std::size_t cap = cfg["eval"]["n_test_queries"];
    if (cap) n_test = std::min(n_test, cap);
    std::vector<QueryId> test_ids(n_test);
    for (std::size_t j = 0; j < n_test; ++j) test_ids[j] = n_train + j;

    // build_g
    stages.run("build_g",
               json{{"gbuild", cfg["gbuild"]},
                    {"seed", seed},
                    {"inputs", hashes({L.base_queries, L.base_items})},
                    {"scorer", scorer_key}},
               {L.g, L.coverage}, [&] {
                   const auto bq = load_embeddings(L.base_queries);
                   const auto bi = load_embeddings(L.base_items);
                   GBuildSpec gs;
                   gs.strategy = parse_strategy(cfg["gbuild"]["strategy"]);
                   gs.k_d = cfg["gbuild"]["kd"];
                   gs.seed = derive_seed(seed, gbuild_seed);
                   gs.base_queries = &bq;
                   gs.base_items = &bi;
                   gs.n_train_queries = n_train;
                   gs.workers = workers;
                   auto g = build_sparse_matrix(gs, scorer());
                   json cov_extra = json::object();
                   const std::size_t nq = cfg["gbuild"]["normalize_queries"];
                   if (nq) {
                       std::vector<double> ce, ref;
                       for (const auto& e : g.entries())
                           if (e.query < nq) {
                               ce.push_back(e.score);
                               ref.push_back(bq.row(e.query).dot(bi.row(e.item)));
                           }
                       const auto n = fit_normalizer(ce, ref);
                       std::vector<ScoreEntry> mapped(g.entries().begin(), g.entries().end());
                       for (auto& e : mapped) e.score = n.apply(e.score);
                       g = SparseScoreMatrix(g.n_queries(), g.n_items(), std::move(mapped));
                       cov_extra = {{"alpha", n.alpha}, {"beta", n.beta}};
                   }
                   save_sparse(g, L.g);
                   const auto c = coverage_stats(g);
                   write_json(json{{"nnz", g.nnz()},
                                   {"min_per_item", c.min_per_item},
                                   {"mean_per_item", c.mean_per_item},
                                   {"max_per_item", c.max_per_item},
                                   {"zero_fraction", c.zero_fraction},
                                   {"normalizer", cov_extra}},
                              L.coverage);
               });

    // train_mf
    stages.run("train_mf",
               json{{"mf", cfg["mf"]}, {"seed", seed}, {"inputs", hashes({L.g, L.base_queries, L.base_items})}},
               {L.items, L.search_queries}, [&] {
                   const auto g = load_sparse(L.g);
                   auto bq = std::make_shared<const EmbeddingMatrix>(load_embeddings(L.base_queries));
                   auto bi = std::make_shared<const EmbeddingMatrix>(load_embeddings(L.base_items));
                   const auto test_base = load_embeddings(L.test_base_queries);
                   MfHyperparams h;
                   h.dim = bi->dim();
                   h.learning_rate = cfg["mf"]["lr"];
                   h.epochs = cfg["mf"]["epochs"];
                   h.batch_size = cfg["mf"]["batch_size"];
                   h.optimizer = cfg["mf"]["optimizer"] == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
                   h.weight_decay = cfg["mf"]["weight_decay"];
                   const double wall = cfg["mf"]["max_wall_seconds"];
                   if (wall > 0) h.max_wall_seconds = wall;
                   h.seed = derive_seed(seed, mf_seed);
                   const std::string kind = cfg["mf"]["kind"];
                   if (kind == "none") {
                       fs::create_directories(L.model);
                       save_embeddings(*bi, L.items);
                       save_embeddings(test_base, L.search_queries);
                       return;
                   }
                   const MfModel m =
                       kind == "trns"
                           ? train_transductive(
                                 g, EmbeddingMatrix(bq->data().topRows(static_cast<Eigen::Index>(n_train)), Role::query),
                                 *bi, h)
                           : train_inductive(g, bq, bi, h);
                   save_model(m, L.model, h);
                   save_embeddings(embed_queries(m, test_base), L.search_queries);
                   log_stage("train_mf", "trained", m.trace.seconds,
                             "initial_loss=" + std::to_string(m.trace.initial_loss) + " best_epoch=" +
                                 std::to_string(m.trace.best_epoch));
               });

    // search
    const auto& s = cfg["search"];
    stages.run("search",
               json{{"search", s},
                    {"seed", seed},
                    {"queries", test_ids},
                    {"inputs", hashes({L.items, L.search_queries, L.base_items, L.test_base_queries})},
                    {"scorer", scorer_key}},
               {L.results}, [&] {
                   BatchSearchSpec b;
                   b.method = parse_search_method(s["method"]);
                   b.axn.budget = s["budget"];
                   b.axn.rounds = s["rounds"];
                   b.axn.k_s = s["k_s"];
                   b.axn.lambda = s["lambda"];
                   b.axn.init = parse_init_policy(s["init"]);
                   b.axn.shortlist_size = s["shortlist"];
                   b.axn.pinv_tolerance = s["pinv_tolerance"];
                   b.axn.seed = derive_seed(seed, search_seed);
                   b.tour_variant = s["variant"] == "ce" ? TourVariant::ce : TourVariant::mse;
                   b.tour_learning_rate = s["lr"];
                   b.tour_temperature = s["temperature"];
                   b.k = s["k"];
                   b.workers = workers;
                   const auto items = load_embeddings(L.items);
                   const auto all_q = load_embeddings(L.search_queries);
                   const EmbeddingMatrix q(all_q.data().topRows(static_cast<Eigen::Index>(n_test)), Role::query);
                   std::map<QueryId, std::vector<ItemId>> rankings;
                   if (b.axn.init == InitPolicy::precomputed_ranking) {
                       const auto bi = load_embeddings(L.base_items);
                       const auto tb = load_embeddings(L.test_base_queries);
                       const std::size_t depth = std::max(b.axn.budget, b.axn.shortlist_size);
                       for (std::size_t j = 0; j < n_test; ++j)
                           rankings[test_ids[j]] = dot_topk(tb.row(j).transpose(), bi, depth).ids();
                   }
                   const json results = batch_search(b, items, scorer(), test_ids, &q, rankings);
                   write_json(json{{"config", s},
                                   {"provenance", provenance(cfg, {{"seed", seed}, {"search", b.axn.seed}},
                                                             {{"model/items.axne", L.items},
                                                              {"search_queries.axne", L.search_queries}})},
                                   {"queries", results}},
                              L.results);
               });

    // eval
    stages.run("eval",
               json{{"eval", cfg["eval"]},
                    {"seed", seed},
                    {"queries", test_ids},
                    {"inputs", hashes({L.items, L.search_queries, L.base_items, L.test_base_queries})},
                    {"scorer", scorer_key}},
               {L.report_csv, L.report_json, L.gold}, [&] {
                   auto spec = parse_experiment_spec(eval_experiment(cfg, L.out, scorer_spec, test_ids));
                   auto report = run_experiment(spec);
                   report.provenance = provenance(
                       cfg,
                       {{"seed", seed},
                        {"corpus", derive_seed(seed, corpus_seed)},
                        {"build_g", derive_seed(seed, gbuild_seed)},
                        {"train_mf", derive_seed(seed, mf_seed)},
                        {"search", derive_seed(seed, search_seed)},
                        {"eval", derive_seed(seed, eval_seed)}},
                       {{"corpus/base_queries.axne", L.base_queries},
                        {"corpus/base_items.axne", L.base_items},
                        {"g.axng", L.g},
                        {"model/items.axne", L.items},
                        {"search_queries.axne", L.search_queries},
                        {"gold.json", L.gold}});
                   emit_plotdata(report, L.report_csv);
               });
}

}  // namespace axn::cli
