#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "axn/evalharness.hpp"
#include "axn/random.hpp"
#include "cli_util.hpp"
#include "pipeline.hpp"

using namespace axn;
using namespace axn::cli;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::size_t g_workers = 1;

std::shared_ptr<const Scorer> open_scorer(const std::string& spec, std::size_t n_items) {
    auto s = make_scorer(spec);
    if (auto* ext = dynamic_cast<const ExternalScorer*>(s.get())) const_cast<ExternalScorer*>(ext)->set_n_items(n_items);
    return s;
}

std::vector<QueryId> read_id_list(const fs::path& path) {
    try {
        return read_json(path).get<std::vector<QueryId>>();
    } catch (const json::exception& e) {
        throw Error(Errc::config, path.string() + ": expected a JSON array of query ids");
    }
}

// synth-gen ---------------------------------------------------------------

struct SynthGenArgs {
    fs::path spec, out;
};

void synth_gen(const SynthGenArgs& a) {
    const json j = read_json(a.spec);
    DeskBenchmarkSpec d;
    std::size_t kd = 100, gold_k = 10;
    std::string strategy = "q-topk";
    try {
        for (const auto& [key, v] : j.items()) {
            if (key == "n_train") d.n_train = v;
            else if (key == "n_test") d.n_test = v;
            else if (key == "n_items") d.n_items = v;
            else if (key == "dim") d.dim = v;
            else if (key == "rank") d.rank = v;
            else if (key == "sigma") d.sigma = v;
            else if (key == "base_noise") d.base_noise = v;
            else if (key == "seed") d.seed = v;
            else if (key == "kd") kd = v;
            else if (key == "strategy") strategy = v;
            else if (key == "gold_k") gold_k = v;
            else throw Error(Errc::config, "unknown key '" + key + "' in synth spec");
        }
    } catch (const json::exception& e) {
        throw Error(Errc::config, std::string("synth spec: ") + e.what());
    }
    if (gold_k == 0 || gold_k > d.n_items) throw Error(Errc::config, "gold_k must lie in [1, n_items]");

    const auto bench = make_desk_benchmark(d);
    fs::create_directories(a.out);
    save_embeddings(*bench.base_queries, a.out / "base_queries.axne");
    save_embeddings(*bench.base_items, a.out / "base_items.axne");
    save_embeddings(bench.padded_true_queries(), a.out / "true_queries.axne");
    save_embeddings(bench.padded_true_items(), a.out / "true_items.axne");
    write_synthetic_spec(bench.oracle.scorer->spec(), a.out / "oracle.json");

    GBuildSpec gs;
    gs.strategy = parse_strategy(strategy);
    gs.k_d = kd;
    gs.seed = derive_seed(d.seed, 2);
    gs.base_queries = bench.base_queries.get();
    gs.base_items = bench.base_items.get();
    gs.n_train_queries = d.n_train;
    gs.workers = g_workers;
    save_sparse(build_sparse_matrix(gs, *bench.oracle.scorer), a.out / "g.axng");

    const auto test_ids = bench.test_ids();
    write_json(json(test_ids), a.out / "test_ids.json");
    make_gold(*bench.oracle.scorer, test_ids, gold_k, a.out / "gold.json", 0, g_workers);

    json spec = j;
    write_json(json{{"spec", spec},
                    {"files", {"base_queries.axne", "base_items.axne", "true_queries.axne", "true_items.axne",
                               "oracle.json", "g.axng", "test_ids.json", "gold.json"}},
                    {"provenance", provenance(spec, {{"seed", d.seed}},
                                              {{"g.axng", a.out / "g.axng"}, {"oracle.json", a.out / "oracle.json"}})}},
               a.out / "manifest.json");
}

// build-g -----------------------------------------------------------------

struct BuildGArgs {
    std::string strategy = "q-topk", scorer;
    std::size_t kd = 100, n_train = 0, normalize_queries = 0;
    std::uint64_t seed = 0;
    fs::path queries, items, out;
};

void build_g(const BuildGArgs& a) {
    const auto bq = load_embeddings(a.queries);
    const auto bi = load_embeddings(a.items);
    const auto scorer = open_scorer(a.scorer, bi.rows());
    GBuildSpec gs;
    gs.strategy = parse_strategy(a.strategy);
    gs.k_d = a.kd;
    gs.seed = a.seed;
    gs.base_queries = &bq;
    gs.base_items = &bi;
    gs.n_train_queries = a.n_train;
    gs.workers = g_workers;
    auto g = build_sparse_matrix(gs, *scorer);
    json normalizer = json::object();
    if (a.normalize_queries) {
        std::vector<double> ce, ref;
        for (const auto& e : g.entries())
            if (e.query < a.normalize_queries) {
                ce.push_back(e.score);
                ref.push_back(bq.row(e.query).dot(bi.row(e.item)));
            }
        const auto n = fit_normalizer(ce, ref);
        std::vector<ScoreEntry> mapped(g.entries().begin(), g.entries().end());
        for (auto& e : mapped) e.score = n.apply(e.score);
        g = SparseScoreMatrix(g.n_queries(), g.n_items(), std::move(mapped));
        normalizer = {{"alpha", n.alpha}, {"beta", n.beta}};
    }
    save_sparse(g, a.out);
    const auto c = coverage_stats(g);
    std::cout << json{{"nnz", g.nnz()},
                      {"min_per_item", c.min_per_item},
                      {"mean_per_item", c.mean_per_item},
                      {"max_per_item", c.max_per_item},
                      {"zero_fraction", c.zero_fraction},
                      {"normalizer", normalizer}}
                     .dump(2)
              << '\n';
}

// train-mf ----------------------------------------------------------------

struct TrainArgs {
    std::string kind = "trns", optimizer = "adam";
    fs::path g, init_q, init_i, out;
    MfHyperparams h;
    double max_wall = 0;
};

void train_mf(TrainArgs a) {
    const auto g = load_sparse(a.g);
    auto bq = std::make_shared<const EmbeddingMatrix>(load_embeddings(a.init_q));
    auto bi = std::make_shared<const EmbeddingMatrix>(load_embeddings(a.init_i));
    if (a.optimizer != "adam" && a.optimizer != "sgd") throw Error(Errc::config, "--optimizer must be adam or sgd");
    a.h.optimizer = a.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
    if (a.max_wall > 0) a.h.max_wall_seconds = a.max_wall;
    a.h.workers = g_workers;
    if (a.kind != "trns" && a.kind != "ind") throw Error(Errc::config, "--kind must be trns or ind");
    if (a.kind == "trns" && a.h.dim != bq->dim())
        throw Error(Errc::config, "--dim must match the init embedding width for trns");
    // Init files usually hold train and test queries; trns only trains the rows G covers.
    const auto trns_init = [&] {
        if (bq->rows() <= g.n_queries()) return *bq;
        return EmbeddingMatrix(bq->data().topRows(static_cast<Eigen::Index>(g.n_queries())), Role::query);
    };
    const MfModel m = a.kind == "trns" ? train_transductive(g, trns_init(), *bi, a.h) : train_inductive(g, bq, bi, a.h);
    save_model(m, a.out, a.h);
    log_stage("train_mf", "done", m.trace.seconds,
              "initial_loss=" + std::to_string(m.trace.initial_loss) + " best_epoch=" + std::to_string(m.trace.best_epoch) +
                  (m.trace.stopped_on_wall_clock ? " stopped_on_wall_clock=1" : ""));
}

// search ------------------------------------------------------------------

struct SearchArgs {
    fs::path items, queries, query_ids, out = "results.json";
    std::string scorer, init = "random", method = "axn", variant = "mse";
    std::size_t budget = 100, rounds = 5, k = 10, shortlist = 0, k_s = 0, query_offset = 0;
    double lambda = 0.0, pinv_tolerance = 1e-10, temperature = 1.0;
    std::optional<double> lr;
    std::uint64_t seed = 0;
};

std::map<QueryId, std::vector<ItemId>> read_rankings(const fs::path& path) {
    std::map<QueryId, std::vector<ItemId>> out;
    try {
        const json j = read_json(path);
        for (const auto& [key, ids] : j.items()) out[std::stoull(key)] = ids.get<std::vector<ItemId>>();
    } catch (const std::exception& e) {
        throw Error(Errc::config, path.string() + ": expected {\"<query id>\": [item ids...]}");
    }
    return out;
}

void search(const SearchArgs& a) {
    BatchSearchSpec b;
    b.method = parse_search_method(a.method);
    b.axn.budget = a.budget;
    b.axn.rounds = a.rounds;
    b.axn.k_s = a.k_s;
    b.axn.lambda = a.lambda;
    b.axn.shortlist_size = a.shortlist;
    b.axn.pinv_tolerance = a.pinv_tolerance;
    b.axn.seed = a.seed;
    std::map<QueryId, std::vector<ItemId>> rankings;
    if (a.init.rfind("ranking:", 0) == 0) {
        b.axn.init = InitPolicy::precomputed_ranking;
        rankings = read_rankings(a.init.substr(8));
    } else {
        b.axn.init = parse_init_policy(a.init);
    }
    b.axn.validate();
    if (a.variant != "mse" && a.variant != "ce") throw Error(Errc::config, "--variant must be mse or ce");
    b.tour_variant = a.variant == "ce" ? TourVariant::ce : TourVariant::mse;
    b.tour_learning_rate = a.lr.value_or(default_tour_learning_rate(b.tour_variant));
    b.tour_temperature = a.temperature;
    b.k = a.k;
    b.workers = g_workers;
    if (a.k == 0 || a.k > a.budget) throw Error(Errc::config, "--k must lie in [1, budget]");

    const auto scorer = make_scorer(a.scorer);
    const auto items = load_embeddings(a.items);
    if (auto* ext = dynamic_cast<const ExternalScorer*>(scorer.get()))
        const_cast<ExternalScorer*>(ext)->set_n_items(items.rows());
    std::optional<EmbeddingMatrix> q;
    std::vector<QueryId> ids;
    if (peek_magic(a.queries) == "AXNE") {
        q = load_embeddings(a.queries);
        if (!a.query_ids.empty()) {
            ids = read_id_list(a.query_ids);
        } else {
            for (std::size_t j = 0; j < q->rows(); ++j) ids.push_back(a.query_offset + j);
        }
    } else {
        ids = read_id_list(a.queries);
    }
    const json results = batch_search(b, items, *scorer, ids, q ? &*q : nullptr, rankings);
    json config{{"method", a.method}, {"budget", a.budget}, {"rounds", a.rounds}, {"k_s", a.k_s},
                {"lambda", a.lambda}, {"init", a.init},     {"shortlist", a.shortlist}, {"k", a.k},
                {"pinv_tolerance", a.pinv_tolerance}, {"scorer", a.scorer}};
    if (b.method == SearchMethod::tour)
        config.update({{"variant", a.variant}, {"lr", b.tour_learning_rate}, {"temperature", a.temperature}});
    std::vector<std::pair<std::string, fs::path>> files{{"items", a.items}, {"queries", a.queries}};
    write_json(json{{"config", config},
                    {"provenance", provenance(config, {{"seed", a.seed}}, files)},
                    {"queries", results}},
               a.out);
}

// eval --------------------------------------------------------------------

void eval(const fs::path& spec_path, const fs::path& out) {
    const json raw = read_json(spec_path);
    auto spec = parse_experiment_spec(raw);
    spec.workers = std::max(spec.workers, g_workers);
    auto report = run_experiment(spec);
    report.provenance = provenance(to_json(spec), json(spec.seeds), {{"spec", spec_path}});
    fs::create_directories(out);
    emit_plotdata(report, out / "report.csv");
}

// convert -----------------------------------------------------------------

struct ConvertArgs {
    fs::path in, out;
    std::string role = "query";
    std::size_t n_queries = 0, n_items = 0;
};

void convert(const ConvertArgs& a) {
    const std::string magic = peek_magic(a.in);
    if (magic == "AXNE") {
        export_embeddings_csv(load_embeddings(a.in), a.out);
    } else if (magic == "AXNG") {
        export_sparse_csv(load_sparse(a.in), a.out);
    } else if (a.out.extension() == ".axne") {
        if (a.role != "query" && a.role != "item") throw Error(Errc::config, "--role must be query or item");
        save_embeddings(import_embeddings_csv(a.in, a.role == "item" ? Role::item : Role::query), a.out);
    } else if (a.out.extension() == ".axng") {
        save_sparse(import_sparse_csv(a.in, a.n_queries, a.n_items), a.out);
    } else {
        throw Error(Errc::config, "cannot infer the conversion: binary input needs AXNE/AXNG, CSV output needs .axne or .axng");
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"axn: adaptive retrieval with a black-box scorer"};
    app.set_version_flag("--version", std::string("axn ") + kVersion);
    app.add_option("--workers", g_workers, "Cap on worker threads")->check(CLI::PositiveNumber);
    app.require_subcommand(1);

    SynthGenArgs sg;
    auto* c_synth = app.add_subcommand("synth-gen", "Materialize a synthetic benchmark");
    c_synth->add_option("--spec", sg.spec)->required()->check(CLI::ExistingFile);
    c_synth->add_option("--out", sg.out)->required();

    BuildGArgs bg;
    auto* c_build = app.add_subcommand("build-g", "Score a sparse sample of query/item pairs");
    c_build->add_option("--strategy", bg.strategy)->check(CLI::IsMember({"q-topk", "q-random", "i-topk"}));
    c_build->add_option("--kd", bg.kd)->check(CLI::PositiveNumber);
    c_build->add_option("--seed", bg.seed);
    c_build->add_option("--queries", bg.queries)->required()->check(CLI::ExistingFile);
    c_build->add_option("--items", bg.items)->required()->check(CLI::ExistingFile);
    c_build->add_option("--scorer", bg.scorer)->required();
    c_build->add_option("--out", bg.out)->required();
    c_build->add_option("--n-train", bg.n_train, "Train query count (default: all rows)");
    c_build->add_option("--normalize-queries", bg.normalize_queries,
                        "Fit a score normalizer on the first N queries");

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train-mf", "Factorize the sparse score matrix");
    c_train->add_option("--kind", tr.kind)->check(CLI::IsMember({"trns", "ind"}));
    c_train->add_option("--g", tr.g)->required()->check(CLI::ExistingFile);
    c_train->add_option("--init-q", tr.init_q)->required()->check(CLI::ExistingFile);
    c_train->add_option("--init-i", tr.init_i)->required()->check(CLI::ExistingFile);
    c_train->add_option("--dim", tr.h.dim);
    c_train->add_option("--lr", tr.h.learning_rate);
    c_train->add_option("--epochs", tr.h.epochs);
    c_train->add_option("--seed", tr.h.seed);
    c_train->add_option("--batch-size", tr.h.batch_size);
    c_train->add_option("--weight-decay", tr.h.weight_decay);
    c_train->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "sgd"}));
    c_train->add_option("--max-wall-seconds", tr.max_wall);
    c_train->add_option("--out", tr.out)->required();

    SearchArgs se;
    auto* c_search = app.add_subcommand("search", "Run adaptive retrieval for a batch of queries");
    c_search->add_option("--items", se.items)->required()->check(CLI::ExistingFile);
    c_search->add_option("--scorer", se.scorer)->required();
    c_search->add_option("--queries", se.queries, "Query embeddings (.axne) or a JSON list of query ids")
        ->required()
        ->check(CLI::ExistingFile);
    c_search->add_option("--query-ids", se.query_ids, "JSON list of scorer ids for the embedding rows")
        ->check(CLI::ExistingFile);
    c_search->add_option("--query-offset", se.query_offset, "Scorer id of the first embedding row");
    c_search->add_option("--method", se.method)->check(CLI::IsMember({"axn", "rnr", "tour"}));
    c_search->add_option("--budget", se.budget);
    c_search->add_option("--rounds", se.rounds);
    c_search->add_option("--k-s", se.k_s);
    c_search->add_option("--lambda", se.lambda);
    c_search->add_option("--init", se.init, "random, emb or ranking:<json file>");
    c_search->add_option("--shortlist", se.shortlist);
    c_search->add_option("--pinv-tolerance", se.pinv_tolerance);
    c_search->add_option("--k", se.k);
    c_search->add_option("--seed", se.seed);
    c_search->add_option("--variant", se.variant)->check(CLI::IsMember({"mse", "ce"}));
    c_search->add_option("--lr", se.lr);
    c_search->add_option("--temperature", se.temperature);
    c_search->add_option("--out", se.out);

    fs::path eval_spec, eval_out;
    auto* c_eval = app.add_subcommand("eval", "Run a recall experiment");
    c_eval->add_option("--spec", eval_spec)->required()->check(CLI::ExistingFile);
    c_eval->add_option("--out", eval_out)->required();

    PipelineOptions po;
    std::uint64_t pipe_seed = 0;
    auto* c_pipe = app.add_subcommand("pipeline", "Run every stage from a JSON config");
    c_pipe->add_option("--config", po.config)->required()->check(CLI::ExistingFile);
    c_pipe->add_option("--out", po.out)->required();
    c_pipe->add_flag("--force", po.force, "Rerun stages even when up to date");
    auto* seed_opt = c_pipe->add_option("--seed", pipe_seed, "Override the config seed");

    ConvertArgs cv;
    auto* c_conv = app.add_subcommand("convert", "Convert between CSV and binary files");
    c_conv->add_option("--in", cv.in)->required()->check(CLI::ExistingFile);
    c_conv->add_option("--out", cv.out)->required();
    c_conv->add_option("--role", cv.role, "Embedding role for CSV input")->check(CLI::IsMember({"query", "item"}));
    c_conv->add_option("--n-queries", cv.n_queries);
    c_conv->add_option("--n-items", cv.n_items);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (*c_synth) synth_gen(sg);
        else if (*c_build) build_g(bg);
        else if (*c_train) train_mf(tr);
        else if (*c_search) search(se);
        else if (*c_eval) eval(eval_spec, eval_out);
        else if (*c_conv) convert(cv);
        else if (*c_pipe) {
            if (*seed_opt) po.seed = pipe_seed;
            if (app.get_option("--workers")->count()) po.workers = g_workers;
            run_pipeline(po);
        }
    } catch (const Error& e) {
        std::cerr << "axn: " << e.what() << '\n';
        return exit_status(e.code());
    } catch (const std::exception& e) {
        std::cerr << "axn: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
