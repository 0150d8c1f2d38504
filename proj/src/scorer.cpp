#include "axn/scorer.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <fstream>
#include <numeric>
#include <unordered_set>

#include <fcntl.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "axn/random.hpp"

namespace axn {

using nlohmann::json;

ScoringSession::ScoringSession(const Scorer& scorer, QueryId query, std::size_t budget, std::size_t batch_size,
                               bool keep_log)
    : scorer_(&scorer), query_(query), batch_size_(std::max<std::size_t>(1, batch_size)) {
    ledger_.budget = budget;
    ledger_.keep_log = keep_log;
}

std::optional<double> ScoringSession::cached(ItemId item) const {
    auto it = cache_.find(item);
    if (it == cache_.end()) return std::nullopt;
    return it->second;
}

std::vector<double> ScoringSession::score(std::span<const ItemId> items) {
    std::vector<ItemId> fresh;
    std::unordered_set<ItemId> pending;
    for (ItemId i : items) {
        if (i >= scorer_->n_items() && scorer_->n_items() != 0)
            throw Error(Errc::invalid_spec, "item id " + std::to_string(i) + " out of range");
        if (!cache_.contains(i) && pending.insert(i).second) fresh.push_back(i);
    }
    if (fresh.size() > ledger_.remaining())
        throw Error(Errc::budget_exhausted, "query " + std::to_string(query_) + " needs " +
                                                std::to_string(fresh.size()) + " calls, " +
                                                std::to_string(ledger_.remaining()) + " remain");
    for (std::size_t start = 0; start < fresh.size(); start += batch_size_) {
        const auto chunk =
            std::span<const ItemId>(fresh).subspan(start, std::min(batch_size_, fresh.size() - start));
        const auto scores = scorer_->score_batch(query_, chunk);
        if (scores.size() != chunk.size())
            throw Error(Errc::backend_failure, "backend returned " + std::to_string(scores.size()) +
                                                   " scores for " + std::to_string(chunk.size()) + " items");
        for (std::size_t j = 0; j < chunk.size(); ++j) {
            if (!std::isfinite(scores[j])) throw Error(Errc::backend_failure, "backend returned a non-finite score");
        }
        for (std::size_t j = 0; j < chunk.size(); ++j) {
            cache_.emplace(chunk[j], scores[j]);
            if (ledger_.keep_log) ledger_.log.emplace_back(query_, chunk[j]);
        }
        ledger_.used += chunk.size();
    }
    std::vector<double> out;
    out.reserve(items.size());
    for (ItemId i : items) out.push_back(cache_.at(i));
    return out;
}

ScoreNormalizer fit_normalizer(std::span<const double> ce_scores, std::span<const double> ref_scores) {
    auto moments = [](std::span<const double> xs, const char* what) {
        if (xs.size() < 2) throw Error(Errc::degenerate_distribution, std::string(what) + ": need at least 2 scores");
        const double mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
        double ss = 0.0;
        for (double x : xs) ss += (x - mean) * (x - mean);
        const double sd = std::sqrt(ss / static_cast<double>(xs.size()));
        if (!(sd > 0.0) || !std::isfinite(sd))
            throw Error(Errc::degenerate_distribution, std::string(what) + ": zero variance");
        return std::pair{mean, sd};
    };
    const auto [ce_mean, ce_sd] = moments(ce_scores, "ce scores");
    const auto [ref_mean, ref_sd] = moments(ref_scores, "reference scores");
    ScoreNormalizer n;
    n.beta = ref_sd / ce_sd;
    n.alpha = ce_mean - ref_mean / n.beta;
    return n;
}

DenseOracleScorer::DenseOracleScorer(RowMatrix scores, std::string name)
    : scores_(std::move(scores)), name_(std::move(name)) {
    if (!scores_.allFinite()) throw Error(Errc::invalid_matrix, "oracle matrix contains non-finite values");
}

std::vector<double> DenseOracleScorer::score_batch(QueryId q, std::span<const ItemId> items) const {
    if (q >= n_queries()) throw Error(Errc::backend_failure, "query " + std::to_string(q) + " not in oracle");
    std::vector<double> out;
    out.reserve(items.size());
    for (ItemId i : items) {
        if (i >= n_items()) throw Error(Errc::backend_failure, "item " + std::to_string(i) + " not in oracle");
        out.push_back(scores_(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(i)));
    }
    return out;
}

SparseOracleScorer::SparseOracleScorer(SparseScoreMatrix g, std::string name)
    : g_(std::move(g)), name_(std::move(name)) {}

std::vector<double> SparseOracleScorer::score_batch(QueryId q, std::span<const ItemId> items) const {
    std::vector<double> out;
    out.reserve(items.size());
    for (ItemId i : items) {
        double s;
        if (!g_.find(q, i, s))
            throw Error(Errc::backend_failure,
                        "pair (" + std::to_string(q) + ", " + std::to_string(i) + ") not observed in oracle");
        out.push_back(s);
    }
    return out;
}

SyntheticScorer::SyntheticScorer(SyntheticOracleSpec spec, RowMatrix true_queries, RowMatrix true_items)
    : spec_(spec),
      true_queries_(std::move(true_queries)),
      true_items_(std::move(true_items)),
      noise_seed_(derive_seed(spec.seed, 3)) {}

std::vector<double> SyntheticScorer::score_batch(QueryId q, std::span<const ItemId> items) const {
    if (q >= spec_.n_queries) throw Error(Errc::backend_failure, "query " + std::to_string(q) + " out of range");
    std::vector<double> out;
    out.reserve(items.size());
    const auto u = true_queries_.row(static_cast<Eigen::Index>(q));
    for (ItemId i : items) {
        if (i >= spec_.n_items) throw Error(Errc::backend_failure, "item " + std::to_string(i) + " out of range");
        double s = u.dot(true_items_.row(static_cast<Eigen::Index>(i)));
        if (spec_.sigma > 0.0) s += spec_.sigma * keyed_normal(noise_seed_, q, i);
        out.push_back(s);
    }
    return out;
}

std::string SyntheticScorer::descriptor() const {
    return "synth:q" + std::to_string(spec_.n_queries) + ",i" + std::to_string(spec_.n_items) + ",r" +
           std::to_string(spec_.rank) + ",sigma" + json(spec_.sigma).dump() + ",seed" + std::to_string(spec_.seed);
}

SyntheticOracle make_synthetic_oracle(const SyntheticOracleSpec& spec) {
    if (spec.n_queries == 0 || spec.n_items == 0) throw Error(Errc::invalid_spec, "synthetic oracle needs queries and items");
    if (spec.rank == 0 || spec.rank > std::min(spec.n_queries, spec.n_items))
        throw Error(Errc::invalid_spec, "rank must be in [1, min(n_queries, n_items)]");
    if (!(spec.sigma >= 0.0) || !std::isfinite(spec.sigma)) throw Error(Errc::invalid_spec, "sigma must be >= 0");
    auto draw = [&](std::size_t rows, std::uint64_t stream) {
        Rng rng(derive_seed(spec.seed, stream));
        RowMatrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(spec.rank));
        for (Eigen::Index j = 0; j < m.size(); ++j) m.data()[j] = normal_draw(rng);
        return m;
    };
    RowMatrix uq = draw(spec.n_queries, 1);
    RowMatrix vi = draw(spec.n_items, 2);
    auto scorer = std::make_shared<const SyntheticScorer>(spec, uq, vi);
    return SyntheticOracle{std::move(scorer), EmbeddingMatrix(std::move(uq), Role::query),
                           EmbeddingMatrix(std::move(vi), Role::item)};
}

std::vector<double> NormalizedScorer::score_batch(QueryId q, std::span<const ItemId> items) const {
    auto scores = inner_->score_batch(q, items);
    for (double& s : scores) s = normalizer_.apply(s);
    return scores;
}

std::string NormalizedScorer::descriptor() const {
    return inner_->descriptor() + "|norm(" + json(normalizer_.alpha).dump() + "," + json(normalizer_.beta).dump() +
           ")";
}

namespace {

void write_all(int fd, const std::string& data) {
    std::size_t off = 0;
    while (off < data.size()) {
        const ssize_t n = ::write(fd, data.data() + off, data.size() - off);
        if (n < 0) {
            if (errno == EINTR) continue;
            throw Error(Errc::backend_failure, "write to scorer process failed");
        }
        off += static_cast<std::size_t>(n);
    }
}

// Returns false on EOF before a full line.
bool read_line(int fd, std::string& buffer, std::string& line) {
    for (;;) {
        if (auto nl = buffer.find('\n'); nl != std::string::npos) {
            line = buffer.substr(0, nl);
            buffer.erase(0, nl + 1);
            return true;
        }
        char chunk[4096];
        const ssize_t n = ::read(fd, chunk, sizeof chunk);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        if (n == 0) return false;
        buffer.append(chunk, static_cast<std::size_t>(n));
    }
}

}  // namespace

ExternalScorer::ExternalScorer(const std::string& command, int protocol_version) {
    // A dead child must surface as backend-failure, not kill us on write.
    std::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2], out_pipe[2];
    if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw Error(Errc::spawn_failure, "pipe failed");
    if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
        ::close(in_pipe[0]);
        ::close(in_pipe[1]);
        throw Error(Errc::spawn_failure, "pipe failed");
    }
    const pid_t pid = ::fork();
    if (pid < 0) {
        for (int fd : {in_pipe[0], in_pipe[1], out_pipe[0], out_pipe[1]}) ::close(fd);
        throw Error(Errc::spawn_failure, "fork failed");
    }
    if (pid == 0) {
        ::dup2(in_pipe[0], STDIN_FILENO);
        ::dup2(out_pipe[1], STDOUT_FILENO);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];

    std::string reply;
    try {
        write_all(to_child_, json{{"op", "hello"}, {"version", protocol_version}}.dump() + "\n");
    } catch (const Error&) {
        shutdown();
        throw Error(Errc::spawn_failure, "scorer process '" + command + "' did not accept input");
    }
    if (!read_line(from_child_, read_buffer_, reply)) {
        shutdown();
        throw Error(Errc::spawn_failure, "scorer process '" + command + "' exited before handshake");
    }
    json hello;
    try {
        hello = json::parse(reply);
    } catch (const json::exception&) {
        shutdown();
        throw Error(Errc::handshake_mismatch, "malformed handshake reply: " + reply);
    }
    if (!hello.is_object() || hello.value("op", "") != "hello" || !hello.contains("version") ||
        !hello["version"].is_number_integer() || hello["version"].get<int>() != protocol_version) {
        shutdown();
        throw Error(Errc::handshake_mismatch, "expected protocol version " + std::to_string(protocol_version) +
                                                  ", got: " + reply);
    }
    name_ = hello.contains("name") && hello["name"].is_string() ? hello["name"].get<std::string>() : command;
}

ExternalScorer::~ExternalScorer() { shutdown(); }

void ExternalScorer::shutdown() noexcept {
    if (to_child_ >= 0) {
        if (!dead_) {
            try {
                write_all(to_child_, R"({"op":"shutdown"})" "\n");
            } catch (...) {
            }
        }
        ::close(to_child_);
        to_child_ = -1;
    }
    if (from_child_ >= 0) {
        ::close(from_child_);
        from_child_ = -1;
    }
    if (pid_ > 0) {
        int status = 0;
        while (::waitpid(pid_, &status, 0) < 0 && errno == EINTR) {
        }
        pid_ = -1;
    }
    dead_ = true;
}

std::string ExternalScorer::request(const std::string& line) const {
    if (dead_) throw Error(Errc::backend_failure, "scorer process is no longer running");
    std::string reply;
    try {
        write_all(to_child_, line);
    } catch (const Error&) {
        dead_ = true;
        throw;
    }
    if (!read_line(from_child_, read_buffer_, reply)) {
        dead_ = true;
        throw Error(Errc::backend_failure, "scorer process closed its output");
    }
    return reply;
}

std::vector<double> ExternalScorer::score_batch(QueryId q, std::span<const ItemId> items) const {
    std::lock_guard lock(mutex_);
    json req{{"op", "score"}, {"query_id", q}, {"item_ids", std::vector<ItemId>(items.begin(), items.end())}};
    const std::string reply = request(req.dump() + "\n");
    try {
        const json r = json::parse(reply);
        if (!r.is_object() || r.value("op", "") != "score" || !r.contains("scores") || !r["scores"].is_array())
            throw Error(Errc::backend_failure, "malformed score reply: " + reply);
        const auto& arr = r["scores"];
        if (arr.size() != items.size())
            throw Error(Errc::backend_failure, "score reply has " + std::to_string(arr.size()) + " entries, expected " +
                                                   std::to_string(items.size()));
        std::vector<double> out;
        out.reserve(arr.size());
        for (const auto& v : arr) {
            if (!v.is_number()) throw Error(Errc::backend_failure, "non-numeric score in reply");
            out.push_back(v.get<double>());
        }
        return out;
    } catch (const json::exception&) {
        throw Error(Errc::backend_failure, "malformed score reply: " + reply);
    }
}

SyntheticOracleSpec read_synthetic_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
        SyntheticOracleSpec s;
        for (const auto& [key, _] : j.items()) {
            if (key != "n_queries" && key != "n_items" && key != "rank" && key != "sigma" && key != "seed")
                throw Error(Errc::invalid_spec, path.string() + ": unknown key '" + key + "'");
        }
        s.n_queries = j.at("n_queries").get<std::size_t>();
        s.n_items = j.at("n_items").get<std::size_t>();
        s.rank = j.at("rank").get<std::size_t>();
        s.sigma = j.value("sigma", 0.0);
        s.seed = j.value("seed", std::uint64_t{0});
        return s;
    } catch (const json::exception& e) {
        throw Error(Errc::invalid_spec, path.string() + ": " + e.what());
    }
}

void write_synthetic_spec(const SyntheticOracleSpec& spec, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
    out << json{{"n_queries", spec.n_queries},
                {"n_items", spec.n_items},
                {"rank", spec.rank},
                {"sigma", spec.sigma},
                {"seed", spec.seed}}
               .dump(2)
        << '\n';
}

std::shared_ptr<const Scorer> make_scorer(const std::string& backend_spec) {
    const auto colon = backend_spec.find(':');
    if (colon == std::string::npos) throw Error(Errc::config, "scorer spec needs a kind prefix: " + backend_spec);
    const std::string kind = backend_spec.substr(0, colon);
    const std::string arg = backend_spec.substr(colon + 1);
    if (kind == "oracle") {
        const auto magic = peek_magic(arg);
        if (magic == "AXNE") {
            auto m = load_embeddings(arg);
            return std::make_shared<DenseOracleScorer>(m.data(), backend_spec);
        }
        if (magic == "AXNG") return std::make_shared<SparseOracleScorer>(load_sparse(arg), backend_spec);
        throw Error(Errc::format, arg + ": not an embedding or sparse score file");
    }
    if (kind == "synth") return make_synthetic_oracle(read_synthetic_spec(arg)).scorer;
    if (kind == "exec") return external_scorer_connect(arg);
    throw Error(Errc::config, "unknown scorer kind '" + kind + "'");
}

}  // namespace axn
