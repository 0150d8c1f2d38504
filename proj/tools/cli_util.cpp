#include "cli_util.hpp"

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include <openssl/evp.h>

#include "axn/parallel.hpp"
#include "axn/random.hpp"

namespace axn::cli {

using nlohmann::json;

int exit_status(Errc code) noexcept {
    switch (code) {
        case Errc::config:
        case Errc::invalid_spec:
        case Errc::lambda_out_of_range:
            return 2;
        default:
            return 1;
    }
}

namespace {

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new(), EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1)
            throw Error(Errc::io, "SHA-256 unavailable");
    }
    void update(const char* data, std::size_t n) { EVP_DigestUpdate(ctx_.get(), data, n); }
    std::string hex() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), md, &len);
        std::ostringstream out;
        for (unsigned int j = 0; j < len; ++j) out << std::hex << std::setw(2) << std::setfill('0') << int(md[j]);
        return out.str();
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

}  // namespace

std::string sha256_hex(const std::string& bytes) {
    Sha256 h;
    h.update(bytes.data(), bytes.size());
    return h.hex();
}

std::string sha256_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    Sha256 h;
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        h.update(buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    return h.hex();
}

json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw Error(Errc::config, path.string() + ": " + e.what());
    }
}

void write_json(const json& j, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw Error(Errc::io, "cannot write " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

void log_stage(const std::string& stage, const std::string& status, double seconds, const std::string& detail) {
    std::ostringstream line;
    line << "axn stage=" << stage << " status=" << status;
    if (seconds >= 0) line << " seconds=" << std::fixed << std::setprecision(3) << seconds;
    if (!detail.empty()) line << ' ' << detail;
    std::cerr << line.str() << std::endl;
}

json provenance(const json& config, const json& seeds,
                const std::vector<std::pair<std::string, std::filesystem::path>>& files) {
    json hashes = json::object();
    for (const auto& [name, path] : files) hashes[name] = sha256_file(path);
    return json{{"tool", "axn"},
                {"version", kVersion},
                {"config_hash", sha256_hex(config.dump())},
                {"seeds", seeds},
                {"files", hashes}};
}

SearchMethod parse_search_method(const std::string& s) {
    if (s == "axn") return SearchMethod::axn;
    if (s == "rnr") return SearchMethod::rnr;
    if (s == "tour") return SearchMethod::tour;
    throw Error(Errc::config, "unknown search method '" + s + "' (expected axn, rnr or tour)");
}

json batch_search(const BatchSearchSpec& spec, const EmbeddingMatrix& items, const Scorer& scorer,
                  const std::vector<QueryId>& query_ids, const EmbeddingMatrix* query_embs,
                  const std::map<QueryId, std::vector<ItemId>>& rankings) {
    if (query_embs && query_embs->rows() != query_ids.size())
        throw Error(Errc::size_mismatch, "query embeddings and query ids differ in count");
    const bool needs_embedding = spec.method != SearchMethod::axn || spec.axn.init == InitPolicy::emb_topk ||
                                 spec.axn.lambda > 0 || spec.axn.shortlist_size > 0;
    if (needs_embedding && !query_embs)
        throw Error(Errc::config, "this search configuration needs query embeddings");
    std::vector<SearchResult> results(query_ids.size());
    parallel_for(query_ids.size(), spec.workers, [&](std::size_t j) {
        const QueryId q = query_ids[j];
        std::optional<Vector> u;
        if (query_embs) u = query_embs->row(j).transpose();
        switch (spec.method) {
            case SearchMethod::rnr:
                results[j] = rnr_search(items, scorer, q, *u, spec.axn.budget, spec.k, spec.axn.batch_size);
                break;
            case SearchMethod::tour: {
                TourConfig tc;
                tc.search = spec.axn;
                tc.variant = spec.tour_variant;
                tc.learning_rate = spec.tour_learning_rate;
                tc.temperature = spec.tour_temperature;
                results[j] = tour_search(tc, items, scorer, q, spec.k, *u);
                break;
            }
            case SearchMethod::axn: {
                AxnConfig cfg = spec.axn;
                cfg.seed = derive_seed(spec.axn.seed, q);
                std::span<const ItemId> ranking;
                if (cfg.init == InitPolicy::precomputed_ranking) {
                    const auto it = rankings.find(q);
                    if (it == rankings.end())
                        throw Error(Errc::config, "ranking file has no entry for query " + std::to_string(q));
                    ranking = it->second;
                }
                results[j] = axn_search(cfg, items, scorer, q, spec.k, u, ranking);
                break;
            }
        }
    });
    json out = json::array();
    for (std::size_t j = 0; j < query_ids.size(); ++j) {
        const auto& r = results[j];
        json topk = json::array();
        for (const auto& s : r.topk.items()) topk.push_back({s.id, s.score});
        json trace = json::array();
        for (const auto& t : r.trace)
            trace.push_back({{"round", t.round}, {"new_items", t.new_items}, {"residual_norm", t.residual_norm}});
        out.push_back({{"query_id", query_ids[j]},
                       {"topk", topk},
                       {"calls_used", r.calls_used},
                       {"stopped_early", r.stopped_early},
                       {"per_round_trace", trace}});
    }
    return out;
}

}  // namespace axn::cli
