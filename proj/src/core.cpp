#include "axn/core.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>

namespace axn {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::io: return "io-error";
        case Errc::format: return "format-error";
        case Errc::invalid_matrix: return "invalid-matrix";
        case Errc::dimension_mismatch: return "dimension-mismatch";
        case Errc::size_mismatch: return "size-mismatch";
        case Errc::budget_exhausted: return "budget-exhausted";
        case Errc::backend_failure: return "backend-failure";
        case Errc::spawn_failure: return "spawn-failure";
        case Errc::handshake_mismatch: return "handshake-mismatch";
        case Errc::invalid_spec: return "invalid-spec";
        case Errc::degenerate_input: return "degenerate-input";
        case Errc::degenerate_distribution: return "degenerate-distribution";
        case Errc::lambda_out_of_range: return "lambda-out-of-range";
        case Errc::non_finite_loss: return "non-finite-loss";
        case Errc::config: return "config-error";
    }
    return "unknown";
}

EmbeddingMatrix::EmbeddingMatrix(RowMatrix data, Role role) : data_(std::move(data)), role_(role) {
    if (data_.rows() == 0) throw Error(Errc::invalid_matrix, "embedding matrix has no rows");
    if (data_.cols() == 0) throw Error(Errc::invalid_matrix, "embedding dimension is zero");
    if (!data_.allFinite()) throw Error(Errc::invalid_matrix, "embedding matrix contains non-finite values");
}

SparseScoreMatrix::SparseScoreMatrix(std::size_t n_queries, std::size_t n_items,
                                     std::vector<ScoreEntry> entries)
    : n_queries_(n_queries), n_items_(n_items), entries_(std::move(entries)) {
    for (const auto& e : entries_) {
        if (e.query >= n_queries_ || e.item >= n_items_)
            throw Error(Errc::invalid_matrix, "entry (" + std::to_string(e.query) + ", " +
                                                  std::to_string(e.item) + ") out of range");
        if (!std::isfinite(e.score)) throw Error(Errc::invalid_matrix, "non-finite score");
    }
    std::sort(entries_.begin(), entries_.end(), [](const ScoreEntry& a, const ScoreEntry& b) {
        return a.query != b.query ? a.query < b.query : a.item < b.item;
    });
    for (std::size_t j = 1; j < entries_.size(); ++j) {
        if (entries_[j].query == entries_[j - 1].query && entries_[j].item == entries_[j - 1].item)
            throw Error(Errc::invalid_matrix, "duplicate coordinate (" + std::to_string(entries_[j].query) +
                                                  ", " + std::to_string(entries_[j].item) + ")");
    }
    row_offsets_.assign(n_queries_ + 1, 0);
    for (const auto& e : entries_) ++row_offsets_[e.query + 1];
    for (std::size_t q = 0; q < n_queries_; ++q) row_offsets_[q + 1] += row_offsets_[q];
}

std::span<const ScoreEntry> SparseScoreMatrix::row(QueryId q) const {
    if (q >= n_queries_) return {};
    return std::span<const ScoreEntry>(entries_).subspan(row_offsets_[q], row_offsets_[q + 1] - row_offsets_[q]);
}

bool SparseScoreMatrix::find(QueryId q, ItemId i, double& score) const {
    auto r = row(q);
    auto it = std::lower_bound(r.begin(), r.end(), i, [](const ScoreEntry& e, ItemId id) { return e.item < id; });
    if (it == r.end() || it->item != i) return false;
    score = it->score;
    return true;
}

TopKList TopKList::from_candidates(std::vector<ScoredItem> candidates, std::size_t k) {
    std::sort(candidates.begin(), candidates.end(), ranks_before);
    TopKList out;
    out.k_ = k;
    // After sorting, the first occurrence of an id carries its highest score.
    std::unordered_map<ItemId, bool> seen;
    seen.reserve(std::min(candidates.size(), 2 * k + 1));
    for (const auto& c : candidates) {
        if (out.items_.size() == k) break;
        if (!seen.emplace(c.id, true).second) continue;
        out.items_.push_back(c);
    }
    return out;
}

std::vector<ItemId> TopKList::ids() const {
    std::vector<ItemId> out;
    out.reserve(items_.size());
    for (const auto& s : items_) out.push_back(s.id);
    return out;
}

TopKList topk_merge(const TopKList& a, const TopKList& b, std::size_t k) {
    std::vector<ScoredItem> all(a.items());
    all.insert(all.end(), b.items().begin(), b.items().end());
    return TopKList::from_candidates(std::move(all), k);
}

TopKList select_topk(std::span<const double> scores, std::span<const ItemId> ids, std::size_t k) {
    if (!ids.empty() && ids.size() != scores.size())
        throw Error(Errc::size_mismatch, "select_topk: ids and scores differ in length");
    std::vector<ScoredItem> cand(scores.size());
    for (std::size_t j = 0; j < scores.size(); ++j) cand[j] = {ids.empty() ? ItemId(j) : ids[j], scores[j]};
    const std::size_t keep = std::min(k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end(), ranks_before);
    cand.resize(keep);
    return TopKList::from_candidates(std::move(cand), k);
}

namespace {

constexpr std::array<char, 4> kEmbMagic{'A', 'X', 'N', 'E'};
constexpr std::array<char, 4> kSparseMagic{'A', 'X', 'N', 'G'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
        std::reverse(bytes.begin(), bytes.end());
        return std::bit_cast<T>(bytes);
    } else {
        return v;
    }
}

class Writer {
public:
    explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
        if (!out_) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
    }
    void bytes(const char* p, std::size_t n) { out_.write(p, static_cast<std::streamsize>(n)); }
    template <typename T>
    void put(T v) {
        v = to_little(v);
        bytes(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    void finish(const std::filesystem::path& path) {
        out_.flush();
        if (!out_) throw Error(Errc::io, "write failed for " + path.string());
    }

private:
    std::ofstream out_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw Error(Errc::io, "cannot open " + path.string());
    }
    void bytes(char* p, std::size_t n) {
        in_.read(p, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw Error(Errc::format, path_.string() + ": truncated file");
    }
    template <typename T>
    T get() {
        T v;
        bytes(reinterpret_cast<char*>(&v), sizeof(T));
        return to_little(v);
    }
    void expect_end() {
        if (in_.peek() != std::char_traits<char>::eof())
            throw Error(Errc::format, path_.string() + ": trailing bytes after payload");
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ifstream in_;
};

void read_magic(Reader& r, const std::array<char, 4>& expected) {
    std::array<char, 4> magic{};
    r.bytes(magic.data(), magic.size());
    if (magic != expected) throw Error(Errc::format, r.path().string() + ": bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kFormatVersion)
        throw Error(Errc::format, r.path().string() + ": unsupported version " + std::to_string(version));
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

double parse_double(const std::string& s, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        double v = std::stod(s, &used);
        if (used != s.size() && s.find_first_not_of(" \t\r", used) != std::string::npos)
            throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw Error(Errc::format, path.string() + ": cannot parse number '" + s + "'");
    }
}

}  // namespace

std::string peek_magic(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::string magic(4, '\0');
    if (!in.read(magic.data(), 4)) return {};
    return magic;
}

void save_embeddings(const EmbeddingMatrix& m, const std::filesystem::path& path) {
    Writer w(path);
    w.bytes(kEmbMagic.data(), kEmbMagic.size());
    w.put<std::uint32_t>(kFormatVersion);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(m.role()));
    w.put<std::uint64_t>(m.rows());
    w.put<std::uint64_t>(m.dim());
    const double* p = m.data().data();
    const std::size_t n = m.rows() * m.dim();
    if constexpr (std::endian::native == std::endian::little) {
        w.bytes(reinterpret_cast<const char*>(p), n * sizeof(double));
    } else {
        for (std::size_t j = 0; j < n; ++j) w.put<double>(p[j]);
    }
    w.finish(path);
}

EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
    Reader r(path);
    read_magic(r, kEmbMagic);
    const auto role = r.get<std::uint8_t>();
    if (role > 1) throw Error(Errc::format, path.string() + ": unknown role " + std::to_string(role));
    const auto rows = r.get<std::uint64_t>();
    const auto dim = r.get<std::uint64_t>();
    if (dim == 0) throw Error(Errc::format, path.string() + ": dim is zero");
    if (rows == 0) throw Error(Errc::format, path.string() + ": no rows");
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    const std::uint64_t header = 4 + 4 + 1 + 8 + 8;
    if (ec || rows > (size - header) / sizeof(double) / dim)
        throw Error(Errc::format, path.string() + ": truncated file");
    RowMatrix data(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
    if constexpr (std::endian::native == std::endian::little) {
        r.bytes(reinterpret_cast<char*>(data.data()), rows * dim * sizeof(double));
    } else {
        for (std::size_t j = 0; j < rows * dim; ++j) data.data()[j] = r.get<double>();
    }
    r.expect_end();
    return EmbeddingMatrix(std::move(data), static_cast<Role>(role));
}

void save_sparse(const SparseScoreMatrix& g, const std::filesystem::path& path) {
    Writer w(path);
    w.bytes(kSparseMagic.data(), kSparseMagic.size());
    w.put<std::uint32_t>(kFormatVersion);
    w.put<std::uint64_t>(g.n_queries());
    w.put<std::uint64_t>(g.n_items());
    w.put<std::uint64_t>(g.nnz());
    for (const auto& e : g.entries()) {
        w.put<std::uint64_t>(e.query);
        w.put<std::uint64_t>(e.item);
        w.put<double>(e.score);
    }
    w.finish(path);
}

SparseScoreMatrix load_sparse(const std::filesystem::path& path) {
    Reader r(path);
    read_magic(r, kSparseMagic);
    const auto nq = r.get<std::uint64_t>();
    const auto ni = r.get<std::uint64_t>();
    const auto nnz = r.get<std::uint64_t>();
    std::error_code ec;
    const auto size = std::filesystem::file_size(path, ec);
    const std::uint64_t header = 4 + 4 + 8 * 3;
    if (ec || nnz > (size - header) / 24) throw Error(Errc::format, path.string() + ": truncated file");
    std::vector<ScoreEntry> entries(nnz);
    for (auto& e : entries) {
        e.query = r.get<std::uint64_t>();
        e.item = r.get<std::uint64_t>();
        e.score = r.get<double>();
    }
    r.expect_end();
    return SparseScoreMatrix(nq, ni, std::move(entries));
}

void export_embeddings_csv(const EmbeddingMatrix& m, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
    out.precision(17);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        for (std::size_t j = 0; j < m.dim(); ++j) {
            if (j) out << ',';
            out << m.data()(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        }
        out << '\n';
    }
    if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

EmbeddingMatrix import_embeddings_csv(const std::filesystem::path& path, Role role) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        std::vector<double> row;
        for (const auto& cell : split_csv(line)) row.push_back(parse_double(cell, path));
        if (!rows.empty() && row.size() != rows.front().size())
            throw Error(Errc::format, path.string() + ": ragged rows");
        rows.push_back(std::move(row));
    }
    if (rows.empty() || rows.front().empty()) throw Error(Errc::format, path.string() + ": empty CSV");
    RowMatrix data(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < rows[i].size(); ++j)
            data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
    return EmbeddingMatrix(std::move(data), role);
}

void export_sparse_csv(const SparseScoreMatrix& g, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(Errc::io, "cannot open " + path.string() + " for writing");
    out.precision(17);
    out << "query_id,item_id,score\n";
    for (const auto& e : g.entries()) out << e.query << ',' << e.item << ',' << e.score << '\n';
    if (!out) throw Error(Errc::io, "write failed for " + path.string());
}

SparseScoreMatrix import_sparse_csv(const std::filesystem::path& path, std::size_t n_queries,
                                    std::size_t n_items) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::io, "cannot open " + path.string());
    std::vector<ScoreEntry> entries;
    std::string line;
    std::size_t max_q = 0, max_i = 0;
    bool first = true;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (first) {
            first = false;
            if (line.rfind("query_id", 0) == 0) continue;
        }
        const auto cells = split_csv(line);
        if (cells.size() != 3) throw Error(Errc::format, path.string() + ": expected 3 columns");
        const double q = parse_double(cells[0], path), i = parse_double(cells[1], path);
        if (q < 0 || i < 0 || q != std::floor(q) || i != std::floor(i))
            throw Error(Errc::format, path.string() + ": ids must be non-negative integers");
        ScoreEntry e{static_cast<QueryId>(q), static_cast<ItemId>(i), parse_double(cells[2], path)};
        max_q = std::max<std::size_t>(max_q, e.query + 1);
        max_i = std::max<std::size_t>(max_i, e.item + 1);
        entries.push_back(e);
    }
    return SparseScoreMatrix(n_queries ? n_queries : max_q, n_items ? n_items : max_i, std::move(entries));
}

}  // namespace axn
