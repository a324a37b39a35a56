// SPDX-License-Identifier: Apache-2.0
#include <cpmtp/corpus.hpp>

#include <cpmtp/binary_io.hpp>
#include <cpmtp/errors.hpp>

#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <queue>
#include <sstream>

namespace cpmtp {

namespace {

constexpr char kTokenMagic[8] = {'C', 'P', 'M', 'T', 'P', 'T', 'O', 'K'};

std::size_t ipow(std::size_t base, int exp)
{
    std::size_t out = 1;
    for (int i = 0; i < exp; ++i) {
        out *= base;
    }
    return out;
}

/// Dirichlet(1, ..., 1) draw of length k.
VectorXd dirichlet_ones(int k, CounterRng& rng)
{
    VectorXd x(k);
    for (int i = 0; i < k; ++i) {
        double u = rng.uniform();
        while (u <= 0.0) {
            u = rng.uniform();
        }
        x(i) = -std::log(u);
    }
    return x / x.sum();
}

double row_entropy(const Eigen::Ref<const Eigen::RowVectorXd>& row)
{
    double h = 0.0;
    for (Eigen::Index v = 0; v < row.size(); ++v) {
        if (row(v) > 0.0) {
            h -= row(v) * std::log(row(v));
        }
    }
    return h;
}

/// Visits every state reachable from 0 along positive transitions, either
/// forwards or backwards.
std::vector<bool> reachable(const MarkovSpec& spec, bool forward)
{
    const std::size_t states = spec.num_states();
    const auto v = static_cast<std::size_t>(spec.vocab);
    std::vector<bool> seen(states, false);
    std::queue<std::size_t> q;
    q.push(0);
    seen[0] = true;
    // Predecessor lists for the backward pass.
    std::vector<std::vector<std::size_t>> preds;
    if (!forward) {
        preds.resize(states);
        for (std::size_t s = 0; s < states; ++s) {
            for (std::size_t x = 0; x < v; ++x) {
                if (spec.transitions(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(x)) > 0.0) {
                    preds[(s * v + x) % states].push_back(s);
                }
            }
        }
    }
    while (!q.empty()) {
        const std::size_t s = q.front();
        q.pop();
        if (forward) {
            for (std::size_t x = 0; x < v; ++x) {
                if (spec.transitions(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(x)) > 0.0) {
                    const std::size_t t = (s * v + x) % states;
                    if (!seen[t]) {
                        seen[t] = true;
                        q.push(t);
                    }
                }
            }
        } else {
            for (std::size_t p : preds[s]) {
                if (!seen[p]) {
                    seen[p] = true;
                    q.push(p);
                }
            }
        }
    }
    return seen;
}

} // namespace

std::size_t MarkovSpec::num_states() const
{
    return ipow(static_cast<std::size_t>(vocab), order);
}

void MarkovSpec::check() const
{
    if (order < 1 || vocab < 1) {
        throw ArgumentError("MarkovSpec: order and vocab must be >= 1");
    }
    if (static_cast<std::size_t>(transitions.rows()) != num_states() || transitions.cols() != vocab) {
        throw StructuralError("MarkovSpec: transitions must be V^k x V");
    }
    if (!transitions.allFinite() || transitions.minCoeff() < 0.0) {
        throw NumericError("MarkovSpec: transition probabilities must be finite and non-negative");
    }
    for (Eigen::Index i = 0; i < transitions.rows(); ++i) {
        if (std::abs(transitions.row(i).sum() - 1.0) > 1e-12) {
            throw NumericError("MarkovSpec: row " + std::to_string(i) + " does not sum to 1");
        }
    }
}

void to_json(nlohmann::json& j, const MarkovSpec& spec)
{
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < spec.transitions.rows(); ++i) {
        std::vector<double> row(spec.transitions.cols());
        for (Eigen::Index v = 0; v < spec.transitions.cols(); ++v) {
            row[static_cast<std::size_t>(v)] = spec.transitions(i, v);
        }
        rows.push_back(row);
    }
    j = nlohmann::json{{"order", spec.order}, {"vocab", spec.vocab}, {"seed", spec.seed}, {"transitions", rows}};
}

void from_json(const nlohmann::json& j, MarkovSpec& spec)
{
    spec.order = j.at("order").get<int>();
    spec.vocab = j.at("vocab").get<int>();
    spec.seed = j.value("seed", std::uint64_t{0});
    const auto& rows = j.at("transitions");
    spec.transitions.resize(static_cast<Eigen::Index>(rows.size()), spec.vocab);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& row = rows[i];
        if (row.size() != static_cast<std::size_t>(spec.vocab)) {
            throw StructuralError("MarkovSpec JSON: row length != vocab");
        }
        for (std::size_t v = 0; v < row.size(); ++v) {
            spec.transitions(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(v)) = row[v].get<double>();
        }
    }
    spec.check();
}

MarkovSpec uniform_markov(int vocab, int order, std::uint64_t seed)
{
    MarkovSpec spec{order, vocab, {}, seed};
    spec.transitions = MatrixXd::Constant(static_cast<Eigen::Index>(spec.num_states()), vocab, 1.0 / vocab);
    return spec;
}

MarkovSpec cycle_markov(int vocab, std::uint64_t seed)
{
    MarkovSpec spec{1, vocab, MatrixXd::Zero(vocab, vocab), seed};
    for (int v = 0; v < vocab; ++v) {
        spec.transitions(v, (v + 1) % vocab) = 1.0;
    }
    return spec;
}

MarkovSpec random_markov(int vocab, std::uint64_t seed)
{
    MarkovSpec spec{1, vocab, MatrixXd::Zero(vocab, vocab), seed};
    CounterRng rng = CounterRng(seed).fork(101);
    for (int v = 0; v < vocab; ++v) {
        spec.transitions.row(v) = dirichlet_ones(vocab, rng).transpose();
    }
    return spec;
}

MarkovSpec unigram_markov(int vocab, std::uint64_t seed)
{
    MarkovSpec spec{1, vocab, MatrixXd::Zero(vocab, vocab), seed};
    CounterRng rng = CounterRng(seed).fork(103);
    spec.transitions.rowwise() = dirichlet_ones(vocab, rng).transpose();
    return spec;
}

MarkovSpec sparse_markov(int vocab, int support, std::uint64_t seed, double floor)
{
    if (support < 1 || support > vocab) {
        throw ArgumentError("sparse_markov: support must lie in [1, V]");
    }
    if (floor < 0.0 || floor >= 1.0) {
        throw ArgumentError("sparse_markov: floor must lie in [0, 1)");
    }
    MarkovSpec spec{1, vocab, MatrixXd::Zero(vocab, vocab), seed};
    CounterRng rng = CounterRng(seed).fork(102);
    std::vector<int> ids(static_cast<std::size_t>(vocab));
    for (int v = 0; v < vocab; ++v) {
        std::iota(ids.begin(), ids.end(), 0);
        shuffle(std::span<int>(ids), rng);
        const VectorXd w = dirichlet_ones(support, rng);
        spec.transitions.row(v).setConstant(floor / vocab);
        for (int i = 0; i < support; ++i) {
            spec.transitions(v, ids[static_cast<std::size_t>(i)]) += (1.0 - floor) * w(i);
        }
        spec.transitions.row(v) /= spec.transitions.row(v).sum();
    }
    return spec;
}

void Corpus::check() const
{
    if (vocab < 1) {
        throw ArgumentError("Corpus: vocab must be >= 1");
    }
    if (split_points.size() != documents.size()) {
        throw StructuralError("Corpus: one split point per document required");
    }
    for (std::size_t d = 0; d < documents.size(); ++d) {
        if (split_points[d] > documents[d].size()) {
            throw StructuralError("Corpus: split point beyond document end");
        }
        for (Token t : documents[d]) {
            detail::check_token(t, vocab);
        }
    }
}

std::size_t Corpus::total_tokens() const
{
    std::size_t n = 0;
    for (const auto& d : documents) {
        n += d.size();
    }
    return n;
}

void Corpus::set_validation_fraction(double validation_fraction)
{
    if (validation_fraction < 0.0 || validation_fraction > 1.0) {
        throw ArgumentError("validation fraction must lie in [0, 1]");
    }
    split_points.resize(documents.size());
    for (std::size_t d = 0; d < documents.size(); ++d) {
        const auto len = documents[d].size();
        const auto held = static_cast<std::size_t>(std::floor(static_cast<double>(len) * validation_fraction));
        split_points[d] = len - held;
    }
}

std::vector<std::span<const Token>> Corpus::train_documents() const
{
    std::vector<std::span<const Token>> out;
    for (std::size_t d = 0; d < documents.size(); ++d) {
        out.emplace_back(documents[d].data(), split_points[d]);
    }
    return out;
}

std::vector<std::span<const Token>> Corpus::validation_documents() const
{
    std::vector<std::span<const Token>> out;
    for (std::size_t d = 0; d < documents.size(); ++d) {
        out.emplace_back(documents[d].data() + split_points[d], documents[d].size() - split_points[d]);
    }
    return out;
}

Corpus generate_markov(const MarkovSpec& spec, std::size_t length, double validation_fraction)
{
    spec.check();
    if (length <= static_cast<std::size_t>(spec.order)) {
        throw ArgumentError("generate_markov: length must exceed the chain order");
    }
    CounterRng rng(spec.seed);
    std::vector<Token> seq;
    seq.reserve(length);
    const std::size_t states = spec.num_states();
    std::size_t state = 0;
    for (int i = 0; i < spec.order; ++i) {
        const auto t = static_cast<Token>(rng.uniform_index(static_cast<std::uint64_t>(spec.vocab)));
        seq.push_back(t);
        state = (state * static_cast<std::size_t>(spec.vocab) + static_cast<std::size_t>(t)) % states;
    }
    const MatrixXd log_t = spec.transitions.array().log().matrix();
    while (seq.size() < length) {
        const auto t = static_cast<Token>(
            sample_categorical(log_t.row(static_cast<Eigen::Index>(state)).transpose(), rng));
        seq.push_back(t);
        state = (state * static_cast<std::size_t>(spec.vocab) + static_cast<std::size_t>(t)) % states;
    }
    Corpus c;
    c.vocab = spec.vocab;
    c.documents.push_back(std::move(seq));
    c.generator = spec;
    c.set_validation_fraction(validation_fraction);
    return c;
}

VectorXd stationary_distribution(const MarkovSpec& spec)
{
    spec.check();
    const auto fwd = reachable(spec, true);
    const auto bwd = reachable(spec, false);
    for (std::size_t s = 0; s < fwd.size(); ++s) {
        if (!fwd[s] || !bwd[s]) {
            throw ArgumentError("chain is not irreducible: state " + std::to_string(s) +
                                (fwd[s] ? " cannot reach state 0" : " is unreachable from state 0") +
                                "; stationary law is not unique");
        }
    }
    const auto states = static_cast<Eigen::Index>(spec.num_states());
    const auto v = static_cast<Eigen::Index>(spec.vocab);
    // Solve pi^T (P - I) = 0 with sum(pi) = 1 replacing the last equation.
    MatrixXd a = MatrixXd::Zero(states, states);
    for (Eigen::Index s = 0; s < states; ++s) {
        for (Eigen::Index x = 0; x < v; ++x) {
            a((s * v + x) % states, s) += spec.transitions(s, x);
        }
    }
    a -= MatrixXd::Identity(states, states);
    a.row(states - 1).setOnes();
    VectorXd b = VectorXd::Zero(states);
    b(states - 1) = 1.0;
    VectorXd pi = a.fullPivLu().solve(b);
    pi = pi.cwiseMax(0.0);
    return pi / pi.sum();
}

double true_joint_nll(const MarkovSpec& spec, int horizon)
{
    if (horizon < 1) {
        throw ArgumentError("true_joint_nll: horizon must be >= 1");
    }
    VectorXd dist = stationary_distribution(spec);
    const auto states = static_cast<Eigen::Index>(spec.num_states());
    const auto v = static_cast<Eigen::Index>(spec.vocab);
    VectorXd entropies(states);
    for (Eigen::Index s = 0; s < states; ++s) {
        entropies(s) = row_entropy(spec.transitions.row(s));
    }
    // Chain rule: sum over steps of the expected next-token entropy under the
    // state law at that step (which stays stationary, but is propagated anyway).
    double total = 0.0;
    for (int step = 0; step < horizon; ++step) {
        total += dist.dot(entropies);
        VectorXd next = VectorXd::Zero(states);
        for (Eigen::Index s = 0; s < states; ++s) {
            for (Eigen::Index x = 0; x < v; ++x) {
                next((s * v + x) % states) += dist(s) * spec.transitions(s, x);
            }
        }
        dist = next;
    }
    return total;
}

std::optional<Token> Vocab::lookup(char32_t c) const
{
    const auto it = std::lower_bound(symbols.begin(), symbols.end(), c);
    if (it == symbols.end() || *it != c) {
        return std::nullopt;
    }
    return static_cast<Token>(it - symbols.begin());
}

std::u32string utf8_decode(std::string_view text)
{
    std::u32string out;
    out.reserve(text.size());
    std::size_t i = 0;
    while (i < text.size()) {
        const auto c = static_cast<unsigned char>(text[i]);
        int len = 0;
        char32_t cp = 0;
        if (c < 0x80) {
            len = 1;
            cp = c;
        } else if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            throw FormatError("invalid UTF-8 lead byte at offset " + std::to_string(i));
        }
        if (i + static_cast<std::size_t>(len) > text.size()) {
            throw FormatError("truncated UTF-8 sequence at offset " + std::to_string(i));
        }
        for (int k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(text[i + static_cast<std::size_t>(k)]);
            if ((cc & 0xC0) != 0x80) {
                throw FormatError("invalid UTF-8 continuation byte at offset " + std::to_string(i + k));
            }
            cp = (cp << 6) | (cc & 0x3F);
        }
        out.push_back(cp);
        i += static_cast<std::size_t>(len);
    }
    return out;
}

std::string utf8_encode(std::u32string_view text)
{
    std::string out;
    for (char32_t cp : text) {
        if (cp < 0x80) {
            out.push_back(static_cast<char>(cp));
        } else if (cp < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else if (cp < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
        }
    }
    return out;
}

Vocab build_vocab(std::u32string_view text)
{
    Vocab v;
    v.symbols.assign(text.begin(), text.end());
    std::sort(v.symbols.begin(), v.symbols.end());
    v.symbols.erase(std::unique(v.symbols.begin(), v.symbols.end()), v.symbols.end());
    return v;
}

std::vector<Token> encode_text(const Vocab& vocab, std::u32string_view text, UnknownPolicy policy)
{
    std::vector<Token> out;
    out.reserve(text.size());
    for (char32_t c : text) {
        if (auto id = vocab.lookup(c)) {
            out.push_back(*id);
        } else if (policy == UnknownPolicy::MapToUnknown && vocab.unknown) {
            out.push_back(*vocab.unknown);
        } else {
            throw ArgumentError("character U+" + std::to_string(static_cast<std::uint32_t>(c)) +
                                " is not in the vocabulary");
        }
    }
    return out;
}

std::string decode_text(const Vocab& vocab, std::span<const Token> tokens)
{
    std::u32string out;
    for (Token t : tokens) {
        detail::check_token(t, vocab.size());
        out.push_back(vocab.symbols[static_cast<std::size_t>(t)]);
    }
    return utf8_encode(out);
}

Corpus load_text(const std::filesystem::path& path, Vocab& vocab, const TextOptions& options)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open text file: " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    const std::u32string text = utf8_decode(buf.str());
    if (text.empty()) {
        throw ArgumentError("text file is empty: " + path.string());
    }
    const std::u32string sep = utf8_decode(options.document_separator);
    std::vector<std::u32string_view> pieces;
    std::size_t start = 0;
    while (start <= text.size()) {
        std::size_t end = sep.empty() ? std::u32string::npos : text.find(sep, start);
        if (end == std::u32string::npos) {
            end = text.size();
        }
        if (end > start) {
            pieces.push_back(std::u32string_view(text).substr(start, end - start));
        }
        if (end == text.size()) {
            break;
        }
        start = end + sep.size();
    }
    if (pieces.empty()) {
        throw ArgumentError("text file holds only document separators: " + path.string());
    }
    if (vocab.symbols.empty()) {
        std::u32string all;
        for (auto piece : pieces) {
            all += piece;
        }
        vocab = build_vocab(all);
        if (options.unknown == UnknownPolicy::MapToUnknown) {
            const auto it = std::lower_bound(vocab.symbols.begin(), vocab.symbols.end(), kUnknownSymbol);
            if (it == vocab.symbols.end() || *it != kUnknownSymbol) {
                vocab.symbols.insert(it, kUnknownSymbol);
            }
        }
    }
    if (options.unknown == UnknownPolicy::MapToUnknown && !vocab.unknown) {
        vocab.unknown = vocab.lookup(kUnknownSymbol);
        if (!vocab.unknown) {
            throw ArgumentError("map-to-unknown needs U+FFFD in the vocabulary");
        }
    }
    Corpus c;
    c.vocab = vocab.size();
    for (auto piece : pieces) {
        c.documents.push_back(encode_text(vocab, piece, options.unknown));
    }
    c.set_validation_fraction(options.validation_fraction);
    c.check();
    return c;
}

void to_json(nlohmann::json& j, const Vocab& vocab)
{
    std::vector<std::uint32_t> cps(vocab.symbols.begin(), vocab.symbols.end());
    j = nlohmann::json{{"symbols", cps}};
    j["unknown"] = vocab.unknown ? nlohmann::json(*vocab.unknown) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, Vocab& vocab)
{
    const auto cps = j.at("symbols").get<std::vector<std::uint32_t>>();
    vocab.symbols.assign(cps.begin(), cps.end());
    if (!std::is_sorted(vocab.symbols.begin(), vocab.symbols.end())) {
        throw FormatError("vocab symbols must be sorted by code point");
    }
    vocab.unknown.reset();
    if (j.contains("unknown") && !j.at("unknown").is_null()) {
        vocab.unknown = j.at("unknown").get<Token>();
    }
}

void write_token_file(const Corpus& corpus, const std::filesystem::path& path, std::optional<Token> boundary)
{
    corpus.check();
    if (boundary) {
        detail::check_token(*boundary, corpus.vocab);
    } else if (corpus.documents.size() > 1) {
        throw ArgumentError("write_token_file: multiple documents need a boundary token");
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot open token file for writing: " + path.string());
    }
    out.write(kTokenMagic, sizeof kTokenMagic);
    io::write_u32(out, static_cast<std::uint32_t>(corpus.vocab));
    for (std::size_t d = 0; d < corpus.documents.size(); ++d) {
        if (d > 0) {
            io::write_u32(out, static_cast<std::uint32_t>(*boundary));
        }
        for (Token t : corpus.documents[d]) {
            io::write_u32(out, static_cast<std::uint32_t>(t));
        }
    }
    if (!out) {
        throw FormatError("failed writing token file: " + path.string());
    }
}

Corpus read_token_file(const std::filesystem::path& path, std::optional<Token> boundary, double validation_fraction)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open token file: " + path.string());
    }
    char magic[8];
    in.read(magic, sizeof magic);
    if (!in || !std::equal(std::begin(magic), std::end(magic), std::begin(kTokenMagic))) {
        throw FormatError("not a token file: " + path.string());
    }
    Corpus c;
    c.vocab = static_cast<int>(io::read_u32(in));
    c.documents.emplace_back();
    std::array<unsigned char, 4> b{};
    while (in.read(reinterpret_cast<char*>(b.data()), 4)) {
        const auto t = static_cast<Token>(b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24));
        if (boundary && t == *boundary) {
            c.documents.emplace_back();
        } else {
            c.documents.back().push_back(t);
        }
    }
    if (in.gcount() != 0) {
        throw FormatError("token file has a truncated trailing token: " + path.string());
    }
    std::erase_if(c.documents, [](const auto& d) { return d.empty(); });
    if (c.documents.empty()) {
        throw ArgumentError("token file contains no tokens: " + path.string());
    }
    c.set_validation_fraction(validation_fraction);
    c.check();
    return c;
}

std::vector<Window> windows(const Corpus& corpus, Split split, int horizon, int max_context)
{
    if (horizon < 1 || max_context < 1) {
        throw ArgumentError("windows: horizon and context must be >= 1");
    }
    const auto docs = split == Split::Train ? corpus.train_documents() : corpus.validation_documents();
    const auto n = static_cast<std::size_t>(horizon);
    const auto c = static_cast<std::size_t>(max_context);
    std::vector<Window> out;
    for (const auto& doc : docs) {
        for (std::size_t t = 1; t + n <= doc.size(); ++t) {
            const std::size_t begin = t > c ? t - c : 0;
            out.push_back({doc.subspan(begin, t - begin), doc.subspan(t, n)});
        }
    }
    return out;
}

BatchStream::BatchStream(const Corpus& corpus, Split split, int horizon, int batch_size, std::uint64_t seed,
                         int max_context)
    : windows_(windows(corpus, split, horizon, max_context)), batch_size_(batch_size), seed_(seed)
{
    if (batch_size < 1) {
        throw ArgumentError("batch size must be >= 1");
    }
    if (windows_.empty()) {
        throw ArgumentError("corpus split has no complete (context, targets) window");
    }
    order_.resize(windows_.size());
    reshuffle();
}

void BatchStream::reshuffle()
{
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    CounterRng rng = CounterRng(seed_).fork(epoch_);
    shuffle(std::span<std::size_t>(order_), rng);
    cursor_ = 0;
}

std::vector<Window> BatchStream::next()
{
    std::vector<Window> batch;
    batch.reserve(static_cast<std::size_t>(batch_size_));
    while (batch.size() < static_cast<std::size_t>(batch_size_)) {
        if (cursor_ == order_.size()) {
            ++epoch_;
            reshuffle();
        }
        batch.push_back(windows_[order_[cursor_++]]);
    }
    return batch;
}

} // namespace cpmtp
