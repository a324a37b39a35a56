// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cpmtp/cp_distribution.hpp>
#include <cpmtp/log_space.hpp>
#include <cpmtp/rng.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cpmtp {

/// Order-k Markov chain over V tokens. Row index of `transitions` is the
/// previous k tokens read as a base-V number, oldest token most significant.
struct MarkovSpec {
    int order = 1;
    int vocab = 2;
    MatrixXd transitions; ///< V^k x V, rows sum to 1
    std::uint64_t seed = 0;

    std::size_t num_states() const;
    void check() const;
};

void to_json(nlohmann::json& j, const MarkovSpec& spec);
void from_json(const nlohmann::json& j, MarkovSpec& spec);

MarkovSpec uniform_markov(int vocab, int order, std::uint64_t seed);
/// Order-1 chain that steps deterministically t -> t + 1 (mod V).
MarkovSpec cycle_markov(int vocab, std::uint64_t seed);
/// Order-1 chain with Dirichlet(1) rows over the whole vocabulary.
MarkovSpec random_markov(int vocab, std::uint64_t seed);
/// I.i.d. tokens: every row is the same Dirichlet(1) draw.
MarkovSpec unigram_markov(int vocab, std::uint64_t seed);
/// Order-1 chain in which each row puts Dirichlet(1) mass on `support`
/// distinct random successors (plus `floor` mass spread uniformly). The
/// joint of the next two tokens given the current one then has CP rank
/// about `support`.
MarkovSpec sparse_markov(int vocab, int support, std::uint64_t seed, double floor = 0.0);

/**
 * Token streams split into documents. Windows never cross a document
 * boundary. Each document is cut at `split_points[d]`: tokens before the
 * cut are training data, the rest validation.
 */
struct Corpus {
    int vocab = 0;
    std::vector<std::vector<Token>> documents;
    std::vector<std::size_t> split_points;
    std::optional<MarkovSpec> generator;

    void check() const;
    std::size_t total_tokens() const;
    /// Re-cut every document so that `validation_fraction` of it is held out.
    void set_validation_fraction(double validation_fraction);
    std::vector<std::span<const Token>> train_documents() const;
    std::vector<std::span<const Token>> validation_documents() const;
};

/// Samples `length` tokens (a single document). The first `order` tokens
/// are drawn uniformly; draws come from CounterRng(spec.seed).
Corpus generate_markov(const MarkovSpec& spec, std::size_t length, double validation_fraction = 0.1);

/// Stationary distribution over the V^k states. Throws ArgumentError with a
/// diagnostic when the chain is not irreducible (no unique stationary law).
VectorXd stationary_distribution(const MarkovSpec& spec);

/// Exact expected -log P(next n tokens | previous k tokens) with the
/// conditioning state drawn from the stationary law.
double true_joint_nll(const MarkovSpec& spec, int horizon);

/// Character vocabulary sorted by code point.
struct Vocab {
    std::vector<char32_t> symbols;
    std::optional<Token> unknown;

    int size() const { return static_cast<int>(symbols.size()); }
    std::optional<Token> lookup(char32_t c) const;
};

enum class UnknownPolicy { Error, MapToUnknown };

/// Symbol that unknown characters map to (U+FFFD).
inline constexpr char32_t kUnknownSymbol = 0xFFFD;

struct TextOptions {
    /// Text separating documents; empty keeps the file as one document.
    std::string document_separator;
    UnknownPolicy unknown = UnknownPolicy::Error;
    double validation_fraction = 0.1;
};

std::u32string utf8_decode(std::string_view text);
std::string utf8_encode(std::u32string_view text);

Vocab build_vocab(std::u32string_view text);
std::vector<Token> encode_text(const Vocab& vocab, std::u32string_view text, UnknownPolicy policy);
std::string decode_text(const Vocab& vocab, std::span<const Token> tokens);

/// Builds a character corpus from a UTF-8 file. When `vocab` is empty it is
/// built from the documents (separators excluded), plus kUnknownSymbol
/// under MapToUnknown. Empty files are rejected.
Corpus load_text(const std::filesystem::path& path, Vocab& vocab, const TextOptions& options = {});

void to_json(nlohmann::json& j, const Vocab& vocab);
void from_json(const nlohmann::json& j, Vocab& vocab);

/**
 * Token file: 8-byte magic "CPMTPTOK", u32 vocab size, then u32 tokens to
 * end of file, all little-endian. Documents are joined with `boundary`
 * when one is given; reading splits on it and drops it.
 */
void write_token_file(const Corpus& corpus, const std::filesystem::path& path, std::optional<Token> boundary = {});
Corpus read_token_file(const std::filesystem::path& path, std::optional<Token> boundary = {},
                       double validation_fraction = 0.1);

/// One training example: context x_1..x_t (at most `max_context` most
/// recent tokens) and the next n tokens.
struct Window {
    std::span<const Token> context;
    std::span<const Token> targets;
};

enum class Split { Train, Validation };

/// All valid windows of a split, in document order.
std::vector<Window> windows(const Corpus& corpus, Split split, int horizon, int max_context);

/// Endless shuffled minibatches. Epoch e is a Fisher-Yates permutation
/// drawn from CounterRng(seed).fork(e).
class BatchStream {
public:
    BatchStream(const Corpus& corpus, Split split, int horizon, int batch_size, std::uint64_t seed, int max_context);

    std::vector<Window> next();
    std::size_t num_windows() const { return windows_.size(); }
    std::uint64_t epoch() const { return epoch_; }

private:
    void reshuffle();

    std::vector<Window> windows_;
    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::uint64_t epoch_ = 0;
    int batch_size_;
    std::uint64_t seed_;
};

} // namespace cpmtp
