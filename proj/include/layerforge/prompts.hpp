#pragma once

#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "layerforge/random.hpp"
#include "layerforge/tensor.hpp"

namespace layerforge {

inline constexpr int kPadId = 0;
inline constexpr int kSosId = 1;
inline constexpr int kEosId = 2;
inline constexpr int kUnkId = 3;

class Vocabulary {
public:
    explicit Vocabulary(std::vector<std::string> tokens);

    /// Built-in grammar vocabulary: specials, colors, shapes, background and
    /// filler words.
    static const Vocabulary& standard();

    int id(const std::string& word) const;  // kUnkId when absent
    bool contains(const std::string& word) const { return ids_.count(word) != 0; }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

const std::vector<std::string>& color_words();
const std::vector<std::string>& shape_words();
const std::vector<std::string>& background_words();

/// Fixed-capacity token sequence: [SOS] content [EOS] [PAD]...
struct TokenSeq {
    std::vector<int> ids;
    std::size_t content_length = 0;
    bool truncated = false;

    std::size_t capacity() const { return ids.size(); }
    std::size_t eos_position() const { return content_length + 1; }
};

/// Lowercased whitespace split; unknown words map to [UNK]. Content longer
/// than capacity - 2 is truncated and flagged.
TokenSeq tokenize(const std::string& text, const Vocabulary& vocab, std::size_t capacity);

struct TextEmbedding {
    Tensor matrix;  // S×D
    int layer_index = 0;
};

/// Frozen token table plus the learnable layer-assign table. Row i of the
/// assign table belongs to layer i (1 = background); it starts at zero.
struct EmbeddingTables {
    Tensor token_table;   // V×D
    Tensor assign_table;  // (max_layers + 1)×D

    static EmbeddingTables create(std::size_t vocab_size, std::size_t dim, std::size_t max_layers, Rng& rng);
    std::size_t max_layers() const { return assign_table.dim(0) - 1; }
    std::size_t dim() const { return token_table.dim(1); }
};

/// Plain token lookup, S×D.
Tensor token_embedding(const TokenSeq& seq, const Tensor& token_table);

/// Token lookup plus assign row `layer_index` at every position.
TextEmbedding embed_layer(const TokenSeq& seq, int layer_index, const EmbeddingTables& tables);

struct TokenSpan {
    std::size_t start = 0;
    std::size_t length = 0;
};

/// Where each row of the global sequence comes from: either row `row` of
/// layer `layer`, or a fresh special token.
struct GlobalRowSource {
    int layer = -1;  // -1 for fresh special rows
    std::size_t row = 0;
    int token = kPadId;
};

struct GlobalLayout {
    std::vector<GlobalRowSource> rows;  // size S
    std::vector<TokenSpan> spans;       // one per input layer, in order
};

/// Content rows of each layer in order, wrapped in fresh [SOS]/[EOS] and
/// padded to `capacity`. Combined content beyond capacity - 2 is a
/// TruncationError.
GlobalLayout plan_global(const std::vector<TokenSeq>& seqs, std::size_t capacity);

struct GlobalEmbedding {
    TextEmbedding embedding;
    std::vector<TokenSpan> spans;  // per input layer (background first)
};

GlobalEmbedding assemble_global(const std::vector<TextEmbedding>& embeddings, const std::vector<TokenSeq>& seqs,
                                const Tensor& token_table);

}  // namespace layerforge
