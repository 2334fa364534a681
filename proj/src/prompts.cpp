#include "layerforge/prompts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace layerforge {

const std::vector<std::string>& color_words() {
    static const std::vector<std::string> words = {"red",  "green",  "blue",   "yellow", "cyan",  "magenta",
                                                   "orange", "purple", "white", "black", "pink", "brown"};
    return words;
}

const std::vector<std::string>& shape_words() {
    static const std::vector<std::string> words = {"circle", "rect", "triangle"};
    return words;
}

const std::vector<std::string>& background_words() {
    static const std::vector<std::string> words = {"solid", "gradient", "stripes", "checker"};
    return words;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 4 || tokens_[kPadId] != "[PAD]" || tokens_[kSosId] != "[SOS]" ||
        tokens_[kEosId] != "[EOS]" || tokens_[kUnkId] != "[UNK]") {
        throw ValidationError("vocabulary must start with [PAD] [SOS] [EOS] [UNK]");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!ids_.emplace(tokens_[i], static_cast<int>(i)).second) {
            throw ValidationError("duplicate vocabulary token: " + tokens_[i]);
        }
    }
}

const Vocabulary& Vocabulary::standard() {
    static const Vocabulary vocab = [] {
        std::vector<std::string> t = {"[PAD]", "[SOS]", "[EOS]", "[UNK]"};
        for (const auto& w : color_words()) t.push_back(w);
        for (const auto& w : shape_words()) t.push_back(w);
        for (const auto& w : background_words()) t.push_back(w);
        for (const char* w : {"square",  "rectangle", "background", "texture", "plain", "a",      "an",
                              "the",     "on",        "with",       "and",     "of",    "in",     "left",
                              "right",   "top",       "bottom",     "center",  "small", "large",  "big",
                              "sky",     "floor",     "wall",       "grass",   "water", "sand",   "dark",
                              "light",   "bright",    "pale",       "over",    "behind", "front", "scene",
                              "image",   "layer",     "object",     "toy",     "ball",  "shape",  "two"})
            t.push_back(w);
        return Vocabulary(std::move(t));
    }();
    return vocab;
}

int Vocabulary::id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnkId : it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write vocabulary " + path.string());
    for (const auto& t : tokens_) out << t << "\n";
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read vocabulary " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) tokens.push_back(line);
    }
    return Vocabulary(std::move(tokens));
}

TokenSeq tokenize(const std::string& text, const Vocabulary& vocab, std::size_t capacity) {
    if (capacity < 2) throw ValidationError("token capacity must be at least 2");
    std::string lowered = text;
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    std::istringstream words(lowered);
    std::vector<int> content;
    std::string word;
    while (words >> word) content.push_back(vocab.id(word));

    TokenSeq seq;
    seq.ids.assign(capacity, kPadId);
    seq.truncated = content.size() > capacity - 2;
    seq.content_length = std::min(content.size(), capacity - 2);
    seq.ids[0] = kSosId;
    std::copy_n(content.begin(), seq.content_length, seq.ids.begin() + 1);
    seq.ids[seq.content_length + 1] = kEosId;
    return seq;
}

EmbeddingTables EmbeddingTables::create(std::size_t vocab_size, std::size_t dim, std::size_t max_layers, Rng& rng) {
    EmbeddingTables tables;
    tables.token_table = rng.normal_tensor<float>({vocab_size, dim}, 1.0);
    tables.assign_table = Tensor({max_layers + 1, dim}, 0.0f);
    return tables;
}

Tensor token_embedding(const TokenSeq& seq, const Tensor& token_table) {
    const std::size_t D = token_table.cols();
    Tensor out = Tensor::matrix(seq.ids.size(), D);
    for (std::size_t r = 0; r < seq.ids.size(); ++r) {
        const auto id = static_cast<std::size_t>(seq.ids[r]);
        if (id >= token_table.rows()) throw IndexError("token id " + std::to_string(id) + " outside table");
        std::copy_n(token_table.raw() + id * D, D, out.raw() + r * D);
    }
    return out;
}

TextEmbedding embed_layer(const TokenSeq& seq, int layer_index, const EmbeddingTables& tables) {
    if (layer_index < 0 || static_cast<std::size_t>(layer_index) > tables.max_layers()) {
        throw IndexError("layer index " + std::to_string(layer_index) + " outside assign table");
    }
    Tensor m = token_embedding(seq, tables.token_table);
    const std::size_t D = tables.dim();
    const float* row = tables.assign_table.raw() + static_cast<std::size_t>(layer_index) * D;
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < D; ++c) m.at(r, c) += row[c];
    return {std::move(m), layer_index};
}

GlobalLayout plan_global(const std::vector<TokenSeq>& seqs, std::size_t capacity) {
    std::size_t total = 0;
    for (const auto& s : seqs) total += s.content_length;
    if (capacity < 2 || total > capacity - 2) {
        throw TruncationError("global prompt needs " + std::to_string(total) + " content tokens, capacity is " +
                              std::to_string(capacity < 2 ? 0 : capacity - 2));
    }
    GlobalLayout layout;
    layout.rows.reserve(capacity);
    layout.rows.push_back({-1, 0, kSosId});
    for (std::size_t l = 0; l < seqs.size(); ++l) {
        layout.spans.push_back({layout.rows.size(), seqs[l].content_length});
        for (std::size_t j = 0; j < seqs[l].content_length; ++j)
            layout.rows.push_back({static_cast<int>(l), j + 1, seqs[l].ids[j + 1]});
    }
    layout.rows.push_back({-1, 0, kEosId});
    while (layout.rows.size() < capacity) layout.rows.push_back({-1, 0, kPadId});
    return layout;
}

GlobalEmbedding assemble_global(const std::vector<TextEmbedding>& embeddings, const std::vector<TokenSeq>& seqs,
                                const Tensor& token_table) {
    if (embeddings.size() != seqs.size() || embeddings.empty()) {
        throw ShapeError("assemble_global: need one token sequence per embedding");
    }
    const std::size_t S = embeddings.front().matrix.rows();
    const std::size_t D = embeddings.front().matrix.cols();
    const GlobalLayout layout = plan_global(seqs, S);
    Tensor out = Tensor::matrix(S, D);
    for (std::size_t r = 0; r < S; ++r) {
        const auto& src = layout.rows[r];
        const float* from = src.layer < 0
                                ? token_table.raw() + static_cast<std::size_t>(src.token) * D
                                : embeddings[static_cast<std::size_t>(src.layer)].matrix.raw() + src.row * D;
        std::copy_n(from, D, out.raw() + r * D);
    }
    return {{std::move(out), static_cast<int>(embeddings.size()) + 1}, layout.spans};
}

}  // namespace layerforge
