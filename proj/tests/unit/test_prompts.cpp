#include <vector>

#include "doctest.h"
#include "layerforge/errors.hpp"
#include "layerforge/numerics.hpp"
#include "layerforge/prompts.hpp"

using namespace layerforge;

namespace {

EmbeddingTables tables(std::uint64_t seed = 5) {
    Rng rng(seed);
    return EmbeddingTables::create(Vocabulary::standard().size(), 6, 4, rng);
}

}  // namespace

TEST_SUITE("prompts") {
    TEST_CASE("tokenize examples") {
        const auto& v = Vocabulary::standard();
        const TokenSeq rc = tokenize("red circle", v, 8);
        CHECK(rc.ids == std::vector<int>{kSosId, v.id("red"), v.id("circle"), kEosId, kPadId, kPadId, kPadId, kPadId});
        CHECK(v.id("red") > kUnkId);

        const TokenSeq empty = tokenize("", v, 4);
        CHECK(empty.ids == std::vector<int>{kSosId, kEosId, kPadId, kPadId});

        const TokenSeq oov = tokenize("zzz-unknown", v, 4);
        CHECK(oov.ids == std::vector<int>{kSosId, kUnkId, kEosId, kPadId});

        const TokenSeq cut = tokenize("red blue green circle", v, 4);
        CHECK(cut.truncated);
        CHECK(cut.ids.size() == 4);
    }

    TEST_CASE("embed_layer examples") {
        EmbeddingTables t = tables();
        const TokenSeq seq = tokenize("red circle", Vocabulary::standard(), 6);
        const Tensor plain = token_embedding(seq, t.token_table);
        CHECK(embed_layer(seq, 1, t).matrix.bit_equal(plain));
        CHECK(embed_layer(seq, 3, t).matrix.bit_equal(plain));

        for (std::size_t c = 0; c < t.dim(); ++c) {
            t.assign_table.at(1, c) = 0.25f * static_cast<float>(c);
            t.assign_table.at(2, c) = -0.5f;
        }
        const Tensor e1 = embed_layer(seq, 1, t).matrix, e2 = embed_layer(seq, 2, t).matrix;
        for (std::size_t r = 0; r < e1.rows(); ++r)
            for (std::size_t c = 0; c < e1.cols(); ++c)
                CHECK(e2.at(r, c) - e1.at(r, c) ==
                      doctest::Approx(t.assign_table.at(2, c) - t.assign_table.at(1, c)).epsilon(1e-6));

        CHECK_THROWS_AS(embed_layer(seq, 5, t), IndexError);
    }

    TEST_CASE("one-hot token table gives assign row plus basis row") {
        const auto& v = Vocabulary::standard();
        EmbeddingTables t;
        t.token_table = Tensor::matrix(v.size(), v.size());
        for (std::size_t i = 0; i < v.size(); ++i) t.token_table.at(i, i) = 1;
        t.assign_table = Tensor::matrix(3, v.size());
        for (std::size_t c = 0; c < v.size(); ++c) t.assign_table.at(2, c) = 0.1f * static_cast<float>(c % 7);
        const TokenSeq seq = tokenize("green", v, 4);
        const Tensor e = embed_layer(seq, 2, t).matrix;
        const auto id = static_cast<std::size_t>(v.id("green"));
        for (std::size_t c = 0; c < v.size(); ++c)
            CHECK(e.at(1, c) == t.assign_table.at(2, c) + (c == id ? 1.0f : 0.0f));
    }

    TEST_CASE("assemble_global examples") {
        const auto& v = Vocabulary::standard();
        const EmbeddingTables t = tables(6);
        const TokenSeq a = tokenize("red circle", v, 8);
        const TokenSeq b = tokenize("big blue square", v, 8);
        const TokenSeq empty = tokenize("", v, 8);

        const TextEmbedding ea = embed_layer(a, 1, t);
        const GlobalEmbedding single = assemble_global({ea}, {a}, t.token_table);
        CHECK(single.embedding.matrix.bit_equal(ea.matrix));

        const TextEmbedding eb = embed_layer(b, 2, t);
        const GlobalEmbedding two = assemble_global({ea, eb}, {a, b}, t.token_table);
        REQUIRE(two.spans.size() == 2);
        CHECK(two.spans[0].start == 1);
        CHECK(two.spans[0].length == 2);
        CHECK(two.spans[1].start == 3);
        CHECK(two.spans[1].length == 3);
        for (std::size_t i = 0; i < 2; ++i)
            for (std::size_t c = 0; c < t.dim(); ++c) CHECK(two.embedding.matrix.at(1 + i, c) == ea.matrix.at(1 + i, c));
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t c = 0; c < t.dim(); ++c) CHECK(two.embedding.matrix.at(3 + i, c) == eb.matrix.at(1 + i, c));

        const GlobalEmbedding with_empty = assemble_global({ea, embed_layer(empty, 2, t)}, {a, empty}, t.token_table);
        CHECK(with_empty.spans[1].length == 0);
        CHECK(with_empty.spans[1].start == 3);

        const TokenSeq long_a = tokenize("red red red red", v, 8);
        CHECK_THROWS_AS(assemble_global({embed_layer(long_a, 1, t), eb}, {long_a, b}, t.token_table), TruncationError);
    }
}
