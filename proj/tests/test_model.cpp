#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <vector>

#include "autocomp/model.hpp"
#include "autocomp/rng.hpp"
#include "reference_model.hpp"

using namespace autocomp;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.context_window = 16;
    cfg.kappa = 2;
    return cfg;
}

template <typename T>
SoftPrompt<T> random_prompt(int blocks, int kappa, int d, Rng& rng) {
    SoftPrompt<T> p;
    for (int b = 0; b < blocks; ++b) {
        SummaryBlock<T> blk;
        blk.rows = static_cast<std::size_t>(kappa);
        blk.cols = static_cast<std::size_t>(d);
        blk.values.resize(blk.rows * blk.cols);
        for (auto& v : blk.values) v = static_cast<T>(rng.normal(0.0, 0.3));
        p.blocks.push_back(blk);
    }
    return p;
}

}  // namespace

TEST_CASE("summary block equals final states extracted by the reference forward") {
    Rng rng(5);
    auto model = ModelState<double>::init(tiny_config(), rng);
    std::vector<int> tokens = {1, 4, 9, 2, 7};

    SoftPrompt<double> prompt = random_prompt<double>(1, 2, 8, rng);
    EvalForward<double> got = forward_eval(model, prompt, tokens, /*emit=*/true);

    refmodel::Mat ref_prompt;
    for (std::size_t r = 0; r < prompt.blocks[0].rows; ++r) {
        ref_prompt.push_back(std::vector<double>(
            prompt.blocks[0].values.begin() + static_cast<std::ptrdiff_t>(r * 8),
            prompt.blocks[0].values.begin() + static_cast<std::ptrdiff_t>((r + 1) * 8)));
    }
    refmodel::RefOut ref = refmodel::forward(model, ref_prompt, tokens, true);

    std::size_t P = 2, m = tokens.size();
    REQUIRE(got.summary.rows == 2);
    REQUIRE(got.summary.cols == 8);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(got.summary.values[i * 8 + j] ==
                  doctest::Approx(ref.states[P + m + i][j]).epsilon(1e-9));
        }
    }
    // logits for real-token rows agree too
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < 16; ++j) {
            CHECK(got.logits.at(i, j) == doctest::Approx(ref.logits[P + i][j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("appending summary slots does not change token logits") {
    Rng rng(6);
    auto model = ModelState<double>::init(tiny_config(), rng);
    std::vector<int> tokens = {3, 1, 15, 0, 8, 11};
    SoftPrompt<double> prompt = random_prompt<double>(2, 2, 8, rng);

    EvalForward<double> plain = forward_eval(model, prompt, tokens, false);
    EvalForward<double> emitting = forward_eval(model, prompt, tokens, true);
    REQUIRE(plain.logits.numel() == emitting.logits.numel());
    CHECK(std::memcmp(plain.logits.ptr(), emitting.logits.ptr(),
                      plain.logits.numel() * sizeof(double)) == 0);
    REQUIRE(plain.prompt_tail_logits.has_value());
    CHECK(std::memcmp(plain.prompt_tail_logits->ptr(), emitting.prompt_tail_logits->ptr(),
                      16 * sizeof(double)) == 0);
}

TEST_CASE("causality: changing a later token leaves earlier logits bit-identical") {
    Rng rng(9);
    auto model = ModelState<double>::init(tiny_config(), rng);
    std::vector<int> tokens = {3, 1, 15, 0, 8, 11};
    std::vector<int> mutated = tokens;
    mutated[4] = 5;

    EvalForward<double> a = forward_eval(model, {}, tokens, false);
    EvalForward<double> b = forward_eval(model, {}, mutated, false);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 16; ++j) {
            CHECK(a.logits.at(i, j) == b.logits.at(i, j));
        }
    }
    // and the mutated position differs for generic weights
    bool differs = false;
    for (std::size_t j = 0; j < 16; ++j) differs |= a.logits.at(4, j) != b.logits.at(4, j);
    CHECK(differs);
}

TEST_CASE("prompt rows influence logits") {
    Rng rng(10);
    auto model = ModelState<double>::init(tiny_config(), rng);
    std::vector<int> tokens = {3, 1, 15, 0};
    SoftPrompt<double> p1 = random_prompt<double>(1, 2, 8, rng);
    SoftPrompt<double> p2 = p1;
    p2.blocks[0].values[3] += 0.25;

    EvalForward<double> a = forward_eval(model, p1, tokens, false);
    EvalForward<double> b = forward_eval(model, p2, tokens, false);
    bool differs = false;
    for (std::size_t i = 0; i < a.logits.numel(); ++i) {
        differs |= a.logits.ptr()[i] != b.logits.ptr()[i];
    }
    CHECK(differs);
}

TEST_CASE("absolute positions: only real-token rows consume the table") {
    Rng rng(12);
    auto model = ModelState<double>::init(tiny_config(), rng);
    std::vector<int> tokens = {3, 1, 15, 0, 2};
    SoftPrompt<double> prompt = random_prompt<double>(2, 2, 8, rng);

    EvalForward<double> before = forward_eval(model, prompt, tokens, true);
    // rows at and beyond the token count must be dead weight, even though the
    // layout is longer than the segment
    for (std::size_t r = tokens.size(); r < static_cast<std::size_t>(model.cfg.context_window); ++r) {
        for (std::size_t j = 0; j < 8; ++j) model.pos_emb.at(r, j) += 3.0;
    }
    EvalForward<double> after = forward_eval(model, prompt, tokens, true);
    CHECK(std::memcmp(before.logits.ptr(), after.logits.ptr(),
                      before.logits.numel() * sizeof(double)) == 0);
    CHECK(before.summary.values == after.summary.values);
}

TEST_CASE("absolute positions: full context window usable regardless of prompt length") {
    Rng rng(13);
    ModelConfig cfg = tiny_config();
    auto model = ModelState<double>::init(cfg, rng);
    std::vector<int> tokens(static_cast<std::size_t>(cfg.context_window), 1);
    SoftPrompt<double> prompt = random_prompt<double>(3, 2, 8, rng);
    EvalForward<double> r = forward_eval(model, prompt, tokens, true);
    CHECK(r.logits.rows() == tokens.size());
}

TEST_CASE("layout cap produces an error naming the cap") {
    Rng rng(14);
    ModelConfig cfg = tiny_config();
    cfg.max_layout = 20;
    auto model = ModelState<double>::init(cfg, rng);
    std::vector<int> tokens(16, 1);
    SoftPrompt<double> prompt = random_prompt<double>(2, 2, 8, rng);  // 16 + 4 + 2 > 20
    try {
        forward_eval(model, prompt, tokens, true);
        FAIL("expected layout error");
    } catch (const Error& e) {
        CHECK(e.code() == "forward.layout");
        CHECK(std::string(e.what()).find("20") != std::string::npos);
    }
}

TEST_CASE("token id outside the vocabulary is rejected") {
    Rng rng(15);
    auto model = ModelState<double>::init(tiny_config(), rng);
    std::vector<int> tokens = {1, 99};
    CHECK_THROWS_AS(forward_eval(model, {}, tokens, false), Error);
}

TEST_CASE("zero output head gives uniform next-token logprobs") {
    Rng rng(16);
    auto model = ModelState<double>::init(tiny_config(), rng);
    for (auto& v : *model.head_w.data) v = 0.0;
    std::vector<int> tokens = {3, 1, 15, 0, 2};
    std::vector<double> lp = next_token_logprobs(model, {}, tokens);
    REQUIRE(lp.size() == 4);
    for (double v : lp) CHECK(v == doctest::Approx(-std::log(16.0)).epsilon(1e-12));
}

TEST_CASE("sum of next-token logprobs equals minus the mean cross entropy times count") {
    Rng rng(17);
    auto model = ModelState<double>::init(tiny_config(), rng);
    std::vector<int> tokens = {3, 1, 15, 0, 2, 9};
    std::vector<double> lp = next_token_logprobs(model, {}, tokens);
    REQUIRE(lp.size() == 5);
    double sum_lp = 0.0;
    for (double v : lp) sum_lp += v;

    Graph<double> g;
    BoundModel<double> b = bind(g, model, false);
    ForwardResult<double> r = forward(b, {}, tokens, false);
    Tensor<double> scored = g.slice(r.logits, 0, 0, 5);
    Tensor<double> ce = g.cross_entropy_sum(scored, {1, 15, 0, 2, 9});
    double mean_ce = (*ce.data)[0] / 5.0;
    CHECK(sum_lp == doctest::Approx(-5.0 * mean_ce).epsilon(1e-12));
    CHECK(lp.size() == tokens.size() - 1);
    for (double v : lp) CHECK(v <= 0.0);
}

TEST_CASE("perturbing any prompt row changes some logprob") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        auto model = ModelState<double>::init(tiny_config(), rng);
        std::vector<int> tokens = {3, 1, 15, 0, 2};
        SoftPrompt<double> prompt = random_prompt<double>(1, 2, 8, rng);
        std::vector<double> base = next_token_logprobs(model, prompt, tokens);

        for (std::size_t row = 0; row < 2; ++row) {
            // perturb one coordinate: a uniform shift of a whole row would sit
            // in layer norm's null space and provably change nothing
            SoftPrompt<double> bumped = prompt;
            bumped.blocks[0].values[row * 8 + (row + 1)] += 0.5;
            std::vector<double> lp = next_token_logprobs(model, bumped, tokens);
            bool differs = false;
            for (std::size_t i = 0; i < lp.size(); ++i) differs |= lp[i] != base[i];
            CHECK(differs);
        }
    }
}

TEST_CASE("summary block shape law holds across segment lengths") {
    Rng rng(18);
    auto model = ModelState<double>::init(tiny_config(), rng);
    for (std::size_t len : {1u, 3u, 7u, 16u}) {
        std::vector<int> tokens(len, 2);
        EvalForward<double> r = forward_eval(model, {}, tokens, true);
        CHECK(r.summary.rows == 2);
        CHECK(r.summary.cols == 8);
    }
}

TEST_CASE("rotary mode works and keeps causality") {
    Rng rng(19);
    ModelConfig cfg = tiny_config();
    cfg.positional_mode = PositionalMode::rotary;
    auto model = ModelState<double>::init(cfg, rng);
    std::vector<int> tokens = {3, 1, 15, 0, 8};
    std::vector<int> mutated = tokens;
    mutated[3] = 7;
    EvalForward<double> a = forward_eval(model, {}, tokens, true);
    EvalForward<double> b = forward_eval(model, {}, mutated, true);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 16; ++j) CHECK(a.logits.at(i, j) == b.logits.at(i, j));
    }
    CHECK(a.summary.rows == 2);

    refmodel::RefOut ref = refmodel::forward(model, {}, tokens, true);
    for (std::size_t j = 0; j < 16; ++j) {
        CHECK(a.logits.at(2, j) == doctest::Approx(ref.logits[2][j]).epsilon(1e-9));
    }
}

TEST_CASE("checkpoint round-trip is bit-exact for float parameters") {
    Rng rng(20);
    ModelConfig cfg = tiny_config();
    auto model = ModelState<float>::init(cfg, rng);
    std::string path = "test_model_ckpt.bin";
    save_checkpoint(model, path);
    ModelState<float> loaded = load_checkpoint<float>(path);

    auto pa = model.params();
    auto pb = loaded.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        REQUIRE(pa[i]->numel() == pb[i]->numel());
        CHECK(std::memcmp(pa[i]->ptr(), pb[i]->ptr(), pa[i]->numel() * sizeof(float)) == 0);
    }
    std::remove(path.c_str());
}

TEST_CASE("corrupted checkpoints are rejected with structured errors") {
    Rng rng(21);
    auto model = ModelState<float>::init(tiny_config(), rng);
    std::string path = "test_model_ckpt2.bin";
    save_checkpoint(model, path);

    SUBCASE("bad magic") {
        std::string bytes = read_text_file(path);
        bytes[0] = 'X';
        write_text_file(path, bytes);
        try {
            load_checkpoint<float>(path);
            FAIL("expected magic error");
        } catch (const Error& e) {
            CHECK(e.code() == "checkpoint.magic");
        }
    }
    SUBCASE("bad version") {
        std::string bytes = read_text_file(path);
        bytes[4] = 0x7f;
        write_text_file(path, bytes);
        try {
            load_checkpoint<float>(path);
            FAIL("expected version error");
        } catch (const Error& e) {
            CHECK(e.code() == "checkpoint.version");
        }
    }
    SUBCASE("truncated") {
        std::string bytes = read_text_file(path);
        bytes.resize(bytes.size() / 2);
        write_text_file(path, bytes);
        try {
            load_checkpoint<float>(path);
            FAIL("expected truncation error");
        } catch (const Error& e) {
            CHECK(e.code() == "io.truncated");
        }
    }
    std::remove(path.c_str());
}

TEST_CASE("parameter count is a pure function of the config") {
    Rng r1(1), r2(2);
    auto m1 = ModelState<double>::init(tiny_config(), r1);
    auto m2 = ModelState<double>::init(tiny_config(), r2);
    CHECK(m1.param_count() == m2.param_count());
    CHECK(m1.param_count() > 0);
}
