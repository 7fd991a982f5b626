#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "autocomp/compressor.hpp"
#include "autocomp/model.hpp"
#include "autocomp/rng.hpp"
#include "reference_model.hpp"

using namespace autocomp;

namespace {

ModelConfig micro_config(int kappa = 2) {
    ModelConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.context_window = 16;
    cfg.kappa = kappa;
    return cfg;
}

Document random_doc(std::size_t len, int vocab, Rng& rng, const std::string& id = "doc") {
    Document d;
    d.id = id;
    for (std::size_t i = 0; i < len; ++i) d.tokens.push_back(static_cast<int>(rng.below(vocab)));
    return d;
}

Segmentation even_split(std::size_t len, std::size_t n_seg) {
    Segmentation s;
    std::size_t m = len / n_seg;
    for (std::size_t i = 0; i < n_seg; ++i) s.bounds.emplace_back(i * m, (i + 1) * m);
    return s;
}

void validate_segmentation(const Segmentation& s, std::size_t total, const CompressorConfig& cfg) {
    REQUIRE(!s.bounds.empty());
    std::size_t pos = 0;
    for (auto [a, b] : s.bounds) {
        CHECK(a == pos);
        CHECK(b > a);
        pos = b;
        if (!s.undersized) {
            CHECK(b - a >= static_cast<std::size_t>(cfg.min_len));
            CHECK(b - a <= static_cast<std::size_t>(cfg.max_len));
        }
    }
    CHECK(pos == total);
    if (cfg.pair_sum > 0 && !s.undersized) {
        for (std::size_t i = 0; i + 1 < s.bounds.size(); i += 2) {
            CHECK(s.length(i) + s.length(i + 1) == static_cast<std::size_t>(cfg.pair_sum));
        }
    }
}

}  // namespace

TEST_CASE("randomized segmenting satisfies pair-sum and bounds at scale") {
    CompressorConfig cfg;
    cfg.randomized_segmenting = true;
    cfg.min_len = 1024;
    cfg.max_len = 2048;
    cfg.pair_sum = 3072;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(seed);
        Segmentation s = segment_randomized(6144, cfg, rng);
        REQUIRE(s.n_segments() == 4);
        validate_segmentation(s, 6144, cfg);
    }
}

TEST_CASE("randomized segmenting at desk scale: 1000 seeds, zero violations") {
    CompressorConfig cfg;
    cfg.min_len = 32;
    cfg.max_len = 96;
    cfg.pair_sum = 128;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed);
        Segmentation s = segment_randomized(256, cfg, rng);
        REQUIRE(s.n_segments() == 4);
        validate_segmentation(s, 256, cfg);
    }
}

TEST_CASE("document of exactly min_len is a single segment") {
    CompressorConfig cfg;
    cfg.min_len = 32;
    cfg.max_len = 64;
    Rng rng(1);
    Segmentation s = segment_randomized(32, cfg, rng);
    CHECK(s.n_segments() == 1);
    CHECK(s.length(0) == 32);
    CHECK(!s.undersized);
}

TEST_CASE("shorter-than-min documents yield a flagged undersized segment") {
    CompressorConfig cfg;
    cfg.min_len = 32;
    cfg.max_len = 64;
    Rng rng(1);
    Segmentation s = segment_randomized(10, cfg, rng);
    CHECK(s.n_segments() == 1);
    CHECK(s.undersized);
}

TEST_CASE("infeasible pair constraint raises an error") {
    CompressorConfig cfg;
    cfg.min_len = 32;
    cfg.max_len = 64;
    cfg.pair_sum = 300;  // > 2 * max_len
    Rng rng(1);
    CHECK_THROWS_AS(segment_randomized(600, cfg, rng), Error);
}

TEST_CASE("fixed segmenting splits into max_len chunks with a short tail") {
    CompressorConfig cfg;
    cfg.randomized_segmenting = false;
    cfg.min_len = 32;
    cfg.max_len = 64;
    Rng rng(1);
    Segmentation s = segment_randomized(200, cfg, rng);
    REQUIRE(s.n_segments() == 4);
    CHECK(s.length(0) == 64);
    CHECK(s.length(1) == 64);
    CHECK(s.length(2) == 64);
    CHECK(s.length(3) == 8);
}

TEST_CASE("segmenting is deterministic per seed") {
    CompressorConfig cfg;
    cfg.min_len = 32;
    cfg.max_len = 96;
    cfg.pair_sum = 128;
    Rng a(77), b(77);
    Segmentation s1 = segment_randomized(256, cfg, a);
    Segmentation s2 = segment_randomized(256, cfg, b);
    CHECK(s1.bounds == s2.bounds);
}

TEST_CASE("accumulate keeps document order; single-block mode keeps the last") {
    CompressorConfig acc;
    acc.accumulation = true;
    CompressorConfig rmt = acc;
    rmt.accumulation = false;

    std::vector<SummaryBlock<double>> blocks;
    for (int i = 0; i < 3; ++i) {
        SummaryBlock<double> b;
        b.rows = 2;
        b.cols = 2;
        b.values = {double(i), double(i), double(i), double(i)};  // one-hot style tag
        b.source_id = "s" + std::to_string(i);
        blocks.push_back(b);
    }

    SoftPrompt<double> empty = accumulate<double>({}, acc);
    CHECK(empty.total_rows() == 0);

    SoftPrompt<double> all = accumulate(blocks, acc);
    REQUIRE(all.blocks.size() == 3);
    CHECK(all.blocks[0].source_id == "s0");
    CHECK(all.blocks[1].source_id == "s1");
    CHECK(all.blocks[2].source_id == "s2");
    CHECK(all.blocks[0].values[0] == 0.0);
    CHECK(all.blocks[2].values[0] == 2.0);

    SoftPrompt<double> last = accumulate(blocks, rmt);
    REQUIRE(last.blocks.size() == 1);
    CHECK(last.blocks[0].source_id == "s2");
}

TEST_CASE("soft prompt row count before segment 4 with 50-token blocks is 150") {
    CompressorConfig cfg;
    cfg.accumulation = true;
    std::vector<SummaryBlock<double>> blocks;
    for (int i = 0; i < 3; ++i) {
        SummaryBlock<double> b;
        b.rows = 50;
        b.cols = 4;
        b.values.assign(200, 0.0);
        blocks.push_back(b);
    }
    CHECK(accumulate(blocks, cfg).total_rows() == 150);
    cfg.accumulation = false;
    CHECK(accumulate(blocks, cfg).total_rows() == 50);
}

TEST_CASE("compression rate bookkeeping: 2048 tokens into 50 vectors") {
    double rate = 2048.0 / 50.0;
    CHECK(rate > 40.0);
    CHECK(rate < 41.0);
    CHECK(std::floor(rate) == 40.0);  // a segment-to-vector rate of ~40
}

TEST_CASE("compress_segment output matches the reference extraction") {
    Rng rng(3);
    auto model = ModelState<double>::init(micro_config(), rng);
    std::vector<int> seg = {1, 2, 3, 4, 5};
    SummaryBlock<double> blk = compress_segment(model, {}, seg, "p0");
    CHECK(blk.rows == 2);
    CHECK(blk.cols == 8);
    CHECK(blk.source_id == "p0");

    refmodel::RefOut ref = refmodel::forward(model, {}, seg, true);
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t j = 0; j < 8; ++j) {
            CHECK(blk.values[i * 8 + j] == doctest::Approx(ref.states[5 + i][j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("single-segment document loss equals the plain LM cross entropy bit-for-bit") {
    Rng rng(4);
    auto model = ModelState<double>::init(micro_config(), rng);
    Document doc = random_doc(10, 16, rng);
    Segmentation seg = even_split(10, 1);
    CompressorConfig cfg;
    cfg.kappa = 2;

    DocumentResult<double> r = document_loss(model, doc, seg, cfg);
    CHECK(r.scored_tokens == 9);

    std::vector<double> lp = next_token_logprobs(model, {}, doc.tokens);
    double nll = 0.0;
    for (double v : lp) nll += -v;
    double plain = nll / 9.0;
    CHECK(std::memcmp(&r.loss, &plain, sizeof(double)) == 0);
}

TEST_CASE("normalizer counts all tokens except the first of segment 1") {
    Rng rng(5);
    auto model = ModelState<double>::init(micro_config(), rng);
    Document doc = random_doc(8, 16, rng);
    Segmentation seg;
    seg.bounds = {{0, 3}, {3, 8}};
    CompressorConfig cfg;
    cfg.kappa = 2;
    DocumentResult<double> r = document_loss(model, doc, seg, cfg);
    CHECK(r.scored_tokens == 7);  // 8 minus one unscorable first position
    CHECK(r.seg_scored == std::vector<int>{2, 5});
}

TEST_CASE("two-segment loss matches an independent scalar re-implementation") {
    ModelConfig cfg;
    cfg.vocab_size = 8;
    cfg.d_model = 2;
    cfg.n_layers = 1;
    cfg.n_heads = 1;
    cfg.context_window = 8;
    cfg.kappa = 1;
    Rng rng(6);
    auto model = ModelState<double>::init(cfg, rng);

    Document doc;
    doc.id = "two-seg";
    doc.tokens = {1, 5, 2, 7, 0, 3};
    Segmentation seg;
    seg.bounds = {{0, 3}, {3, 6}};
    CompressorConfig cc;
    cc.kappa = 1;

    DocumentResult<double> got = document_loss(model, doc, seg, cc);

    // reference: plain loops, no autograd machinery
    std::vector<int> s1 = {1, 5, 2};
    std::vector<int> s2 = {7, 0, 3};
    refmodel::RefOut r1 = refmodel::forward(model, {}, s1, true);
    double nll = 0.0;
    nll += -refmodel::log_softmax_at(r1.logits[0], s1[1]);
    nll += -refmodel::log_softmax_at(r1.logits[1], s1[2]);
    refmodel::Mat sigma1 = {r1.states[3]};  // kappa = 1 summary row
    refmodel::RefOut r2 = refmodel::forward(model, sigma1, s2, false);
    nll += -refmodel::log_softmax_at(r2.logits[0], s2[0]);  // prompt tail row
    nll += -refmodel::log_softmax_at(r2.logits[1], s2[1]);
    nll += -refmodel::log_softmax_at(r2.logits[2], s2[2]);
    double want = nll / 5.0;
    CHECK(got.loss == doctest::Approx(want).epsilon(1e-10));
}

TEST_CASE("segment-1 per-token logprobs are bit-identical to the plain LM path") {
    Rng rng(7);
    auto model = ModelState<double>::init(micro_config(), rng);
    Document doc = random_doc(12, 16, rng);
    Segmentation seg;
    seg.bounds = {{0, 6}, {6, 12}};
    CompressorConfig cfg;
    cfg.kappa = 2;

    DocTrace<double> trace;
    trace.collect_tokenwise = true;
    document_loss(model, doc, seg, cfg, &trace);

    std::vector<int> s1(doc.tokens.begin(), doc.tokens.begin() + 6);
    std::vector<double> lp = next_token_logprobs(model, {}, s1);
    REQUIRE(trace.seg_nll[0].size() == lp.size());
    for (std::size_t i = 0; i < lp.size(); ++i) {
        double doc_nll = trace.seg_nll[0][i];
        double plain_nll = -lp[i];
        CHECK(std::memcmp(&doc_nll, &plain_nll, sizeof(double)) == 0);
    }
}

TEST_CASE("prompt row counts follow the accumulation law") {
    Rng rng(8);
    auto model = ModelState<double>::init(micro_config(), rng);
    Document doc = random_doc(16, 16, rng);
    Segmentation seg = even_split(16, 4);

    CompressorConfig cfg;
    cfg.kappa = 2;
    cfg.stop_grad_every = 0;

    DocTrace<double> acc_trace;
    document_loss(model, doc, seg, cfg, &acc_trace);
    CHECK(acc_trace.seg_prompt_rows == std::vector<int>{0, 2, 4, 6});  // (i-1) * kappa

    cfg.accumulation = false;
    DocTrace<double> rmt_trace;
    document_loss(model, doc, seg, cfg, &rmt_trace);
    CHECK(rmt_trace.seg_prompt_rows == std::vector<int>{0, 2, 2, 2});  // min(1, i-1) * kappa
}

TEST_CASE("loss value is bit-identical with gradient truncation on or off") {
    Rng rng(9);
    auto model = ModelState<double>::init(micro_config(), rng);
    Document doc = random_doc(16, 16, rng);
    Segmentation seg = even_split(16, 4);

    CompressorConfig off;
    off.kappa = 2;
    off.stop_grad_every = 0;
    CompressorConfig on = off;
    on.stop_grad_every = 2;

    DocumentResult<double> a = document_loss(model, doc, seg, off);
    DocumentResult<double> b = document_loss(model, doc, seg, on);
    CHECK(std::memcmp(&a.loss, &b.loss, sizeof(double)) == 0);
}

TEST_CASE("truncation cuts segment-4 gradient flow into the first block") {
    Rng rng(10);
    auto model = ModelState<double>::init(micro_config(), rng);
    Document doc = random_doc(16, 16, rng);
    Segmentation seg = even_split(16, 4);

    auto probe = [&](int stop_grad_every) {
        CompressorConfig cfg;
        cfg.kappa = 2;
        cfg.stop_grad_every = stop_grad_every;
        auto trace = std::make_shared<DocTrace<double>>();
        trace->keep_graphs = true;
        document_loss(model, doc, seg, cfg, trace.get());
        REQUIRE(trace->block_nodes.size() == 3);
        REQUIRE(trace->ce_nodes.size() == 4);
        // backpropagate only the segment-4 loss term
        auto ce = trace->ce_nodes[3];
        Graph<double>& g = *trace->graphs[static_cast<std::size_t>(ce.chunk)];
        g.backward(g.node(ce.node).out);
        return trace;
    };

    SUBCASE("no truncation: gradient reaches the first block") {
        auto trace = probe(0);
        CHECK(trace->n_chunks == 1);
        auto b0 = trace->block_nodes[0];
        const std::vector<double>* grad =
            trace->graphs[static_cast<std::size_t>(b0.chunk)]->grad(b0.node);
        REQUIRE(grad != nullptr);
        double mag = 0.0;
        for (double v : *grad) mag += std::abs(v);
        CHECK(mag > 0.0);
    }
    SUBCASE("every two steps: blocks one and two are unreachable, three is live") {
        auto trace = probe(2);
        CHECK(trace->n_chunks == 2);
        auto b0 = trace->block_nodes[0];
        auto b1 = trace->block_nodes[1];
        auto b2 = trace->block_nodes[2];
        CHECK(b0.chunk == 0);
        CHECK(b2.chunk == 1);
        // segment-4 loss lives in chunk 1; blocks from chunk 0 get nothing
        CHECK(trace->graphs[static_cast<std::size_t>(b0.chunk)]->grad(b0.node) == nullptr);
        CHECK(trace->graphs[static_cast<std::size_t>(b1.chunk)]->grad(b1.node) == nullptr);
        const std::vector<double>* g2 =
            trace->graphs[static_cast<std::size_t>(b2.chunk)]->grad(b2.node);
        REQUIRE(g2 != nullptr);
        double mag = 0.0;
        for (double v : *g2) mag += std::abs(v);
        CHECK(mag > 0.0);
    }
}

TEST_CASE("truncation on a two-segment document leaves gradients identical") {
    Rng rng(11);
    auto model = ModelState<double>::init(micro_config(), rng);
    Document doc = random_doc(12, 16, rng);
    Segmentation seg = even_split(12, 2);

    auto grads_for = [&](int k) {
        CompressorConfig cfg;
        cfg.kappa = 2;
        cfg.stop_grad_every = k;
        GradAccum<double> sink;
        process_document(model, doc, seg, cfg, &sink);
        return sink;
    };
    GradAccum<double> a = grads_for(0);
    GradAccum<double> b = grads_for(2);
    REQUIRE(a.g.size() == b.g.size());
    for (std::size_t i = 0; i < a.g.size(); ++i) {
        REQUIRE(a.g[i].size() == b.g[i].size());
        CHECK(std::memcmp(a.g[i].data(), b.g[i].data(), a.g[i].size() * sizeof(double)) == 0);
    }
}

TEST_CASE("truncation strictly shrinks the peak recorded graph") {
    Rng rng(12);
    ModelConfig mc = micro_config();
    mc.context_window = 8;
    auto model = ModelState<double>::init(mc, rng);
    Document doc = random_doc(36, 16, rng);
    Segmentation seg = even_split(36, 6);

    auto peak_for = [&](int k) {
        CompressorConfig cfg;
        cfg.kappa = 2;
        cfg.stop_grad_every = k;
        DocTrace<double> trace;
        GradAccum<double> sink;
        process_document(model, doc, seg, cfg, &sink, &trace);
        return trace.peak_graph_ops;
    };
    std::size_t with = peak_for(2);
    std::size_t without = peak_for(0);
    CHECK(with < without);
}

TEST_CASE("document gradients pass central finite differences") {
    ModelConfig mc;
    mc.vocab_size = 8;
    mc.d_model = 4;
    mc.n_layers = 1;
    mc.n_heads = 2;
    mc.context_window = 8;
    mc.kappa = 1;
    Rng rng(13);
    auto model = ModelState<double>::init(mc, rng);

    Document doc = random_doc(8, 8, rng);
    Segmentation seg = even_split(8, 2);
    CompressorConfig cfg;
    cfg.kappa = 1;
    cfg.stop_grad_every = 0;

    GradAccum<double> sink;
    process_document(model, doc, seg, cfg, &sink);

    auto params = model.params();
    const double h = 1e-5;
    for (std::size_t p = 0; p < params.size(); ++p) {
        // probe a handful of coordinates per tensor to keep runtime sane
        std::size_t n = params[p]->numel();
        for (std::size_t q = 0; q < n; q += (n > 8 ? n / 4 : 1)) {
            double saved = (*params[p]->data)[q];
            (*params[p]->data)[q] = saved + h;
            double up = document_loss(model, doc, seg, cfg).loss;
            (*params[p]->data)[q] = saved - h;
            double down = document_loss(model, doc, seg, cfg).loss;
            (*params[p]->data)[q] = saved;
            double fd = (up - down) / (2 * h);
            double ad = sink.g[p][q];
            double err = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-3});
            INFO("param ", p, " coord ", q, " ad=", ad, " fd=", fd);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("train_step with zero learning rate leaves parameters untouched") {
    Rng rng(14);
    auto model = ModelState<double>::init(micro_config(), rng);
    std::vector<std::vector<double>> before;
    for (auto* p : model.params()) before.push_back(*p->data);

    OptimizerConfig oc;
    oc.lr = 0.0;
    AdamOptimizer<double> opt(oc);
    GradAccum<double> grads;
    CompressorConfig cfg;
    cfg.kappa = 2;
    cfg.min_len = 4;
    cfg.max_len = 8;
    Document doc = random_doc(16, 16, rng);
    Rng step_rng(1);
    train_step(model, doc, cfg, opt, grads, step_rng);

    auto params = model.params();
    for (std::size_t i = 0; i < params.size(); ++i) {
        CHECK(std::memcmp(params[i]->ptr(), before[i].data(),
                          before[i].size() * sizeof(double)) == 0);
    }
}

TEST_CASE("train_step aborts on a non-finite loss") {
    Rng rng(15);
    auto model = ModelState<double>::init(micro_config(), rng);
    (*model.tok_emb.data)[0] = std::numeric_limits<double>::quiet_NaN();

    AdamOptimizer<double> opt;
    GradAccum<double> grads;
    CompressorConfig cfg;
    cfg.kappa = 2;
    cfg.min_len = 4;
    cfg.max_len = 8;
    Document doc;
    doc.id = "nan-doc";
    doc.tokens = std::vector<int>(16, 0);
    Rng step_rng(1);
    try {
        train_step(model, doc, cfg, opt, grads, step_rng);
        FAIL("expected abort");
    } catch (const Error& e) {
        CHECK(e.code() == "train.nan");
        CHECK(std::string(e.what()).find("nan-doc") != std::string::npos);
    }
}

TEST_CASE("train_step is deterministic given seed, config, and document") {
    auto run = [] {
        Rng rng(16);
        auto model = ModelState<double>::init(micro_config(), rng);
        AdamOptimizer<double> opt;
        GradAccum<double> grads;
        CompressorConfig cfg;
        cfg.kappa = 2;
        cfg.min_len = 4;
        cfg.max_len = 8;
        Rng step_rng(2);
        Rng doc_rng(3);
        double last = 0.0;
        for (int s = 0; s < 3; ++s) {
            Document doc = random_doc(16, 16, doc_rng, "d" + std::to_string(s));
            last = train_step(model, doc, cfg, opt, grads, step_rng).loss;
        }
        return last;
    };
    double a = run();
    double b = run();
    CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
}
