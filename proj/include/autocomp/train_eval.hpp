#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "autocomp/compressor.hpp"
#include "autocomp/corpus.hpp"
#include "autocomp/error.hpp"
#include "autocomp/io.hpp"
#include "autocomp/model.hpp"
#include "autocomp/parallel.hpp"
#include "autocomp/version.hpp"

namespace autocomp {

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
    int steps = 2000;
    std::uint64_t seed = 1;
    OptimizerConfig optimizer;
    CompressorConfig compressor;
    std::string checkpoint_path;  // empty = no checkpoints
    int checkpoint_interval = 0;  // extra periodic saves; 0 = only at the end
    int log_every = 0;            // stderr progress; 0 = quiet

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["steps"] = steps;
        j["seed"] = seed;
        j["lr"] = optimizer.lr;
        j["warmup_steps"] = optimizer.warmup_steps;
        j["kappa"] = compressor.kappa;
        j["accumulation"] = compressor.accumulation;
        j["randomized_segmenting"] = compressor.randomized_segmenting;
        j["stop_grad_every"] = compressor.stop_grad_every;
        j["min_len"] = compressor.min_len;
        j["max_len"] = compressor.max_len;
        j["pair_sum"] = compressor.pair_sum;
        return j;
    }
};

struct LossCurve {
    std::vector<std::pair<int, double>> entries;  // (step, loss)

    std::string to_csv() const {
        std::ostringstream os;
        os << "step,loss\n";
        os.precision(17);
        for (auto [s, l] : entries) os << s << "," << l << "\n";
        return os.str();
    }
};

// One document per step, sampled uniformly. On a non-finite loss the step is
// aborted and the pre-step parameters are flushed as the last good checkpoint.
template <typename T>
LossCurve train(ModelState<T>& model, const std::vector<Document>& docs, const TrainConfig& tc) {
    require(!docs.empty(), "train.corpus", "training corpus is empty");
    LossCurve curve;
    Rng rng(tc.seed);
    AdamOptimizer<T> opt(tc.optimizer);
    GradAccum<T> grads;

    for (int step = 1; step <= tc.steps; ++step) {
        const Document& doc = docs[rng.below(docs.size())];
        double loss;
        try {
            loss = train_step(model, doc, tc.compressor, opt, grads, rng).loss;
        } catch (const Error& e) {
            if (e.code() == "train.nan" && !tc.checkpoint_path.empty()) {
                save_checkpoint(model, tc.checkpoint_path);
            }
            throw;
        }
        curve.entries.emplace_back(step, loss);
        if (tc.log_every > 0 && step % tc.log_every == 0) {
            std::fprintf(stderr, "step %d loss %.4f\n", step, loss);
        }
        if (!tc.checkpoint_path.empty() && tc.checkpoint_interval > 0 &&
            step % tc.checkpoint_interval == 0) {
            save_checkpoint(model, tc.checkpoint_path);
        }
    }
    if (!tc.checkpoint_path.empty()) save_checkpoint(model, tc.checkpoint_path);
    return curve;
}

// ---------------------------------------------------------------------------
// Fixed-grid perplexity evaluation
// ---------------------------------------------------------------------------

struct EvalSettings {
    int seg_len = 64;          // evaluation grid; the final segment is fixed
    bool accumulation = true;  // prompt handling for multi-segment compression
};

struct PplReport {
    double ppl = 0.0;
    double mean_nll = 0.0;
    long scored_tokens = 0;
    int docs_used = 0;
    int docs_skipped = 0;
};

// Builds the prompt for the final segment of `doc` by compressing the
// n segments immediately before it, oldest first.
template <typename T>
SoftPrompt<T> compress_context(ModelState<T>& model, const Document& doc, int n_compressed,
                               const EvalSettings& es) {
    std::size_t L = static_cast<std::size_t>(es.seg_len);
    std::size_t need = static_cast<std::size_t>(n_compressed + 1) * L;
    require(doc.tokens.size() >= need, "eval.short", "document too short for this grid");
    std::size_t start = doc.tokens.size() - need;

    std::vector<SummaryBlock<T>> blocks;
    CompressorConfig sel;
    sel.accumulation = es.accumulation;
    sel.kappa = model.cfg.kappa;
    for (int j = 0; j < n_compressed; ++j) {
        std::vector<int> seg(
            doc.tokens.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(j) * L),
            doc.tokens.begin() + static_cast<std::ptrdiff_t>(start + static_cast<std::size_t>(j + 1) * L));
        SoftPrompt<T> prompt = accumulate(blocks, sel);
        blocks.push_back(compress_segment(model, prompt, seg, doc.id + "#" + std::to_string(j)));
    }
    return accumulate(blocks, sel);
}

// Per-token NLLs over the final segment (positions 2..seg_len, the same
// scored set for every n_compressed so conditions are comparable).
template <typename T>
std::vector<T> final_segment_nll(ModelState<T>& model, const Document& doc, int n_compressed,
                                 const EvalSettings& es) {
    SoftPrompt<T> prompt = compress_context(model, doc, n_compressed, es);
    std::size_t L = static_cast<std::size_t>(es.seg_len);
    std::vector<int> fin(doc.tokens.end() - static_cast<std::ptrdiff_t>(L), doc.tokens.end());
    std::vector<T> lp = next_token_logprobs(model, prompt, fin);
    for (auto& v : lp) v = -v;
    return lp;
}

template <typename T>
PplReport eval_final_segment_ppl(ModelState<T>& model, const std::vector<Document>& docs,
                                 int n_compressed, const EvalSettings& es) {
    PplReport rep;
    std::size_t need = static_cast<std::size_t>(n_compressed + 1) *
                       static_cast<std::size_t>(es.seg_len);
    std::vector<std::vector<T>> nlls(docs.size());
    std::vector<char> used(docs.size(), 0);
    parallel_for(docs.size(), [&](std::size_t i) {
        if (docs[i].tokens.size() < need) return;
        nlls[i] = final_segment_nll(model, docs[i], n_compressed, es);
        used[i] = 1;
    });
    double total = 0.0;
    for (std::size_t i = 0; i < docs.size(); ++i) {
        if (!used[i]) {
            rep.docs_skipped++;
            continue;
        }
        rep.docs_used++;
        for (T v : nlls[i]) total += static_cast<double>(v);
        rep.scored_tokens += static_cast<long>(nlls[i].size());
    }
    require(rep.scored_tokens > 0, "eval.empty", "no document was long enough to score");
    rep.mean_nll = total / static_cast<double>(rep.scored_tokens);
    rep.ppl = std::exp(rep.mean_nll);
    return rep;
}

// Mean NLL restricted to annotated answer positions inside the final segment.
template <typename T>
double answer_token_nll(ModelState<T>& model, const std::vector<AnnotatedDoc>& docs,
                        int n_compressed, const EvalSettings& es) {
    double total = 0.0;
    long count = 0;
    std::size_t L = static_cast<std::size_t>(es.seg_len);
    std::vector<std::vector<T>> nlls(docs.size());
    parallel_for(docs.size(), [&](std::size_t i) {
        nlls[i] = final_segment_nll(model, docs[i].doc, n_compressed, es);
    });
    for (std::size_t i = 0; i < docs.size(); ++i) {
        std::size_t fin_start = docs[i].doc.tokens.size() - L;
        for (std::size_t pos : docs[i].answers) {
            require(pos > fin_start && pos < docs[i].doc.tokens.size(), "eval.annotation",
                    "annotated position outside the scorable final segment");
            total += static_cast<double>(nlls[i][pos - fin_start - 1]);
            count++;
        }
    }
    require(count > 0, "eval.empty", "no annotated positions");
    return total / static_cast<double>(count);
}

// ---------------------------------------------------------------------------
// Token-position analysis
// ---------------------------------------------------------------------------

struct TokenwiseReport {
    // Mean probability ratio with/without compressed context per final-segment
    // position (positions 2..seg_len).
    std::vector<double> gain;
    struct TopToken {
        std::string doc_id;
        std::size_t position = 0;  // offset within the final segment
        double ratio = 0.0;
    };
    std::vector<TopToken> top;  // best-improved tokens per document
};

template <typename T>
TokenwiseReport tokenwise_gain(ModelState<T>& model, const std::vector<Document>& docs,
                               int n_compressed, const EvalSettings& es, int top_k = 3) {
    require(n_compressed >= 1, "eval.config", "tokenwise analysis needs compressed context");
    TokenwiseReport rep;
    std::size_t scored = static_cast<std::size_t>(es.seg_len) - 1;
    rep.gain.assign(scored, 0.0);
    std::vector<std::vector<double>> ratios(docs.size());
    parallel_for(docs.size(), [&](std::size_t i) {
        std::vector<T> with = final_segment_nll(model, docs[i], n_compressed, es);
        std::vector<T> without = final_segment_nll(model, docs[i], 0, es);
        std::vector<double> r(scored);
        for (std::size_t t = 0; t < scored; ++t) {
            r[t] = std::exp(static_cast<double>(without[t]) - static_cast<double>(with[t]));
        }
        ratios[i] = std::move(r);
    });
    for (std::size_t i = 0; i < docs.size(); ++i) {
        std::vector<std::size_t> order(scored);
        for (std::size_t t = 0; t < scored; ++t) {
            rep.gain[t] += ratios[i][t];
            order[t] = t;
        }
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return ratios[i][a] > ratios[i][b]; });
        for (int k = 0; k < top_k && k < static_cast<int>(scored); ++k) {
            rep.top.push_back({docs[i].id, order[static_cast<std::size_t>(k)] + 1,
                               ratios[i][order[static_cast<std::size_t>(k)]]});
        }
    }
    for (auto& gn : rep.gain) gn /= static_cast<double>(docs.size());
    return rep;
}

// ---------------------------------------------------------------------------
// Reports & ablation grids
// ---------------------------------------------------------------------------

struct EvalReport {
    std::string name;
    std::uint64_t seed = 0;
    nlohmann::ordered_json config_echo;
    std::vector<std::pair<int, double>> ppl_by_n;
    std::vector<double> tokenwise;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["name"] = name;
        j["version"] = kVersion;
        j["seed"] = seed;
        j["config"] = config_echo;
        j["config_hash"] = hash_hex(config_echo.dump());
        nlohmann::ordered_json ppl = nlohmann::ordered_json::array();
        for (auto [n, p] : ppl_by_n) {
            nlohmann::ordered_json e;
            e["n_compressed"] = n;
            e["ppl"] = p;
            ppl.push_back(std::move(e));
        }
        j["final_segment_ppl"] = std::move(ppl);
        if (!tokenwise.empty()) j["tokenwise_gain"] = tokenwise;
        return j;
    }
};

struct AblationPoint {
    std::string name;
    TrainConfig train;
};

// Trains one model per grid point (identical seeds unless the caller varies
// them) and evaluates final-segment perplexity across compression depths.
template <typename T>
std::vector<EvalReport> run_ablation(const ModelConfig& mc, const std::vector<AblationPoint>& grid,
                                     const std::vector<Document>& train_docs,
                                     const std::vector<Document>& eval_docs,
                                     const std::vector<int>& n_values, const EvalSettings& es) {
    std::vector<EvalReport> out;
    for (const auto& point : grid) {
        ModelConfig cfg = mc;
        cfg.kappa = point.train.compressor.kappa;
        Rng rng(point.train.seed);
        ModelState<T> model = ModelState<T>::init(cfg, rng);
        train(model, train_docs, point.train);

        EvalReport rep;
        rep.name = point.name;
        rep.seed = point.train.seed;
        rep.config_echo = point.train.to_json();
        EvalSettings local = es;
        local.accumulation = point.train.compressor.accumulation;
        for (int n : n_values) {
            rep.ppl_by_n.emplace_back(n, eval_final_segment_ppl(model, eval_docs, n, local).ppl);
        }
        out.push_back(std::move(rep));
    }
    return out;
}

inline std::vector<Document> plain_docs(const SyntheticCorpus& c) {
    std::vector<Document> out;
    out.reserve(c.docs.size());
    for (const auto& d : c.docs) out.push_back(d.doc);
    return out;
}

}  // namespace autocomp
