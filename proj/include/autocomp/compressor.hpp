#pragma once

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "autocomp/error.hpp"
#include "autocomp/model.hpp"
#include "autocomp/rng.hpp"
#include "autocomp/tensor.hpp"

namespace autocomp {

struct Document {
    std::string id;
    std::vector<int> tokens;
};

struct Segmentation {
    std::vector<std::pair<std::size_t, std::size_t>> bounds;  // [start, end)
    bool undersized = false;  // document shorter than min_len

    std::size_t n_segments() const { return bounds.size(); }
    std::size_t length(std::size_t i) const { return bounds[i].second - bounds[i].first; }
    std::size_t total() const { return bounds.empty() ? 0 : bounds.back().second; }
};

struct CompressorConfig {
    int kappa = 4;
    bool accumulation = true;  // false keeps only the newest block (RMT-style)
    bool randomized_segmenting = true;
    int stop_grad_every = 2;  // truncation period in compression steps; 0 disables
    int min_len = 32;
    int max_len = 64;
    int pair_sum = 0;  // when > 0, consecutive segment pairs sum to this total

    void validate() const {
        require(kappa >= 0, "config.value", "kappa must be >= 0");
        require(min_len >= 1 && min_len <= max_len, "config.value",
                "need 1 <= min_len <= max_len");
        require(stop_grad_every >= 0, "config.value", "stop_grad_every must be >= 0");
        if (pair_sum > 0) {
            require(pair_sum >= 2 * min_len && pair_sum <= 2 * max_len, "segment.pair_sum",
                    "pair_sum " + std::to_string(pair_sum) + " infeasible for bounds [" +
                        std::to_string(min_len) + ", " + std::to_string(max_len) + "]");
        }
    }
};

// ---------------------------------------------------------------------------
// Segmenting
// ---------------------------------------------------------------------------

namespace detail {

// Sample n lengths in [lo, hi] that sum exactly to len.
inline std::vector<std::size_t> feasible_lengths(std::size_t len, std::size_t lo, std::size_t hi,
                                                 Rng& rng) {
    std::size_t n = (len + hi - 1) / hi;
    while (n > 1 && n * lo > len) --n;
    AUTOCOMP_REQUIRE(n * lo <= len && n * hi >= len, "segment.bounds",
            "no partition of " + std::to_string(len) + " tokens with segment bounds [" +
                std::to_string(lo) + ", " + std::to_string(hi) + "]");
    std::vector<std::size_t> out;
    std::size_t rem = len;
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t left = n - i - 1;
        if (left == 0) {
            out.push_back(rem);
            break;
        }
        std::size_t lo_i = rem > left * hi ? rem - left * hi : lo;
        if (lo_i < lo) lo_i = lo;
        std::size_t hi_i = rem - left * lo < hi ? rem - left * lo : hi;
        std::size_t m = static_cast<std::size_t>(
            rng.uniform_int(static_cast<std::int64_t>(lo_i), static_cast<std::int64_t>(hi_i)));
        out.push_back(m);
        rem -= m;
    }
    return out;
}

}  // namespace detail

// Variable-length split used during training. With pair_sum set, consecutive
// segment pairs are constrained to a fixed total so the schedule sees many
// length combinations while document position budgets stay stable.
inline Segmentation segment_randomized(std::size_t doc_len, const CompressorConfig& cfg,
                                       Rng& rng) {
    cfg.validate();
    AUTOCOMP_REQUIRE(doc_len >= 1, "segment.empty", "cannot segment an empty document");
    Segmentation seg;
    std::size_t lo = static_cast<std::size_t>(cfg.min_len);
    std::size_t hi = static_cast<std::size_t>(cfg.max_len);

    if (doc_len < lo) {
        seg.bounds.emplace_back(0, doc_len);
        seg.undersized = true;
        return seg;
    }

    std::vector<std::size_t> lengths;
    if (!cfg.randomized_segmenting) {
        std::size_t pos = 0;
        while (pos < doc_len) {
            std::size_t m = doc_len - pos < hi ? doc_len - pos : hi;
            lengths.push_back(m);
            pos += m;
        }
    } else if (cfg.pair_sum > 0) {
        std::size_t pair = static_cast<std::size_t>(cfg.pair_sum);
        std::size_t rem = doc_len;
        while (rem >= pair && (rem == pair || rem - pair >= lo)) {
            std::size_t m1_lo = pair > hi ? pair - hi : lo;
            if (m1_lo < lo) m1_lo = lo;
            std::size_t m1_hi = pair - lo < hi ? pair - lo : hi;
            std::size_t m1 = static_cast<std::size_t>(rng.uniform_int(
                static_cast<std::int64_t>(m1_lo), static_cast<std::int64_t>(m1_hi)));
            lengths.push_back(m1);
            lengths.push_back(pair - m1);
            rem -= pair;
        }
        if (rem > 0) {
            if (rem < lo) {
                lengths.push_back(rem);  // trailing sliver, flagged below
                seg.undersized = true;
            } else {
                for (std::size_t m : detail::feasible_lengths(rem, lo, hi, rng)) {
                    lengths.push_back(m);
                }
            }
        }
    } else {
        lengths = detail::feasible_lengths(doc_len, lo, hi, rng);
    }

    std::size_t pos = 0;
    for (std::size_t m : lengths) {
        seg.bounds.emplace_back(pos, pos + m);
        pos += m;
    }
    AUTOCOMP_REQUIRE(pos == doc_len, "segment.partition", "segment lengths do not partition the document");
    return seg;
}

// ---------------------------------------------------------------------------
// Accumulation & compression
// ---------------------------------------------------------------------------

// All blocks in document order; single-block recurrence keeps only the last.
template <typename T>
SoftPrompt<T> accumulate(const std::vector<SummaryBlock<T>>& blocks,
                         const CompressorConfig& cfg) {
    SoftPrompt<T> p;
    if (blocks.empty()) return p;
    if (cfg.accumulation) {
        p.blocks = blocks;
    } else {
        p.blocks.push_back(blocks.back());
    }
    return p;
}

template <typename T>
SummaryBlock<T> compress_segment(ModelState<T>& model, const SoftPrompt<T>& sigma_prev,
                                 const std::vector<int>& segment, const std::string& source_id = "") {
    EvalForward<T> r = forward_eval(model, sigma_prev, segment, /*emit_summary=*/true);
    r.summary.source_id = source_id;
    return r.summary;
}

// ---------------------------------------------------------------------------
// Document objective with truncated backpropagation
// ---------------------------------------------------------------------------

template <typename T>
struct GradAccum {
    std::vector<std::vector<T>> g;

    void init_like(const std::vector<Tensor<T>*>& params) {
        g.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) g[i].assign(params[i]->numel(), T(0));
    }
    void zero() {
        for (auto& v : g) v.assign(v.size(), T(0));
    }
};

template <typename T>
struct DocTrace {
    bool keep_graphs = false;
    bool collect_tokenwise = false;

    std::vector<double> seg_ce;    // cross-entropy sum per segment
    std::vector<int> seg_scored;   // scored-token count per segment
    std::vector<int> seg_prompt_rows;     // soft-prompt rows seen by each segment
    std::vector<std::vector<T>> seg_nll;  // per-token NLL (collect_tokenwise)
    std::size_t peak_graph_ops = 0;
    int n_chunks = 0;

    struct NodeRef {
        int chunk = -1;
        int node = -1;
    };
    std::vector<NodeRef> block_nodes;  // producing node of each summary block
    std::vector<NodeRef> ce_nodes;     // loss node of each segment
    std::vector<std::unique_ptr<Graph<T>>> graphs;   // populated when keep_graphs
    std::vector<BoundModel<T>> chunk_bounds;         // parameter leaves per chunk
};

template <typename T>
struct DocumentResult {
    double loss = 0.0;
    int scored_tokens = 0;
    std::vector<int> seg_scored;
};

// Runs the per-segment schedule over one document.每 segment is scored
// conditioned on the accumulated prompt; all segments but the last are also
// compressed into a summary block.
//
// stop_grad_every = K > 0 truncates backpropagation: the live graph is cut
// every K compression steps, summary blocks crossing a cut re-enter later
// chunks as constants, and each chunk is backpropagated separately. A block
// produced at step j is emitted inside the chunk of its first consumer, so
// every block still receives training signal from the adjacent segment.
// Values are unaffected: appended summary slots cannot influence token rows
// under the causal mask, so losses match the untruncated schedule bit for bit.
template <typename T>
DocumentResult<T> process_document(ModelState<T>& model, const Document& doc,
                                   const Segmentation& seg, const CompressorConfig& cfg,
                                   GradAccum<T>* sink, DocTrace<T>* trace = nullptr) {
    cfg.validate();
    AUTOCOMP_REQUIRE(cfg.kappa == model.cfg.kappa, "config.value",
            "compressor kappa does not match model kappa");
    AUTOCOMP_REQUIRE(!doc.tokens.empty() && seg.total() == doc.tokens.size(), "segment.partition",
            "segmentation does not cover the document");
    AUTOCOMP_REQUIRE(doc.tokens.size() >= 2, "doc.short", "document must have at least 2 tokens");
    std::size_t n = seg.n_segments();
    for (std::size_t i = 0; i < n; ++i) {
        AUTOCOMP_REQUIRE(seg.length(i) <= static_cast<std::size_t>(model.cfg.context_window),
                "forward.window", "segment " + std::to_string(i) + " exceeds the context window");
    }

    const int K = cfg.stop_grad_every;
    auto chunk_of_emit = [&](std::size_t j) { return K > 0 ? static_cast<int>((j - 1) / K) : 0; };
    auto chunk_of_score = [&](std::size_t i) {
        return i == 1 ? 0 : (K > 0 ? static_cast<int>((i - 2) / K) : 0);
    };

    // Total scored tokens: segment 1's first token has no conditioning source;
    // with kappa = 0 there are no prompts, so every segment loses its first token.
    int N = model.cfg.kappa > 0 ? static_cast<int>(doc.tokens.size()) - 1
                                : static_cast<int>(doc.tokens.size() - n);
    AUTOCOMP_REQUIRE(N >= 1, "doc.short", "document has no scorable tokens");
    T inv_n = T(1) / static_cast<T>(N);

    bool trainable = sink != nullptr || (trace && trace->keep_graphs);
    std::vector<Tensor<T>*> params = model.params();
    if (sink && sink->g.empty()) sink->init_like(params);

    std::vector<SummaryBlock<T>> block_values;   // carried across chunks
    std::vector<Tensor<T>> block_handles;        // graph handles in the live chunk

    std::unique_ptr<Graph<T>> g;
    BoundModel<T> bound;
    std::optional<Tensor<T>> chunk_loss;
    int cur_chunk = -1;
    std::size_t pending_emit = 0;  // 1-based segment index awaiting compression

    DocumentResult<T> result;

    auto finish_chunk = [&]() {
        if (!g) return;
        if (sink && chunk_loss) {
            g->backward(*chunk_loss, inv_n);
            for (std::size_t p = 0; p < params.size(); ++p) {
                const std::vector<T>* gr = g->grad(bound.leaves[p]);
                if (!gr) continue;
                std::vector<T>& acc = sink->g[p];
                for (std::size_t q = 0; q < gr->size(); ++q) acc[q] += (*gr)[q];
            }
        }
        if (trace) {
            if (g->size() > trace->peak_graph_ops) trace->peak_graph_ops = g->size();
            trace->n_chunks++;
            if (trace->keep_graphs) {
                trace->graphs.push_back(std::move(g));
                trace->chunk_bounds.push_back(bound);
            }
        }
        g.reset();
        chunk_loss.reset();
    };

    auto start_chunk = [&]() {
        g = std::make_unique<Graph<T>>();
        bound = bind(*g, model, trainable);
        block_handles.clear();
        for (const auto& blk : block_values) {
            block_handles.push_back(
                g->constant(Tensor<T>::from_values({blk.rows, blk.cols}, blk.values)));
        }
        cur_chunk++;
    };

    auto select_prompt = [&]() {
        std::vector<Tensor<T>> prompt;
        if (!block_handles.empty()) {
            if (cfg.accumulation) {
                prompt = block_handles;
            } else {
                prompt.push_back(block_handles.back());
            }
        }
        return prompt;
    };

    auto record_block = [&](const Tensor<T>& t, std::size_t j) {
        SummaryBlock<T> blk;
        blk.rows = t.shape[0];
        blk.cols = t.shape[1];
        blk.values = *t.data;
        blk.source_id = doc.id + "#" + std::to_string(j);
        block_values.push_back(std::move(blk));
        block_handles.push_back(t);
        if (trace) trace->block_nodes.push_back({cur_chunk, t.node});
    };

    start_chunk();
    double loss_total = 0.0;

    for (std::size_t i = 1; i <= n; ++i) {
        if (chunk_of_score(i) > cur_chunk) {
            finish_chunk();
            start_chunk();
        }
        if (pending_emit) {
            std::vector<int> prev_tokens(
                doc.tokens.begin() + static_cast<std::ptrdiff_t>(seg.bounds[pending_emit - 1].first),
                doc.tokens.begin() + static_cast<std::ptrdiff_t>(seg.bounds[pending_emit - 1].second));
            ForwardResult<T> r = forward(bound, select_prompt(), prev_tokens, /*emit=*/true);
            record_block(*r.summary, pending_emit);
            pending_emit = 0;
        }

        std::vector<int> tokens(
            doc.tokens.begin() + static_cast<std::ptrdiff_t>(seg.bounds[i - 1].first),
            doc.tokens.begin() + static_cast<std::ptrdiff_t>(seg.bounds[i - 1].second));
        std::size_t m = tokens.size();
        bool wants_emit = i < n && model.cfg.kappa > 0;
        bool fuse = wants_emit && chunk_of_emit(i) == cur_chunk;

        std::vector<Tensor<T>> prompt = select_prompt();
        if (trace) {
            int rows = 0;
            for (const auto& p : prompt) rows += static_cast<int>(p.shape[0]);
            trace->seg_prompt_rows.push_back(rows);
        }
        ForwardResult<T> r = forward(bound, prompt, tokens, fuse);

        // scored rows: [prompt tail when present][rows 0..m-2]
        std::vector<Tensor<T>> rows;
        std::vector<int> targets;
        if (i > 1 && r.prompt_tail_logits) {
            rows.push_back(*r.prompt_tail_logits);
            targets.push_back(tokens[0]);
        }
        if (m > 1) {
            rows.push_back(g->slice(r.logits, 0, 0, m - 1));
            for (std::size_t t = 1; t < m; ++t) targets.push_back(tokens[t]);
        }
        int scored = static_cast<int>(targets.size());
        result.seg_scored.push_back(scored);
        result.scored_tokens += scored;

        if (scored > 0) {
            Tensor<T> scored_logits = rows.size() == 1 ? rows[0] : g->concat_rows(rows);
            Tensor<T> ce = g->cross_entropy_sum(scored_logits, targets);
            loss_total += static_cast<double>((*ce.data)[0]);
            chunk_loss = chunk_loss ? g->add(*chunk_loss, ce) : ce;
            if (trace) {
                trace->seg_ce.push_back(static_cast<double>((*ce.data)[0]));
                trace->seg_scored.push_back(scored);
                trace->ce_nodes.push_back({cur_chunk, ce.node});
                if (trace->collect_tokenwise) trace->seg_nll.push_back(nll_rows(scored_logits, targets));
            }
        } else if (trace) {
            trace->seg_ce.push_back(0.0);
            trace->seg_scored.push_back(0);
            trace->ce_nodes.push_back({cur_chunk, -1});
            if (trace->collect_tokenwise) trace->seg_nll.push_back({});
        }

        if (wants_emit) {
            if (fuse) {
                record_block(*r.summary, i);
            } else {
                pending_emit = i;
            }
        }
    }
    finish_chunk();

    AUTOCOMP_REQUIRE(result.scored_tokens == N, "doc.normalizer",
            "scored token count does not match the loss normalizer");
    result.loss = loss_total / static_cast<double>(N);
    AUTOCOMP_REQUIRE(std::isfinite(result.loss), "train.nan", "non-finite document loss on " + doc.id);
    return result;
}

// Cross-entropy of the whole document under the objective, values only.
template <typename T>
DocumentResult<T> document_loss(ModelState<T>& model, const Document& doc, const Segmentation& seg,
                                const CompressorConfig& cfg, DocTrace<T>* trace = nullptr) {
    return process_document<T>(model, doc, seg, cfg, nullptr, trace);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct OptimizerConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int warmup_steps = 100;  // linear warmup
};

template <typename T>
class AdamOptimizer {
public:
    explicit AdamOptimizer(OptimizerConfig cfg = {}) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }
    long long step_count() const { return t_; }

    void step(const std::vector<Tensor<T>*>& params, const GradAccum<T>& grads) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i]->numel(), T(0));
                v_[i].assign(params[i]->numel(), T(0));
            }
        }
        ++t_;
        double warm = cfg_.warmup_steps > 0
                          ? std::min(1.0, static_cast<double>(t_) / cfg_.warmup_steps)
                          : 1.0;
        double lr = cfg_.lr * warm;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            T* w = params[i]->ptr();
            const std::vector<T>& gr = grads.g[i];
            for (std::size_t q = 0; q < gr.size(); ++q) {
                double gq = static_cast<double>(gr[q]);
                double mq = cfg_.beta1 * static_cast<double>(m_[i][q]) + (1.0 - cfg_.beta1) * gq;
                double vq = cfg_.beta2 * static_cast<double>(v_[i][q]) + (1.0 - cfg_.beta2) * gq * gq;
                m_[i][q] = static_cast<T>(mq);
                v_[i][q] = static_cast<T>(vq);
                double mhat = mq / bc1;
                double vhat = vq / bc2;
                w[q] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + cfg_.eps));
            }
        }
    }

private:
    OptimizerConfig cfg_;
    std::vector<std::vector<T>> m_, v_;
    long long t_ = 0;
};

// One optimizer update from one document.
template <typename T>
DocumentResult<T> train_step(ModelState<T>& model, const Document& doc,
                             const CompressorConfig& cfg, AdamOptimizer<T>& opt,
                             GradAccum<T>& grads, Rng& rng, DocTrace<T>* trace = nullptr) {
    Segmentation seg = segment_randomized(doc.tokens.size(), cfg, rng);
    grads.zero();
    DocumentResult<T> r = process_document(model, doc, seg, cfg, &grads, trace);
    opt.step(model.params(), grads);
    return r;
}

}  // namespace autocomp
