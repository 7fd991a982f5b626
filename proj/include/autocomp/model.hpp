#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "autocomp/error.hpp"
#include "autocomp/io.hpp"
#include "autocomp/rng.hpp"
#include "autocomp/tensor.hpp"

namespace autocomp {

enum class PositionalMode : std::uint8_t { absolute, rotary };

inline std::string to_string(PositionalMode m) {
    return m == PositionalMode::absolute ? "absolute" : "rotary";
}

inline PositionalMode positional_mode_from(const std::string& s) {
    if (s == "absolute") return PositionalMode::absolute;
    if (s == "rotary") return PositionalMode::rotary;
    fail("config.value", "unknown positional_mode: " + s);
}

struct ModelConfig {
    int vocab_size = 256;
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 4;
    int context_window = 128;
    int kappa = 4;
    PositionalMode positional_mode = PositionalMode::absolute;
    int mlp_ratio = 4;
    bool tie_output_head = false;
    int max_layout = 1024;  // hard cap on prompt rows + tokens + summary slots

    void validate() const {
        require(vocab_size >= 2, "config.value", "vocab_size must be >= 2");
        require(d_model > 0 && n_heads > 0 && d_model % n_heads == 0, "config.value",
                "d_model must be positive and divisible by n_heads");
        require(n_layers >= 1, "config.value", "n_layers must be >= 1");
        require(context_window >= 1, "config.value", "context_window must be >= 1");
        require(kappa >= 0, "config.value", "kappa must be >= 0");
        require(mlp_ratio >= 1, "config.value", "mlp_ratio must be >= 1");
        require(max_layout >= context_window, "config.value",
                "max_layout must cover the context window");
        if (positional_mode == PositionalMode::rotary) {
            require((d_model / n_heads) % 2 == 0, "config.value",
                    "rotary mode needs an even head dimension");
        }
    }

    int head_dim() const { return d_model / n_heads; }
    int mlp_hidden() const { return d_model * mlp_ratio; }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["vocab_size"] = vocab_size;
        j["d_model"] = d_model;
        j["n_layers"] = n_layers;
        j["n_heads"] = n_heads;
        j["context_window"] = context_window;
        j["kappa"] = kappa;
        j["positional_mode"] = to_string(positional_mode);
        j["mlp_ratio"] = mlp_ratio;
        j["tie_output_head"] = tie_output_head;
        j["max_layout"] = max_layout;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            if (k == "vocab_size") c.vocab_size = it.value().get<int>();
            else if (k == "d_model") c.d_model = it.value().get<int>();
            else if (k == "n_layers") c.n_layers = it.value().get<int>();
            else if (k == "n_heads") c.n_heads = it.value().get<int>();
            else if (k == "context_window") c.context_window = it.value().get<int>();
            else if (k == "kappa") c.kappa = it.value().get<int>();
            else if (k == "positional_mode") c.positional_mode = positional_mode_from(it.value().get<std::string>());
            else if (k == "mlp_ratio") c.mlp_ratio = it.value().get<int>();
            else if (k == "tie_output_head") c.tie_output_head = it.value().get<bool>();
            else if (k == "max_layout") c.max_layout = it.value().get<int>();
            else fail("config.key", "unknown model config key: " + k);
        }
        c.validate();
        return c;
    }
};

// One compressed segment: kappa rows of d_model summary state.
template <typename T>
struct SummaryBlock {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> values;  // row-major rows x cols
    std::string source_id;

    bool all_finite() const {
        for (T v : values) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }
};

// Ordered concatenation of summary blocks fed to the model as a soft prompt.
template <typename T>
struct SoftPrompt {
    std::vector<SummaryBlock<T>> blocks;

    std::size_t total_rows() const {
        std::size_t n = 0;
        for (const auto& b : blocks) n += b.rows;
        return n;
    }
    bool empty() const { return blocks.empty(); }
};

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct ModelState {
    ModelConfig cfg;

    Tensor<T> tok_emb;  // vocab x d
    Tensor<T> sum_emb;  // kappa x d
    Tensor<T> pos_emb;  // context_window x d (absolute mode only)

    struct Layer {
        Tensor<T> ln1_g, ln1_b;
        Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor<T> ln2_g, ln2_b;
        Tensor<T> w1, b1, w2, b2;
    };
    std::vector<Layer> layers;

    Tensor<T> lnf_g, lnf_b;
    Tensor<T> head_w;  // d x vocab (absent when tied)

    static ModelState init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        ModelState s;
        s.cfg = cfg;
        std::size_t d = static_cast<std::size_t>(cfg.d_model);
        std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
        const double w_std = 0.08;

        auto normal = [&](std::vector<std::size_t> shape, double std_dev) {
            Tensor<T> t = Tensor<T>::zeros(std::move(shape));
            for (auto& x : *t.data) x = static_cast<T>(rng.normal(0.0, std_dev));
            return t;
        };
        auto filled = [&](std::vector<std::size_t> shape, T value) {
            Tensor<T> t = Tensor<T>::zeros(std::move(shape));
            for (auto& x : *t.data) x = value;
            return t;
        };

        s.tok_emb = normal({v, d}, w_std);

        // Summary token embeddings start at the vocab-embedding mean plus a
        // small per-token perturbation so they are distinct and trainable.
        s.sum_emb = Tensor<T>::zeros({static_cast<std::size_t>(cfg.kappa), d});
        std::vector<double> mean(d, 0.0);
        for (std::size_t i = 0; i < v; ++i) {
            for (std::size_t j = 0; j < d; ++j) mean[j] += static_cast<double>(s.tok_emb.at(i, j));
        }
        for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(v);
        for (int i = 0; i < cfg.kappa; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                s.sum_emb.at(static_cast<std::size_t>(i), j) =
                    static_cast<T>(mean[j] + rng.normal(0.0, 0.01));
            }
        }

        if (cfg.positional_mode == PositionalMode::absolute) {
            s.pos_emb = normal({static_cast<std::size_t>(cfg.context_window), d}, w_std);
        }

        s.layers.resize(static_cast<std::size_t>(cfg.n_layers));
        std::size_t h = static_cast<std::size_t>(cfg.mlp_hidden());
        for (auto& l : s.layers) {
            l.ln1_g = filled({d}, T(1));
            l.ln1_b = filled({d}, T(0));
            l.wq = normal({d, d}, w_std);
            l.bq = filled({d}, T(0));
            l.wk = normal({d, d}, w_std);
            l.bk = filled({d}, T(0));
            l.wv = normal({d, d}, w_std);
            l.bv = filled({d}, T(0));
            l.wo = normal({d, d}, w_std);
            l.bo = filled({d}, T(0));
            l.ln2_g = filled({d}, T(1));
            l.ln2_b = filled({d}, T(0));
            l.w1 = normal({d, h}, w_std);
            l.b1 = filled({h}, T(0));
            l.w2 = normal({h, d}, w_std);
            l.b2 = filled({d}, T(0));
        }

        s.lnf_g = filled({d}, T(1));
        s.lnf_b = filled({d}, T(0));
        if (!cfg.tie_output_head) s.head_w = normal({d, v}, w_std);
        return s;
    }

    // Fixed parameter enumeration; also the checkpoint serialization order.
    std::vector<Tensor<T>*> params() {
        std::vector<Tensor<T>*> out;
        out.push_back(&tok_emb);
        out.push_back(&sum_emb);
        if (cfg.positional_mode == PositionalMode::absolute) out.push_back(&pos_emb);
        for (auto& l : layers) {
            for (Tensor<T>* t : {&l.ln1_g, &l.ln1_b, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv,
                                 &l.wo, &l.bo, &l.ln2_g, &l.ln2_b, &l.w1, &l.b1, &l.w2, &l.b2}) {
                out.push_back(t);
            }
        }
        out.push_back(&lnf_g);
        out.push_back(&lnf_b);
        if (!cfg.tie_output_head) out.push_back(&head_w);
        return out;
    }

    std::size_t param_count() {
        std::size_t n = 0;
        for (Tensor<T>* t : params()) n += t->numel();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

// Graph-registered parameter handles, in params() order.
template <typename T>
struct BoundModel {
    const ModelConfig* cfg = nullptr;
    Graph<T>* g = nullptr;
    std::vector<Tensor<T>> leaves;

    const Tensor<T>& tok_emb() const { return leaves[0]; }
    const Tensor<T>& sum_emb() const { return leaves[1]; }
    const Tensor<T>& pos_emb() const { return leaves[2]; }

    std::size_t layer_base(int layer) const {
        std::size_t fixed = cfg->positional_mode == PositionalMode::absolute ? 3 : 2;
        return fixed + static_cast<std::size_t>(layer) * 16;
    }
    std::size_t tail_base() const { return layer_base(cfg->n_layers); }
};

template <typename T>
BoundModel<T> bind(Graph<T>& g, ModelState<T>& state, bool trainable) {
    BoundModel<T> b;
    b.cfg = &state.cfg;
    b.g = &g;
    for (Tensor<T>* p : state.params()) b.leaves.push_back(g.leaf(*p, trainable));
    return b;
}

template <typename T>
struct ForwardResult {
    // Row t holds the next-token distribution read at token position t
    // (predicts tokens[t + 1]; the last row predicts the continuation).
    Tensor<T> logits;
    // Distribution for tokens[0], read at the last prompt row. Present only
    // when the soft prompt is non-empty.
    std::optional<Tensor<T>> prompt_tail_logits;
    std::optional<Tensor<T>> summary;  // kappa x d final-layer states
};

// Layout: [prompt rows][token embeddings][kappa summary-token embeddings when
// emitting]. Absolute positions are added to real-token rows only, always
// starting at table row 0; rotary phases run over layout positions.
template <typename T>
ForwardResult<T> forward(const BoundModel<T>& b, const std::vector<Tensor<T>>& prompt_rows,
                         const std::vector<int>& tokens, bool emit_summary) {
    const ModelConfig& cfg = *b.cfg;
    Graph<T>& g = *b.g;
    AUTOCOMP_REQUIRE(!tokens.empty(), "forward.tokens", "forward: empty token sequence");
    AUTOCOMP_REQUIRE(tokens.size() <= static_cast<std::size_t>(cfg.context_window), "forward.window",
            "forward: " + std::to_string(tokens.size()) + " tokens exceed context_window " +
                std::to_string(cfg.context_window));
    AUTOCOMP_REQUIRE(!emit_summary || cfg.kappa >= 1, "forward.kappa",
            "forward: emit_summary requires kappa >= 1");

    std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::size_t m = tokens.size();
    std::size_t prompt_len = 0;
    for (const auto& t : prompt_rows) {
        AUTOCOMP_REQUIRE(t.rank() == 2 && t.shape[1] == d, "forward.prompt",
                "forward: prompt block has width " + std::to_string(t.cols()) +
                    ", expected d_model " + std::to_string(d));
        prompt_len += t.shape[0];
    }
    std::size_t kap = emit_summary ? static_cast<std::size_t>(cfg.kappa) : 0;
    std::size_t layout = prompt_len + m + kap;
    AUTOCOMP_REQUIRE(layout <= static_cast<std::size_t>(cfg.max_layout), "forward.layout",
            "forward: layout of " + std::to_string(layout) + " positions exceeds max_layout cap " +
                std::to_string(cfg.max_layout));

    Tensor<T> x_tok = g.embedding(b.tok_emb(), tokens);
    if (cfg.positional_mode == PositionalMode::absolute) {
        x_tok = g.add(x_tok, g.slice(b.pos_emb(), 0, 0, m));
    }

    std::vector<Tensor<T>> parts = prompt_rows;
    parts.push_back(x_tok);
    if (emit_summary) parts.push_back(b.sum_emb());
    Tensor<T> x = parts.size() == 1 ? parts[0] : g.concat_rows(parts);

    std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    T inv_sqrt_hd = T(1) / std::sqrt(static_cast<T>(hd));

    for (int li = 0; li < cfg.n_layers; ++li) {
        std::size_t base = b.layer_base(li);
        const auto& L = b.leaves;
        Tensor<T> h = g.layer_norm(x, L[base + 0], L[base + 1]);
        Tensor<T> q = g.matmul_bias(h, L[base + 2], L[base + 3]);
        Tensor<T> k = g.matmul_bias(h, L[base + 4], L[base + 5]);
        Tensor<T> v = g.matmul_bias(h, L[base + 6], L[base + 7]);
        if (cfg.positional_mode == PositionalMode::rotary) {
            q = g.rope(q, cfg.n_heads);
            k = g.rope(k, cfg.n_heads);
        }
        std::vector<Tensor<T>> head_outs;
        head_outs.reserve(static_cast<std::size_t>(cfg.n_heads));
        for (int hh = 0; hh < cfg.n_heads; ++hh) {
            std::size_t off = static_cast<std::size_t>(hh) * hd;
            Tensor<T> qh = g.slice(q, 1, off, hd);
            Tensor<T> kh = g.slice(k, 1, off, hd);
            Tensor<T> vh = g.slice(v, 1, off, hd);
            Tensor<T> s = g.scale(g.matmul(qh, kh, /*transpose_b=*/true), inv_sqrt_hd);
            Tensor<T> a = g.causal_row_softmax(s);
            head_outs.push_back(g.matmul(a, vh));
        }
        Tensor<T> attn = cfg.n_heads == 1 ? head_outs[0] : g.concat_cols(head_outs);
        x = g.add(x, g.matmul_bias(attn, L[base + 8], L[base + 9]));

        Tensor<T> h2 = g.layer_norm(x, L[base + 10], L[base + 11]);
        Tensor<T> inner = g.gelu(g.matmul_bias(h2, L[base + 12], L[base + 13]));
        x = g.add(x, g.matmul_bias(inner, L[base + 14], L[base + 15]));
    }

    std::size_t tb = b.tail_base();
    Tensor<T> final_states = g.layer_norm(x, b.leaves[tb], b.leaves[tb + 1]);

    auto project = [&](Tensor<T> rows) {
        if (cfg.tie_output_head) return g.matmul(rows, b.tok_emb(), /*transpose_b=*/true);
        return g.matmul(rows, b.leaves[tb + 2]);
    };

    ForwardResult<T> out;
    out.logits = project(g.slice(final_states, 0, prompt_len, m));
    if (prompt_len > 0) {
        out.prompt_tail_logits = project(g.slice(final_states, 0, prompt_len - 1, 1));
    }
    if (emit_summary) {
        out.summary = g.slice(final_states, 0, prompt_len + m, kap);
    }
    return out;
}

// Per-row negative log-likelihood of targets, same arithmetic as the loss op.
template <typename T>
std::vector<T> nll_rows(const Tensor<T>& logits, const std::vector<int>& targets) {
    AUTOCOMP_REQUIRE(logits.rank() == 2 && logits.shape[0] == targets.size(), "op.shape",
            "nll_rows: need one target per row");
    std::size_t m = logits.shape[0], n = logits.shape[1];
    std::vector<T> out(m);
    const T* pl = logits.ptr();
    for (std::size_t i = 0; i < m; ++i) {
        const T* x = pl + i * n;
        T mx = x[0];
        for (std::size_t j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
        T denom = T(0);
        for (std::size_t j = 0; j < n; ++j) denom += std::exp(x[j] - mx);
        T lse = std::log(denom);
        out[i] = -(x[static_cast<std::size_t>(targets[i])] - mx - lse);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Value-level wrappers used by evaluation paths (no gradients).
// ---------------------------------------------------------------------------

template <typename T>
std::vector<Tensor<T>> register_prompt(Graph<T>& g, const SoftPrompt<T>& prompt,
                                       const ModelConfig& cfg) {
    std::vector<Tensor<T>> rows;
    for (const auto& blk : prompt.blocks) {
        AUTOCOMP_REQUIRE(blk.cols == static_cast<std::size_t>(cfg.d_model), "forward.prompt",
                "prompt block width " + std::to_string(blk.cols) + " != d_model");
        rows.push_back(g.constant(Tensor<T>::from_values({blk.rows, blk.cols}, blk.values)));
    }
    return rows;
}

template <typename T>
struct EvalForward {
    Tensor<T> logits;
    std::optional<Tensor<T>> prompt_tail_logits;
    SummaryBlock<T> summary;
};

template <typename T>
EvalForward<T> forward_eval(ModelState<T>& model, const SoftPrompt<T>& prompt,
                            const std::vector<int>& tokens, bool emit_summary) {
    Graph<T> g;
    BoundModel<T> b = bind(g, model, /*trainable=*/false);
    ForwardResult<T> r = forward(b, register_prompt(g, prompt, model.cfg), tokens, emit_summary);
    EvalForward<T> out;
    out.logits = r.logits;
    out.prompt_tail_logits = r.prompt_tail_logits;
    if (r.summary) {
        out.summary.rows = r.summary->shape[0];
        out.summary.cols = r.summary->shape[1];
        out.summary.values = *r.summary->data;
    }
    return out;
}

// Log-probability of each observed next token, for positions 2..len.
template <typename T>
std::vector<T> next_token_logprobs(ModelState<T>& model, const SoftPrompt<T>& prompt,
                                   const std::vector<int>& tokens) {
    AUTOCOMP_REQUIRE(tokens.size() >= 2, "forward.tokens", "next_token_logprobs: need at least 2 tokens");
    EvalForward<T> r = forward_eval(model, prompt, tokens, /*emit_summary=*/false);
    std::vector<int> targets(tokens.begin() + 1, tokens.end());
    std::size_t m = tokens.size() - 1;
    Tensor<T> rows = Tensor<T>::from_values(
        {m, r.logits.shape[1]},
        std::vector<T>(r.logits.ptr(), r.logits.ptr() + m * r.logits.shape[1]));
    std::vector<T> nll = nll_rows(rows, targets);
    std::vector<T> lp(m);
    for (std::size_t i = 0; i < m; ++i) lp[i] = -nll[i];
    return lp;
}

// ---------------------------------------------------------------------------
// Checkpoints: "ACLM" magic, version, length-prefixed config JSON, then all
// parameter tensors as float32 in params() order.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

template <typename T>
void save_checkpoint(ModelState<T>& model, const std::string& path) {
    std::ofstream os = open_out(path);
    write_bytes(os, "ACLM", 4);
    write_scalar<std::uint16_t>(os, kCheckpointVersion);
    std::string cfg = model.cfg.to_json().dump();
    write_scalar<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.size()));
    write_bytes(os, cfg.data(), cfg.size());
    for (Tensor<T>* p : model.params()) {
        for (T v : *p->data) write_scalar<float>(os, static_cast<float>(v));
    }
}

inline ModelConfig read_checkpoint_header(std::istream& is) {
    char magic[4];
    read_bytes(is, magic, 4, "checkpoint magic");
    require(std::string(magic, 4) == "ACLM", "checkpoint.magic",
            "not a model checkpoint (bad magic)");
    std::uint16_t version = read_scalar<std::uint16_t>(is, "checkpoint version");
    require(version == kCheckpointVersion, "checkpoint.version",
            "unsupported checkpoint version " + std::to_string(version));
    std::uint32_t len = read_scalar<std::uint32_t>(is, "checkpoint config length");
    require(len < (1u << 20), "checkpoint.header", "config block is implausibly large");
    std::string cfg(len, '\0');
    read_bytes(is, cfg.data(), len, "checkpoint config");
    nlohmann::json j = nlohmann::json::parse(cfg, nullptr, false);
    require(!j.is_discarded(), "checkpoint.header", "config block is not valid JSON");
    return ModelConfig::from_json(j);
}

template <typename T>
ModelState<T> load_checkpoint(const std::string& path) {
    std::ifstream is = open_in(path);
    ModelConfig cfg = read_checkpoint_header(is);
    ModelState<T> model;
    model.cfg = cfg;
    Rng rng(0);
    model = ModelState<T>::init(cfg, rng);  // allocate shapes, then overwrite
    for (Tensor<T>* p : model.params()) {
        for (T& v : *p->data) v = static_cast<T>(read_scalar<float>(is, "checkpoint tensor"));
    }
    char extra;
    is.read(&extra, 1);
    require(is.eof(), "checkpoint.trailing", "checkpoint has trailing bytes");
    return model;
}

}  // namespace autocomp
