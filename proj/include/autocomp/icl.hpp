#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "autocomp/compressor.hpp"
#include "autocomp/corpus.hpp"
#include "autocomp/error.hpp"
#include "autocomp/model.hpp"
#include "autocomp/rng.hpp"

namespace autocomp {

// ---------------------------------------------------------------------------
// Compressed-demonstration classification: demonstrations are rendered
// through a prompt template, packed into token-budgeted segments, compressed
// into summary blocks, and queries are scored by label-verbalizer likelihood.
// ---------------------------------------------------------------------------

struct IclExample {
    std::map<std::string, std::string> fields;
    int label = -1;

    static IclExample from_json(const nlohmann::json& j) {
        IclExample e;
        for (auto it = j.begin(); it != j.end(); ++it) {
            if (it.key() == "label") {
                e.label = it.value().get<int>();
            } else {
                e.fields[it.key()] = it.value().get<std::string>();
            }
        }
        require(e.label >= 0, "icl.example", "example is missing a label");
        return e;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        for (const auto& [k, v] : fields) j[k] = v;
        j["label"] = label;
        return j;
    }
};

struct TaskSpec {
    std::string prompt_template;           // field slots in braces; one {label} slot
    std::vector<std::string> verbalizers;  // label id -> rendered label text
    int token_budget = 64;
    int n_segments = 1;
    bool use_calibration = false;
    bool class_balanced = false;
    std::string content_free = "N/A";

    void validate() const {
        require(!prompt_template.empty(), "icl.spec", "empty prompt template");
        require(prompt_template.find("{label}") != std::string::npos, "icl.spec",
                "prompt template needs a {label} slot");
        require(!verbalizers.empty(), "icl.spec", "no label verbalizers");
        for (const auto& v : verbalizers) {
            require(!v.empty(), "icl.spec", "label verbalizers must be non-empty");
        }
        require(token_budget >= 1, "icl.spec", "token budget must be positive");
        require(n_segments >= 1 && n_segments <= 3, "icl.spec", "n_segments must be 1..3");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["prompt_template"] = prompt_template;
        j["verbalizers"] = verbalizers;
        j["token_budget"] = token_budget;
        j["n_segments"] = n_segments;
        j["use_calibration"] = use_calibration;
        j["class_balanced"] = class_balanced;
        j["content_free"] = content_free;
        return j;
    }

    static TaskSpec from_json(const nlohmann::json& j) {
        TaskSpec s;
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            if (k == "prompt_template") s.prompt_template = it.value().get<std::string>();
            else if (k == "verbalizers") s.verbalizers = it.value().get<std::vector<std::string>>();
            else if (k == "token_budget") s.token_budget = it.value().get<int>();
            else if (k == "n_segments") s.n_segments = it.value().get<int>();
            else if (k == "use_calibration") s.use_calibration = it.value().get<bool>();
            else if (k == "class_balanced") s.class_balanced = it.value().get<bool>();
            else if (k == "content_free") s.content_free = it.value().get<std::string>();
            else fail("config.key", "unknown task spec key: " + k);
        }
        s.validate();
        return s;
    }
};

// Substitute {field} slots. The {label} slot takes `label_text`; everything
// after it is dropped when rendering a query prefix (prefix_only).
inline std::string render_template(const std::string& tpl,
                                   const std::map<std::string, std::string>& fields,
                                   const std::string& label_text, bool prefix_only = false) {
    std::string out;
    std::size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] == '{') {
            std::size_t close = tpl.find('}', i);
            require(close != std::string::npos, "icl.template", "unbalanced brace in template");
            std::string slot = tpl.substr(i + 1, close - i - 1);
            if (slot == "label") {
                if (prefix_only) return out;
                out += label_text;
            } else {
                auto it = fields.find(slot);
                require(it != fields.end(), "icl.template",
                        "example is missing template field '" + slot + "'");
                out += it->second;
            }
            i = close + 1;
        } else {
            out += tpl[i++];
        }
    }
    return out;
}

inline std::vector<int> render_demonstration(const TaskSpec& spec, const IclExample& ex) {
    require(ex.label >= 0 && ex.label < static_cast<int>(spec.verbalizers.size()), "icl.example",
            "label out of range for the verbalizer table");
    return encode(render_template(spec.prompt_template, ex.fields,
                                  spec.verbalizers[static_cast<std::size_t>(ex.label)]));
}

// Greedy fill of n_segments buckets. Balanced mode drains per-label queues
// round-robin; demonstrations that can never fit are skipped, and a segment
// that ends up empty is an error naming the first offender.
inline std::vector<std::vector<int>> pack_demonstrations(const std::vector<IclExample>& pool,
                                                         const TaskSpec& spec, Rng& rng) {
    spec.validate();
    require(!pool.empty(), "icl.pool", "demonstration pool is empty");

    std::vector<std::size_t> order(pool.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);

    std::vector<std::size_t> queue;
    if (spec.class_balanced) {
        std::map<int, std::vector<std::size_t>> by_label;
        for (std::size_t i : order) by_label[pool[i].label].push_back(i);
        bool more = true;
        while (more) {
            more = false;
            for (auto& [label, items] : by_label) {
                if (items.empty()) continue;
                queue.push_back(items.back());
                items.pop_back();
                more = true;
            }
        }
    } else {
        queue = order;
    }

    std::vector<std::vector<int>> segments;
    std::size_t qi = 0;
    for (int s = 0; s < spec.n_segments; ++s) {
        std::vector<int> seg;
        std::size_t first_oversize = pool.size();
        while (qi < queue.size()) {
            std::vector<int> demo = render_demonstration(spec, pool[queue[qi]]);
            if (demo.size() > static_cast<std::size_t>(spec.token_budget)) {
                if (first_oversize == pool.size()) first_oversize = queue[qi];
                ++qi;  // rejected: longer than the whole budget
                continue;
            }
            if (seg.size() + demo.size() > static_cast<std::size_t>(spec.token_budget)) break;
            seg.insert(seg.end(), demo.begin(), demo.end());
            ++qi;
        }
        if (seg.empty()) {
            std::string which = first_oversize < pool.size()
                                    ? pool[first_oversize].to_json().dump()
                                    : std::string("(pool exhausted)");
            fail("icl.pack", "no demonstration fits segment " + std::to_string(s) +
                                 "; first offending example: " + which);
        }
        segments.push_back(std::move(seg));
    }
    return segments;
}

// Sequential compression with accumulation, as in document processing.
template <typename T>
SoftPrompt<T> compress_demonstrations(ModelState<T>& model,
                                      const std::vector<std::vector<int>>& segments) {
    std::vector<SummaryBlock<T>> blocks;
    CompressorConfig sel;
    sel.kappa = model.cfg.kappa;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        SoftPrompt<T> prompt = accumulate(blocks, sel);
        blocks.push_back(compress_segment(model, prompt, segments[i],
                                          "demo#" + std::to_string(i)));
    }
    return accumulate(blocks, sel);
}

struct Classification {
    int label = -1;
    std::vector<double> scores;             // mean verbalizer logprob per label
    std::vector<double> calibrated_scores;  // empty unless calibration ran
};

// Mean per-token log-probability of each label's verbalizer given
// [compressed blocks][rendered query prefix]. Calibration subtracts the same
// score computed on a content-free query, then the argmax is taken with
// lowest-index tie-breaking.
template <typename T>
Classification classify(ModelState<T>& model, const SoftPrompt<T>& compressed,
                        const IclExample& example, const TaskSpec& spec) {
    spec.validate();
    require(compressed.blocks.size() <= 3, "icl.prompt", "at most 3 compressed blocks");

    auto label_scores = [&](const std::map<std::string, std::string>& fields) {
        std::string prefix = render_template(spec.prompt_template, fields, "", true);
        std::vector<int> prefix_tokens = encode(prefix);
        require(!prefix_tokens.empty(), "icl.template",
                "query prefix is empty; cannot condition the verbalizer");
        std::vector<double> out;
        for (const auto& verb : spec.verbalizers) {
            std::vector<int> tokens = prefix_tokens;
            std::vector<int> vt = encode(verb);
            tokens.insert(tokens.end(), vt.begin(), vt.end());
            std::vector<T> lp = next_token_logprobs(model, compressed, tokens);
            // verbalizer tokens occupy positions prefix..end; lp[i] scores tokens[i+1]
            double total = 0.0;
            for (std::size_t i = prefix_tokens.size() - 1; i < lp.size(); ++i) {
                total += static_cast<double>(lp[i]);
            }
            out.push_back(total / static_cast<double>(vt.size()));
        }
        return out;
    };

    Classification result;
    result.scores = label_scores(example.fields);
    const std::vector<double>* decide = &result.scores;

    if (spec.use_calibration) {
        std::map<std::string, std::string> cf;
        for (const auto& [k, v] : example.fields) cf[k] = spec.content_free;
        std::vector<double> cf_scores = label_scores(cf);
        result.calibrated_scores.resize(result.scores.size());
        for (std::size_t i = 0; i < result.scores.size(); ++i) {
            result.calibrated_scores[i] = result.scores[i] - cf_scores[i];
        }
        decide = &result.calibrated_scores;
    }

    result.label = 0;
    for (std::size_t i = 1; i < decide->size(); ++i) {
        if ((*decide)[i] > (*decide)[result.label]) result.label = static_cast<int>(i);
    }
    return result;
}

struct IclReport {
    double mean_accuracy = 0.0;
    double std_accuracy = 0.0;
    std::vector<double> per_seed;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["mean_accuracy"] = mean_accuracy;
        j["std_accuracy"] = std_accuracy;
        j["per_seed"] = per_seed;
        return j;
    }
};

// Per-seed demonstration resampling; accuracy aggregated over seeds.
template <typename T>
IclReport eval_icl(ModelState<T>& model, const std::vector<IclExample>& pool,
                   const std::vector<IclExample>& eval_set, const TaskSpec& spec,
                   const std::vector<std::uint64_t>& seeds) {
    require(!eval_set.empty(), "icl.eval", "empty evaluation set");
    IclReport rep;
    for (std::uint64_t seed : seeds) {
        Rng rng(seed);
        SoftPrompt<T> compressed;
        if (spec.n_segments > 0 && !pool.empty()) {
            std::vector<std::vector<int>> segments = pack_demonstrations(pool, spec, rng);
            compressed = compress_demonstrations(model, segments);
        }
        int correct = 0;
        for (const auto& ex : eval_set) {
            if (classify(model, compressed, ex, spec).label == ex.label) correct++;
        }
        rep.per_seed.push_back(static_cast<double>(correct) /
                               static_cast<double>(eval_set.size()));
    }
    double sum = 0.0;
    for (double a : rep.per_seed) sum += a;
    rep.mean_accuracy = sum / static_cast<double>(rep.per_seed.size());
    double var = 0.0;
    for (double a : rep.per_seed) var += (a - rep.mean_accuracy) * (a - rep.mean_accuracy);
    rep.std_accuracy = std::sqrt(var / static_cast<double>(rep.per_seed.size()));
    return rep;
}

// Zero-shot baseline: same scoring with no compressed blocks.
template <typename T>
double eval_zero_shot(ModelState<T>& model, const std::vector<IclExample>& eval_set,
                      const TaskSpec& spec) {
    int correct = 0;
    SoftPrompt<T> none;
    for (const auto& ex : eval_set) {
        if (classify(model, none, ex, spec).label == ex.label) correct++;
    }
    return static_cast<double>(correct) / static_cast<double>(eval_set.size());
}

// ---------------------------------------------------------------------------
// Synthetic marker task: queries reuse the key-value surface form, so a model
// trained on kv_recall documents can read the mapping out of compressed
// demonstrations. The gold mapping from marker to label is sampled per task.
// ---------------------------------------------------------------------------

struct MarkerTask {
    TaskSpec spec;
    std::vector<IclExample> pool;
    std::vector<IclExample> eval_set;
};

inline MarkerTask make_marker_task(Rng& rng, int n_markers = 6, int pool_per_marker = 6,
                                   int eval_per_marker = 4) {
    require(n_markers >= 2 && n_markers <= kKeyAlphabet, "icl.task",
            "n_markers must be in [2, " + std::to_string(kKeyAlphabet) + "]");
    MarkerTask task;
    task.spec.prompt_template = "K{text}=V{label};";
    task.spec.verbalizers = {"A", "B"};
    task.spec.token_budget = 64;
    task.spec.n_segments = 1;

    std::vector<int> markers(kKeyAlphabet);
    for (int i = 0; i < kKeyAlphabet; ++i) markers[i] = kKeyBase + i;
    rng.shuffle(markers);
    markers.resize(static_cast<std::size_t>(n_markers));

    std::vector<int> labels(markers.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 2);
    rng.shuffle(labels);

    for (std::size_t i = 0; i < markers.size(); ++i) {
        IclExample ex;
        ex.fields["text"] = std::string(1, static_cast<char>(markers[i]));
        ex.label = labels[i];
        for (int r = 0; r < pool_per_marker; ++r) task.pool.push_back(ex);
        for (int r = 0; r < eval_per_marker; ++r) task.eval_set.push_back(ex);
    }
    rng.shuffle(task.pool);
    rng.shuffle(task.eval_set);
    return task;
}

// ---------------------------------------------------------------------------
// File formats: examples as JSON lines, spec as JSON.
// ---------------------------------------------------------------------------

inline std::vector<IclExample> load_examples(const std::string& path) {
    std::ifstream is = open_in(path, false);
    std::vector<IclExample> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        require(!j.is_discarded(), "icl.file", "invalid JSON line in " + path);
        out.push_back(IclExample::from_json(j));
    }
    return out;
}

inline void save_examples(const std::string& path, const std::vector<IclExample>& examples) {
    std::ofstream os = open_out(path, false);
    for (const auto& e : examples) os << e.to_json().dump() << "\n";
    require(os.good(), "io.write", "write failed: " + path);
}

}  // namespace autocomp
