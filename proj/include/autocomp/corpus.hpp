#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "autocomp/compressor.hpp"
#include "autocomp/error.hpp"
#include "autocomp/io.hpp"
#include "autocomp/rng.hpp"

namespace autocomp {

// ---------------------------------------------------------------------------
// Byte-level tokenizer: ids 0..255 are raw bytes. encode/decode round-trips
// any byte string exactly.
// ---------------------------------------------------------------------------

inline std::vector<int> encode(const std::string& text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

inline std::string decode(const std::vector<int>& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        require(t >= 0 && t < 256, "token.range",
                "decode: id " + std::to_string(t) + " is not a byte");
        out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic corpora. Filler text comes from a fixed order-2 Markov source so
// its local statistics are learnable but carry no document-specific
// information; any long-range structure is planted explicitly.
// ---------------------------------------------------------------------------

// Alphabets are disjoint so answer tokens are identifiable:
//   filler  'a'..'p', keys 'q'..'z', values 'A'..'J', plus markers K = ? V ;
inline constexpr int kFillerAlphabet = 16;
inline constexpr char kFillerBase = 'a';
inline constexpr int kKeyAlphabet = 10;
inline constexpr char kKeyBase = 'q';
inline constexpr int kValueAlphabet = 10;
inline constexpr char kValueBase = 'A';

class MarkovSource {
public:
    MarkovSource() {
        // one fixed transition table shared by every document and split
        Rng table_rng(0xC0FFEEull);
        cdf_.resize(kFillerAlphabet * kFillerAlphabet * kFillerAlphabet);
        for (int s = 0; s < kFillerAlphabet * kFillerAlphabet; ++s) {
            double total = 0.0;
            std::vector<double> w(kFillerAlphabet);
            for (int j = 0; j < kFillerAlphabet; ++j) {
                double u = table_rng.uniform();
                w[j] = u * u * u;  // peaked rows, easier local structure
                total += w[j];
            }
            double acc = 0.0;
            for (int j = 0; j < kFillerAlphabet; ++j) {
                acc += w[j] / total;
                cdf_[static_cast<std::size_t>(s) * kFillerAlphabet + j] = acc;
            }
        }
    }

    static const MarkovSource& instance() {
        static MarkovSource src;
        return src;
    }

    void fill(std::vector<int>& out, std::size_t count, Rng& rng) const {
        int p2 = static_cast<int>(rng.below(kFillerAlphabet));
        int p1 = static_cast<int>(rng.below(kFillerAlphabet));
        for (std::size_t i = 0; i < count; ++i) {
            const double* row = cdf_.data() +
                                static_cast<std::size_t>(p2 * kFillerAlphabet + p1) * kFillerAlphabet;
            double u = rng.uniform();
            int j = 0;
            while (j + 1 < kFillerAlphabet && u >= row[j]) ++j;
            out.push_back(static_cast<int>(static_cast<unsigned char>(kFillerBase)) + j);
            p2 = p1;
            p1 = j;
        }
    }

private:
    std::vector<double> cdf_;
};

enum class SyntheticKind : std::uint8_t { kv_recall, copy_prefix, plain_markov };

inline std::string to_string(SyntheticKind k) {
    switch (k) {
        case SyntheticKind::kv_recall: return "kv_recall";
        case SyntheticKind::copy_prefix: return "copy_prefix";
        case SyntheticKind::plain_markov: return "plain_markov";
    }
    return "?";
}

inline SyntheticKind synthetic_kind_from(const std::string& s) {
    if (s == "kv_recall") return SyntheticKind::kv_recall;
    if (s == "copy_prefix") return SyntheticKind::copy_prefix;
    if (s == "plain_markov") return SyntheticKind::plain_markov;
    fail("config.value", "unknown synthetic kind: " + s);
}

struct SyntheticSpec {
    SyntheticKind kind = SyntheticKind::kv_recall;
    int doc_len = 256;
    int seg_len = 64;       // generation grid; key_distance counts these segments
    int n_keys = 4;
    int key_distance = 3;   // segments between key definition and query
    int span_len = 16;      // copy_prefix span length

    int n_segments() const { return doc_len / seg_len; }

    void validate() const {
        require(doc_len >= 2 && seg_len >= 1, "synthetic.spec", "doc_len/seg_len invalid");
        require(doc_len % seg_len == 0, "synthetic.spec",
                "doc_len must be a multiple of seg_len");
        if (kind == SyntheticKind::kv_recall) {
            require(n_keys >= 1 && n_keys <= kKeyAlphabet, "synthetic.spec",
                    "n_keys must be in [1, " + std::to_string(kKeyAlphabet) + "]");
            require(key_distance >= 1, "synthetic.spec", "key_distance must be >= 1");
            require(key_distance <= n_segments() - 1, "synthetic.spec",
                    "key_distance " + std::to_string(key_distance) +
                        " does not fit in " + std::to_string(n_segments()) + " segments");
            require(6 * n_keys <= seg_len, "synthetic.spec",
                    "definitions do not fit in one segment");
        }
        if (kind == SyntheticKind::copy_prefix) {
            require(span_len >= 2 && span_len <= seg_len, "synthetic.spec",
                    "span_len must fit in one segment");
            require(n_segments() >= 2, "synthetic.spec", "copy_prefix needs >= 2 segments");
        }
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["kind"] = to_string(kind);
        j["doc_len"] = doc_len;
        j["seg_len"] = seg_len;
        j["n_keys"] = n_keys;
        j["key_distance"] = key_distance;
        j["span_len"] = span_len;
        return j;
    }

    static SyntheticSpec from_json(const nlohmann::json& j) {
        SyntheticSpec s;
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            if (k == "kind") s.kind = synthetic_kind_from(it.value().get<std::string>());
            else if (k == "doc_len") s.doc_len = it.value().get<int>();
            else if (k == "seg_len") s.seg_len = it.value().get<int>();
            else if (k == "n_keys") s.n_keys = it.value().get<int>();
            else if (k == "key_distance") s.key_distance = it.value().get<int>();
            else if (k == "span_len") s.span_len = it.value().get<int>();
            else fail("config.key", "unknown synthetic spec key: " + k);
        }
        s.validate();
        return s;
    }
};

struct AnnotatedDoc {
    Document doc;
    std::vector<std::size_t> answers;  // token positions evaluation may focus on
};

// kv_recall: definitions "K<k>=V<v>;" land in the segment key_distance grid
// steps before the last; the final segment queries every key as "K<k>?V<v>;"
// in shuffled order. Annotations mark the value byte of each query.
inline AnnotatedDoc gen_synthetic(const SyntheticSpec& spec, Rng& rng, const std::string& id) {
    spec.validate();
    const MarkovSource& filler = MarkovSource::instance();
    AnnotatedDoc out;
    out.doc.id = id;
    std::vector<int>& t = out.doc.tokens;
    t.reserve(static_cast<std::size_t>(spec.doc_len));

    auto pad_to = [&](std::size_t target) {
        if (t.size() < target) filler.fill(t, target - t.size(), rng);
    };

    switch (spec.kind) {
        case SyntheticKind::plain_markov: {
            filler.fill(t, static_cast<std::size_t>(spec.doc_len), rng);
            break;
        }
        case SyntheticKind::kv_recall: {
            int n_seg = spec.n_segments();
            int def_seg = n_seg - 1 - spec.key_distance;
            std::vector<int> keys(kKeyAlphabet);
            for (int i = 0; i < kKeyAlphabet; ++i) keys[i] = kKeyBase + i;
            rng.shuffle(keys);
            keys.resize(static_cast<std::size_t>(spec.n_keys));
            std::vector<int> vals(keys.size());
            for (auto& v : vals) v = kValueBase + static_cast<int>(rng.below(kValueAlphabet));

            std::vector<std::size_t> order(keys.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);

            for (int s = 0; s < n_seg; ++s) {
                std::size_t seg_start = t.size();
                if (s == def_seg) {
                    for (std::size_t i = 0; i < keys.size(); ++i) {
                        t.push_back('K');
                        t.push_back(keys[i]);
                        t.push_back('=');
                        t.push_back('V');
                        t.push_back(vals[i]);
                        t.push_back(';');
                    }
                } else if (s == n_seg - 1) {
                    for (std::size_t q : order) {
                        t.push_back('K');
                        t.push_back(keys[q]);
                        t.push_back('?');
                        t.push_back('V');
                        out.answers.push_back(t.size());
                        t.push_back(vals[q]);
                        t.push_back(';');
                    }
                }
                pad_to(seg_start + static_cast<std::size_t>(spec.seg_len));
            }
            break;
        }
        case SyntheticKind::copy_prefix: {
            std::size_t seg = static_cast<std::size_t>(spec.seg_len);
            std::size_t span = static_cast<std::size_t>(spec.span_len);
            std::vector<int> span_bytes(span);
            for (auto& b : span_bytes)
                b = static_cast<int>(static_cast<unsigned char>(kFillerBase)) +
                    static_cast<int>(rng.below(kFillerAlphabet));

            std::size_t off0 = rng.below(seg - span + 1);
            std::size_t off1 = rng.below(seg - span + 1);
            for (int s = 0; s < spec.n_segments(); ++s) {
                std::size_t seg_start = t.size();
                std::size_t off =
                    s == 0 ? off0 : (s == spec.n_segments() - 1 ? off1 : seg);  // seg = none
                if (off <= seg - span) {
                    pad_to(seg_start + off);
                    if (s != 0) {
                        for (std::size_t i = 0; i < span; ++i) out.answers.push_back(t.size() + i);
                    }
                    for (int b : span_bytes) t.push_back(b);
                }
                pad_to(seg_start + seg);
            }
            break;
        }
    }
    require(t.size() == static_cast<std::size_t>(spec.doc_len), "synthetic.len",
            "generator produced a wrong-length document");
    return out;
}

struct SyntheticCorpus {
    SyntheticSpec spec;
    std::uint64_t seed = 0;
    std::vector<AnnotatedDoc> docs;
};

inline SyntheticCorpus gen_corpus(const SyntheticSpec& spec, std::size_t n_docs,
                                  std::uint64_t seed, const std::string& id_prefix) {
    SyntheticCorpus c;
    c.spec = spec;
    c.seed = seed;
    Rng rng(seed);
    for (std::size_t i = 0; i < n_docs; ++i) {
        c.docs.push_back(gen_synthetic(spec, rng, id_prefix + "-" + std::to_string(i)));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Corpus files: one document per line, backslash-escaped newlines. Synthetic
// corpora add a JSON sidecar with the spec and per-document annotations.
// ---------------------------------------------------------------------------

inline std::string escape_line(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        if (c == '\\') out += "\\\\";
        else if (c == '\n') out += "\\n";
        else if (c == '\r') out += "\\r";
        else out += c;
    }
    return out;
}

inline std::string unescape_line(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            char n = s[++i];
            if (n == 'n') out += '\n';
            else if (n == 'r') out += '\r';
            else if (n == '\\') out += '\\';
            else { out += '\\'; out += n; }
        } else {
            out += s[i];
        }
    }
    return out;
}

inline void save_corpus(const std::string& path, const std::vector<Document>& docs) {
    std::ofstream os = open_out(path, false);
    for (const auto& d : docs) {
        os << escape_line(decode(d.tokens)) << "\n";
    }
    require(os.good(), "io.write", "write failed: " + path);
}

inline std::vector<Document> load_corpus(const std::string& path, const std::string& id_prefix) {
    std::ifstream is = open_in(path, false);
    std::vector<Document> docs;
    std::string line;
    std::size_t i = 0;
    while (std::getline(is, line)) {
        Document d;
        d.id = id_prefix + "-" + std::to_string(i++);
        d.tokens = encode(unescape_line(line));
        if (!d.tokens.empty()) docs.push_back(std::move(d));
    }
    return docs;
}

inline nlohmann::ordered_json annotations_json(const SyntheticCorpus& c) {
    nlohmann::ordered_json j;
    j["spec"] = c.spec.to_json();
    j["seed"] = c.seed;
    nlohmann::ordered_json docs = nlohmann::ordered_json::array();
    for (const auto& d : c.docs) {
        nlohmann::ordered_json e;
        e["id"] = d.doc.id;
        e["answers"] = d.answers;
        docs.push_back(std::move(e));
    }
    j["docs"] = std::move(docs);
    return j;
}

}  // namespace autocomp
