// Test-only reference implementation of the forward pass: plain nested loops
// over raw parameter values, no graph machinery. Used as an independent
// oracle for model outputs, summary extraction, and document losses.
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "autocomp/model.hpp"

namespace refmodel {

using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const autocomp::Tensor<double>& t) {
    Mat m(t.rows(), std::vector<double>(t.shape.size() == 2 ? t.shape[1] : 1));
    for (std::size_t i = 0; i < t.rows(); ++i) {
        for (std::size_t j = 0; j < m[i].size(); ++j) m[i][j] = t.at(i, j);
    }
    return m;
}

inline std::vector<double> to_vec(const autocomp::Tensor<double>& t) {
    return *t.data;
}

inline std::vector<double> layer_norm_row(const std::vector<double>& x,
                                          const std::vector<double>& g,
                                          const std::vector<double>& b, double eps = 1e-5) {
    std::size_t n = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    std::vector<double> y(n);
    for (std::size_t j = 0; j < n; ++j) y[j] = g[j] * ((x[j] - mean) * inv) + b[j];
    return y;
}

inline double gelu(double x) {
    double u = 0.7978845608028654 * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

struct RefOut {
    Mat states;  // layout x d, post final layer norm
    Mat logits;  // layout x vocab
};

// prompt: rows prepended before tokens; emit appends the summary embeddings.
inline RefOut forward(autocomp::ModelState<double>& model, const Mat& prompt,
                      const std::vector<int>& tokens, bool emit) {
    const auto& cfg = model.cfg;
    std::size_t d = static_cast<std::size_t>(cfg.d_model);
    std::size_t P = prompt.size();
    std::size_t m = tokens.size();
    std::size_t kap = emit ? static_cast<std::size_t>(cfg.kappa) : 0;
    std::size_t L = P + m + kap;

    Mat x(L, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < P; ++i) x[i] = prompt[i];
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            x[P + i][j] = model.tok_emb.at(static_cast<std::size_t>(tokens[i]), j);
            if (cfg.positional_mode == autocomp::PositionalMode::absolute) {
                x[P + i][j] += model.pos_emb.at(i, j);
            }
        }
    }
    for (std::size_t i = 0; i < kap; ++i) {
        for (std::size_t j = 0; j < d; ++j) x[P + m + i][j] = model.sum_emb.at(i, j);
    }

    std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
    auto apply_rope = [&](Mat& q) {
        for (std::size_t i = 0; i < L; ++i) {
            for (int h = 0; h < cfg.n_heads; ++h) {
                for (std::size_t j = 0; j < hd; j += 2) {
                    double theta = static_cast<double>(i) *
                                   std::pow(10000.0, -static_cast<double>(j) / static_cast<double>(hd));
                    double c = std::cos(theta), s = std::sin(theta);
                    std::size_t k = static_cast<std::size_t>(h) * hd + j;
                    double a0 = q[i][k], a1 = q[i][k + 1];
                    q[i][k] = a0 * c - a1 * s;
                    q[i][k + 1] = a0 * s + a1 * c;
                }
            }
        }
    };

    auto matvec = [&](const std::vector<double>& v, const autocomp::Tensor<double>& w,
                      const autocomp::Tensor<double>& b) {
        std::size_t out_n = w.shape[1];
        std::vector<double> r(out_n, 0.0);
        for (std::size_t k = 0; k < v.size(); ++k) {
            for (std::size_t j = 0; j < out_n; ++j) r[j] += v[k] * w.at(k, j);
        }
        for (std::size_t j = 0; j < out_n; ++j) r[j] += (*b.data)[j];
        return r;
    };

    for (auto& layer : model.layers) {
        Mat q(L), kk(L), vv(L);
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> h = layer_norm_row(x[i], to_vec(layer.ln1_g), to_vec(layer.ln1_b));
            q[i] = matvec(h, layer.wq, layer.bq);
            kk[i] = matvec(h, layer.wk, layer.bk);
            vv[i] = matvec(h, layer.wv, layer.bv);
        }
        if (cfg.positional_mode == autocomp::PositionalMode::rotary) {
            apply_rope(q);
            apply_rope(kk);
        }
        Mat attn(L, std::vector<double>(d, 0.0));
        double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
        for (int h = 0; h < cfg.n_heads; ++h) {
            std::size_t off = static_cast<std::size_t>(h) * hd;
            for (std::size_t i = 0; i < L; ++i) {
                std::vector<double> scores(i + 1);
                double mx = -1e300;
                for (std::size_t j = 0; j <= i; ++j) {
                    double sc = 0.0;
                    for (std::size_t k = 0; k < hd; ++k) sc += q[i][off + k] * kk[j][off + k];
                    scores[j] = sc * inv_sqrt;
                    if (scores[j] > mx) mx = scores[j];
                }
                double denom = 0.0;
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = std::exp(scores[j] - mx);
                    denom += scores[j];
                }
                for (std::size_t j = 0; j <= i; ++j) {
                    double w = scores[j] / denom;
                    for (std::size_t k = 0; k < hd; ++k) attn[i][off + k] += w * vv[j][off + k];
                }
            }
        }
        for (std::size_t i = 0; i < L; ++i) {
            std::vector<double> o = matvec(attn[i], layer.wo, layer.bo);
            for (std::size_t j = 0; j < d; ++j) x[i][j] += o[j];
            std::vector<double> h2 = layer_norm_row(x[i], to_vec(layer.ln2_g), to_vec(layer.ln2_b));
            std::vector<double> inner = matvec(h2, layer.w1, layer.b1);
            for (auto& u : inner) u = gelu(u);
            std::vector<double> mlp = matvec(inner, layer.w2, layer.b2);
            for (std::size_t j = 0; j < d; ++j) x[i][j] += mlp[j];
        }
    }

    RefOut out;
    out.states.resize(L);
    out.logits.resize(L);
    std::size_t v = static_cast<std::size_t>(cfg.vocab_size);
    for (std::size_t i = 0; i < L; ++i) {
        out.states[i] = layer_norm_row(x[i], to_vec(model.lnf_g), to_vec(model.lnf_b));
        out.logits[i].assign(v, 0.0);
        for (std::size_t j = 0; j < v; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                double w = cfg.tie_output_head ? model.tok_emb.at(j, k) : model.head_w.at(k, j);
                acc += out.states[i][k] * w;
            }
            out.logits[i][j] = acc;
        }
    }
    return out;
}

inline double log_softmax_at(const std::vector<double>& logits, int target) {
    double mx = logits[0];
    for (double v : logits) mx = v > mx ? v : mx;
    double denom = 0.0;
    for (double v : logits) denom += std::exp(v - mx);
    return logits[static_cast<std::size_t>(target)] - mx - std::log(denom);
}

}  // namespace refmodel
