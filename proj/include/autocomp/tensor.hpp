#pragma once

#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "autocomp/error.hpp"

namespace autocomp {

// ---------------------------------------------------------------------------
// Tensor: rank-1 or rank-2 row-major array. Values live behind a shared_ptr
// so graph nodes and caller handles can alias the same storage. A tensor
// recorded on a Graph carries the node id and the graph's serial number.
// ---------------------------------------------------------------------------

template <typename T>
struct Tensor {
    std::vector<std::size_t> shape;
    std::shared_ptr<std::vector<T>> data;
    int node = -1;
    std::uint32_t graph = 0;
    bool requires_grad = false;

    Tensor() = default;

    static Tensor zeros(std::vector<std::size_t> shape_in) {
        Tensor t;
        t.shape = std::move(shape_in);
        t.data = std::make_shared<std::vector<T>>(numel_of(t.shape), T(0));
        return t;
    }

    static Tensor from_values(std::vector<std::size_t> shape_in, std::vector<T> values) {
        AUTOCOMP_REQUIRE(numel_of(shape_in) == values.size(), "tensor.shape",
                "value count does not match shape");
        Tensor t;
        t.shape = std::move(shape_in);
        t.data = std::make_shared<std::vector<T>>(std::move(values));
        return t;
    }

    static std::size_t numel_of(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (std::size_t d : s) n *= d;
        return n;
    }

    std::size_t numel() const { return data ? data->size() : 0; }
    std::size_t rank() const { return shape.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() == 2 ? shape[1] : (shape.size() == 1 ? shape[0] : 0); }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }

    T& at(std::size_t i, std::size_t j) { return (*data)[i * shape[1] + j]; }
    const T& at(std::size_t i, std::size_t j) const { return (*data)[i * shape[1] + j]; }

    bool all_finite() const {
        for (const T& v : *data) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    std::string shape_str() const {
        std::string s = "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) s += "x";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }
};

enum class OpKind : std::uint8_t {
    leaf,
    constant,
    detach,
    matmul,
    matmul_bt,
    matmul_bias,
    add,
    add_rowvec,
    mul,
    scale,
    row_softmax,
    causal_row_softmax,
    row_log_softmax,
    layer_norm,
    gelu,
    embedding,
    concat0,
    concat1,
    slice,
    rope,
    cross_entropy_sum,
    sum,
};

inline const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::leaf: return "leaf";
        case OpKind::constant: return "constant";
        case OpKind::detach: return "detach";
        case OpKind::matmul: return "matmul";
        case OpKind::matmul_bt: return "matmul_bt";
        case OpKind::matmul_bias: return "matmul_bias";
        case OpKind::add: return "add";
        case OpKind::add_rowvec: return "add_rowvec";
        case OpKind::mul: return "mul";
        case OpKind::scale: return "scale";
        case OpKind::row_softmax: return "row_softmax";
        case OpKind::causal_row_softmax: return "causal_row_softmax";
        case OpKind::row_log_softmax: return "row_log_softmax";
        case OpKind::layer_norm: return "layer_norm";
        case OpKind::gelu: return "gelu";
        case OpKind::embedding: return "embedding";
        case OpKind::concat0: return "concat0";
        case OpKind::concat1: return "concat1";
        case OpKind::slice: return "slice";
        case OpKind::rope: return "rope";
        case OpKind::cross_entropy_sum: return "cross_entropy_sum";
        case OpKind::sum: return "sum";
    }
    return "?";
}

namespace detail {
inline std::uint32_t next_graph_serial() {
    static std::atomic<std::uint32_t> counter{1};
    return counter.fetch_add(1);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Graph: append-only op tape. Node inputs always have smaller ids, so the
// append order is a topological order and backward() is a single reverse
// sweep. Only nodes on a path from a grad-requiring leaf to the loss get
// gradient buffers.
// ---------------------------------------------------------------------------

template <typename T>
class Graph {
public:
    struct Node {
        OpKind kind = OpKind::leaf;
        std::vector<int> inputs;
        Tensor<T> out;
        bool needs_grad = false;
        std::vector<T> grad;      // same numel as out; empty until backward
        std::vector<T> aux;       // op-specific saved intermediates
        std::vector<int> idata;   // op-specific integers (ids, targets)
        T alpha = T(0);           // op-specific scalar
        int i0 = 0, i1 = 0, i2 = 0;
    };

    Graph() : serial_(detail::next_graph_serial()) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    std::uint32_t serial() const { return serial_; }
    std::size_t size() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(static_cast<std::size_t>(id)); }

    // -- node creation -------------------------------------------------------

    // Register external storage as a graph input. Values are shared, not
    // copied; parameter updates through the returned handle are visible to
    // the owner.
    Tensor<T> leaf(const Tensor<T>& t, bool requires_grad) {
        Tensor<T> out = t;
        out.requires_grad = requires_grad;
        return push(OpKind::leaf, {}, std::move(out), requires_grad);
    }

    Tensor<T> constant(Tensor<T> t) {
        t.requires_grad = false;
        return push(OpKind::constant, {}, std::move(t), false);
    }

    // Value-transparent, gradient-opaque copy: participates in forward ops
    // but acts as a constant during backward.
    Tensor<T> detach(const Tensor<T>& a) {
        check_mine(a, "detach");
        Tensor<T> out;
        out.shape = a.shape;
        out.data = a.data;  // values shared
        return push(OpKind::detach, {}, std::move(out), false);
    }

    // -- arithmetic ----------------------------------------------------------

    Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
        check_mine(a, "matmul");
        check_mine(b, "matmul");
        AUTOCOMP_REQUIRE(a.rank() == 2 && b.rank() == 2, "op.shape",
                std::string("matmul: operands must be rank-2, got ") + a.shape_str() + " and " +
                    b.shape_str());
        std::size_t m = a.shape[0], k = a.shape[1];
        std::size_t bk = transpose_b ? b.shape[1] : b.shape[0];
        std::size_t n = transpose_b ? b.shape[0] : b.shape[1];
        AUTOCOMP_REQUIRE(k == bk, "op.shape",
                std::string("matmul: inner dimensions do not match: ") + a.shape_str() +
                    (transpose_b ? " x transpose " : " x ") + b.shape_str());
        Tensor<T> out = Tensor<T>::zeros({m, n});
        if (transpose_b) {
            gemm_abt(a.ptr(), b.ptr(), out.ptr(), m, k, n);
        } else {
            gemm_ab(a.ptr(), b.ptr(), out.ptr(), m, k, n);
        }
        return push(transpose_b ? OpKind::matmul_bt : OpKind::matmul, {a.node, b.node},
                    std::move(out), a.requires_grad || b.requires_grad);
    }

    // a * b + bias, bias broadcast over rows; one node instead of two.
    Tensor<T> matmul_bias(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& bias) {
        check_mine(a, "matmul_bias");
        check_mine(b, "matmul_bias");
        check_mine(bias, "matmul_bias");
        AUTOCOMP_REQUIRE(a.rank() == 2 && b.rank() == 2 && a.shape[1] == b.shape[0] &&
                             bias.rank() == 1 && bias.shape[0] == b.shape[1],
                         "op.shape",
                         std::string("matmul_bias: incompatible shapes ") + a.shape_str() + ", " +
                             b.shape_str() + ", " + bias.shape_str());
        std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
        Tensor<T> out = Tensor<T>::zeros({m, n});
        T* po = out.ptr();
        const T* pb = bias.ptr();
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) po[i * n + j] = pb[j];
        }
        gemm_ab(a.ptr(), b.ptr(), po, m, k, n);
        return push(OpKind::matmul_bias, {a.node, b.node, bias.node}, std::move(out),
                    a.requires_grad || b.requires_grad || bias.requires_grad);
    }

    Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
        check_mine(a, "add");
        check_mine(b, "add");
        if (a.shape == b.shape) {
            Tensor<T> out = Tensor<T>::zeros(a.shape);
            const T* pa = a.ptr();
            const T* pb = b.ptr();
            T* po = out.ptr();
            for (std::size_t i = 0, n = a.numel(); i < n; ++i) po[i] = pa[i] + pb[i];
            return push(OpKind::add, {a.node, b.node}, std::move(out),
                        a.requires_grad || b.requires_grad);
        }
        // row-vector broadcast over the leading dimension
        if (a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0]) {
            std::size_t m = a.shape[0], n = a.shape[1];
            Tensor<T> out = Tensor<T>::zeros({m, n});
            const T* pa = a.ptr();
            const T* pb = b.ptr();
            T* po = out.ptr();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < n; ++j) po[i * n + j] = pa[i * n + j] + pb[j];
            }
            return push(OpKind::add_rowvec, {a.node, b.node}, std::move(out),
                        a.requires_grad || b.requires_grad);
        }
        fail("op.shape", std::string("add: incompatible shapes ") + a.shape_str() + " and " +
                             b.shape_str());
    }

    Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
        check_mine(a, "mul");
        check_mine(b, "mul");
        AUTOCOMP_REQUIRE(a.shape == b.shape, "op.shape",
                std::string("mul: shapes differ: ") + a.shape_str() + " vs " + b.shape_str());
        Tensor<T> out = Tensor<T>::zeros(a.shape);
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0, n = a.numel(); i < n; ++i) po[i] = pa[i] * pb[i];
        return push(OpKind::mul, {a.node, b.node}, std::move(out),
                    a.requires_grad || b.requires_grad);
    }

    Tensor<T> scale(const Tensor<T>& a, T c) {
        check_mine(a, "scale");
        Tensor<T> out = Tensor<T>::zeros(a.shape);
        const T* pa = a.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0, n = a.numel(); i < n; ++i) po[i] = pa[i] * c;
        Tensor<T> r = push(OpKind::scale, {a.node}, std::move(out), a.requires_grad);
        nodes_.back().alpha = c;
        return r;
    }

    // -- nonlinearities ------------------------------------------------------

    Tensor<T> row_softmax(const Tensor<T>& a) {
        check_mine(a, "row_softmax");
        AUTOCOMP_REQUIRE(a.rank() == 2 && a.shape[1] > 0, "op.shape",
                std::string("row_softmax: need a rank-2 tensor with non-empty rows, got ") +
                    a.shape_str());
        std::size_t m = a.shape[0], n = a.shape[1];
        Tensor<T> out = Tensor<T>::zeros({m, n});
        const T* pa = a.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0; i < m; ++i) {
            const T* x = pa + i * n;
            T* y = po + i * n;
            T mx = x[0];
            for (std::size_t j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
            T denom = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                y[j] = std::exp(x[j] - mx);
                denom += y[j];
            }
            T inv = T(1) / denom;
            for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
        }
        return push(OpKind::row_softmax, {a.node}, std::move(out), a.requires_grad);
    }

    // Softmax over columns 0..i for row i of a square score matrix; the
    // upper triangle gets exact zero weight. Equivalent to an additive causal
    // mask but never touches the dead entries.
    Tensor<T> causal_row_softmax(const Tensor<T>& a) {
        check_mine(a, "causal_row_softmax");
        AUTOCOMP_REQUIRE(a.rank() == 2 && a.shape[0] == a.shape[1] && a.shape[1] > 0, "op.shape",
                         std::string("causal_row_softmax: need a square score matrix, got ") +
                             a.shape_str());
        std::size_t n = a.shape[0];
        Tensor<T> out = Tensor<T>::zeros({n, n});
        const T* pa = a.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0; i < n; ++i) {
            const T* x = pa + i * n;
            T* y = po + i * n;
            T mx = x[0];
            for (std::size_t j = 1; j <= i; ++j) mx = x[j] > mx ? x[j] : mx;
            T denom = T(0);
            for (std::size_t j = 0; j <= i; ++j) {
                y[j] = std::exp(x[j] - mx);
                denom += y[j];
            }
            T inv = T(1) / denom;
            for (std::size_t j = 0; j <= i; ++j) y[j] *= inv;
        }
        return push(OpKind::causal_row_softmax, {a.node}, std::move(out), a.requires_grad);
    }

    Tensor<T> row_log_softmax(const Tensor<T>& a) {
        check_mine(a, "row_log_softmax");
        AUTOCOMP_REQUIRE(a.rank() == 2 && a.shape[1] > 0, "op.shape",
                std::string("row_log_softmax: need a rank-2 tensor with non-empty rows, got ") +
                    a.shape_str());
        std::size_t m = a.shape[0], n = a.shape[1];
        Tensor<T> out = Tensor<T>::zeros({m, n});
        const T* pa = a.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0; i < m; ++i) {
            const T* x = pa + i * n;
            T* y = po + i * n;
            T mx = x[0];
            for (std::size_t j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
            T denom = T(0);
            for (std::size_t j = 0; j < n; ++j) denom += std::exp(x[j] - mx);
            T lse = std::log(denom);
            for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - mx - lse;
        }
        return push(OpKind::row_log_softmax, {a.node}, std::move(out), a.requires_grad);
    }

    Tensor<T> layer_norm(const Tensor<T>& a, const Tensor<T>& gamma, const Tensor<T>& beta,
                         T eps = T(1e-5)) {
        check_mine(a, "layer_norm");
        check_mine(gamma, "layer_norm");
        check_mine(beta, "layer_norm");
        AUTOCOMP_REQUIRE(a.rank() == 2 && gamma.rank() == 1 && beta.rank() == 1 &&
                    gamma.shape[0] == a.shape[1] && beta.shape[0] == a.shape[1],
                "op.shape",
                std::string("layer_norm: incompatible shapes ") + a.shape_str() + ", " +
                    gamma.shape_str() + ", " + beta.shape_str());
        std::size_t m = a.shape[0], n = a.shape[1];
        Tensor<T> out = Tensor<T>::zeros({m, n});
        std::vector<T> aux(2 * m);  // per row: mean, inv_std
        const T* pa = a.ptr();
        const T* pg = gamma.ptr();
        const T* pb = beta.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0; i < m; ++i) {
            const T* x = pa + i * n;
            T mean = T(0);
            for (std::size_t j = 0; j < n; ++j) mean += x[j];
            mean /= static_cast<T>(n);
            T var = T(0);
            for (std::size_t j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
            var /= static_cast<T>(n);
            T inv_std = T(1) / std::sqrt(var + eps);
            aux[2 * i] = mean;
            aux[2 * i + 1] = inv_std;
            T* y = po + i * n;
            for (std::size_t j = 0; j < n; ++j) y[j] = pg[j] * ((x[j] - mean) * inv_std) + pb[j];
        }
        Tensor<T> r = push(OpKind::layer_norm, {a.node, gamma.node, beta.node}, std::move(out),
                           a.requires_grad || gamma.requires_grad || beta.requires_grad);
        nodes_.back().aux = std::move(aux);
        return r;
    }

    Tensor<T> gelu(const Tensor<T>& a) {
        check_mine(a, "gelu");
        std::size_t n = a.numel();
        Tensor<T> out = Tensor<T>::zeros(a.shape);
        std::vector<T> aux(n);  // tanh(u), reused in backward
        const T c0 = T(0.7978845608028654);  // sqrt(2/pi)
        const T c1 = T(0.044715);
        const T* pa = a.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0; i < n; ++i) {
            T x = pa[i];
            T u = c0 * (x + c1 * x * x * x);
            T th = std::tanh(u);
            aux[i] = th;
            po[i] = T(0.5) * x * (T(1) + th);
        }
        Tensor<T> r = push(OpKind::gelu, {a.node}, std::move(out), a.requires_grad);
        nodes_.back().aux = std::move(aux);
        return r;
    }

    // -- structure ops -------------------------------------------------------

    Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
        check_mine(table, "embedding");
        AUTOCOMP_REQUIRE(table.rank() == 2, "op.shape",
                std::string("embedding: table must be rank-2, got ") + table.shape_str());
        std::size_t v = table.shape[0], d = table.shape[1];
        for (int id : ids) {
            AUTOCOMP_REQUIRE(id >= 0 && static_cast<std::size_t>(id) < v, "token.range",
                    "embedding: id " + std::to_string(id) + " out of range [0, " +
                        std::to_string(v) + ")");
        }
        Tensor<T> out = Tensor<T>::zeros({ids.size(), d});
        const T* pt = table.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const T* src = pt + static_cast<std::size_t>(ids[i]) * d;
            T* dst = po + i * d;
            for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
        }
        Tensor<T> r = push(OpKind::embedding, {table.node}, std::move(out), table.requires_grad);
        nodes_.back().idata = ids;
        return r;
    }

    // Concatenate along the leading (sequence) axis.
    Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
        AUTOCOMP_REQUIRE(!parts.empty(), "op.shape", "concat: no inputs");
        std::size_t n = parts[0].shape.size() == 2 ? parts[0].shape[1] : 0;
        std::size_t m = 0;
        bool grad = false;
        std::vector<int> in;
        for (const auto& p : parts) {
            check_mine(p, "concat");
            AUTOCOMP_REQUIRE(p.rank() == 2 && p.shape[1] == n, "op.shape",
                    std::string("concat: row widths differ: ") + p.shape_str());
            m += p.shape[0];
            grad = grad || p.requires_grad;
            in.push_back(p.node);
        }
        Tensor<T> out = Tensor<T>::zeros({m, n});
        T* po = out.ptr();
        for (const auto& p : parts) {
            std::size_t c = p.numel();
            const T* pp = p.ptr();
            for (std::size_t i = 0; i < c; ++i) po[i] = pp[i];
            po += c;
        }
        return push(OpKind::concat0, std::move(in), std::move(out), grad);
    }

    // Concatenate along the feature axis (used to re-join attention heads).
    Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
        AUTOCOMP_REQUIRE(!parts.empty(), "op.shape", "concat: no inputs");
        std::size_t m = parts[0].rows();
        std::size_t n = 0;
        bool grad = false;
        std::vector<int> in;
        for (const auto& p : parts) {
            check_mine(p, "concat");
            AUTOCOMP_REQUIRE(p.rank() == 2 && p.shape[0] == m, "op.shape",
                    std::string("concat_cols: row counts differ: ") + p.shape_str());
            n += p.shape[1];
            grad = grad || p.requires_grad;
            in.push_back(p.node);
        }
        Tensor<T> out = Tensor<T>::zeros({m, n});
        T* po = out.ptr();
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::size_t w = p.shape[1];
            const T* pp = p.ptr();
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < w; ++j) po[i * n + off + j] = pp[i * w + j];
            }
            off += w;
        }
        return push(OpKind::concat1, std::move(in), std::move(out), grad);
    }

    // Contiguous sub-block: axis 0 selects rows, axis 1 selects columns.
    Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t start, std::size_t len) {
        check_mine(a, "slice");
        AUTOCOMP_REQUIRE(a.rank() == 2 && (axis == 0 || axis == 1), "op.shape",
                std::string("slice: need a rank-2 tensor and axis 0/1, got ") + a.shape_str());
        std::size_t m = a.shape[0], n = a.shape[1];
        std::size_t limit = axis == 0 ? m : n;
        AUTOCOMP_REQUIRE(start + len <= limit, "op.shape",
                "slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                    ") exceeds axis size " + std::to_string(limit));
        Tensor<T> out = axis == 0 ? Tensor<T>::zeros({len, n}) : Tensor<T>::zeros({m, len});
        const T* pa = a.ptr();
        T* po = out.ptr();
        if (axis == 0) {
            for (std::size_t i = 0; i < len * n; ++i) po[i] = pa[start * n + i];
        } else {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < len; ++j) po[i * len + j] = pa[i * n + start + j];
            }
        }
        Tensor<T> r = push(OpKind::slice, {a.node}, std::move(out), a.requires_grad);
        Node& nd = nodes_.back();
        nd.i0 = axis;
        nd.i1 = static_cast<int>(start);
        nd.i2 = static_cast<int>(len);
        return r;
    }

    // Rotary phases over row index + offset; pairs rotate within each head.
    Tensor<T> rope(const Tensor<T>& a, int n_heads, int pos_offset = 0, T base = T(10000)) {
        check_mine(a, "rope");
        AUTOCOMP_REQUIRE(a.rank() == 2 && n_heads > 0 && a.shape[1] % static_cast<std::size_t>(n_heads) == 0,
                "op.shape", std::string("rope: width must divide by heads, got ") + a.shape_str());
        std::size_t head_dim = a.shape[1] / static_cast<std::size_t>(n_heads);
        AUTOCOMP_REQUIRE(head_dim % 2 == 0, "op.shape", "rope: head dimension must be even");
        std::size_t m = a.shape[0], n = a.shape[1];
        Tensor<T> out = Tensor<T>::zeros({m, n});
        const T* pa = a.ptr();
        T* po = out.ptr();
        for (std::size_t i = 0; i < m; ++i) {
            T pos = static_cast<T>(i + static_cast<std::size_t>(pos_offset));
            for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
                for (std::size_t j = 0; j < head_dim; j += 2) {
                    T theta = pos * std::pow(base, -static_cast<T>(j) / static_cast<T>(head_dim));
                    T c = std::cos(theta), s = std::sin(theta);
                    std::size_t k = i * n + h * head_dim + j;
                    T x0 = pa[k], x1 = pa[k + 1];
                    po[k] = x0 * c - x1 * s;
                    po[k + 1] = x0 * s + x1 * c;
                }
            }
        }
        Tensor<T> r = push(OpKind::rope, {a.node}, std::move(out), a.requires_grad);
        Node& nd = nodes_.back();
        nd.i0 = n_heads;
        nd.i1 = pos_offset;
        nd.alpha = base;
        return r;
    }

    // -- losses --------------------------------------------------------------

    // Sum over rows of -log softmax(logits)[target]. Per-row values use the
    // exact arithmetic of row_log_softmax so scoring paths agree bitwise.
    Tensor<T> cross_entropy_sum(const Tensor<T>& logits, const std::vector<int>& targets) {
        check_mine(logits, "cross_entropy_sum");
        AUTOCOMP_REQUIRE(logits.rank() == 2 && logits.shape[0] == targets.size(), "op.shape",
                "cross_entropy_sum: need one target per row, got " + logits.shape_str() + " and " +
                    std::to_string(targets.size()) + " targets");
        std::size_t m = logits.shape[0], n = logits.shape[1];
        for (int t : targets) {
            AUTOCOMP_REQUIRE(t >= 0 && static_cast<std::size_t>(t) < n, "token.range",
                    "cross_entropy_sum: target " + std::to_string(t) + " out of range");
        }
        std::vector<T> aux(m * n);  // softmax rows for backward
        const T* pl = logits.ptr();
        double total = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            const T* x = pl + i * n;
            T* p = aux.data() + i * n;
            T mx = x[0];
            for (std::size_t j = 1; j < n; ++j) mx = x[j] > mx ? x[j] : mx;
            T denom = T(0);
            for (std::size_t j = 0; j < n; ++j) {
                p[j] = std::exp(x[j] - mx);
                denom += p[j];
            }
            T lse = std::log(denom);
            T inv = T(1) / denom;
            for (std::size_t j = 0; j < n; ++j) p[j] *= inv;
            std::size_t t = static_cast<std::size_t>(targets[i]);
            total += -static_cast<double>(x[t] - mx - lse);
        }
        Tensor<T> out = Tensor<T>::from_values({1}, {static_cast<T>(total)});
        Tensor<T> r = push(OpKind::cross_entropy_sum, {logits.node}, std::move(out),
                           logits.requires_grad);
        Node& nd = nodes_.back();
        nd.aux = std::move(aux);
        nd.idata = targets;
        return r;
    }

    Tensor<T> sum(const Tensor<T>& a) {
        check_mine(a, "sum");
        double total = 0.0;
        const T* pa = a.ptr();
        for (std::size_t i = 0, n = a.numel(); i < n; ++i) total += static_cast<double>(pa[i]);
        Tensor<T> out = Tensor<T>::from_values({1}, {static_cast<T>(total)});
        return push(OpKind::sum, {a.node}, std::move(out), a.requires_grad);
    }

    // -- backward ------------------------------------------------------------

    // Reverse sweep from a scalar loss. Each node is visited exactly once;
    // nodes not on a path between a grad-requiring leaf and the loss are
    // skipped. Gradients stay attached to nodes and are read via grad().
    void backward(const Tensor<T>& loss, T seed = T(1)) {
        check_mine(loss, "backward");
        AUTOCOMP_REQUIRE(loss.numel() == 1, "grad.loss",
                std::string("backward: loss must be scalar, got ") + loss.shape_str());
        std::vector<char> wanted(nodes_.size(), 0);
        wanted[static_cast<std::size_t>(loss.node)] = 1;
        Node& ln = nodes_[static_cast<std::size_t>(loss.node)];
        ln.grad.assign(1, seed);
        for (int id = loss.node; id >= 0; --id) {
            Node& nd = nodes_[static_cast<std::size_t>(id)];
            if (!wanted[static_cast<std::size_t>(id)] || !nd.needs_grad) continue;
            if (nd.grad.empty()) continue;
            for (int in : nd.inputs) {
                Node& src = nodes_[static_cast<std::size_t>(in)];
                if (!src.needs_grad) continue;
                wanted[static_cast<std::size_t>(in)] = 1;
                if (src.grad.empty()) src.grad.assign(src.out.numel(), T(0));
            }
            propagate(nd);
        }
    }

    // Gradient of a node after backward; nullptr when none was produced.
    const std::vector<T>* grad(int node_id) const {
        const Node& nd = nodes_.at(static_cast<std::size_t>(node_id));
        return nd.grad.empty() ? nullptr : &nd.grad;
    }

    const std::vector<T>* grad(const Tensor<T>& t) const { return grad(t.node); }

private:
    std::vector<Node> nodes_;
    std::uint32_t serial_;

    void check_mine(const Tensor<T>& t, const char* what) const {
        AUTOCOMP_REQUIRE(t.node >= 0 && t.graph == serial_ &&
                    static_cast<std::size_t>(t.node) < nodes_.size(),
                "graph.input",
                std::string(what) + ": tensor is not registered on this graph");
    }

    Tensor<T> push(OpKind kind, std::vector<int> inputs, Tensor<T> out, bool needs_grad) {
        Node nd;
        nd.kind = kind;
        nd.inputs = std::move(inputs);
        nd.needs_grad = needs_grad;
        out.node = static_cast<int>(nodes_.size());
        out.graph = serial_;
        out.requires_grad = needs_grad;
        nd.out = out;
        nodes_.push_back(std::move(nd));
        return out;
    }

    std::vector<T>& gbuf(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }
    const Tensor<T>& val(int id) const { return nodes_[static_cast<std::size_t>(id)].out; }

    static bool has(const std::vector<T>& g) { return !g.empty(); }

    // C[m,n] += A[m,k] * B[k,n]; axpy inner loop, vectorizes without
    // reassociation so appended zero contributions stay bit-exact.
    static void gemm_ab(const T* __restrict a, const T* __restrict b, T* __restrict c,
                        std::size_t m, std::size_t k, std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            T* cr = c + i * n;
            const T* ar = a + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                T av = ar[p];
                const T* br = b + p * n;
                for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    }

    // C[m,n] += A[m,k] * B[n,k]^T. Materializing B^T turns the inner loop
    // into the same axpy form as gemm_ab; the transpose is cheap next to the
    // multiply at these shapes.
    static void gemm_abt(const T* __restrict a, const T* __restrict b, T* __restrict c,
                         std::size_t m, std::size_t k, std::size_t n) {
        std::vector<T> bt(k * n);
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
        }
        gemm_ab(a, bt.data(), c, m, k, n);
    }

    // C[k,n] += A[m,k]^T * B[m,n]
    static void gemm_atb(const T* __restrict a, const T* __restrict b, T* __restrict c,
                         std::size_t m, std::size_t k, std::size_t n) {
        for (std::size_t i = 0; i < m; ++i) {
            const T* ar = a + i * k;
            const T* br = b + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                T av = ar[p];
                T* cr = c + p * n;
                for (std::size_t j = 0; j < n; ++j) cr[j] += av * br[j];
            }
        }
    }

    void propagate(Node& nd) {
        const std::vector<T>& go = nd.grad;
        switch (nd.kind) {
            case OpKind::leaf:
            case OpKind::constant:
            case OpKind::detach:
                return;  // sinks
            case OpKind::matmul: {
                const Tensor<T>& a = val(nd.inputs[0]);
                const Tensor<T>& b = val(nd.inputs[1]);
                std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
                if (has(gbuf(nd.inputs[0])))
                    gemm_abt(go.data(), b.ptr(), gbuf(nd.inputs[0]).data(), m, n, k);
                if (has(gbuf(nd.inputs[1])))
                    gemm_atb(a.ptr(), go.data(), gbuf(nd.inputs[1]).data(), m, k, n);
                return;
            }
            case OpKind::matmul_bias: {
                const Tensor<T>& a = val(nd.inputs[0]);
                const Tensor<T>& b = val(nd.inputs[1]);
                std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
                if (has(gbuf(nd.inputs[0])))
                    gemm_abt(go.data(), b.ptr(), gbuf(nd.inputs[0]).data(), m, n, k);
                if (has(gbuf(nd.inputs[1])))
                    gemm_atb(a.ptr(), go.data(), gbuf(nd.inputs[1]).data(), m, k, n);
                std::vector<T>& gb = gbuf(nd.inputs[2]);
                if (has(gb)) {
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
                    }
                }
                return;
            }
            case OpKind::matmul_bt: {
                // out = A * B^T, A: m x k, B: n x k, out: m x n
                const Tensor<T>& a = val(nd.inputs[0]);
                const Tensor<T>& b = val(nd.inputs[1]);
                std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
                if (has(gbuf(nd.inputs[0])))
                    gemm_ab(go.data(), b.ptr(), gbuf(nd.inputs[0]).data(), m, n, k);
                if (has(gbuf(nd.inputs[1])))
                    gemm_atb(go.data(), a.ptr(), gbuf(nd.inputs[1]).data(), m, n, k);
                return;
            }
            case OpKind::add: {
                for (int which = 0; which < 2; ++which) {
                    std::vector<T>& gi = gbuf(nd.inputs[static_cast<std::size_t>(which)]);
                    if (!has(gi)) continue;
                    for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
                }
                return;
            }
            case OpKind::add_rowvec: {
                const Tensor<T>& a = val(nd.inputs[0]);
                std::size_t m = a.shape[0], n = a.shape[1];
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (has(ga)) {
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                }
                std::vector<T>& gb = gbuf(nd.inputs[1]);
                if (has(gb)) {
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) gb[j] += go[i * n + j];
                    }
                }
                return;
            }
            case OpKind::mul: {
                const Tensor<T>& a = val(nd.inputs[0]);
                const Tensor<T>& b = val(nd.inputs[1]);
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                std::vector<T>& gb = gbuf(nd.inputs[1]);
                if (has(ga)) {
                    const T* pb = b.ptr();
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb[i];
                }
                if (has(gb)) {
                    const T* pa = a.ptr();
                    for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa[i];
                }
                return;
            }
            case OpKind::scale: {
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (has(ga)) {
                    for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * nd.alpha;
                }
                return;
            }
            case OpKind::row_softmax:
            case OpKind::causal_row_softmax: {
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (!has(ga)) return;
                std::size_t m = nd.out.shape[0], n = nd.out.shape[1];
                bool causal = nd.kind == OpKind::causal_row_softmax;
                const T* y = nd.out.ptr();
                for (std::size_t i = 0; i < m; ++i) {
                    std::size_t w = causal ? i + 1 : n;
                    const T* yr = y + i * n;
                    const T* gr = go.data() + i * n;
                    T dot = T(0);
                    for (std::size_t j = 0; j < w; ++j) dot += yr[j] * gr[j];
                    T* gi = ga.data() + i * n;
                    for (std::size_t j = 0; j < w; ++j) gi[j] += yr[j] * (gr[j] - dot);
                }
                return;
            }
            case OpKind::row_log_softmax: {
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (!has(ga)) return;
                std::size_t m = nd.out.shape[0], n = nd.out.shape[1];
                const T* y = nd.out.ptr();
                for (std::size_t i = 0; i < m; ++i) {
                    const T* yr = y + i * n;
                    const T* gr = go.data() + i * n;
                    T gsum = T(0);
                    for (std::size_t j = 0; j < n; ++j) gsum += gr[j];
                    T* gi = ga.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) gi[j] += gr[j] - std::exp(yr[j]) * gsum;
                }
                return;
            }
            case OpKind::layer_norm: {
                const Tensor<T>& a = val(nd.inputs[0]);
                const Tensor<T>& gamma = val(nd.inputs[1]);
                std::size_t m = a.shape[0], n = a.shape[1];
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                std::vector<T>& gg = gbuf(nd.inputs[1]);
                std::vector<T>& gb = gbuf(nd.inputs[2]);
                const T* pa = a.ptr();
                const T* pg = gamma.ptr();
                for (std::size_t i = 0; i < m; ++i) {
                    T mean = nd.aux[2 * i];
                    T inv_std = nd.aux[2 * i + 1];
                    const T* x = pa + i * n;
                    const T* gr = go.data() + i * n;
                    if (has(gg) || has(gb)) {
                        for (std::size_t j = 0; j < n; ++j) {
                            T xh = (x[j] - mean) * inv_std;
                            if (has(gg)) gg[j] += gr[j] * xh;
                            if (has(gb)) gb[j] += gr[j];
                        }
                    }
                    if (has(ga)) {
                        T s1 = T(0), s2 = T(0);
                        for (std::size_t j = 0; j < n; ++j) {
                            T dxh = gr[j] * pg[j];
                            T xh = (x[j] - mean) * inv_std;
                            s1 += dxh;
                            s2 += dxh * xh;
                        }
                        T invn = T(1) / static_cast<T>(n);
                        T* gi = ga.data() + i * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            T dxh = gr[j] * pg[j];
                            T xh = (x[j] - mean) * inv_std;
                            gi[j] += inv_std * (dxh - invn * s1 - xh * invn * s2);
                        }
                    }
                }
                return;
            }
            case OpKind::gelu: {
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (!has(ga)) return;
                const Tensor<T>& a = val(nd.inputs[0]);
                const T c0 = T(0.7978845608028654);
                const T c1 = T(0.044715);
                const T* pa = a.ptr();
                for (std::size_t i = 0; i < go.size(); ++i) {
                    T x = pa[i];
                    T th = nd.aux[i];
                    T sech2 = T(1) - th * th;
                    T du = c0 * (T(1) + T(3) * c1 * x * x);
                    T d = T(0.5) * (T(1) + th) + T(0.5) * x * sech2 * du;
                    ga[i] += go[i] * d;
                }
                return;
            }
            case OpKind::embedding: {
                std::vector<T>& gt = gbuf(nd.inputs[0]);
                if (!has(gt)) return;
                std::size_t d = nd.out.shape[1];
                for (std::size_t i = 0; i < nd.idata.size(); ++i) {
                    T* dst = gt.data() + static_cast<std::size_t>(nd.idata[i]) * d;
                    const T* src = go.data() + i * d;
                    for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
                }
                return;
            }
            case OpKind::concat0: {
                std::size_t off = 0;
                for (int in : nd.inputs) {
                    const Tensor<T>& p = val(in);
                    std::size_t c = p.numel();
                    std::vector<T>& gi = gbuf(in);
                    if (has(gi)) {
                        for (std::size_t i = 0; i < c; ++i) gi[i] += go[off + i];
                    }
                    off += c;
                }
                return;
            }
            case OpKind::concat1: {
                std::size_t m = nd.out.shape[0], n = nd.out.shape[1];
                std::size_t off = 0;
                for (int in : nd.inputs) {
                    const Tensor<T>& p = val(in);
                    std::size_t w = p.shape[1];
                    std::vector<T>& gi = gbuf(in);
                    if (has(gi)) {
                        for (std::size_t i = 0; i < m; ++i) {
                            for (std::size_t j = 0; j < w; ++j)
                                gi[i * w + j] += go[i * n + off + j];
                        }
                    }
                    off += w;
                }
                return;
            }
            case OpKind::slice: {
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (!has(ga)) return;
                const Tensor<T>& a = val(nd.inputs[0]);
                std::size_t n = a.shape[1];
                std::size_t start = static_cast<std::size_t>(nd.i1);
                std::size_t len = static_cast<std::size_t>(nd.i2);
                if (nd.i0 == 0) {
                    for (std::size_t i = 0; i < len * n; ++i) ga[start * n + i] += go[i];
                } else {
                    std::size_t m = a.shape[0];
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < len; ++j)
                            ga[i * n + start + j] += go[i * len + j];
                    }
                }
                return;
            }
            case OpKind::rope: {
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (!has(ga)) return;
                std::size_t m = nd.out.shape[0], n = nd.out.shape[1];
                int n_heads = nd.i0;
                std::size_t head_dim = n / static_cast<std::size_t>(n_heads);
                for (std::size_t i = 0; i < m; ++i) {
                    T pos = static_cast<T>(i + static_cast<std::size_t>(nd.i1));
                    for (std::size_t h = 0; h < static_cast<std::size_t>(n_heads); ++h) {
                        for (std::size_t j = 0; j < head_dim; j += 2) {
                            T theta =
                                pos * std::pow(nd.alpha, -static_cast<T>(j) / static_cast<T>(head_dim));
                            T c = std::cos(theta), s = std::sin(theta);
                            std::size_t k = i * n + h * head_dim + j;
                            T g0 = go[k], g1 = go[k + 1];
                            // inverse rotation
                            ga[k] += g0 * c + g1 * s;
                            ga[k + 1] += -g0 * s + g1 * c;
                        }
                    }
                }
                return;
            }
            case OpKind::cross_entropy_sum: {
                std::vector<T>& gl = gbuf(nd.inputs[0]);
                if (!has(gl)) return;
                const Tensor<T>& logits = val(nd.inputs[0]);
                std::size_t m = logits.shape[0], n = logits.shape[1];
                T g = go[0];
                for (std::size_t i = 0; i < m; ++i) {
                    const T* p = nd.aux.data() + i * n;
                    T* gi = gl.data() + i * n;
                    for (std::size_t j = 0; j < n; ++j) gi[j] += g * p[j];
                    gi[static_cast<std::size_t>(nd.idata[i])] -= g;
                }
                return;
            }
            case OpKind::sum: {
                std::vector<T>& ga = gbuf(nd.inputs[0]);
                if (!has(ga)) return;
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
                return;
            }
        }
    }
};

}  // namespace autocomp
