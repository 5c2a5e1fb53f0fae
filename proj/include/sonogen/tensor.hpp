#pragma once

// Dense float32 tensor with define-by-run reverse-mode autodiff.
// Each forward op records parents and a pull-style backprop closure; the
// graph lives only as long as the output tensors and is rebuilt every step.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sonogen/error.hpp"
#include "sonogen/rng.hpp"

namespace sonogen {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorNode {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // sized lazily on first backward touch
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backprop;  // pulls node.grad into parents

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0f);
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return filled(std::move(shape), 0.0f, requires_grad);
    }

    static Tensor filled(Shape shape, float v, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->value.assign(shape_numel(shape), v);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ShapeError("tensor data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    static Tensor scalar(float v) { return from({1}, {v}); }

    static Tensor uniform(Shape shape, Rng& rng, float lo, float hi, bool requires_grad = false) {
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->value.resize(shape_numel(n->shape));
        for (float& x : n->value) x = rng.uniform(lo, hi);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t size() const { return node_->value.size(); }
    int rows() const { return node_->shape.size() == 1 ? 1 : node_->shape[0]; }
    int cols() const { return node_->shape.size() == 1 ? node_->shape[0] : node_->shape[1]; }

    std::vector<float>& values() { return node_->value; }
    const std::vector<float>& values() const { return node_->value; }
    float item() const {
        if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::vector<float>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0f); }
    void drop_grad() { node_->grad.clear(); }

    const std::shared_ptr<TensorNode>& node() const { return node_; }

    // Value copy cut off from the tape.
    Tensor detach() const {
        auto n = std::make_shared<TensorNode>();
        n->shape = node_->shape;
        n->value = node_->value;
        return Tensor(n);
    }

private:
    std::shared_ptr<TensorNode> node_;
};

namespace detail {

// C[m x n] (+)= op(A) * op(B). Row-major, ikj order for the common case.
inline void gemm(float* c, const float* a, const float* b, int m, int k, int n, bool trans_a,
                 bool trans_b, bool accumulate) {
    if (!accumulate) std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0f);
    if (!trans_a && !trans_b) {
        for (int i = 0; i < m; ++i) {
            const float* arow = a + static_cast<std::size_t>(i) * k;
            float* crow = c + static_cast<std::size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const float av = arow[p];
                if (av == 0.0f) continue;
                const float* brow = b + static_cast<std::size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // B stored [n x k]
        for (int i = 0; i < m; ++i) {
            const float* arow = a + static_cast<std::size_t>(i) * k;
            float* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const float* brow = b + static_cast<std::size_t>(j) * k;
                float acc = 0.0f;
                for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        // A stored [k x m]
        for (int p = 0; p < k; ++p) {
            const float* arow = a + static_cast<std::size_t>(p) * m;
            const float* brow = b + static_cast<std::size_t>(p) * n;
            for (int i = 0; i < m; ++i) {
                const float av = arow[i];
                if (av == 0.0f) continue;
                float* crow = c + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        for (int i = 0; i < m; ++i) {
            float* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                float acc = 0.0f;
                for (int p = 0; p < k; ++p)
                    acc += a[static_cast<std::size_t>(p) * m + i] * b[static_cast<std::size_t>(j) * k + p];
                crow[j] += acc;
            }
        }
    }
}

inline std::shared_ptr<TensorNode> make_op(Shape shape, std::vector<std::shared_ptr<TensorNode>> parents) {
    auto n = std::make_shared<TensorNode>();
    n->value.resize(shape_numel(shape));
    n->shape = std::move(shape);
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    n->parents = std::move(parents);
    return n;
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}

inline void check_2d(const Tensor& t, const char* op) {
    if (t.shape().size() != 2)
        throw ShapeError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---- elementwise ----

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    auto n = detail::make_op(a.shape(), {a.node(), b.node()});
    const std::size_t sz = n->value.size();
    for (std::size_t i = 0; i < sz; ++i) n->value[i] = a.values()[i] + b.values()[i];
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            for (int pi = 0; pi < 2; ++pi) {
                auto& p = *self.parents[pi];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
            }
        };
    return Tensor(n);
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    auto n = detail::make_op(a.shape(), {a.node(), b.node()});
    const std::size_t sz = n->value.size();
    for (std::size_t i = 0; i < sz; ++i) n->value[i] = a.values()[i] * b.values()[i];
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& a = *self.parents[0];
            auto& b = *self.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) a.grad[i] += self.grad[i] * b.value[i];
            }
            if (b.requires_grad) {
                b.ensure_grad();
                for (std::size_t i = 0; i < self.grad.size(); ++i) b.grad[i] += self.grad[i] * a.value[i];
            }
        };
    return Tensor(n);
}

inline Tensor scale(const Tensor& a, float s) {
    auto n = detail::make_op(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.values()[i] * s;
    if (n->requires_grad)
        n->backprop = [s](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
        };
    return Tensor(n);
}

inline Tensor add_scalar(const Tensor& a, float s) {
    auto n = detail::make_op(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.values()[i] + s;
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    return Tensor(n);
}

inline Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0f)); }

inline Tensor relu(const Tensor& a) {
    auto n = detail::make_op(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::max(0.0f, a.values()[i]);
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (self.value[i] > 0.0f) p.grad[i] += self.grad[i];
        };
    return Tensor(n);
}

inline Tensor sigmoid(const Tensor& a) {
    auto n = detail::make_op(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i)
        n->value[i] = 1.0f / (1.0f + std::exp(-a.values()[i]));
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                const float y = self.value[i];
                p.grad[i] += self.grad[i] * y * (1.0f - y);
            }
        };
    return Tensor(n);
}

inline Tensor exp_of(const Tensor& a) {
    auto n = detail::make_op(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::exp(a.values()[i]);
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * self.value[i];
        };
    return Tensor(n);
}

inline Tensor log_of(const Tensor& a) {
    auto n = detail::make_op(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::log(a.values()[i]);
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] / p.value[i];
        };
    return Tensor(n);
}

inline Tensor sqrt_of(const Tensor& a) {
    auto n = detail::make_op(a.shape(), {a.node()});
    for (std::size_t i = 0; i < n->value.size(); ++i) n->value[i] = std::sqrt(a.values()[i]);
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                p.grad[i] += self.grad[i] * 0.5f / std::max(self.value[i], 1e-12f);
        };
    return Tensor(n);
}

// ---- structural ----

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
    auto n = detail::make_op(std::move(shape), {a.node()});
    n->value = a.values();
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    return Tensor(n);
}

inline Tensor transpose(const Tensor& a) {
    detail::check_2d(a, "transpose");
    const int r = a.shape()[0], c = a.shape()[1];
    auto n = detail::make_op({c, r}, {a.node()});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) n->value[static_cast<std::size_t>(j) * r + i] = a.values()[static_cast<std::size_t>(i) * c + j];
    if (n->requires_grad)
        n->backprop = [r, c](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    p.grad[static_cast<std::size_t>(i) * c + j] += self.grad[static_cast<std::size_t>(j) * r + i];
        };
    return Tensor(n);
}

inline Tensor slice_cols(const Tensor& a, int start, int len) {
    detail::check_2d(a, "slice_cols");
    const int r = a.shape()[0], c = a.shape()[1];
    if (start < 0 || len <= 0 || start + len > c)
        throw ShapeError("slice_cols: [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of range for " + shape_str(a.shape()));
    auto n = detail::make_op({r, len}, {a.node()});
    for (int i = 0; i < r; ++i)
        std::copy_n(a.values().data() + static_cast<std::size_t>(i) * c + start, len,
                    n->value.data() + static_cast<std::size_t>(i) * len);
    if (n->requires_grad)
        n->backprop = [r, c, start, len](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < len; ++j)
                    p.grad[static_cast<std::size_t>(i) * c + start + j] +=
                        self.grad[static_cast<std::size_t>(i) * len + j];
        };
    return Tensor(n);
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const int r = parts[0].shape()[0];
    int total = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<int> widths;
    for (const auto& t : parts) {
        detail::check_2d(t, "concat_cols");
        if (t.shape()[0] != r) throw ShapeError("concat_cols: row counts differ");
        widths.push_back(t.shape()[1]);
        total += t.shape()[1];
        parents.push_back(t.node());
    }
    auto n = detail::make_op({r, total}, std::move(parents));
    int off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const int w = widths[k];
        for (int i = 0; i < r; ++i)
            std::copy_n(parts[k].values().data() + static_cast<std::size_t>(i) * w, w,
                        n->value.data() + static_cast<std::size_t>(i) * total + off);
        off += w;
    }
    if (n->requires_grad)
        n->backprop = [r, total, widths](TensorNode& self) {
            int off = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                const int w = widths[k];
                auto& p = *self.parents[k];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < w; ++j)
                            p.grad[static_cast<std::size_t>(i) * w + j] +=
                                self.grad[static_cast<std::size_t>(i) * total + off + j];
                }
                off += w;
            }
        };
    return Tensor(n);
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const int c = parts[0].cols();
    int total = 0;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::vector<int> heights;
    for (const auto& t : parts) {
        detail::check_2d(t, "concat_rows");
        if (t.shape()[1] != c) throw ShapeError("concat_rows: column counts differ");
        heights.push_back(t.shape()[0]);
        total += t.shape()[0];
        parents.push_back(t.node());
    }
    auto n = detail::make_op({total, c}, std::move(parents));
    std::size_t off = 0;
    for (const auto& t : parts) {
        std::copy(t.values().begin(), t.values().end(), n->value.begin() + off);
        off += t.size();
    }
    if (n->requires_grad)
        n->backprop = [heights, c](TensorNode& self) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < self.parents.size(); ++k) {
                auto& p = *self.parents[k];
                const std::size_t sz = static_cast<std::size_t>(heights[k]) * c;
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (std::size_t i = 0; i < sz; ++i) p.grad[i] += self.grad[off + i];
                }
                off += sz;
            }
        };
    return Tensor(n);
}

inline Tensor gather_rows(const Tensor& table, const std::vector<int>& idx) {
    detail::check_2d(table, "gather_rows");
    const int c = table.shape()[1];
    auto n = detail::make_op({static_cast<int>(idx.size()), c}, {table.node()});
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= table.shape()[0]) throw ContractError("gather_rows: index out of range");
        std::copy_n(table.values().data() + static_cast<std::size_t>(idx[i]) * c, c,
                    n->value.data() + i * c);
    }
    if (n->requires_grad)
        n->backprop = [idx, c](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < c; ++j)
                    p.grad[static_cast<std::size_t>(idx[i]) * c + j] += self.grad[i * c + j];
        };
    return Tensor(n);
}

// ---- linear algebra ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::check_2d(a, "matmul");
    detail::check_2d(b, "matmul");
    const int m = a.shape()[0], k = a.shape()[1];
    if (b.shape()[0] != k)
        throw ShapeError("matmul: inner dimensions of " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " disagree");
    const int nn = b.shape()[1];
    auto n = detail::make_op({m, nn}, {a.node(), b.node()});
    detail::gemm(n->value.data(), a.values().data(), b.values().data(), m, k, nn, false, false, false);
    if (n->requires_grad)
        n->backprop = [m, k, nn](TensorNode& self) {
            auto& a = *self.parents[0];
            auto& b = *self.parents[1];
            if (a.requires_grad) {
                a.ensure_grad();
                // dA += dC * B^T
                detail::gemm(a.grad.data(), self.grad.data(), b.value.data(), m, nn, k, false, true, true);
            }
            if (b.requires_grad) {
                b.ensure_grad();
                // dB += A^T * dC
                detail::gemm(b.grad.data(), a.value.data(), self.grad.data(), k, m, nn, true, false, true);
            }
        };
    return Tensor(n);
}

// ---- reductions ----

inline Tensor sum(const Tensor& a) {
    auto n = detail::make_op({1}, {a.node()});
    double acc = 0.0;
    for (float v : a.values()) acc += v;
    n->value[0] = static_cast<float>(acc);
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            const float g = self.grad[0];
            for (float& x : p.grad) x += g;
        };
    return Tensor(n);
}

inline Tensor mean_all(const Tensor& a) { return scale(sum(a), 1.0f / static_cast<float>(a.size())); }

// [n x c] -> [1 x c], column means.
inline Tensor mean_rows(const Tensor& a) {
    detail::check_2d(a, "mean_rows");
    const int r = a.shape()[0], c = a.shape()[1];
    auto n = detail::make_op({1, c}, {a.node()});
    std::fill(n->value.begin(), n->value.end(), 0.0f);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) n->value[j] += a.values()[static_cast<std::size_t>(i) * c + j];
    const float inv = 1.0f / static_cast<float>(r);
    for (float& v : n->value) v *= inv;
    if (n->requires_grad)
        n->backprop = [r, c, inv](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) p.grad[static_cast<std::size_t>(i) * c + j] += self.grad[j] * inv;
        };
    return Tensor(n);
}

// [n x c] -> [n x 1], row sums.
inline Tensor row_sum(const Tensor& a) {
    detail::check_2d(a, "row_sum");
    const int r = a.shape()[0], c = a.shape()[1];
    auto n = detail::make_op({r, 1}, {a.node()});
    for (int i = 0; i < r; ++i) {
        double acc = 0.0;
        for (int j = 0; j < c; ++j) acc += a.values()[static_cast<std::size_t>(i) * c + j];
        n->value[i] = static_cast<float>(acc);
    }
    if (n->requires_grad)
        n->backprop = [r, c](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j) p.grad[static_cast<std::size_t>(i) * c + j] += self.grad[i];
        };
    return Tensor(n);
}

// x[i][j] / d[i][0], broadcasting the divisor down each row.
inline Tensor div_bcol(const Tensor& x, const Tensor& d) {
    detail::check_2d(x, "div_bcol");
    if (d.shape() != Shape{x.shape()[0], 1})
        throw ShapeError("div_bcol: divisor must be [rows x 1], got " + shape_str(d.shape()));
    const int r = x.shape()[0], c = x.shape()[1];
    auto n = detail::make_op(x.shape(), {x.node(), d.node()});
    for (int i = 0; i < r; ++i) {
        const float inv = 1.0f / d.values()[i];
        for (int j = 0; j < c; ++j)
            n->value[static_cast<std::size_t>(i) * c + j] = x.values()[static_cast<std::size_t>(i) * c + j] * inv;
    }
    if (n->requires_grad)
        n->backprop = [r, c](TensorNode& self) {
            auto& x = *self.parents[0];
            auto& d = *self.parents[1];
            if (x.requires_grad) {
                x.ensure_grad();
                for (int i = 0; i < r; ++i) {
                    const float inv = 1.0f / d.value[i];
                    for (int j = 0; j < c; ++j)
                        x.grad[static_cast<std::size_t>(i) * c + j] +=
                            self.grad[static_cast<std::size_t>(i) * c + j] * inv;
                }
            }
            if (d.requires_grad) {
                d.ensure_grad();
                for (int i = 0; i < r; ++i) {
                    const float inv = 1.0f / d.value[i];
                    float acc = 0.0f;
                    for (int j = 0; j < c; ++j)
                        acc += self.grad[static_cast<std::size_t>(i) * c + j] *
                               self.value[static_cast<std::size_t>(i) * c + j];
                    d.grad[i] -= acc * inv;
                }
            }
        };
    return Tensor(n);
}

// ---- normalizations ----

// Softmax along the last axis of a rank-2 tensor, max-subtracted.
inline Tensor softmax_rows(const Tensor& a) {
    detail::check_2d(a, "softmax_rows");
    const int r = a.shape()[0], c = a.shape()[1];
    auto n = detail::make_op(a.shape(), {a.node()});
    for (int i = 0; i < r; ++i) {
        const float* row = a.values().data() + static_cast<std::size_t>(i) * c;
        float* out = n->value.data() + static_cast<std::size_t>(i) * c;
        float m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        float z = 0.0f;
        for (int j = 0; j < c; ++j) {
            out[j] = std::exp(row[j] - m);
            z += out[j];
        }
        const float inv = 1.0f / z;
        for (int j = 0; j < c; ++j) out[j] *= inv;
    }
    if (n->requires_grad)
        n->backprop = [r, c](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < r; ++i) {
                const float* y = self.value.data() + static_cast<std::size_t>(i) * c;
                const float* gy = self.grad.data() + static_cast<std::size_t>(i) * c;
                float dot = 0.0f;
                for (int j = 0; j < c; ++j) dot += y[j] * gy[j];
                float* gx = p.grad.data() + static_cast<std::size_t>(i) * c;
                for (int j = 0; j < c; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        };
    return Tensor(n);
}

// Row-wise layer normalization with affine transform.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = 1e-5f) {
    detail::check_2d(x, "layer_norm");
    const int r = x.shape()[0], c = x.shape()[1];
    if (static_cast<int>(gamma.size()) != c || static_cast<int>(beta.size()) != c)
        throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(c) + " elements");
    auto n = detail::make_op(x.shape(), {x.node(), gamma.node(), beta.node()});
    std::vector<float> inv_std(r), means(r);
    for (int i = 0; i < r; ++i) {
        const float* row = x.values().data() + static_cast<std::size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        means[i] = static_cast<float>(mean);
        inv_std[i] = 1.0f / std::sqrt(static_cast<float>(var) + eps);
        float* out = n->value.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j)
            out[j] = (row[j] - means[i]) * inv_std[i] * gamma.values()[j] + beta.values()[j];
    }
    if (n->requires_grad)
        n->backprop = [r, c, means, inv_std](TensorNode& self) {
            auto& x = *self.parents[0];
            auto& g = *self.parents[1];
            auto& b = *self.parents[2];
            if (x.requires_grad) x.ensure_grad();
            if (g.requires_grad) g.ensure_grad();
            if (b.requires_grad) b.ensure_grad();
            for (int i = 0; i < r; ++i) {
                const float* xrow = x.value.data() + static_cast<std::size_t>(i) * c;
                const float* gy = self.grad.data() + static_cast<std::size_t>(i) * c;
                const float is = inv_std[i];
                if (g.requires_grad || b.requires_grad) {
                    for (int j = 0; j < c; ++j) {
                        const float xhat = (xrow[j] - means[i]) * is;
                        if (g.requires_grad) g.grad[j] += gy[j] * xhat;
                        if (b.requires_grad) b.grad[j] += gy[j];
                    }
                }
                if (x.requires_grad) {
                    // d xhat = gy * gamma; dx via the standard layernorm backward
                    float sum_d = 0.0f, sum_dx = 0.0f;
                    for (int j = 0; j < c; ++j) {
                        const float d = gy[j] * g.value[j];
                        const float xhat = (xrow[j] - means[i]) * is;
                        sum_d += d;
                        sum_dx += d * xhat;
                    }
                    float* gx = x.grad.data() + static_cast<std::size_t>(i) * c;
                    const float invc = 1.0f / c;
                    for (int j = 0; j < c; ++j) {
                        const float d = gy[j] * g.value[j];
                        const float xhat = (xrow[j] - means[i]) * is;
                        gx[j] += is * (d - invc * sum_d - xhat * invc * sum_dx);
                    }
                }
            }
        };
    return Tensor(n);
}

// Rows scaled to unit L2 norm; denominator floored to keep the zero vector finite.
inline Tensor l2_normalize_rows(const Tensor& x, float floor = 1e-8f) {
    Tensor sq = row_sum(mul(x, x));
    Tensor norm = sqrt_of(add_scalar(sq, floor * floor));
    return div_bcol(x, norm);
}

// ---- convolution / image rearrangement primitives ----

// [T x F] -> [T' x (k*F)] sliding windows with stride; T' = 1 + (T-k)/stride.
inline Tensor unfold1d(const Tensor& x, int k, int stride) {
    detail::check_2d(x, "unfold1d");
    const int t = x.shape()[0], f = x.shape()[1];
    if (k < 1 || stride < 1 || t < k)
        throw ShapeError("unfold1d: window " + std::to_string(k) + " invalid for " + shape_str(x.shape()));
    const int to = 1 + (t - k) / stride;
    auto n = detail::make_op({to, k * f}, {x.node()});
    for (int i = 0; i < to; ++i)
        std::copy_n(x.values().data() + static_cast<std::size_t>(i) * stride * f, static_cast<std::size_t>(k) * f,
                    n->value.data() + static_cast<std::size_t>(i) * k * f);
    if (n->requires_grad)
        n->backprop = [to, k, f, stride](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (int i = 0; i < to; ++i) {
                const std::size_t src = static_cast<std::size_t>(i) * k * f;
                const std::size_t dst = static_cast<std::size_t>(i) * stride * f;
                for (std::size_t j = 0; j < static_cast<std::size_t>(k) * f; ++j)
                    p.grad[dst + j] += self.grad[src + j];
            }
        };
    return Tensor(n);
}

// Image stored as [(H*W) x C]; output [(H*W) x (k*k*C)] with zero padding.
inline Tensor unfold2d(const Tensor& x, int h, int w, int k, int pad) {
    detail::check_2d(x, "unfold2d");
    if (x.shape()[0] != h * w) throw ShapeError("unfold2d: rows != H*W");
    const int c = x.shape()[1];
    auto n = detail::make_op({h * w, k * k * c}, {x.node()});
    std::fill(n->value.begin(), n->value.end(), 0.0f);
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            float* out = n->value.data() + (static_cast<std::size_t>(y) * w + xx) * k * k * c;
            for (int dy = 0; dy < k; ++dy) {
                const int sy = y + dy - pad;
                if (sy < 0 || sy >= h) continue;
                for (int dx = 0; dx < k; ++dx) {
                    const int sx = xx + dx - pad;
                    if (sx < 0 || sx >= w) continue;
                    std::copy_n(x.values().data() + (static_cast<std::size_t>(sy) * w + sx) * c, c,
                                out + (static_cast<std::size_t>(dy) * k + dx) * c);
                }
            }
        }
    if (n->requires_grad)
        n->backprop = [h, w, k, pad, c](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const float* g = self.grad.data() + (static_cast<std::size_t>(y) * w + xx) * k * k * c;
                    for (int dy = 0; dy < k; ++dy) {
                        const int sy = y + dy - pad;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = 0; dx < k; ++dx) {
                            const int sx = xx + dx - pad;
                            if (sx < 0 || sx >= w) continue;
                            float* dst = p.grad.data() + (static_cast<std::size_t>(sy) * w + sx) * c;
                            const float* src = g + (static_cast<std::size_t>(dy) * k + dx) * c;
                            for (int j = 0; j < c; ++j) dst[j] += src[j];
                        }
                    }
                }
        };
    return Tensor(n);
}

// Fractional-stride upsampling: [(H*W) x C] -> [(2H*2W) x C] with inputs at
// even coordinates and zeros elsewhere.
inline Tensor zero_upsample2x(const Tensor& x, int h, int w) {
    detail::check_2d(x, "zero_upsample2x");
    if (x.shape()[0] != h * w) throw ShapeError("zero_upsample2x: rows != H*W");
    const int c = x.shape()[1];
    auto n = detail::make_op({4 * h * w, c}, {x.node()});
    std::fill(n->value.begin(), n->value.end(), 0.0f);
    const int w2 = 2 * w;
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
            std::copy_n(x.values().data() + (static_cast<std::size_t>(y) * w + xx) * c, c,
                        n->value.data() + (static_cast<std::size_t>(2 * y) * w2 + 2 * xx) * c);
    if (n->requires_grad)
        n->backprop = [h, w, c](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            const int w2 = 2 * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    const float* src = self.grad.data() + (static_cast<std::size_t>(2 * y) * w2 + 2 * xx) * c;
                    float* dst = p.grad.data() + (static_cast<std::size_t>(y) * w + xx) * c;
                    for (int j = 0; j < c; ++j) dst[j] += src[j];
                }
        };
    return Tensor(n);
}

// Nearest-neighbour upsampling: [(H*W) x C] -> [(2H*2W) x C], each input
// pixel copied to its 2x2 block. Backward sums the four block grads.
inline Tensor repeat_upsample2x(const Tensor& x, int h, int w) {
    detail::check_2d(x, "repeat_upsample2x");
    if (x.shape()[0] != h * w) throw ShapeError("repeat_upsample2x: rows != H*W");
    const int c = x.shape()[1];
    auto n = detail::make_op({4 * h * w, c}, {x.node()});
    const int w2 = 2 * w;
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            const float* src = x.values().data() + (static_cast<std::size_t>(y) * w + xx) * c;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    std::copy_n(src, c,
                                n->value.data() +
                                    (static_cast<std::size_t>(2 * y + dy) * w2 + 2 * xx + dx) * c);
        }
    if (n->requires_grad)
        n->backprop = [h, w, c](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            const int w2 = 2 * w;
            for (int y = 0; y < h; ++y)
                for (int xx = 0; xx < w; ++xx) {
                    float* dst = p.grad.data() + (static_cast<std::size_t>(y) * w + xx) * c;
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            const float* src =
                                self.grad.data() +
                                (static_cast<std::size_t>(2 * y + dy) * w2 + 2 * xx + dx) * c;
                            for (int j = 0; j < c; ++j) dst[j] += src[j];
                        }
                }
        };
    return Tensor(n);
}

// Non-overlapping patch extraction: [(H*W) x C] -> [N_p x (p*p*C)], raster
// order over patches and within each patch.
inline Tensor patchify(const Tensor& img, int h, int w, int p) {
    detail::check_2d(img, "patchify");
    if (img.shape()[0] != h * w)
        throw ShapeError("patchify: image rows " + std::to_string(img.shape()[0]) + " != " +
                         std::to_string(h) + "*" + std::to_string(w));
    if (h % p != 0 || w % p != 0) throw ShapeError("patchify: size not divisible by patch size");
    const int c = img.shape()[1];
    const int ph = h / p, pw = w / p;
    auto n = detail::make_op({ph * pw, p * p * c}, {img.node()});
    for (int py = 0; py < ph; ++py)
        for (int px = 0; px < pw; ++px) {
            float* out = n->value.data() + (static_cast<std::size_t>(py) * pw + px) * p * p * c;
            for (int dy = 0; dy < p; ++dy)
                std::copy_n(img.values().data() +
                                (static_cast<std::size_t>(py * p + dy) * w + px * p) * c,
                            static_cast<std::size_t>(p) * c,
                            out + static_cast<std::size_t>(dy) * p * c);
        }
    if (n->requires_grad)
        n->backprop = [h, w, p, c](TensorNode& self) {
            auto& par = *self.parents[0];
            par.ensure_grad();
            const int ph = h / p, pw = w / p;
            for (int py = 0; py < ph; ++py)
                for (int px = 0; px < pw; ++px) {
                    const float* g = self.grad.data() + (static_cast<std::size_t>(py) * pw + px) * p * p * c;
                    for (int dy = 0; dy < p; ++dy) {
                        float* dst = par.grad.data() +
                                     (static_cast<std::size_t>(py * p + dy) * w + px * p) * c;
                        const float* src = g + static_cast<std::size_t>(dy) * p * c;
                        for (int j = 0; j < p * c; ++j) dst[j] += src[j];
                    }
                }
        };
    return Tensor(n);
}

// ---- losses ----

// Mean over rows of -log softmax(logits)[target]. Analytic backward (p - onehot).
inline Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    detail::check_2d(logits, "cross_entropy_rows");
    const int r = logits.shape()[0], c = logits.shape()[1];
    if (static_cast<int>(targets.size()) != r)
        throw ContractError("cross_entropy_rows: target count != rows");
    auto n = detail::make_op({1}, {logits.node()});
    std::vector<float> probs(static_cast<std::size_t>(r) * c);
    double total = 0.0;
    for (int i = 0; i < r; ++i) {
        if (targets[i] < 0 || targets[i] >= c) throw ContractError("cross_entropy_rows: target out of range");
        const float* row = logits.values().data() + static_cast<std::size_t>(i) * c;
        float m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        float z = 0.0f;
        float* prow = probs.data() + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            prow[j] = std::exp(row[j] - m);
            z += prow[j];
        }
        for (int j = 0; j < c; ++j) prow[j] /= z;
        total -= std::log(std::max(prow[targets[i]], 1e-30f));
    }
    n->value[0] = static_cast<float>(total / r);
    if (n->requires_grad)
        n->backprop = [r, c, probs = std::move(probs), targets](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            const float g = self.grad[0] / static_cast<float>(r);
            for (int i = 0; i < r; ++i) {
                float* gx = p.grad.data() + static_cast<std::size_t>(i) * c;
                const float* prow = probs.data() + static_cast<std::size_t>(i) * c;
                for (int j = 0; j < c; ++j) gx[j] += g * (prow[j] - (j == targets[i] ? 1.0f : 0.0f));
            }
        };
    return Tensor(n);
}

// log(sum(exp(x))) over all elements, max-shifted for stability.
inline Tensor logsumexp_all(const Tensor& x) {
    const float m = *std::max_element(x.values().begin(), x.values().end());
    Tensor shifted = add_scalar(x, -m);
    return add_scalar(log_of(sum(exp_of(shifted))), m);
}

// ---- backward pass ----

inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    // Iterative topological sort from the loss.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* parent = node->parents[idx++].get();
            if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    // Interior nodes get fresh grads each pass; leaves (parameters, inputs)
    // accumulate until explicitly zeroed.
    for (TensorNode* n : order)
        if (n->backprop) n->grad.assign(n->value.size(), 0.0f);
        else n->ensure_grad();

    loss.node()->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backprop) (*it)->backprop(**it);
}

}  // namespace sonogen
