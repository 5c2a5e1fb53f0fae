#pragma once

// Layers shared by all towers, a flat named-parameter store, and Adam.

#include <cmath>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sonogen/tensor.hpp"

namespace sonogen {

struct Parameter {
    std::string name;  // dot-separated path, unique per model, checkpoint identity
    Tensor tensor;
};

// Owns parameters in registration order. Registration order is the iteration
// order everywhere (optimizer, checkpoint, momentum copy), which keeps runs
// deterministic.
class ParamStore {
public:
    ParamStore() = default;
    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.push_back({name, t});
        return t;
    }

    Tensor glorot(const std::string& name, int fan_in, int fan_out, Rng& rng) {
        const float bound = std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
        return add(name, Tensor::uniform({fan_in, fan_out}, rng, -bound, bound));
    }

    Tensor zeros(const std::string& name, Shape shape) { return add(name, Tensor::zeros(std::move(shape))); }
    Tensor constant(const std::string& name, Shape shape, float v) {
        return add(name, Tensor::filled(std::move(shape), v));
    }

    std::vector<Parameter>& params() { return params_; }
    const std::vector<Parameter>& params() const { return params_; }
    std::size_t size() const { return params_.size(); }

    Tensor* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second].tensor;
    }

    void set_trainable(bool trainable) {
        for (auto& p : params_) {
            p.tensor.set_requires_grad(trainable);
            if (!trainable) p.tensor.drop_grad();
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    // Sum of squared grads over all trainable parameters.
    double grad_sq_norm() const {
        double acc = 0.0;
        for (const auto& p : params_) {
            if (!p.tensor.requires_grad() || !p.tensor.has_grad()) continue;
            for (float g : const_cast<Tensor&>(p.tensor).grad()) acc += static_cast<double>(g) * g;
        }
        return acc;
    }

private:
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Linear {
    Tensor weight;  // [in x out]
    Tensor bias;    // [1 x out]

    Linear() = default;
    Linear(ParamStore& store, const std::string& prefix, int in, int out, Rng& rng)
        : weight(store.glorot(prefix + ".weight", in, out, rng)),
          bias(store.zeros(prefix + ".bias", {1, out})) {}

    Tensor operator()(const Tensor& x) const {
        Tensor y = matmul(x, weight);
        const int r = y.shape()[0];
        if (r == 1) return add(y, bias);
        std::vector<Tensor> rows(static_cast<std::size_t>(r), bias);
        return add(y, concat_rows(rows));
    }
};

struct LayerNorm {
    Tensor gamma, beta;
    float eps = 1e-5f;

    LayerNorm() = default;
    LayerNorm(ParamStore& store, const std::string& prefix, int dim)
        : gamma(store.constant(prefix + ".gamma", {1, dim}, 1.0f)),
          beta(store.zeros(prefix + ".beta", {1, dim})) {}

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }
};

// Scaled dot-product self-attention over the row dimension.
struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    int heads = 1;
    int dim = 0;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParamStore& store, const std::string& prefix, int dim_, int heads_, Rng& rng)
        : wq(store, prefix + ".wq", dim_, dim_, rng),
          wk(store, prefix + ".wk", dim_, dim_, rng),
          wv(store, prefix + ".wv", dim_, dim_, rng),
          wo(store, prefix + ".wo", dim_, dim_, rng),
          heads(heads_),
          dim(dim_) {
        if (dim_ % heads_ != 0)
            throw ConfigError("attention dim " + std::to_string(dim_) + " not divisible by heads " +
                              std::to_string(heads_));
    }

    Tensor operator()(const Tensor& x) const {
        const int hd = dim / heads;
        const float scaling = 1.0f / std::sqrt(static_cast<float>(hd));
        Tensor q = wq(x), k = wk(x), v = wv(x);
        std::vector<Tensor> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(q, h * hd, hd);
            Tensor kh = slice_cols(k, h * hd, hd);
            Tensor vh = slice_cols(v, h * hd, hd);
            Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), scaling));
            head_outs.push_back(matmul(attn, vh));
        }
        return wo(concat_cols(head_outs));
    }

    // Attention weight matrices only, for invariant tests.
    std::vector<Tensor> attention_maps(const Tensor& x) const {
        const int hd = dim / heads;
        const float scaling = 1.0f / std::sqrt(static_cast<float>(hd));
        Tensor q = wq(x), k = wk(x);
        std::vector<Tensor> maps;
        for (int h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(q, h * hd, hd);
            Tensor kh = slice_cols(k, h * hd, hd);
            maps.push_back(softmax_rows(scale(matmul(qh, transpose(kh)), scaling)));
        }
        return maps;
    }
};

// Two linear layers with a ReLU between.
struct FeedForward {
    Linear fc1, fc2;

    FeedForward() = default;
    FeedForward(ParamStore& store, const std::string& prefix, int dim, int hidden, Rng& rng)
        : fc1(store, prefix + ".fc1", dim, hidden, rng), fc2(store, prefix + ".fc2", hidden, dim, rng) {}

    Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

// Post-norm transformer encoder block:
//   S' = LayerNorm(S + MHA(S));  S = LayerNorm(S' + FFN(S'))
struct TransformerBlock {
    MultiHeadAttention mha;
    FeedForward ffn;
    LayerNorm ln1, ln2;

    TransformerBlock() = default;
    TransformerBlock(ParamStore& store, const std::string& prefix, int dim, int heads, int ffn_hidden,
                     Rng& rng)
        : mha(store, prefix + ".mha", dim, heads, rng),
          ffn(store, prefix + ".ffn", dim, ffn_hidden, rng),
          ln1(store, prefix + ".ln1", dim),
          ln2(store, prefix + ".ln2", dim) {}

    Tensor operator()(const Tensor& x) const {
        Tensor s1 = ln1(add(x, mha(x)));
        return ln2(add(s1, ffn(s1)));
    }
};

// Two-layer MLP with ReLU, the projection-head shape used throughout.
struct Mlp2 {
    Linear fc1, fc2;

    Mlp2() = default;
    Mlp2(ParamStore& store, const std::string& prefix, int in, int hidden, int out, Rng& rng)
        : fc1(store, prefix + ".fc1", in, hidden, rng), fc2(store, prefix + ".fc2", hidden, out, rng) {}

    Tensor operator()(const Tensor& x) const { return fc2(relu(fc1(x))); }
};

struct AdamConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
    float weight_decay = 0.0f;  // decoupled (AdamW-style), applied after the moment update
};

// Bias-corrected Adam over a ParamStore. Moment buffers are keyed by
// parameter index, zero-initialized.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(ParamStore& store) {
        if (m_.size() != store.size()) {
            m_.resize(store.size());
            v_.resize(store.size());
            for (std::size_t i = 0; i < store.size(); ++i) {
                m_[i].assign(store.params()[i].tensor.size(), 0.0f);
                v_[i].assign(store.params()[i].tensor.size(), 0.0f);
            }
        }
        ++step_count_;
        const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(step_count_));
        const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(step_count_));
        for (std::size_t i = 0; i < store.size(); ++i) {
            Tensor& t = store.params()[i].tensor;
            if (!t.requires_grad() || !t.has_grad()) continue;
            if (m_[i].size() != t.size()) throw ContractError("adam: moment shape mismatch for " + store.params()[i].name);
            auto& val = t.values();
            auto& g = t.grad();
            for (std::size_t j = 0; j < val.size(); ++j) {
                m_[i][j] = cfg_.beta1 * m_[i][j] + (1.0f - cfg_.beta1) * g[j];
                v_[i][j] = cfg_.beta2 * v_[i][j] + (1.0f - cfg_.beta2) * g[j] * g[j];
                const float mhat = m_[i][j] / bc1;
                const float vhat = v_[i][j] / bc2;
                val[j] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * val[j]);
            }
        }
    }

    long step_count() const { return step_count_; }
    void set_step_count(long s) { step_count_ = s; }
    std::vector<std::vector<float>>& first_moments() { return m_; }
    std::vector<std::vector<float>>& second_moments() { return v_; }
    const AdamConfig& config() const { return cfg_; }
    void set_lr(float lr) { cfg_.lr = lr; }

private:
    AdamConfig cfg_;
    long step_count_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

}  // namespace sonogen
