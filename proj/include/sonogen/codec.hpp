#pragma once

// Vector-quantized image codec: a learned codebook, straight-through nearest
// neighbour quantization, and a small upsampling decoder that maps a token
// grid to an RGB image in [0,1]. Trained once with a reconstruction objective
// (VQ-VAE style) and then frozen; the generator only ever differentiates
// through decode+quantize with respect to the grid.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "sonogen/error.hpp"
#include "sonogen/nn.hpp"
#include "sonogen/rng.hpp"
#include "sonogen/tensor.hpp"

namespace sonogen {

struct CodecConfig {
    int codebook_size = 128;  // V entries
    int embed_dim = 16;       // e dims per entry / grid cell
    int grid = 8;             // token grid is grid x grid
    int channels = 3;

    // Three fixed 2x upsampling stages.
    int output_size() const { return grid * 8; }
    int cells() const { return grid * grid; }

    void validate() const {
        if (codebook_size < 1) throw ConfigError("codec: codebook_size must be >= 1");
        if (embed_dim < 1) throw ConfigError("codec: embed_dim must be >= 1");
        if (grid < 1) throw ConfigError("codec: grid must be >= 1");
        if (channels < 1) throw ConfigError("codec: channels must be >= 1");
    }
};

struct QuantizeResult {
    Tensor quantized;          // [(grid*grid) x e], values snapped to entries
    std::vector<int> indices;  // chosen entry per cell
};

// Snap each grid cell to its nearest codebook entry (Euclidean distance, ties
// broken by lowest index). The backward pass treats the snap as identity in
// the grid ("straight-through"); the codebook receives no gradient here — its
// training signal is applied separately via gather_rows.
inline QuantizeResult quantize(const Tensor& grid, const Tensor& book) {
    detail::check_2d(grid, "quantize");
    detail::check_2d(book, "quantize");
    if (book.shape()[0] < 1) throw ContractError("quantize: empty codebook");
    if (grid.shape()[1] != book.shape()[1])
        throw ShapeError("quantize: cell dim " + std::to_string(grid.shape()[1]) +
                         " != codebook dim " + std::to_string(book.shape()[1]));
    const int cells = grid.shape()[0], e = grid.shape()[1], v = book.shape()[0];

    QuantizeResult out;
    out.indices.resize(cells);
    auto n = detail::make_op(grid.shape(), {grid.node()});
    for (int i = 0; i < cells; ++i) {
        const float* cell = grid.values().data() + static_cast<std::size_t>(i) * e;
        int best = 0;
        double best_d = 0.0;
        for (int j = 0; j < v; ++j) {
            const float* entry = book.values().data() + static_cast<std::size_t>(j) * e;
            double d = 0.0;
            for (int k = 0; k < e; ++k) {
                const double diff = static_cast<double>(cell[k]) - entry[k];
                d += diff * diff;
            }
            if (j == 0 || d < best_d) {  // strict < keeps the lowest index on ties
                best = j;
                best_d = d;
            }
        }
        out.indices[i] = best;
        std::copy_n(book.values().data() + static_cast<std::size_t>(best) * e, e,
                    n->value.data() + static_cast<std::size_t>(i) * e);
    }
    if (n->requires_grad)
        n->backprop = [](TensorNode& self) {
            auto& p = *self.parents[0];
            p.ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
        };
    out.quantized = Tensor(n);
    return out;
}

// Token grid to image. Each stage doubles the resolution by inserting zeros
// at odd coordinates and smoothing with a learned 3x3 convolution; the final
// stage squashes to [0,1] with a sigmoid.
class Codec {
public:
    Codec(CodecConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        codebook_ = store_.add("codec.codebook",
                               Tensor::uniform({cfg_.codebook_size, cfg_.embed_dim}, rng,
                                               -1.0f, 1.0f, true));
        conv1_ = Linear(store_, "codec.dec1", 9 * cfg_.embed_dim, 32, rng);
        conv2_ = Linear(store_, "codec.dec2", 9 * 32, 16, rng);
        conv3_ = Linear(store_, "codec.dec3", 9 * 16, cfg_.channels, rng);
    }

    const CodecConfig& config() const { return cfg_; }
    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const Tensor& codebook() const { return codebook_; }

    QuantizeResult quantize_grid(const Tensor& grid) const { return quantize(grid, codebook_); }

    Tensor decode(const Tensor& grid) const {
        detail::check_2d(grid, "decode");
        if (grid.shape()[0] != cfg_.cells() || grid.shape()[1] != cfg_.embed_dim)
            throw ShapeError("decode: grid shape " + shape_str(grid.shape()) + " does not match [" +
                             std::to_string(cfg_.cells()) + "x" + std::to_string(cfg_.embed_dim) +
                             "]");
        // nearest-neighbour upsample + 3x3 conv per stage (transposed-conv stand-in)
        int h = cfg_.grid;
        Tensor x = grid;
        x = relu(conv1_(unfold2d(repeat_upsample2x(x, h, h), 2 * h, 2 * h, 3, 1)));
        h *= 2;
        x = relu(conv2_(unfold2d(repeat_upsample2x(x, h, h), 2 * h, 2 * h, 3, 1)));
        h *= 2;
        x = sigmoid(conv3_(unfold2d(repeat_upsample2x(x, h, h), 2 * h, 2 * h, 3, 1)));
        return x;  // [(S*S) x channels], S = grid*8
    }

    void freeze() {
        store_.set_trainable(false);
        frozen_ = true;
    }
    void unfreeze() {
        store_.set_trainable(true);
        frozen_ = false;
    }
    bool is_frozen() const { return frozen_; }

private:
    CodecConfig cfg_;
    ParamStore store_;
    Tensor codebook_;
    Linear conv1_, conv2_, conv3_;
    bool frozen_ = false;
};

struct CodecStepLosses {
    float reconstruction = 0.0f;
    float codebook = 0.0f;
    float commitment = 0.0f;
};

struct CodecPretrainReport {
    std::vector<CodecStepLosses> steps;
    float final_mse = 0.0f;  // mean reconstruction MSE over the corpus at the end
};

namespace detail {
inline Tensor mse(const Tensor& a, const Tensor& b) {
    Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}
}  // namespace detail

// Reconstruction pretraining. A throwaway patch-MLP encoder maps each image
// to a token grid; the loss is recon + codebook + beta * commitment. Only the
// codebook and decoder survive; the encoder is discarded with this frame.
inline CodecPretrainReport codec_pretrain(Codec& codec, const std::vector<Tensor>& images,
                                          int epochs, Rng& rng, float lr = 2e-3f,
                                          float beta = 0.25f) {
    if (images.empty()) throw ContractError("codec_pretrain: empty corpus");
    if (epochs < 1) throw ContractError("codec_pretrain: epochs must be >= 1");
    const auto& cfg = codec.config();
    const int s = cfg.output_size();
    for (const auto& img : images)
        if (img.shape() != Shape{s * s, cfg.channels})
            throw ShapeError("codec_pretrain: image shape " + shape_str(img.shape()) +
                             " does not match [" + std::to_string(s * s) + "x" +
                             std::to_string(cfg.channels) + "]");

    ParamStore enc_store;
    Mlp2 encoder(enc_store, "codec.enc", 64 * cfg.channels, 64, cfg.embed_dim, rng);
    Adam opt(AdamConfig{.lr = lr});
    Adam enc_opt(AdamConfig{.lr = lr});

    CodecPretrainReport report;
    std::vector<int> order(images.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    const int v = cfg.codebook_size, e = cfg.embed_dim;
    std::vector<int> usage(static_cast<std::size_t>(v), 0);
    std::vector<float> recent_latents;  // pool of encoder outputs for dead-entry revival
    int steps_since_revive = 0;
    const int revive_interval = 32;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
        for (int idx : order) {
            const Tensor& img = images[static_cast<std::size_t>(idx)];
            Tensor z = encoder(patchify(img, s, s, 8));
            QuantizeResult q = quantize(z, codec.codebook());
            Tensor recon_loss = detail::mse(codec.decode(q.quantized), img);
            Tensor codebook_loss = detail::mse(gather_rows(codec.codebook(), q.indices), z.detach());
            Tensor commit_loss = detail::mse(z, q.quantized.detach());
            Tensor loss = add(recon_loss, add(codebook_loss, scale(commit_loss, beta)));
            codec.params().zero_grad();
            enc_store.zero_grad();
            backward(loss);
            opt.step(codec.params());
            enc_opt.step(enc_store);
            report.steps.push_back({recon_loss.item(), codebook_loss.item(), commit_loss.item()});

            for (int j : q.indices) ++usage[static_cast<std::size_t>(j)];
            recent_latents.insert(recent_latents.end(), z.values().begin(), z.values().end());
            const std::size_t pool_cap = static_cast<std::size_t>(16) * cfg.cells() * e;
            if (recent_latents.size() > pool_cap)
                recent_latents.erase(recent_latents.begin(),
                                     recent_latents.begin() +
                                         static_cast<std::ptrdiff_t>(recent_latents.size() - pool_cap));

            // Without revival the codebook collapses to a handful of live
            // entries (all cells snap to whichever entry sits nearest the
            // encoder's initial output scale). Periodically reseat entries
            // that saw no use onto recent encoder latents.
            if (++steps_since_revive >= revive_interval) {
                const std::size_t pool = recent_latents.size() / static_cast<std::size_t>(e);
                Tensor& book = *codec.params().find("codec.codebook");
                for (int j = 0; j < v; ++j) {
                    if (usage[static_cast<std::size_t>(j)] > 0 || pool == 0) continue;
                    const std::size_t pick = rng.below(pool);
                    for (int k = 0; k < e; ++k)
                        book.values()[static_cast<std::size_t>(j) * e + k] =
                            recent_latents[pick * e + k] + 1e-3f * rng.uniform(-1, 1);
                }
                std::fill(usage.begin(), usage.end(), 0);
                steps_since_revive = 0;
            }
        }
    }

    double total = 0.0;
    for (const auto& img : images) {
        Tensor z = encoder(patchify(img, s, s, 8));
        QuantizeResult q = quantize(z, codec.codebook());
        total += detail::mse(codec.decode(q.quantized), img).item();
    }
    report.final_mse = static_cast<float>(total / static_cast<double>(images.size()));
    return report;
}

}  // namespace sonogen
