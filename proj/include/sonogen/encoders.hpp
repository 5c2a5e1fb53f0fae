#pragma once

// The two towers. Image side: patch embedding, a stack of post-norm
// transformer blocks, mean pooling over patch positions, and a 2-layer MLP
// projection to the shared space. Audio side: log-magnitude STFT frontend,
// strided 1-D convolutions, a transformer stack with learned weighted layer
// averaging, and the same projection shape. Both emit unit-norm embeddings.

#include <cmath>
#include <string>
#include <vector>

#include "sonogen/nn.hpp"
#include "sonogen/tensor.hpp"

namespace sonogen {

struct ImageTowerConfig {
    int image_size = 64;
    int patch_size = 8;
    int channels = 3;
    int channel_dim = 64;  // c, width of the patch token stream
    int sa_layers = 4;
    int heads = 4;
    int embed_dim = 64;  // d, shared space dimension

    int num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }

    void validate() const {
        if (image_size <= 0) throw ConfigError("image_size must be positive");
        if (patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("patch_size must divide image_size");
        if (channel_dim <= 0) throw ConfigError("channel_dim must be positive");
        if (heads <= 0 || channel_dim % heads != 0)
            throw ConfigError("heads must divide channel_dim");
        if (sa_layers < 0) throw ConfigError("sa_layers must be non-negative");
        if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
    }
};

struct AudioTowerConfig {
    int sample_rate = 16000;
    int n_fft = 400;
    int hop = 160;
    int conv_kernel = 4;
    int conv_stride = 2;
    int conv_layers = 2;
    int hidden = 64;           // transformer width
    int transformer_layers = 4;  // L
    int heads = 4;
    int embed_dim = 64;  // d, must match the image tower
    int class_count = 8;
    int class_embed_dim = 32;  // p, masked-prediction class embedding width
    float temperature = 0.1f;  // tau of the categorical head

    int bins() const { return n_fft / 2 + 1; }

    void validate() const {
        if (sample_rate != 16000) throw ConfigError("sample_rate must be 16000");
        if (n_fft <= 0 || hop <= 0) throw ConfigError("n_fft and hop must be positive");
        if (conv_kernel <= 0 || conv_stride <= 0 || conv_layers < 1)
            throw ConfigError("conv frontend spec must be positive");
        if (hidden <= 0 || heads <= 0 || hidden % heads != 0)
            throw ConfigError("heads must divide hidden");
        if (transformer_layers < 1) throw ConfigError("transformer_layers must be >= 1");
        if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
        if (class_count <= 0) throw ConfigError("class_count must be positive");
        if (temperature <= 0.0f) throw ConfigError("temperature must be > 0");
    }
};

// Log-magnitude STFT: log(|STFT|^2 + 1e-6), Hann window.
// frames = 1 + floor((len - n_fft) / hop). Returns a constant tensor
// [frames x bins]; the waveform itself is never differentiated through.
inline Tensor spectrogram(const std::vector<float>& waveform, int n_fft, int hop) {
    if (static_cast<int>(waveform.size()) < n_fft)
        throw ContractError("spectrogram: waveform shorter than n_fft (" +
                            std::to_string(waveform.size()) + " < " + std::to_string(n_fft) + ")");
    const int frames = 1 + static_cast<int>((waveform.size() - n_fft) / hop);
    const int bins = n_fft / 2 + 1;

    // Precompute Hann window and DFT twiddles once per n_fft.
    static thread_local int cached_nfft = -1;
    static thread_local std::vector<float> window, cos_tab, sin_tab;
    if (cached_nfft != n_fft) {
        cached_nfft = n_fft;
        window.resize(n_fft);
        const float two_pi = 6.28318530717958648f;
        for (int i = 0; i < n_fft; ++i)
            window[i] = 0.5f - 0.5f * std::cos(two_pi * static_cast<float>(i) / static_cast<float>(n_fft));
        cos_tab.assign(static_cast<std::size_t>(bins) * n_fft, 0.0f);
        sin_tab.assign(static_cast<std::size_t>(bins) * n_fft, 0.0f);
        for (int k = 0; k < bins; ++k)
            for (int i = 0; i < n_fft; ++i) {
                const float phase = two_pi * static_cast<float>(k) * static_cast<float>(i) /
                                    static_cast<float>(n_fft);
                cos_tab[static_cast<std::size_t>(k) * n_fft + i] = std::cos(phase);
                sin_tab[static_cast<std::size_t>(k) * n_fft + i] = std::sin(phase);
            }
    }

    Tensor out = Tensor::zeros({frames, bins});
    std::vector<float> frame(n_fft);
    for (int f = 0; f < frames; ++f) {
        const float* src = waveform.data() + static_cast<std::size_t>(f) * hop;
        for (int i = 0; i < n_fft; ++i) frame[i] = src[i] * window[i];
        float* row = out.values().data() + static_cast<std::size_t>(f) * bins;
        for (int k = 0; k < bins; ++k) {
            const float* ct = cos_tab.data() + static_cast<std::size_t>(k) * n_fft;
            const float* st = sin_tab.data() + static_cast<std::size_t>(k) * n_fft;
            float re = 0.0f, im = 0.0f;
            for (int i = 0; i < n_fft; ++i) {
                re += frame[i] * ct[i];
                im -= frame[i] * st[i];
            }
            row[k] = std::log(re * re + im * im + 1e-6f);
        }
    }
    return out;
}

class ImageTower {
public:
    ImageTower(const ImageTowerConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        const int patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        patch_embed_ = Linear(store_, "img.patch_embed", patch_dim, cfg.channel_dim, rng);
        pos_embed_ = store_.add("img.pos_embed",
                                Tensor::uniform({cfg.num_patches(), cfg.channel_dim}, rng, -0.1f, 0.1f));
        for (int l = 0; l < cfg.sa_layers; ++l)
            blocks_.emplace_back(store_, "img.block" + std::to_string(l), cfg.channel_dim, cfg.heads,
                                 4 * cfg.channel_dim, rng);
        proj_ = Mlp2(store_, "img.proj", cfg.channel_dim, cfg.channel_dim, cfg.embed_dim, rng);
    }

    // image: [(H*W) x channels] with pixel values in [0,1]; may carry grad
    // (the generator differentiates through it). Output [1 x d], unit norm.
    Tensor encode(const Tensor& image) const { return l2_normalize_rows(proj_(pooled_features(image))); }

    // r^(i): mean over patch positions after the self-attention stack.
    Tensor pooled_features(const Tensor& image) const {
        Tensor tokens = patchify(image, cfg_.image_size, cfg_.image_size, cfg_.patch_size);
        Tensor s = add(patch_embed_(tokens), pos_embed_);
        for (const auto& block : blocks_) s = block(s);
        return mean_rows(s);
    }

    void freeze() { store_.set_trainable(false); }
    void unfreeze() { store_.set_trainable(true); }
    bool is_frozen() const {
        for (const auto& p : store_.params())
            if (p.tensor.requires_grad()) return false;
        return true;
    }

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const ImageTowerConfig& config() const { return cfg_; }

private:
    ImageTowerConfig cfg_;
    ParamStore store_;
    Linear patch_embed_;
    Tensor pos_embed_;
    std::vector<TransformerBlock> blocks_;
    Mlp2 proj_;
};

struct AudioEncodeResult {
    Tensor embedding;                  // [1 x d], unit norm
    std::vector<Tensor> layer_states;  // L+1 entries of [T' x hidden]: frontend + each block
    Tensor final_hidden;               // alias of layer_states.back(), the h^L sequence
};

class AudioTower {
public:
    AudioTower(const AudioTowerConfig& cfg, Rng& rng) : cfg_(cfg) {
        cfg.validate();
        int in_dim = cfg.bins();
        for (int l = 0; l < cfg.conv_layers; ++l) {
            conv_.emplace_back(store_, "aud.conv" + std::to_string(l), cfg.conv_kernel * in_dim,
                               cfg.hidden, rng);
            in_dim = cfg.hidden;
        }
        for (int l = 0; l < cfg.transformer_layers; ++l)
            blocks_.emplace_back(store_, "aud.block" + std::to_string(l), cfg.hidden, cfg.heads,
                                 4 * cfg.hidden, rng);
        // Weighted layer averaging over frontend output + L block outputs.
        layer_logits_ = store_.zeros("aud.layer_logits", {1, cfg.transformer_layers + 1});
        proj_ = Mlp2(store_, "aud.proj", cfg.hidden, cfg.hidden, cfg.embed_dim, rng);
        // Masked-prediction head (categorical over classes, cosine/tau logits).
        head_proj_ = store_.glorot("aud.head.wp", cfg.hidden, cfg.class_embed_dim, rng);
        class_embeds_ = store_.add("aud.head.class_embeds",
                                   Tensor::uniform({cfg.class_count, cfg.class_embed_dim}, rng, -0.5f, 0.5f));
    }

    AudioEncodeResult encode_spectrogram(const Tensor& spec) const {
        // Per-utterance standardization; raw log magnitudes carry a large DC
        // offset that swamps the conv frontend.
        double mean = 0.0;
        for (float v : spec.values()) mean += v;
        mean /= static_cast<double>(spec.size());
        double var = 0.0;
        for (float v : spec.values()) var += (v - mean) * (v - mean);
        var /= static_cast<double>(spec.size());
        const float inv_std = 1.0f / std::sqrt(static_cast<float>(var) + 1e-5f);
        Tensor x = scale(add_scalar(spec, -static_cast<float>(mean)), inv_std);
        for (const auto& conv : conv_) x = relu(conv(unfold1d(x, cfg_.conv_kernel, cfg_.conv_stride)));
        AudioEncodeResult out;
        out.layer_states.push_back(x);
        for (const auto& block : blocks_) {
            x = block(x);
            out.layer_states.push_back(x);
        }
        out.final_hidden = x;

        // Mean over time per layer, then softmax-weighted average of layers.
        std::vector<Tensor> summaries;
        summaries.reserve(out.layer_states.size());
        for (const auto& s : out.layer_states) summaries.push_back(mean_rows(s));
        Tensor stacked = concat_rows(summaries);                 // [(L+1) x hidden]
        Tensor weights = softmax_rows(layer_logits_);            // [1 x (L+1)]
        Tensor pooled = matmul(weights, stacked);                // [1 x hidden]
        out.embedding = l2_normalize_rows(proj_(pooled));
        return out;
    }

    AudioEncodeResult encode(const std::vector<float>& waveform) const {
        return encode_spectrogram(spectrogram(waveform, cfg_.n_fft, cfg_.hop));
    }

    // p(c|h_t) logits before softmax: cosine(W_P h_t, e_c) / tau. [T x C]
    Tensor masked_prediction_logits(const Tensor& hidden_states) const {
        return masked_prediction_logits(hidden_states, class_embeds_, head_proj_, cfg_.temperature);
    }

    static Tensor masked_prediction_logits(const Tensor& hidden_states, const Tensor& class_embeds,
                                           const Tensor& w_p, float tau) {
        if (tau <= 0.0f) throw ContractError("masked_prediction_logits: tau must be > 0");
        Tensor projected = l2_normalize_rows(matmul(hidden_states, w_p));  // [T x p]
        Tensor classes = l2_normalize_rows(class_embeds);                  // [C x p]
        return scale(matmul(projected, transpose(classes)), 1.0f / tau);
    }

    void freeze() { store_.set_trainable(false); }
    void unfreeze() { store_.set_trainable(true); }
    bool is_frozen() const {
        for (const auto& p : store_.params())
            if (p.tensor.requires_grad()) return false;
        return true;
    }

    ParamStore& params() { return store_; }
    const ParamStore& params() const { return store_; }
    const AudioTowerConfig& config() const { return cfg_; }
    Tensor layer_logits() { return layer_logits_; }

private:
    AudioTowerConfig cfg_;
    ParamStore store_;
    std::vector<Linear> conv_;
    std::vector<TransformerBlock> blocks_;
    Tensor layer_logits_;
    Mlp2 proj_;
    Tensor head_proj_;
    Tensor class_embeds_;
};

}  // namespace sonogen
