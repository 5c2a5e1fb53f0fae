#pragma once

// Audio-guided image generation. A continuous latent token grid is optimized
// by plain gradient descent so that the frozen image tower's embedding of the
// decoded (straight-through quantized) grid matches a fixed target embedding
// derived from the audio. Everything except the grid stays frozen.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "sonogen/codec.hpp"
#include "sonogen/contrastive.hpp"
#include "sonogen/encoders.hpp"
#include "sonogen/error.hpp"
#include "sonogen/rng.hpp"
#include "sonogen/tensor.hpp"

namespace sonogen {

struct GenerationConfig {
    int steps = 200;
    // 0.05 barely moves the grid through the straight-through estimator and
    // stalls in the nearest-entry basin of the random init; 1.0 reliably
    // escapes it within 200 steps.
    float step_size = 1.0f;
    std::uint64_t seed = 8;
    int quantize_every = 1;  // straight-through snap applied every step by default
    int record_every = 1;    // trace granularity
    bool snapshot_images = false;

    void validate() const {
        if (steps < 1) throw ConfigError("generation: steps must be >= 1");
        if (!(step_size > 0.0f)) throw ConfigError("generation: step_size must be > 0");
        if (quantize_every < 1) throw ConfigError("generation: quantize_every must be >= 1");
        if (record_every < 1) throw ConfigError("generation: record_every must be >= 1");
    }
};

struct GenerationRecord {
    int step = 0;
    float similarity = 0.0f;
    std::optional<Tensor> image;
};

struct GenerationTrace {
    std::vector<GenerationRecord> records;
    int best_step = 0;
    float best_similarity = -1.0f;
};

// Fill every grid cell with a uniformly drawn codebook entry.
inline Tensor init_latent(std::uint64_t seed, const Tensor& book, int cells) {
    detail::check_2d(book, "init_latent");
    if (book.shape()[0] < 1) throw ContractError("init_latent: empty codebook");
    const int e = book.shape()[1];
    Rng rng(seed);
    Tensor grid = Tensor::zeros({cells, e}, /*requires_grad=*/true);
    for (int i = 0; i < cells; ++i) {
        const std::size_t j = rng.below(static_cast<std::size_t>(book.shape()[0]));
        std::copy_n(book.values().data() + j * e, e, grid.values().data() + static_cast<std::size_t>(i) * e);
    }
    return grid;
}

// One descent step on the grid. Returns the similarity measured before the
// update (the score of the grid as passed in).
inline float generation_step(Tensor& grid, const Tensor& target, const Codec& codec,
                             const ImageTower& tower, float step_size, bool snap) {
    if (!codec.is_frozen()) throw StateError("generation_step: codec must be frozen");
    if (!tower.is_frozen()) throw StateError("generation_step: image tower must be frozen");
    if (target.shape().size() != 2 || target.shape()[0] != 1)
        throw ShapeError("generation_step: target must be [1 x d]");
    double norm = 0.0;
    for (float v : target.values()) norm += static_cast<double>(v) * v;
    if (std::fabs(std::sqrt(norm) - 1.0) > 1e-3)
        throw ContractError("generation_step: target must be unit-norm");

    grid.set_requires_grad(true);
    grid.zero_grad();
    Tensor latent = snap ? quantize(grid, codec.codebook()).quantized : grid;
    Tensor emb = tower.encode(codec.decode(latent));
    // both sides unit-norm: cosine is a plain dot product
    Tensor sim = sum(mul(emb, target));
    backward(sub(Tensor::scalar(1.0f), sim));
    const float similarity = sim.item();
    for (std::size_t i = 0; i < grid.size(); ++i)
        grid.values()[i] -= step_size * grid.grad()[i];
    grid.zero_grad();
    return similarity;
}

struct GenerationResult {
    Tensor image;  // decoded image at the best-similarity step
    GenerationTrace trace;
};

// Optimize a grid against a fixed unit-norm target embedding.
inline GenerationResult generate_from_target(const Tensor& target, const Codec& codec,
                                             const ImageTower& tower,
                                             const GenerationConfig& cfg) {
    cfg.validate();
    Tensor grid = init_latent(cfg.seed, codec.codebook(), codec.config().cells());

    GenerationResult out;
    Tensor best_grid = grid.detach();
    for (int step = 0; step < cfg.steps; ++step) {
        Tensor pre = grid.detach();  // grid as scored this step
        const bool snap = (step % cfg.quantize_every) == 0;
        const float sim = generation_step(grid, target, codec, tower, cfg.step_size, snap);
        bool new_best = false;
        if (sim > out.trace.best_similarity) {
            out.trace.best_similarity = sim;
            out.trace.best_step = step;
            best_grid = pre;
            new_best = true;
        }
        // a new best is always recorded, so the trace's max equals best_similarity
        if (new_best || step % cfg.record_every == 0 || step == cfg.steps - 1) {
            GenerationRecord rec;
            rec.step = step;
            rec.similarity = sim;
            if (cfg.snapshot_images)
                rec.image = codec.decode(quantize(pre, codec.codebook()).quantized).detach();
            out.trace.records.push_back(std::move(rec));
        }
    }
    out.image = codec.decode(quantize(best_grid, codec.codebook()).quantized).detach();
    return out;
}

// Full audio-to-image path: embed the waveform once, map it into the image
// embedding space with the trained cross projection, then optimize the grid.
inline GenerationResult generate(const std::vector<float>& waveform, const AudioTower& audio,
                                 const CrossProjection& proj, const Codec& codec,
                                 const ImageTower& tower, const GenerationConfig& cfg) {
    Tensor target = proj.project_audio(audio.encode(waveform).embedding).detach();
    return generate_from_target(target, codec, tower, cfg);
}

// Plain-text trace: one `step,similarity` line per record.
inline std::string trace_to_text(const GenerationTrace& trace) {
    std::string out;
    for (const auto& r : trace.records) {
        out += std::to_string(r.step);
        out += ',';
        out += std::to_string(r.similarity);
        out += '\n';
    }
    return out;
}

}  // namespace sonogen
