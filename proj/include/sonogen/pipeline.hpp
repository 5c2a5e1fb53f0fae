#pragma once

// End-to-end pipeline stages shared by the command-line driver and the
// acceptance harness: supervised image-tower pretraining, codec pretraining,
// contrastive audio training, generation, and evaluation — all checkpointed
// through the shared binary format and fully determined by the config seed.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "sonogen/checkpoint.hpp"
#include "sonogen/codec.hpp"
#include "sonogen/config.hpp"
#include "sonogen/contrastive.hpp"
#include "sonogen/data.hpp"
#include "sonogen/encoders.hpp"
#include "sonogen/error.hpp"
#include "sonogen/eval.hpp"
#include "sonogen/generator.hpp"

namespace sonogen {

// The model bundle. Construction draws every parameter from one seeded
// generator, so a config uniquely determines the initial weights.
struct Model {
    Config cfg;
    Rng init_rng;
    ImageTower image;
    AudioTower audio;
    CrossProjection proj;
    Codec codec;
    int stage = -1;  // -1 untrained, 0 after pretrain-image, 1 after train-audio

    explicit Model(const Config& c)
        : cfg(c),
          init_rng(c.seed),
          image(c.image, init_rng),
          audio(c.audio, init_rng),
          proj(c.image.embed_dim, init_rng),
          codec(c.codec, init_rng) {}
};

namespace detail {

inline void dump_store(CheckpointData& ckpt, const ParamStore& store) {
    for (const auto& p : store.params()) ckpt.tensors.emplace_back(p.name, p.tensor.detach());
}

inline void restore_store(const CheckpointData& ckpt, ParamStore& store) {
    for (auto& p : store.params()) {
        const Tensor* t = ckpt.find(p.name);
        if (!t) throw ParseError("checkpoint: missing tensor '" + p.name + "'");
        if (t->shape() != p.tensor.shape())
            throw ParseError("checkpoint: tensor '" + p.name + "' has shape " +
                             shape_str(t->shape()) + ", expected " + shape_str(p.tensor.shape()));
        p.tensor.values() = t->values();
    }
}

inline void dump_scalar(CheckpointData& ckpt, const std::string& name, float v) {
    ckpt.tensors.emplace_back(name, Tensor::scalar(v));
}

inline float scalar_or(const CheckpointData& ckpt, const std::string& name, float fallback) {
    const Tensor* t = ckpt.find(name);
    return t ? t->values()[0] : fallback;
}

inline void dump_moments(CheckpointData& ckpt, const std::string& prefix, Adam& opt,
                         const ParamStore& store) {
    dump_scalar(ckpt, prefix + "/steps", static_cast<float>(opt.step_count()));
    if (opt.first_moments().empty()) return;
    for (std::size_t i = 0; i < store.size(); ++i) {
        const std::string& name = store.params()[i].name;
        const int n = static_cast<int>(opt.first_moments()[i].size());
        ckpt.tensors.emplace_back(prefix + "/m/" + name, Tensor::from({n}, opt.first_moments()[i]));
        ckpt.tensors.emplace_back(prefix + "/v/" + name, Tensor::from({n}, opt.second_moments()[i]));
    }
}

inline void restore_moments(const CheckpointData& ckpt, const std::string& prefix, Adam& opt,
                            const ParamStore& store) {
    opt.set_step_count(static_cast<long>(scalar_or(ckpt, prefix + "/steps", 0.0f)));
    if (!ckpt.find(prefix + "/m/" + store.params()[0].name)) return;
    opt.first_moments().resize(store.size());
    opt.second_moments().resize(store.size());
    for (std::size_t i = 0; i < store.size(); ++i) {
        const std::string& name = store.params()[i].name;
        const Tensor* m = ckpt.find(prefix + "/m/" + name);
        const Tensor* v = ckpt.find(prefix + "/v/" + name);
        if (!m || !v) throw ParseError("checkpoint: missing optimizer state for '" + name + "'");
        opt.first_moments()[i] = m->values();
        opt.second_moments()[i] = v->values();
    }
}

}  // namespace detail

// Serialize the model (and optionally the contrastive trainer's state, for
// exact resume) into the binary checkpoint structure.
inline CheckpointData model_to_checkpoint(const Model& model, ContrastiveTrainer* trainer = nullptr) {
    CheckpointData ckpt;
    ckpt.config_text = config_to_text(model.cfg);
    detail::dump_scalar(ckpt, "state/stage", static_cast<float>(model.stage));
    detail::dump_scalar(ckpt, "state/image_frozen", model.image.is_frozen() ? 1.0f : 0.0f);
    detail::dump_scalar(ckpt, "state/codec_frozen", model.codec.is_frozen() ? 1.0f : 0.0f);
    detail::dump_store(ckpt, model.image.params());
    detail::dump_store(ckpt, model.codec.params());
    detail::dump_store(ckpt, model.audio.params());
    detail::dump_store(ckpt, model.proj.store);

    if (trainer) {
        detail::dump_scalar(ckpt, "state/step_count", static_cast<float>(trainer->step_count()));
        auto dump_queue = [&](const std::string& name, NegativeQueue& q) {
            ckpt.tensors.emplace_back(name, Tensor::from({q.capacity(), q.dim()}, q.storage()));
            ckpt.tensors.emplace_back(
                name + "/meta",
                Tensor::from({2}, {static_cast<float>(q.fill()), static_cast<float>(q.head())}));
        };
        dump_queue("state/q_audio", trainer->audio_queue());
        dump_queue("state/q_image", trainer->image_queue());
        const auto& aud_params = model.audio.params().params();
        for (std::size_t i = 0; i < aud_params.size(); ++i) {
            const int n = static_cast<int>(trainer->shadow().values()[i].size());
            ckpt.tensors.emplace_back("shadow/" + aud_params[i].name,
                                      Tensor::from({n}, trainer->shadow().values()[i]));
        }
        detail::dump_moments(ckpt, "adam_audio", trainer->optimizer(), model.audio.params());
        detail::dump_moments(ckpt, "adam_proj", trainer->projection_optimizer(), model.proj.store);
    }
    return ckpt;
}

// Rebuild a model from a checkpoint: same construction path, then overwrite
// every parameter and freeze flag from the stored tensors.
inline Model model_from_checkpoint(const CheckpointData& ckpt) {
    Config cfg = parse_config_text(ckpt.config_text);
    cfg.validate();
    Model model(cfg);
    detail::restore_store(ckpt, model.image.params());
    detail::restore_store(ckpt, model.codec.params());
    detail::restore_store(ckpt, model.audio.params());
    detail::restore_store(ckpt, model.proj.store);
    model.stage = static_cast<int>(detail::scalar_or(ckpt, "state/stage", -1.0f));
    if (detail::scalar_or(ckpt, "state/image_frozen", 0.0f) != 0.0f) model.image.freeze();
    if (detail::scalar_or(ckpt, "state/codec_frozen", 0.0f) != 0.0f) model.codec.freeze();
    return model;
}

// Restore trainer state (queues, momentum shadow, optimizer moments, step
// count) saved by model_to_checkpoint. Returns false if the checkpoint holds
// no trainer state.
inline bool restore_trainer(const CheckpointData& ckpt, Model& model,
                            ContrastiveTrainer& trainer) {
    if (!ckpt.find("state/step_count")) return false;
    trainer.set_step_count(
        static_cast<long>(detail::scalar_or(ckpt, "state/step_count", 0.0f)));
    auto restore_queue = [&](const std::string& name, NegativeQueue& q) {
        const Tensor* storage = ckpt.find(name);
        const Tensor* meta = ckpt.find(name + "/meta");
        if (!storage || !meta) throw ParseError("checkpoint: missing queue state '" + name + "'");
        if (storage->shape() != Shape{q.capacity(), q.dim()})
            throw ParseError("checkpoint: queue '" + name + "' has shape " +
                             shape_str(storage->shape()));
        q.storage() = storage->values();
        q.restore(static_cast<int>(meta->values()[0]), static_cast<int>(meta->values()[1]));
    };
    restore_queue("state/q_audio", trainer.audio_queue());
    restore_queue("state/q_image", trainer.image_queue());
    const auto& aud_params = model.audio.params().params();
    for (std::size_t i = 0; i < aud_params.size(); ++i) {
        const Tensor* t = ckpt.find("shadow/" + aud_params[i].name);
        if (!t) throw ParseError("checkpoint: missing shadow for '" + aud_params[i].name + "'");
        trainer.shadow().values()[i] = t->values();
    }
    trainer.shadow().write_into(trainer.key_tower().params());
    detail::restore_moments(ckpt, "adam_audio", trainer.optimizer(), model.audio.params());
    detail::restore_moments(ckpt, "adam_proj", trainer.projection_optimizer(), model.proj.store);
    return true;
}

// ---- stage 1: supervised image pretraining + codec pretraining ----

struct PretrainImageReport {
    float train_accuracy = 0.0f;
    float heldout_accuracy = 0.0f;
    float codec_mse = 0.0f;
};

inline PretrainImageReport cmd_pretrain_image(const Config& cfg, const std::string& out_path,
                                              std::ostream* log = nullptr) {
    cfg.validate();
    const SynthCorpus corpus = make_corpus(cfg.corpus);
    Model model(cfg);

    // Supervised warm-up with two throwaway heads: a class head, and a
    // regression head for the per-sample variate u. Class supervision alone
    // collapses within-class detail out of the embedding, which destroys
    // instance-level retrieval later; the u head keeps that detail alive.
    Rng rng(Rng::derive(cfg.seed, 0xA11CE));
    ParamStore head_store;
    Linear head(head_store, "head", cfg.image.embed_dim, cfg.corpus.class_count, rng);
    // The two within-class latents are regressed onto FIXED orthonormal
    // random directions with a wide target scale. A trainable decoder head
    // would let the network shrink the embedding's latent axes arbitrarily
    // (the head just amplifies), leaving same-class samples nearly
    // coincident and making instance-level retrieval impossible. Fixed
    // directions force the embedding itself to spread along them.
    const int d = cfg.image.embed_dim;
    const int n_dirs = 2;
    Tensor u_dir = Tensor::uniform({d, n_dirs}, rng, -1.0f, 1.0f);
    {
        auto& v = u_dir.values();
        auto col = [&](int c, int i) -> float& {
            return v[static_cast<std::size_t>(i) * n_dirs + c];
        };
        auto normalize = [&](int c) {
            double n = 0.0;
            for (int i = 0; i < d; ++i) n += static_cast<double>(col(c, i)) * col(c, i);
            const float inv = static_cast<float>(1.0 / std::sqrt(n));
            for (int i = 0; i < d; ++i) col(c, i) *= inv;
        };
        normalize(0);
        for (int c = 1; c < n_dirs; ++c) {
            for (int p = 0; p < c; ++p) {
                double dot = 0.0;
                for (int i = 0; i < d; ++i) dot += static_cast<double>(col(p, i)) * col(c, i);
                for (int i = 0; i < d; ++i) col(c, i) -= static_cast<float>(dot) * col(p, i);
            }
            normalize(c);
        }
    }
    auto sample_uv = [](const PairedSample& s) {
        Rng r(s.seed);
        std::array<float, 2> out;
        for (float& v : out) v = r.uniform(0, 1);
        return out;
    };
    Adam tower_opt(AdamConfig{.lr = cfg.pretrain_lr, .weight_decay = cfg.weight_decay});
    Adam head_opt(AdamConfig{.lr = cfg.pretrain_lr});
    // linear warmup (deep post-norm blocks diverge-or-stall without it),
    // then cosine decay (a sustained full-rate tail destabilizes the joint
    // class + latent-regression objective)
    const int warmup = std::min(150, std::max(1, cfg.pretrain_steps / 4));
    for (int step = 0; step < cfg.pretrain_steps; ++step) {
        float lr;
        if (step < warmup) {
            lr = cfg.pretrain_lr * static_cast<float>(step + 1) / warmup;
        } else {
            const float progress = static_cast<float>(step - warmup) /
                                   static_cast<float>(std::max(1, cfg.pretrain_steps - warmup));
            lr = cfg.pretrain_lr * 0.5f * (1.0f + std::cos(3.14159265f * progress));
        }
        tower_opt.set_lr(lr);
        head_opt.set_lr(lr);
        std::vector<Tensor> logits, u_preds;
        std::vector<int> targets;
        std::vector<float> u_true;
        for (int i = 0; i < cfg.batch_size; ++i) {
            const auto& s = corpus.train[rng.below(static_cast<std::uint32_t>(corpus.train.size()))];
            Tensor emb = model.image.encode(s.image);
            logits.push_back(head(emb));
            u_preds.push_back(matmul(emb, u_dir));
            targets.push_back(s.class_id);
            // Wide target scales (+-0.6 per axis) spread same-class
            // embeddings across a 2-D sheet of the unit sphere instead of a
            // near-degenerate cluster.
            for (float uv : sample_uv(s)) u_true.push_back(1.2f * (uv - 0.5f));
        }
        Tensor u_err = sub(concat_rows(u_preds), Tensor::from({cfg.batch_size, n_dirs}, u_true));
        Tensor loss = add(cross_entropy_rows(concat_rows(logits), targets),
                          scale(mean_all(mul(u_err, u_err)), 3.0f));
        model.image.params().zero_grad();
        head_store.zero_grad();
        backward(loss);
        tower_opt.step(model.image.params());
        head_opt.step(head_store);
        if (log && (step % 50 == 0 || step == cfg.pretrain_steps - 1))
            (*log) << "pretrain step=" << step << " loss=" << loss.item() << "\n";
    }

    auto accuracy = [&](const std::vector<PairedSample>& set) {
        int hit = 0;
        for (const auto& s : set) {
            Tensor logits = head(model.image.encode(s.image));
            int arg = 0;
            for (int j = 1; j < cfg.corpus.class_count; ++j)
                if (logits.values()[j] > logits.values()[arg]) arg = j;
            if (arg == s.class_id) ++hit;
        }
        return static_cast<float>(hit) / static_cast<float>(set.size());
    };

    PretrainImageReport report;
    report.train_accuracy = accuracy(corpus.train);
    report.heldout_accuracy = accuracy(corpus.held_out);
    model.image.freeze();

    // codec reconstruction pretraining on a per-class subset (enough texture
    // coverage at a fraction of the cost)
    Rng codec_rng(Rng::derive(cfg.seed, 0xC0DEC));
    std::vector<Tensor> codec_images;
    const int per_class_cap = 16;
    for (int cls = 0; cls < cfg.corpus.class_count; ++cls) {
        int taken = 0;
        for (const auto& s : corpus.train)
            if (s.class_id == cls && taken++ < per_class_cap) codec_images.push_back(s.image);
    }
    auto codec_report =
        codec_pretrain(model.codec, codec_images, cfg.codec_epochs, codec_rng, cfg.codec_lr);
    report.codec_mse = codec_report.final_mse;
    model.codec.freeze();
    model.stage = 0;

    if (log)
        (*log) << "pretrain done train_acc=" << report.train_accuracy
               << " heldout_acc=" << report.heldout_accuracy << " codec_mse=" << report.codec_mse
               << "\n";
    save_checkpoint(model_to_checkpoint(model), out_path);
    return report;
}

// ---- stage 2: contrastive audio training ----

struct TrainAudioReport {
    float first_loss = 0.0f;   // first step with both InfoNCE directions active
    float last_loss = 0.0f;
    // Raw InfoNCE grows with queue fill (chance level is 2*ln(fill+1)), so
    // progress is judged on the excess over chance, averaged over the first
    // and last few active steps.
    float first_excess = 0.0f;
    float last_excess = 0.0f;
    long final_step = 0;
};

inline TrainAudioReport cmd_train_audio(const std::string& image_ckpt_path,
                                        const std::string& out_path, std::ostream* log = nullptr,
                                        const std::vector<std::pair<std::string, std::string>>&
                                            overrides = {}) {
    CheckpointData in_ckpt = load_checkpoint(image_ckpt_path);
    Config cfg = parse_config_text(in_ckpt.config_text);
    for (const auto& [k, v] : overrides) config_set(cfg, k, v);
    cfg.validate();

    // parameters come from the input checkpoint; only the config may be
    // overridden
    CheckpointData with_cfg = in_ckpt;
    with_cfg.config_text = config_to_text(cfg);
    Model model = model_from_checkpoint(with_cfg);
    if (model.stage < 0 || !model.image.is_frozen())
        throw StateError("train-audio: input checkpoint lacks a frozen pretrained image tower");

    const SynthCorpus corpus = make_corpus(cfg.corpus);

    TrainConfig tcfg;
    tcfg.batch_size = cfg.batch_size;
    tcfg.momentum = cfg.momentum;
    tcfg.nce_temperature = cfg.nce_temperature;
    tcfg.align_weight = cfg.align_weight;
    tcfg.adam.lr = cfg.lr;
    tcfg.adam.weight_decay = cfg.weight_decay;
    Rng trainer_rng(Rng::derive(cfg.seed, 0x7EA13));
    ContrastiveTrainer trainer(model.audio, model.proj, cfg.queue_size, tcfg, trainer_rng);
    const bool resumed = restore_trainer(in_ckpt, model, trainer);
    if (log && resumed) (*log) << "resumed at step " << trainer.step_count() << "\n";

    // precompute what is constant per sample: spectrograms and frozen-tower
    // image embeddings
    std::vector<ContrastiveBatchItem> items(corpus.train.size());
    std::vector<Tensor> img_embs(corpus.train.size());
    for (std::size_t i = 0; i < corpus.train.size(); ++i) {
        items[i].image = corpus.train[i].image;
        items[i].spectrogram =
            spectrogram(corpus.train[i].waveform, cfg.audio.n_fft, cfg.audio.hop).detach();
        items[i].class_id = corpus.train[i].class_id;
        img_embs[i] = model.image.encode(corpus.train[i].image).detach();
    }

    Rng batch_rng(Rng::derive(cfg.seed, 0xBA7C4 + static_cast<std::uint64_t>(trainer.step_count())));
    TrainAudioReport report;
    std::vector<float> excess_window;
    const int warmup = std::min(100, std::max(1, cfg.train_steps / 5));
    for (int step = 0; step < cfg.train_steps; ++step) {
        const long global = trainer.step_count();
        // linear warmup, then cosine decay: ending at a high constant lr
        // leaves the weights at a noisy Adam snapshot, which measurably hurts
        // held-out retrieval precision
        float lr;
        if (global < warmup) {
            lr = cfg.lr * static_cast<float>(global + 1) / warmup;
        } else {
            const float progress = std::min(
                1.0f, static_cast<float>(global - warmup) /
                          static_cast<float>(std::max(1, cfg.train_steps - warmup)));
            lr = cfg.lr * 0.5f * (1.0f + std::cos(3.14159265f * progress));
        }
        trainer.optimizer().set_lr(lr);
        trainer.projection_optimizer().set_lr(lr);
        std::vector<ContrastiveBatchItem> batch;
        std::vector<Tensor> batch_embs;
        for (int i = 0; i < cfg.batch_size; ++i) {
            const std::size_t pick = batch_rng.below(static_cast<std::uint32_t>(items.size()));
            batch.push_back(items[pick]);
            if (cfg.spec_jitter > 0.0f) {
                // additive log-spectrogram noise regularizes the audio tower;
                // the cached tensor is shared, so jitter works on a copy
                const Tensor& s = items[pick].spectrogram;
                std::vector<float> noisy = s.values();
                for (float& v : noisy) v += cfg.spec_jitter * batch_rng.normal();
                batch.back().spectrogram = Tensor::from(s.shape(), std::move(noisy));
            }
            batch_embs.push_back(img_embs[pick]);
        }
        const StepReport rep = trainer.train_step_cached(batch_embs, batch);
        if (rep.loss > 0.0f) {
            const int pre_fill = std::max(0, rep.queue_fill - cfg.batch_size);
            const float excess =
                rep.loss - 2.0f * std::log(static_cast<float>(pre_fill + 1));
            excess_window.push_back(excess);
            if (report.first_loss == 0.0f) report.first_loss = rep.loss;
        }
        report.last_loss = rep.loss;
        if (log && (step % 25 == 0 || step == cfg.train_steps - 1))
            (*log) << "step=" << trainer.step_count() << " loss=" << rep.loss
                   << " grad_norm=" << rep.grad_norm << " queue_fill=" << rep.queue_fill << "\n";
    }
    report.final_step = trainer.step_count();
    if (!excess_window.empty()) {
        const std::size_t w = std::min<std::size_t>(5, excess_window.size());
        for (std::size_t i = 0; i < w; ++i) {
            report.first_excess += excess_window[i] / static_cast<float>(w);
            report.last_excess += excess_window[excess_window.size() - 1 - i] / static_cast<float>(w);
        }
    }

    model.stage = 1;
    save_checkpoint(model_to_checkpoint(model, &trainer), out_path);
    return report;
}

// ---- stage 3: generation ----

struct GenerateOutcome {
    GenerationResult result;
    std::string image_path;
    std::string trace_path;
};

inline GenerateOutcome cmd_generate(const CheckpointData& ckpt, const std::vector<float>& waveform,
                                    const std::string& out_dir, const std::string& tag,
                                    std::ostream* log = nullptr) {
    Model model = model_from_checkpoint(ckpt);
    if (model.stage < 1)
        throw StateError("generate: checkpoint is not trained (run train-audio first)");

    GenerateOutcome out;
    out.result = generate(waveform, model.audio, model.proj, model.codec, model.image, model.cfg.gen);
    out.image_path = out_dir + "/gen_" + tag + ".ppm";
    out.trace_path = out_dir + "/trace_" + tag + ".txt";
    save_ppm(out.result.image, model.cfg.image.image_size, out.image_path);
    {
        std::ofstream trace(out.trace_path);
        if (!trace) throw IoError("cannot write trace: " + out.trace_path);
        trace << trace_to_text(out.result.trace);
    }
    if (log)
        (*log) << "generated " << out.image_path << " best_step=" << out.result.trace.best_step
               << " best_similarity=" << out.result.trace.best_similarity << "\n";
    return out;
}

inline GenerateOutcome cmd_generate(const std::string& ckpt_path,
                                    const std::vector<float>& waveform,
                                    const std::string& out_dir, const std::string& tag,
                                    std::ostream* log = nullptr) {
    return cmd_generate(load_checkpoint(ckpt_path), waveform, out_dir, tag, log);
}

// ---- stage 4: evaluation ----

inline EvalReport cmd_evaluate(const std::string& ckpt_path, int trials,
                               const std::vector<std::uint64_t>& seeds,
                               std::ostream* log = nullptr) {
    Model model = model_from_checkpoint(load_checkpoint(ckpt_path));
    if (model.stage < 1)
        throw StateError("evaluate: checkpoint is not trained (run train-audio first)");
    const SynthCorpus corpus = make_corpus(model.cfg.corpus);
    EvalReport report = evaluate(model.image, model.audio, model.proj, corpus.held_out, trials, seeds);
    if (log) (*log) << report_to_text(report);
    return report;
}

}  // namespace sonogen
