#pragma once

// Momentum-queue cross-modal contrastive training. Two FIFO negative queues
// (audio-keyed and image-keyed) decouple the negative count from the batch
// size; a slow EMA copy of the audio tower supplies stable queue keys; the
// objective is the cross-projection loss
//   cx = L(f(image), audio) + L(image, g(audio))
// with L the InfoNCE contrastive loss.

#include <cmath>
#include <string>
#include <vector>

#include "sonogen/encoders.hpp"
#include "sonogen/nn.hpp"
#include "sonogen/tensor.hpp"

namespace sonogen {

// Fixed-capacity FIFO of unit-norm key vectors, stored outside the tape.
class NegativeQueue {
public:
    NegativeQueue(int capacity, int dim) : capacity_(capacity), dim_(dim) {
        if (capacity <= 0 || dim <= 0) throw ConfigError("queue capacity and dim must be positive");
        storage_.assign(static_cast<std::size_t>(capacity) * dim, 0.0f);
    }

    int capacity() const { return capacity_; }
    int dim() const { return dim_; }
    int fill() const { return fill_; }
    int head() const { return head_; }

    // Appends B keys, evicting the oldest entries once full.
    void push(const std::vector<float>& keys, int count) {
        if (count > capacity_)
            throw ContractError("queue_push: batch " + std::to_string(count) + " exceeds capacity " +
                                std::to_string(capacity_));
        if (static_cast<int>(keys.size()) != count * dim_)
            throw ContractError("queue_push: key buffer size mismatch");
        for (int i = 0; i < count; ++i) {
            std::copy_n(keys.data() + static_cast<std::size_t>(i) * dim_, dim_,
                        storage_.data() + static_cast<std::size_t>(head_) * dim_);
            head_ = (head_ + 1) % capacity_;
        }
        fill_ = std::min(capacity_, fill_ + count);
    }

    void push(const Tensor& keys) { push(keys.values(), keys.rows()); }

    // Oldest-first snapshot of the current contents.
    std::vector<float> contents() const {
        std::vector<float> out(static_cast<std::size_t>(fill_) * dim_);
        const int start = (fill_ == capacity_) ? head_ : 0;
        for (int i = 0; i < fill_; ++i) {
            const int src = (start + i) % capacity_;
            std::copy_n(storage_.data() + static_cast<std::size_t>(src) * dim_, dim_,
                        out.data() + static_cast<std::size_t>(i) * dim_);
        }
        return out;
    }

    const std::vector<float>& storage() const { return storage_; }
    std::vector<float>& storage() { return storage_; }
    void restore(int fill, int head) {
        fill_ = fill;
        head_ = head;
    }

private:
    int capacity_;
    int dim_;
    int fill_ = 0;
    int head_ = 0;
    std::vector<float> storage_;
};

// EMA shadow of a ParamStore: theta_k <- m*theta_k + (1-m)*theta_q.
// The shadow never receives gradients.
class MomentumShadow {
public:
    explicit MomentumShadow(const ParamStore& live) {
        values_.reserve(live.size());
        for (const auto& p : live.params()) values_.push_back(p.tensor.values());
    }

    void update(const ParamStore& live, float m) {
        if (m < 0.0f || m > 1.0f) throw ContractError("momentum must lie in [0,1]");
        if (values_.size() != live.size()) throw ContractError("momentum_update: store size mismatch");
        for (std::size_t i = 0; i < values_.size(); ++i) {
            const auto& src = live.params()[i].tensor.values();
            if (src.size() != values_[i].size())
                throw ContractError("momentum_update: shape mismatch at " + live.params()[i].name);
            for (std::size_t j = 0; j < src.size(); ++j)
                values_[i][j] = m * values_[i][j] + (1.0f - m) * src[j];
        }
    }

    // Writes shadow values into a target store of identical layout (a frozen
    // twin of the live tower used for key computation).
    void write_into(ParamStore& target) const {
        if (target.size() != values_.size()) throw ContractError("momentum shadow: store size mismatch");
        for (std::size_t i = 0; i < values_.size(); ++i)
            target.params()[i].tensor.values() = values_[i];
    }

    std::vector<std::vector<float>>& values() { return values_; }
    const std::vector<std::vector<float>>& values() const { return values_; }

private:
    std::vector<std::vector<float>> values_;
};

// f and g of the cx loss: 2-layer MLPs within the shared space, outputs
// re-normalized.
struct CrossProjection {
    ParamStore store;
    Mlp2 f, g;

    CrossProjection(int dim, Rng& rng)
        : f(store, "proj.f", dim, dim, dim, rng), g(store, "proj.g", dim, dim, dim, rng) {}

    Tensor project_image(const Tensor& img_emb) const { return l2_normalize_rows(f(img_emb)); }
    Tensor project_audio(const Tensor& aud_emb) const { return l2_normalize_rows(g(aud_emb)); }
};

// InfoNCE: -log( exp(q.k+/t) / (exp(q.k+/t) + sum_j exp(q.k-_j/t)) ).
// query [1 x d] may carry grad; positive and queue contents are constants.
inline Tensor info_nce(const Tensor& query, const Tensor& positive, const NegativeQueue& queue,
                       float temperature) {
    if (temperature <= 0.0f) throw ContractError("info_nce: temperature must be > 0");
    if (queue.fill() < 1) throw ContractError("info_nce: queue is empty");
    const int d = queue.dim();
    if (static_cast<int>(query.size()) != d || static_cast<int>(positive.size()) != d)
        throw ContractError("info_nce: dimension mismatch");

    Tensor q = reshape(query, {1, d});
    Tensor pos_sim = matmul(q, transpose(reshape(positive.detach(), {1, d})));  // [1 x 1]
    Tensor negs = Tensor::from({queue.fill(), d}, queue.contents());
    Tensor neg_sims = matmul(q, transpose(negs));  // [1 x fill]
    Tensor logits = scale(concat_cols({pos_sim, neg_sims}), 1.0f / temperature);
    return sub(logsumexp_all(logits), reshape(slice_cols(logits, 0, 1), {1}));
}

struct TrainConfig {
    int batch_size = 8;
    float momentum = 0.99f;
    float nce_temperature = 0.07f;
    float aux_masked_weight = 0.0f;  // >0 enables the auxiliary masked-prediction loss
    // >0 adds align_weight * mean_i ||g(audio_i) - image_i||^2 to the step
    // loss. InfoNCE with a large stale queue mostly teaches class-level
    // separation; the direct regression onto the (frozen) paired image
    // embedding is what pins each clip to its own image within a class.
    float align_weight = 0.0f;
    AdamConfig adam;
};

struct StepReport {
    float loss = 0.0f;
    float grad_norm = 0.0f;
    int queue_fill = 0;
};

// One contrastive item already pushed through the spectrogram frontend.
struct ContrastiveBatchItem {
    Tensor image;        // [(H*W) x ch]
    Tensor spectrogram;  // [frames x bins]
    int class_id = 0;
};

// Owns the trainable state of the contrastive stage. The image tower is
// frozen and passed in per call.
class ContrastiveTrainer {
public:
    ContrastiveTrainer(AudioTower& audio_tower, CrossProjection& proj, int queue_capacity,
                       const TrainConfig& cfg, Rng& rng)
        : audio_(audio_tower),
          proj_(proj),
          cfg_(cfg),
          shadow_(audio_tower.params()),
          key_tower_(audio_tower.config(), rng),
          q_audio_(queue_capacity, audio_tower.config().embed_dim),
          q_image_(queue_capacity, audio_tower.config().embed_dim),
          opt_(cfg.adam),
          opt_proj_(cfg.adam) {
        key_tower_.freeze();
        shadow_.write_into(key_tower_.params());
    }

    // cx loss for one aligned batch. Each directional InfoNCE term is skipped
    // (contributes 0) while its queue holds fewer keys than the batch.
    Tensor cx_loss(const std::vector<Tensor>& img_embs, const std::vector<Tensor>& aud_embs,
                   const std::vector<Tensor>& aud_keys) const {
        if (img_embs.size() != aud_embs.size() || img_embs.size() != aud_keys.size())
            throw ContractError("cx_loss: batch rows are not aligned");
        const int b = static_cast<int>(img_embs.size());
        Tensor total = Tensor::scalar(0.0f);
        for (int i = 0; i < b; ++i) {
            if (q_audio_.fill() >= b)
                total = add(total, info_nce(proj_.project_image(img_embs[i]), aud_keys[i], q_audio_,
                                            cfg_.nce_temperature));
            if (q_image_.fill() >= b)
                total = add(total, info_nce(proj_.project_audio(aud_embs[i]), img_embs[i], q_image_,
                                            cfg_.nce_temperature));
        }
        return scale(total, 1.0f / static_cast<float>(b));
    }

    StepReport train_step(const ImageTower& image_tower, const std::vector<ContrastiveBatchItem>& batch) {
        if (!image_tower.is_frozen()) throw ContractError("train_step: image tower must be frozen");
        std::vector<Tensor> img_embs;
        img_embs.reserve(batch.size());
        for (const auto& item : batch) img_embs.push_back(image_tower.encode(item.image));
        return train_step_cached(img_embs, batch);
    }

    // Variant taking precomputed frozen-tower image embeddings (they are
    // constant per sample, so the training driver encodes each image once).
    StepReport train_step_cached(const std::vector<Tensor>& img_embs,
                                 const std::vector<ContrastiveBatchItem>& batch) {
        const int b = static_cast<int>(batch.size());
        if (b < 1) throw ContractError("train_step: empty batch");
        if (img_embs.size() != batch.size())
            throw ContractError("train_step: image embedding count mismatch");

        std::vector<Tensor> aud_embs, aud_keys;
        aud_embs.reserve(b);
        aud_keys.reserve(b);
        for (const auto& item : batch) {
            aud_embs.push_back(audio_.encode_spectrogram(item.spectrogram).embedding);
            aud_keys.push_back(key_tower_.encode_spectrogram(item.spectrogram).embedding);
        }

        Tensor loss = cx_loss(img_embs, aud_embs, aud_keys);
        if (cfg_.align_weight > 0.0f) {
            Tensor al = Tensor::scalar(0.0f);
            for (int i = 0; i < b; ++i) {
                Tensor diff = sub(proj_.project_audio(aud_embs[i]), img_embs[i]);
                al = add(al, sum(mul(diff, diff)));
            }
            loss = add(loss, scale(al, cfg_.align_weight / static_cast<float>(b)));
        }
        if (cfg_.aux_masked_weight > 0.0f) {
            Tensor aux = Tensor::scalar(0.0f);
            for (int i = 0; i < b; ++i) {
                auto enc = audio_.encode_spectrogram(batch[i].spectrogram);
                Tensor logits = audio_.masked_prediction_logits(enc.final_hidden);
                std::vector<int> targets(static_cast<std::size_t>(logits.rows()), batch[i].class_id);
                aux = add(aux, cross_entropy_rows(logits, targets));
            }
            loss = add(loss, scale(aux, cfg_.aux_masked_weight / static_cast<float>(b)));
        }

        audio_.params().zero_grad();
        proj_.store.zero_grad();
        if (loss.requires_grad()) backward(loss);
        const float grad_norm = static_cast<float>(
            std::sqrt(audio_.params().grad_sq_norm() + proj_.store.grad_sq_norm()));
        opt_.step(audio_.params());
        opt_proj_.step(proj_.store);

        shadow_.update(audio_.params(), cfg_.momentum);
        shadow_.write_into(key_tower_.params());

        // Queue keys: momentum-audio keys and frozen-image keys.
        for (int i = 0; i < b; ++i) {
            q_audio_.push(aud_keys[i].values(), 1);
            q_image_.push(img_embs[i].values(), 1);
        }

        ++step_count_;
        return {loss.item(), grad_norm, q_audio_.fill()};
    }

    NegativeQueue& audio_queue() { return q_audio_; }
    NegativeQueue& image_queue() { return q_image_; }
    MomentumShadow& shadow() { return shadow_; }
    AudioTower& key_tower() { return key_tower_; }
    Adam& optimizer() { return opt_; }
    Adam& projection_optimizer() { return opt_proj_; }
    long step_count() const { return step_count_; }
    void set_step_count(long s) { step_count_ = s; }

private:
    AudioTower& audio_;
    CrossProjection& proj_;
    TrainConfig cfg_;
    MomentumShadow shadow_;
    AudioTower key_tower_;  // frozen twin evaluated with the shadow weights
    NegativeQueue q_audio_;
    NegativeQueue q_image_;
    Adam opt_;
    Adam opt_proj_;
    long step_count_ = 0;
};

}  // namespace sonogen
