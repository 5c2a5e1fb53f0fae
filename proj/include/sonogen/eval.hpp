#pragma once

// Cross-modal evaluation: retrieval recall@k in the shared embedding space
// and an automated two-alternative forced choice (2AFC). The shared space
// pairs raw image-tower embeddings with projected audio embeddings — the two
// sides the contrastive stage aligns.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sonogen/contrastive.hpp"
#include "sonogen/data.hpp"
#include "sonogen/encoders.hpp"
#include "sonogen/error.hpp"
#include "sonogen/rng.hpp"
#include "sonogen/tensor.hpp"

namespace sonogen {

namespace detail {
inline float cosine_rows(const Tensor& a, const Tensor& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a.values()[i]) * b.values()[i];
        na += static_cast<double>(a.values()[i]) * a.values()[i];
        nb += static_cast<double>(b.values()[i]) * b.values()[i];
    }
    return static_cast<float>(dot / std::max(std::sqrt(na) * std::sqrt(nb), 1e-12));
}
}  // namespace detail

// Fraction of queries whose true partner (gallery[i] for queries[i]) ranks in
// the top k by cosine similarity. Ties rank the lower gallery index first.
inline float recall_at_k(const std::vector<Tensor>& queries, const std::vector<Tensor>& gallery,
                         int k) {
    if (queries.size() != gallery.size())
        throw ContractError("recall_at_k: query and gallery counts differ");
    if (queries.empty()) throw ContractError("recall_at_k: empty inputs");
    if (k < 1 || k > static_cast<int>(gallery.size()))
        throw ContractError("recall_at_k: k " + std::to_string(k) +
                            " outside [1, gallery size]");
    int hits = 0;
    for (std::size_t qi = 0; qi < queries.size(); ++qi) {
        const float own = detail::cosine_rows(queries[qi], gallery[qi]);
        // rank of the true partner = 1 + number of strictly better gallery
        // entries + earlier-index ties
        int better = 0;
        for (std::size_t gi = 0; gi < gallery.size(); ++gi) {
            if (gi == qi) continue;
            const float s = detail::cosine_rows(queries[qi], gallery[gi]);
            if (s > own || (s == own && gi < qi)) ++better;
        }
        if (better < k) ++hits;
    }
    return static_cast<float>(hits) / static_cast<float>(queries.size());
}

// One forced-choice trial: does the audio embedding sit closer to the
// same-class image than to the other-class image? Exact ties go to the first
// slot, so the caller must balance slot order across trials.
inline bool two_afc_trial(const Tensor& audio_emb, const Tensor& first_img_emb,
                          const Tensor& second_img_emb, bool same_class_first) {
    const float s_first = detail::cosine_rows(audio_emb, first_img_emb);
    const float s_second = detail::cosine_rows(audio_emb, second_img_emb);
    const bool chose_first = s_first >= s_second;
    return chose_first == same_class_first;
}

struct AfcRun {
    float accuracy = 0.0f;
    std::vector<bool> outcomes;  // per-trial: chose the same-class image
};

struct EvalReport {
    float recall1_audio_to_image = 0.0f;
    float recall5_audio_to_image = 0.0f;
    float recall1_image_to_audio = 0.0f;
    float recall5_image_to_audio = 0.0f;
    std::vector<AfcRun> afc_runs;  // one per evaluation seed
    float afc_min = 0.0f;
    float afc_max = 0.0f;
    int trials = 0;
};

// 2AFC over `trials` seeded draws from `samples`: pick an anchor, a same-class
// distractor-free positive image (the anchor's own image) and an image from a
// different class. Slot order alternates with the trial index.
inline AfcRun run_afc(const std::vector<Tensor>& audio_embs, const std::vector<Tensor>& image_embs,
                      const std::vector<int>& classes, int trials, std::uint64_t seed) {
    if (audio_embs.size() != image_embs.size() || audio_embs.size() != classes.size())
        throw ContractError("run_afc: input sizes differ");
    Rng rng(seed);
    AfcRun run;
    run.outcomes.reserve(static_cast<std::size_t>(trials));
    int correct = 0;
    for (int t = 0; t < trials; ++t) {
        const std::size_t a = rng.below(static_cast<std::uint32_t>(audio_embs.size()));
        std::size_t b = rng.below(static_cast<std::uint32_t>(audio_embs.size()));
        int guard = 0;
        while (classes[b] == classes[a] && ++guard < 10000)
            b = rng.below(static_cast<std::uint32_t>(audio_embs.size()));
        if (classes[b] == classes[a]) throw ContractError("run_afc: needs >= 2 classes");
        const bool same_first = (t % 2) == 0;  // balanced slot order
        const bool ok = same_first
                            ? two_afc_trial(audio_embs[a], image_embs[a], image_embs[b], true)
                            : two_afc_trial(audio_embs[a], image_embs[b], image_embs[a], false);
        run.outcomes.push_back(ok);
        if (ok) ++correct;
    }
    run.accuracy = static_cast<float>(correct) / static_cast<float>(trials);
    return run;
}

// Full evaluation on a sample set: both-direction recall@{1,5} plus 2AFC
// accuracy repeated over `seeds` to report a min-max range.
inline EvalReport evaluate(const ImageTower& image_tower, const AudioTower& audio_tower,
                           const CrossProjection& proj, const std::vector<PairedSample>& samples,
                           int trials, const std::vector<std::uint64_t>& seeds) {
    if (samples.empty()) throw ContractError("evaluate: empty sample set");
    if (trials < 1) throw ContractError("evaluate: trials must be >= 1");
    if (seeds.empty()) throw ContractError("evaluate: needs at least one seed");

    std::vector<Tensor> image_embs, audio_embs;
    std::vector<int> classes;
    image_embs.reserve(samples.size());
    audio_embs.reserve(samples.size());
    for (const auto& s : samples) {
        image_embs.push_back(image_tower.encode(s.image).detach());
        audio_embs.push_back(
            proj.project_audio(audio_tower.encode(s.waveform).embedding).detach());
        classes.push_back(s.class_id);
    }

    EvalReport report;
    report.trials = trials;
    const int k5 = std::min<int>(5, static_cast<int>(samples.size()));
    report.recall1_audio_to_image = recall_at_k(audio_embs, image_embs, 1);
    report.recall5_audio_to_image = recall_at_k(audio_embs, image_embs, k5);
    report.recall1_image_to_audio = recall_at_k(image_embs, audio_embs, 1);
    report.recall5_image_to_audio = recall_at_k(image_embs, audio_embs, k5);

    report.afc_min = 1.0f;
    report.afc_max = 0.0f;
    for (std::uint64_t seed : seeds) {
        AfcRun run = run_afc(audio_embs, image_embs, classes, trials, seed);
        report.afc_min = std::min(report.afc_min, run.accuracy);
        report.afc_max = std::max(report.afc_max, run.accuracy);
        report.afc_runs.push_back(std::move(run));
    }
    return report;
}

// Plain-text rendering: key=value lines (range metrics as min/max pairs).
inline std::string report_to_text(const EvalReport& r) {
    auto line = [](const std::string& k, float v) { return k + "=" + std::to_string(v) + "\n"; };
    std::string out;
    out += line("recall1_audio_to_image", r.recall1_audio_to_image);
    out += line("recall5_audio_to_image", r.recall5_audio_to_image);
    out += line("recall1_image_to_audio", r.recall1_image_to_audio);
    out += line("recall5_image_to_audio", r.recall5_image_to_audio);
    out += line("afc_min", r.afc_min);
    out += line("afc_max", r.afc_max);
    out += "trials=" + std::to_string(r.trials) + "\n";
    return out;
}

// Per-trial CSV: seed_index,trial,correct
inline std::string afc_trials_csv(const EvalReport& r) {
    std::string out = "seed_index,trial,correct\n";
    for (std::size_t si = 0; si < r.afc_runs.size(); ++si)
        for (std::size_t t = 0; t < r.afc_runs[si].outcomes.size(); ++t)
            out += std::to_string(si) + "," + std::to_string(t) + "," +
                   (r.afc_runs[si].outcomes[t] ? "1" : "0") + "\n";
    return out;
}

}  // namespace sonogen
