#pragma once

// Procedural paired audio/image corpus plus the real-file I/O boundary:
// strict RIFF/WAVE PCM16 reading and binary PPM (P6) writing.
//
// Corpus design: each class owns a pair of frequency bands and a hue; every
// sample draws two latent variables that continuously shift BOTH the tone
// frequencies and the two axis periods of a color plaid, so the audio-visual
// pairing carries instance-level (not just class-level) structure that
// retrieval can learn.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "sonogen/error.hpp"
#include "sonogen/rng.hpp"
#include "sonogen/tensor.hpp"

namespace sonogen {

struct PairedSample {
    std::vector<float> waveform;  // 1 s at 16 kHz, peak <= 1
    Tensor image;                 // [(64*64) x 3] in [0,1]
    int class_id = 0;
    std::uint64_t seed = 0;
};

struct SynthCorpusConfig {
    int class_count = 8;
    int per_class = 64;
    float split = 0.8f;  // fraction per class assigned to the training split
    std::uint64_t master_seed = 0;
    int sample_rate = 16000;
    int image_size = 64;

    void validate() const {
        if (class_count < 2) throw ConfigError("corpus: class_count must be >= 2");
        if (per_class < 2) throw ConfigError("corpus: per_class must be >= 2");
        if (!(split > 0.0f) || !(split < 1.0f))
            throw ConfigError("corpus: split must lie strictly between 0 and 1");
        const int train = static_cast<int>(split * static_cast<float>(per_class));
        if (train < 1 || train >= per_class)
            throw ConfigError("corpus: split leaves an empty train or held-out set");
    }

    int train_per_class() const { return static_cast<int>(split * static_cast<float>(per_class)); }
};

inline PairedSample synth_pair(int class_id, std::uint64_t seed,
                               const SynthCorpusConfig& cfg = {}) {
    if (class_id < 0 || class_id >= cfg.class_count)
        throw ContractError("synth_pair: class_id " + std::to_string(class_id) +
                            " out of range [0," + std::to_string(cfg.class_count) + ")");
    Rng rng(seed);
    PairedSample out;
    out.class_id = class_id;
    out.seed = seed;
    // Two independent within-class latents shared by the two modalities.
    // With a single latent, same-class samples form a 1-D manifold whose
    // nearest-neighbor spacing shrinks linearly in the sample count, and
    // cross-modal retrieval precision hits that spacing; the second latent
    // spreads them over a 2-D sheet (spacing ~ n^-1/2). Two is the measured
    // optimum: a third latent thins the training samples per input dimension
    // enough that each encoder's interpolation error grows faster than the
    // extra spacing.
    const float u = rng.uniform(0, 1);
    const float u2 = rng.uniform(0, 1);

    // --- audio: two sines in disjoint per-class bands, one latent each ---
    // bin width = sample_rate / n_fft = 40 Hz for the 400-point analysis.
    // Class identity sits in the coarse band positions; each latent moves
    // its tone continuously across ~10 bins, so the leakage pattern across
    // adjacent analysis bins pins the latent precisely. The sweep is kept as
    // wide as the band layout allows: decoding error scales inversely with
    // the cue's dynamic range. Quantizing the offsets to bin centers would
    // collapse each latent to ~a dozen levels and cap instance-level
    // retrieval. The second sine's amplitude also varies with u as a
    // redundant continuous cue.
    const float bin = 40.0f;
    const float f_lo = bin * (static_cast<float>(10 + 12 * class_id) + 10.0f * u);
    const float f_hi = bin * (static_cast<float>(110 + 11 * class_id) + 9.0f * u2);
    const float a_hi = 0.3f + 0.6f * u;
    out.waveform.resize(static_cast<std::size_t>(cfg.sample_rate));
    float peak = 0.0f;
    for (std::size_t i = 0; i < out.waveform.size(); ++i) {
        const float t = static_cast<float>(i) / static_cast<float>(cfg.sample_rate);
        // No broadband noise on purpose: the log spectrogram floor makes any
        // seed-stable noise a unique per-clip fingerprint that encoders
        // memorize instead of the class/variate cues, which destroys
        // held-out retrieval.
        float v = std::sin(2.0f * 3.14159265f * f_lo * t) +
                  a_hi * std::sin(2.0f * 3.14159265f * f_hi * t);
        out.waveform[i] = v;
        peak = std::max(peak, std::fabs(v));
    }
    for (float& v : out.waveform) v *= 0.95f / peak;

    // --- image: class hue + base period; the latents drive the two axis
    // periods of a plaid ---
    // Spatial period is the cue a mean-pooled patch tower reads precisely:
    // it is translation-invariant, so local patches suffice. Alternatives
    // all failed in practice: pattern phase is cyclic and needs absolute
    // position; global brightness/hue shifts are cancelled by token
    // LayerNorm; a third superimposed orientation interferes (beat
    // patterns); confining cues to image bands starves them of patches and
    // collapses under mean pooling. Periods scale monotonically with the
    // latents over the widest range the pixel grid supports cleanly —
    // decoding error scales inversely with the cue's dynamic range — so each
    // image determines (u, u2) uniquely.
    static const float hues[8][3] = {{1.0f, 0.2f, 0.2f}, {0.2f, 1.0f, 0.2f}, {0.2f, 0.2f, 1.0f},
                                     {1.0f, 0.8f, 0.1f}, {0.9f, 0.2f, 0.9f}, {0.1f, 0.9f, 0.9f},
                                     {0.9f, 0.6f, 0.3f}, {0.6f, 0.6f, 0.6f}};
    const float* hue = hues[class_id % 8];
    const int s = cfg.image_size;
    // The base period is the same for every class: period readout precision
    // from a fixed 64-px window degrades roughly with period^2 (a fixed
    // frequency resolution maps to a period error of p^2 * df), so keeping
    // all periods short maximizes the cycle count and the latent precision.
    // Class identity is carried entirely by the hue contrast pattern, which
    // survives token LayerNorm because it modulates the wave per channel
    // rather than shifting the whole image.
    const float basep = 6.0f;
    const float px = basep * (0.6f + 0.9f * u);
    const float py = basep * (0.6f + 0.9f * u2);
    out.image = Tensor::zeros({s * s, 3});
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const float wave =
                0.5f * (std::sin(2.0f * 3.14159265f * static_cast<float>(x) / px) +
                        std::sin(2.0f * 3.14159265f * static_cast<float>(y) / py));
            for (int ch = 0; ch < 3; ++ch) {
                float v = 0.5f + 0.45f * wave * hue[ch] + 0.01f * rng.uniform(-1, 1);
                out.image.values()[(y * s + x) * 3 + ch] = std::min(1.0f, std::max(0.0f, v));
            }
        }
    return out;
}

struct SynthCorpus {
    std::vector<PairedSample> train;
    std::vector<PairedSample> held_out;
};

inline SynthCorpus make_corpus(const SynthCorpusConfig& cfg) {
    cfg.validate();
    SynthCorpus out;
    const int train_n = cfg.train_per_class();
    for (int cls = 0; cls < cfg.class_count; ++cls)
        for (int i = 0; i < cfg.per_class; ++i) {
            const std::uint64_t seed =
                Rng::derive(cfg.master_seed, static_cast<std::uint64_t>(cls) * 100003u +
                                                 static_cast<std::uint64_t>(i));
            auto sample = synth_pair(cls, seed, cfg);
            (i < train_n ? out.train : out.held_out).push_back(std::move(sample));
        }
    return out;
}

// ---- WAV input (RIFF, PCM16, strict) ----

namespace detail {

inline std::uint32_t rd_u32(const std::vector<unsigned char>& b, std::size_t off) {
    return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
           (static_cast<std::uint32_t>(b[off + 2]) << 16) |
           (static_cast<std::uint32_t>(b[off + 3]) << 24);
}
inline std::uint16_t rd_u16(const std::vector<unsigned char>& b, std::size_t off) {
    return static_cast<std::uint16_t>(static_cast<std::uint16_t>(b[off]) |
                                      (static_cast<std::uint16_t>(b[off + 1]) << 8));
}

[[noreturn]] inline void wav_fail(std::size_t off, const std::string& what) {
    throw ParseError("wav: " + what + " at byte offset " + std::to_string(off));
}

}  // namespace detail

// Decode an in-memory RIFF/WAVE PCM16 file. Mono passes through; stereo is
// averaged; any sample rate other than `expected_rate` is rejected (the
// pipeline never resamples).
inline std::vector<float> parse_wav(const std::vector<unsigned char>& bytes,
                                    int expected_rate = 16000) {
    using detail::rd_u16;
    using detail::rd_u32;
    if (bytes.size() < 12) detail::wav_fail(bytes.size(), "file shorter than RIFF header");
    if (bytes[0] != 'R' || bytes[1] != 'I' || bytes[2] != 'F' || bytes[3] != 'F')
        detail::wav_fail(0, "missing RIFF magic");
    if (bytes[8] != 'W' || bytes[9] != 'A' || bytes[10] != 'V' || bytes[11] != 'E')
        detail::wav_fail(8, "missing WAVE form type");
    const std::uint32_t riff_size = rd_u32(bytes, 4);
    // declared size may not exceed the actual file; chunks must stay inside it
    const std::size_t riff_end = std::min<std::size_t>(bytes.size(), 8u + riff_size);

    bool have_fmt = false;
    std::uint16_t channels = 0;
    std::size_t pos = 12;
    while (pos + 8 <= riff_end) {
        const std::size_t chunk_at = pos;
        const std::uint32_t chunk_size = rd_u32(bytes, pos + 4);
        const char c0 = static_cast<char>(bytes[pos]), c1 = static_cast<char>(bytes[pos + 1]);
        const char c2 = static_cast<char>(bytes[pos + 2]), c3 = static_cast<char>(bytes[pos + 3]);
        pos += 8;
        if (chunk_size > riff_end - pos)
            detail::wav_fail(chunk_at + 4, "chunk size " + std::to_string(chunk_size) +
                                               " exceeds remaining bytes");
        if (c0 == 'f' && c1 == 'm' && c2 == 't' && c3 == ' ') {
            if (chunk_size < 16) detail::wav_fail(chunk_at, "fmt chunk shorter than 16 bytes");
            const std::uint16_t format = rd_u16(bytes, pos);
            if (format != 1)
                throw UnsupportedFormatError("wav: format tag " + std::to_string(format) +
                                             " (only PCM=1 supported)");
            channels = rd_u16(bytes, pos + 2);
            if (channels != 1 && channels != 2)
                throw UnsupportedFormatError("wav: " + std::to_string(channels) +
                                             " channels (only mono or stereo supported)");
            const std::uint32_t rate = rd_u32(bytes, pos + 4);
            if (rate != static_cast<std::uint32_t>(expected_rate))
                throw UnsupportedFormatError("wav: sample rate " + std::to_string(rate) +
                                             " (expected " + std::to_string(expected_rate) +
                                             "; no resampling)");
            const std::uint16_t bits = rd_u16(bytes, pos + 14);
            if (bits != 16)
                throw UnsupportedFormatError("wav: " + std::to_string(bits) +
                                             " bits per sample (only 16 supported)");
            have_fmt = true;
        } else if (c0 == 'd' && c1 == 'a' && c2 == 't' && c3 == 'a') {
            if (!have_fmt) detail::wav_fail(chunk_at, "data chunk before fmt chunk");
            const std::size_t frame = 2u * channels;
            const std::size_t frames = chunk_size / frame;
            std::vector<float> out(frames);
            for (std::size_t i = 0; i < frames; ++i) {
                float acc = 0.0f;
                for (std::uint16_t ch = 0; ch < channels; ++ch) {
                    const std::size_t at = pos + i * frame + 2u * ch;
                    const std::int16_t s = static_cast<std::int16_t>(
                        static_cast<std::uint16_t>(bytes[at]) |
                        (static_cast<std::uint16_t>(bytes[at + 1]) << 8));
                    acc += static_cast<float>(s) / 32768.0f;
                }
                out[i] = acc / static_cast<float>(channels);
            }
            return out;
        }
        pos += chunk_size + (chunk_size & 1u);  // chunks are word-aligned
    }
    detail::wav_fail(pos, have_fmt ? "no data chunk found" : "no fmt chunk found");
}

inline std::vector<float> load_wav(const std::string& path, int expected_rate = 16000) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open wav file: " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    return parse_wav(bytes, expected_rate);
}

// ---- PPM output (binary P6, maxval 255) ----

inline std::vector<unsigned char> ppm_bytes(const Tensor& image, int size) {
    if (image.shape() != Shape{size * size, 3})
        throw ShapeError("ppm: image shape " + shape_str(image.shape()) + " does not match [" +
                         std::to_string(size * size) + "x3]");
    std::string header = "P6\n" + std::to_string(size) + " " + std::to_string(size) + "\n255\n";
    std::vector<unsigned char> out(header.begin(), header.end());
    out.reserve(out.size() + image.size());
    for (float v : image.values()) {
        if (v < 0.0f || v > 1.0f) throw ContractError("ppm: pixel value outside [0,1]");
        out.push_back(static_cast<unsigned char>(std::floor(v * 255.0f + 0.5f)));
    }
    return out;
}

inline void save_ppm(const Tensor& image, int size, const std::string& path) {
    const auto bytes = ppm_bytes(image, size);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open ppm for writing: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("ppm write failed: " + path);
}

}  // namespace sonogen
