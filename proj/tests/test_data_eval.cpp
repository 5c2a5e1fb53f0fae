#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstdio>
#include <vector>

#include "doctest.h"
#include "sonogen/data.hpp"
#include "sonogen/eval.hpp"
#include "testutil.hpp"

using namespace sonogen;

// ---- synthetic corpus ----

TEST_CASE("synth_pair is bit-identical for the same (class, seed)") {
    auto a = synth_pair(3, 77);
    auto b = synth_pair(3, 77);
    CHECK(a.waveform == b.waveform);
    CHECK(a.image.values() == b.image.values());
    CHECK(a.class_id == 3);
    CHECK_THROWS_AS(synth_pair(8, 1), ContractError);
    CHECK_THROWS_AS(synth_pair(-1, 1), ContractError);
}

TEST_CASE("waveform peak is <= 1 and images lie in [0,1]") {
    for (int cls = 0; cls < 8; ++cls) {
        auto s = synth_pair(cls, 1000 + static_cast<std::uint64_t>(cls));
        float peak = 0.0f;
        for (float v : s.waveform) peak = std::max(peak, std::fabs(v));
        CHECK(peak <= 1.0f);
        CHECK(peak > 0.5f);  // normalized, not silent
        for (float v : s.image.values()) {
            CHECK(v >= 0.0f);
            CHECK(v <= 1.0f);
        }
    }
}

TEST_CASE("spectrogram argmax matches the class chord's low frequency bin") {
    for (int cls = 0; cls < 8; ++cls) {
        const std::uint64_t seed = 42 + static_cast<std::uint64_t>(cls);
        auto s = synth_pair(cls, seed);
        Rng rng(seed);
        const float u = rng.uniform(0, 1);  // same latent draw as synth_pair
        const float expected_bin = 10.0f + 12.0f * static_cast<float>(cls) + 10.0f * u;

        Tensor spec = spectrogram(s.waveform, 400, 160);
        const int frames = spec.shape()[0], bins = spec.shape()[1];
        // average the log-magnitude over frames, then take the argmax bin,
        // searching below the high-tone bands (which start at bin 110)
        std::vector<double> avg(static_cast<std::size_t>(bins), 0.0);
        for (int f = 0; f < frames; ++f)
            for (int b = 0; b < bins; ++b) avg[static_cast<std::size_t>(b)] += spec.values()[f * bins + b];
        int arg = 0;
        for (int b = 1; b < 105 && b < bins; ++b)
            if (avg[static_cast<std::size_t>(b)] > avg[static_cast<std::size_t>(arg)]) arg = b;
        // the tone is continuous in frequency, so leakage can shift the
        // argmax to either neighboring bin
        CHECK(std::fabs(static_cast<float>(arg) - expected_bin) <= 1.0f);
    }
}

TEST_CASE("between-class image distance exceeds within-class distance") {
    auto dist = [](const Tensor& a, const Tensor& b) {
        double d = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i)
            d += std::fabs(static_cast<double>(a.values()[i]) - b.values()[i]);
        return d / static_cast<double>(a.size());
    };
    double within = 0.0, between = 0.0;
    int wn = 0, bn = 0;
    std::vector<PairedSample> samples;
    for (int cls = 0; cls < 8; ++cls)
        for (int i = 0; i < 3; ++i)
            samples.push_back(synth_pair(cls, static_cast<std::uint64_t>(cls * 10 + i)));
    for (std::size_t i = 0; i < samples.size(); ++i)
        for (std::size_t j = i + 1; j < samples.size(); ++j) {
            const double d = dist(samples[i].image, samples[j].image);
            if (samples[i].class_id == samples[j].class_id) {
                within += d;
                ++wn;
            } else {
                between += d;
                ++bn;
            }
        }
    CHECK(between / bn > within / wn);
}

TEST_CASE("corpus regeneration is bit-identical and the split is deterministic") {
    SynthCorpusConfig cfg;
    cfg.class_count = 4;
    cfg.per_class = 8;
    cfg.split = 0.75f;
    cfg.master_seed = 9;
    auto c1 = make_corpus(cfg);
    auto c2 = make_corpus(cfg);
    REQUIRE(c1.train.size() == 4 * 6);
    REQUIRE(c1.held_out.size() == 4 * 2);
    for (std::size_t i = 0; i < c1.train.size(); ++i) {
        CHECK(c1.train[i].waveform == c2.train[i].waveform);
        CHECK(c1.train[i].image.values() == c2.train[i].image.values());
    }
    for (std::size_t i = 0; i < c1.held_out.size(); ++i)
        CHECK(c1.held_out[i].seed == c2.held_out[i].seed);

    SynthCorpusConfig bad = cfg;
    bad.split = 1.0f;
    CHECK_THROWS_AS(make_corpus(bad), ConfigError);
    bad = cfg;
    bad.per_class = 8;
    bad.split = 0.01f;  // empty train split
    CHECK_THROWS_AS(make_corpus(bad), ConfigError);
}

// ---- WAV ----

namespace {

void push_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xff));
    b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    b.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    b.push_back(static_cast<unsigned char>((v >> 24) & 0xff));
}
void push_u16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xff));
    b.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
}
void push_tag(std::vector<unsigned char>& b, const char* t) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>(t[i]));
}

// Minimal PCM16 WAV: header + fmt + data with the given samples.
std::vector<unsigned char> wav_fixture(const std::vector<std::int16_t>& samples,
                                       std::uint32_t rate = 16000, std::uint16_t channels = 1) {
    std::vector<unsigned char> b;
    const std::uint32_t data_size = static_cast<std::uint32_t>(samples.size() * 2);
    push_tag(b, "RIFF");
    push_u32(b, 4 + 24 + 8 + data_size);
    push_tag(b, "WAVE");
    push_tag(b, "fmt ");
    push_u32(b, 16);
    push_u16(b, 1);  // PCM
    push_u16(b, channels);
    push_u32(b, rate);
    push_u32(b, rate * channels * 2);  // byte rate
    push_u16(b, static_cast<std::uint16_t>(channels * 2));
    push_u16(b, 16);  // bits
    push_tag(b, "data");
    push_u32(b, data_size);
    for (std::int16_t s : samples) push_u16(b, static_cast<std::uint16_t>(s));
    return b;
}

}  // namespace

TEST_CASE("hand-written 4-sample PCM16 fixture decodes to exact floats") {
    auto bytes = wav_fixture({0, 16384, -16384, -32768});
    auto wav = parse_wav(bytes);
    REQUIRE(wav.size() == 4);
    CHECK(wav[0] == 0.0f);
    CHECK(wav[1] == 0.5f);
    CHECK(wav[2] == -0.5f);
    CHECK(wav[3] == -1.0f);
}

TEST_CASE("stereo is averaged to mono") {
    auto bytes = wav_fixture({16384, -16384, 8192, 8192}, 16000, 2);
    auto wav = parse_wav(bytes);
    REQUIRE(wav.size() == 2);
    CHECK(wav[0] == 0.0f);
    CHECK(wav[1] == 0.25f);
}

TEST_CASE("malformed WAV inputs raise typed errors, with byte offsets for parse failures") {
    auto good = wav_fixture({1, 2, 3, 4});

    // truncations at every prefix length: parse error, never a crash
    for (std::size_t len = 0; len < good.size(); ++len) {
        std::vector<unsigned char> cut(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(len));
        if (len >= good.size() - 8) continue;  // may still be decodable with fewer samples
        CHECK_THROWS_AS(parse_wav(cut), std::runtime_error);
    }

    auto bad_magic = good;
    bad_magic[0] = 'X';
    try {
        parse_wav(bad_magic);
        FAIL("expected ParseError");
    } catch (const ParseError& e) {
        CHECK(std::string(e.what()).find("byte offset 0") != std::string::npos);
    }

    auto wrong_rate = wav_fixture({1, 2}, 44100);
    try {
        parse_wav(wrong_rate);
        FAIL("expected UnsupportedFormatError");
    } catch (const UnsupportedFormatError& e) {
        CHECK(std::string(e.what()).find("44100") != std::string::npos);
    }

    auto float_fmt = good;
    float_fmt[20] = 3;  // format tag = IEEE float
    CHECK_THROWS_AS(parse_wav(float_fmt), UnsupportedFormatError);

    // oversized chunk declaration must not be followed off the end
    auto huge_chunk = good;
    huge_chunk[40] = 0xff;
    huge_chunk[41] = 0xff;
    CHECK_THROWS_AS(parse_wav(huge_chunk), ParseError);
}

TEST_CASE("WAV fuzz: 1000 random mutations error cleanly or decode, never crash") {
    auto base = wav_fixture({100, -100, 2000, -2000, 31000, -31000, 0, 1});
    Rng rng(321);
    int decoded = 0, rejected = 0;
    for (int iter = 0; iter < 1000; ++iter) {
        auto bytes = base;
        const int mutations = 1 + static_cast<int>(rng.below(4));
        for (int m = 0; m < mutations; ++m) {
            switch (bytes.empty() ? 2u : rng.below(3)) {
                case 0: {  // flip a byte
                    const std::size_t at = rng.below(static_cast<std::uint32_t>(bytes.size()));
                    bytes[at] = static_cast<unsigned char>(rng.below(256));
                    break;
                }
                case 1: {  // truncate
                    const std::size_t keep = rng.below(static_cast<std::uint32_t>(bytes.size() + 1));
                    bytes.resize(keep);
                    break;
                }
                default: {  // append garbage
                    const int extra = static_cast<int>(rng.below(16));
                    for (int i = 0; i < extra; ++i)
                        bytes.push_back(static_cast<unsigned char>(rng.below(256)));
                    break;
                }
            }
        }
        try {
            auto wav = parse_wav(bytes);
            CHECK(wav.size() <= 1 << 20);
            ++decoded;
        } catch (const std::runtime_error&) {
            ++rejected;
        }
    }
    CHECK(decoded + rejected == 1000);
    CHECK(rejected > 0);
}

TEST_CASE("load_wav reads a file from disk and reports missing files") {
    const std::string path = "test_fixture_tmp.wav";
    auto bytes = wav_fixture({5000, -5000});
    {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
    }
    auto wav = load_wav(path);
    REQUIRE(wav.size() == 2);
    CHECK(wav[0] == doctest::Approx(5000.0f / 32768.0f));
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_wav("does_not_exist_anywhere.wav"), IoError);
}

// ---- PPM ----

TEST_CASE("PPM bytes: header, rounding rule, and exact zero image") {
    Tensor zero = Tensor::zeros({4, 3});  // 2x2 image
    auto bytes = ppm_bytes(zero, 2);
    const std::string header = "P6\n2 2\n255\n";
    REQUIRE(bytes.size() == header.size() + 12);
    for (std::size_t i = 0; i < header.size(); ++i)
        CHECK(bytes[i] == static_cast<unsigned char>(header[i]));
    for (std::size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == 0);

    Tensor half = Tensor::filled({4, 3}, 0.5f);
    auto hb = ppm_bytes(half, 2);
    CHECK(hb[header.size()] == 128);  // floor(0.5*255 + 0.5)

    Tensor one = Tensor::filled({4, 3}, 1.0f);
    CHECK(ppm_bytes(one, 2)[header.size()] == 255);

    CHECK_THROWS_AS(ppm_bytes(Tensor::zeros({5, 3}), 2), ShapeError);
    CHECK_THROWS_AS(ppm_bytes(Tensor::filled({4, 3}, 1.5f), 2), ContractError);
}

TEST_CASE("PPM roundtrip through a reference reader stays within 1/255") {
    Rng rng(55);
    Tensor img = Tensor::uniform({16 * 16, 3}, rng, 0, 1);
    auto bytes = ppm_bytes(img, 16);
    // reference reader: skip three header lines, then raw bytes
    std::size_t pos = 0;
    int newlines = 0;
    while (newlines < 3) {
        if (bytes[pos] == '\n') ++newlines;
        ++pos;
    }
    REQUIRE(bytes.size() - pos == img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const float back = static_cast<float>(bytes[pos + i]) / 255.0f;
        CHECK(std::fabs(back - img.values()[i]) <= 1.0f / 255.0f);
    }
}

// ---- retrieval ----

TEST_CASE("recall_at_k: identity gallery, chance level, monotonicity, contracts") {
    Rng rng(77);
    std::vector<Tensor> embs;
    for (int i = 0; i < 20; ++i) embs.push_back(l2_normalize_rows(Tensor::uniform({1, 8}, rng, -1, 1)));
    CHECK(recall_at_k(embs, embs, 1) == 1.0f);
    CHECK(recall_at_k(embs, embs, 20) == 1.0f);

    // chance level for unrelated unit embeddings
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        Rng r(seed);
        std::vector<Tensor> q, g;
        for (int i = 0; i < 100; ++i) {
            q.push_back(l2_normalize_rows(Tensor::uniform({1, 16}, r, -1, 1)));
            g.push_back(l2_normalize_rows(Tensor::uniform({1, 16}, r, -1, 1)));
        }
        CHECK(recall_at_k(q, g, 1) < 0.1f);
        // monotone non-decreasing in k
        float prev = 0.0f;
        for (int k = 1; k <= 100; k += 9) {
            const float r_k = recall_at_k(q, g, k);
            CHECK(r_k >= prev);
            prev = r_k;
        }
        CHECK(recall_at_k(q, g, 100) == 1.0f);
    }

    CHECK_THROWS_AS(recall_at_k(embs, embs, 0), ContractError);
    CHECK_THROWS_AS(recall_at_k(embs, embs, 21), ContractError);
    std::vector<Tensor> one = {embs[0]};
    CHECK_THROWS_AS(recall_at_k(one, embs, 1), ContractError);
}

// ---- 2AFC ----

TEST_CASE("two_afc_trial: identical embedding wins, order invariance, collapsed = 0.5") {
    Rng rng(88);
    Tensor a = l2_normalize_rows(Tensor::uniform({1, 8}, rng, -1, 1));
    Tensor other = l2_normalize_rows(Tensor::uniform({1, 8}, rng, -1, 1));
    // same-class image identical to the audio embedding: always chosen
    CHECK(two_afc_trial(a, a, other, true));
    CHECK(two_afc_trial(a, other, a, false));

    // collapsed model: every embedding identical -> exactly 0.5 on balanced slots
    std::vector<Tensor> collapsed(10, a);
    std::vector<int> classes = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    AfcRun run = run_afc(collapsed, collapsed, classes, 200, 7);
    CHECK(run.accuracy == 0.5f);
    CHECK(run.outcomes.size() == 200);
}

TEST_CASE("evaluate: untrained model is near chance; report shapes hold") {
    Rng rng(99);
    SynthCorpusConfig ccfg;
    ccfg.class_count = 4;
    ccfg.per_class = 8;
    ccfg.split = 0.5f;
    ccfg.master_seed = 3;
    auto corpus = make_corpus(ccfg);

    ImageTowerConfig icfg;
    icfg.image_size = 64;
    icfg.patch_size = 8;
    icfg.channel_dim = 32;
    icfg.heads = 2;
    icfg.sa_layers = 1;
    icfg.embed_dim = 16;
    ImageTower img(icfg, rng);
    AudioTowerConfig acfg;
    acfg.hidden = 16;
    acfg.heads = 2;
    acfg.transformer_layers = 1;
    acfg.embed_dim = 16;
    acfg.class_count = 4;
    acfg.class_embed_dim = 8;
    AudioTower aud(acfg, rng);
    CrossProjection proj(16, rng);

    auto report = evaluate(img, aud, proj, corpus.held_out, 200, {11, 22, 33});
    CHECK(report.afc_min <= report.afc_max);
    CHECK(report.afc_min >= 0.4f);
    CHECK(report.afc_max <= 0.6f);
    CHECK(report.afc_runs.size() == 3);
    for (float r : {report.recall1_audio_to_image, report.recall5_audio_to_image,
                    report.recall1_image_to_audio, report.recall5_image_to_audio}) {
        CHECK(r >= 0.0f);
        CHECK(r <= 1.0f);
    }
    CHECK(report.recall5_audio_to_image >= report.recall1_audio_to_image);
    CHECK(report.recall5_image_to_audio >= report.recall1_image_to_audio);

    const std::string text = report_to_text(report);
    CHECK(text.find("recall1_audio_to_image=") != std::string::npos);
    CHECK(text.find("afc_min=") != std::string::npos);
    const std::string csv = afc_trials_csv(report);
    std::size_t lines = 0;
    for (char c : csv)
        if (c == '\n') ++lines;
    CHECK(lines == 1 + 3 * 200);

    CHECK_THROWS_AS(evaluate(img, aud, proj, {}, 200, {1}), ContractError);
    CHECK_THROWS_AS(evaluate(img, aud, proj, corpus.held_out, 0, {1}), ContractError);
    CHECK_THROWS_AS(evaluate(img, aud, proj, corpus.held_out, 10, {}), ContractError);
}
