#pragma once

// Flat key=value configuration covering every tunable in the pipeline, with
// CLI-flag overrides applied on top (flags win). Unknown keys and out-of-range
// values are rejected with messages naming the field.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sonogen/codec.hpp"
#include "sonogen/contrastive.hpp"
#include "sonogen/data.hpp"
#include "sonogen/encoders.hpp"
#include "sonogen/error.hpp"
#include "sonogen/generator.hpp"

namespace sonogen {

struct Config {
    std::uint64_t seed = 1;

    // towers
    ImageTowerConfig image;
    AudioTowerConfig audio;

    // contrastive stage
    int queue_size = 9600;
    float momentum = 0.99f;
    float nce_temperature = 0.07f;
    int batch_size = 8;
    int train_steps = 2000;
    float lr = 2e-3f;
    float align_weight = 16.0f;
    float weight_decay = 1e-4f;
    float spec_jitter = 0.0f;  // train-time additive noise on log-spectrograms
    int topk = 1;

    // image pretraining stage
    // The 4-layer post-norm tower is lr-fragile on this corpus: it stalls at
    // chance for pretrain_lr >= 1e-3 and trains reliably at 7e-4.
    int pretrain_steps = 1500;
    float pretrain_lr = 7e-4f;

    // codec stage
    CodecConfig codec;
    int codec_epochs = 30;
    float codec_lr = 3e-3f;

    // corpus
    SynthCorpusConfig corpus;

    // generation
    GenerationConfig gen;

    // evaluation
    int trials = 200;

    void validate() const {
        auto positive = [](long v, const char* field) {
            if (v < 1) throw ConfigError(std::string("config: ") + field + " must be >= 1");
        };
        positive(queue_size, "queue_size");
        positive(batch_size, "batch_size");
        positive(train_steps, "train_steps");
        positive(pretrain_steps, "pretrain_steps");
        positive(codec_epochs, "codec_epochs");
        positive(trials, "trials");
        positive(topk, "topk");
        if (!(momentum >= 0.0f && momentum <= 1.0f))
            throw ConfigError("config: momentum must lie in [0,1]");
        if (!(nce_temperature > 0.0f)) throw ConfigError("config: nce_temperature must be > 0");
        if (!(lr > 0.0f)) throw ConfigError("config: lr must be > 0");
        if (align_weight < 0.0f) throw ConfigError("config: align_weight must be >= 0");
        if (weight_decay < 0.0f) throw ConfigError("config: weight_decay must be >= 0");
        if (spec_jitter < 0.0f) throw ConfigError("config: spec_jitter must be >= 0");
        if (!(pretrain_lr > 0.0f)) throw ConfigError("config: pretrain_lr must be > 0");
        if (!(codec_lr > 0.0f)) throw ConfigError("config: codec_lr must be > 0");
        image.validate();
        audio.validate();
        codec.validate();
        corpus.validate();
        gen.validate();
        if (image.embed_dim != audio.embed_dim)
            throw ConfigError("config: embed_dim differs between towers (" +
                              std::to_string(image.embed_dim) + " vs " +
                              std::to_string(audio.embed_dim) + ")");
        if (codec.output_size() != image.image_size)
            throw ConfigError("config: codec output " + std::to_string(codec.output_size()) +
                              " != image_size " + std::to_string(image.image_size));
        if (corpus.image_size != image.image_size)
            throw ConfigError("config: corpus image_size " + std::to_string(corpus.image_size) +
                              " != image_size " + std::to_string(image.image_size));
        if (audio.class_count != corpus.class_count)
            throw ConfigError("config: audio mask class_count " +
                              std::to_string(audio.class_count) + " != corpus class_count " +
                              std::to_string(corpus.class_count));
        if (queue_size < batch_size) throw ConfigError("config: queue_size must be >= batch_size");
    }
};

namespace detail {

struct ConfigField {
    std::function<void(Config&, const std::string&)> set;
    std::function<std::string(const Config&)> get;
};

inline long to_long(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long out = std::stol(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}
inline float to_float(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const float out = std::stof(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline const std::map<std::string, ConfigField>& config_fields() {
    static const std::map<std::string, ConfigField> fields = [] {
        std::map<std::string, ConfigField> f;
        auto add_int = [&f](const std::string& key, auto member) {
            f[key] = {[key, member](Config& c, const std::string& v) {
                          c.*member = static_cast<std::decay_t<decltype(c.*member)>>(to_long(key, v));
                      },
                      [member](const Config& c) { return std::to_string(c.*member); }};
        };
        auto add_float = [&f](const std::string& key, auto member) {
            f[key] = {[key, member](Config& c, const std::string& v) { c.*member = to_float(key, v); },
                      [member](const Config& c) { return std::to_string(c.*member); }};
        };
        auto add_sub_int = [&f](const std::string& key, auto sub, auto member) {
            f[key] = {[key, sub, member](Config& c, const std::string& v) {
                          (c.*sub).*member =
                              static_cast<std::decay_t<decltype((c.*sub).*member)>>(to_long(key, v));
                      },
                      [sub, member](const Config& c) { return std::to_string((c.*sub).*member); }};
        };
        auto add_sub_float = [&f](const std::string& key, auto sub, auto member) {
            f[key] = {[key, sub, member](Config& c, const std::string& v) {
                          (c.*sub).*member = to_float(key, v);
                      },
                      [sub, member](const Config& c) { return std::to_string((c.*sub).*member); }};
        };

        f["seed"] = {[](Config& c, const std::string& v) {
                         c.seed = static_cast<std::uint64_t>(to_long("seed", v));
                     },
                     [](const Config& c) { return std::to_string(c.seed); }};
        add_int("queue_size", &Config::queue_size);
        add_float("momentum", &Config::momentum);
        add_float("nce_temperature", &Config::nce_temperature);
        add_int("batch_size", &Config::batch_size);
        add_int("train_steps", &Config::train_steps);
        add_float("lr", &Config::lr);
        add_float("align_weight", &Config::align_weight);
        add_float("weight_decay", &Config::weight_decay);
        add_float("spec_jitter", &Config::spec_jitter);
        add_int("topk", &Config::topk);
        add_int("pretrain_steps", &Config::pretrain_steps);
        add_float("pretrain_lr", &Config::pretrain_lr);
        add_int("codec_epochs", &Config::codec_epochs);
        add_float("codec_lr", &Config::codec_lr);
        add_int("trials", &Config::trials);

        f["image_size"] = {[](Config& c, const std::string& v) {
                               const int n = static_cast<int>(to_long("image_size", v));
                               c.image.image_size = n;
                               c.corpus.image_size = n;
                           },
                           [](const Config& c) { return std::to_string(c.image.image_size); }};
        add_sub_int("patch_size", &Config::image, &ImageTowerConfig::patch_size);
        add_sub_int("image_channel_dim", &Config::image, &ImageTowerConfig::channel_dim);
        add_sub_int("image_layers", &Config::image, &ImageTowerConfig::sa_layers);
        add_sub_int("image_heads", &Config::image, &ImageTowerConfig::heads);
        f["embed_dim"] = {[](Config& c, const std::string& v) {
                              const int d = static_cast<int>(to_long("embed_dim", v));
                              c.image.embed_dim = d;
                              c.audio.embed_dim = d;
                          },
                          [](const Config& c) { return std::to_string(c.image.embed_dim); }};

        add_sub_int("audio_hidden", &Config::audio, &AudioTowerConfig::hidden);
        add_sub_int("audio_layers", &Config::audio, &AudioTowerConfig::transformer_layers);
        add_sub_int("audio_heads", &Config::audio, &AudioTowerConfig::heads);
        add_sub_int("mask_embed_dim", &Config::audio, &AudioTowerConfig::class_embed_dim);
        add_sub_float("head_temperature", &Config::audio, &AudioTowerConfig::temperature);

        add_sub_int("codebook_size", &Config::codec, &CodecConfig::codebook_size);
        add_sub_int("codec_embed_dim", &Config::codec, &CodecConfig::embed_dim);
        add_sub_int("codec_grid", &Config::codec, &CodecConfig::grid);

        f["classes"] = {[](Config& c, const std::string& v) {
                            const int n = static_cast<int>(to_long("classes", v));
                            c.corpus.class_count = n;
                            c.audio.class_count = n;
                        },
                        [](const Config& c) { return std::to_string(c.corpus.class_count); }};
        add_sub_int("per_class", &Config::corpus, &SynthCorpusConfig::per_class);
        add_sub_float("split", &Config::corpus, &SynthCorpusConfig::split);

        add_sub_int("gen_steps", &Config::gen, &GenerationConfig::steps);
        add_sub_float("gen_step_size", &Config::gen, &GenerationConfig::step_size);
        add_sub_int("gen_quantize_every", &Config::gen, &GenerationConfig::quantize_every);
        add_sub_int("gen_record_every", &Config::gen, &GenerationConfig::record_every);
        f["gen_seed"] = {[](Config& c, const std::string& v) {
                             c.gen.seed = static_cast<std::uint64_t>(to_long("gen_seed", v));
                         },
                         [](const Config& c) { return std::to_string(c.gen.seed); }};
        return f;
    }();
    return fields;
}

}  // namespace detail

inline void config_set(Config& cfg, const std::string& key, const std::string& value) {
    const auto& fields = detail::config_fields();
    auto it = fields.find(key);
    if (it == fields.end()) throw ConfigError("config: unknown key '" + key + "'");
    it->second.set(cfg, value);
}

// Parse flat `key = value` text: one pair per line, '#' comments, blank lines.
inline Config parse_config_text(const std::string& text, Config base = {}) {
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        const std::string stripped = trim(line);
        if (stripped.empty()) continue;
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not key=value: '" + stripped + "'");
        config_set(base, trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    return base;
}

inline Config load_config(const std::string& path, Config base = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream text;
    text << in.rdbuf();
    return parse_config_text(text.str(), std::move(base));
}

// Render every known key, sorted; parsing this text reproduces the config.
inline std::string config_to_text(const Config& cfg) {
    std::string out;
    for (const auto& [key, field] : detail::config_fields())
        out += key + "=" + field.get(cfg) + "\n";
    return out;
}

}  // namespace sonogen
