// Command-line driver: pretrain-image | train-audio | generate | evaluate |
// inspect-ckpt. Configuration is a flat key=value file; flags override file
// values. Exit codes: 0 success, 1 validation/usage error, 2 I/O or
// integrity error.

#include <cstdint>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sonogen/pipeline.hpp"

namespace {

using namespace sonogen;

std::vector<std::uint64_t> parse_seed_list(const std::string& text, std::uint64_t base_seed) {
    if (text.empty()) return {base_seed, base_seed + 1, base_seed + 2};
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(std::stoull(part));
    if (out.empty()) throw ConfigError("--seeds: no seeds given");
    return out;
}

struct CommonFlags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<int> steps;
    std::optional<int> queue_size;
    std::optional<float> momentum;
    std::optional<int> topk;
    std::optional<int> trials;

    void attach(CLI::App& cmd) {
        cmd.add_option("--config", config_path, "key=value config file");
        cmd.add_option("--seed", seed, "master seed override");
        cmd.add_option("--steps", steps, "step-count override for this command");
        cmd.add_option("--queue-size", queue_size, "negative-queue capacity override");
        cmd.add_option("--momentum", momentum, "key-encoder momentum override");
        cmd.add_option("--topk", topk, "retrieval top-k override");
        cmd.add_option("--trials", trials, "trial-count override");
    }

    // Flags win over the config file. `steps_key` names which step count
    // --steps overrides for the active subcommand.
    Config resolve(const std::string& steps_key) const {
        Config cfg = config_path.empty() ? Config{} : load_config(config_path);
        if (seed) cfg.seed = *seed;
        if (steps) config_set(cfg, steps_key, std::to_string(*steps));
        if (queue_size) cfg.queue_size = *queue_size;
        if (momentum) cfg.momentum = *momentum;
        if (topk) cfg.topk = *topk;
        if (trials) cfg.trials = *trials;
        cfg.validate();
        return cfg;
    }
};

int run(int argc, char** argv) {
    CLI::App app{"audio-to-image contrastive training and generation"};
    app.require_subcommand(1);

    // pretrain-image
    auto* pre = app.add_subcommand("pretrain-image",
                                   "train and freeze the image tower and image codec");
    CommonFlags pre_flags;
    pre_flags.attach(*pre);
    std::string pre_out = "image.ckpt";
    pre->add_option("--out", pre_out, "output checkpoint path");

    // train-audio
    auto* tra = app.add_subcommand("train-audio", "contrastive audio-tower training");
    CommonFlags tra_flags;
    tra_flags.attach(*tra);
    std::string tra_in, tra_out = "trained.ckpt";
    tra->add_option("ckpt", tra_in, "frozen-image-tower checkpoint")->required();
    tra->add_option("--out", tra_out, "output checkpoint path");

    // generate
    auto* gen = app.add_subcommand("generate", "optimize an image for an audio clip");
    CommonFlags gen_flags;
    gen_flags.attach(*gen);
    std::string gen_ckpt, gen_wav, gen_out = ".";
    int gen_class = -1;
    std::uint64_t gen_sample_seed = 0;
    gen->add_option("ckpt", gen_ckpt, "trained checkpoint")->required();
    gen->add_option("--wav", gen_wav, "input WAV file (PCM16 mono/stereo, 16 kHz)");
    gen->add_option("--class", gen_class, "synthesize the input clip for this class id");
    gen->add_option("--sample-seed", gen_sample_seed, "seed for --class synthesis");
    gen->add_option("--out", gen_out, "output directory");

    // evaluate
    auto* eva = app.add_subcommand("evaluate", "held-out retrieval and 2AFC report");
    CommonFlags eva_flags;
    eva_flags.attach(*eva);
    std::string eva_ckpt, eva_seeds;
    eva->add_option("ckpt", eva_ckpt, "trained checkpoint")->required();
    eva->add_option("--seeds", eva_seeds, "comma-separated trial seeds (default: seed,seed+1,seed+2)");

    // inspect-ckpt
    auto* ins = app.add_subcommand("inspect-ckpt", "print checkpoint version, config, and tensors");
    std::string ins_ckpt;
    ins->add_option("ckpt", ins_ckpt, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    if (pre->parsed()) {
        Config cfg = pre_flags.resolve("pretrain_steps");
        auto report = cmd_pretrain_image(cfg, pre_out, &std::cout);
        std::cout << "wrote " << pre_out << " train_acc=" << report.train_accuracy
                  << " heldout_acc=" << report.heldout_accuracy << "\n";
    } else if (tra->parsed()) {
        std::vector<std::pair<std::string, std::string>> overrides;
        if (!tra_flags.config_path.empty())
            throw ConfigError("train-audio: config comes from the checkpoint; use flag overrides");
        if (tra_flags.seed) overrides.emplace_back("seed", std::to_string(*tra_flags.seed));
        if (tra_flags.steps) overrides.emplace_back("train_steps", std::to_string(*tra_flags.steps));
        if (tra_flags.queue_size)
            overrides.emplace_back("queue_size", std::to_string(*tra_flags.queue_size));
        if (tra_flags.momentum)
            overrides.emplace_back("momentum", std::to_string(*tra_flags.momentum));
        if (tra_flags.topk) overrides.emplace_back("topk", std::to_string(*tra_flags.topk));
        if (tra_flags.trials) overrides.emplace_back("trials", std::to_string(*tra_flags.trials));
        auto report = cmd_train_audio(tra_in, tra_out, &std::cout, overrides);
        std::cout << "wrote " << tra_out << " first_loss=" << report.first_loss
                  << " last_loss=" << report.last_loss << " step=" << report.final_step << "\n";
    } else if (gen->parsed()) {
        if (gen_wav.empty() == (gen_class < 0))
            throw ConfigError("generate: pass exactly one of --wav or --class");
        CheckpointData ckpt = load_checkpoint(gen_ckpt);
        Config cfg = parse_config_text(ckpt.config_text);
        std::vector<float> waveform;
        std::string tag;
        if (!gen_wav.empty()) {
            waveform = load_wav(gen_wav, cfg.corpus.sample_rate);
            tag = "wav";
        } else {
            waveform = synth_pair(gen_class, Rng::derive(gen_sample_seed, 0x5A3),
                                  cfg.corpus).waveform;
            tag = "class" + std::to_string(gen_class);
        }
        // gen flags ride through the checkpoint config
        if (gen_flags.steps) cfg.gen.steps = *gen_flags.steps;
        if (gen_flags.seed) cfg.gen.seed = *gen_flags.seed;
        cfg.validate();
        CheckpointData with_cfg = ckpt;
        with_cfg.config_text = config_to_text(cfg);
        auto outcome = cmd_generate(with_cfg, waveform, gen_out, tag, &std::cout);
        std::cout << "wrote " << outcome.image_path << " and " << outcome.trace_path << "\n";
    } else if (eva->parsed()) {
        CheckpointData ckpt = load_checkpoint(eva_ckpt);
        Config cfg = parse_config_text(ckpt.config_text);
        const int trials = eva_flags.trials ? *eva_flags.trials : cfg.trials;
        const auto seeds =
            parse_seed_list(eva_seeds, eva_flags.seed ? *eva_flags.seed : cfg.seed);
        EvalReport report = cmd_evaluate(eva_ckpt, trials, seeds);
        std::cout << report_to_text(report);
    } else if (ins->parsed()) {
        CheckpointData ckpt = load_checkpoint(ins_ckpt);
        std::cout << "version=" << kCheckpointVersion << "\n";
        std::cout << "--- config ---\n" << ckpt.config_text << "--- tensors ---\n";
        for (const auto& [name, tensor] : ckpt.tensors)
            std::cout << name << " " << shape_str(tensor.shape()) << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const sonogen::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const sonogen::IntegrityError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const sonogen::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const sonogen::UnsupportedFormatError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
