// gtok: gesture-token synthesis pipeline. Subcommands cover corpus
// generation, two-stage training, long-form synthesis, metric evaluation and
// codebook inspection; exit codes follow the documented contract
// (0 ok, 2 io, 3 missing prerequisite, 4 incompatible checkpoint,
// 5 insufficient data, 1 anything else).

#include <CLI11.hpp>

#include "gtok/commands.hpp"

int main(int argc, char** argv) {
    CLI::App app{"gesture token pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::vector<std::string> sets;
    app.add_option("--config", config_path, "config file (key=value lines)");
    app.add_option("--set", sets, "override a config key (key=value), repeatable");

    auto* gen = app.add_subcommand("gen-corpus", "write a synthetic speech-gesture corpus");
    std::string gen_out;
    gen->add_option("--out", gen_out, "output directory")->required();

    auto* train = app.add_subcommand("train", "train stage 1, stage 2 or the metric feature extractor");
    std::string train_stage, train_corpus, train_out, train_vae;
    train->add_option("--stage", train_stage, "1, 2 or feat")->required();
    train->add_option("--corpus", train_corpus, "corpus directory")->required();
    train->add_option("--out", train_out, "output directory")->required();
    train->add_option("--vae", train_vae, "stage-1 checkpoint (required for stage 2)");

    auto* synth = app.add_subcommand("synth", "synthesize gestures for a speech input");
    std::string synth_vae, synth_prior, synth_speech, synth_out, synth_text;
    std::int64_t synth_seed = -1, synth_topk = -1;
    synth->add_option("--vae", synth_vae, "stage-1 checkpoint")->required();
    synth->add_option("--prior", synth_prior, "stage-2 checkpoint")->required();
    synth->add_option("--speech", synth_speech, "speech input motion file (audio + text)")->required();
    synth->add_option("--out", synth_out, "output motion file")->required();
    synth->add_option("--text", synth_text, "also dump the output as readable text");
    synth->add_option("--seed", synth_seed, "override the run seed");
    synth->add_option("--top-k", synth_topk, "override sample.top_k");

    auto* eval = app.add_subcommand("eval", "compute FGD, diversity, beat consistency and wrist-speed ratio");
    std::string eval_feat, eval_ref, eval_synth, eval_out;
    eval->add_option("--feat", eval_feat, "feature-extractor checkpoint")->required();
    eval->add_option("--reference", eval_ref, "reference corpus directory")->required();
    eval->add_option("--synth", eval_synth, "synthesized corpus directory")->required();
    eval->add_option("--out", eval_out, "report output path")->required();

    auto* inspect = app.add_subcommand("inspect", "decode per-code motion snippets and usage stats");
    std::string ins_vae, ins_out;
    inspect->add_option("--vae", ins_vae, "stage-1 checkpoint")->required();
    inspect->add_option("--out", ins_out, "output directory")->required();

    CLI11_PARSE(app, argc, argv);
    gtok::cli::env_threads();

    return gtok::cli::run_guarded([&] {
        gtok::RunConfig cfg = gtok::cli::resolve_config(config_path, sets);
        if (synth_seed >= 0) {
            cfg.seed = static_cast<std::uint64_t>(synth_seed);
        }
        if (synth_topk >= 1) {
            gtok::config_set(cfg, "sample.top_k", std::to_string(synth_topk));
            gtok::config_validate(cfg);
        }
        if (gen->parsed()) {
            gtok::cli::cmd_gen_corpus(cfg, gen_out);
        } else if (train->parsed()) {
            gtok::cli::cmd_train(cfg, train_stage, train_corpus, train_out, train_vae);
        } else if (synth->parsed()) {
            gtok::cli::cmd_synth(cfg, synth_vae, synth_prior, synth_speech, synth_out, synth_text);
        } else if (eval->parsed()) {
            gtok::cli::cmd_eval(cfg, eval_feat, eval_ref, eval_synth, eval_out);
        } else if (inspect->parsed()) {
            gtok::cli::cmd_inspect(ins_vae, ins_out);
        }
    });
}
