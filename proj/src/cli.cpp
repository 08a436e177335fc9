#include "promptvid/cli.hpp"

#include <CLI11.hpp>

namespace promptvid {

int cli_main(std::vector<std::string> args) {
    CLI::App app{"promptvid: image-prompted video generation at desk scale"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, stage, in_ckpt, out_ckpt, ckpt, prompt_path,
        caption, out_prefix;
    std::uint64_t seed = 0;
    bool text_only = false, emit_frames = false;
    std::vector<std::string> ckpt_specs;

    auto* dg = app.add_subcommand("datagen", "synthesize a filtered, split clip dataset");
    dg->add_option("--config", config_path, "run config file")->required();
    dg->add_option("--out", out_dir, "output directory")->required();

    auto* tr = app.add_subcommand("train", "train one stage and write a checkpoint");
    tr->add_option("--config", config_path, "run config file")->required();
    tr->add_option("--data", data_dir, "dataset directory from datagen")->required();
    tr->add_option("--stage", stage, "stage1 | stage2 | unified | refine")->required();
    tr->add_option("--in", in_ckpt, "input checkpoint (required for stage2/refine)");
    tr->add_option("--out", out_ckpt, "output checkpoint path")->required();

    auto* sm = app.add_subcommand("sample", "generate one clip from a checkpoint");
    sm->add_option("--config", config_path, "run config file")->required();
    sm->add_option("--ckpt", ckpt, "checkpoint path")->required();
    sm->add_option("--prompt", prompt_path, "prompt image tensor file");
    sm->add_option("--caption", caption, "caption text")->required();
    auto* seed_opt = sm->add_option("--seed", seed, "generation seed (default sample_seed)");
    sm->add_option("--out", out_prefix, "output path prefix")->required();
    sm->add_flag("--text-only", text_only, "ignore the prompt image");

    auto* ev = app.add_subcommand("eval", "score checkpoints on the held-out split");
    ev->add_option("--config", config_path, "run config file")->required();
    ev->add_option("--data", data_dir, "dataset directory from datagen")->required();
    ev->add_option("--ckpt", ckpt_specs, "checkpoint as name=path (repeatable)")->required();
    ev->add_option("--out", out_dir, "report directory")->required();
    ev->add_flag("--emit-frames", emit_frames, "write a frame-grid pixmap per generation");

    auto* in = app.add_subcommand("inspect", "print a checkpoint summary");
    in->add_option("ckpt", ckpt, "checkpoint path")->required();

    std::reverse(args.begin(), args.end());
    try {
        app.parse(std::move(args));
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (app.got_subcommand(dg)) {
            cmd_datagen(load_run_config(config_path), out_dir, std::cout);
        } else if (app.got_subcommand(tr)) {
            cmd_train(load_run_config(config_path), {stage, data_dir, in_ckpt, out_ckpt},
                      std::cout);
        } else if (app.got_subcommand(sm)) {
            const RunConfig cfg = load_run_config(config_path);
            SampleArgs a;
            a.ckpt = ckpt;
            a.prompt_path = prompt_path;
            a.caption = caption;
            a.out_prefix = out_prefix;
            a.seed = seed_opt->count() ? seed : cfg.sample_seed;
            a.text_only = text_only;
            cmd_sample(cfg, a, std::cout);
        } else if (app.got_subcommand(ev)) {
            EvalArgs a;
            a.data_dir = data_dir;
            a.ckpts = parse_ckpt_specs(ckpt_specs);
            a.out_dir = out_dir;
            a.emit_frames = emit_frames;
            cmd_eval(load_run_config(config_path), a, std::cout);
        } else if (app.got_subcommand(in)) {
            std::cout << inspect_checkpoint(ckpt);
        }
        return 0;
    } catch (const Error& e) {
        std::cerr << "error [" << clidetail::kind_name(e.kind()) << "]: " << e.what() << '\n';
        return clidetail::exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    }
}

} // namespace promptvid
