#include <CLI11.hpp>

#include <iostream>

#include "commands.hpp"
#include "ddpmcd/errors.hpp"

namespace {

void add_common(CLI::App* cmd, ddpmcd::cli::CommonArgs& args) {
    cmd->add_option("--config", args.config_file, "Config file (INI sections)");
    cmd->add_option("--profile", args.profile, "Built-in profile: desk|full")->default_str("desk");
    cmd->add_option("--out", args.out_dir, "Output directory (default: timestamped under $DDPMCD_OUT_ROOT or ./runs)");
    cmd->add_option("--set", args.overrides, "Override a config value, e.g. --set cd.epochs=5");
    cmd->add_option("--seed", args.seed, "Run seed (overrides config)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Diffusion-feature change detection pipeline"};
    app.require_subcommand(1);

    ddpmcd::cli::CommonArgs args;
    std::string checkpoint, head, img_a, img_b, split, cache_dir, data_root;
    std::vector<std::string> tsets;
    int n_samples = 8;

    auto* pretrain = app.add_subcommand("pretrain", "Train the diffusion model on unlabeled images");
    add_common(pretrain, args);

    auto* sample = app.add_subcommand("sample", "Generate images from a trained diffusion model");
    add_common(sample, args);
    sample->add_option("--checkpoint", checkpoint, "Denoiser checkpoint")->required();
    sample->add_option("-n,--num", n_samples, "Number of images");

    auto* extract = app.add_subcommand("extract-features",
                                       "Write multi-scale feature maps for one image pair");
    add_common(extract, args);
    extract->add_option("--checkpoint", checkpoint, "Denoiser checkpoint")->required();
    extract->add_option("--image-a", img_a, "Pre-change image (PNG)")->required();
    extract->add_option("--image-b", img_b, "Post-change image (PNG)")->required();
    extract->add_option("--cache-dir", cache_dir, "Feature cache directory");

    auto* train_cd = app.add_subcommand("train-cd", "Train the change-detection head");
    add_common(train_cd, args);
    train_cd->add_option("--checkpoint", checkpoint, "Denoiser checkpoint")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a trained head on a dataset split");
    add_common(eval, args);
    eval->add_option("--checkpoint", checkpoint, "Denoiser checkpoint")->required();
    eval->add_option("--head", head, "CD head checkpoint")->required();
    eval->add_option("--split", split, "Split to evaluate (default from config)");

    auto* ablate = app.add_subcommand("ablate-timesteps",
                                      "Train one head per timestep set and compare");
    add_common(ablate, args);
    ablate->add_option("--checkpoint", checkpoint, "Denoiser checkpoint")->required();
    ablate->add_option("--tsets", tsets, "Timestep sets, e.g. --tsets 10 20 10,20,80")->required();

    auto* make_data = app.add_subcommand("make-data", "Write the synthetic dataset to disk");
    add_common(make_data, args);
    make_data->add_option("--root", data_root, "Target dataset directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (pretrain->parsed()) return ddpmcd::cli::cmd_pretrain(args);
        if (sample->parsed()) return ddpmcd::cli::cmd_sample(args, checkpoint, n_samples);
        if (extract->parsed())
            return ddpmcd::cli::cmd_extract_features(args, checkpoint, img_a, img_b, cache_dir);
        if (train_cd->parsed()) return ddpmcd::cli::cmd_train_cd(args, checkpoint);
        if (eval->parsed()) return ddpmcd::cli::cmd_eval(args, checkpoint, head, split);
        if (ablate->parsed()) return ddpmcd::cli::cmd_ablate(args, checkpoint, tsets);
        if (make_data->parsed()) return ddpmcd::cli::cmd_make_data(args, data_root);
    } catch (const ddpmcd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const ddpmcd::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 1;
}
