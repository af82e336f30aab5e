#include "commands.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "ddpmcd/checkpoint.hpp"
#include "ddpmcd/image_io.hpp"
#include "ddpmcd/training.hpp"

namespace ddpmcd::cli {

namespace fs = std::filesystem;

Logger::Logger(const fs::path& file) : file_(file) {
    if (!file_) throw DataError("cannot open log file " + file.string());
}

void Logger::line(const std::string& msg) {
    std::cout << msg << "\n";
    file_ << msg << "\n";
    file_.flush();
}

namespace {

std::string timestamp() {
    auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof(buf), "%Y%m%d-%H%M%S", &tm);
    return buf;
}

fs::path output_root() {
    if (const char* env = std::getenv("DDPMCD_OUT_ROOT")) return fs::path(env);
    return fs::path("runs");
}

config::IniFile overrides_to_ini(const std::vector<std::string>& overrides) {
    config::IniFile ini;
    for (const auto& o : overrides) {
        auto eq = o.find('=');
        auto dot = o.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw ConfigError("--set expects section.key=value, got '" + o + "'");
        ini.set(o.substr(0, dot), o.substr(dot + 1, eq - dot - 1), o.substr(eq + 1));
    }
    return ini;
}

}  // namespace

RunContext open_run(const std::string& command, const CommonArgs& args) {
    config::RunConfig cfg = config::RunConfig::from_profile(args.profile);
    if (!args.config_file.empty()) cfg.apply_ini(config::IniFile::parse_file(args.config_file));
    cfg.apply_ini(overrides_to_ini(args.overrides));
    if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
    cfg.validate();

    fs::path out = args.out_dir.empty() ? output_root() / (command + "-" + timestamp())
                                        : fs::path(args.out_dir);
    for (int suffix = 2; fs::exists(out) && args.out_dir.empty(); ++suffix)
        out = output_root() / (command + "-" + timestamp() + "-" + std::to_string(suffix));
    fs::create_directories(out);

    RunContext ctx;
    ctx.cfg = cfg;
    ctx.out = out;
    ctx.log = std::make_shared<Logger>(out / "log.txt");
    cfg.save(out / "config.ini");
    ctx.log->line("[" + command + "] output dir: " + out.string());
    return ctx;
}

void mark_failed(const RunContext& ctx, const std::string& reason) {
    std::ofstream f(ctx.out / "FAILED");
    f << reason << "\n";
}

namespace {

// Runs the body with the FAILED-marker contract.
template <typename Fn>
int guarded(RunContext& ctx, Fn&& fn) {
    try {
        fn();
        return 0;
    } catch (const std::exception& e) {
        mark_failed(ctx, e.what());
        throw;
    }
}

Tensor corpus_image(const config::RunConfig& cfg, int64_t index,
                    const std::vector<data::CdSample>* manifest_pool) {
    if (!manifest_pool) return data::synth_pretrain_image(cfg.image_size, cfg.data_seed, index);
    const auto& s = (*manifest_pool)[static_cast<size_t>(index / 2) % manifest_pool->size()];
    return index % 2 == 0 ? s.img_a : s.img_b;
}

}  // namespace

std::vector<data::CdSample> load_split(const config::RunConfig& cfg, const std::string& split) {
    if (cfg.data_kind == "synth") {
        int64_t n = 0, offset = 0;
        if (split == "train") {
            n = cfg.synth_train;
        } else if (split == "val") {
            n = cfg.synth_val;
            offset = cfg.synth_train;
        } else if (split == "test") {
            n = cfg.synth_test;
            offset = cfg.synth_train + cfg.synth_val;
        } else {
            throw ConfigError("unknown split '" + split + "'");
        }
        std::vector<data::CdSample> out;
        out.reserve(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i)
            out.push_back(data::synth_cd_sample(cfg.patch_size, cfg.change_rate, cfg.data_seed,
                                                offset + i));
        return out;
    }
    auto manifest = data::load_manifest(cfg.data_root);
    std::vector<data::CdSample> out;
    for (const auto& id : manifest.split(split)) {
        auto sample = data::load_sample(manifest, id);
        for (auto& patch : data::patchify(sample, cfg.patch_size)) out.push_back(std::move(patch));
    }
    return out;
}

int cmd_pretrain(const CommonArgs& args) {
    RunContext ctx = open_run("pretrain", args);
    return guarded(ctx, [&] {
        const auto& cfg = ctx.cfg;
        auto sched = cfg.make_schedule();
        denoiser::DenoiserModel model(cfg.denoiser_config(), cfg.seed);
        ctx.log->line("denoiser parameters: " + std::to_string(model.parameter_count()));

        std::vector<data::CdSample> manifest_pool;
        const std::vector<data::CdSample>* pool = nullptr;
        if (cfg.data_kind == "manifest") {
            manifest_pool = load_split(cfg, "train");
            pool = &manifest_pool;
        }
        int64_t corpus_n = pool ? static_cast<int64_t>(manifest_pool.size()) * 2 : cfg.corpus_size;

        std::ofstream loss_csv(ctx.out / "loss.csv");
        loss_csv << "step,loss,lr\n";

        training::PretrainOptions opt;
        opt.steps = cfg.pretrain_steps;
        opt.batch = cfg.pretrain_batch;
        opt.lr = cfg.pretrain_lr;
        opt.warmup_steps = cfg.warmup_steps;
        opt.clip_norm = cfg.clip_norm;
        opt.seed = cfg.seed;
        opt.corpus = [&](int64_t i) { return corpus_image(cfg, i, pool); };
        opt.corpus_size = corpus_n;
        opt.on_step = [&](int64_t step, double loss, double lr) {
            loss_csv << step << "," << loss << "," << lr << "\n";
            if (step % cfg.log_every == 0 || step + 1 == cfg.pretrain_steps)
                ctx.log->line("step " + std::to_string(step) + "  loss " + std::to_string(loss) +
                              "  lr " + std::to_string(lr));
            if (cfg.checkpoint_every > 0 && step > 0 && step % cfg.checkpoint_every == 0)
                checkpoint::save_denoiser(ctx.out / ("checkpoint-" + std::to_string(step) + ".ckpt"),
                                          model, sched, step);
        };

        auto result = training::pretrain_diffusion(model, sched, opt);
        checkpoint::save_denoiser(ctx.out / "model.ckpt", model, sched, cfg.pretrain_steps);

        int64_t window = std::min<int64_t>(50, cfg.pretrain_steps);
        double initial = result.mean_loss(0, window);
        double final_loss = result.mean_loss(cfg.pretrain_steps - window, window);
        ctx.log->line("running loss: initial " + std::to_string(initial) + " -> final " +
                      std::to_string(final_loss));
        ctx.log->line("checkpoint: " + (ctx.out / "model.ckpt").string());
    });
}

int cmd_sample(const CommonArgs& args, const std::string& ckpt_path, int n) {
    RunContext ctx = open_run("sample", args);
    return guarded(ctx, [&] {
        auto ld = checkpoint::load_denoiser(ckpt_path);
        int size = ctx.cfg.image_size;
        Rng rng(mix_seed(ctx.cfg.seed, 0x73616d706cULL));
        diffusion::EpsModel eps_model = [&](const Tensor& xt, int t) {
            return ld.model->forward(xt, std::vector<int>(static_cast<size_t>(xt.dim(0)), t));
        };
        ctx.log->line("sampling " + std::to_string(n) + " images at " + std::to_string(size) + "x" +
                      std::to_string(size) + " (T=" + std::to_string(ld.sched.T) + ")");
        Tensor batch = diffusion::sample(eps_model, {n, 3, size, size}, ld.sched, rng);
        for (int i = 0; i < n; ++i) {
            Tensor img = zeros({3, size, size});
            auto src = batch.data<float>();
            auto dst = img.mutable_data<float>();
            std::copy(src.begin() + static_cast<int64_t>(i) * img.numel(),
                      src.begin() + static_cast<int64_t>(i + 1) * img.numel(), dst.begin());
            image::write_png(ctx.out / ("sample-" + std::to_string(i) + ".png"),
                             image::to_image(image::from_diffusion_range(img)));
        }
        ctx.log->line("wrote " + std::to_string(n) + " samples to " + ctx.out.string());
    });
}

int cmd_extract_features(const CommonArgs& args, const std::string& ckpt_path,
                         const std::string& img_a_path, const std::string& img_b_path,
                         const std::string& cache_dir) {
    RunContext ctx = open_run("extract-features", args);
    return guarded(ctx, [&] {
        auto ld = checkpoint::load_denoiser(ckpt_path);
        auto tset = ctx.cfg.timestep_set();
        tset.validate_against(ld.sched);

        Tensor a = image::to_tensor(image::read_png(img_a_path));
        Tensor b = image::to_tensor(image::read_png(img_b_path));
        if (a.shape() != b.shape())
            throw DataError("extract-features: image shapes differ: " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));

        auto [stack_a, stack_b] =
            features::extract_pair(*ld.model, image::to_diffusion_range(a),
                                   image::to_diffusion_range(b), tset, ld.sched,
                                   ctx.cfg.noise_seed);

        std::string cache = !cache_dir.empty() ? cache_dir : ctx.cfg.cache_dir;
        if (!cache.empty()) {
            fs::create_directories(cache);
            auto pa = features::cache_path(cache, fs::path(img_a_path).stem().string() + "_A", tset);
            auto pb = features::cache_path(cache, fs::path(img_b_path).stem().string() + "_B", tset);
            features::save_stack(pa, stack_a);
            features::save_stack(pb, stack_b);
            ctx.log->line("feature cache: " + pa.string() + ", " + pb.string());
        }

        auto dump = [&](const features::FeatureStack& stack, const std::string& tag) {
            for (size_t k = 0; k < stack.per_timestep.size(); ++k)
                for (size_t s = 0; s < stack.per_timestep[k].size(); ++s) {
                    auto name = tag + "-t" + std::to_string(stack.meta.tset[k]) + "-s" +
                                std::to_string(s) + ".png";
                    image::write_png(ctx.out / name,
                                     image::channel_mean_image(stack.per_timestep[k][s]));
                }
        };
        dump(stack_a, "a");
        dump(stack_b, "b");
        auto diffs = cd_head::feature_difference(stack_a, stack_b);
        for (size_t s = 0; s < diffs.size(); ++s)
            image::write_png(ctx.out / ("diff-s" + std::to_string(s) + ".png"),
                             image::channel_mean_image(diffs[s]));
        ctx.log->line("wrote channel-mean feature maps for " + std::to_string(tset.size()) +
                      " timesteps x 5 scales");
    });
}

namespace {
void log_epoch_csv(std::ofstream& csv, int epoch, double loss, double lr,
                   const metrics::Scores& val) {
    csv << epoch << "," << loss << "," << lr << "," << val.f1 << "," << val.iou << "," << val.oa
        << "\n";
    csv.flush();
}
}  // namespace

int cmd_train_cd(const CommonArgs& args, const std::string& ckpt_path) {
    RunContext ctx = open_run("train-cd", args);
    return guarded(ctx, [&] {
        const auto& cfg = ctx.cfg;
        auto ld = checkpoint::load_denoiser(ckpt_path);
        auto tset = cfg.timestep_set();
        tset.validate_against(ld.sched);

        auto train = load_split(cfg, "train");
        auto val = load_split(cfg, "val");
        ctx.log->line("train pairs: " + std::to_string(train.size()) + ", val pairs: " +
                      std::to_string(val.size()));

        auto head_cfg = cd_head::CdHeadConfig::for_features(ld.model->config(), tset.size());
        head_cfg.reduction = cfg.reduction;
        head_cfg.proj_width = cfg.proj_width;
        head_cfg.fuse_width = cfg.fuse_width;
        cd_head::CdHead head(head_cfg, cfg.seed);
        ctx.log->line("head parameters: " + std::to_string(head.parameter_count()) + " (backbone " +
                      std::to_string(ld.model->parameter_count()) + ")");

        std::ofstream csv(ctx.out / "epochs.csv");
        csv << "epoch,train_loss,lr,val_f1,val_iou,val_oa\n";

        cd_head::CdTrainOptions opt;
        opt.epochs = cfg.cd_epochs;
        opt.batch = cfg.cd_batch;
        opt.lr = cfg.cd_lr;
        opt.weight_decay = cfg.cd_weight_decay;
        opt.noise_seed = cfg.noise_seed;
        opt.threshold = cfg.threshold;
        opt.on_epoch = [&](int epoch, double loss, double lr, const metrics::Scores& v) {
            log_epoch_csv(csv, epoch, loss, lr, v);
            ctx.log->line("epoch " + std::to_string(epoch) + "  loss " + std::to_string(loss) +
                          "  lr " + std::to_string(lr) + "  val " + metrics::format_row("", v));
        };

        auto result = cd_head::train_cd(head, *ld.model, train, val, tset, ld.sched, opt);
        ctx.log->line("best epoch: " + std::to_string(result.best_epoch));
        cd_head::save_cd_head(ctx.out / "head.ckpt", head, tset, ld.model->parameter_hash(),
                              cfg.noise_seed);
        ctx.log->line("head checkpoint: " + (ctx.out / "head.ckpt").string());
    });
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt_path, const std::string& head_path,
             const std::string& split_flag) {
    RunContext ctx = open_run("eval", args);
    return guarded(ctx, [&] {
        const auto& cfg = ctx.cfg;
        auto ld = checkpoint::load_denoiser(ckpt_path);
        auto lh = cd_head::load_cd_head(head_path);
        if (lh.backbone_hash != ld.model->parameter_hash())
            throw DataError("eval: head was trained against a different denoiser checkpoint");

        std::string split = split_flag.empty() ? cfg.eval_split : split_flag;
        auto samples = load_split(cfg, split);
        ctx.log->line("evaluating " + std::to_string(samples.size()) + " pairs from split '" +
                      split + "'");

        fs::create_directories(ctx.out / "pred");
        metrics::ConfusionCounts counts;
        for (size_t i = 0; i < samples.size(); ++i) {
            auto map = cd_head::predict(*lh.head, *ld.model, samples[i].img_a, samples[i].img_b,
                                        lh.tset, ld.sched, lh.noise_seed, i, cfg.threshold);
            metrics::accumulate(counts, map.labels, samples[i].mask);
            image::write_png(ctx.out / "pred" / samples[i].id, image::mask_to_image(map.labels));
        }

        auto s = metrics::scores(counts);
        ctx.log->line(metrics::table_header("split"));
        ctx.log->line(metrics::format_row(split, s));
        std::string json = metrics::to_json(counts);
        std::ofstream(ctx.out / "metrics.json") << json << "\n";
        ctx.log->line(json);
    });
}

int cmd_ablate(const CommonArgs& args, const std::string& ckpt_path,
               const std::vector<std::string>& tset_strings) {
    RunContext ctx = open_run("ablate-timesteps", args);
    return guarded(ctx, [&] {
        const auto& cfg = ctx.cfg;
        if (tset_strings.empty()) throw ConfigError("ablate-timesteps: no timestep sets given");
        auto ld = checkpoint::load_denoiser(ckpt_path);

        auto train = load_split(cfg, "train");
        auto val = load_split(cfg, "val");
        auto test = load_split(cfg, cfg.eval_split);

        nlohmann::json rows = nlohmann::json::array();
        ctx.log->line(metrics::table_header("timesteps"));
        for (const auto& ts_str : tset_strings) {
            auto tset = features::TimestepSet::parse(ts_str);
            tset.validate_against(ld.sched);

            auto head_cfg = cd_head::CdHeadConfig::for_features(ld.model->config(), tset.size());
            head_cfg.reduction = cfg.reduction;
            head_cfg.proj_width = cfg.proj_width;
            head_cfg.fuse_width = cfg.fuse_width;
            cd_head::CdHead head(head_cfg, cfg.seed);

            cd_head::CdTrainOptions opt;
            opt.epochs = cfg.cd_epochs;
            opt.batch = cfg.cd_batch;
            opt.lr = cfg.cd_lr;
            opt.weight_decay = cfg.cd_weight_decay;
            opt.noise_seed = cfg.noise_seed;
            opt.threshold = cfg.threshold;
            cd_head::train_cd(head, *ld.model, train, val, tset, ld.sched, opt);

            auto counts = cd_head::evaluate(head, *ld.model, test, tset, ld.sched, cfg.noise_seed,
                                            cfg.threshold);
            auto s = metrics::scores(counts);
            ctx.log->line(metrics::format_row(tset.str(), s));
            rows.push_back({{"tset", tset.ts}, {"f1", s.f1}, {"iou", s.iou}, {"oa", s.oa}});
            cd_head::save_cd_head(ctx.out / ("head-t" + tset.str() + ".ckpt"), head, tset,
                                  ld.model->parameter_hash(), cfg.noise_seed);
        }
        std::ofstream(ctx.out / "ablation.json") << rows.dump(2) << "\n";
        ctx.log->line("ablation table written to " + (ctx.out / "ablation.json").string());
    });
}

int cmd_make_data(const CommonArgs& args, const std::string& root) {
    RunContext ctx = open_run("make-data", args);
    return guarded(ctx, [&] {
        const auto& cfg = ctx.cfg;
        auto train = load_split(cfg, "train");
        auto val = load_split(cfg, "val");
        auto test = load_split(cfg, "test");
        fs::path target = root.empty() ? ctx.out / "dataset" : fs::path(root);
        data::save_dataset(target, train, val, test);
        ctx.log->line("dataset written to " + target.string() + " (train " +
                      std::to_string(train.size()) + ", val " + std::to_string(val.size()) +
                      ", test " + std::to_string(test.size()) + ")");
    });
}

}  // namespace ddpmcd::cli
