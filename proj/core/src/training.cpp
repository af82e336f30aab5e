#include "ddpmcd/training.hpp"

#include <algorithm>

#include "ddpmcd/image_io.hpp"
#include "ddpmcd/optim.hpp"

namespace ddpmcd::training {

double PretrainResult::mean_loss(int64_t first, int64_t count) const {
    int64_t n = static_cast<int64_t>(losses.size());
    first = std::clamp<int64_t>(first, 0, n);
    int64_t last = std::clamp<int64_t>(first + count, first, n);
    if (last == first) return 0.0;
    double acc = 0;
    for (int64_t i = first; i < last; ++i) acc += losses[static_cast<size_t>(i)];
    return acc / static_cast<double>(last - first);
}

PretrainResult pretrain_diffusion(denoiser::DenoiserModel& model,
                                  const diffusion::NoiseSchedule& sched,
                                  const PretrainOptions& opt) {
    if (!opt.corpus || opt.corpus_size < 1)
        throw ConfigError("pretrain_diffusion: corpus accessor and size required");
    if (opt.batch < 1) throw ConfigError("pretrain_diffusion: batch must be >= 1");

    auto params = model.named_parameters();
    optim::Adam adam(params, {.lr = opt.lr});
    PretrainResult result;
    result.losses.reserve(static_cast<size_t>(opt.steps));

    for (int64_t step = 0; step < opt.steps; ++step) {
        Rng rng(mix_seed(opt.seed, 0x7072657472ULL, static_cast<uint64_t>(step)));
        std::vector<Tensor> xts, epss;
        std::vector<int> ts;
        for (int b = 0; b < opt.batch; ++b) {
            Tensor x0 = image::to_diffusion_range(opt.corpus(rng.uniform_int(0, opt.corpus_size - 1)));
            auto target = diffusion::training_step_target(x0, sched, rng);
            xts.push_back(target.xt);
            epss.push_back(target.eps);
            ts.push_back(target.t);
        }
        Tensor xt = nn::stack(xts);
        Tensor eps = nn::stack(epss);

        Tensor loss = mse_loss(model.forward(xt, ts), eps);
        loss.backward();
        optim::clip_grad_norm(params, opt.clip_norm);
        double lr_now = optim::lr_warmup_then_constant(step, opt.warmup_steps, opt.lr);
        adam.step(lr_now);
        adam.zero_grad();

        result.losses.push_back(static_cast<float>(loss.item()));
        if (opt.on_step) opt.on_step(step, loss.item(), lr_now);
    }
    return result;
}

}  // namespace ddpmcd::training
