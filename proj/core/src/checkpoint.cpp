#include "ddpmcd/checkpoint.hpp"

#include <cstring>
#include <fstream>

namespace ddpmcd::checkpoint {

namespace {
void write_u64_le(std::ostream& os, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(buf), 8);
}

uint64_t read_u64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}
}  // namespace

void save(const std::filesystem::path& path, const std::vector<nn::NamedParam>& tensors,
          const nlohmann::json& meta) {
    nlohmann::json header = meta;
    auto& list = header["tensors"] = nlohmann::json::array();
    for (const auto& t : tensors) {
        if (t.tensor.dtype() != DType::f32)
            throw ContractError("checkpoint::save: tensor '" + t.name + "' is not f32");
        list.push_back({{"name", t.name}, {"shape", t.tensor.shape()}, {"dtype", "f32"}});
    }
    std::string header_str = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("checkpoint::save: cannot open " + path.string());
    os.write(kMagic, sizeof(kMagic));
    write_u64_le(os, header_str.size());
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& t : tensors) {
        auto d = t.tensor.data<float>();
        // Buffers are little-endian on every supported target.
        os.write(reinterpret_cast<const char*>(d.data()),
                 static_cast<std::streamsize>(d.size() * sizeof(float)));
    }
    if (!os) throw DataError("checkpoint::save: write failed for " + path.string());
}

Checkpoint load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("checkpoint::load: cannot open " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw DataError("checkpoint::load: " + path.string() + " is not a DDPMCD1 container");
    uint64_t header_len = read_u64_le(is);
    std::string header_str(header_len, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw DataError("checkpoint::load: truncated header in " + path.string());

    Checkpoint ckpt;
    try {
        ckpt.header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint::load: bad JSON header in " + path.string() + ": " + e.what());
    }
    for (const auto& entry : ckpt.header.at("tensors")) {
        std::string name = entry.at("name").get<std::string>();
        Shape shape = entry.at("shape").get<Shape>();
        if (entry.value("dtype", "f32") != "f32")
            throw DataError("checkpoint::load: unsupported dtype for '" + name + "'");
        Tensor t = zeros(shape, DType::f32);
        auto d = t.mutable_data<float>();
        is.read(reinterpret_cast<char*>(d.data()),
                static_cast<std::streamsize>(d.size() * sizeof(float)));
        if (!is) throw DataError("checkpoint::load: truncated buffer '" + name + "' in " + path.string());
        ckpt.tensors.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

nlohmann::json schedule_to_json(const diffusion::NoiseSchedule& sched) {
    return {{"kind", sched.kind},
            {"T", sched.T},
            {"beta_start", sched.beta_start},
            {"beta_end", sched.beta_end}};
}

diffusion::NoiseSchedule schedule_from_json(const nlohmann::json& j) {
    return diffusion::make_schedule(j.at("kind").get<std::string>(), j.at("T").get<int>(),
                                    j.at("beta_start").get<double>(), j.at("beta_end").get<double>());
}

nlohmann::json denoiser_config_to_json(const denoiser::DenoiserConfig& cfg) {
    return {{"in_channels", cfg.in_channels},
            {"base_width", cfg.base_width},
            {"channel_mults", cfg.channel_mults},
            {"bottleneck_attention", cfg.bottleneck_attention},
            {"time_embed_dim", cfg.time_embed_dim}};
}

denoiser::DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
    denoiser::DenoiserConfig cfg;
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.base_width = j.at("base_width").get<int>();
    cfg.channel_mults = j.at("channel_mults").get<std::array<int, denoiser::kNumLevels>>();
    cfg.bottleneck_attention = j.at("bottleneck_attention").get<bool>();
    cfg.time_embed_dim = j.at("time_embed_dim").get<int>();
    return cfg;
}

void save_denoiser(const std::filesystem::path& path, const denoiser::DenoiserModel& model,
                   const diffusion::NoiseSchedule& sched, int64_t training_step) {
    nlohmann::json meta;
    meta["kind"] = "denoiser";
    meta["arch"] = denoiser_config_to_json(model.config());
    meta["schedule"] = schedule_to_json(sched);
    meta["training_step"] = training_step;
    meta["seed"] = model.seed();
    save(path, model.named_parameters(), meta);
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path,
                             const denoiser::DenoiserConfig* expected) {
    auto ckpt = load(path);
    if (ckpt.header.value("kind", "") != "denoiser")
        throw DataError("load_denoiser: " + path.string() + " is not a denoiser checkpoint");
    auto cfg = denoiser_config_from_json(ckpt.header.at("arch"));
    if (expected && !(cfg == *expected))
        throw DataError("load_denoiser: checkpoint architecture does not match the requested config");
    LoadedDenoiser out;
    out.model = std::make_shared<denoiser::DenoiserModel>(cfg, ckpt.header.value("seed", uint64_t{0}));
    std::vector<nn::NamedParam> named;
    named.reserve(ckpt.tensors.size());
    for (auto& [name, tensor] : ckpt.tensors) named.push_back({name, tensor});
    out.model->load_parameters(named);
    out.sched = schedule_from_json(ckpt.header.at("schedule"));
    out.training_step = ckpt.header.value("training_step", int64_t{0});
    return out;
}

}  // namespace ddpmcd::checkpoint
