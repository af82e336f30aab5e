#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "ddpmcd/denoiser.hpp"
#include "ddpmcd/diffusion.hpp"
#include "ddpmcd/nn.hpp"

namespace ddpmcd::checkpoint {

// Binary container: 8-byte magic "DDPMCD1\0", a little-endian uint64 length
// prefix, a UTF-8 JSON header, then raw little-endian float32 buffers in
// header order. Round-trips are bit-exact for f32 tensors.
inline constexpr char kMagic[8] = {'D', 'D', 'P', 'M', 'C', 'D', '1', '\0'};

struct Checkpoint {
    nlohmann::json header;
    std::vector<std::pair<std::string, Tensor>> tensors;  // f32, header order
};

// `meta` is merged into the header next to the "tensors" index. Tensors must
// be f32 (ContractError otherwise).
void save(const std::filesystem::path& path, const std::vector<nn::NamedParam>& tensors,
          const nlohmann::json& meta);
Checkpoint load(const std::filesystem::path& path);

// --- typed wrappers ---

nlohmann::json schedule_to_json(const diffusion::NoiseSchedule& sched);
diffusion::NoiseSchedule schedule_from_json(const nlohmann::json& j);
nlohmann::json denoiser_config_to_json(const denoiser::DenoiserConfig& cfg);
denoiser::DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

void save_denoiser(const std::filesystem::path& path, const denoiser::DenoiserModel& model,
                   const diffusion::NoiseSchedule& sched, int64_t training_step);

struct LoadedDenoiser {
    std::shared_ptr<denoiser::DenoiserModel> model;
    diffusion::NoiseSchedule sched;
    int64_t training_step = 0;
};

// Rebuilds the model from the header config. When `expected` is non-null the
// header config must match it exactly (DataError otherwise).
LoadedDenoiser load_denoiser(const std::filesystem::path& path,
                             const denoiser::DenoiserConfig* expected = nullptr);

}  // namespace ddpmcd::checkpoint
