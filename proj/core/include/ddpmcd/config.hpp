#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ddpmcd/cd_head.hpp"
#include "ddpmcd/denoiser.hpp"
#include "ddpmcd/diffusion.hpp"

namespace ddpmcd::config {

// Flat INI-style file: [section] headers, key = value lines, '#' comments.
class IniFile {
public:
    static IniFile parse_file(const std::filesystem::path& path);
    static IniFile parse_string(const std::string& text);

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key,
                    const std::string& fallback) const;
    void set(const std::string& section, const std::string& key, const std::string& value);
    std::string dump() const;
    const std::map<std::string, std::map<std::string, std::string>>& sections() const {
        return sections_;
    }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
    std::vector<std::string> section_order_;
};

// Resolved configuration for a run. Profile defaults come first, then config
// file values, then CLI flag overrides; the result is written next to the
// run's outputs.
struct RunConfig {
    std::string profile = "desk";
    uint64_t seed = 0;

    // [schedule]
    std::string schedule_kind = "linear";
    int T = 200;
    double beta_start = 5e-4, beta_end = 0.1;

    // [denoiser]
    int base_width = 32;
    std::vector<int> channel_mults{1, 2, 2, 4, 4};
    bool bottleneck_attention = true;
    int time_embed_dim = 128;

    // [pretrain]
    int64_t pretrain_steps = 2000;
    int pretrain_batch = 2;
    double pretrain_lr = 2e-4;
    int64_t warmup_steps = 200;
    double clip_norm = 1.0;
    int64_t log_every = 50;
    int64_t checkpoint_every = 1000;
    int image_size = 64;
    int64_t corpus_size = 1000;

    // [data]
    std::string data_kind = "synth";  // synth | manifest
    std::string data_root;
    int patch_size = 64;
    int64_t synth_train = 200, synth_val = 50, synth_test = 50;
    double change_rate = 0.1;
    uint64_t data_seed = 7;

    // [features]
    std::vector<int> tset{10, 20, 80};
    uint64_t noise_seed = 11;
    std::string cache_dir;

    // [cd]
    int cd_epochs = 20;
    int cd_batch = 8;
    double cd_lr = 1e-3;
    double cd_weight_decay = 1e-4;
    double threshold = 0.5;
    int reduction = 8;
    int proj_width = 16;
    int fuse_width = 32;

    // [eval]
    std::string eval_split = "test";

    static RunConfig desk();
    static RunConfig full();
    static RunConfig from_profile(const std::string& name);
    void apply_ini(const IniFile& ini);
    void validate() const;

    IniFile to_ini() const;
    void save(const std::filesystem::path& path) const;

    diffusion::NoiseSchedule make_schedule() const;
    denoiser::DenoiserConfig denoiser_config() const;
    features::TimestepSet timestep_set() const;
    cd_head::CdHeadConfig head_config() const;
};

}  // namespace ddpmcd::config
