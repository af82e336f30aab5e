#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "ddpmcd/config.hpp"

namespace ddpmcd::cli {

// Console + file logger for one run directory.
class Logger {
public:
    explicit Logger(const std::filesystem::path& file);
    void line(const std::string& msg);

private:
    std::ofstream file_;
};

struct CommonArgs {
    std::string config_file;
    std::string profile = "desk";
    std::string out_dir;  // empty -> timestamped under the output root
    std::vector<std::string> overrides;  // "section.key=value"
    long long seed = -1;
};

// Resolved run state: config (profile -> file -> overrides), a created output
// directory with the resolved config written into it, and a logger.
struct RunContext {
    config::RunConfig cfg;
    std::filesystem::path out;
    std::shared_ptr<Logger> log;
};

RunContext open_run(const std::string& command, const CommonArgs& args);
void mark_failed(const RunContext& ctx, const std::string& reason);

// Loads the configured dataset split ("train"|"val"|"test"); synthetic data
// derives per-split sample streams from data_seed.
std::vector<data::CdSample> load_split(const config::RunConfig& cfg, const std::string& split);

int cmd_pretrain(const CommonArgs& args);
int cmd_sample(const CommonArgs& args, const std::string& checkpoint, int n);
int cmd_extract_features(const CommonArgs& args, const std::string& checkpoint,
                         const std::string& img_a, const std::string& img_b,
                         const std::string& cache_dir);
int cmd_train_cd(const CommonArgs& args, const std::string& checkpoint);
int cmd_eval(const CommonArgs& args, const std::string& checkpoint, const std::string& head,
             const std::string& split);
int cmd_ablate(const CommonArgs& args, const std::string& checkpoint,
               const std::vector<std::string>& tsets);
int cmd_make_data(const CommonArgs& args, const std::string& root);

}  // namespace ddpmcd::cli
