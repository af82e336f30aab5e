#include "ddpmcd/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ddpmcd::config {

namespace {
std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

int64_t to_i64(const std::string& section, const std::string& key, const std::string& v) {
    try {
        return std::stoll(v);
    } catch (const std::exception&) {
        throw ConfigError("config: [" + section + "] " + key + " = '" + v + "' is not an integer");
    }
}

double to_f64(const std::string& section, const std::string& key, const std::string& v) {
    try {
        return std::stod(v);
    } catch (const std::exception&) {
        throw ConfigError("config: [" + section + "] " + key + " = '" + v + "' is not a number");
    }
}

bool to_bool(const std::string& section, const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config: [" + section + "] " + key + " = '" + v + "' is not a boolean");
}

std::vector<int> to_int_list(const std::string& section, const std::string& key,
                             const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        out.push_back(static_cast<int>(to_i64(section, key, tok)));
    }
    return out;
}

std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) os << ",";
        os << v[i];
    }
    return os.str();
}
}  // namespace

IniFile IniFile::parse_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_string(ss.str());
}

IniFile IniFile::parse_string(const std::string& text) {
    IniFile ini;
    std::stringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#' || line[0] == ';') continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config: malformed section header at line " + std::to_string(lineno));
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno) + ": '" +
                              line + "'");
        ini.set(section, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return ini;
}

bool IniFile::has(const std::string& section, const std::string& key) const {
    auto it = sections_.find(section);
    return it != sections_.end() && it->second.count(key) > 0;
}

std::string IniFile::get(const std::string& section, const std::string& key,
                         const std::string& fallback) const {
    auto it = sections_.find(section);
    if (it == sections_.end()) return fallback;
    auto kit = it->second.find(key);
    return kit == it->second.end() ? fallback : kit->second;
}

void IniFile::set(const std::string& section, const std::string& key, const std::string& value) {
    if (sections_.find(section) == sections_.end()) section_order_.push_back(section);
    sections_[section][key] = value;
}

std::string IniFile::dump() const {
    std::ostringstream os;
    for (const auto& name : section_order_) {
        os << "[" << name << "]\n";
        for (const auto& [k, v] : sections_.at(name)) os << k << " = " << v << "\n";
        os << "\n";
    }
    return os.str();
}

RunConfig RunConfig::desk() { return RunConfig{}; }

RunConfig RunConfig::full() {
    RunConfig c;
    c.profile = "full";
    c.T = 1000;
    c.beta_start = 1e-4;
    c.beta_end = 0.02;
    c.base_width = 64;
    c.pretrain_steps = 1'000'000;
    c.pretrain_batch = 16;
    c.pretrain_lr = 1e-5;
    c.warmup_steps = 10'000;
    c.image_size = 256;
    c.patch_size = 256;
    c.corpus_size = 1'000'000;
    c.cd_epochs = 120;
    c.cd_lr = 1e-5;
    c.tset = {50, 100, 400};
    return c;
}

RunConfig RunConfig::from_profile(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "full") return full();
    throw ConfigError("unknown profile '" + name + "' (expected desk|full)");
}

void RunConfig::apply_ini(const IniFile& ini) {
    auto s = [&](const char* sec, const char* key, std::string& out) {
        if (ini.has(sec, key)) out = ini.get(sec, key, out);
    };
    auto i64 = [&](const char* sec, const char* key, int64_t& out) {
        if (ini.has(sec, key)) out = to_i64(sec, key, ini.get(sec, key, ""));
    };
    auto i32 = [&](const char* sec, const char* key, int& out) {
        if (ini.has(sec, key)) out = static_cast<int>(to_i64(sec, key, ini.get(sec, key, "")));
    };
    auto u64 = [&](const char* sec, const char* key, uint64_t& out) {
        if (ini.has(sec, key)) out = static_cast<uint64_t>(to_i64(sec, key, ini.get(sec, key, "")));
    };
    auto f64 = [&](const char* sec, const char* key, double& out) {
        if (ini.has(sec, key)) out = to_f64(sec, key, ini.get(sec, key, ""));
    };
    auto b = [&](const char* sec, const char* key, bool& out) {
        if (ini.has(sec, key)) out = to_bool(sec, key, ini.get(sec, key, ""));
    };
    auto ints = [&](const char* sec, const char* key, std::vector<int>& out) {
        if (ini.has(sec, key)) out = to_int_list(sec, key, ini.get(sec, key, ""));
    };

    s("run", "profile", profile);
    u64("run", "seed", seed);
    s("schedule", "kind", schedule_kind);
    i32("schedule", "T", T);
    f64("schedule", "beta_start", beta_start);
    f64("schedule", "beta_end", beta_end);
    i32("denoiser", "base_width", base_width);
    ints("denoiser", "channel_mults", channel_mults);
    b("denoiser", "bottleneck_attention", bottleneck_attention);
    i32("denoiser", "time_embed_dim", time_embed_dim);
    i64("pretrain", "steps", pretrain_steps);
    i32("pretrain", "batch", pretrain_batch);
    f64("pretrain", "lr", pretrain_lr);
    i64("pretrain", "warmup_steps", warmup_steps);
    f64("pretrain", "clip_norm", clip_norm);
    i64("pretrain", "log_every", log_every);
    i64("pretrain", "checkpoint_every", checkpoint_every);
    i32("pretrain", "image_size", image_size);
    i64("pretrain", "corpus_size", corpus_size);
    s("data", "kind", data_kind);
    s("data", "root", data_root);
    i32("data", "patch_size", patch_size);
    i64("data", "synth_train", synth_train);
    i64("data", "synth_val", synth_val);
    i64("data", "synth_test", synth_test);
    f64("data", "change_rate", change_rate);
    u64("data", "seed", data_seed);
    ints("features", "tset", tset);
    u64("features", "noise_seed", noise_seed);
    s("features", "cache_dir", cache_dir);
    i32("cd", "epochs", cd_epochs);
    i32("cd", "batch", cd_batch);
    f64("cd", "lr", cd_lr);
    f64("cd", "weight_decay", cd_weight_decay);
    f64("cd", "threshold", threshold);
    i32("cd", "reduction", reduction);
    i32("cd", "proj_width", proj_width);
    i32("cd", "fuse_width", fuse_width);
    s("eval", "split", eval_split);
}

void RunConfig::validate() const {
    if (profile != "desk" && profile != "full")
        throw ConfigError("config: unknown profile '" + profile + "'");
    if (channel_mults.size() != denoiser::kNumLevels)
        throw ConfigError("config: channel_mults needs exactly " +
                          std::to_string(denoiser::kNumLevels) + " entries");
    if (image_size % 16 != 0)
        throw ConfigError("config: image_size must be divisible by 16");
    if (patch_size % 16 != 0)
        throw ConfigError("config: patch_size must be divisible by 16");
    if (data_kind != "synth" && data_kind != "manifest")
        throw ConfigError("config: data.kind must be synth or manifest");
    if (data_kind == "manifest" && data_root.empty())
        throw ConfigError("config: data.kind = manifest requires data.root");
    if (change_rate < 0.0 || change_rate > 1.0)
        throw ConfigError("config: change_rate must be in [0,1]");
    if (threshold < 0.0 || threshold > 1.0)
        throw ConfigError("config: threshold must be in [0,1]");
    make_schedule();
    denoiser_config().validate();
    timestep_set().validate_against(make_schedule());
}

IniFile RunConfig::to_ini() const {
    IniFile ini;
    ini.set("run", "profile", profile);
    ini.set("run", "seed", std::to_string(seed));
    ini.set("schedule", "kind", schedule_kind);
    ini.set("schedule", "T", std::to_string(T));
    ini.set("schedule", "beta_start", std::to_string(beta_start));
    ini.set("schedule", "beta_end", std::to_string(beta_end));
    ini.set("denoiser", "base_width", std::to_string(base_width));
    ini.set("denoiser", "channel_mults", join_ints(channel_mults));
    ini.set("denoiser", "bottleneck_attention", bottleneck_attention ? "true" : "false");
    ini.set("denoiser", "time_embed_dim", std::to_string(time_embed_dim));
    ini.set("pretrain", "steps", std::to_string(pretrain_steps));
    ini.set("pretrain", "batch", std::to_string(pretrain_batch));
    ini.set("pretrain", "lr", std::to_string(pretrain_lr));
    ini.set("pretrain", "warmup_steps", std::to_string(warmup_steps));
    ini.set("pretrain", "clip_norm", std::to_string(clip_norm));
    ini.set("pretrain", "log_every", std::to_string(log_every));
    ini.set("pretrain", "checkpoint_every", std::to_string(checkpoint_every));
    ini.set("pretrain", "image_size", std::to_string(image_size));
    ini.set("pretrain", "corpus_size", std::to_string(corpus_size));
    ini.set("data", "kind", data_kind);
    ini.set("data", "root", data_root);
    ini.set("data", "patch_size", std::to_string(patch_size));
    ini.set("data", "synth_train", std::to_string(synth_train));
    ini.set("data", "synth_val", std::to_string(synth_val));
    ini.set("data", "synth_test", std::to_string(synth_test));
    ini.set("data", "change_rate", std::to_string(change_rate));
    ini.set("data", "seed", std::to_string(data_seed));
    ini.set("features", "tset", join_ints(tset));
    ini.set("features", "noise_seed", std::to_string(noise_seed));
    ini.set("features", "cache_dir", cache_dir);
    ini.set("cd", "epochs", std::to_string(cd_epochs));
    ini.set("cd", "batch", std::to_string(cd_batch));
    ini.set("cd", "lr", std::to_string(cd_lr));
    ini.set("cd", "weight_decay", std::to_string(cd_weight_decay));
    ini.set("cd", "threshold", std::to_string(threshold));
    ini.set("cd", "reduction", std::to_string(reduction));
    ini.set("cd", "proj_width", std::to_string(proj_width));
    ini.set("cd", "fuse_width", std::to_string(fuse_width));
    ini.set("eval", "split", eval_split);
    return ini;
}

void RunConfig::save(const std::filesystem::path& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("config: cannot write " + path.string());
    os << to_ini().dump();
}

diffusion::NoiseSchedule RunConfig::make_schedule() const {
    return diffusion::make_schedule(schedule_kind, T, beta_start, beta_end);
}

denoiser::DenoiserConfig RunConfig::denoiser_config() const {
    denoiser::DenoiserConfig cfg;
    cfg.base_width = base_width;
    std::copy(channel_mults.begin(), channel_mults.end(), cfg.channel_mults.begin());
    cfg.bottleneck_attention = bottleneck_attention;
    cfg.time_embed_dim = time_embed_dim;
    return cfg;
}

features::TimestepSet RunConfig::timestep_set() const { return features::TimestepSet(tset); }

cd_head::CdHeadConfig RunConfig::head_config() const {
    auto cfg = cd_head::CdHeadConfig::for_features(denoiser_config(), static_cast<int>(tset.size()));
    cfg.reduction = reduction;
    cfg.proj_width = proj_width;
    cfg.fuse_width = fuse_width;
    return cfg;
}

}  // namespace ddpmcd::config
