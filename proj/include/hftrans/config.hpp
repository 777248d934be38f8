#pragma once

// Run configuration read from flat `key = value` text. `#` starts a comment;
// unknown keys are errors.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hftrans/metrics.hpp"
#include "hftrans/model.hpp"
#include "hftrans/phantom.hpp"

namespace hft {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct AdamSettings {
    double learning_rate = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct RunConfig {
    ModelConfig model;
    PhantomConfig phantom;
    std::size_t phantoms = 4;
    std::filesystem::path manifest;  // when set, data comes from here instead of phantoms
    bool zscore = true;
    AdamSettings optimizer;
    std::size_t steps = 200;
    std::size_t batch_size = 1;
    std::size_t folds = 2;
    std::uint64_t seed = 0;
    std::filesystem::path out = "out";
    std::vector<FusionMode> modes{FusionMode::early, FusionMode::middle, FusionMode::hybrid,
                                  FusionMode::hybrid_star};
    RegionSpec regions;  // empty → default_regions(num_classes)

    RunConfig() {
        model.modalities = phantom.modalities;
        model.num_classes = phantom.num_classes;
        model.extents = phantom.extents;
        apply_seed(seed);
    }

    /// Sets the run seed and the model / data seeds derived from it.
    void apply_seed(std::uint64_t s) {
        seed = s;
        model.seed = derive_seed(s, "model");
        phantom.seed = derive_seed(s, "data");
    }

    RegionSpec effective_regions() const { return regions.empty() ? default_regions(model.num_classes) : regions; }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
        try {
            model.validate();
            if (manifest.empty()) phantom.validate();
            (void)nested_region_masks(LabelVolume{}, effective_regions(), model.num_classes);
        } catch (const ConfigError&) {
            throw;
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
        if (manifest.empty()) {
            if (phantom.modalities != model.modalities) fail("phantom and model modality counts differ");
            if (phantom.num_classes != model.num_classes) fail("phantom and model class counts differ");
            if (phantom.extents != model.extents) fail("phantom and model extents differ");
            if (phantoms < 1) fail("phantoms must be at least 1");
        }
        if (batch_size < 1) fail("batch_size must be at least 1");
        if (!(optimizer.learning_rate > 0.0)) fail("learning_rate must be positive");
        if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0))
            fail("betas must lie in [0, 1)");
        if (!(optimizer.eps > 0.0)) fail("adam_eps must be positive");
        if (!(optimizer.weight_decay >= 0.0)) fail("weight_decay must be non-negative");
        if (modes.empty()) fail("modes must not be empty");
    }
};

namespace detail {

inline std::string trim(std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, sep)) out.push_back(trim(item));
    return out;
}

template <class U>
U parse_number(const std::string& text) {
    U value{};
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || end != text.data() + text.size())
        throw ConfigError("'" + text + "' is not a valid number");
    return value;
}

inline bool parse_bool(const std::string& text) {
    if (text == "true" || text == "1" || text == "yes") return true;
    if (text == "false" || text == "0" || text == "no") return false;
    throw ConfigError("'" + text + "' is not a boolean");
}

/// "1+2+3|1|2" → {{1,2,3},{1},{2}}
inline std::vector<std::vector<std::size_t>> parse_subsets(const std::string& text) {
    std::vector<std::vector<std::size_t>> out;
    for (const auto& group : split(text, '|')) {
        std::vector<std::size_t> subset;
        for (const auto& m : split(group, '+')) subset.push_back(parse_number<std::size_t>(m));
        out.push_back(subset);
    }
    return out;
}

/// "ET:4;TC:3+4" → regions
inline RegionSpec parse_regions(const std::string& text) {
    RegionSpec out;
    for (const auto& item : split(text, ';')) {
        const auto colon = item.find(':');
        if (colon == std::string::npos) throw ConfigError("region '" + item + "' must be name:class+class...");
        Region r{trim(item.substr(0, colon)), {}};
        for (const auto& c : split(item.substr(colon + 1), '+')) r.classes.push_back(parse_number<std::size_t>(c));
        out.push_back(r);
    }
    return out;
}

}  // namespace detail

inline RunConfig parse_run_config(std::istream& is, const std::string& source = "<config>") {
    RunConfig cfg;
    std::map<std::string, std::string> seen;
    std::string line;
    std::size_t lineno = 0;
    bool seed_given = false;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        const std::string where = source + ":" + std::to_string(lineno) + ": ";
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (seen.count(key)) throw ConfigError(where + "duplicate key '" + key + "'");
        seen[key] = value;
        try {
            auto size = [&] { return detail::parse_number<std::size_t>(value); };
            auto real = [&] { return detail::parse_number<double>(value); };
            if (key == "modalities") {
                cfg.model.modalities = cfg.phantom.modalities = size();
            } else if (key == "num_classes") {
                cfg.model.num_classes = cfg.phantom.num_classes = size();
            } else if (key == "extent") {
                const auto parts = detail::split(value, ',');
                if (parts.size() == 1) {
                    const auto e = detail::parse_number<std::size_t>(parts[0]);
                    cfg.model.extents = {e, e, e};
                } else if (parts.size() == 3) {
                    for (std::size_t a = 0; a < 3; ++a)
                        cfg.model.extents[a] = detail::parse_number<std::size_t>(parts[a]);
                } else {
                    throw ConfigError("extent must be one value or three comma-separated values");
                }
                cfg.phantom.extents = cfg.model.extents;
            } else if (key == "fusion") {
                cfg.model.fusion = parse_fusion_mode(value);
            } else if (key == "encoders") {
                cfg.model.custom_encoders = detail::parse_subsets(value);
            } else if (key == "base_width") {
                cfg.model.base_width = size();
            } else if (key == "encoder_channels") {
                cfg.model.encoder_channels = size();
            } else if (key == "embed_dim") {
                cfg.model.embed_dim = size();
            } else if (key == "layers") {
                cfg.model.layers = size();
            } else if (key == "heads") {
                cfg.model.heads = size();
            } else if (key == "mlp_ratio") {
                cfg.model.mlp_ratio = size();
            } else if (key == "instance_norm") {
                cfg.model.instance_norm = detail::parse_bool(value);
            } else if (key == "phantoms") {
                cfg.phantoms = size();
            } else if (key == "noise_sigma") {
                cfg.phantom.noise_sigma = real();
            } else if (key == "spacing") {
                const auto parts = detail::split(value, ',');
                if (parts.size() != 3) throw ConfigError("spacing needs three comma-separated values");
                for (std::size_t a = 0; a < 3; ++a) cfg.phantom.spacing[a] = detail::parse_number<float>(parts[a]);
            } else if (key == "intensity") {
                cfg.phantom.intensity.clear();
                for (const auto& row : detail::split(value, ';')) {
                    std::vector<double> r;
                    for (const auto& v : detail::split(row, ',')) r.push_back(detail::parse_number<double>(v));
                    cfg.phantom.intensity.push_back(r);
                }
            } else if (key == "manifest") {
                cfg.manifest = value;
            } else if (key == "zscore") {
                cfg.zscore = detail::parse_bool(value);
            } else if (key == "learning_rate") {
                cfg.optimizer.learning_rate = real();
            } else if (key == "beta1") {
                cfg.optimizer.beta1 = real();
            } else if (key == "beta2") {
                cfg.optimizer.beta2 = real();
            } else if (key == "adam_eps") {
                cfg.optimizer.eps = real();
            } else if (key == "weight_decay") {
                cfg.optimizer.weight_decay = real();
            } else if (key == "steps") {
                cfg.steps = size();
            } else if (key == "batch_size") {
                cfg.batch_size = size();
            } else if (key == "folds") {
                cfg.folds = size();
            } else if (key == "seed") {
                cfg.apply_seed(detail::parse_number<std::uint64_t>(value));
                seed_given = true;
            } else if (key == "out") {
                cfg.out = value;
            } else if (key == "modes") {
                cfg.modes.clear();
                for (const auto& m : detail::split(value, ',')) cfg.modes.push_back(parse_fusion_mode(m));
            } else if (key == "regions") {
                cfg.regions = detail::parse_regions(value);
            } else {
                throw ConfigError("unknown key '" + key + "'");
            }
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        } catch (const std::invalid_argument& e) {
            throw ConfigError(where + e.what());
        }
    }
    if (!seed_given) cfg.apply_seed(cfg.seed);
    if (!cfg.manifest.empty() && cfg.manifest.is_relative() && source != "<config>")
        cfg.manifest = std::filesystem::path(source).parent_path() / cfg.manifest;
    cfg.validate();
    return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config " + path.string());
    return parse_run_config(is, path.string());
}

}  // namespace hft
