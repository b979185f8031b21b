#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dynhead {

/// Configuration problem (bad key, bad value, incompatible settings). The CLI
/// maps this to exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Numeric failure at runtime (divergence, non-finite loss). Exit code 2.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

constexpr int kBaseStride = 4;

/// Full run configuration. Every field maps to a dotted config key that can
/// be set in the config file or overridden with --set key=value.
struct RunConfig {
    std::uint64_t seed = 1;

    int image_size = 64;   // data.image_size
    int image_channels = 1; // data.channels
    int train_scenes = 64;  // data.train_scenes
    int eval_scenes = 16;   // data.eval_scenes
    int num_classes = 2;    // data.classes (object classes; background is extra)
    int objects_max = 3;    // data.objects_max
    double size_min = 4.0;  // data.size_min
    double size_max = 32.0; // data.size_max

    int head_depth = 2;   // head.depth
    int head_scales = 3;  // head.scales
    int channels = 32;    // head.channels

    double tau = 1.5;           // gate.tau
    bool coarse_gate = false;   // gate.coarse
    bool softmax_gate = false;  // gate.softmax
    std::string gate_force = "none"; // gate.force: none|open|closed

    bool enable_depth = true; // paths.enable_depth
    bool enable_scale = true; // paths.enable_scale

    double lambda = 0.4;     // loss.lambda
    double cls_weight = 1.0; // loss.cls_weight
    double reg_weight = 1.0; // loss.reg_weight
    double bg_weight = 0.1;  // loss.bg_weight

    double lr = 0.02;            // opt.lr
    double momentum = 0.9;       // opt.momentum
    double weight_decay = 1e-4;  // opt.weight_decay

    int iterations = 2000; // train.iterations
    int batch = 4;         // train.batch
    int threads = 0;       // train.threads (0 = hardware concurrency)

    std::vector<double> sweep_lambdas = {0.0, 0.1, 0.4, 0.8, 1.6}; // sweep.lambdas
    std::vector<double> sweep_taus = {1.5};                        // sweep.taus

    std::string out_dir; // out.dir; empty falls back to $DYNHEAD_OUTPUT_ROOT, then "runs"

    int stride_at(int scale) const { return kBaseStride << scale; }
    int coarsest_stride() const { return stride_at(head_scales - 1); }
    int logits_channels() const { return num_classes + 1; } // class 0 is background

    std::string resolved_out_dir() const {
        if (!out_dir.empty()) return out_dir;
        if (const char* env = std::getenv("DYNHEAD_OUTPUT_ROOT"); env && *env) return env;
        return "runs";
    }

    void set(const std::string& key, const std::string& value);
    void validate() const;
    std::string to_text() const;

    static RunConfig from_file(const std::string& path);
};

namespace config_detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long long i = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return static_cast<int>(i);
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw ConfigError("config: key '" + key + "' expects a boolean, got '" + v + "'");
}

inline std::vector<double> parse_double_list(const std::string& key, const std::string& v) {
    std::vector<double> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) continue;
        out.push_back(parse_double(key, item));
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' expects a non-empty list");
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::string format_double_list(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += format_double(v[i]);
    }
    return out;
}

} // namespace config_detail

inline void RunConfig::set(const std::string& key, const std::string& value) {
    using namespace config_detail;
    const std::string v = trim(value);
    if (key == "seed") seed = static_cast<std::uint64_t>(std::stoull(v));
    else if (key == "data.image_size") image_size = parse_int(key, v);
    else if (key == "data.channels") image_channels = parse_int(key, v);
    else if (key == "data.train_scenes") train_scenes = parse_int(key, v);
    else if (key == "data.eval_scenes") eval_scenes = parse_int(key, v);
    else if (key == "data.classes") num_classes = parse_int(key, v);
    else if (key == "data.objects_max") objects_max = parse_int(key, v);
    else if (key == "data.size_min") size_min = parse_double(key, v);
    else if (key == "data.size_max") size_max = parse_double(key, v);
    else if (key == "head.depth") head_depth = parse_int(key, v);
    else if (key == "head.scales") head_scales = parse_int(key, v);
    else if (key == "head.channels") channels = parse_int(key, v);
    else if (key == "gate.tau") tau = parse_double(key, v);
    else if (key == "gate.coarse") coarse_gate = parse_bool(key, v);
    else if (key == "gate.softmax") softmax_gate = parse_bool(key, v);
    else if (key == "gate.force") gate_force = v;
    else if (key == "paths.enable_depth") enable_depth = parse_bool(key, v);
    else if (key == "paths.enable_scale") enable_scale = parse_bool(key, v);
    else if (key == "loss.lambda") lambda = parse_double(key, v);
    else if (key == "loss.cls_weight") cls_weight = parse_double(key, v);
    else if (key == "loss.reg_weight") reg_weight = parse_double(key, v);
    else if (key == "loss.bg_weight") bg_weight = parse_double(key, v);
    else if (key == "opt.lr") lr = parse_double(key, v);
    else if (key == "opt.momentum") momentum = parse_double(key, v);
    else if (key == "opt.weight_decay") weight_decay = parse_double(key, v);
    else if (key == "train.iterations") iterations = parse_int(key, v);
    else if (key == "train.batch") batch = parse_int(key, v);
    else if (key == "train.threads") threads = parse_int(key, v);
    else if (key == "sweep.lambdas") sweep_lambdas = parse_double_list(key, v);
    else if (key == "sweep.taus") sweep_taus = parse_double_list(key, v);
    else if (key == "out.dir") out_dir = v;
    else throw ConfigError("config: unknown key '" + key + "'");
}

inline void RunConfig::validate() const {
    if (head_scales < 1) throw ConfigError("config: head.scales must be >= 1");
    if (head_depth < 1) throw ConfigError("config: head.depth must be >= 1");
    if (channels < 1) throw ConfigError("config: head.channels must be >= 1");
    if (image_channels < 1 || image_channels > 3)
        throw ConfigError("config: data.channels must be in [1,3]");
    if (image_size < coarsest_stride() || image_size % coarsest_stride() != 0)
        throw ConfigError("config: data.image_size " + std::to_string(image_size) +
                          " must be a positive multiple of the coarsest stride " +
                          std::to_string(coarsest_stride()));
    if (num_classes < 1) throw ConfigError("config: data.classes must be >= 1");
    if (batch < 1) throw ConfigError("config: train.batch must be >= 1");
    if (iterations < 0) throw ConfigError("config: train.iterations must be >= 0");
    if (train_scenes < 1 || eval_scenes < 1)
        throw ConfigError("config: scene counts must be >= 1");
    if (!(tau >= 0.0)) throw ConfigError("config: gate.tau must be >= 0");
    if (!(lambda >= 0.0)) throw ConfigError("config: loss.lambda must be >= 0");
    if (gate_force != "none" && gate_force != "open" && gate_force != "closed")
        throw ConfigError("config: gate.force must be none|open|closed, got '" + gate_force + "'");
    if (!enable_depth && !enable_scale)
        throw ConfigError("config: paths.enable_depth and paths.enable_scale cannot both be off");
    if (size_min < 2.0) throw ConfigError("config: data.size_min must be >= 2 pixels");
    if (size_max > image_size / 2.0)
        throw ConfigError("config: data.size_max " + config_detail::format_double(size_max) +
                          " does not fit an image of size " + std::to_string(image_size));
    if (size_max < 8.0 * size_min)
        throw ConfigError("config: object sizes must span at least 3 octaves "
                          "(data.size_max >= 8 * data.size_min)");
}

inline std::string RunConfig::to_text() const {
    using config_detail::format_double;
    std::ostringstream os;
    os << "seed = " << seed << "\n";
    os << "data.image_size = " << image_size << "\n";
    os << "data.channels = " << image_channels << "\n";
    os << "data.train_scenes = " << train_scenes << "\n";
    os << "data.eval_scenes = " << eval_scenes << "\n";
    os << "data.classes = " << num_classes << "\n";
    os << "data.objects_max = " << objects_max << "\n";
    os << "data.size_min = " << format_double(size_min) << "\n";
    os << "data.size_max = " << format_double(size_max) << "\n";
    os << "head.depth = " << head_depth << "\n";
    os << "head.scales = " << head_scales << "\n";
    os << "head.channels = " << channels << "\n";
    os << "gate.tau = " << format_double(tau) << "\n";
    os << "gate.coarse = " << (coarse_gate ? "true" : "false") << "\n";
    os << "gate.softmax = " << (softmax_gate ? "true" : "false") << "\n";
    os << "gate.force = " << gate_force << "\n";
    os << "paths.enable_depth = " << (enable_depth ? "true" : "false") << "\n";
    os << "paths.enable_scale = " << (enable_scale ? "true" : "false") << "\n";
    os << "loss.lambda = " << format_double(lambda) << "\n";
    os << "loss.cls_weight = " << format_double(cls_weight) << "\n";
    os << "loss.reg_weight = " << format_double(reg_weight) << "\n";
    os << "loss.bg_weight = " << format_double(bg_weight) << "\n";
    os << "opt.lr = " << format_double(lr) << "\n";
    os << "opt.momentum = " << format_double(momentum) << "\n";
    os << "opt.weight_decay = " << format_double(weight_decay) << "\n";
    os << "train.iterations = " << iterations << "\n";
    os << "train.batch = " << batch << "\n";
    os << "train.threads = " << threads << "\n";
    os << "sweep.lambdas = " << config_detail::format_double_list(sweep_lambdas) << "\n";
    os << "sweep.taus = " << config_detail::format_double_list(sweep_taus) << "\n";
    os << "out.dir = " << out_dir << "\n";
    return os.str();
}

inline RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config: cannot open '" + path + "'");
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = config_detail::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " of '" + path +
                              "' is not 'key = value'");
        cfg.set(config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    }
    return cfg;
}

} // namespace dynhead
