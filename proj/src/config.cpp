#include "lesa/config.hpp"

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>

#include "lesa/serialize.hpp"

namespace lesa {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, p);
}

int64_t parse_i64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t r = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

double parse_f64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("config: key '" + key + "' expects true|false, got '" + v + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::istringstream is(v);
    std::string tok;
    while (std::getline(is, tok, ',')) {
        out.push_back(static_cast<int>(parse_i64(key, trim(tok))));
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' expects a comma-separated list");
    return out;
}

struct KeyDef {
    std::string key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

const std::vector<KeyDef>& key_defs() {
    static const std::vector<KeyDef> defs = [] {
        std::vector<KeyDef> d;
        auto add = [&](std::string key, auto set, auto get) {
            d.push_back({std::move(key), set, get});
        };
        add("model.stage_blocks",
            [](ExperimentConfig& c, const std::string& v) { c.model.stage_blocks = parse_int_list("model.stage_blocks", v); },
            [](const ExperimentConfig& c) {
                std::string s;
                for (size_t i = 0; i < c.model.stage_blocks.size(); ++i) {
                    if (i) s += ",";
                    s += std::to_string(c.model.stage_blocks[i]);
                }
                return s;
            });
        add("model.base_channels",
            [](ExperimentConfig& c, const std::string& v) { c.model.base_channels = parse_i64("model.base_channels", v); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.base_channels); });
        for (int s = 0; s < 4; ++s) {
            add("model.op.stage" + std::to_string(s + 1),
                [s](ExperimentConfig& c, const std::string& v) { c.model.ops[static_cast<size_t>(s)] = spatial_op_from_name(v); },
                [s](const ExperimentConfig& c) { return spatial_op_name(c.model.ops[static_cast<size_t>(s)]); });
        }
        add("model.heads",
            [](ExperimentConfig& c, const std::string& v) { c.model.heads = static_cast<int>(parse_i64("model.heads", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.heads); });
        add("model.num_classes",
            [](ExperimentConfig& c, const std::string& v) { c.model.num_classes = static_cast<int>(parse_i64("model.num_classes", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.num_classes); });
        add("model.input_size",
            [](ExperimentConfig& c, const std::string& v) { c.model.input_size = static_cast<int>(parse_i64("model.input_size", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.input_size); });
        add("model.input_channels",
            [](ExperimentConfig& c, const std::string& v) { c.model.input_channels = static_cast<int>(parse_i64("model.input_channels", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.input_channels); });
        add("model.unary_kernel",
            [](ExperimentConfig& c, const std::string& v) { c.model.unary_kernel = static_cast<int>(parse_i64("model.unary_kernel", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.model.unary_kernel); });
        add("model.use_position",
            [](ExperimentConfig& c, const std::string& v) { c.model.use_position = parse_bool("model.use_position", v); },
            [](const ExperimentConfig& c) { return c.model.use_position ? "true" : "false"; });
        add("optim.lr_init",
            [](ExperimentConfig& c, const std::string& v) { c.optim.lr_init = parse_f64("optim.lr_init", v); },
            [](const ExperimentConfig& c) { return fmt_double(c.optim.lr_init); });
        add("optim.momentum",
            [](ExperimentConfig& c, const std::string& v) { c.optim.momentum = parse_f64("optim.momentum", v); },
            [](const ExperimentConfig& c) { return fmt_double(c.optim.momentum); });
        add("optim.nesterov",
            [](ExperimentConfig& c, const std::string& v) { c.optim.nesterov = parse_bool("optim.nesterov", v); },
            [](const ExperimentConfig& c) { return c.optim.nesterov ? "true" : "false"; });
        add("optim.weight_decay",
            [](ExperimentConfig& c, const std::string& v) { c.optim.weight_decay = parse_f64("optim.weight_decay", v); },
            [](const ExperimentConfig& c) { return fmt_double(c.optim.weight_decay); });
        add("optim.warmup_epochs",
            [](ExperimentConfig& c, const std::string& v) { c.optim.warmup_epochs = static_cast<int>(parse_i64("optim.warmup_epochs", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.optim.warmup_epochs); });
        add("optim.total_epochs",
            [](ExperimentConfig& c, const std::string& v) { c.optim.total_epochs = static_cast<int>(parse_i64("optim.total_epochs", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.optim.total_epochs); });
        add("optim.batch_size",
            [](ExperimentConfig& c, const std::string& v) { c.optim.batch_size = static_cast<int>(parse_i64("optim.batch_size", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.optim.batch_size); });
        add("optim.hflip",
            [](ExperimentConfig& c, const std::string& v) { c.optim.hflip = parse_bool("optim.hflip", v); },
            [](const ExperimentConfig& c) { return c.optim.hflip ? "true" : "false"; });
        add("optim.per_step_schedule",
            [](ExperimentConfig& c, const std::string& v) { c.optim.per_step_schedule = parse_bool("optim.per_step_schedule", v); },
            [](const ExperimentConfig& c) { return c.optim.per_step_schedule ? "true" : "false"; });
        add("data.source",
            [](ExperimentConfig& c, const std::string& v) { c.data.source = v; },
            [](const ExperimentConfig& c) { return c.data.source; });
        add("data.path",
            [](ExperimentConfig& c, const std::string& v) { c.data.path = v; },
            [](const ExperimentConfig& c) { return c.data.path; });
        add("data.num_classes",
            [](ExperimentConfig& c, const std::string& v) { c.data.num_classes = static_cast<int>(parse_i64("data.num_classes", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.data.num_classes); });
        add("data.image_size",
            [](ExperimentConfig& c, const std::string& v) { c.data.image_size = static_cast<int>(parse_i64("data.image_size", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.data.image_size); });
        add("data.train_count",
            [](ExperimentConfig& c, const std::string& v) { c.data.train_count = static_cast<int>(parse_i64("data.train_count", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.data.train_count); });
        add("data.eval_count",
            [](ExperimentConfig& c, const std::string& v) { c.data.eval_count = static_cast<int>(parse_i64("data.eval_count", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.data.eval_count); });
        add("data.seed",
            [](ExperimentConfig& c, const std::string& v) { c.data.seed = parse_u64("data.seed", v); },
            [](const ExperimentConfig& c) { return std::to_string(c.data.seed); });
        add("run.out_dir",
            [](ExperimentConfig& c, const std::string& v) { c.run.out_dir = v; },
            [](const ExperimentConfig& c) { return c.run.out_dir; });
        add("run.seed",
            [](ExperimentConfig& c, const std::string& v) { c.run.seed = parse_u64("run.seed", v); },
            [](const ExperimentConfig& c) { return std::to_string(c.run.seed); });
        add("run.deterministic",
            [](ExperimentConfig& c, const std::string& v) { c.run.deterministic = parse_bool("run.deterministic", v); },
            [](const ExperimentConfig& c) { return c.run.deterministic ? "true" : "false"; });
        add("run.threads",
            [](ExperimentConfig& c, const std::string& v) { c.run.threads = static_cast<int>(parse_i64("run.threads", v)); },
            [](const ExperimentConfig& c) { return std::to_string(c.run.threads); });
        return d;
    }();
    return defs;
}

}  // namespace

ExperimentConfig ExperimentConfig::parse_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value, got '" +
                              line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        bool found = false;
        for (const auto& def : key_defs()) {
            if (def.key == key) {
                def.set(cfg, val);
                found = true;
                break;
            }
        }
        if (!found) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load_file(const std::string& path) {
    ExperimentConfig cfg = parse_text(read_file(path));
    if (const char* env = std::getenv("LESA_SEED")) {
        cfg.run.seed = parse_u64("LESA_SEED", env);
    }
    cfg.validate(true);
    return cfg;
}

std::string ExperimentConfig::canonical_text() const {
    std::ostringstream os;
    for (const auto& def : key_defs()) os << def.key << " = " << def.get(*this) << "\n";
    return os.str();
}

void ExperimentConfig::validate(bool check_paths) const {
    model.validate();
    optim.validate();
    if (data.source != "synthetic" && data.source != "tensor-dir") {
        throw ConfigError("config: data.source must be synthetic|tensor-dir, got '" + data.source + "'");
    }
    if (data.source == "tensor-dir") {
        if (data.path.empty()) throw ConfigError("config: data.path is required for tensor-dir sources");
        if (check_paths && !std::filesystem::exists(data.path)) {
            throw ConfigError("config: data.path does not exist: " + data.path);
        }
    }
    if (data.num_classes < 2) throw ConfigError("config: data.num_classes must be at least 2");
    if (data.image_size != model.input_size) {
        throw ConfigError("config: data.image_size " + std::to_string(data.image_size) +
                          " must match model.input_size " + std::to_string(model.input_size));
    }
    if (data.num_classes != model.num_classes) {
        throw ConfigError("config: data.num_classes " + std::to_string(data.num_classes) +
                          " must match model.num_classes " + std::to_string(model.num_classes));
    }
    if (data.train_count < 1 || data.eval_count < 1) {
        throw ConfigError("config: data counts must be positive");
    }
    if (run.out_dir.empty()) throw ConfigError("config: run.out_dir must not be empty");
    if (run.threads < 1) throw ConfigError("config: run.threads must be at least 1");
}

std::pair<Dataset, Dataset> load_data(const DataConfig& cfg) {
    if (cfg.source == "synthetic") {
        Dataset train = generate_synthetic(cfg.num_classes, cfg.train_count, cfg.image_size, cfg.seed);
        Dataset eval = generate_synthetic(cfg.num_classes, cfg.eval_count, cfg.image_size,
                                          cfg.seed + 1000003ULL);
        return {std::move(train), std::move(eval)};
    }
    Dataset train = load_split(cfg.path, "train");
    Dataset eval = load_split(cfg.path, "eval");
    for (const Dataset* ds : {&train, &eval}) {
        if (ds->height != cfg.image_size || ds->width != cfg.image_size) {
            throw ConfigError("dataset image size " + std::to_string(ds->height) +
                              " does not match configured image_size " + std::to_string(cfg.image_size));
        }
        for (int l : ds->labels) {
            if (l < 0 || l >= cfg.num_classes) {
                throw ConfigError("dataset label " + std::to_string(l) + " outside configured class count");
            }
        }
    }
    return {std::move(train), std::move(eval)};
}

}  // namespace lesa
