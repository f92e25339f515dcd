#include "fec/run_config.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "fec/errors.hpp"
#include "fec/synth_digits.hpp"

namespace fec {
namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    std::int64_t out = 0;
    const auto* begin = value.data();
    const auto* end = begin + value.size();
    const auto res = std::from_chars(begin, end, out);
    if (res.ec != std::errc{} || res.ptr != end)
        throw ConfigError("config key " + key + ": '" + value + "' is not an integer");
    return out;
}

double parse_double(const std::string& key, const std::string& value) {
    try {
        std::size_t used = 0;
        const double out = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("");
        return out;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": '" + value + "' is not a number");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true") return true;
    if (value == "0" || value == "false") return false;
    throw ConfigError("config key " + key + ": '" + value + "' is not a boolean (use 0/1)");
}

std::array<int, 4> parse_int4(const std::string& key, const std::string& value) {
    std::array<int, 4> out{};
    std::stringstream ss(value);
    std::string item;
    int i = 0;
    while (std::getline(ss, item, ',')) {
        if (i >= 4) throw ConfigError("config key " + key + ": expected exactly 4 values");
        out[static_cast<std::size_t>(i++)] = static_cast<int>(parse_int(key, trim(item)));
    }
    if (i != 4) throw ConfigError("config key " + key + ": expected exactly 4 values");
    return out;
}

std::string join4(const std::array<int, 4>& v) {
    std::string s;
    for (int i = 0; i < 4; ++i) {
        if (i) s += ',';
        s += std::to_string(v[static_cast<std::size_t>(i)]);
    }
    return s;
}

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
    static const std::map<std::string, Setter> table = {
        {"model.preset",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v == "micro")
                 c.model = ModelConfig::micro();
             else if (v == "small")
                 c.model = ModelConfig::small();
             else
                 throw ConfigError("config key " + k + ": unknown preset '" + v + "'");
         }},
        {"model.input_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.input_size = static_cast<int>(parse_int(k, v));
         }},
        {"model.stem_kernel",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.stem_kernel = static_cast<int>(parse_int(k, v));
         }},
        {"model.stage_depths",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.stage_depths = parse_int4(k, v);
         }},
        {"model.stage_channels",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.stage_channels = parse_int4(k, v);
         }},
        {"model.encode_dims",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.encode_dims = parse_int4(k, v);
         }},
        {"model.num_classes",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.num_classes = static_cast<int>(parse_int(k, v));
         }},
        {"model.similarity",
         [](RunConfig& c, const std::string&, const std::string& v) {
             c.model.similarity = similarity_from_token(v);
         }},
        {"model.dispatch",
         [](RunConfig& c, const std::string&, const std::string& v) {
             c.model.dispatch = dispatch_from_token(v);
         }},
        {"model.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.seed = static_cast<std::uint64_t>(parse_int(k, v));
         }},
        {"model.use_norm",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.use_norm = parse_bool(k, v);
         }},
        {"model.mlp_hidden",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.model.mlp_hidden = static_cast<int>(parse_int(k, v));
         }},
        {"train.epochs",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.epochs = static_cast<int>(parse_int(k, v));
         }},
        {"train.batch_size",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.batch_size = static_cast<int>(parse_int(k, v));
         }},
        {"train.base_lr",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.base_lr = parse_double(k, v);
         }},
        {"train.weight_decay",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.weight_decay = parse_double(k, v);
         }},
        {"train.warmup_epochs",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.warmup_epochs = parse_double(k, v);
         }},
        {"train.beta1",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.beta1 = parse_double(k, v);
         }},
        {"train.beta2",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.beta2 = parse_double(k, v);
         }},
        {"train.adam_eps",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.adam_eps = parse_double(k, v);
         }},
        {"train.grad_clip",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.grad_clip = parse_double(k, v);
         }},
        {"train.augment_hflip",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.augment_hflip = parse_bool(k, v);
         }},
        {"train.seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.train.seed = static_cast<std::uint64_t>(parse_int(k, v));
         }},
        {"data.format",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             if (v != "synthetic" && v != "idx_ubyte" && v != "image_directory")
                 throw ConfigError("config key " + k + ": unknown format '" + v + "'");
             c.data_format = v;
         }},
        {"data.train_images", [](RunConfig& c, const std::string&,
                                 const std::string& v) { c.train_images = v; }},
        {"data.train_labels", [](RunConfig& c, const std::string&,
                                 const std::string& v) { c.train_labels = v; }},
        {"data.val_images",
         [](RunConfig& c, const std::string&, const std::string& v) { c.val_images = v; }},
        {"data.val_labels",
         [](RunConfig& c, const std::string&, const std::string& v) { c.val_labels = v; }},
        {"data.train_dir",
         [](RunConfig& c, const std::string&, const std::string& v) { c.train_dir = v; }},
        {"data.val_dir",
         [](RunConfig& c, const std::string&, const std::string& v) { c.val_dir = v; }},
        {"data.synth_train_count",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.synth_train_count = parse_int(k, v);
         }},
        {"data.synth_val_count",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.synth_val_count = parse_int(k, v);
         }},
        {"data.synth_seed",
         [](RunConfig& c, const std::string& k, const std::string& v) {
             c.synth_seed = static_cast<std::uint64_t>(parse_int(k, v));
         }},
    };
    return table;
}

}  // namespace

void RunConfig::apply(const std::string& key, const std::string& value) {
    const auto it = setters().find(key);
    if (it == setters().end()) throw ConfigError("unknown config key '" + key + "'");
    it->second(*this, key, value);
}

RunConfig RunConfig::from_text(const std::string& text, const std::string& origin) {
    struct Entry {
        int line_no;
        std::string key, value;
    };
    std::vector<Entry> entries;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(line_no) +
                              ": expected key=value, got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second)
            throw ConfigError(origin + ":" + std::to_string(line_no) + ": duplicate key '" + key +
                              "'");
        entries.push_back({line_no, key, value});
    }

    RunConfig cfg;
    const auto apply_at = [&](const Entry& e) {
        try {
            cfg.apply(e.key, e.value);
        } catch (const ConfigError& err) {
            throw ConfigError(origin + ":" + std::to_string(e.line_no) + ": " + err.what());
        }
    };
    // Presets establish a baseline, so they win the ordering race by fiat.
    for (const auto& e : entries)
        if (e.key == "model.preset") apply_at(e);
    for (const auto& e : entries)
        if (e.key != "model.preset") apply_at(e);
    cfg.finalize();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return from_text(buf.str(), path);
}

void RunConfig::finalize() const {
    model.validate();
    train.validate();
    if (data_format == "idx_ubyte") {
        for (const auto& [name, value] :
             {std::pair<const char*, const std::string*>{"data.train_images", &train_images},
              {"data.train_labels", &train_labels},
              {"data.val_images", &val_images},
              {"data.val_labels", &val_labels}})
            if (value->empty()) throw ConfigError(std::string("idx_ubyte data needs ") + name);
    } else if (data_format == "image_directory") {
        if (train_dir.empty() || val_dir.empty())
            throw ConfigError("image_directory data needs data.train_dir and data.val_dir");
    } else {
        if (synth_train_count < 1 || synth_val_count < 1)
            throw ConfigError("synthetic data counts must be positive");
        if (model.num_classes != 10)
            throw ConfigError("synthetic digit data is ten-class; set model.num_classes = 10");
    }
}

std::string RunConfig::resolved_text() const {
    std::map<std::string, std::string> kv;
    kv["model.input_size"] = std::to_string(model.input_size);
    kv["model.stem_kernel"] = std::to_string(model.stem_kernel);
    kv["model.stage_depths"] = join4(model.stage_depths);
    kv["model.stage_channels"] = join4(model.stage_channels);
    kv["model.encode_dims"] = join4(model.encode_dims);
    kv["model.num_classes"] = std::to_string(model.num_classes);
    kv["model.similarity"] = similarity_token(model.similarity);
    kv["model.dispatch"] = dispatch_token(model.dispatch);
    kv["model.seed"] = std::to_string(model.seed);
    kv["model.use_norm"] = model.use_norm ? "1" : "0";
    kv["model.mlp_hidden"] = std::to_string(model.mlp_hidden);
    kv["train.epochs"] = std::to_string(train.epochs);
    kv["train.batch_size"] = std::to_string(train.batch_size);
    std::ostringstream lr;
    lr << train.base_lr;
    kv["train.base_lr"] = lr.str();
    std::ostringstream wd;
    wd << train.weight_decay;
    kv["train.weight_decay"] = wd.str();
    std::ostringstream we;
    we << train.warmup_epochs;
    kv["train.warmup_epochs"] = we.str();
    std::ostringstream b1;
    b1 << train.beta1;
    kv["train.beta1"] = b1.str();
    std::ostringstream b2;
    b2 << train.beta2;
    kv["train.beta2"] = b2.str();
    std::ostringstream ae;
    ae << train.adam_eps;
    kv["train.adam_eps"] = ae.str();
    std::ostringstream gc;
    gc << train.grad_clip;
    kv["train.grad_clip"] = gc.str();
    kv["train.augment_hflip"] = train.augment_hflip ? "1" : "0";
    kv["train.seed"] = std::to_string(train.seed);
    kv["data.format"] = data_format;
    if (data_format == "idx_ubyte") {
        kv["data.train_images"] = train_images;
        kv["data.train_labels"] = train_labels;
        kv["data.val_images"] = val_images;
        kv["data.val_labels"] = val_labels;
    } else if (data_format == "image_directory") {
        kv["data.train_dir"] = train_dir;
        kv["data.val_dir"] = val_dir;
    } else {
        kv["data.synth_train_count"] = std::to_string(synth_train_count);
        kv["data.synth_val_count"] = std::to_string(synth_val_count);
        kv["data.synth_seed"] = std::to_string(synth_seed);
    }
    std::string out;
    for (const auto& [key, value] : kv) out += key + " = " + value + "\n";
    return out;
}

Dataset RunConfig::load_train() const {
    if (data_format == "idx_ubyte")
        return load_idx_dataset(train_images, train_labels, model.num_classes, "train");
    if (data_format == "image_directory") {
        Dataset ds = load_image_directory(train_dir, "train");
        if (ds.num_classes != model.num_classes)
            throw ConfigError("train directory has " + std::to_string(ds.num_classes) +
                              " classes but model.num_classes is " +
                              std::to_string(model.num_classes));
        return ds;
    }
    return make_digit_dataset(synth_train_count, synth_seed, "train");
}

Dataset RunConfig::load_val() const {
    if (data_format == "idx_ubyte")
        return load_idx_dataset(val_images, val_labels, model.num_classes, "val");
    if (data_format == "image_directory") {
        Dataset ds = load_image_directory(val_dir, "val");
        if (ds.num_classes != model.num_classes)
            throw ConfigError("val directory has " + std::to_string(ds.num_classes) +
                              " classes but model.num_classes is " +
                              std::to_string(model.num_classes));
        return ds;
    }
    return make_digit_dataset(synth_val_count, synth_seed + 1, "val");
}

}  // namespace fec
