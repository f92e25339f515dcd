#include "fec/model.hpp"

#include "json.hpp"

#include "fec/errors.hpp"

namespace fec {

using nlohmann::json;

ModelConfig ModelConfig::micro() { return ModelConfig{}; }

ModelConfig ModelConfig::small() {
    ModelConfig c;
    c.input_size = 224;
    c.stem_kernel = 4;
    c.stage_depths = {3, 4, 6, 2};
    c.stage_channels = {128, 256, 512, 768};
    c.encode_dims = {96, 96, 192, 192};
    c.num_classes = 1000;
    return c;
}

void ModelConfig::validate() const {
    if (stem_kernel < 1) throw ConfigError("config: stem_kernel must be positive");
    if (num_classes < 2) throw ConfigError("config: num_classes must be at least 2");
    if (mlp_hidden < 0) throw ConfigError("config: mlp_hidden must be non-negative");
    if (input_size % (stem_kernel * 8) != 0) {
        throw ConfigError("config: input_size " + std::to_string(input_size) +
                          " must be divisible by stem_kernel*8 = " +
                          std::to_string(stem_kernel * 8) + " (stem plus three poolings)");
    }
    for (int i = 0; i < 4; ++i) {
        if (stage_depths[i] < 1) {
            throw ConfigError("config: stage " + std::to_string(i + 1) +
                              " needs at least one encode layer");
        }
        if (stage_channels[i] < 1 || encode_dims[i] < 1) {
            throw ConfigError("config: stage " + std::to_string(i + 1) +
                              " channel dimensions must be positive");
        }
        const GridShape g = stage_grid(i);
        const GridShape c = encode_centers(i);
        if (c.numel() >= g.numel()) {
            throw ConfigError("config: stage " + std::to_string(i + 1) + " grid " +
                              std::to_string(g.h) + "x" + std::to_string(g.w) +
                              " is too small to cluster");
        }
    }
}

GridShape ModelConfig::stage_grid(int stage) const {
    const int base = input_size / stem_kernel;
    const int side = base >> stage;
    return {side, side};
}

GridShape ModelConfig::encode_centers(int stage) const {
    const GridShape g = stage_grid(stage);
    return {std::max(1, g.h / 2), std::max(1, g.w / 2)};
}

std::string ModelConfig::to_json() const {
    json j;
    j["input_size"] = input_size;
    j["stem_kernel"] = stem_kernel;
    j["stage_depths"] = stage_depths;
    j["stage_channels"] = stage_channels;
    j["encode_dims"] = encode_dims;
    j["num_classes"] = num_classes;
    j["similarity"] = similarity_token(similarity);
    j["dispatch"] = dispatch_token(dispatch);
    j["seed"] = seed;
    j["use_norm"] = use_norm;
    j["mlp_hidden"] = mlp_hidden;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config json: ") + e.what());
    }
    static const char* known[] = {"input_size",  "stem_kernel", "stage_depths", "stage_channels",
                                  "encode_dims", "num_classes", "similarity",   "dispatch",
                                  "seed",        "use_norm",    "mlp_hidden"};
    for (const auto& item : j.items()) {
        bool ok = false;
        for (const char* k : known) ok = ok || item.key() == k;
        if (!ok) throw ConfigError("config json: unknown key '" + item.key() + "'");
    }
    ModelConfig c;
    try {
        c.input_size = j.at("input_size").get<int>();
        c.stem_kernel = j.at("stem_kernel").get<int>();
        c.stage_depths = j.at("stage_depths").get<std::array<int, 4>>();
        c.stage_channels = j.at("stage_channels").get<std::array<int, 4>>();
        c.encode_dims = j.at("encode_dims").get<std::array<int, 4>>();
        c.num_classes = j.at("num_classes").get<int>();
        c.similarity = similarity_from_token(j.at("similarity").get<std::string>());
        c.dispatch = dispatch_from_token(j.at("dispatch").get<std::string>());
        c.seed = j.at("seed").get<std::uint64_t>();
        c.use_norm = j.at("use_norm").get<bool>();
        c.mlp_hidden = j.at("mlp_hidden").get<int>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config json: ") + e.what());
    }
    c.validate();
    return c;
}

template <typename T>
Model<T> Model<T>::build(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    const std::int64_t patch_dim = 3LL * cfg.stem_kernel * cfg.stem_kernel;
    {
        Tensor<T> w = Tensor<T>::zeros({patch_dim, cfg.stage_channels[0]});
        fill_kaiming(w, rng, patch_dim);
        m.stem_w = Param<T>("stem.weight", std::move(w), true);
        m.stem_b = Param<T>("stem.bias", Tensor<T>::zeros({1, cfg.stage_channels[0]}));
    }
    for (int s = 0; s < 4; ++s) {
        const std::string stage = "stage" + std::to_string(s + 1);
        for (int d = 0; d < cfg.stage_depths[s]; ++d) {
            ClusterLayerOptions opt;
            opt.in_channels = cfg.stage_channels[s];
            opt.proj_dim = cfg.encode_dims[s];
            opt.is_pool = false;
            opt.mlp_hidden = cfg.mlp_hidden;
            opt.use_norm = cfg.use_norm;
            opt.similarity = cfg.similarity;
            opt.dispatch = cfg.dispatch;
            m.layers.push_back(ClusterLayerParams<T>::make(
                stage + ".enc" + std::to_string(d), opt, rng));
        }
        if (s < 3) {
            ClusterLayerOptions opt;
            opt.in_channels = cfg.stage_channels[s];
            opt.proj_dim = cfg.stage_channels[s + 1];
            opt.is_pool = true;
            opt.use_norm = cfg.use_norm;
            opt.similarity = cfg.similarity;
            opt.dispatch = cfg.dispatch;
            m.layers.push_back(ClusterLayerParams<T>::make(stage + ".pool", opt, rng));
        }
    }
    {
        Tensor<T> w = Tensor<T>::zeros({cfg.encode_dims[3], cfg.num_classes});
        fill_kaiming(w, rng, cfg.encode_dims[3]);
        m.head_w = Param<T>("head.weight", std::move(w), true);
        m.head_b = Param<T>("head.bias", Tensor<T>::zeros({1, cfg.num_classes}));
    }
    return m;
}

template <typename T>
std::vector<Param<T>*> Model<T>::params() {
    std::vector<Param<T>*> out;
    out.push_back(&stem_w);
    out.push_back(&stem_b);
    for (auto& layer : layers) layer.collect(out);
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

template <typename T>
std::int64_t Model<T>::param_count() {
    std::int64_t n = 0;
    for (Param<T>* p : params()) n += p->value.numel();
    return n;
}

template <typename T>
void Model<T>::zero_grads() {
    for (Param<T>* p : params()) p->zero_grad();
}

template <typename T>
int Model<T>::layers_per_forward() const {
    int n = 3;  // pools
    for (int d : cfg.stage_depths) n += d;
    return n;
}

template <typename T>
typename Model<T>::Var Model<T>::forward_image(Tape<T>& tape, const Tensor<T>& img,
                                               std::vector<AssignmentRecord>* records) {
    if (img.rank() != 3 || img.shape[0] != 3 || img.shape[1] != cfg.input_size ||
        img.shape[2] != cfg.input_size) {
        throw ShapeError("forward: image " + img.shape_str() + " does not match configured [3x" +
                         std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) +
                         "]");
    }
    auto tokens = tape.patchify(tape.leaf(img), cfg.stem_kernel);
    auto x = tape.add(tape.matmul(tokens, tape.leaf(stem_w)), tape.leaf(stem_b));
    std::size_t li = 0;
    int layer_id = 0;
    ClusterResult<T> last_res;
    auto next_record = [&](AssignmentRecord& rec) {
        rec.layer_id = layer_id++;
        if (records) records->push_back(std::move(rec));
    };
    for (int s = 0; s < 4; ++s) {
        const GridShape grid = cfg.stage_grid(s);
        for (int d = 0; d < cfg.stage_depths[s]; ++d, ++li) {
            AssignmentRecord rec;
            const bool last_layer = s == 3 && d == cfg.stage_depths[s] - 1;
            x = encode(tape, x, grid, layers[li], cfg.encode_centers(s),
                       records ? &rec : nullptr, last_layer ? &last_res : nullptr);
            if (records) next_record(rec);
            else ++layer_id;
        }
        if (s < 3) {
            AssignmentRecord rec;
            x = pool(tape, x, grid, layers[li++], records ? &rec : nullptr);
            if (records) next_record(rec);
            else ++layer_id;
        }
    }
    auto pooled = tape.mean(last_res.representatives, 0);  // [1 x C'4]
    return tape.add(tape.matmul(pooled, tape.leaf(head_w)), tape.leaf(head_b));
}

template <typename T>
Tensor<T> Model<T>::forward_batch(const std::vector<Tensor<T>>& batch,
                                  std::vector<std::vector<AssignmentRecord>>* records) {
    Tensor<T> logits = Tensor<T>::zeros({static_cast<std::int64_t>(batch.size()), cfg.num_classes});
    for (std::size_t b = 0; b < batch.size(); ++b) {
        Tape<T> tape;
        std::vector<AssignmentRecord> recs;
        auto out = forward_image(tape, batch[b], records ? &recs : nullptr);
        const Tensor<T>& row = tape.value(out);
        std::copy(row.data.begin(), row.data.end(), logits.data.begin() + b * cfg.num_classes);
        if (records) records->push_back(std::move(recs));
    }
    return logits;
}

template struct Model<float>;
template struct Model<double>;

}  // namespace fec
