#include "pbnn/config.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace pbnn {

using ordered_json = nlohmann::ordered_json;

ordered_json default_config() {
    ordered_json c;
    c["experiment_id"] = "experiment";
    c["seed"] = 0;
    c["run_dir"] = "";  // "" = <run root>/<experiment_id>_seed<seed>

    c["dataset"]["kind"] = "two_spirals";
    c["dataset"]["n_per_class"] = 400;   // two_spirals
    c["dataset"]["noise"] = 0.0;         // two_spirals
    c["dataset"]["n_points"] = 400;      // quadrant_xor
    c["dataset"]["margin"] = 0.1;        // quadrant_xor
    c["dataset"]["seed"] = -1;           // -1 = top-level seed
    c["dataset"]["images"] = "";         // idx
    c["dataset"]["labels"] = "";         // idx
    c["dataset"]["test_images"] = "";    // idx, optional dedicated test files
    c["dataset"]["test_labels"] = "";    // idx
    c["dataset"]["transpose"] = false;   // idx (EMNIST raw images come transposed)
    c["dataset"]["path"] = "";           // csv
    c["dataset"]["label_column"] = "label";
    c["dataset"]["feature_columns"] = ordered_json::array();

    c["split"]["train"] = 0.8;
    c["split"]["val"] = 0.1;
    c["split"]["test"] = 0.1;
    c["split"]["seed"] = -1;  // -1 = top-level seed
    c["split"]["stratified"] = false;

    c["model"]["layers"] = ordered_json::array();

    c["training"]["ablation_mode"] = "full_pb";
    c["training"]["patience"] = 25;
    c["training"]["fixed_epochs"] = 0;
    c["training"]["max_epochs_per_cycle"] = 10000;
    c["training"]["max_dendrite_rounds"] = 3;
    c["training"]["batch_size"] = 32;
    c["training"]["loss"] = "cross_entropy";
    c["training"]["metric"] = "accuracy";
    c["training"]["eval_test_each_epoch"] = true;
    c["training"]["dendrite_output_init"] = "zero";
    c["training"]["optimizer"]["kind"] = "adam";
    c["training"]["optimizer"]["learning_rate"] = 1e-3;
    c["training"]["optimizer"]["momentum"] = 0.0;
    c["training"]["optimizer"]["beta1"] = 0.9;
    c["training"]["optimizer"]["beta2"] = 0.999;
    c["training"]["optimizer"]["eps"] = 1e-8;

    c["candidates"]["pool_size"] = 4;
    c["candidates"]["learning_rate"] = 0.01;
    c["candidates"]["beta"] = 0.99;
    c["candidates"]["patience"] = 5;
    c["candidates"]["improve_eps"] = 1e-4;
    c["candidates"]["max_epochs"] = 200;
    c["candidates"]["batch_size"] = 32;
    c["candidates"]["bias"] = false;
    c["candidates"]["activation"] = "";  // "" = host layer's activation
    c["candidates"]["sigma_source"] = "error";
    return c;
}

namespace {

// Layer entries are validated separately since their key set depends on kind.
void merge_checked(ordered_json& base, const ordered_json& user,
                   const std::string& path) {
    if (!user.is_object())
        throw ConfigError(path.empty() ? "config root must be an object"
                                       : path + " must be an object");
    for (auto& [key, value] : user.items()) {
        std::string here = path.empty() ? key : path + "." + key;
        if (!base.contains(key)) throw ConfigError("unknown config key: " + here);
        if (base[key].is_object() && !value.is_null())
            merge_checked(base[key], value, here);
        else
            base[key] = value;
    }
}

const std::vector<std::string>& layer_keys(const std::string& kind) {
    static const std::vector<std::string> dense = {"kind", "units", "activation"};
    static const std::vector<std::string> conv = {"kind",   "channels", "kernel",
                                                  "stride", "padding",  "activation"};
    static const std::vector<std::string> pool = {"kind", "k"};
    static const std::vector<std::string> drop = {"kind", "rate"};
    static const std::vector<std::string> flat = {"kind"};
    if (kind == "dense") return dense;
    if (kind == "conv2d") return conv;
    if (kind == "maxpool2d") return pool;
    if (kind == "dropout") return drop;
    if (kind == "flatten") return flat;
    throw ConfigError("unknown layer kind: " + kind);
}

LayerSpec parse_layer(const ordered_json& j, std::size_t index) {
    std::string where = "model.layers[" + std::to_string(index) + "]";
    if (!j.is_object() || !j.contains("kind"))
        throw ConfigError(where + " needs a \"kind\"");
    std::string kind = j["kind"].get<std::string>();
    const auto& allowed = layer_keys(kind);
    for (auto& [key, value] : j.items()) {
        (void)value;
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            throw ConfigError("unknown config key: " + where + "." + key);
    }
    auto act = [&](const char* fallback) {
        return activation_from_name(j.value("activation", std::string(fallback)));
    };
    try {
        if (kind == "dense") return LayerSpec::dense(j.at("units").get<std::size_t>(), act("relu"));
        if (kind == "conv2d") {
            std::size_t k = j.at("kernel").get<std::size_t>();
            return LayerSpec::conv2d(j.at("channels").get<std::size_t>(), k, k,
                                     j.value("stride", std::size_t(1)),
                                     j.value("padding", std::size_t(0)), act("relu"));
        }
        if (kind == "maxpool2d") return LayerSpec::maxpool2d(j.value("k", std::size_t(2)));
        if (kind == "dropout") return LayerSpec::dropout(j.at("rate").get<double>());
        return LayerSpec::flatten();
    } catch (const ordered_json::exception& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

std::uint64_t seed_or(const ordered_json& j, std::uint64_t fallback) {
    long long v = j.get<long long>();
    return v < 0 ? fallback : std::uint64_t(v);
}

// Two-way partition for datasets that ship a dedicated test set.
std::pair<Dataset, Dataset> carve_train_val(const Dataset& ds, double train_frac,
                                            std::uint64_t seed) {
    std::size_t n = ds.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t n_tr = std::min<std::size_t>(
        n, std::size_t(std::llround(train_frac * double(n))));
    std::vector<std::size_t> tr(idx.begin(), idx.begin() + n_tr);
    std::vector<std::size_t> va(idx.begin() + n_tr, idx.end());
    if (tr.empty() || va.empty())
        throw std::runtime_error("train/val carve produced an empty split");
    return {subset(ds, tr), subset(ds, va)};
}

Dataset load_dataset(const ordered_json& d, std::uint64_t seed) {
    std::string kind = d["kind"].get<std::string>();
    if (kind == "two_spirals")
        return gen_two_spirals(d["n_per_class"].get<std::size_t>(),
                               d["noise"].get<double>(), seed);
    if (kind == "quadrant_xor")
        return gen_quadrant_xor(d["n_points"].get<std::size_t>(), seed,
                                d["margin"].get<double>());
    if (kind == "idx")
        return load_idx(d["images"].get<std::string>(), d["labels"].get<std::string>(),
                        d["transpose"].get<bool>());
    if (kind == "csv") {
        std::vector<std::string> cols;
        for (const auto& c : d["feature_columns"]) cols.push_back(c.get<std::string>());
        return load_csv(d["path"].get<std::string>(),
                        d["label_column"].get<std::string>(), cols);
    }
    throw ConfigError("unknown dataset.kind: " + kind);
}

}  // namespace

ordered_json parse_config_text(const std::string& text, const std::string& origin) {
    ordered_json user;
    try {
        user = ordered_json::parse(text);
    } catch (const ordered_json::exception& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    ordered_json resolved = default_config();
    ordered_json layers = ordered_json::array();
    if (user.is_object() && user.contains("model") && user["model"].is_object() &&
        user["model"].contains("layers")) {
        layers = user["model"]["layers"];
        user["model"].erase("layers");
    }
    merge_checked(resolved, user, "");
    if (!layers.is_array()) throw ConfigError("model.layers must be an array");
    for (std::size_t i = 0; i < layers.size(); ++i) parse_layer(layers[i], i);
    resolved["model"]["layers"] = layers;
    return resolved;
}

ordered_json load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), path);
}

void apply_override(ordered_json& config, const std::string& assignment) {
    auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override must look like key=value: " + assignment);
    std::string path = assignment.substr(0, eq);
    std::string raw = assignment.substr(eq + 1);

    ordered_json value;
    try {
        value = ordered_json::parse(raw);
    } catch (const ordered_json::exception&) {
        value = raw;  // bare strings need no quoting
    }

    ordered_json* node = &config;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot - start);
        if (!node->is_object() || !node->contains(key))
            throw ConfigError("unknown config key: " + path);
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
    // re-validate types that overrides can break
    if (path == "model.layers" || path.rfind("model.layers.", 0) == 0) {
        const auto& layers = config["model"]["layers"];
        if (!layers.is_array()) throw ConfigError("model.layers must be an array");
        for (std::size_t i = 0; i < layers.size(); ++i) parse_layer(layers[i], i);
    }
}

RunSetup build_run(const ordered_json& resolved) {
    RunSetup setup;
    setup.resolved = resolved;
    ExperimentConfig& cfg = setup.config;

    cfg.experiment_id = resolved["experiment_id"].get<std::string>();
    cfg.seed = std::uint64_t(resolved["seed"].get<long long>());
    cfg.run_dir = resolved["run_dir"].get<std::string>();

    const ordered_json& tr = resolved["training"];
    try {
        cfg.ablation = ablation_from_name(tr["ablation_mode"].get<std::string>());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    cfg.patience = tr["patience"].get<int>();
    cfg.fixed_epochs = tr["fixed_epochs"].get<int>();
    cfg.max_epochs_per_cycle = tr["max_epochs_per_cycle"].get<int>();
    cfg.max_dendrite_rounds = tr["max_dendrite_rounds"].get<int>();
    cfg.batch_size = tr["batch_size"].get<std::size_t>();
    cfg.eval_test_each_epoch = tr["eval_test_each_epoch"].get<bool>();

    std::string loss = tr["loss"].get<std::string>();
    if (loss == "cross_entropy") cfg.loss = LossKind::CrossEntropySoftmax;
    else if (loss == "mse") cfg.loss = LossKind::Mse;
    else throw ConfigError("unknown training.loss: " + loss);

    std::string metric = tr["metric"].get<std::string>();
    if (metric == "accuracy") cfg.metric = Metric::Accuracy;
    else if (metric == "auc") cfg.metric = Metric::Auc;
    else throw ConfigError("unknown training.metric: " + metric);

    std::string oinit = tr["dendrite_output_init"].get<std::string>();
    if (oinit == "zero") cfg.dendrite_output_init = OutputInit::Zero;
    else if (oinit == "random") cfg.dendrite_output_init = OutputInit::Random;
    else throw ConfigError("unknown training.dendrite_output_init: " + oinit);

    const ordered_json& opt = tr["optimizer"];
    std::string okind = opt["kind"].get<std::string>();
    if (okind == "adam") cfg.optimizer.kind = OptimizerSettings::Kind::Adam;
    else if (okind == "sgd") cfg.optimizer.kind = OptimizerSettings::Kind::Sgd;
    else throw ConfigError("unknown training.optimizer.kind: " + okind);
    cfg.optimizer.learning_rate = opt["learning_rate"].get<double>();
    cfg.optimizer.momentum = opt["momentum"].get<double>();
    cfg.optimizer.beta1 = opt["beta1"].get<double>();
    cfg.optimizer.beta2 = opt["beta2"].get<double>();
    cfg.optimizer.eps = opt["eps"].get<double>();

    const ordered_json& cd = resolved["candidates"];
    cfg.candidate.pool_size = cd["pool_size"].get<std::size_t>();
    cfg.candidate.learning_rate = cd["learning_rate"].get<double>();
    cfg.candidate.beta = cd["beta"].get<double>();
    cfg.candidate.patience = cd["patience"].get<int>();
    cfg.candidate.improve_eps = cd["improve_eps"].get<double>();
    cfg.candidate.max_epochs = cd["max_epochs"].get<int>();
    cfg.candidate.batch_size = cd["batch_size"].get<std::size_t>();
    cfg.candidate.dendrite_bias = cd["bias"].get<bool>();
    std::string cact = cd["activation"].get<std::string>();
    if (!cact.empty()) {
        try {
            cfg.candidate.activation = activation_from_name(cact);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    std::string ssrc = cd["sigma_source"].get<std::string>();
    if (ssrc == "error") cfg.candidate.sigma_source = SigmaSource::Error;
    else if (ssrc == "output") cfg.candidate.sigma_source = SigmaSource::Output;
    else throw ConfigError("unknown candidates.sigma_source: " + ssrc);

    const ordered_json& dj = resolved["dataset"];
    std::uint64_t ds_seed = seed_or(dj["seed"], cfg.seed);
    Dataset full = load_dataset(dj, ds_seed);

    SplitSpec sp;
    sp.train = resolved["split"]["train"].get<double>();
    sp.val = resolved["split"]["val"].get<double>();
    sp.test = resolved["split"]["test"].get<double>();
    sp.seed = seed_or(resolved["split"]["seed"], cfg.seed);
    sp.stratified = resolved["split"]["stratified"].get<bool>();

    std::string test_images = dj["test_images"].get<std::string>();
    if (dj["kind"].get<std::string>() == "idx" && !test_images.empty()) {
        // dedicated test files: the main pair is carved into train/val only
        Dataset test = load_idx(test_images, dj["test_labels"].get<std::string>(),
                                dj["transpose"].get<bool>());
        auto [tr, va] = carve_train_val(full, sp.train / (sp.train + sp.val), sp.seed);
        setup.splits.train = std::move(tr);
        setup.splits.val = std::move(va);
        setup.splits.test = std::move(test);
    } else {
        setup.splits = split(full, sp);
    }

    cfg.input_shape = setup.splits.train.sample_shape();
    for (std::size_t i = 0; i < resolved["model"]["layers"].size(); ++i)
        cfg.architecture.push_back(parse_layer(resolved["model"]["layers"][i], i));
    if (cfg.architecture.empty()) throw ConfigError("model.layers must not be empty");
    return setup;
}

}  // namespace pbnn
