#include "medlsdm/run_config.hpp"

#include <filesystem>
#include <fstream>

#include "medlsdm/errors.hpp"

namespace medlsdm {

using nlohmann::json;

json RunConfig::defaults() {
    return json{
        {"seed", 1234},
        {"volume", {{"height", 32}, {"width", 32}, {"depth", 8}, {"channels", 1}}},
        {"data", {{"num_train", 64}, {"num_test", 16}, {"num_classes", 3}}},
        {"compression",
         {{"t", 2}, {"n_z", 4}, {"K", 64}, {"base_channels", 8}, {"num_groups", 4}}},
        {"vqgan",
         {{"steps", 2000},
          {"batch_size", 2},
          {"lr", 3e-4},
          {"beta1", 0.9},
          {"beta2", 0.999},
          {"perceptual_weight", 1.0},
          {"adv_weight", 1.0},
          {"disc_slices", 2}}},
        {"diffusion", {{"T", 300}, {"cosine_s", 0.008}}},
        {"denoiser",
         {{"widths", json::array({16, 32})},
          {"num_groups", 8},
          {"time_dim", 32},
          {"sem_width", 8},
          {"attention_levels", json::array()}}},
        {"sdm", {{"steps", 5000}, {"batch_size", 2}, {"lr", 3e-4}}},
        {"metrics", {{"feature_dim", 64}, {"feature_seed", 9001}}},
        {"seg",
         {{"classes", 2},
          {"in_channels", 1},
          {"kernel", 3},
          {"lr", 5e-5},
          {"batch_size", 4},
          {"patch", json::array({32, 32, 8})},
          {"epochs", 10},
          {"base_channels", 16}}},
    };
}

namespace {

std::string type_name(const json& v) {
    if (v.is_number_integer() || v.is_number_unsigned()) return "integer";
    if (v.is_number_float()) return "number";
    if (v.is_string()) return "string";
    if (v.is_boolean()) return "boolean";
    if (v.is_array()) return "array";
    if (v.is_object()) return "object";
    return "null";
}

bool type_compatible(const json& def, const json& val) {
    if (def.is_number_float() && val.is_number())
        return true;  // integers may stand in for floats
    if (def.is_number_integer() && val.is_number_integer())
        return true;
    return type_name(def) == type_name(val);
}

void merge_checked(json& base, const json& overlay, const std::string& prefix) {
    for (auto it = overlay.begin(); it != overlay.end(); ++it) {
        const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (!base.contains(it.key()))
            throw ConfigError("unknown config key: " + path);
        json& slot = base[it.key()];
        if (slot.is_object()) {
            if (!it->is_object())
                throw ConfigError("config key " + path + " expects an object");
            merge_checked(slot, *it, path);
        } else {
            if (!type_compatible(slot, *it))
                throw ConfigError("config key " + path + " expects " + type_name(slot) +
                                  ", got " + type_name(*it));
            slot = *it;
        }
    }
}

json parse_override_value(const json& def, const std::string& text, const std::string& path) {
    try {
        if (def.is_array() || def.is_boolean())
            return json::parse(text);
        if (def.is_number_integer())
            return json(std::stoll(text));
        if (def.is_number_float())
            return json(std::stod(text));
        return json(text);
    } catch (const std::exception&) {
        throw ConfigError("config key " + path + ": cannot parse value '" + text + "'");
    }
}

}  // namespace

RunConfig RunConfig::resolve(const std::string& config_path,
                             const std::vector<std::string>& overrides,
                             std::optional<uint64_t> seed_flag) {
    RunConfig cfg;
    cfg.doc_ = defaults();

    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in)
            throw ConfigError("cannot open config file " + config_path);
        json file_doc;
        if (in.peek() != std::ifstream::traits_type::eof()) {
            try {
                file_doc = json::parse(in);
            } catch (const json::exception& e) {
                throw ConfigError("config file " + config_path + ": " + e.what());
            }
        } else {
            file_doc = json::object();  // empty file: all defaults
        }
        merge_checked(cfg.doc_, file_doc, "");
    }

    for (const std::string& kv : overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set expects key=value, got '" + kv + "'");
        const std::string path  = kv.substr(0, eq);
        const std::string value = kv.substr(eq + 1);

        json* slot = &cfg.doc_;
        std::string walked;
        size_t start = 0;
        while (true) {
            const auto dot       = path.find('.', start);
            const std::string kk = path.substr(start, dot == std::string::npos ? dot : dot - start);
            walked               = walked.empty() ? kk : walked + "." + kk;
            if (!slot->contains(kk))
                throw ConfigError("unknown config key: " + walked);
            slot = &(*slot)[kk];
            if (dot == std::string::npos)
                break;
            start = dot + 1;
            if (!slot->is_object())
                throw ConfigError("config key " + walked + " is not an object");
        }
        if (slot->is_object())
            throw ConfigError("config key " + path + " is an object, not a value");
        json parsed = parse_override_value(*slot, value, path);
        if (!type_compatible(*slot, parsed))
            throw ConfigError("config key " + path + " expects " + type_name(*slot));
        *slot = parsed;
    }

    if (seed_flag)
        cfg.doc_["seed"] = *seed_flag;

    cfg.validate();
    return cfg;
}

uint64_t RunConfig::seed() const { return doc_.at("seed").get<uint64_t>(); }

std::array<int64_t, 3> RunConfig::volume_shape() const {
    const auto& v = doc_.at("volume");
    return {v.at("height").get<int64_t>(), v.at("width").get<int64_t>(),
            v.at("depth").get<int64_t>()};
}

int64_t RunConfig::data_num_train() const { return doc_.at("data").at("num_train"); }
int64_t RunConfig::data_num_test() const { return doc_.at("data").at("num_test"); }
int32_t RunConfig::data_num_classes() const { return doc_.at("data").at("num_classes"); }

CompressionConfig RunConfig::compression() const {
    const auto& c = doc_.at("compression");
    CompressionConfig out;
    out.t             = c.at("t");
    out.n_z           = c.at("n_z");
    out.K             = c.at("K");
    out.base_channels = c.at("base_channels");
    out.num_groups    = c.at("num_groups");
    out.in_channels   = doc_.at("volume").at("channels");
    return out;
}

DenoiserConfig RunConfig::denoiser() const {
    const auto& d = doc_.at("denoiser");
    DenoiserConfig out;
    out.widths           = d.at("widths").get<std::vector<int64_t>>();
    out.num_groups       = d.at("num_groups");
    out.time_dim         = d.at("time_dim");
    out.sem_width        = d.at("sem_width");
    out.attention_levels = d.at("attention_levels").get<std::vector<int64_t>>();
    out.num_classes      = data_num_classes();
    out.latent_channels  = doc_.at("compression").at("n_z");
    out.compression_t    = doc_.at("compression").at("t");
    return out;
}

PipelineConfig RunConfig::pipeline() const {
    PipelineConfig p;
    p.volume_shape = volume_shape();
    p.compression  = compression();
    p.denoiser     = denoiser();
    p.diffusion_T  = doc_.at("diffusion").at("T");
    p.cosine_s     = doc_.at("diffusion").at("cosine_s");

    const auto& v               = doc_.at("vqgan");
    p.vqgan_steps               = v.at("steps");
    p.vqgan_batch               = v.at("batch_size");
    p.vqgan_train.lr            = v.at("lr");
    p.vqgan_train.beta1         = v.at("beta1");
    p.vqgan_train.beta2         = v.at("beta2");
    p.vqgan_train.perceptual_weight = v.at("perceptual_weight");
    p.vqgan_train.adv_weight    = v.at("adv_weight");
    p.vqgan_train.disc_slices   = v.at("disc_slices");

    const auto& s = doc_.at("sdm");
    p.sdm_steps   = s.at("steps");
    p.sdm_batch   = s.at("batch_size");
    p.sdm_lr      = s.at("lr");
    return p;
}

SegHarnessConfig RunConfig::seg() const {
    const auto& s = doc_.at("seg");
    SegHarnessConfig out;
    out.classes     = s.at("classes");
    out.in_channels = s.at("in_channels");
    out.kernel      = s.at("kernel");
    out.lr          = s.at("lr");
    out.batch_size  = s.at("batch_size");
    const auto patch = s.at("patch").get<std::vector<int64_t>>();
    if (patch.size() != 3)
        throw ConfigError("config key seg.patch expects 3 entries");
    out.patch         = {patch[0], patch[1], patch[2]};
    out.epochs        = s.at("epochs");
    out.base_channels = s.at("base_channels");
    return out;
}

int64_t RunConfig::metrics_feature_dim() const { return doc_.at("metrics").at("feature_dim"); }
uint64_t RunConfig::metrics_feature_seed() const { return doc_.at("metrics").at("feature_seed"); }

void RunConfig::validate() const {
    const auto shape = volume_shape();
    for (int axis = 0; axis < 3; ++axis)
        if (shape[static_cast<size_t>(axis)] < 1)
            throw ConfigError("config keys volume.{height,width,depth} must be >= 1");

    const int64_t t = doc_.at("compression").at("t");
    if (t < 1)
        throw ConfigError("config key compression.t must be >= 1");
    const char* names[3] = {"volume.height", "volume.width", "volume.depth"};
    for (int axis = 0; axis < 3; ++axis)
        if (shape[static_cast<size_t>(axis)] % t != 0)
            throw ConfigError(std::string("config key ") + names[axis] + "=" +
                              std::to_string(shape[static_cast<size_t>(axis)]) +
                              " not divisible by compression.t=" + std::to_string(t));

    if (data_num_train() < 1 || data_num_test() < 1)
        throw ConfigError("config keys data.num_train and data.num_test must be >= 1");
    if (data_num_classes() < 2)
        throw ConfigError("config key data.num_classes must be >= 2");

    // Full structural checks on the derived configs.
    compression().validate();
    denoiser().validate();
    seg().validate();
    if (doc_.at("diffusion").at("T").get<int64_t>() < 1)
        throw ConfigError("config key diffusion.T must be >= 1");
}

void RunConfig::echo(const std::string& out_dir) const {
    std::filesystem::create_directories(out_dir);
    std::ofstream out(out_dir + "/config.json");
    out << doc_.dump(2) << "\n";
}

}  // namespace medlsdm
