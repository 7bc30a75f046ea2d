#include <fstream>
#include <set>

#include <json.hpp>

#include "sarl/trainer.hpp"

namespace sarl {

using nlohmann::json;

namespace {

constexpr int kConfigSchemaVersion = 1;

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::invalid_argument("config: unknown key '" + scope + it.key() + "'");
}

}  // namespace

json train_config_to_json(const TrainConfig& c) {
    return json{
        {"schema_version", kConfigSchemaVersion},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"base_lr", c.base_lr},
        {"weight_decay", c.weight_decay},
        {"beta1", c.beta1},
        {"beta2", c.beta2},
        {"ema_momentum", c.ema_momentum},
        {"seed", c.seed},
        {"cosine_lr", c.cosine_lr},
        {"modality", modality_to_string(c.modality)},
        {"encoder",
         {{"input_size", c.encoder.input_size},
          {"stage_channels", c.encoder.stage_channels},
          {"rep_dim", c.encoder.rep_dim},
          {"proj_dim", c.encoder.proj_dim}}},
        {"loss",
         {{"lambda_sal", c.loss.lambda_sal},
          {"lambda_ppda", c.loss.lambda_ppda},
          {"lambda_ram", c.loss.lambda_ram},
          {"num_prototypes", c.loss.num_prototypes},
          {"temperature", c.loss.temperature},
          {"ppda_grid", c.loss.ppda_grid},
          {"ram_grid", c.loss.ram_grid},
          {"use_sal", c.loss.use_sal},
          {"use_ppda", c.loss.use_ppda},
          {"use_ram", c.loss.use_ram},
          {"symmetrize_spatial", c.loss.symmetrize_spatial},
          {"kl_eps", c.loss.kl_eps}}},
        {"augment",
         {{"area_min", c.augment.area_min},
          {"area_max", c.augment.area_max},
          {"jitter_brightness", c.augment.jitter_brightness},
          {"jitter_contrast", c.augment.jitter_contrast},
          {"jitter_saturation", c.augment.jitter_saturation},
          {"jitter_hue", c.augment.jitter_hue},
          {"p_hflip", c.augment.p_hflip},
          {"p_jitter", c.augment.p_jitter},
          {"p_grayscale", c.augment.p_grayscale},
          {"norm_mean", {c.augment.norm_mean[0], c.augment.norm_mean[1], c.augment.norm_mean[2]}},
          {"norm_std", {c.augment.norm_std[0], c.augment.norm_std[1], c.augment.norm_std[2]}}}},
    };
}

TrainConfig train_config_from_json(const json& j) {
    reject_unknown_keys(j, {"schema_version", "epochs", "batch_size", "base_lr", "weight_decay",
                            "beta1", "beta2", "ema_momentum", "seed", "cosine_lr", "modality",
                            "encoder", "loss", "augment"},
                        "");
    if (!j.contains("schema_version"))
        throw std::invalid_argument("config: missing schema_version");
    if (j.at("schema_version").get<int>() != kConfigSchemaVersion)
        throw std::runtime_error("config: schema_version mismatch");

    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.base_lr = j.value("base_lr", c.base_lr);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.ema_momentum = j.value("ema_momentum", c.ema_momentum);
    c.seed = j.value("seed", c.seed);
    c.cosine_lr = j.value("cosine_lr", c.cosine_lr);
    if (j.contains("modality")) c.modality = modality_from_string(j.at("modality"));

    if (j.contains("encoder")) {
        const json& e = j.at("encoder");
        reject_unknown_keys(e, {"input_size", "stage_channels", "rep_dim", "proj_dim"},
                            "encoder.");
        c.encoder.input_size = e.value("input_size", c.encoder.input_size);
        if (e.contains("stage_channels")) {
            auto sc = e.at("stage_channels").get<std::vector<int>>();
            if (sc.size() != 4)
                throw std::invalid_argument("config: encoder.stage_channels needs 4 entries");
            std::copy(sc.begin(), sc.end(), c.encoder.stage_channels.begin());
        }
        c.encoder.rep_dim = e.value("rep_dim", c.encoder.rep_dim);
        c.encoder.proj_dim = e.value("proj_dim", c.encoder.proj_dim);
    }

    if (j.contains("loss")) {
        const json& l = j.at("loss");
        reject_unknown_keys(l,
                            {"lambda_sal", "lambda_ppda", "lambda_ram", "num_prototypes",
                             "temperature", "ppda_grid", "ram_grid", "use_sal", "use_ppda",
                             "use_ram", "symmetrize_spatial", "kl_eps"},
                            "loss.");
        c.loss.lambda_sal = l.value("lambda_sal", c.loss.lambda_sal);
        c.loss.lambda_ppda = l.value("lambda_ppda", c.loss.lambda_ppda);
        c.loss.lambda_ram = l.value("lambda_ram", c.loss.lambda_ram);
        c.loss.num_prototypes = l.value("num_prototypes", c.loss.num_prototypes);
        c.loss.temperature = l.value("temperature", c.loss.temperature);
        c.loss.ppda_grid = l.value("ppda_grid", c.loss.ppda_grid);
        c.loss.ram_grid = l.value("ram_grid", c.loss.ram_grid);
        c.loss.use_sal = l.value("use_sal", c.loss.use_sal);
        c.loss.use_ppda = l.value("use_ppda", c.loss.use_ppda);
        c.loss.use_ram = l.value("use_ram", c.loss.use_ram);
        c.loss.symmetrize_spatial = l.value("symmetrize_spatial", c.loss.symmetrize_spatial);
        c.loss.kl_eps = l.value("kl_eps", c.loss.kl_eps);
    }

    if (j.contains("augment")) {
        const json& a = j.at("augment");
        reject_unknown_keys(a,
                            {"area_min", "area_max", "jitter_brightness", "jitter_contrast",
                             "jitter_saturation", "jitter_hue", "p_hflip", "p_jitter",
                             "p_grayscale", "norm_mean", "norm_std"},
                            "augment.");
        c.augment.area_min = a.value("area_min", c.augment.area_min);
        c.augment.area_max = a.value("area_max", c.augment.area_max);
        c.augment.jitter_brightness = a.value("jitter_brightness", c.augment.jitter_brightness);
        c.augment.jitter_contrast = a.value("jitter_contrast", c.augment.jitter_contrast);
        c.augment.jitter_saturation = a.value("jitter_saturation", c.augment.jitter_saturation);
        c.augment.jitter_hue = a.value("jitter_hue", c.augment.jitter_hue);
        c.augment.p_hflip = a.value("p_hflip", c.augment.p_hflip);
        c.augment.p_jitter = a.value("p_jitter", c.augment.p_jitter);
        c.augment.p_grayscale = a.value("p_grayscale", c.augment.p_grayscale);
        for (int i = 0; i < 3; ++i) {
            if (a.contains("norm_mean")) c.augment.norm_mean[i] = a.at("norm_mean")[i];
            if (a.contains("norm_std")) c.augment.norm_std[i] = a.at("norm_std")[i];
        }
    }
    c.validate();
    return c;
}

json view_params_to_json(const ViewParams& p) {
    json j{{"crop", {p.crop.top, p.crop.left, p.crop.height, p.crop.width}},
           {"out_size", p.out_size},
           {"hflip", p.hflip},
           {"grayscale", p.grayscale},
           {"blur", p.blur}};
    if (p.jitter) {
        j["jitter"] = {p.jitter->brightness, p.jitter->contrast, p.jitter->saturation,
                       p.jitter->hue};
    } else {
        j["jitter"] = nullptr;
    }
    return j;
}

}  // namespace sarl
