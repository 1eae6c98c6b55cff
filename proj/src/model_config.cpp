#include "dynaclr/nn/encoder.hpp"

#include <nlohmann/json.hpp>

using nlohmann::json;

namespace dynaclr::nn {

std::string ModelConfig::to_json() const {
    json j{{"in_channels", in_channels},
           {"stem_kernel", {stem_kernel.z, stem_kernel.y, stem_kernel.x}},
           {"stem_stride", {stem_kernel.z, stem_kernel.y, stem_kernel.x}},
           {"backbone_scale", backbone_scale},
           {"depths", depths},
           {"widths", widths},
           {"feature_dim", feature_dim()},
           {"projection_dim", projection_dim},
           {"input_size", {input_size.z, input_size.y, input_size.x}},
           {"dw_kernel", dw_kernel},
           {"mlp_ratio", mlp_ratio},
           {"layer_scale_init", layer_scale_init},
           {"init_std", init_std}};
    return j.dump(2);
}

namespace {

Size3 size3(const json& v, const char* field) {
    if (!v.is_array() || v.size() != 3) throw ConfigError(std::string(field) + " must be [z, y, x]");
    return {v[0].get<int>(), v[1].get<int>(), v[2].get<int>()};
}

}  // namespace

ModelConfig ModelConfig::from_json(const std::string& text) {
    ModelConfig c;
    try {
        const json j = json::parse(text);
        if (j.contains("backbone_scale")) {
            const auto scale = j["backbone_scale"].get<std::string>();
            if (scale == "tiny")
                c = tiny();
            else if (scale != "desk")
                throw ConfigError("backbone_scale must be 'desk' or 'tiny'");
        }
        if (j.contains("in_channels")) c.in_channels = j["in_channels"].get<int>();
        if (j.contains("stem_kernel")) c.stem_kernel = size3(j["stem_kernel"], "stem_kernel");
        if (j.contains("stem_stride") && size3(j["stem_stride"], "stem_stride") != c.stem_kernel)
            throw ConfigError("stem_stride must equal stem_kernel");
        if (j.contains("depths")) c.depths = j["depths"].get<std::vector<int>>();
        if (j.contains("widths")) c.widths = j["widths"].get<std::vector<int>>();
        if (j.contains("projection_dim")) c.projection_dim = j["projection_dim"].get<int>();
        if (j.contains("input_size")) c.input_size = size3(j["input_size"], "input_size");
        if (j.contains("dw_kernel")) c.dw_kernel = j["dw_kernel"].get<int>();
        if (j.contains("mlp_ratio")) c.mlp_ratio = j["mlp_ratio"].get<int>();
        if (j.contains("layer_scale_init")) c.layer_scale_init = j["layer_scale_init"].get<double>();
        if (j.contains("init_std")) c.init_std = j["init_std"].get<double>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

}  // namespace dynaclr::nn
