#include "preflab/checkpoint.hpp"

#include <fstream>
#include <json.hpp>

#include "preflab/errors.hpp"

namespace preflab {

using nlohmann::json;

namespace {

json tensor_to_json(const Tensor& t) {
    return json{{"shape", t.shape}, {"data", t.data}};
}

Tensor tensor_from_json(const json& j) {
    return Tensor(j.at("shape").get<std::vector<std::size_t>>(),
                  j.at("data").get<std::vector<double>>());
}

json config_to_json(const ModelConfig& c) {
    return json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model}, {"n_layers", c.n_layers},
                {"n_heads", c.n_heads},       {"d_ff", c.d_ff},       {"max_len", c.max_len}};
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size");
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.d_ff = j.at("d_ff");
    c.max_len = j.at("max_len");
    return c;
}

}  // namespace

std::string checkpoint_to_json(const Checkpoint& ckpt) {
    json j;
    j["format"] = "preflab-ckpt-v1";
    j["config"] = config_to_json(ckpt.model.config);
    j["seed"] = ckpt.seed;
    j["step"] = ckpt.step;
    j["rng_state"] = ckpt.rng_state;
    json params = json::object();
    for (const auto& [name, t] : ckpt.model.params) params[name] = tensor_to_json(t);
    j["params"] = params;
    if (ckpt.model.adapter) {
        j["adapter"] = json{{"rank", ckpt.model.adapter->rank},
                            {"alpha", ckpt.model.adapter->alpha},
                            {"targets", ckpt.model.adapter->targets}};
    } else {
        j["adapter"] = nullptr;
    }
    return j.dump();
}

Checkpoint checkpoint_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("checkpoint parse error: ") + e.what());
    }
    if (j.value("format", "") != "preflab-ckpt-v1")
        throw ParseError("unrecognized checkpoint format");
    Checkpoint ckpt;
    ckpt.model.config = config_from_json(j.at("config"));
    ckpt.seed = j.at("seed");
    ckpt.step = j.at("step");
    ckpt.rng_state = j.at("rng_state");
    for (const auto& [name, tj] : j.at("params").items())
        ckpt.model.params.add(name, tensor_from_json(tj));
    if (!j.at("adapter").is_null()) {
        LoraConfig a;
        a.rank = j["adapter"].at("rank");
        a.alpha = j["adapter"].at("alpha");
        a.targets = j["adapter"].at("targets").get<std::vector<std::string>>();
        ckpt.model.adapter = a;
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out << checkpoint_to_json(ckpt) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return checkpoint_from_json(text);
}

}  // namespace preflab
