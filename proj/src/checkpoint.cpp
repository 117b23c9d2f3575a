#include "ilm/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ilm/errors.hpp"

namespace ilm {

namespace {

constexpr char kMagic[4] = {'I', 'L', 'M', '1'};

nlohmann::json config_to_json(const EncoderConfig& cfg) {
    return {{"vocab_size", cfg.vocab_size},
            {"embed_dim", cfg.embed_dim},
            {"n_layers", cfg.n_layers},
            {"n_attn_heads", cfg.n_attn_heads},
            {"ffn_dim", cfg.ffn_dim},
            {"max_seq_len", cfg.max_seq_len},
            {"seed", cfg.seed},
            {"ensemble", cfg.ensemble == EnsembleMode::sum ? "sum" : "mean"}};
}

EncoderConfig config_from_json(const nlohmann::json& j) {
    EncoderConfig cfg;
    cfg.vocab_size = j.at("vocab_size").get<int64_t>();
    cfg.embed_dim = j.at("embed_dim").get<int64_t>();
    cfg.n_layers = j.at("n_layers").get<int64_t>();
    cfg.n_attn_heads = j.at("n_attn_heads").get<int64_t>();
    cfg.ffn_dim = j.at("ffn_dim").get<int64_t>();
    cfg.max_seq_len = j.at("max_seq_len").get<int64_t>();
    cfg.seed = j.at("seed").get<uint64_t>();
    const std::string mode = j.at("ensemble").get<std::string>();
    if (mode == "sum") {
        cfg.ensemble = EnsembleMode::sum;
    } else if (mode == "mean") {
        cfg.ensemble = EnsembleMode::mean;
    } else {
        throw ConfigError("checkpoint: unknown ensemble mode '" + mode + "'");
    }
    return cfg;
}

} // namespace

void save_checkpoint(const std::string& path, const InvariantModel& model, int64_t step,
                     const std::string& vocab_hash) {
    InvariantModel& m = const_cast<InvariantModel&>(model);
    nlohmann::json header;
    header["version"] = 1;
    header["config"] = config_to_json(model.config());
    header["n_heads"] = model.n_heads();
    header["step"] = step;
    header["vocab_hash"] = vocab_hash;
    auto& tensors = header["tensors"] = nlohmann::json::array();
    std::vector<const TensorImpl*> order;
    m.visit_params([&](const std::string& name, Tensor& t) {
        tensors.push_back({{"name", name}, {"shape", t.shape()}});
        order.push_back(t.impl());
    });
    const std::string header_str = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw IoError("cannot open '" + tmp + "' for writing");
        }
        out.write(kMagic, 4);
        const uint64_t hlen = header_str.size();
        out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        out.write(header_str.data(), static_cast<std::streamsize>(hlen));
        for (const TensorImpl* t : order) {
            out.write(reinterpret_cast<const char*>(t->data.data()),
                      static_cast<std::streamsize>(t->data.size() * sizeof(float)));
        }
        if (!out) {
            throw IoError("write failed for '" + tmp + "'");
        }
    }
    std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open checkpoint '" + path + "'");
    }
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("'" + path + "' is not an ILM1 checkpoint");
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen > (1ull << 30)) {
        throw IoError("'" + path + "': corrupt header length");
    }
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) {
        throw IoError("'" + path + "': truncated header");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const nlohmann::json::parse_error& e) {
        throw IoError("'" + path + "': bad header json: " + e.what());
    }
    if (header.at("version").get<int>() != 1) {
        throw IoError("'" + path + "': unsupported checkpoint version");
    }

    LoadedCheckpoint out;
    const EncoderConfig cfg = config_from_json(header.at("config"));
    const int n_heads = header.at("n_heads").get<int>();
    out.step = header.at("step").get<int64_t>();
    out.vocab_hash = header.at("vocab_hash").get<std::string>();
    out.model = InvariantModel::init(cfg, n_heads, InitMode::shared_head_copy);

    const auto& tensors = header.at("tensors");
    size_t idx = 0;
    bool ok = true;
    out.model.visit_params([&](const std::string& name, Tensor& t) {
        if (!ok) {
            return;
        }
        if (idx >= tensors.size()) {
            ok = false;
            return;
        }
        const auto& entry = tensors[idx++];
        if (entry.at("name").get<std::string>() != name ||
            entry.at("shape").get<Shape>() != t.shape()) {
            ok = false;
            return;
        }
        in.read(reinterpret_cast<char*>(t.data().data()),
                static_cast<std::streamsize>(t.data().size() * sizeof(float)));
        if (!in) {
            ok = false;
        }
    });
    if (!ok || idx != tensors.size()) {
        throw IoError("'" + path + "': tensor list does not match model layout");
    }
    return out;
}

} // namespace ilm
