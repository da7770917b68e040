#include "mst/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace mst {

namespace {

using Kind = CheckpointError::Kind;

struct Reader {
    std::vector<unsigned char> bytes;
    size_t pos = 0;

    void need(size_t n, const char* what) {
        if (pos + n > bytes.size())
            throw CheckpointError(Kind::Truncated, std::string("checkpoint truncated while reading ") + what);
    }
    template <class T>
    T get(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes.data() + pos, sizeof(T));
        pos += sizeof(T);
        return v;
    }
    std::string get_str(size_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
        pos += n;
        return s;
    }
};

template <class T>
void put(std::ofstream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

std::vector<double> RawCheckpoint::values(size_t i) const {
    const RawTensorEntry& e = entries[i];
    size_t n = static_cast<size_t>(e.numel());
    std::vector<double> out(n);
    const unsigned char* src = blob.data() + e.offset;
    if (e.dtype == 1) {
        std::memcpy(out.data(), src, n * sizeof(double));
    } else {
        for (size_t j = 0; j < n; ++j) {
            float f;
            std::memcpy(&f, src + j * sizeof(float), sizeof(float));
            out[j] = static_cast<double>(f);
        }
    }
    return out;
}

RawCheckpoint read_checkpoint_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError(Kind::Structural, "cannot open checkpoint file '" + path + "'");
    Reader r;
    r.bytes.assign(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());

    r.need(4, "magic");
    if (std::memcmp(r.bytes.data(), kCheckpointMagic, 4) != 0)
        throw CheckpointError(Kind::BadMagic, "bad magic: not a MBST checkpoint");
    r.pos = 4;

    RawCheckpoint ck;
    ck.version = r.get<uint32_t>("version");
    if (ck.version != kCheckpointVersion)
        throw CheckpointError(Kind::BadVersion, "unsupported checkpoint version " + std::to_string(ck.version) +
                                                    " (expected " + std::to_string(kCheckpointVersion) + ")");
    auto header_len = r.get<uint64_t>("header length");
    ck.config_json = r.get_str(static_cast<size_t>(header_len), "config header");

    auto count = r.get<uint32_t>("tensor count");
    ck.entries.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        RawTensorEntry e;
        auto name_len = r.get<uint16_t>("tensor name length");
        e.name = r.get_str(name_len, "tensor name");
        e.dtype = r.get<uint8_t>("tensor dtype");
        if (e.dtype > 1)
            throw CheckpointError(Kind::Structural, "tensor '" + e.name + "' has unknown dtype code " +
                                                        std::to_string(static_cast<int>(e.dtype)));
        auto rank = r.get<uint8_t>("tensor rank");
        for (uint8_t d = 0; d < rank; ++d) {
            auto ext = r.get<uint64_t>("tensor dim");
            if (ext == 0)
                throw CheckpointError(Kind::Structural, "tensor '" + e.name + "' declares a zero extent");
            e.shape.push_back(static_cast<int64_t>(ext));
        }
        e.offset = r.get<uint64_t>("tensor offset");
        ck.entries.push_back(std::move(e));
    }

    ck.blob.assign(r.bytes.begin() + static_cast<std::ptrdiff_t>(r.pos), r.bytes.end());

    // The index must tile the blob tightly and in order; a short blob is a
    // truncation, anything else is a malformed header.
    uint64_t expect = 0;
    for (const auto& e : ck.entries) {
        uint64_t bytes = static_cast<uint64_t>(e.numel()) * e.elem_size();
        if (e.offset != expect)
            throw CheckpointError(Kind::Structural, "tensor '" + e.name + "' declares offset " +
                                                        std::to_string(e.offset) + ", expected " +
                                                        std::to_string(expect));
        expect += bytes;
    }
    if (ck.blob.size() < expect)
        throw CheckpointError(Kind::Truncated, "blob truncated: index needs " + std::to_string(expect) +
                                                   " bytes, file provides " + std::to_string(ck.blob.size()));
    if (ck.blob.size() > expect)
        throw CheckpointError(Kind::Structural,
                              "tensor index inconsistent with blob length: index covers " + std::to_string(expect) +
                                  " bytes, file provides " + std::to_string(ck.blob.size()));
    return ck;
}

void write_checkpoint_file(const std::string& path, const std::string& config_json, const NamedParams& tensors) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError(Kind::Structural, "cannot open '" + path + "' for writing");
    os.write(kCheckpointMagic, 4);
    put<uint32_t>(os, kCheckpointVersion);
    put<uint64_t>(os, config_json.size());
    os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    put<uint32_t>(os, static_cast<uint32_t>(tensors.size()));
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        put<uint16_t>(os, static_cast<uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<uint8_t>(os, 1);  // f64
        put<uint8_t>(os, static_cast<uint8_t>(t.rank()));
        for (int64_t d : t.shape()) put<uint64_t>(os, static_cast<uint64_t>(d));
        put<uint64_t>(os, offset);
        offset += static_cast<uint64_t>(t.numel()) * sizeof(double);
    }
    for (const auto& [name, t] : tensors)
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.data().size() * sizeof(double)));
    if (!os) throw CheckpointError(Kind::Structural, "write failed for '" + path + "'");
}

std::string config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["type"] = "mamba-st-model";
    j["d_model"] = cfg.d_model;
    j["n_state"] = cfg.n_state;
    j["patch"] = cfg.patch;
    j["encoder_layers"] = cfg.encoder_layers;
    j["decoder_layers"] = cfg.decoder_layers;
    j["scan_directions"] = cfg.scan_directions;
    j["expansion"] = cfg.expansion;
    j["precision"] = cfg.precision;
    j["seed"] = cfg.seed;
    return j.dump();
}

ModelConfig config_from_json(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::Structural, std::string("config header is not valid JSON: ") + e.what());
    }
    if (j.value("type", "") != "mamba-st-model")
        throw CheckpointError(Kind::Structural, "config header type is not \"mamba-st-model\"");
    ModelConfig cfg;
    try {
        cfg.d_model = j.at("d_model").get<int64_t>();
        cfg.n_state = j.at("n_state").get<int64_t>();
        cfg.patch = j.at("patch").get<int>();
        cfg.encoder_layers = j.at("encoder_layers").get<int>();
        cfg.decoder_layers = j.at("decoder_layers").get<int>();
        cfg.scan_directions = j.at("scan_directions").get<int>();
        cfg.expansion = j.at("expansion").get<int>();
        cfg.precision = j.at("precision").get<std::string>();
        cfg.seed = j.at("seed").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(Kind::Structural, std::string("config header is missing a field: ") + e.what());
    }
    return cfg;
}

void save_checkpoint(const Model& m, const std::string& path) {
    write_checkpoint_file(path, config_to_json(m.cfg), m.named_parameters());
}

Model load_checkpoint(const std::string& path) {
    RawCheckpoint ck = read_checkpoint_file(path);
    ModelConfig cfg = config_from_json(ck.config_json);
    try {
        validate_config(cfg);
    } catch (const ConfigError& e) {
        throw CheckpointError(Kind::Structural, std::string("embedded config rejected: ") + e.what());
    }
    Model m = build_model(cfg, cfg.seed);
    NamedParams params = m.named_parameters();
    if (params.size() != ck.entries.size())
        throw CheckpointError(Kind::Structural,
                              "checkpoint holds " + std::to_string(ck.entries.size()) + " tensors, model needs " +
                                  std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, t] = params[i];
        const RawTensorEntry& e = ck.entries[i];
        if (e.name != name)
            throw CheckpointError(Kind::Structural,
                                  "tensor " + std::to_string(i) + " is '" + e.name + "', expected '" + name + "'");
        if (e.shape != t.shape())
            throw CheckpointError(Kind::Structural, "tensor '" + name + "' has shape " + shape_str(e.shape) +
                                                        " in file, model expects " + shape_str(t.shape()));
        params[i].second.mutable_data() = ck.values(i);
    }
    return m;
}

}  // namespace mst
