#include "ssmlora/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

namespace ssmlora {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr char kMagic[8] = {'S', 'S', 'M', 'L', 'C', 'K', '0', '1'};

void put_u64(std::string& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double v) {
    put_u64(buf, std::bit_cast<std::uint64_t>(v));
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw IoError("checkpoint truncated");
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64() { return std::bit_cast<double>(u64()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

ordered_json meta_json(const CheckpointMeta& meta) {
    ordered_json j;
    j["plan"] = meta.plan;
    j["task"] = meta.task_kind;
    j["dims"] = {{"layers", meta.dims.layers},
                 {"width", meta.dims.width},
                 {"fused_out", meta.dims.fused_out},
                 {"ffn_out", meta.dims.ffn_out}};
    j["rank"] = meta.rank;
    j["model_seed"] = meta.model_seed;
    j["adapter_seed"] = meta.adapter_seed;
    j["train_seed"] = meta.train_seed;
    return j;
}

CheckpointMeta meta_from_json(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw IoError(std::string("checkpoint manifest unreadable: ") + e.what());
    }
    CheckpointMeta meta;
    try {
        meta.plan = j.at("plan").get<std::string>();
        meta.task_kind = j.at("task").get<std::string>();
        meta.dims.layers = j.at("dims").at("layers").get<std::size_t>();
        meta.dims.width = j.at("dims").at("width").get<std::size_t>();
        meta.dims.fused_out = j.at("dims").at("fused_out").get<std::size_t>();
        meta.dims.ffn_out = j.at("dims").at("ffn_out").get<std::size_t>();
        meta.rank = j.at("rank").get<std::size_t>();
        meta.model_seed = j.at("model_seed").get<std::uint64_t>();
        meta.adapter_seed = j.at("adapter_seed").get<std::uint64_t>();
        meta.train_seed = j.at("train_seed").get<std::uint64_t>();
    } catch (const std::exception& e) {
        throw IoError(std::string("checkpoint manifest incomplete: ") + e.what());
    }
    return meta;
}

}  // namespace

void save_checkpoint(const std::string& path, const FrozenEncoder& model,
                     const CheckpointMeta& meta) {
    std::string buf(kMagic, sizeof(kMagic));
    const std::string manifest = meta_json(meta).dump();
    put_u64(buf, manifest.size());
    buf += manifest;

    const auto params = named_trainable(model);
    put_u64(buf, params.size());
    for (const auto& [name, t] : params) {
        put_u64(buf, name.size());
        buf += name;
        put_u64(buf, t.rank());
        for (std::size_t d : t.shape()) put_u64(buf, d);
        const double* p = t.data();
        for (std::size_t i = 0; i < t.numel(); ++i) put_f64(buf, p[i]);
    }

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("short write to '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    Reader r{buf};
    if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw IoError("'" + path + "' is not a checkpoint file");

    LoadedCheckpoint out;
    out.meta = meta_from_json(r.bytes(r.u64()));
    const std::uint64_t n = r.u64();
    for (std::uint64_t k = 0; k < n; ++k) {
        TensorBlob blob;
        blob.name = r.bytes(r.u64());
        const std::uint64_t ndim = r.u64();
        std::size_t numel = 1;
        for (std::uint64_t d = 0; d < ndim; ++d) {
            blob.shape.push_back(r.u64());
            numel *= blob.shape.back();
        }
        blob.values.resize(numel);
        for (std::size_t i = 0; i < numel; ++i) blob.values[i] = r.f64();
        out.tensors.push_back(std::move(blob));
    }
    if (r.pos != buf.size()) throw IoError("checkpoint has trailing bytes");
    return out;
}

void restore_checkpoint(FrozenEncoder& model, const LoadedCheckpoint& loaded) {
    std::map<std::string, Tensor> live;
    for (auto& [name, t] : named_trainable(model)) live.emplace(name, t);
    if (live.size() != loaded.tensors.size())
        throw IoError("checkpoint holds " + std::to_string(loaded.tensors.size()) +
                      " tensors, model expects " + std::to_string(live.size()));
    for (const TensorBlob& blob : loaded.tensors) {
        auto it = live.find(blob.name);
        if (it == live.end()) throw IoError("checkpoint tensor '" + blob.name + "' has no home");
        Tensor& t = it->second;
        if (t.shape() != blob.shape)
            throw IoError("checkpoint tensor '" + blob.name + "' shape mismatch");
        std::memcpy(t.data(), blob.values.data(), blob.values.size() * sizeof(double));
    }
}

}  // namespace ssmlora
