#include "dcv/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace dcv {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void save_tensors(const fs::path& path, const ParamStore<float>& tensors, const Metadata& metadata) {
    json header = json::object();
    std::size_t offset = 0;
    for (const auto& [name, v] : tensors) {
        const std::size_t bytes = std::size_t(v.numel()) * sizeof(float);
        header[name] = {{"dtype", "F32"}, {"shape", v.shape()}, {"data_offsets", {offset, offset + bytes}}};
        offset += bytes;
    }
    if (!metadata.empty()) header["__metadata__"] = metadata;
    std::string text = header.dump();
    while (text.size() % 8) text += ' ';

    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), std::streamsize(text.size()));
    for (const auto& [name, v] : tensors)
        out.write(reinterpret_cast<const char*>(v.ptr()), std::streamsize(std::size_t(v.numel()) * sizeof(float)));
    if (!out) throw std::runtime_error("short write to checkpoint " + path.string());
}

std::pair<ParamStore<float>, Metadata> load_tensors(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    if (!in || len > (1ULL << 30)) throw std::runtime_error("corrupt checkpoint header in " + path.string());
    std::string text(len, '\0');
    in.read(text.data(), std::streamsize(len));
    const json header = json::parse(text);
    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    std::pair<ParamStore<float>, Metadata> out;
    for (const auto& [name, entry] : header.items()) {
        if (name == "__metadata__") {
            out.second = entry.get<Metadata>();
            continue;
        }
        if (entry.at("dtype") != "F32") throw std::runtime_error("unsupported dtype for " + name + " in " + path.string());
        Tensor<float> t(entry.at("shape").get<Shape>());
        const auto begin = entry.at("data_offsets")[0].get<std::size_t>();
        const auto end = entry.at("data_offsets")[1].get<std::size_t>();
        if (end - begin != std::size_t(t.numel()) * sizeof(float) || end > blob.size())
            throw std::runtime_error("bad data offsets for " + name + " in " + path.string());
        std::memcpy(t.ptr(), blob.data() + begin, end - begin);
        out.first.add(name, std::move(t));
    }
    return out;
}

namespace {

std::string get(const Metadata& m, const std::string& key) {
    auto it = m.find(key);
    if (it == m.end()) throw std::runtime_error("checkpoint metadata lacks '" + key + "'");
    return it->second;
}

void expect_kind(const Metadata& m, const char* kind, const fs::path& path) {
    if (get(m, "kind") != kind) throw std::runtime_error(path.string() + " is not a " + kind + " checkpoint");
}

}  // namespace

void save_autoencoder(const fs::path& path, const AEParams<float>& p) {
    Metadata m;
    m["kind"] = "autoencoder";
    m["config"] = p.config.name();
    m["chunk_size"] = std::to_string(p.config.chunk_size);
    m["temporal_mode"] = to_string(p.config.temporal_mode);
    m["widths"] = json{{"base_width", p.widths.base_width},
                       {"max_width", p.widths.max_width},
                       {"blocks_per_stage", p.widths.blocks_per_stage},
                       {"norm_group_size", p.widths.norm_group_size}}
                      .dump();
    m["latent_mean"] = json(p.latent_mean).dump();
    m["latent_std"] = json(p.latent_std).dump();
    save_tensors(path, p.weights, m);
}

AEParams<float> load_autoencoder(const fs::path& path) {
    auto [weights, m] = load_tensors(path);
    expect_kind(m, "autoencoder", path);
    AEConfig cfg = AEConfig::parse(get(m, "config"));
    cfg.chunk_size = std::stol(get(m, "chunk_size"));
    cfg.temporal_mode = temporal_mode_from_string(get(m, "temporal_mode"));
    const json w = json::parse(get(m, "widths"));
    WidthSpec ws;
    ws.base_width = w.at("base_width");
    ws.max_width = w.at("max_width");
    ws.blocks_per_stage = w.at("blocks_per_stage");
    ws.norm_group_size = w.at("norm_group_size");

    AEParams<float> p = build_autoencoder<float>(cfg, ws, 0);
    for (auto& [name, v] : p.weights) {
        if (!weights.contains(name)) throw std::runtime_error("checkpoint " + path.string() + " lacks " + name);
        const Tensor<float>& src = weights.at(name).value();
        if (src.shape != v.shape()) throw ShapeError("checkpoint tensor " + name + " has shape " + shape_str(src.shape));
        v.mutable_value() = src;
    }
    if (weights.size() != p.weights.size()) throw std::runtime_error("checkpoint " + path.string() + " has unexpected tensors");
    p.latent_mean = json::parse(get(m, "latent_mean")).get<std::vector<double>>();
    p.latent_std = json::parse(get(m, "latent_std")).get<std::vector<double>>();
    return p;
}

void save_dit(const fs::path& path, const DiTModel<float>& model) {
    const DiTConfig& c = model.config;
    Metadata m;
    m["kind"] = "dit";
    m["config"] = json{{"latent_channels", c.latent_channels}, {"patch_size", c.patch_size},
                       {"embed_dim", c.embed_dim},             {"depth", c.depth},
                       {"heads", c.heads},                     {"num_classes", c.num_classes},
                       {"max_tokens", c.max_tokens},           {"mlp_ratio", c.mlp_ratio},
                       {"time_freq_dim", c.time_freq_dim}}
                      .dump();
    json lora = json::object();
    for (const auto& [t, spec] : model.lora) lora[t] = {{"rank", spec.rank}, {"alpha", spec.alpha}};
    m["lora"] = lora.dump();
    save_tensors(path, model.weights, m);
}

DiTModel<float> load_dit(const fs::path& path) {
    auto [weights, m] = load_tensors(path);
    expect_kind(m, "dit", path);
    const json j = json::parse(get(m, "config"));
    DiTModel<float> model;
    DiTConfig& c = model.config;
    c.latent_channels = j.at("latent_channels");
    c.patch_size = j.at("patch_size");
    c.embed_dim = j.at("embed_dim");
    c.depth = j.at("depth");
    c.heads = j.at("heads");
    c.num_classes = j.at("num_classes");
    c.max_tokens = j.at("max_tokens");
    c.mlp_ratio = j.at("mlp_ratio");
    c.time_freq_dim = j.at("time_freq_dim");
    c.validate();
    const json lora = json::parse(get(m, "lora"));
    for (const auto& [t, spec] : lora.items())
        model.lora[t] = LoRASpec{spec.at("rank").get<Index>(), spec.at("alpha").get<double>()};
    model.weights = std::move(weights);
    return model;
}

}  // namespace dcv
