#include "gqkva/serialize.hpp"

#include <bit>
#include <fstream>

#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace gqkva {

namespace {

constexpr const char* kTensorMagic = "GQKVATNSR 1";
constexpr const char* kCheckpointMagic = "GQKVACKPT 1";

void write_line(std::ofstream& out, const std::string& line) {
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    out.put('\n');
}

std::string read_line(std::ifstream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) {
        throw IoError(path + ": truncated header");
    }
    return line;
}

void write_raw_f32(std::ofstream& out, const Tensor& t) {
    if (t.dtype() == DType::F32) {
        auto d = t.data<float>();
        out.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size() * sizeof(float)));
    } else {
        Tensor f = t.astype(DType::F32);
        auto d = f.data<float>();
        out.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size() * sizeof(float)));
    }
}

void read_raw_f32(std::ifstream& in, Tensor& t, const std::string& path) {
    auto d = t.data<float>();
    in.read(reinterpret_cast<char*>(d.data()),
            static_cast<std::streamsize>(d.size() * sizeof(float)));
    if (in.gcount() != static_cast<std::streamsize>(d.size() * sizeof(float))) {
        throw IoError(path + ": truncated weight data");
    }
}

}  // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    nlohmann::json header;
    header["shape"] = t.shape();
    header["dtype"] = dtype_name(t.dtype());
    write_line(out, kTensorMagic);
    write_line(out, header.dump());
    if (t.dtype() == DType::F32) {
        auto d = t.data<float>();
        out.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size() * sizeof(float)));
    } else {
        auto d = t.data<double>();
        out.write(reinterpret_cast<const char*>(d.data()),
                  static_cast<std::streamsize>(d.size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed for " + path);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    if (read_line(in, path) != kTensorMagic) {
        throw IoError(path + ": not a tensor file");
    }
    nlohmann::json header = nlohmann::json::parse(read_line(in, path));
    Shape shape = header.at("shape").get<Shape>();
    DType dtype = parse_dtype(header.at("dtype").get<std::string>());
    Tensor t = Tensor::zeros(shape, dtype);
    const size_t elem = dtype == DType::F32 ? sizeof(float) : sizeof(double);
    const std::streamsize bytes = static_cast<std::streamsize>(
        static_cast<size_t>(t.numel()) * elem);
    char* dst = dtype == DType::F32 ? reinterpret_cast<char*>(t.data<float>().data())
                                    : reinterpret_cast<char*>(t.data<double>().data());
    in.read(dst, bytes);
    if (in.gcount() != bytes) throw IoError(path + ": truncated tensor data");
    in.peek();
    if (!in.eof()) throw IoError(path + ": trailing bytes after tensor data");
    return t;
}

std::string config_to_json_string(const ViTConfig& cfg) {
    nlohmann::json j;
    j["image_size"] = cfg.image_size;
    j["patch_size"] = cfg.patch_size;
    j["in_channels"] = cfg.in_channels;
    j["d"] = cfg.d;
    j["depth"] = cfg.depth;
    j["h"] = cfg.h;
    j["mlp_ratio"] = cfg.mlp_ratio;
    j["num_classes"] = cfg.num_classes;
    j["scheme"] = cfg.scheme.label;
    j["scale_mode"] = scale_mode_name(cfg.scale_mode);
    j["drop_rate"] = cfg.drop_rate;
    return j.dump();
}

ViTConfig config_from_json_string(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ViTConfig cfg;
    cfg.image_size = j.at("image_size").get<int64_t>();
    cfg.patch_size = j.at("patch_size").get<int64_t>();
    cfg.in_channels = j.at("in_channels").get<int64_t>();
    cfg.d = j.at("d").get<int64_t>();
    cfg.depth = j.at("depth").get<int64_t>();
    cfg.h = j.at("h").get<int64_t>();
    cfg.mlp_ratio = j.at("mlp_ratio").get<int64_t>();
    cfg.num_classes = j.at("num_classes").get<int64_t>();
    cfg.scheme = parse_scheme(j.at("scheme").get<std::string>(), cfg.d, cfg.h);
    cfg.scale_mode = parse_scale_mode(j.at("scale_mode").get<std::string>());
    cfg.drop_rate = j.value("drop_rate", 0.0);
    cfg.validate();
    return cfg;
}

void save_checkpoint(const std::string& path, const ViTConfig& cfg, const ViTWeights& w) {
    cfg.validate();
    const int64_t expected = count_params(cfg).total;
    if (w.element_count() != expected) {
        throw IoError("checkpoint: weights hold " + std::to_string(w.element_count()) +
                      " elements, config requires " + std::to_string(expected));
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    write_line(out, kCheckpointMagic);
    write_line(out, config_to_json_string(cfg));
    w.for_each([&](const std::string&, const Tensor& t, ParamKind) { write_raw_f32(out, t); });
    if (!out) throw IoError("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    if (read_line(in, path) != kCheckpointMagic) {
        throw IoError(path + ": not a checkpoint file");
    }
    Checkpoint ckpt;
    ckpt.config = config_from_json_string(read_line(in, path));
    ckpt.weights = zero_weights(ckpt.config, DType::F32);
    ckpt.weights.for_each(
        [&](const std::string&, Tensor& t, ParamKind) { read_raw_f32(in, t, path); });
    in.peek();
    if (!in.eof()) {
        throw IoError(path + ": trailing bytes; file does not match count_params total");
    }
    return ckpt;
}

}  // namespace gqkva
