#include "volsynth/tensor/checkpoint.hpp"

#include <fstream>
#include <type_traits>

#include "volsynth/util/binary_io.hpp"

namespace volsynth::tensor {

namespace {

constexpr const char* kFormat = "volsynth-checkpoint";

nlohmann::json parse_header(std::istream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line) || in.eof()) {
        throw TruncatedError("checkpoint " + path.string() + ": missing header line");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("checkpoint " + path.string() + ": malformed header: " + e.what());
    }
    if (!header.is_object() || header.value("format", "") != kFormat) {
        throw BadMagicError("checkpoint " + path.string() + ": not a volsynth checkpoint");
    }
    if (header.value("version", 0) != kCheckpointVersion) {
        throw FormatError("checkpoint " + path.string() + ": unsupported version");
    }
    return header;
}

}  // namespace

const char* to_string(Precision p) { return p == Precision::f32 ? "f32" : "f64"; }

template <typename T>
void write_checkpoint(const std::filesystem::path& path, const ParameterSet<T>& params, const nlohmann::json& meta) {
    static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
    nlohmann::json header;
    header["format"] = kFormat;
    header["version"] = kCheckpointVersion;
    header["precision"] = std::is_same_v<T, float> ? "f32" : "f64";
    header["params"] = nlohmann::json::array();
    for (const auto& [name, value] : params) {
        header["params"].push_back({{"name", name}, {"shape", value.shape()}});
    }
    header["meta"] = meta;

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + path.string() + " for writing");
    out << header.dump() << '\n';
    for (const auto& [name, value] : params) write_le_array<T>(out, value.data());
    if (!out) throw Error("failed writing checkpoint " + path.string());
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    return parse_header(in, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    const nlohmann::json header = parse_header(in, path);

    Checkpoint ckpt;
    const std::string precision = header.value("precision", "");
    if (precision == "f32") {
        ckpt.precision = Precision::f32;
    } else if (precision == "f64") {
        ckpt.precision = Precision::f64;
    } else {
        throw FormatError("checkpoint " + path.string() + ": unknown precision '" + precision + "'");
    }
    ckpt.meta = header.value("meta", nlohmann::json::object());

    for (const auto& entry : header.at("params")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        Tensor<double> t(shape);
        for (std::size_t i = 0; i < t.size(); ++i) {
            bool ok;
            if (ckpt.precision == Precision::f32) {
                float v = 0;
                ok = read_le(in, v);
                t[i] = v;
            } else {
                double v = 0;
                ok = read_le(in, v);
                t[i] = v;
            }
            if (!ok) throw TruncatedError("checkpoint " + path.string() + ": payload ends inside '" + name + "'");
        }
        ckpt.params.add(name, std::move(t));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw LengthMismatchError("checkpoint " + path.string() + ": trailing bytes after payload");
    }
    return ckpt;
}

template void write_checkpoint(const std::filesystem::path&, const ParameterSet<float>&, const nlohmann::json&);
template void write_checkpoint(const std::filesystem::path&, const ParameterSet<double>&, const nlohmann::json&);

}  // namespace volsynth::tensor
