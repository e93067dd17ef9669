#include <cstring>
#include <fstream>
#include <iterator>

#include "calcseg/data.hpp"
#include "calcseg/errors.hpp"

namespace calcseg {

namespace {

constexpr int32_t kHeaderSize = 348;
constexpr int64_t kDataOffset = 352;

enum NiftiType : int16_t {
    kUInt8 = 2,
    kInt16 = 4,
    kInt32 = 8,
    kFloat32 = 16,
    kFloat64 = 64,
    kInt8 = 256,
    kUInt16 = 512,
};

std::vector<char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spill(const std::filesystem::path& path, const std::vector<char>& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("short write to '" + path.string() + "'");
}

template <typename T>
T get(const std::vector<char>& b, size_t off, bool swap) {
    T v;
    std::memcpy(&v, b.data() + off, sizeof(T));
    if (swap) {
        auto* p = reinterpret_cast<unsigned char*>(&v);
        std::reverse(p, p + sizeof(T));
    }
    return v;
}

template <typename T>
void put(std::vector<char>& b, size_t off, T v) {
    std::memcpy(b.data() + off, &v, sizeof(T));
}

void put_string(std::vector<char>& b, size_t off, size_t width, const std::string& s) {
    std::memcpy(b.data() + off, s.data(), std::min(width - 1, s.size()));
}

std::string get_string(const std::vector<char>& b, size_t off, size_t width) {
    const char* p = b.data() + off;
    return std::string(p, strnlen(p, width));
}

bool is_raw(const std::filesystem::path& p) {
    return p.extension() == ".raw" || p.extension() == ".json";
}

std::filesystem::path raw_data_path(const std::filesystem::path& p) {
    auto out = p;
    return out.replace_extension(".raw");
}

std::filesystem::path raw_sidecar_path(const std::filesystem::path& p) {
    auto out = p;
    return out.replace_extension(".json");
}

struct Decoded {
    torch::Tensor data;  // float32 [z, y, x]
    Spacing spacing;
    std::string id;
    std::string patient_id;
};

Decoded decode_nifti(const std::vector<char>& b, const std::string& name) {
    if (b.size() < static_cast<size_t>(kHeaderSize)) {
        throw ParseError("'" + name + "' is shorter than a NIfTI-1 header", b.size());
    }
    bool swap = false;
    int32_t hdr = get<int32_t>(b, 0, false);
    if (hdr != kHeaderSize) {
        swap = true;
        hdr = get<int32_t>(b, 0, true);
        if (hdr != kHeaderSize) throw ParseError("'" + name + "' has sizeof_hdr != 348", 0);
    }
    const std::string magic(b.data() + 344, 4);
    if (magic != std::string("n+1\0", 4)) throw ParseError("'" + name + "' lacks the single-file NIfTI-1 magic", 344);

    const int16_t ndim = get<int16_t>(b, 40, swap);
    if (ndim < 3 || ndim > 7) throw ParseError("'" + name + "' has unsupported dim[0]", 40);
    int64_t extent[7];
    for (int i = 0; i < 7; ++i) extent[i] = i < ndim ? get<int16_t>(b, 42 + 2 * i, swap) : 1;
    for (int i = 0; i < 7; ++i) {
        if (extent[i] < 1) throw ParseError("'" + name + "' has a non-positive dimension", 42 + 2 * i);
        if (i >= 3 && extent[i] != 1) throw ParseError("'" + name + "' is not a single 3D volume", 42 + 2 * i);
    }
    const int16_t datatype = get<int16_t>(b, 70, swap);
    const auto vox_offset = static_cast<int64_t>(get<float>(b, 108, swap));
    if (vox_offset < kHeaderSize) throw ParseError("'" + name + "' has vox_offset inside the header", 108);

    torch::ScalarType st;
    switch (datatype) {
        case kUInt8: st = torch::kUInt8; break;
        case kInt8: st = torch::kInt8; break;
        case kInt16: st = torch::kInt16; break;
        case kUInt16: st = torch::kUInt16; break;
        case kInt32: st = torch::kInt32; break;
        case kFloat32: st = torch::kFloat32; break;
        case kFloat64: st = torch::kFloat64; break;
        default: throw ParseError("'" + name + "' has unsupported datatype " + std::to_string(datatype), 70);
    }
    const int64_t X = extent[0], Y = extent[1], Z = extent[2];
    const int64_t elem = static_cast<int64_t>(c10::elementSize(st));
    const int64_t need = vox_offset + X * Y * Z * elem;
    if (static_cast<int64_t>(b.size()) < need) {
        throw ParseError("'" + name + "' is truncated: expected " + std::to_string(need) + " bytes", b.size());
    }
    auto raw = torch::empty({Z, Y, X}, st);
    std::memcpy(raw.data_ptr(), b.data() + vox_offset, static_cast<size_t>(X * Y * Z * elem));
    if (swap && elem > 1) {
        auto* p = static_cast<unsigned char*>(raw.data_ptr());
        for (int64_t i = 0; i < X * Y * Z; ++i) std::reverse(p + i * elem, p + (i + 1) * elem);
    }
    auto data = raw.to(torch::kFloat32);
    const float slope = get<float>(b, 112, swap);
    const float inter = get<float>(b, 116, swap);
    if (slope != 0.0f && (slope != 1.0f || inter != 0.0f)) data = data * slope + inter;

    Decoded d;
    d.data = data.contiguous();
    d.spacing = {get<float>(b, 80, swap), get<float>(b, 84, swap), get<float>(b, 88, swap)};
    d.id = get_string(b, 148, 80);
    d.patient_id = get_string(b, 228, 24);
    return d;
}

std::vector<char> encode_nifti(const torch::Tensor& data, NiftiType type, const Spacing& s, const std::string& id,
                               const std::string& patient_id) {
    if (data.dim() != 3) throw ShapeError("volume files hold [z, y, x] arrays");
    for (int64_t d : data.sizes()) {
        if (d > 32767) throw ShapeError("NIfTI-1 dimensions are limited to 32767");
    }
    const auto st = type == kUInt8 ? torch::kUInt8 : torch::kFloat32;
    auto payload = data.to(torch::kCPU).to(st).contiguous();
    const size_t nbytes = static_cast<size_t>(payload.numel()) * payload.element_size();
    std::vector<char> b(static_cast<size_t>(kDataOffset) + nbytes, 0);
    put<int32_t>(b, 0, kHeaderSize);
    put<char>(b, 38, 'r');
    put<int16_t>(b, 40, 3);
    put<int16_t>(b, 42, static_cast<int16_t>(data.size(2)));
    put<int16_t>(b, 44, static_cast<int16_t>(data.size(1)));
    put<int16_t>(b, 46, static_cast<int16_t>(data.size(0)));
    for (int i = 4; i < 8; ++i) put<int16_t>(b, 40 + 2 * i, 1);
    put<int16_t>(b, 70, type);
    put<int16_t>(b, 72, static_cast<int16_t>(8 * payload.element_size()));
    put<float>(b, 76, 1.0f);
    put<float>(b, 80, static_cast<float>(s.x));
    put<float>(b, 84, static_cast<float>(s.y));
    put<float>(b, 88, static_cast<float>(s.z));
    put<float>(b, 108, static_cast<float>(kDataOffset));
    put<float>(b, 112, 1.0f);
    put<char>(b, 123, 2);  // millimetres
    put_string(b, 148, 80, id);
    put_string(b, 228, 24, patient_id);
    put<int16_t>(b, 252, 1);
    put_string(b, 344, 4, std::string("n+1"));
    std::memcpy(b.data() + kDataOffset, payload.data_ptr(), nbytes);
    return b;
}

Decoded decode_raw(const std::filesystem::path& path) {
    const auto sidecar = raw_sidecar_path(path);
    const auto text = slurp(sidecar);
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(text.begin(), text.end());
    } catch (const nlohmann::json::parse_error& e) {
        throw ParseError("sidecar '" + sidecar.string() + "' is not valid JSON", e.byte);
    }
    Decoded d;
    try {
        const auto& dims = meta.at("dims");
        const auto& sp = meta.at("spacing");
        const int64_t X = dims.at(0), Y = dims.at(1), Z = dims.at(2);
        d.spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
        d.id = meta.value("id", "");
        d.patient_id = meta.value("patient_id", "");
        const std::string dtype = meta.value("dtype", "float32");
        if (X < 1 || Y < 1 || Z < 1) throw ParseError("sidecar has a non-positive dimension", 0);
        const auto st = dtype == "uint8" ? torch::kUInt8 : torch::kFloat32;
        if (dtype != "uint8" && dtype != "float32") throw ParseError("sidecar dtype must be float32 or uint8", 0);
        const auto bytes = slurp(raw_data_path(path));
        const size_t need = static_cast<size_t>(X * Y * Z) * c10::elementSize(st);
        if (bytes.size() != need) {
            throw ParseError("raw file '" + raw_data_path(path).string() + "' holds " + std::to_string(bytes.size()) +
                                 " bytes, expected " + std::to_string(need),
                             std::min(bytes.size(), need));
        }
        auto raw = torch::empty({Z, Y, X}, st);
        std::memcpy(raw.data_ptr(), bytes.data(), need);
        d.data = raw.to(torch::kFloat32).contiguous();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("sidecar '" + sidecar.string() + "' is missing fields: " + e.what(), 0);
    }
    return d;
}

void encode_raw(const torch::Tensor& data, bool as_mask, const Spacing& s, const std::string& id,
                const std::string& patient_id, const std::filesystem::path& path) {
    if (data.dim() != 3) throw ShapeError("volume files hold [z, y, x] arrays");
    auto payload = data.to(torch::kCPU).to(as_mask ? torch::kUInt8 : torch::kFloat32).contiguous();
    std::vector<char> bytes(static_cast<size_t>(payload.numel()) * payload.element_size());
    std::memcpy(bytes.data(), payload.data_ptr(), bytes.size());
    nlohmann::json meta = {{"dims", {data.size(2), data.size(1), data.size(0)}},
                           {"spacing", {s.x, s.y, s.z}},
                           {"id", id},
                           {"patient_id", patient_id},
                           {"dtype", as_mask ? "uint8" : "float32"}};
    spill(raw_data_path(path), bytes);
    const std::string text = meta.dump(2);
    spill(raw_sidecar_path(path), std::vector<char>(text.begin(), text.end()));
}

Decoded decode_any(const std::filesystem::path& path) {
    if (is_raw(path)) return decode_raw(path);
    return decode_nifti(slurp(path), path.string());
}

}  // namespace

Volume read_volume(const std::filesystem::path& path) {
    auto d = decode_any(path);
    try {
        return make_volume(d.data, d.spacing, d.id, d.patient_id);
    } catch (const Error& e) {
        throw ParseError("'" + path.string() + "' decodes to an invalid volume: " + e.what(), 0);
    }
}

void write_volume(const Volume& volume, const std::filesystem::path& path) {
    validate(volume);
    if (is_raw(path)) {
        encode_raw(volume.data, false, volume.spacing, volume.id, volume.patient_id, path);
        return;
    }
    spill(path, encode_nifti(volume.data, kFloat32, volume.spacing, volume.id, volume.patient_id));
}

torch::Tensor read_mask(const std::filesystem::path& path) {
    return (decode_any(path).data > 0.5f).to(torch::kUInt8);
}

void write_mask(const torch::Tensor& mask, const Spacing& spacing, const std::filesystem::path& path) {
    auto m = (mask != 0).to(torch::kUInt8);
    if (is_raw(path)) {
        encode_raw(m, true, spacing, "", "", path);
        return;
    }
    spill(path, encode_nifti(m, kUInt8, spacing, "", ""));
}

std::filesystem::path label_path_for(const std::filesystem::path& volume_path) {
    return volume_path.parent_path() /
           (volume_path.stem().string() + "_label" + volume_path.extension().string());
}

}  // namespace calcseg
